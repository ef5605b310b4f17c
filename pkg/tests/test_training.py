import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsed import tensor as tn
from capsed import training
from capsed.capsnet import CapsNet, ConvBlockConfig, DetectionCapsConfig, ModelConfig, PrimaryCapsConfig, RoutingConfig
from capsed.capsnet import RoutingState, build_model
from capsed.errors import ConfigError, DataError, NumericError
from capsed.features import FeatureConfig, apply_norm, fit_norm, logmel, n_frames
from capsed.metrics import Event
from capsed.tensor import Tensor
from capsed.training import (
    AdaDelta, AdaDeltaState, EarlyStopping, binarize, OptimizerConfig, SearchError, SearchSpace, Stream, TrainReport,
    adadelta_step, evaluate_streams, exponential_decay_window, median_filter, monophonic_postprocess,
    predict_streams, random_search, train, trial_seeds,
)


def tiny_config(head="capsule", mode="reset", T=4, F=6, n_classes=2):
    return ModelConfig(
        input_shape=(T, F, 1),
        blocks=[ConvBlockConfig(3, (3, 3), 2, "relu", 0.0, True, False)],
        primary=PrimaryCapsConfig(2, 2, (2, 2)),
        detection=DetectionCapsConfig(n_classes, 3),
        routing=RoutingConfig(2, mode),
        head=head,
        mlp_dims=[4],
    )


def toy_streams(n=3, frames=10, F=6, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        roll = (rng.random((frames, 2)) < 0.4).astype(np.int8)
        feats = rng.standard_normal((frames, F)) * 0.3
        feats[:, :3] += 2.0 * roll[:, :1]
        feats[:, 3:] += 2.0 * roll[:, 1:]
        out.append(Stream(f"s{i}", feats, roll))
    return out


# ---------------------------------------------------------------------------
# AdaDelta
# ---------------------------------------------------------------------------

def test_adadelta_trace_matches_hand_recurrence():
    """Ten steps on f(x) = x^2 against a scalar transcription of the update."""
    cfg = OptimizerConfig(lr=1.0, rho=0.95, eps=1e-6)
    x = np.array([3.0])
    state = AdaDeltaState.zeros_like(x)
    ex, eg2, edx2 = 3.0, 0.0, 0.0
    for _ in range(10):
        g = 2.0 * ex
        eg2 = 0.95 * eg2 + 0.05 * g * g
        dx = -math.sqrt(edx2 + 1e-6) / math.sqrt(eg2 + 1e-6) * g
        edx2 = 0.95 * edx2 + 0.05 * dx * dx
        ex += dx
        x = adadelta_step(x, 2.0 * x, state, cfg)
        assert x[0] == pytest.approx(ex, rel=1e-15, abs=0)
        assert state.sq_grad[0] == pytest.approx(eg2, rel=1e-15)
        assert state.sq_delta[0] == pytest.approx(edx2, rel=1e-15)


def test_adadelta_first_step_size():
    # with empty accumulators the first step is -sqrt(eps / ((1 - rho) g^2 + eps)) * g
    x = adadelta_step(np.array([0.0]), np.array([1.0]), AdaDeltaState.zeros_like(np.zeros(1)), OptimizerConfig())
    assert x[0] == pytest.approx(-math.sqrt(1e-6 / (0.05 + 1e-6)), rel=1e-14)


def test_zero_gradient_step_leaves_parameters_unchanged():
    x = np.random.default_rng(0).standard_normal(5)
    state = AdaDeltaState.zeros_like(x)
    assert np.array_equal(adadelta_step(x, np.zeros(5), state, OptimizerConfig()), x)
    assert not state.sq_grad.any() and not state.sq_delta.any()


def test_adadelta_rejects_non_finite_gradient():
    p = Tensor(np.ones(2), requires_grad=True)
    p.grad = np.array([1.0, np.nan])
    with pytest.raises(NumericError, match="w"):
        AdaDelta({"w": p}, OptimizerConfig()).step()


def test_adadelta_skips_params_without_grad():
    p = Tensor(np.ones(2), requires_grad=True)
    opt = AdaDelta({"w": p}, OptimizerConfig())
    opt.step()
    assert np.array_equal(p.data, np.ones(2))


def test_optimizer_config_validation():
    with pytest.raises(ConfigError):
        OptimizerConfig(lr=0)
    with pytest.raises(ConfigError):
        OptimizerConfig(max_epochs=5, patience=10)


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

def test_patience_example():
    values = [0.9, 0.8] + [0.8] * 20
    stopper = EarlyStopping(20)
    stopped_at = None
    for epoch, v in enumerate(values, start=1):
        if stopper.update(epoch, v):
            stopped_at = epoch
            break
    assert stopped_at == 22
    assert stopper.best_epoch == 2 and stopper.best == 0.8


def test_nan_never_counts_as_improvement():
    stopper = EarlyStopping(2)
    assert not stopper.update(1, float("nan"))
    assert stopper.best_epoch == 0
    assert not stopper.update(2, 0.5)
    assert stopper.best_epoch == 2


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 2, allow_nan=False), min_size=1, max_size=40), st.integers(1, 10))
def test_stopper_tracks_first_minimum(values, patience):
    stopper = EarlyStopping(patience)
    seen = []
    for epoch, v in enumerate(values, start=1):
        seen.append(v)
        if stopper.update(epoch, v):
            break
    assert stopper.best == min(seen)
    assert stopper.best_epoch == seen.index(min(seen)) + 1
    assert len(seen) == len(values) or len(seen) - stopper.best_epoch == patience


def test_train_stops_by_patience_and_restores_best(monkeypatch):
    script = iter([0.9, 0.8] + [0.8] * 20 + [0.1] * 5)

    class Fake:
        def __init__(self):
            self.error_rate = next(script)

    snapshots = []
    real_get = CapsNet.get_weights

    def spy(self):
        w = real_get(self)
        snapshots.append(w)
        return w

    monkeypatch.setattr(training, "evaluate_streams", lambda *a, **k: Fake())
    monkeypatch.setattr(CapsNet, "get_weights", spy)
    model = build_model(tiny_config(), 0)
    res = train(model, toy_streams(1), toy_streams(1, seed=1), OptimizerConfig(max_epochs=50, patience=20))
    assert len(res.report.epochs) == 22
    assert res.report.best_epoch == 2 and res.report.stop_reason == "patience"
    best = snapshots[2]  # [initial, epoch 1, epoch 2]
    assert all(np.array_equal(best[k], v) for k, v in res.weights.items())
    assert all(np.array_equal(model.params[k].data, best[k]) for k in model.params)


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("head,mode", [("capsule", "reset"), ("capsule", "persistent"), ("cnn", "reset")])
def test_train_is_deterministic_and_reports_best(head, mode):
    opt = OptimizerConfig(batch_size=2, max_epochs=3, patience=3)
    runs = []
    for _ in range(2):
        model = build_model(tiny_config(head, mode), 1)
        res = train(model, toy_streams(3), toy_streams(2, seed=5), opt, seed=7)
        runs.append((res, model))
    (a, ma), (b, _) = runs
    assert a.report.to_jsonl() == b.report.to_jsonl()
    assert len(a.report.epochs) == 3
    ers = [e.val_er for e in a.report.epochs]
    assert a.report.best_val_er == min(ers) and ers.index(min(ers)) + 1 == a.report.best_epoch
    assert evaluate_streams(ma, toy_streams(2, seed=5)).error_rate == pytest.approx(a.report.best_val_er, abs=1e-12)


def test_full_batch_loss_decreases_over_five_steps():
    model = build_model(tiny_config(), 0)
    stream = toy_streams(1, frames=16, seed=2)[0]
    x = np.stack([w.values for w in stream.windows(4)])
    y = np.stack(stream.label_windows(4))
    opt = AdaDelta(model.params, OptimizerConfig())
    losses = []
    for _ in range(6):
        loss = model.loss(model(x, training=True), y)
        losses.append(loss.item())
        opt.zero_grad()
        tn.backward(loss)
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_separable_tones_are_learned():
    """Two classes of distinct pure tones in noise: validation ER <= 0.2 within 30 epochs."""
    sr, hop = 16000, 0.02
    cfg = FeatureConfig(feature_kind="logmel")

    def stream(seed):
        rng = np.random.default_rng(seed)
        audio = 0.01 * rng.standard_normal(sr * 8)
        roll = np.zeros((n_frames(len(audio), cfg), 2), dtype=np.int8)
        t = 0.2
        while t < 7.0:
            k, dur = int(rng.integers(2)), float(rng.uniform(0.4, 1.0))
            a, b = int(t * sr), int((t + dur) * sr)
            audio[a:b] += 0.3 * np.sin(2 * np.pi * (500.0, 3000.0)[k] * np.arange(b - a) / sr)
            roll[int(round(t / hop)):int(round((t + dur) / hop)), k] = 1
            t += dur + float(rng.uniform(0.2, 0.6))
        return logmel(audio, cfg), roll

    raw = [stream(s) for s in range(5)]
    norm = fit_norm([f for f, _ in raw[:3]])
    streams = [Stream(f"t{i}", apply_norm(f, norm), r) for i, (f, r) in enumerate(raw)]
    config = ModelConfig(input_shape=(32, 40, 1), blocks=[ConvBlockConfig(4, (3, 3), 4, "relu", 0.0, True, False)],
                         primary=PrimaryCapsConfig(2, 2, (3, 3)), detection=DetectionCapsConfig(2, 4),
                         routing=RoutingConfig(2))
    res = train(build_model(config, 0), streams[:3], streams[3:], OptimizerConfig(batch_size=8, max_epochs=30,
                                                                                    patience=5))
    assert res.report.best_val_er <= 0.2


def test_training_lowers_loss():
    model = build_model(tiny_config(), 2)
    res = train(model, toy_streams(4, frames=16), toy_streams(2, seed=9), OptimizerConfig(batch_size=4, max_epochs=8,
                                                                                             patience=8))
    losses = [e.train_loss for e in res.report.epochs]
    assert losses[-1] < losses[0]


def test_report_jsonl_excludes_wall_time_by_default():
    report = TrainReport(seed=3, best_epoch=1, best_val_er=0.5, stop_reason="max_epochs", wall_time=12.5)
    rows = [json.loads(line) for line in report.to_jsonl().splitlines()]
    assert "wall_time" not in rows[-1] and rows[-1]["seed"] == 3
    assert json.loads(report.to_jsonl(include_timing=True).splitlines()[-1])["wall_time"] == 12.5


def test_empty_splits_and_mismatched_streams():
    model = build_model(tiny_config(), 0)
    with pytest.raises(DataError):
        train(model, [], toy_streams(1))
    with pytest.raises(DataError):
        Stream("x", np.zeros((5, 6)), np.zeros((4, 2)))


def test_predict_drops_padding_frames():
    model = build_model(tiny_config(), 0)
    streams = toy_streams(2, frames=10)
    probs = predict_streams(model, streams)
    assert [p.shape for p in probs] == [(10, 2), (10, 2)]


def test_persistent_prediction_chains_windows():
    model = build_model(tiny_config(mode="persistent"), 3)
    streams = toy_streams(3, frames=10)
    probs = predict_streams(model, streams, batch_size=2)
    for s, p in zip(streams, probs):
        state, manual = RoutingState(), []
        for w in s.windows(4):
            out = model(w.values[None], state=state)
            manual.append(out.probs.data[0, : w.n_valid])
            state = RoutingState(out.state.beta)
        np.testing.assert_allclose(p, np.concatenate(manual), atol=1e-12)
    reset = build_model(tiny_config(mode="reset"), 3)
    ind = predict_streams(reset, streams)
    for p, q in zip(probs, ind):
        np.testing.assert_allclose(p[:4], q[:4], atol=1e-12)
        assert np.max(np.abs(p[4:] - q[4:])) > 1e-9


def test_batching_does_not_change_predictions():
    model = build_model(tiny_config(), 4)
    streams = toy_streams(3, frames=10)
    for a, b in zip(predict_streams(model, streams, 1), predict_streams(model, streams, 7)):
        np.testing.assert_allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------

def test_binarize_threshold_is_inclusive():
    probs = np.random.default_rng(0).random((20, 3))
    probs[0, 0] = 0.5
    out = binarize(probs)
    expected = [[1 if probs[t, k] >= 0.5 else 0 for k in range(3)] for t in range(20)]
    assert out.tolist() == expected and out[0, 0] == 1
    assert not binarize(np.zeros((4, 2))).any()


def test_decay_window():
    w = exponential_decay_window(10)
    assert w.sum() == pytest.approx(1.0) and w[-1] / w[0] == pytest.approx(0.01)
    assert np.all(np.diff(w) < 0)


def test_median_filter():
    assert median_filter(np.array([0, 0, 1, 0, 0, 1, 1, 1, 0]), 3).tolist() == [0, 0, 0, 0, 0, 1, 1, 1, 0]
    with pytest.raises(ConfigError):
        median_filter(np.zeros(3), 4)


def test_median_removes_short_spikes():
    x = np.zeros(40)
    x[[5, 12, 13, 30]] = 1.0
    assert not median_filter(x, 5).any()


def test_pulse_onset_within_one_frame():
    for start in (20, 37, 55):
        curve = np.zeros(150)
        curve[start:start + 40] = 0.95
        (ev,) = monophonic_postprocess(curve, median_win=5)
        assert abs(ev.onset / 0.02 - start) <= 1 + 1e-9


def test_monophonic_keeps_longest_run():
    curve = np.zeros(200)
    curve[10:30] = 1.0
    curve[60:150] = 1.0
    events = monophonic_postprocess(curve, label="dog")
    assert len(events) == 1
    ev = events[0]
    assert ev.label == "dog" and 1.1 <= ev.onset <= 1.4 and 2.9 <= ev.offset <= 3.2
    assert monophonic_postprocess(np.zeros(50)) == []
    assert isinstance(ev, Event)


# ---------------------------------------------------------------------------
# random search
# ---------------------------------------------------------------------------

def test_log_uniform_kernel_median():
    rng = np.random.default_rng(0)
    draws = [training._loguniform_int(rng, 4, 64) for _ in range(4000)]
    assert 14 <= np.median(draws) <= 18
    assert min(draws) >= 4 and max(draws) <= 64


def test_single_trial_equals_plain_training():
    space = SearchSpace(n_layers=(1, 1), n_kernels=(2, 4), kernel_dim=(3, 3), pool=(1, 2), n_caps=(2, 3),
                        caps_kernel_dim=(3, 3), caps_kernels=(2, 3), detection_dim=(2, 3), routing=(1, 2))
    opt = OptimizerConfig(batch_size=4, max_epochs=2, patience=2)
    (trial,) = random_search(space, toy_streams(2), toy_streams(1, seed=3), (4, 6, 1), 2, 1, opt, seed=4)
    sample_seed, init_seed, train_seed = trial_seeds(4, 1)[0]
    cfg = space.sample(np.random.default_rng(sample_seed), (4, 6, 1), 2)
    assert cfg == trial.config
    plain = train(build_model(cfg, init_seed), toy_streams(2), toy_streams(1, seed=3), opt, seed=train_seed)
    assert plain.report.to_jsonl() == trial.report.to_jsonl()
    assert all(np.array_equal(plain.weights[k], v) for k, v in trial.weights.items())


def test_trial_seeds_deterministic_and_distinct():
    a, b = trial_seeds(5, 6), trial_seeds(5, 6)
    assert a == b and len(set(a)) == 6
    assert trial_seeds(5, 3) == a[:3]
    assert trial_seeds(6, 3) != a[:3]


def test_sampled_configs_respect_space():
    space = SearchSpace(max_macs_per_frame=200_000)
    rng = np.random.default_rng(1)
    for _ in range(30):
        cfg = space.sample(rng, (16, 40, 1), 3)
        assert 1 <= len(cfg.blocks) <= 4
        assert all(4 <= b.n_kernels <= 64 and 1 <= b.pool <= 5 for b in cfg.blocks)
        assert 1 <= cfg.routing.iterations <= 5
        assert CapsNet(cfg).macs_per_frame() <= 200_000
        cnn = space.sample(rng, (16, 40, 1), 3, head="cnn")
        assert cnn.head == "cnn" and 1 <= len(cnn.mlp_dims) <= 4


def test_random_search_ranks_and_is_reproducible():
    space = SearchSpace(n_layers=(1, 1), n_kernels=(2, 4), kernel_dim=(3, 3), pool=(1, 2), n_caps=(2, 3),
                        caps_kernel_dim=(3, 3), caps_kernels=(2, 3), detection_dim=(2, 3), routing=(1, 2))
    opt = OptimizerConfig(batch_size=4, max_epochs=2, patience=2)
    args = (space, toy_streams(2), toy_streams(1, seed=3), (4, 6, 1), 2, 3, opt)
    a, b = random_search(*args, seed=11), random_search(*args, seed=11)
    assert [r.row() for r in a] == [r.row() for r in b]
    keys = [(r.val_er, r.n_params, r.index) for r in a]
    assert keys == sorted(keys)


def test_search_error_when_every_trial_fails(monkeypatch):
    def boom(*a, **k):
        raise NumericError("diverged")

    monkeypatch.setattr(training, "train", boom)
    space = SearchSpace(n_layers=(1, 1), n_kernels=(2, 2), kernel_dim=(3, 3), pool=(1, 1))
    with pytest.raises(SearchError) as info:
        random_search(space, toy_streams(1), toy_streams(1), (4, 6, 1), 2, 2, seed=0)
    assert len(info.value.trials) == 2 and "diverged" in str(info.value)
