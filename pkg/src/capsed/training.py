"""Optimization, early stopping, decisions and random hyperparameter search."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .capsnet import (
    CapsNet,
    ConvBlockConfig,
    DetectionCapsConfig,
    ModelConfig,
    PrimaryCapsConfig,
    RoutingConfig,
    RoutingState,
    build_model,
)
from .errors import CapsedError, ConfigError, DataError, NumericError
from .features import window_stream
from .metrics import FRAME_HOP, EventRoll, Event, SegmentStats, segment_error_rate

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    lr: float = 1.0
    rho: float = 0.95
    eps: float = 1e-6
    batch_size: int = 20
    max_epochs: int = 100
    patience: int = 20

    def __post_init__(self):
        if min(self.lr, self.rho, self.eps, self.batch_size, self.max_epochs, self.patience) <= 0:
            raise ConfigError("optimizer settings must be positive")
        if self.patience > self.max_epochs:
            raise ConfigError("patience cannot exceed max_epochs")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# AdaDelta
# ---------------------------------------------------------------------------

@dataclass
class AdaDeltaState:
    sq_grad: np.ndarray  # running E[g^2]
    sq_delta: np.ndarray  # running E[dx^2]

    @classmethod
    def zeros_like(cls, p: np.ndarray) -> "AdaDeltaState":
        return cls(np.zeros_like(p), np.zeros_like(p))


def adadelta_step(param: np.ndarray, grad: np.ndarray, state: AdaDeltaState, config: OptimizerConfig) -> np.ndarray:
    """One AdaDelta update; ``state`` is updated in place, the new parameter returned."""
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    rho, eps = config.rho, config.eps
    state.sq_grad = rho * state.sq_grad + (1.0 - rho) * grad * grad
    delta = -(np.sqrt(state.sq_delta + eps) / np.sqrt(state.sq_grad + eps)) * grad
    state.sq_delta = rho * state.sq_delta + (1.0 - rho) * delta * delta
    return param + config.lr * delta


class AdaDelta:
    def __init__(self, params: dict[str, tn.Tensor], config: OptimizerConfig):
        self.params = params
        self.config = config
        self.state = {k: AdaDeltaState.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            try:
                p.data = adadelta_step(p.data, p.grad, self.state[name], self.config)
            except NumericError as exc:
                raise NumericError(f"{name}: {exc}") from None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# Data streams
# ---------------------------------------------------------------------------

@dataclass
class Stream:
    """One recording: normalized features and its frame-level activity."""

    source_id: str
    features: np.ndarray  # (frames, F, C)
    roll: np.ndarray  # (frames, K) of {0, 1}
    scene: str = ""

    def __post_init__(self):
        if self.features.ndim == 2:
            self.features = self.features[..., None]
        if self.features.shape[0] != self.roll.shape[0]:
            raise DataError(f"{self.source_id}: {self.features.shape[0]} feature frames vs {self.roll.shape[0]} label frames")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    def windows(self, T: int):
        return window_stream(self.features, T, source_id=self.source_id)

    def label_windows(self, T: int) -> list[np.ndarray]:
        n = self.n_frames
        out = []
        for start in range(0, n, T):
            chunk = self.roll[start:start + T]
            if chunk.shape[0] < T:
                chunk = np.concatenate([chunk, np.zeros((T - chunk.shape[0], chunk.shape[1]))], axis=0)
            out.append(chunk.astype(np.float64))
        return out


def _check_streams(streams: Sequence[Stream], model: CapsNet, name: str) -> None:
    if not streams:
        raise DataError(f"{name} split is empty")
    T, F, C = model.config.input_shape
    for s in streams:
        if s.features.shape[1:] != (F, C):
            raise DataError(f"{s.source_id}: features {s.features.shape[1:]} do not match model input {(F, C)}")
        if s.roll.shape[1] != model.config.detection.n_classes:
            raise DataError(f"{s.source_id}: {s.roll.shape[1]} label columns, model has {model.config.detection.n_classes} classes")


def _is_persistent(model: CapsNet) -> bool:
    return model.config.head == "capsule" and model.config.routing.mode == "persistent"


def _stack_state(states: list[np.ndarray | None]) -> RoutingState:
    if all(s is None for s in states):
        return RoutingState()
    return RoutingState(np.stack(states))


def predict_streams(model: CapsNet, streams: Sequence[Stream], batch_size: int = 20) -> list[np.ndarray]:
    """Frame probabilities ``(frames, K)`` per stream; padding frames are discarded.

    Windows are non-overlapping.  Streams are advanced window by window in
    lock-step so persistent routing logits flow along each stream.
    """
    T = model.config.input_shape[0]
    persistent = _is_persistent(model)
    wins = [s.windows(T) for s in streams]
    probs = [[] for _ in streams]
    with tn.no_grad():
        if not persistent:
            flat = [(i, w) for i, ws in enumerate(wins) for w in ws]
            for b in range(0, len(flat), batch_size):
                chunk = flat[b:b + batch_size]
                out = model(np.stack([w.values for _, w in chunk]))
                for (i, w), p in zip(chunk, out.probs.data):
                    probs[i].append(p[: w.n_valid])
        else:
            for g in range(0, len(streams), batch_size):
                group = list(range(g, min(g + batch_size, len(streams))))
                states: dict[int, np.ndarray | None] = {i: None for i in group}
                for pos in range(max(len(wins[i]) for i in group)):
                    active = [i for i in group if pos < len(wins[i])]
                    out = model(np.stack([wins[i][pos].values for i in active]),
                                state=_stack_state([states[i] for i in active]))
                    for row, i in enumerate(active):
                        states[i] = out.state.beta[row]
                        probs[i].append(out.probs.data[row][: wins[i][pos].n_valid])
    return [np.concatenate(p, axis=0) for p in probs]


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Activity matrix: 1 where ``p >= threshold``."""
    return (np.asarray(probs) >= threshold).astype(np.int8)


def score_streams(streams: Sequence[Stream], probs: Sequence[np.ndarray], threshold: float = 0.5,
                  frame_hop: float = FRAME_HOP) -> SegmentStats:
    labels = [str(k) for k in range(streams[0].roll.shape[1])]
    total = SegmentStats()
    for s, p in zip(streams, probs):
        ref = EventRoll(s.roll, labels, frame_hop)
        hyp = EventRoll(binarize(p, threshold), labels, frame_hop)
        total = total + segment_error_rate(ref, hyp)[1]
    return total


def evaluate_streams(model: CapsNet, streams: Sequence[Stream], threshold: float = 0.5,
                     batch_size: int = 20) -> SegmentStats:
    return score_streams(streams, predict_streams(model, streams, batch_size), threshold)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class EarlyStopping:
    """Stop once the monitored value has not decreased for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch; returns True when training should stop."""
        if not math.isnan(value) and value < self.best:
            self.best, self.best_epoch, self.stale = value, epoch, 0
            return False
        self.stale += 1
        return self.stale >= self.patience

    def improved_at(self, epoch: int) -> bool:
        return self.best_epoch == epoch


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_er: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_er: float = math.inf
    stop_reason: str = ""
    seed: int = 0
    wall_time: float = 0.0

    def records(self, include_timing: bool = False) -> list[dict]:
        rows = [{"type": "epoch", **asdict(e)} for e in self.epochs]
        summary = {"type": "summary", "best_epoch": self.best_epoch, "best_val_er": self.best_val_er,
                   "stop_reason": self.stop_reason, "seed": self.seed}
        if include_timing:
            summary["wall_time"] = self.wall_time
        return rows + [summary]

    def to_jsonl(self, include_timing: bool = False) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records(include_timing))


def _batches_reset(streams: Sequence[Stream], T: int, batch_size: int, rng: np.random.Generator):
    items = []
    for s in streams:
        for w, y in zip(s.windows(T), s.label_windows(T)):
            items.append((w, y))
    order = rng.permutation(len(items))
    for b in range(0, len(order), batch_size):
        chunk = [items[i] for i in order[b:b + batch_size]]
        yield (np.stack([w.values for w, _ in chunk]), np.stack([y for _, y in chunk]),
               np.stack([w.mask for w, _ in chunk]), None)


def _batches_persistent(streams: Sequence[Stream], T: int, batch_size: int, rng: np.random.Generator):
    """Batches of streams advanced in lock-step; yields the stream indices for state hand-off."""
    order = [int(i) for i in rng.permutation(len(streams))]
    prepared = {i: (streams[i].windows(T), streams[i].label_windows(T)) for i in order}
    for g in range(0, len(order), batch_size):
        group = order[g:g + batch_size]
        for pos in range(max(len(prepared[i][0]) for i in group)):
            active = [i for i in group if pos < len(prepared[i][0])]
            yield (np.stack([prepared[i][0][pos].values for i in active]),
                   np.stack([prepared[i][1][pos] for i in active]),
                   np.stack([prepared[i][0][pos].mask for i in active]),
                   (active, pos == 0))


@dataclass
class TrainResult:
    weights: dict[str, np.ndarray]
    report: TrainReport


def train(model: CapsNet, train_streams: Sequence[Stream], val_streams: Sequence[Stream],
          opt: OptimizerConfig | None = None, seed: int = 0, threshold: float = 0.5,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Fit ``model`` with AdaDelta, keeping the weights of the best validation-ER epoch.

    The model is left holding the best weights.
    """
    opt = opt or OptimizerConfig()
    _check_streams(train_streams, model, "training")
    _check_streams(val_streams, model, "validation")
    T = model.config.input_shape[0]
    rng = np.random.default_rng(seed)
    optimizer = AdaDelta(model.params, opt)
    stopper = EarlyStopping(opt.patience)
    report = TrainReport(seed=seed)
    best_weights = model.get_weights()
    persistent = _is_persistent(model)
    t0 = time.perf_counter()
    for epoch in range(1, opt.max_epochs + 1):
        losses, sizes = [], []
        states: dict[int, np.ndarray] = {}
        batches = (_batches_persistent if persistent else _batches_reset)(train_streams, T, opt.batch_size, rng)
        for x, y, mask, carry in batches:
            state = None
            if persistent:
                active, first = carry
                state = RoutingState() if first else RoutingState(np.stack([states[i] for i in active]))
            out = model(x, training=True, rng=rng, state=state)
            loss = model.loss(out, y, mask)
            optimizer.zero_grad()
            tn.backward(loss)
            optimizer.step()
            if persistent:
                for row, i in enumerate(carry[0]):
                    states[i] = out.state.beta[row]
            losses.append(loss.item())
            sizes.append(x.shape[0])
        train_loss = float(np.average(losses, weights=sizes))
        val_er = evaluate_streams(model, val_streams, threshold, opt.batch_size).error_rate
        rec = EpochRecord(epoch, train_loss, val_er)
        report.epochs.append(rec)
        stop = stopper.update(epoch, val_er)
        if stopper.improved_at(epoch):
            best_weights = model.get_weights()
        log.info("epoch %d loss %.5f val ER %.4f", epoch, train_loss, val_er)
        if on_epoch is not None:
            on_epoch(rec)
        if stop:
            report.stop_reason = "patience"
            break
    else:
        report.stop_reason = "max_epochs"
    report.best_epoch = stopper.best_epoch
    report.best_val_er = stopper.best
    report.wall_time = time.perf_counter() - t0
    model.set_weights(best_weights)
    return TrainResult(best_weights, report)


# ---------------------------------------------------------------------------
# Monophonic post-processing
# ---------------------------------------------------------------------------

def exponential_decay_window(length: int, tail: float = 0.01) -> np.ndarray:
    """Unit-sum decaying window whose last tap is ``tail`` times the first."""
    if length < 1:
        raise ConfigError("decay window needs at least one tap")
    if length == 1:
        return np.ones(1)
    w = np.exp(np.log(tail) * np.arange(length) / (length - 1))
    return w / w.sum()


def median_filter(x: np.ndarray, win: int) -> np.ndarray:
    if win < 1 or win % 2 == 0:
        raise ConfigError(f"median window must be a positive odd number, got {win}")
    half = win // 2
    padded = np.pad(np.asarray(x, dtype=np.float64), half, mode="edge")
    return np.median(np.lib.stride_tricks.sliding_window_view(padded, win), axis=-1)


def monophonic_postprocess(curve: np.ndarray, decay_len: int = 10, median_win: int = 5, threshold: float = 0.5,
                           frame_hop: float = FRAME_HOP, label: str = "event") -> list[Event]:
    """Smooth a single-class probability curve and keep its longest suprathreshold run.

    The curve is causally convolved with the decay window, median filtered and
    thresholded.  Returns at most one event.
    """
    if median_win % 2 == 0:
        raise ConfigError(f"median window must be odd, got {median_win}")
    curve = np.asarray(curve, dtype=np.float64)
    smooth = np.convolve(curve, exponential_decay_window(decay_len))[: len(curve)]
    active = median_filter(smooth, median_win) >= threshold
    edges = np.flatnonzero(np.diff(np.concatenate([[0], active.astype(np.int8), [0]])))
    runs = list(zip(edges[::2], edges[1::2]))
    if not runs:
        return []
    start, stop = max(runs, key=lambda r: (r[1] - r[0], -r[0]))
    return [Event(round(start * frame_hop, 6), round(stop * frame_hop, 6), label)]


# ---------------------------------------------------------------------------
# Random search
# ---------------------------------------------------------------------------

def _loguniform_int(rng: np.random.Generator, lo: float, hi: float) -> int:
    return int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))


@dataclass
class SearchSpace:
    """Hyperparameter ranges (inclusive) and their sampling distributions."""

    batchnorm: tuple[bool, ...] = (True, False)
    n_layers: tuple[int, int] = (1, 4)
    n_kernels: tuple[int, int] = (4, 64)  # log-uniform
    kernel_dim: tuple[int, int] = (3, 8)
    pool: tuple[int, int] = (1, 5)  # frequency axis only
    activation: tuple[str, ...] = ("tanh", "relu")
    dropout: tuple[float, float] = (0.0, 0.5)
    l2: tuple[bool, ...] = (True, False)
    n_caps: tuple[int, int] = (2, 8)  # M
    caps_kernel_dim: tuple[int, int] = (3, 5)
    caps_kernels: tuple[int, int] = (2, 16)  # J
    detection_dim: tuple[int, int] = (2, 16)  # G
    caps_dropout: tuple[float, float] = (0.0, 0.5)
    routing: tuple[int, int] = (1, 5)
    mlp_layers: tuple[int, int] = (1, 4)
    mlp_dim: tuple[int, int] = (16, 256)  # log-uniform
    max_macs_per_frame: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def sample(self, rng: np.random.Generator, input_shape, n_classes: int, head: str = "capsule",
               routing_mode: str = "reset", max_tries: int = 1000) -> ModelConfig:
        """Draw a valid configuration, redrawing when it violates the model or budget constraints."""
        for _ in range(max_tries):
            cfg = self._draw(rng, input_shape, n_classes, head, routing_mode)
            if cfg is None:
                continue
            if self.max_macs_per_frame is not None and CapsNet(cfg).macs_per_frame() > self.max_macs_per_frame:
                continue
            return cfg
        raise ConfigError("could not sample a valid configuration from the search space")

    def _draw(self, rng, input_shape, n_classes, head, routing_mode) -> ModelConfig | None:
        ri = lambda r: int(rng.integers(r[0], r[1] + 1))  # noqa: E731
        choice = lambda c: c[int(rng.integers(len(c)))]  # noqa: E731
        bn = choice(self.batchnorm)
        n_layers = ri(self.n_layers)
        kernels = [_loguniform_int(rng, *self.n_kernels) for _ in range(n_layers)]
        kdim = ri(self.kernel_dim)
        pools = [ri(self.pool) for _ in range(n_layers)]
        act = choice(self.activation)
        drop = float(rng.uniform(*self.dropout))
        l2 = choice(self.l2)
        blocks = [ConvBlockConfig(k, (kdim, kdim), p, act, drop, bn, l2) for k, p in zip(kernels, pools)]
        M, pk, J, G = ri(self.n_caps), ri(self.caps_kernel_dim), ri(self.caps_kernels), ri(self.detection_dim)
        caps_drop = float(rng.uniform(*self.caps_dropout))
        r = ri(self.routing)
        mlp = [_loguniform_int(rng, *self.mlp_dim) for _ in range(ri(self.mlp_layers))]
        try:
            if head == "capsule":
                return ModelConfig(tuple(input_shape), blocks, PrimaryCapsConfig(M, J, (pk, pk), caps_drop),
                                   DetectionCapsConfig(n_classes, G), RoutingConfig(r, routing_mode), "capsule")
            return ModelConfig(tuple(input_shape), blocks, detection=DetectionCapsConfig(n_classes, 2),
                               head="cnn", mlp_dims=mlp)
        except ConfigError:
            return None


def trial_seeds(seed: int, n_trials: int) -> list[tuple[int, int, int]]:
    """(sampling, init, training) seeds for each trial, derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(n_trials)
    return [tuple(int(v) for v in c.generate_state(3)) for c in children]


@dataclass
class TrialResult:
    index: int
    config: ModelConfig
    seeds: tuple[int, int, int]
    n_params: int = 0
    report: TrainReport | None = None
    weights: dict[str, np.ndarray] | None = field(default=None, repr=False)
    error: str | None = None

    @property
    def val_er(self) -> float:
        if self.report is None or math.isnan(self.report.best_val_er):
            return math.inf
        return self.report.best_val_er

    def row(self) -> dict:
        return {"rank_key": [self.val_er, self.n_params, self.index], "trial": self.index,
                "val_er": self.val_er, "n_params": self.n_params, "best_epoch": self.report.best_epoch if self.report else None,
                "error": self.error, "config": self.config.to_dict()}


class SearchError(CapsedError):
    def __init__(self, trials: list[TrialResult]):
        self.trials = trials
        detail = "; ".join(f"trial {t.index}: {t.error}" for t in trials)
        super().__init__(f"all {len(trials)} search trials failed: {detail}")


def run_trial(index: int, config: ModelConfig, seeds: tuple[int, int, int], train_streams, val_streams,
              opt: OptimizerConfig) -> TrialResult:
    model = build_model(config, seeds[1])
    result = TrialResult(index, config, seeds, model.n_params)
    try:
        fit = train(model, train_streams, val_streams, opt, seed=seeds[2])
    except (NumericError, FloatingPointError, ValueError, MemoryError) as exc:
        result.error = f"{type(exc).__name__}: {exc}"
        return result
    result.report, result.weights = fit.report, fit.weights
    return result


def random_search(space: SearchSpace, train_streams: Sequence[Stream], val_streams: Sequence[Stream],
                  input_shape, n_classes: int, n_trials: int, opt: OptimizerConfig | None = None,
                  seed: int = 0, head: str = "capsule", routing_mode: str = "reset",
                  on_trial: Callable[[TrialResult], None] | None = None) -> list[TrialResult]:
    """Sample, train and rank ``n_trials`` configurations.

    Trials are ranked by best validation ER, then fewer parameters, then trial
    index.  ``opt`` is the per-trial training budget.
    """
    if n_trials < 1:
        raise ConfigError("n_trials must be >= 1")
    opt = opt or OptimizerConfig()
    results = []
    for i, seeds in enumerate(trial_seeds(seed, n_trials)):
        cfg = space.sample(np.random.default_rng(seeds[0]), input_shape, n_classes, head, routing_mode)
        res = run_trial(i, cfg, seeds, train_streams, val_streams, opt)
        log.info("trial %d: val ER %.4f (%d params)%s", i, res.val_er, res.n_params,
                 f" failed: {res.error}" if res.error else "")
        if on_trial is not None:
            on_trial(res)
        results.append(res)
    if all(r.error for r in results):
        raise SearchError(results)
    return sorted(results, key=lambda r: (r.error is not None, r.val_er, r.n_params, r.index))
