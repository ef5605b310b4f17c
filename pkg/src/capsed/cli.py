"""Command-line entry point: ``capsed <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data as dio
from .capsnet import (
    CapsNet, ConvBlockConfig, DetectionCapsConfig, ModelConfig, PrimaryCapsConfig, build_model, preset,
)
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .features import FeatureConfig, apply_norm, extract_features, fit_norm, load_audio, n_frames
from .metrics import Event, EventRoll, EventStats, SegmentStats, event_error_rate_onset, events_from_roll, \
    roll_from_events, segment_error_rate
from .training import (
    OptimizerConfig, SearchError, SearchSpace, Stream, binarize, monophonic_postprocess, predict_streams, random_search,
    train, trial_seeds,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SUBCOMMANDS = ("synth", "features", "train", "predict", "evaluate", "search", "inspect")

log = logging.getLogger("capsed")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def load_config(path) -> dict:
    """JSON file with optional sections: features, model, preset, optimizer, search, splits, synth."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def _build(cls, section: dict, name: str):
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad '{name}' section: {exc}") from None


def feature_config(cfg: dict) -> FeatureConfig:
    return _build(FeatureConfig, cfg.get("features", {}), "features")


def optimizer_config(cfg: dict, args) -> OptimizerConfig:
    section = dict(cfg.get("optimizer", {}))
    if getattr(args, "max_epochs", None) is not None:
        section["max_epochs"] = args.max_epochs
    if getattr(args, "patience", None) is not None:
        section["patience"] = args.patience
    return _build(OptimizerConfig, section, "optimizer")


def default_model(input_shape, n_classes: int) -> ModelConfig:
    """Small architecture used when the config names no model or preset."""
    return ModelConfig(
        input_shape=tuple(input_shape),
        blocks=[ConvBlockConfig(16, (3, 3), 2, batchnorm=True), ConvBlockConfig(16, (3, 3), 2, batchnorm=True)],
        primary=PrimaryCapsConfig(4, 8, (3, 3)),
        detection=DetectionCapsConfig(n_classes, 8),
    )


def model_config(cfg: dict, features: FeatureConfig, n_classes: int, head: str | None,
                 routing: str | None) -> ModelConfig:
    input_shape = (features.context_T, features.n_features, features.channels)
    if "preset" in cfg:
        mc = preset(cfg["preset"], channels=features.channels, context_T=features.context_T, F=features.n_features)
        d = mc.to_dict()
        d["detection"]["n_classes"] = n_classes
    elif "model" in cfg:
        d = dict(cfg["model"])
        d["input_shape"] = list(input_shape)
        d.setdefault("detection", {})["n_classes"] = n_classes
    else:
        d = default_model(input_shape, n_classes).to_dict()
    if head is not None:
        d["head"] = head
    if routing is not None:
        d.setdefault("routing", {})["mode"] = routing
    try:
        return ModelConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from None


def splits(manifest: dio.Manifest, cfg: dict) -> tuple[list, list, list]:
    """(train, val, test) entries; defaults put fold 0 in validation and no test fold."""
    section = cfg.get("splits", {})
    val_folds = set(section.get("val_folds", [0]))
    test_folds = set(section.get("test_folds", []))
    if any(e.fold < 0 for e in manifest.entries):
        raise DataError("manifest entries lack fold assignments")
    tr = [e for e in manifest.entries if e.fold not in val_folds | test_folds]
    va = [e for e in manifest.entries if e.fold in val_folds]
    te = [e for e in manifest.entries if e.fold in test_folds]
    if not tr or not va:
        raise DataError("training and validation splits must both be non-empty")
    return tr, va, te


def _manifest_path(arg) -> Path:
    if arg is not None:
        p = Path(arg)
        return p / "manifest.json" if p.is_dir() else p
    return dio.default_data_dir() / "manifest.json"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    section = dict(cfg.get("synth", {}))
    if args.spec is not None:
        section.update(load_config(args.spec))
    for key in ("n_files", "file_length", "n_classes", "overlap_fraction", "ebr_db", "n_folds"):
        value = getattr(args, key)
        if value is not None:
            section[key] = value
    section["seed"] = args.seed
    spec = _build(dio.SynthSpec, section, "synth")
    out = Path(args.out) if args.out else dio.default_data_dir()
    manifest = dio.synthesize_dataset(spec, out, jobs=args.jobs)
    print(json.dumps({"manifest": str(out / "manifest.json"), "files": len(manifest.entries),
                      "labels": manifest.labels}))
    return EXIT_OK


def cmd_features(args, cfg) -> int:
    manifest = dio.Manifest.load(_manifest_path(args.manifest))
    fc = feature_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    folded = all(e.fold >= 0 for e in manifest.entries)
    train_entries = splits(manifest, cfg)[0] if folded else manifest.entries
    raw = {e.audio: dio.entry_features(manifest, e, fc) for e in manifest.entries}
    norm = fit_norm([raw[e.audio][0] for e in train_entries])
    norm.save(out / "norm.json")
    for e in manifest.entries:
        feats, roll = raw[e.audio]
        stem = Path(e.audio).stem
        np.save(out / f"{stem}.features.npy", apply_norm(feats, norm))
        np.save(out / f"{stem}.roll.npy", roll)
    print(json.dumps({"out": str(out), "files": len(manifest.entries), "shape_F_C": list(norm.mean.shape)}))
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    manifest = dio.Manifest.load(_manifest_path(args.manifest))
    fc = feature_config(cfg)
    tr, va, _ = splits(manifest, cfg)
    train_streams, norm = dio.load_streams(manifest, tr, fc)
    val_streams, _ = dio.load_streams(manifest, va, fc, norm)
    mc = model_config(cfg, fc, len(manifest.labels), args.head, args.routing)
    _, init_seed, train_seed = trial_seeds(args.seed, 1)[0]
    model = build_model(mc, init_seed)
    result = train(model, train_streams, val_streams, optimizer_config(cfg, args), seed=train_seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model, fc, norm, manifest.labels, extra={"seed": args.seed})
    norm.save(out.with_suffix(".norm.json"))
    report = Path(args.report) if args.report else out.with_suffix(".report.jsonl")
    report.write_text(result.report.to_jsonl(include_timing=args.timing))
    print(json.dumps({"checkpoint": str(out), "report": str(report), "best_epoch": result.report.best_epoch,
                      "best_val_er": result.report.best_val_er, "n_params": model.n_params}))
    return EXIT_OK


def predict_file(ckpt, audio_path) -> np.ndarray:
    """Frame probabilities ``(frames, K)`` for one audio file."""
    fc = ckpt.features
    audio, _ = load_audio(audio_path, fc.sample_rate)
    feats = apply_norm(extract_features(audio, fc), ckpt.norm)
    stream = Stream(Path(audio_path).stem, feats, np.zeros((feats.shape[0], len(ckpt.labels)), dtype=np.int8))
    return predict_streams(ckpt.model, [stream])[0]


def write_probabilities(path, probs: np.ndarray, labels, frame_hop: float) -> None:
    """Frame-indexed records: ``frame<TAB>time<TAB>p_label...`` with a header row."""
    lines = ["frame\ttime\t" + "\t".join(labels)]
    for t, row in enumerate(probs):
        lines.append(f"{t}\t{t * frame_hop:.3f}\t" + "\t".join(f"{p:.6f}" for p in row))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_predict(args, cfg) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hop = ckpt.features.frame_hop_s
    audio_paths = []
    for a in args.audio:
        p = Path(a)
        audio_paths.extend(sorted(p.glob("*.wav")) if p.is_dir() else [p])
    if not audio_paths:
        raise DataError("no audio files to predict")
    for path in audio_paths:
        probs = predict_file(ckpt, path)
        if args.monophonic:
            events = [ev for k, label in enumerate(ckpt.labels)
                      for ev in monophonic_postprocess(probs[:, k], args.decay_len, args.median_win, args.threshold,
                                                       hop, label)]
            events.sort(key=lambda e: (e.onset, e.label))
        else:
            events = events_from_roll(EventRoll(binarize(probs, args.threshold), ckpt.labels, hop))
        dio.write_annotations(out / f"{path.stem}.tsv", events)
        if args.probs:
            write_probabilities(out / f"{path.stem}.probs.tsv", probs, ckpt.labels, hop)
    print(json.dumps({"out": str(out), "files": len(audio_paths)}))
    return EXIT_OK


def _score_file(job):
    ref_tsv, hyp_tsv, labels, frames, mode, collar = job
    ref = dio.parse_annotations(ref_tsv, labels)
    hyp = dio.parse_annotations(hyp_tsv, labels) if hyp_tsv.exists() else []
    if mode == "event":
        return event_error_rate_onset(ref, hyp, collar)[1]
    return segment_error_rate(roll_from_events(ref, 0.02, frames, labels),
                              roll_from_events(hyp, 0.02, frames, labels))[1]


def _n_frames_for(ref_tsv: Path, events: list[Event]) -> int:
    wav = ref_tsv.with_suffix(".wav")
    if wav.exists():
        audio, _ = load_audio(wav, None)
        return n_frames(audio.shape[1], FeatureConfig())
    end = max((e.offset for e in events), default=0.0)
    return max(1, int(math.ceil(end / 0.02 - 1e-9)))


def cmd_evaluate(args, cfg) -> int:
    ref_dir, hyp_dir = Path(args.ref), Path(args.hyp)
    manifest_file = ref_dir / "manifest.json"
    if manifest_file.exists():
        manifest = dio.Manifest.load(manifest_file)
        labels = manifest.labels
        scenes = {Path(e.annotation).stem: e.scene for e in manifest.entries}
        refs = [ref_dir / e.annotation for e in manifest.entries]
        if args.folds:
            wanted = {int(f) for f in args.folds.split(",")}
            refs = [ref_dir / e.annotation for e in manifest.entries if e.fold in wanted]
    else:
        refs = sorted(ref_dir.glob("*.tsv"))
        scenes = {}
        labels = sorted({e.label for r in refs for e in dio.parse_annotations(r)})
    if not refs:
        raise DataError(f"no reference annotations in {ref_dir}")
    jobs = []
    for r in refs:
        frames = _n_frames_for(r, dio.parse_annotations(r, labels))
        jobs.append((r, hyp_dir / r.name, labels, frames, args.mode, args.collar))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            stats = list(pool.map(_score_file, jobs))
    else:
        stats = [_score_file(j) for j in jobs]
    per_scene: dict[str, SegmentStats] = {}
    for r, s in zip(refs, stats):
        scene = scenes.get(r.stem, "all")
        per_scene[scene] = per_scene.get(scene, EventStats() if args.mode == "event" else SegmentStats()) + s
    scene_er = {k: v.error_rate for k, v in sorted(per_scene.items())}
    report = {
        "mode": args.mode,
        "error_rate": float(np.mean(list(scene_er.values()))),
        "scenes": {k: {"error_rate": scene_er[k], "S": v.S, "I": v.I, "D": v.D, "N": v.N}
                   for k, v in sorted(per_scene.items())},
        "files": len(refs),
    }
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_search(args, cfg) -> int:
    manifest = dio.Manifest.load(_manifest_path(args.manifest))
    fc = feature_config(cfg)
    tr, va, _ = splits(manifest, cfg)
    train_streams, norm = dio.load_streams(manifest, tr, fc)
    val_streams, _ = dio.load_streams(manifest, va, fc, norm)
    space = SearchSpace.from_dict(cfg.get("search", {}))
    input_shape = (fc.context_T, fc.n_features, fc.channels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    routing = args.routing or "reset"
    try:
        results = random_search(space, train_streams, val_streams, input_shape, len(manifest.labels), args.trials,
                                optimizer_config(cfg, args), seed=args.seed, head=args.head or "capsule",
                                routing_mode=routing)
    except SearchError as exc:
        (out / "trials.jsonl").write_text("".join(json.dumps(t.row(), sort_keys=True) + "\n" for t in exc.trials))
        raise
    (out / "trials.jsonl").write_text("".join(json.dumps(t.row(), sort_keys=True) + "\n" for t in results))
    best = results[0]
    model = CapsNet(best.config)
    model.set_weights(best.weights)
    save_checkpoint(out / "best.ckpt", model, fc, norm, manifest.labels,
                    extra={"seed": args.seed, "trial": best.index})
    (out / "best.report.jsonl").write_text(best.report.to_jsonl())
    print(json.dumps({"best_trial": best.index, "best_val_er": best.val_er, "n_params": best.n_params,
                      "checkpoint": str(out / "best.ckpt")}))
    return EXIT_OK


def cmd_inspect(args, cfg) -> int:
    if args.preset:
        fc = feature_config(cfg)
        mc = preset(args.preset, channels=fc.channels, context_T=fc.context_T, F=fc.n_features)
        model = CapsNet(mc)
        info = {"preset": args.preset, "census": model.census(), "macs_per_frame": model.macs_per_frame(),
                "model": mc.to_dict()}
    elif args.checkpoint:
        header = read_header(args.checkpoint)
        model = load_checkpoint(args.checkpoint).model
        info = {"head": header["head"], "routing_mode": header["routing_mode"], "labels": header["labels"],
                "census": model.census(), "features": header["features"], "model": header["model"],
                "extra": header["extra"]}
    else:
        raise ConfigError("inspect needs a checkpoint path or --preset")
    sys.stdout.write(json.dumps(info, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    common.add_argument("--config", help="JSON file overriding defaults")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="capsed", description="Capsule networks for polyphonic sound event detection.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic polyphonic dataset")
    p.add_argument("--spec", help="JSON SynthSpec file")
    p.add_argument("--out", help="output directory (default $CAPSED_DATA_DIR or ./data)")
    p.add_argument("--files", dest="n_files", type=int)
    p.add_argument("--length", dest="file_length", type=float, help="seconds per file")
    p.add_argument("--classes", dest="n_classes", type=int)
    p.add_argument("--overlap", dest="overlap_fraction", type=float)
    p.add_argument("--ebr", dest="ebr_db", type=float, help="event-to-background ratio in dB")
    p.add_argument("--folds", dest="n_folds", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", parents=[common], help="extract normalized features for a manifest")
    p.add_argument("manifest", nargs="?")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    def model_flags(p):
        p.add_argument("--routing", choices=("reset", "persistent"))
        p.add_argument("--head", choices=("capsule", "cnn"))
        p.add_argument("--max-epochs", type=int)
        p.add_argument("--patience", type=int)

    p = sub.add_parser("train", parents=[common], help="train a model on a manifest")
    p.add_argument("manifest", nargs="?")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="training report path (default <out>.report.jsonl)")
    p.add_argument("--timing", action="store_true", help="include wall time in the report")
    model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="detect events in audio files")
    p.add_argument("checkpoint")
    p.add_argument("audio", nargs="+", help="WAV files or directories")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--probs", action="store_true", help="also write per-frame probabilities")
    p.add_argument("--monophonic", action="store_true",
                   help="smooth each class curve and keep only its longest active run")
    p.add_argument("--decay-len", type=int, default=10, help="exponential decay window in frames (default 10)")
    p.add_argument("--median-win", type=int, default=5, help="odd median filter length in frames (default 5)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against references")
    p.add_argument("ref", help="directory of reference TSVs (and WAVs / manifest.json)")
    p.add_argument("hyp", help="directory of predicted TSVs")
    p.add_argument("--mode", choices=("segment", "event"), default="segment")
    p.add_argument("--collar", type=float, default=0.5)
    p.add_argument("--folds", help="comma-separated folds to score (needs manifest.json)")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("search", parents=[common], help="random hyperparameter search")
    p.add_argument("manifest", nargs="?")
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=10)
    model_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("inspect", parents=[common], help="print a checkpoint or preset summary")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--preset")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"capsed: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, SearchError) as exc:
        print(f"capsed: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as exc:
        print(f"capsed: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
