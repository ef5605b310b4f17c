"""Annotations, manifests, cross-validation folds and a synthetic polyphonic corpus.

The synthetic corpus stands in for real-life recordings: every file is
pink-ish background noise with class events mixed in at a fixed
event-to-background ratio, written as 16-bit WAV plus a tab-separated
``onset<TAB>offset<TAB>label`` annotation.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .features import write_wav
from .metrics import FRAME_HOP, Event, roll_from_events

DATA_DIR_ENV = "CAPSED_DATA_DIR"


# ---------------------------------------------------------------------------
# Annotation files
# ---------------------------------------------------------------------------

def parse_annotations(path, labels: Sequence[str] | None = None) -> list[Event]:
    """Read a TSV annotation file; overlapping events are allowed."""
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'onset<TAB>offset<TAB>label', got {line.strip()!r}")
            try:
                onset, offset = float(parts[0]), float(parts[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: onset/offset are not numbers") from None
            label = parts[2].strip()
            if not (np.isfinite(onset) and np.isfinite(offset)) or onset < 0 or offset < onset:
                raise DataError(f"{path}:{lineno}: invalid interval [{onset}, {offset}]")
            if labels is not None and label not in labels:
                raise DataError(f"{path}:{lineno}: unknown label {label!r}")
            events.append(Event(onset, offset, label))
    return events


def format_annotations(events: Sequence[Event]) -> str:
    return "".join(f"{e.onset:.3f}\t{e.offset:.3f}\t{e.label}\n" for e in events)


def write_annotations(path, events: Sequence[Event]) -> None:
    Path(path).write_text(format_annotations(events), encoding="utf-8")


# ---------------------------------------------------------------------------
# Manifest and folds
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    audio: str
    annotation: str
    scene: str = "synthetic"
    fold: int = -1


@dataclass
class Manifest:
    root: Path
    labels: list[str]
    entries: list[ManifestEntry] = field(default_factory=list)

    def audio_path(self, e: ManifestEntry) -> Path:
        return self.root / e.audio

    def annotation_path(self, e: ManifestEntry) -> Path:
        return self.root / e.annotation

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        doc = {"labels": self.labels, "entries": [asdict(e) for e in self.entries]}
        path.write_text(json.dumps(doc, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from None
        m = cls(path.parent, list(doc["labels"]), [ManifestEntry(**e) for e in doc["entries"]])
        for e in m.entries:
            for p in (m.audio_path(e), m.annotation_path(e)):
                if not p.exists():
                    raise DataError(f"manifest {path} references missing file {p}")
        return m

    def select(self, folds: Sequence[int]) -> list[ManifestEntry]:
        return [e for e in self.entries if e.fold in set(folds)]


def make_folds(n_entries: int, n_folds: int, seed: int = 0) -> list[int]:
    """Fold index for every entry: a seeded permutation dealt round-robin."""
    if n_folds < 1 or n_folds > n_entries:
        raise DataError(f"cannot split {n_entries} entries into {n_folds} folds")
    order = np.random.default_rng(seed).permutation(n_entries)
    folds = [0] * n_entries
    for rank, idx in enumerate(order):
        folds[int(idx)] = rank % n_folds
    return folds


def assign_folds(manifest: Manifest, n_folds: int, seed: int = 0) -> Manifest:
    for e, f in zip(manifest.entries, make_folds(len(manifest.entries), n_folds, seed)):
        e.fold = f
    return manifest


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

PROTOTYPE_KINDS = ("harmonic", "noise", "chirp")


@dataclass
class SynthSpec:
    n_classes: int = 3
    n_files: int = 20
    file_length: float = 60.0  # seconds
    sample_rate: int = 16000
    overlap_fraction: float = 0.3  # target share of frames with two active events
    ebr_db: float = 6.0  # event-to-background ratio
    event_duration: tuple[float, float] = (0.6, 3.0)
    gap: tuple[float, float] = (0.2, 1.5)
    background_rms: float = 0.05
    variability: float = 0.15  # relative spread of per-event prototype parameters
    distractor_rate: float = 20.0  # unlabeled interfering sounds per minute
    seed: int = 0
    n_folds: int = 4
    scene: str = "synthetic"

    def __post_init__(self):
        self.event_duration = tuple(self.event_duration)
        self.gap = tuple(self.gap)
        if self.n_classes < 1 or self.n_files < 1 or self.file_length <= 0:
            raise DataError("n_classes, n_files and file_length must be positive")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise DataError("overlap_fraction must lie in [0, 1)")
        if self.n_classes < 2 and self.overlap_fraction > 0:
            raise DataError("overlapping events need at least two classes")
        if not 0.0 <= self.variability < 0.5 or self.distractor_rate < 0:
            raise DataError("variability must lie in [0, 0.5) and distractor_rate must be >= 0")

    @property
    def labels(self) -> list[str]:
        return [f"{PROTOTYPE_KINDS[k % 3]}{k // 3 if k >= 3 else ''}" for k in range(self.n_classes)]

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["event_duration"] = list(self.event_duration)
        d["gap"] = list(self.gap)
        return d


def _envelope(n: int, sr: int) -> np.ndarray:
    ramp = min(int(0.01 * sr), n // 2)
    env = np.ones(n)
    if ramp > 0:
        env[:ramp] = np.linspace(0.0, 1.0, ramp)
        env[n - ramp:] = np.linspace(1.0, 0.0, ramp)
    return env


def _band_noise(n: int, sr: int, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(f < lo) | (f > hi)] = 0.0
    return np.fft.irfft(spec, n)


def _unit_rms(x: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x))
    return x / rms if rms > 0 else x


def prototype(spec: SynthSpec, k: int, duration: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS waveform of class ``k``.

    Classes cycle through a harmonic stack, a band-limited noise burst and a
    linear chirp; higher class indices shift the frequency region.  Every
    event draws its own pitch, band and sweep within ``spec.variability``.
    """
    sr = spec.sample_rate
    n = max(int(round(duration * sr)), 1)
    t = np.arange(n) / sr
    kind, octave = PROTOTYPE_KINDS[k % 3], k // 3
    jitter = lambda: 1.0 + rng.uniform(-spec.variability, spec.variability)  # noqa: E731
    if kind == "harmonic":
        f0 = 330.0 * (1.5 ** octave) * jitter()
        rolloff = rng.uniform(0.5, 0.85)
        n_harm = max(1, min(8, int((sr / 2 - 1) // f0)))
        x = sum((rolloff ** h) * np.sin(2 * np.pi * f0 * (h + 1) * t + rng.uniform(0, 2 * np.pi))
                for h in range(n_harm))
    elif kind == "noise":
        centre = 3500.0 * (1.15 ** octave) * jitter()
        half = 0.5 * rng.uniform(1500.0, 2500.0)
        x = _band_noise(n, sr, centre - half, min(centre + half, sr / 2), rng)
    else:
        f_start = 700.0 * (1.3 ** octave) * jitter()
        f_end = rng.uniform(1.5, 2.2) * f_start
        sweep = f_start + (f_end - f_start) * (t / max(duration, 1e-9))
        x = np.sin(2 * np.pi * np.cumsum(sweep) / sr)
    return _unit_rms(x * _envelope(n, sr))


DISTRACTOR_KINDS = ("tone", "clicks", "band")


def distractor(spec: SynthSpec, duration: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS unlabeled sound: a wavering tone, a click train or a random noise band."""
    sr = spec.sample_rate
    n = max(int(round(duration * sr)), 1)
    t = np.arange(n) / sr
    kind = DISTRACTOR_KINDS[int(rng.integers(len(DISTRACTOR_KINDS)))]
    if kind == "tone":
        f = np.exp(rng.uniform(np.log(200.0), np.log(6000.0)))
        wobble = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t)
        x = np.sin(2 * np.pi * np.cumsum(f * wobble) / sr)
    elif kind == "clicks":
        x = np.zeros(n)
        period = max(int(sr / rng.uniform(5.0, 20.0)), 1)
        x[rng.integers(period)::period] = 1.0
        x = np.convolve(x, np.exp(-np.arange(int(0.004 * sr)) / (0.001 * sr)) * rng.standard_normal(int(0.004 * sr)),
                        mode="same")
    else:
        centre = np.exp(rng.uniform(np.log(300.0), np.log(7000.0)))
        x = _band_noise(n, sr, centre / np.sqrt(2), min(centre * np.sqrt(2), sr / 2), rng)
    return _unit_rms(x * _envelope(n, sr))


def pink_noise(n: int, sample_rate: int, rng: np.random.Generator, n_octaves: int = 9) -> np.ndarray:
    """Approximate -3 dB/octave noise as a sum of octave-band white noises.

    Each octave below the top one has half the bandwidth, so its white noise
    is boosted by sqrt(2) per octave to give every octave equal power.  The
    lowest band extends down to DC.
    """
    white = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    shaped = np.zeros_like(white)
    hi = sample_rate / 2.0
    for o in range(n_octaves):
        lo = hi / 2.0 if o < n_octaves - 1 else -1.0
        band = (f > lo) & (f <= hi)
        shaped[band] = white[band] * 2.0 ** (o / 2.0)
        hi = lo
    return np.fft.irfft(shaped, n)


def _q(x: float) -> float:
    """Quantize a time to the annotation resolution (1 ms)."""
    return round(x, 3)


def schedule_events(spec: SynthSpec, rng: np.random.Generator) -> list[Event]:
    """Event timeline for one file with approximately ``overlap_fraction`` polyphonic time.

    Feedback control: whenever realized overlap lags the target, the next
    block is a pair of different-class events that overlap; otherwise a
    single event.  At most two events are active at once.
    """
    labels = spec.labels
    L = spec.file_length
    events: list[Event] = []
    cursor, overlap = 0.0, 0.0
    d_lo, d_hi = spec.event_duration
    while True:
        cursor += rng.uniform(*spec.gap)
        if cursor >= L - d_lo:
            break
        want_pair = spec.overlap_fraction > 0 and overlap < spec.overlap_fraction * cursor
        if want_pair:
            a, b = rng.choice(spec.n_classes, size=2, replace=False)
            da = rng.uniform(max(d_lo, 1.2), d_hi + 1.0)
            lead = rng.uniform(0.0, 0.3 * da)
            db = rng.uniform(max(d_lo, 0.6 * da), d_hi + 1.0)
            ea = (_q(cursor), _q(min(cursor + da, L)))
            eb = (_q(min(cursor + lead, L)), _q(min(cursor + lead + db, L)))
            for (on, off), k in ((ea, a), (eb, b)):
                if off - on >= 0.1:
                    events.append(Event(on, off, labels[int(k)]))
            overlap += max(0.0, min(ea[1], eb[1]) - max(ea[0], eb[0]))
            cursor = max(ea[1], eb[1])
        else:
            k = int(rng.integers(spec.n_classes))
            on, off = _q(cursor), _q(min(cursor + rng.uniform(d_lo, d_hi), L))
            events.append(Event(on, off, labels[k]))
            cursor = off
    events.sort(key=lambda e: (e.onset, e.label))
    return events


def render_file(spec: SynthSpec, events: Sequence[Event], rng: np.random.Generator) -> np.ndarray:
    sr = spec.sample_rate
    n = int(round(spec.file_length * sr))
    bg = pink_noise(n, sr, rng)
    bg *= spec.background_rms / np.sqrt(np.mean(bg * bg))
    gain = spec.background_rms * 10.0 ** (spec.ebr_db / 20.0)
    out = bg.copy()
    index = {lab: k for k, lab in enumerate(spec.labels)}
    for ev in events:
        start, stop = int(round(ev.onset * sr)), int(round(ev.offset * sr))
        if stop <= start:
            continue
        out[start:stop] += gain * prototype(spec, index[ev.label], (stop - start) / sr, rng)
    n_distract = rng.poisson(spec.distractor_rate * spec.file_length / 60.0)
    for _ in range(n_distract):
        dur = rng.uniform(0.3, 2.0)
        start = int(rng.integers(0, max(n - int(dur * sr), 1)))
        x = distractor(spec, dur, rng)
        out[start:start + len(x)] += gain * x[: n - start]
    peak = np.max(np.abs(out))
    if peak > 0.99:
        out *= 0.99 / peak
    return out


def generate_file(spec: SynthSpec, index: int) -> tuple[np.ndarray, list[Event]]:
    """Waveform and ground-truth events of file ``index``; seeded per file."""
    rng = np.random.default_rng([spec.seed, index])
    events = schedule_events(spec, rng)
    return render_file(spec, events, rng), events


def _write_one(args) -> ManifestEntry:
    spec, i, out_dir = args
    audio, events = generate_file(spec, i)
    stem = f"synth_{i:03d}"
    write_wav(out_dir / f"{stem}.wav", audio, spec.sample_rate)
    write_annotations(out_dir / f"{stem}.tsv", events)
    return ManifestEntry(f"{stem}.wav", f"{stem}.tsv", spec.scene)


def synthesize_dataset(spec: SynthSpec, out_dir, jobs: int = 1) -> Manifest:
    """Write WAV/TSV pairs plus ``manifest.json`` (with fold assignments) to ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out_dir}: {exc}") from None
    tasks = [(spec, i, out_dir) for i in range(spec.n_files)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_write_one, tasks))
    else:
        entries = [_write_one(t) for t in tasks]
    manifest = Manifest(out_dir, spec.labels, entries)
    if spec.n_folds > 1:
        assign_folds(manifest, min(spec.n_folds, len(entries)), spec.seed)
    manifest.save()
    (out_dir / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=1) + "\n")
    return manifest


def overlap_fraction(events: Sequence[Event], labels: Sequence[str], duration: float,
                     frame_hop: float = FRAME_HOP) -> float:
    """Share of frames with at least two active classes."""
    n = int(round(duration / frame_hop))
    roll = roll_from_events(events, frame_hop, n, labels)
    return float(np.mean(roll.activity.sum(axis=1) >= 2))


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


# ---------------------------------------------------------------------------
# Feature streams
# ---------------------------------------------------------------------------

def entry_features(manifest: Manifest, entry: ManifestEntry, config) -> tuple[np.ndarray, np.ndarray]:
    """Raw (unnormalized) features and the aligned activity roll of one entry."""
    from .features import extract_features, load_audio

    audio, _ = load_audio(manifest.audio_path(entry), config.sample_rate)
    feats = extract_features(audio, config)
    events = parse_annotations(manifest.annotation_path(entry), manifest.labels)
    roll = roll_from_events(events, config.frame_hop_s, feats.shape[0], manifest.labels)
    return feats, roll.activity


def load_streams(manifest: Manifest, entries: Sequence[ManifestEntry], config, norm=None):
    """Normalized feature streams for ``entries``.

    When ``norm`` is None the statistics are fitted on these entries, so pass
    the training split first and reuse its statistics elsewhere.
    """
    from .features import apply_norm, fit_norm
    from .training import Stream

    raw = [entry_features(manifest, e, config) for e in entries]
    if norm is None:
        norm = fit_norm([f for f, _ in raw])
    streams = [Stream(Path(e.audio).stem, apply_norm(f, norm), r, e.scene) for e, (f, r) in zip(entries, raw)]
    return streams, norm
