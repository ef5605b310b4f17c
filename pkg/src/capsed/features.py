"""Audio loading and time-frequency features.

Frames are 40 ms (640 samples at 16 kHz) with a 20 ms hop, Hann-windowed and
zero-padded to a 1024-point FFT.  Both feature kinds are log energies:
``log(|X|^2 + 1e-10)`` per STFT bin, or per mel band for the 40-band Slaney
filterbank.  Multi-channel audio yields a ``frames x F x C`` array.
"""

from __future__ import annotations

import json
import warnings
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

LOG_EPS = 1e-10
STD_FLOOR = 1e-8


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    frame_len: int = 640
    hop: int = 320
    fft_size: int = 1024
    feature_kind: str = "stft_mag"
    n_mels: int = 40
    fmin: float = 0.0
    fmax: float | None = None
    mel_norm: str | None = None
    context_T: int = 256
    channels: int = 1

    def __post_init__(self):
        if self.feature_kind not in ("stft_mag", "logmel"):
            raise ConfigError(f"unknown feature kind {self.feature_kind!r}")
        if not 0 < self.hop <= self.frame_len <= self.fft_size:
            raise ConfigError("need 0 < hop <= frame_len <= fft_size")
        if self.n_mels < 1 or self.context_T < 1:
            raise ConfigError("n_mels and context_T must be >= 1")
        if self.channels not in (1, 2):
            raise ConfigError("channels must be 1 or 2")
        if self.mel_norm not in (None, "slaney"):
            raise ConfigError(f"unknown mel normalization {self.mel_norm!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def n_features(self) -> int:
        return self.n_bins if self.feature_kind == "stft_mag" else self.n_mels

    @property
    def frame_hop_s(self) -> float:
        return self.hop / self.sample_rate

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(**d)


@dataclass
class NormStats:
    mean: np.ndarray  # (F, C)
    std: np.ndarray  # (F, C)

    def to_dict(self) -> dict:
        return {"shape": list(self.mean.shape), "mean": self.mean.ravel().tolist(), "std": self.std.ravel().tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        shape = tuple(d["shape"])
        mean = np.asarray(d["mean"], dtype=np.float64).reshape(shape)
        std = np.asarray(d["std"], dtype=np.float64).reshape(shape)
        if np.any(std <= 0):
            raise DataError("normalization std must be positive")
        return cls(mean, std)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class FeatureWindow:
    values: np.ndarray  # (T, F, C)
    start_frame: int
    source_id: str = ""
    n_valid: int = 0
    mask: np.ndarray = field(default=None, repr=False)  # (T,) 1.0 for real frames

    def __post_init__(self):
        if self.mask is None:
            self.mask = (np.arange(self.values.shape[0]) < self.n_valid).astype(np.float64)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def load_audio(path, expected_rate: int | None = 16000) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM WAV file as a ``(channels, samples)`` array in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            n_ch, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            raw = w.readframes(n)
    except wave.Error as exc:
        raise DataError(f"{path}: not a PCM WAV file ({exc})") from None
    if width != 2:
        raise DataError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    if expected_rate is not None and rate != expected_rate:
        raise DataError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (no resampling)")
    if n_ch not in (1, 2):
        raise DataError(f"{path}: {n_ch} channels, expected 1 or 2")
    pcm = np.frombuffer(raw, dtype="<i2").reshape(-1, n_ch).T
    return pcm.astype(np.float64) / 32768.0, rate


def write_wav(path, waveform: np.ndarray, sample_rate: int = 16000) -> None:
    """Write ``(channels, samples)`` or ``(samples,)`` floats as 16-bit PCM."""
    x = np.atleast_2d(np.asarray(waveform, dtype=np.float64))
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(x.shape[0])
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.T.tobytes())


# ---------------------------------------------------------------------------
# Spectral features
# ---------------------------------------------------------------------------

def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DataError("frame_signal expects a single channel")
    if len(x) < frame_len:
        raise DataError(f"signal of {len(x)} samples is shorter than one frame ({frame_len})")
    return np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop]


def _spectrum(x: np.ndarray, config: FeatureConfig) -> np.ndarray:
    frames = frame_signal(x, config.frame_len, config.hop) * hann(config.frame_len)
    return np.fft.rfft(frames, n=config.fft_size, axis=-1)


def stft_magnitude(x: np.ndarray, config: FeatureConfig | None = None, log: bool = True) -> np.ndarray:
    """``frames x (fft_size/2+1)`` log power spectrum of one channel.

    With ``log=False`` the plain magnitude ``|X|`` is returned instead.
    """
    config = config or FeatureConfig()
    mag = np.abs(_spectrum(x, config))
    return np.log(mag * mag + LOG_EPS) if log else mag


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    lin = f / f_sp
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(sample_rate: int = 16000, fft_size: int = 1024, n_mels: int = 40,
                   fmin: float = 0.0, fmax: float | None = None, norm: str | None = None) -> np.ndarray:
    """``n_mels x (fft_size/2+1)`` triangular filters evenly spaced in mel.

    Triangles peak at 1 unless ``norm="slaney"``, which scales each to unit area
    (``2 / bandwidth``).
    """
    fmax = sample_rate / 2.0 if fmax is None else fmax
    bins_hz = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, len(bins_hz)))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bins_hz - lo) / (mid - lo)
        falling = (hi - bins_hz) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
        if norm == "slaney":
            fb[m] *= 2.0 / (hi - lo)
    return fb


def mel_center_frequencies(config: FeatureConfig) -> np.ndarray:
    fmax = config.sample_rate / 2.0 if config.fmax is None else config.fmax
    return mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(fmax), config.n_mels + 2))[1:-1]


def logmel(x: np.ndarray, config: FeatureConfig | None = None) -> np.ndarray:
    """``frames x n_mels`` log mel energies of one channel."""
    config = config or FeatureConfig(feature_kind="logmel")
    spec = _spectrum(x, config)
    power = spec.real ** 2 + spec.imag ** 2
    fb = mel_filterbank(config.sample_rate, config.fft_size, config.n_mels, config.fmin, config.fmax, config.mel_norm)
    return np.log(power @ fb.T + LOG_EPS)


def extract_features(waveform: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """``frames x F x C`` features for a ``(channels, samples)`` waveform."""
    waveform = np.atleast_2d(waveform)
    if waveform.shape[0] != config.channels:
        raise DataError(f"audio has {waveform.shape[0]} channels, config expects {config.channels}")
    fn = stft_magnitude if config.feature_kind == "stft_mag" else logmel
    return np.stack([fn(ch, config) for ch in waveform], axis=-1)


def n_frames(n_samples: int, config: FeatureConfig) -> int:
    return 0 if n_samples < config.frame_len else 1 + (n_samples - config.frame_len) // config.hop


# ---------------------------------------------------------------------------
# Normalization and windowing
# ---------------------------------------------------------------------------

def _as_3d(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return m[..., None] if m.ndim == 2 else m


def fit_norm(matrices) -> NormStats:
    """Per-bin, per-channel mean and population std over all training frames."""
    if isinstance(matrices, np.ndarray):
        matrices = [matrices]
    stacked = np.concatenate([_as_3d(m) for m in matrices], axis=0)
    if stacked.shape[0] < 2:
        raise DataError("need at least 2 frames to fit normalization statistics")
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    if np.any(std < STD_FLOOR):
        warnings.warn(f"{int(np.sum(std < STD_FLOOR))} constant feature bins; std floored at {STD_FLOOR}", RuntimeWarning)
        std = np.maximum(std, STD_FLOOR)
    return NormStats(mean, std)


def apply_norm(matrix: np.ndarray, stats: NormStats) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 2:
        return (m - stats.mean[:, 0]) / stats.std[:, 0]
    return (m - stats.mean) / stats.std


def window_stream(matrix: np.ndarray, context_T: int = 256, hop_windows: int | None = None,
                  source_id: str = "") -> list[FeatureWindow]:
    """Cut a ``frames x F x C`` matrix into context windows of ``context_T`` frames.

    The last window is zero-padded in time; its mask marks the real frames.
    """
    m = _as_3d(matrix)
    if m.shape[0] < 1:
        raise DataError("cannot window an empty feature matrix")
    hop = context_T if hop_windows is None else hop_windows
    if hop < 1:
        raise ConfigError("hop_windows must be >= 1")
    n = m.shape[0]
    windows = []
    start = 0
    while True:
        chunk = m[start:start + context_T]
        valid = chunk.shape[0]
        if valid < context_T:
            chunk = np.concatenate([chunk, np.zeros((context_T - valid,) + m.shape[1:])], axis=0)
        windows.append(FeatureWindow(chunk, start, source_id, valid))
        if start + context_T >= n:
            break
        start += hop
    return windows
