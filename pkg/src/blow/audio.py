"""Waveform I/O, framing, silence gating, augmentation and overlap-add synthesis."""
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.io import wavfile
from scipy.signal.windows import hann

from .errors import DimensionError, FormatError

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
SILENCE_STD = 0.025
INT16_SCALE = 32768.0


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_path: str = ""
    silent: bool = False

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def _samples(w):
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def read_wav(path, strict=True):
    """Read a mono 16-bit PCM or float32 WAV file into [-1, 1] samples."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}", field="riff") from exc
    if data.ndim != 1:
        raise FormatError(f"{path}: expected mono audio, got {data.shape[1]} channels", field="channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / INT16_SCALE
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}", field="format")
    if strict and rate != SAMPLE_RATE:
        raise FormatError(f"{path}: sample rate {rate} != {SAMPLE_RATE}", field="sample_rate")
    return Waveform(samples, int(rate), str(path))


def write_wav(path, w, sample_rate=None):
    """Write 16-bit PCM mono; returns the number of samples outside [-1, 1] that were clipped."""
    x = _samples(w)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot write non-finite samples")
    hi = 1.0 - 1.0 / INT16_SCALE
    # +1.0 maps onto the top code silently; only true out-of-range samples count
    n_clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    if n_clipped:
        log.warning("%s: clipped %d samples", path, n_clipped)
    q = np.rint(np.clip(x, -1.0, hi) * INT16_SCALE).astype(np.int16)
    rate = sample_rate or (w.sample_rate if isinstance(w, Waveform) else SAMPLE_RATE)
    try:
        wavfile.write(path, rate, q)
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc
    return n_clipped


def normalize_peak(w):
    """Scale so that max |sample| is exactly 1. All-zero input comes back flagged silent."""
    wave = w if isinstance(w, Waveform) else Waveform(w)
    peak = np.max(np.abs(wave.samples)) if len(wave) else 0.0
    if peak == 0:
        return replace(wave, samples=wave.samples.copy(), silent=True)
    return replace(wave, samples=wave.samples / peak, silent=False)


def frame_signal(w, frame_size, hop):
    """Cut frames starting at 0, hop, 2*hop...; the trailing partial frame is dropped.

    Returns an array of shape (n_frames, frame_size) (a read-only view).
    """
    if frame_size <= 0 or not 0 < hop <= frame_size:
        raise ValueError(f"need frame_size > 0 and 0 < hop <= frame_size, got {frame_size}, {hop}")
    x = _samples(w)
    if len(x) < frame_size:
        return np.empty((0, frame_size))
    windows = np.lib.stride_tricks.sliding_window_view(x, frame_size)
    return windows[::hop]


def is_silent(frame, threshold=SILENCE_STD):
    frame = np.asarray(frame)
    if frame.size == 0:
        raise ValueError("empty frame")
    return bool(np.std(frame) < threshold)


@dataclass
class AugmentConfig:
    """Random augmentation of training frames. ``jitter_half_width=None`` means frame_size/2."""

    jitter_half_width: int = None
    emphasis_range: float = 0.25
    jitter: bool = True
    emphasis: bool = True
    scale: bool = True
    flip: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.jitter_half_width is not None and self.jitter_half_width < 0:
            raise ValueError("jitter_half_width must be >= 0")
        if not 0 <= self.emphasis_range < 1:
            raise ValueError("emphasis_range must lie in [0, 1)")

    @classmethod
    def disabled(cls, **kw):
        return cls(jitter=False, emphasis=False, scale=False, flip=False, **kw)

    def half_width(self, frame_size):
        return frame_size // 2 if self.jitter_half_width is None else self.jitter_half_width


@dataclass
class AugmentDraws:
    shift: int = 0
    alpha: float = 0.0
    gain: float = 1.0
    sign: float = 1.0
    applied: dict = field(default_factory=dict)


def draw_augment(cfg, frame_size, rng):
    """Draw the four random quantities; always consumes four uniforms so streams stay aligned."""
    xi = cfg.half_width(frame_size)
    u = rng.uniform(-1.0, 1.0, size=2)
    gain = rng.uniform(0.0, 1.0)
    flip = rng.uniform(-1.0, 1.0)
    return AugmentDraws(
        shift=int(np.rint(u[0] * xi)) if cfg.jitter else 0,
        alpha=float(u[1] * cfg.emphasis_range) if cfg.emphasis else 0.0,
        gain=float(gain),
        sign=-1.0 if flip < 0 else 1.0,
        applied=dict(jitter=cfg.jitter, emphasis=cfg.emphasis, scale=cfg.scale, flip=cfg.flip),
    )


def emphasis_filter(x, alpha):
    """y[n] = x[n] - alpha * x[n-1] with x[-1] = 0."""
    y = np.array(x, dtype=np.float64, copy=True)
    y[1:] -= alpha * np.asarray(x)[:-1]
    return y


def apply_augment(source, start, frame_size, draws):
    x = _samples(source)
    if len(x) < frame_size:
        raise DimensionError(f"source has {len(x)} samples, frame needs {frame_size}", axis="time")
    s = int(np.clip(start + draws.shift, 0, len(x) - frame_size))
    frame = np.array(x[s:s + frame_size], dtype=np.float64)
    on = draws.applied or dict(jitter=True, emphasis=True, scale=True, flip=True)
    if on.get("emphasis", True) and draws.alpha != 0.0:
        frame = emphasis_filter(frame, draws.alpha)
    if on.get("scale", True):
        peak = np.max(np.abs(frame))
        if peak > 0:
            frame = draws.gain * frame / peak
    if on.get("flip", True):
        frame = draws.sign * frame
    return np.clip(frame, -1.0, 1.0)


def augment(source, start, frame_size, cfg, rng):
    """Jitter, emphasis, random gain and sign flip, in that order."""
    return apply_augment(source, start, frame_size, draw_augment(cfg, frame_size, rng))


def hann_window(n):
    """Periodic (DFT-even) Hann window."""
    return hann(n, sym=False)


def overlap_add(frames, hop=None, normalize=True, sample_rate=SAMPLE_RATE):
    """Window each frame with a periodic Hann, sum at ``hop`` offsets, then peak-normalize."""
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if not frames:
        raise DimensionError("no frames to synthesize", axis="frames")
    n = len(frames[0])
    for f in frames:
        if len(f) != n:
            raise DimensionError(f"frame lengths differ ({len(f)} vs {n})", axis="time")
    if hop is None:
        if n % 2:
            raise DimensionError(f"frame size {n} must be even for 50% overlap", axis="time")
        hop = n // 2
    window = hann_window(n)
    out = np.zeros((len(frames) - 1) * hop + n)
    for i, f in enumerate(frames):
        out[i * hop:i * hop + n] += window * f
    wave = Waveform(out, sample_rate)
    return normalize_peak(wave) if normalize else wave
