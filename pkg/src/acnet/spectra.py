"""STFT preprocessing, grayscale spectrogram stacks and SPL conversion."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._pgm import write_pgm
from .arraysim import MultichannelSignal
from .errors import FormatError, InvalidArgumentError

P_REF = 2e-5
LOG_FLOOR = 1e-10

STACK_MAGIC = b"ACS1"
_STACK_HEADER = struct.Struct("<4s6I")


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 256
    hop: int = 128
    fft_len: int = 256

    def __post_init__(self):
        if not 0 < self.hop <= self.window_len <= self.fft_len:
            raise InvalidArgumentError(
                f"need 0 < hop <= window_len <= fft_len, got {self.hop}, {self.window_len}, {self.fft_len}"
            )

    @property
    def n_freq(self) -> int:
        return self.fft_len // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.window_len) // self.hop


@dataclass(frozen=True)
class SpectrogramStack:
    """Grayscale per-mic spectrograms, ``(n_mics, n_freq, n_frames)`` in [0, 1]."""

    data: np.ndarray
    config: StftConfig

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def _window(cfg: StftConfig, window) -> np.ndarray:
    if window is None or (isinstance(window, str) and window == "hamming"):
        return np.hamming(cfg.window_len)
    if isinstance(window, str) and window in ("rect", "rectangular", "boxcar"):
        return np.ones(cfg.window_len)
    w = np.asarray(window, dtype=np.float64)
    if w.shape != (cfg.window_len,):
        raise InvalidArgumentError(f"window must have length {cfg.window_len}")
    return w


def stft(signal, cfg: StftConfig, window=None) -> np.ndarray:
    """One-sided STFT of a 1-D signal (or of each row of a 2-D array).

    Frame ``m`` covers samples ``[m * hop, m * hop + window_len)``, is weighted
    by a Hamming window (or ``window``) and zero-padded to ``fft_len``.
    Returns ``(..., n_freq, n_frames)`` complex.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.shape[-1] < cfg.window_len:
        raise InvalidArgumentError(
            f"signal of length {x.shape[-1]} shorter than window {cfg.window_len}"
        )
    frames = sliding_window_view(x, cfg.window_len, axis=-1)[..., :: cfg.hop, :]
    spec = np.fft.rfft(frames * _window(cfg, window), n=cfg.fft_len, axis=-1)
    return np.swapaxes(spec, -1, -2)


def _pool_crop(a: np.ndarray, axis: int, out: int) -> np.ndarray:
    n = a.shape[axis]
    factor = n // out
    if factor < 1:
        raise InvalidArgumentError(f"requested {out} bins but only {n} available")
    a = np.moveaxis(a, axis, -1)
    a = a[..., : (n // factor) * factor]
    a = a.reshape(*a.shape[:-1], -1, factor).mean(axis=-1)
    start = (a.shape[-1] - out) // 2
    return np.moveaxis(a[..., start : start + out], -1, axis)


def to_gray_stack(
    sig: MultichannelSignal, cfg: StftConfig = StftConfig(), out_h: int = 128, out_w: int = 128
) -> SpectrogramStack:
    """Log-magnitude spectrogram of every channel, resized then jointly min-max
    normalized to [0, 1].

    Each axis is average-pooled by ``floor(n / out)`` and center-cropped (for the
    default 129 x 399 bins: drop the top frequency bin, pool time by 3).  The
    normalization is shared by all channels so inter-mic level ratios survive;
    a constant stack maps to all zeros.
    """
    if sig.n_mics < 1:
        raise InvalidArgumentError("signal has no channels")
    mag = np.abs(stft(sig.data, cfg))
    level = 20.0 * np.log10(mag + LOG_FLOOR)
    level = _pool_crop(_pool_crop(level, 1, out_h), 2, out_w)
    lo, hi = level.min(), level.max()
    if hi > lo:
        gray = (level - lo) / (hi - lo)
    else:
        gray = np.zeros_like(level)
    return SpectrogramStack(gray.astype(np.float32), cfg)


def decimate_mean(sig: MultichannelSignal, factor: int = 8) -> np.ndarray:
    """Block-average every channel by ``factor`` (trailing remainder dropped)."""
    n = (sig.n_samples // factor) * factor
    return sig.data[:, :n].astype(np.float64).reshape(sig.n_mics, -1, factor).mean(axis=-1)


def spl_from_pressure(p) -> float | np.ndarray:
    """Sound pressure level in dB re 20 uPa."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any(~(arr > 0)):
        raise InvalidArgumentError("pressure must be positive")
    out = 20.0 * np.log10(arr / P_REF)
    return float(out) if out.ndim == 0 else out


def pressure_from_spl(spl) -> float | np.ndarray:
    out = P_REF * np.power(10.0, np.asarray(spl, dtype=np.float64) / 20.0)
    return float(out) if out.ndim == 0 else out


# -- exports -----------------------------------------------------------------


def write_stack(path, stack: SpectrogramStack) -> None:
    m, h, w = stack.shape
    c = stack.config
    header = _STACK_HEADER.pack(STACK_MAGIC, m, h, w, c.window_len, c.hop, c.fft_len)
    Path(path).write_bytes(header + np.ascontiguousarray(stack.data, dtype="<f4").tobytes())


def read_stack(path) -> SpectrogramStack:
    raw = Path(path).read_bytes()
    if len(raw) < _STACK_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, m, h, w, wl, hop, nfft = _STACK_HEADER.unpack_from(raw)
    if magic != STACK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if len(raw) != _STACK_HEADER.size + 4 * m * h * w:
        raise FormatError(f"{path}: payload size does not match {m}x{h}x{w}")
    data = np.frombuffer(raw, dtype="<f4", offset=_STACK_HEADER.size).reshape(m, h, w)
    return SpectrogramStack(data.astype(np.float32), StftConfig(wl, hop, nfft))


def export_pgm(stack: SpectrogramStack, out_dir, prefix: str = "mic") -> list[Path]:
    """One PGM per microphone, low frequencies at the bottom."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(2, int(math.log10(max(stack.shape[0], 1))) + 1)
    paths = []
    for i, img in enumerate(stack.data):
        path = out_dir / f"{prefix}{i:0{width}d}.pgm"
        write_pgm(path, img[::-1], vmin=0.0, vmax=1.0)
        paths.append(path)
    return paths
