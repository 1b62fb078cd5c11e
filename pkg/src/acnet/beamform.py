"""Frequency-domain beamforming baselines.

Conventions
-----------
* Spectra use ``X(f) = sum_n x[n] exp(-2j pi f n / fs)``; a signal delayed by
  ``tau`` picks up ``exp(-2j pi f tau)``.
* The cross-spectral matrix is scaled per bin by ``1 / sum(window**2)`` so a
  white-noise signal of variance ``s**2`` has an expected auto-spectrum of
  ``s**2`` in every bin.  Band-averaging a map therefore returns variances.
* Steering weights are ``w = a / |a|**2`` with the transfer vector
  ``a_m = exp(-2j pi f r_m / c) / r_m`` (pressure at 1 m).  Then
  ``w^H (s**2 a a^H) w = s**2``: the DAS peak of a point source equals its
  squared RMS pressure at 1 m.
* Maps are ``(nx, ny)`` arrays indexed ``[ix, iy]``; flat index ``ix * ny + iy``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.signal import get_window

from ._pgm import write_pgm
from .arraysim import SPEED_OF_SOUND, MicArrayGeometry, MultichannelSignal, ScanGrid
from .errors import InvalidArgumentError, NoSourceError
from .spectra import spl_from_pressure

DEFAULT_BAND = (2000.0, 8000.0)
DEFAULT_BLOCK = 1024
METHODS = ("das", "damas", "clean-psf", "clean-sc", "fft-fista")


@dataclass(frozen=True)
class CrossSpectralMatrix:
    matrices: np.ndarray  # (n_bins, n_mics, n_mics) complex
    freqs: np.ndarray  # (n_bins,) Hz
    n_snapshots: int

    @property
    def n_bins(self) -> int:
        return len(self.freqs)

    def scaled(self, s: float) -> "CrossSpectralMatrix":
        return CrossSpectralMatrix(self.matrices * s, self.freqs, self.n_snapshots)


@dataclass(frozen=True)
class SteeringSet:
    """Per-bin steering weights ``(n_bins, n_grid, n_mics)``."""

    weights: np.ndarray
    freqs: np.ndarray
    normalization: str = "unit-source-power"

    def transfer(self) -> np.ndarray:
        """Transfer vectors ``a`` recovered from ``w = a / |a|**2``."""
        norm2 = np.sum(np.abs(self.weights) ** 2, axis=-1, keepdims=True)
        return self.weights / norm2


@dataclass
class BeamMap:
    grid: ScanGrid
    values: np.ndarray  # (nx, ny), Pa**2 at 1 m
    band: tuple[float, float]
    method: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.grid.shape)


def csm(
    sig: MultichannelSignal,
    block_len: int = DEFAULT_BLOCK,
    band: tuple[float, float] = DEFAULT_BAND,
    remove_diagonal: bool = False,
) -> CrossSpectralMatrix:
    """Welch estimate with Hann blocks at 50 % overlap, restricted to ``band``."""
    x = np.asarray(sig.data, dtype=np.float64)
    if x.shape[1] < block_len:
        raise InvalidArgumentError(f"signal shorter ({x.shape[1]}) than block length {block_len}")
    freqs = np.fft.rfftfreq(block_len, 1.0 / sig.sample_rate)
    keep = (freqs >= band[0]) & (freqs <= band[1])
    if not np.any(keep):
        raise InvalidArgumentError(f"band {band} contains no frequency bins")
    win = get_window("hann", block_len)
    hop = block_len // 2
    starts = np.arange(0, x.shape[1] - block_len + 1, hop)
    blocks = np.stack([x[:, s : s + block_len] for s in starts])  # (K, M, L)
    spec = np.fft.rfft(blocks * win, axis=-1)[..., keep]  # (K, M, B)
    spec = np.moveaxis(spec, -1, 0)  # (B, K, M)
    mats = np.einsum("bkm,bkn->bmn", spec, spec.conj()) / (len(starts) * np.sum(win**2))
    mats = 0.5 * (mats + np.conj(np.swapaxes(mats, 1, 2)))
    if remove_diagonal:
        idx = np.arange(mats.shape[1])
        mats[:, idx, idx] = 0.0
    return CrossSpectralMatrix(mats, freqs[keep], len(starts))


def steering(
    geom: MicArrayGeometry, grid: ScanGrid, freqs, c: float = SPEED_OF_SOUND
) -> SteeringSet:
    freqs = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
    if np.any(freqs <= 0):
        raise InvalidArgumentError("steering frequencies must be positive")
    r = np.linalg.norm(grid.points()[:, None, :] - geom.positions[None, :, :], axis=-1)  # (G, M)
    a = np.exp(-2j * np.pi * freqs[:, None, None] * r[None] / c) / r[None]
    norm2 = np.sum(1.0 / r**2, axis=-1)  # |a|**2 is frequency independent
    return SteeringSet(a / norm2[None, :, None], freqs)


def _check_bins(cs: CrossSpectralMatrix, steer: SteeringSet) -> None:
    if cs.freqs.shape != steer.freqs.shape or not np.allclose(cs.freqs, steer.freqs):
        raise InvalidArgumentError("CSM and steering vectors use different frequency bins")


def _das_bins(mats: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``Re(w^H C w)`` for every bin and grid point, shape ``(B, G)``."""
    t = np.matmul(weights.conj(), mats)  # (B, G, M): sum_m conj(w_m) C_mn
    return np.einsum("bgn,bgn->bg", t, weights).real


def das(cs: CrossSpectralMatrix, steer: SteeringSet, grid: ScanGrid) -> BeamMap:
    _check_bins(cs, steer)
    per_bin = _das_bins(cs.matrices, steer.weights)
    band = (float(cs.freqs[0]), float(cs.freqs[-1]))
    return BeamMap(grid, per_bin.mean(axis=0), band, "das")


def psf_matrix(steer: SteeringSet) -> np.ndarray:
    """``A[g, g0]``: band-mean DAS response at ``g`` to a unit source at ``g0``."""
    a = steer.transfer()
    n_grid = steer.weights.shape[1]
    out = np.zeros((n_grid, n_grid))
    for w_b, a_b in zip(steer.weights, a):
        out += np.abs(w_b.conj() @ a_b.T) ** 2
    return out / len(steer.freqs)


def psf_column(steer: SteeringSet, g0: int) -> np.ndarray:
    a0 = steer.transfer()[:, g0, :]  # (B, M)
    resp = np.einsum("bgm,bm->bg", steer.weights.conj(), a0)
    return np.mean(np.abs(resp) ** 2, axis=0)


# -- DAMAS -------------------------------------------------------------------


@njit(cache=False)
def _gauss_seidel(A, b, q, iters):
    n = b.shape[0]
    for it in range(iters):
        if it % 2 == 0:
            start, stop, step = 0, n, 1
        else:
            start, stop, step = n - 1, -1, -1
        for i in range(start, stop, step):
            acc = b[i]
            for j in range(n):
                if j != i:
                    acc -= A[i, j] * q[j]
            v = acc / A[i, i]
            q[i] = v if v > 0.0 else 0.0
    return q


def damas(dirty: BeamMap, A: np.ndarray, iters: int = 500) -> BeamMap:
    """Non-negative Gauss-Seidel solution of ``A q = b``; sweep direction
    alternates each iteration."""
    if iters <= 0:
        raise InvalidArgumentError(f"iters must be positive, got {iters}")
    b = dirty.values.ravel()
    A = np.ascontiguousarray(A, dtype=np.float64)
    if A.shape != (b.size, b.size):
        raise InvalidArgumentError(f"PSF matrix shape {A.shape} does not match grid of {b.size}")
    q = _gauss_seidel(A, b.copy(), np.zeros_like(b), int(iters))
    return BeamMap(dirty.grid, q, dirty.band, "damas", {"iterations": int(iters)})


# -- CLEAN -------------------------------------------------------------------


def clean_psf(
    dirty: BeamMap, A: np.ndarray, gain: float = 0.6, max_iters: int = 100, threshold: float = 1e-6
) -> tuple[BeamMap, BeamMap]:
    """Hogbom CLEAN with the array PSF.

    Stops at ``max_iters``, when the residual peak drops to ``threshold`` times
    the initial peak, or when a subtraction would raise the residual peak (that
    last step is discarded).
    """
    if not 0 < gain <= 1:
        raise InvalidArgumentError(f"gain must lie in (0, 1], got {gain}")
    residual = dirty.values.ravel().copy()
    clean = np.zeros_like(residual)
    peak0 = residual.max()
    history = [float(peak0)]
    it = 0
    while it < max_iters and peak0 > 0:
        g = int(np.argmax(residual))
        peak = residual[g]
        if peak <= threshold * peak0:
            break
        trial = residual - gain * peak * A[:, g]
        if trial.max() > peak:
            break
        residual = trial
        clean[g] += gain * peak
        history.append(float(residual.max()))
        it += 1
    meta = {"iterations": it, "residual_peaks": history}
    return (
        BeamMap(dirty.grid, clean, dirty.band, "clean-psf", meta),
        BeamMap(dirty.grid, residual, dirty.band, "clean-psf-residual", meta),
    )


def clean_sc(
    cs: CrossSpectralMatrix,
    steer: SteeringSet,
    grid: ScanGrid,
    gain: float = 0.6,
    max_iters: int = 100,
    threshold: float = 1e-6,
) -> BeamMap:
    """CLEAN based on spatial source coherence, run independently per bin.

    Each step removes ``gain * P * h h^H`` from the degraded CSM, where ``P`` is
    the current DAS peak at weights ``w`` and ``h = D w / P`` is the component
    coherent with it.  The DAS map is updated in closed form rather than
    recomputed.  Stop rules as in :func:`clean_psf`, per bin.
    """
    if not 0 < gain <= 1:
        raise InvalidArgumentError(f"gain must lie in (0, 1], got {gain}")
    _check_bins(cs, steer)
    W = steer.weights
    D = cs.matrices.copy()
    n_bins, n_grid = W.shape[0], W.shape[1]
    P = _das_bins(D, W)
    peak0 = P.max(axis=1)
    clean = np.zeros((n_bins, n_grid))
    active = peak0 > 0
    iters = np.zeros(n_bins, dtype=int)
    trace0 = float(np.trace(D, axis1=1, axis2=2).real.sum())
    traces = [trace0]
    for _ in range(max_iters):
        if not np.any(active):
            break
        for b in np.flatnonzero(active):
            j = int(np.argmax(P[b]))
            pj = P[b, j]
            if pj <= threshold * peak0[b]:
                active[b] = False
                continue
            h = D[b] @ W[b, j] / pj
            newP = P[b] - gain * pj * np.abs(W[b].conj() @ h) ** 2
            if newP.max() > pj:
                active[b] = False
                continue
            D[b] -= gain * pj * np.outer(h, h.conj())
            P[b] = newP
            clean[b, j] += gain * pj
            iters[b] += 1
        traces.append(float(np.trace(D, axis1=1, axis2=2).real.sum()))
    meta = {
        "iterations": iters.tolist(),
        "trace_history": traces,
        "trace_ratio": traces[-1] / trace0 if trace0 > 0 else 0.0,
    }
    band = (float(cs.freqs[0]), float(cs.freqs[-1]))
    return BeamMap(grid, clean.mean(axis=0), band, "clean-sc", meta)


# -- FFT-FISTA ---------------------------------------------------------------


def psf_kernel(steer: SteeringSet, grid: ScanGrid) -> np.ndarray:
    """Shift-invariant PSF: response to a unit source at the center node."""
    center = (grid.nx // 2) * grid.ny + grid.ny // 2
    return psf_column(steer, center).reshape(grid.shape)


class FFTConvolution:
    """Linear convolution with a centered kernel via FFT on a 2x zero-padded grid."""

    def __init__(self, kernel: np.ndarray):
        kernel = np.asarray(kernel, dtype=np.float64)
        self.shape = kernel.shape
        nx, ny = self.shape
        self.padded = (2 * nx, 2 * ny)
        buf = np.zeros(self.padded)
        buf[:nx, :ny] = kernel
        buf = np.roll(buf, (-(nx // 2), -(ny // 2)), axis=(0, 1))
        self.kf = np.fft.rfft2(buf)
        self.lipschitz = float(np.max(np.abs(self.kf) ** 2))

    def _apply(self, q, kf):
        nx, ny = self.shape
        out = np.fft.irfft2(np.fft.rfft2(q, s=self.padded) * kf, s=self.padded)
        return out[:nx, :ny]

    def forward(self, q: np.ndarray) -> np.ndarray:
        return self._apply(q, self.kf)

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        return self._apply(r, self.kf.conj())


def fft_fista(dirty: BeamMap, kernel: np.ndarray, iters: int = 200) -> BeamMap:
    """Monotone FISTA for ``min 0.5 |K * q - b|**2`` subject to ``q >= 0``."""
    if iters <= 0:
        raise InvalidArgumentError(f"iters must be positive, got {iters}")
    op = FFTConvolution(kernel)
    if op.shape != dirty.grid.shape:
        raise InvalidArgumentError("kernel shape does not match the grid")
    b = dirty.values
    step = 1.0 / op.lipschitz

    def objective(q):
        r = op.forward(q) - b
        return 0.5 * float(np.sum(r * r))

    x = np.zeros_like(b)
    y = x.copy()
    t = 1.0
    fx = objective(x)
    history = [fx]
    for _ in range(int(iters)):
        grad = op.adjoint(op.forward(y) - b)
        z = np.maximum(y - step * grad, 0.0)
        fz = objective(z)
        x_prev = x
        if fz <= fx:
            x, fx = z, fz
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x + (t / t_next) * (z - x) + ((t - 1.0) / t_next) * (x - x_prev)
        t = t_next
        history.append(fx)
    return BeamMap(dirty.grid, x, dirty.band, "fft-fista", {"objective": history})


# -- estimates & export -------------------------------------------------------


def extract_estimate(bmap: BeamMap) -> tuple[float, float, float]:
    """Grid argmax (first in flat order on ties) and SPL of ``sqrt(peak)``."""
    vals = np.maximum(bmap.values.ravel(), 0.0)
    g = int(np.argmax(vals))
    peak = vals[g]
    if not peak > 0:
        raise NoSourceError(f"{bmap.method} map has no positive maximum")
    x, y = bmap.grid.node(g)
    return x, y, spl_from_pressure(np.sqrt(peak))


def _map_image(values: np.ndarray) -> np.ndarray:
    # rows: y descending (top of image = y_max); columns: x ascending
    return values.T[::-1]


def write_beammap(bmap: BeamMap, prefix, window: tuple[float, float, float, float] | None = None) -> list[Path]:
    """Write ``<prefix>.csv`` (x, y, value), ``<prefix>.pgm`` and ``<prefix>.json``.

    ``window = (x0, x1, y0, y1)`` limits the CSV to nodes inside it and skips the
    image.
    """
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    xs, ys = bmap.grid.xs, bmap.grid.ys
    paths = []
    csv_path = prefix.with_name(prefix.name + ".csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "value"])
        for ix, x in enumerate(xs):
            for iy, y in enumerate(ys):
                if window is not None and not (
                    window[0] - 1e-9 <= x <= window[1] + 1e-9 and window[2] - 1e-9 <= y <= window[3] + 1e-9
                ):
                    continue
                writer.writerow([f"{x:.6f}", f"{y:.6f}", repr(float(bmap.values[ix, iy]))])
    paths.append(csv_path)
    if window is None:
        pgm_path = prefix.with_name(prefix.name + ".pgm")
        write_pgm(pgm_path, _map_image(np.maximum(bmap.values, 0.0)))
        paths.append(pgm_path)
    sidecar = {
        "method": bmap.method,
        "band_hz": list(bmap.band),
        "grid": {k: getattr(bmap.grid, k) for k in ("x_min", "x_max", "y_min", "y_max", "nx", "ny", "z_plane")},
        "window": list(window) if window is not None else None,
    }
    json_path = prefix.with_name(prefix.name + ".json")
    json_path.write_text(json.dumps(sidecar, indent=1))
    paths.append(json_path)
    return paths


class Beamformer:
    """Runs any of the classical methods on recordings from one array / grid /
    band, caching steering vectors and the PSF between calls."""

    def __init__(
        self,
        geom: MicArrayGeometry,
        grid: ScanGrid,
        band: tuple[float, float] = DEFAULT_BAND,
        block_len: int = DEFAULT_BLOCK,
        c: float = SPEED_OF_SOUND,
        damas_iters: int = 500,
        clean_gain: float = 0.6,
        clean_iters: int = 100,
        fista_iters: int = 200,
        remove_diagonal: bool = False,
    ):
        self.geom, self.grid, self.band = geom, grid, tuple(band)
        self.block_len, self.c = block_len, c
        self.damas_iters, self.clean_gain = damas_iters, clean_gain
        self.clean_iters, self.fista_iters = clean_iters, fista_iters
        self.remove_diagonal = remove_diagonal
        self._steer: dict[int, SteeringSet] = {}
        self._psf: dict[int, np.ndarray] = {}
        self._kernel: dict[int, np.ndarray] = {}

    def steering_for(self, sample_rate: int) -> SteeringSet:
        if sample_rate not in self._steer:
            freqs = np.fft.rfftfreq(self.block_len, 1.0 / sample_rate)
            freqs = freqs[(freqs >= self.band[0]) & (freqs <= self.band[1])]
            if freqs.size == 0:
                raise InvalidArgumentError(f"band {self.band} contains no frequency bins")
            self._steer[sample_rate] = steering(self.geom, self.grid, freqs, self.c)
        return self._steer[sample_rate]

    def psf_for(self, sample_rate: int) -> np.ndarray:
        if sample_rate not in self._psf:
            self._psf[sample_rate] = psf_matrix(self.steering_for(sample_rate))
        return self._psf[sample_rate]

    def kernel_for(self, sample_rate: int) -> np.ndarray:
        if sample_rate not in self._kernel:
            self._kernel[sample_rate] = psf_kernel(self.steering_for(sample_rate), self.grid)
        return self._kernel[sample_rate]

    def prepare(self, method: str, sample_rate: int) -> None:
        """Precompute everything that does not depend on the recording."""
        self.steering_for(sample_rate)
        if method in ("damas", "clean-psf"):
            self.psf_for(sample_rate)
        elif method == "fft-fista":
            self.kernel_for(sample_rate)

    def run(self, sig: MultichannelSignal, method: str) -> BeamMap:
        if method not in METHODS:
            raise InvalidArgumentError(f"unknown method {method!r}; choose from {METHODS}")
        rate = int(sig.sample_rate)
        cs = csm(sig, self.block_len, self.band, self.remove_diagonal)
        steer = self.steering_for(rate)
        if method == "clean-sc":
            return clean_sc(cs, steer, self.grid, self.clean_gain, self.clean_iters)
        dirty = das(cs, steer, self.grid)
        if method == "das":
            return dirty
        if method == "damas":
            return damas(dirty, self.psf_for(rate), self.damas_iters)
        if method == "clean-psf":
            return clean_psf(dirty, self.psf_for(rate), self.clean_gain, self.clean_iters)[0]
        return fft_fista(dirty, self.kernel_for(rate), self.fista_iters)
