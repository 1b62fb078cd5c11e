"""Array geometry, scan grid, free-field forward model and dataset generation.

Recordings are simulated for a single stationary point source emitting
Gaussian white noise in a free field.  Each microphone receives the source
waveform delayed by ``r / c`` and attenuated by ``1 / r`` (pressure referenced
to 1 m from the source).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import fft as sp_fft

from .errors import DegenerateGeometryError, FormatError, InvalidArgumentError

SPEED_OF_SOUND = 343.0
SAMPLE_RATE = 51200
SPLITS = ("train", "val", "test")

RECORDING_MAGIC = b"ACN1"
RECORDING_VERSION = 1
_HEADER = struct.Struct("<4sIIII3d")


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class MicArrayGeometry:
    """Sensor coordinates in meters, shape ``(count, 3)``."""

    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise InvalidArgumentError(f"positions must have shape (count>=1, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise InvalidArgumentError("positions must be finite")
        if len(np.unique(pos, axis=0)) != len(pos):
            raise InvalidArgumentError("microphone positions must be distinct")
        object.__setattr__(self, "positions", _frozen(pos))

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def digest(self) -> str:
        """Short content hash, used to tie manifests to a geometry."""
        return hashlib.sha256(self.positions.astype("<f8").tobytes()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.positions.tolist()))

    @classmethod
    def load(cls, path) -> "MicArrayGeometry":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(data, list) or not all(
            isinstance(p, list) and len(p) == 3 for p in data
        ):
            raise FormatError(f"{path}: expected a JSON list of [x, y, z] triples")
        return cls(np.array(data, dtype=np.float64))


def build_spiral_array(count: int = 56, radius: float = 0.75) -> MicArrayGeometry:
    """Vogel (golden-angle) spiral in the z = 0 plane.

    Microphone ``i`` sits at polar radius ``radius * sqrt((i + 1) / count)`` and
    angle ``(i + 1) * pi * (3 - sqrt(5))``.
    """
    if int(count) != count or count < 1:
        raise InvalidArgumentError(f"count must be a positive integer, got {count}")
    if not radius > 0:
        raise InvalidArgumentError(f"radius must be positive, got {radius}")
    k = np.arange(1, int(count) + 1, dtype=np.float64)
    rho = radius * np.sqrt(k / count)
    phi = k * math.pi * (3.0 - math.sqrt(5.0))
    pos = np.stack([rho * np.cos(phi), rho * np.sin(phi), np.zeros_like(rho)], axis=1)
    return MicArrayGeometry(pos)


@dataclass(frozen=True)
class ScanGrid:
    """Rectangular grid of focus points in the plane ``z = z_plane``.

    Nodes include both extents (``linspace``).  Node ``(ix, iy)`` has flat index
    ``ix * ny + iy`` (row-major with x as the slow axis).
    """

    x_min: float = -1.5
    x_max: float = 1.5
    y_min: float = -1.5
    y_max: float = 1.5
    nx: int = 31
    ny: int = 31
    z_plane: float = 2.5

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidArgumentError("grid extents must satisfy min < max")
        if self.nx < 2 or self.ny < 2:
            raise InvalidArgumentError("grid needs at least 2 nodes per axis")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.ny)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def spacing(self) -> tuple[float, float]:
        return ((self.x_max - self.x_min) / (self.nx - 1), (self.y_max - self.y_min) / (self.ny - 1))

    def points(self) -> np.ndarray:
        """All nodes as ``(nx * ny, 3)`` in flat-index order."""
        gx, gy = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, self.z_plane)], axis=1)

    def node(self, index: int) -> tuple[float, float]:
        ix, iy = divmod(int(index), self.ny)
        return float(self.xs[ix]), float(self.ys[iy])

    def nearest_index(self, x, y):
        """Flat index of the node closest to ``(x, y)``; vectorized."""
        dx, dy = self.spacing
        ix = np.clip(np.rint((np.asarray(x) - self.x_min) / dx), 0, self.nx - 1).astype(int)
        iy = np.clip(np.rint((np.asarray(y) - self.y_min) / dy), 0, self.ny - 1).astype(int)
        return ix * self.ny + iy

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


@dataclass(frozen=True)
class SourceSample:
    """Ground truth for one recording: position on the scan plane and RMS
    pressure ``p`` (Pa) at 1 m.  ``split`` is ``None`` when unknown."""

    id: int
    x: float
    y: float
    p: float
    split: str | None = None

    def __post_init__(self):
        if not self.p > 0:
            raise InvalidArgumentError(f"source strength must be positive, got {self.p}")
        if self.split is not None and self.split not in SPLITS:
            raise InvalidArgumentError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class MultichannelSignal:
    """Time-domain microphone pressures, shape ``(n_mics, n_samples)``."""

    data: np.ndarray
    sample_rate: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise InvalidArgumentError(f"signal data must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("signal contains non-finite values")
        object.__setattr__(self, "data", _frozen(data, dtype=data.dtype))

    @property
    def n_mics(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


def propagation_params(
    src: SourceSample, geom: MicArrayGeometry, grid: ScanGrid, c: float = SPEED_OF_SOUND
) -> tuple[np.ndarray, np.ndarray]:
    """Per-microphone travel time (s) and spherical-spreading gain ``1 / r``."""
    source = np.array([src.x, src.y, grid.z_plane])
    r = np.linalg.norm(geom.positions - source, axis=1)
    if np.any(r <= 0.0):
        raise DegenerateGeometryError(
            f"source at {tuple(source)} coincides with microphone {int(np.argmin(r))}"
        )
    return r / c, 1.0 / r


def synthesize_recording(
    src: SourceSample,
    geom: MicArrayGeometry,
    grid: ScanGrid,
    sample_rate: int = SAMPLE_RATE,
    duration: float = 1.0,
    seed: int = 0,
    c: float = SPEED_OF_SOUND,
) -> MultichannelSignal:
    """Simulate the array recording of a white-noise point source.

    The source has been emitting for longer than the largest travel time, so
    every channel is fully "on" from the first sample.  Delays are applied as
    linear phase on a zero-padded FFT buffer, which is exact for the
    band-limited noise and leaves no circular wrap in the kept window.
    Output is float32, the storage precision of recording files.
    """
    if not duration > 0:
        raise InvalidArgumentError(f"duration must be positive, got {duration}")
    delays, gains = propagation_params(src, geom, grid, c)
    n = int(round(sample_rate * duration))
    if n < 1:
        raise InvalidArgumentError("duration too short for one sample")
    pad = int(math.ceil(delays.max() * sample_rate)) + 1

    rng = np.random.default_rng(seed)
    source = rng.standard_normal(n + pad)
    source *= src.p / np.sqrt(np.mean(source**2))

    nfft = sp_fft.next_fast_len(n + 2 * pad, real=True)
    spec = sp_fft.rfft(source, nfft)
    freqs = np.fft.rfftfreq(nfft, d=1.0 / sample_rate)
    shifts = np.exp(-2j * np.pi * freqs[None, :] * delays[:, None]) * gains[:, None]
    channels = sp_fft.irfft(spec[None, :] * shifts, nfft, axis=1)[:, pad : pad + n]
    return MultichannelSignal(channels.astype(np.float32), int(sample_rate))


# -- recording files ---------------------------------------------------------


def write_recording(path, src: SourceSample, sig: MultichannelSignal) -> None:
    """Write the binary recording layout (magic, u32 header, f64 truth, f32 data)."""
    data = np.ascontiguousarray(sig.data, dtype="<f4")
    header = _HEADER.pack(
        RECORDING_MAGIC, RECORDING_VERSION, sig.n_mics, sig.n_samples, int(sig.sample_rate),
        float(src.x), float(src.y), float(src.p),
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())
    os.replace(tmp, path)


def load_recording(
    path, sample_id: int = -1, split: str | None = None
) -> tuple[SourceSample, MultichannelSignal]:
    """Read a recording file.  The file carries no id/split, so callers that
    know them (e.g. from a manifest) pass them through."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n_mics, n_samples, rate, x, y, p = _HEADER.unpack_from(raw)
    if magic != RECORDING_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != RECORDING_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n_mics * n_samples
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n_mics, n_samples)
    try:
        src = SourceSample(sample_id, x, y, p, split)
        sig = MultichannelSignal(data.astype(np.float32), rate)
    except InvalidArgumentError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return src, sig


# -- datasets ----------------------------------------------------------------


@dataclass
class DatasetConfig:
    counts: tuple[int, int, int] = (2400, 800, 1000)
    base_seed: int = 0
    p_min: float = 0.05
    sample_rate: int = SAMPLE_RATE
    duration: float = 1.0
    speed_of_sound: float = SPEED_OF_SOUND
    grid: ScanGrid = field(default_factory=ScanGrid)
    geometry: MicArrayGeometry = field(default_factory=build_spiral_array)

    def __post_init__(self):
        self.counts = tuple(int(n) for n in self.counts)
        if len(self.counts) != 3 or min(self.counts) < 0:
            raise InvalidArgumentError(f"counts must be three non-negative integers, got {self.counts}")
        if not 0 < self.p_min < 1:
            raise InvalidArgumentError(f"p_min must lie in (0, 1), got {self.p_min}")

    def split_of(self, sample_id: int) -> str:
        edges = np.cumsum(self.counts)
        for name, edge in zip(SPLITS, edges):
            if sample_id < edge:
                return name
        raise InvalidArgumentError(f"id {sample_id} beyond dataset size {edges[-1]}")

    def params(self) -> dict:
        return {
            "counts": list(self.counts),
            "p_min": self.p_min,
            "sample_rate": self.sample_rate,
            "duration": self.duration,
            "speed_of_sound": self.speed_of_sound,
            "grid": asdict(self.grid),
        }


@dataclass(frozen=True)
class DatasetManifest:
    base_seed: int
    geometry_hash: str
    records: tuple[tuple[SourceSample, str], ...]
    params: dict = field(default_factory=dict)
    root: Path | None = None

    @property
    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in SPLITS}
        for src, _ in self.records:
            out[src.split] += 1
        return out

    def split(self, name: str) -> list[tuple[SourceSample, str]]:
        return [(s, p) for s, p in self.records if s.split == name]

    def load(self, record: tuple[SourceSample, str]) -> tuple[SourceSample, MultichannelSignal]:
        src, rel = record
        base = self.root if self.root is not None else Path(".")
        _, sig = load_recording(base / rel, src.id, src.split)
        return src, sig

    def grid(self) -> ScanGrid:
        return ScanGrid(**self.params["grid"]) if "grid" in self.params else ScanGrid()

    def to_json(self) -> str:
        doc = {
            "base_seed": self.base_seed,
            "geometry_hash": self.geometry_hash,
            "params": self.params,
            "records": [
                {"id": s.id, "x": s.x, "y": s.y, "p": s.p, "split": s.split, "path": rel}
                for s, rel in self.records
            ],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def load_file(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            records = tuple(
                (SourceSample(r["id"], r["x"], r["y"], r["p"], r["split"]), r["path"])
                for r in doc["records"]
            )
            return cls(doc["base_seed"], doc["geometry_hash"], records, doc.get("params", {}), path.parent)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: malformed manifest ({exc})") from exc


def draw_source(cfg: DatasetConfig, sample_id: int) -> SourceSample:
    """Ground truth of sample ``sample_id``, a pure function of ``base_seed + id``."""
    rng = np.random.default_rng([cfg.base_seed + sample_id, 0])
    u = rng.random(3)
    g = cfg.grid
    x = g.x_min + u[0] * (g.x_max - g.x_min)
    y = g.y_min + u[1] * (g.y_max - g.y_min)
    p = 1.0 - u[2] * (1.0 - cfg.p_min)  # (p_min, 1]
    return SourceSample(sample_id, float(x), float(y), float(p), cfg.split_of(sample_id))


def generate_sample(cfg: DatasetConfig, sample_id: int) -> tuple[SourceSample, MultichannelSignal]:
    src = draw_source(cfg, sample_id)
    sig = synthesize_recording(
        src, cfg.geometry, cfg.grid, cfg.sample_rate, cfg.duration,
        seed=cfg.base_seed + sample_id, c=cfg.speed_of_sound,
    )
    return src, sig


def recording_name(sample_id: int) -> str:
    return f"recordings/{sample_id:05d}.acn"


def _write_one(args) -> tuple[SourceSample, str]:
    cfg, out_dir, sample_id = args
    src, sig = generate_sample(cfg, sample_id)
    rel = recording_name(sample_id)
    write_recording(Path(out_dir) / rel, src, sig)
    return src, rel


def generate_dataset(
    cfg: DatasetConfig, out_dir, ids: Iterable[int] | None = None, workers: int = 1
) -> DatasetManifest:
    """Simulate every sample, write recordings plus ``manifest.json`` and
    ``geometry.json`` under ``out_dir``.

    ``ids`` restricts or reorders generation; the per-id files do not depend on
    it, nor on ``workers``.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "recordings").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    total = sum(cfg.counts)
    order = list(range(total)) if ids is None else [int(i) for i in ids]
    jobs = [(cfg, str(out_dir), i) for i in order]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_write_one, jobs, chunksize=8))
    else:
        results = [_write_one(j) for j in jobs]
    results.sort(key=lambda r: r[0].id)

    cfg.geometry.save(out_dir / "geometry.json")
    manifest = DatasetManifest(
        cfg.base_seed, cfg.geometry.digest(), tuple(results), cfg.params(), out_dir
    )
    (out_dir / "manifest.json").write_text(manifest.to_json())
    return manifest


def snap_to_grid(src: SourceSample, grid: ScanGrid) -> SourceSample:
    """Move a source onto its nearest grid node."""
    x, y = grid.node(int(grid.nearest_index(src.x, src.y)))
    return SourceSample(src.id, x, y, src.p, src.split)
