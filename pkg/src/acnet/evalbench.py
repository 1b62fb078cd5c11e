"""Accuracy metrics, timing and side-by-side method comparison."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .arraysim import DatasetManifest, MultichannelSignal, ScanGrid, SourceSample
from .beamform import Beamformer, extract_estimate
from .errors import InvalidArgumentError
from .features import DESK_STFT, sample_features
from .spectra import StftConfig, spl_from_pressure

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("method", "mde_m", "mae_spl_db", "mape_x_pct", "mape_spl_pct", "time_s", "n_failed")
ESTIMATE_COLUMNS = ("method", "id", "x", "y", "spl", "x_hat", "y_hat", "spl_hat", "time_s", "status")
ZERO_NORM = 1e-6


@dataclass
class EstimateSet:
    """Per-sample truth and predictions for one method.

    ``truth`` and ``pred`` are ``(M, 3)`` rows of ``(x, y, SPL)``.  Samples on
    which the method failed are kept out of these arrays and only counted.
    """

    method: str
    truth: np.ndarray
    pred: np.ndarray
    times: np.ndarray
    ids: np.ndarray = None
    n_failed: int = 0

    def __post_init__(self):
        self.truth = np.asarray(self.truth, dtype=np.float64).reshape(-1, 3)
        self.pred = np.asarray(self.pred, dtype=np.float64).reshape(-1, 3)
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if self.ids is None:
            self.ids = np.arange(len(self.truth))
        self.ids = np.asarray(self.ids)
        if not (len(self.truth) == len(self.pred) == len(self.times) == len(self.ids)):
            raise InvalidArgumentError("truth, predictions, times and ids differ in length")

    def __len__(self) -> int:
        return len(self.truth)

    @classmethod
    def from_pairs(cls, method, truth, pred, times=None) -> "EstimateSet":
        truth = np.asarray(truth, dtype=np.float64).reshape(-1, 3)
        return cls(method, truth, pred, np.zeros(len(truth)) if times is None else times)


def _require(s: EstimateSet) -> None:
    if len(s) == 0:
        raise InvalidArgumentError(f"{s.method}: no successful estimates to score")


def mde(s: EstimateSet) -> float:
    """Mean Euclidean distance between predicted and true positions (m)."""
    _require(s)
    return float(np.mean(np.linalg.norm(s.pred[:, :2] - s.truth[:, :2], axis=1)))


def mae_spl(s: EstimateSet) -> float:
    _require(s)
    return float(np.mean(np.abs(s.pred[:, 2] - s.truth[:, 2])))


def mape_counts(s: EstimateSet) -> tuple[float, float, int, int]:
    """``(MAPE_X %, MAPE_SPL %, n excluded for X, n excluded for SPL)``.

    Samples whose true position has norm below 1e-6 m (or whose true SPL is 0)
    are left out of the respective mean.  A metric with every sample excluded
    is NaN.
    """
    _require(s)
    norm_x = np.linalg.norm(s.truth[:, :2], axis=1)
    keep_x = norm_x >= ZERO_NORM
    keep_s = s.truth[:, 2] != 0
    err_x = np.linalg.norm(s.pred[:, :2] - s.truth[:, :2], axis=1)
    x_pct = 100.0 * float(np.mean(err_x[keep_x] / norm_x[keep_x])) if keep_x.any() else float("nan")
    spl_t = s.truth[keep_s, 2]
    s_pct = 100.0 * float(np.mean(np.abs(s.pred[keep_s, 2] - spl_t) / np.abs(spl_t))) if keep_s.any() else float("nan")
    n_ex, n_es = int((~keep_x).sum()), int((~keep_s).sum())
    if n_ex or n_es:
        log.warning("%s: excluded %d position / %d SPL samples with zero ground truth", s.method, n_ex, n_es)
    return x_pct, s_pct, n_ex, n_es


def mape(s: EstimateSet) -> tuple[float, float]:
    x_pct, s_pct, _, _ = mape_counts(s)
    return x_pct, s_pct


@dataclass(frozen=True)
class MetricsReport:
    method: str
    mde_m: float
    mae_spl_db: float
    mape_x_pct: float
    mape_spl_pct: float
    time_s: float
    n_failed: int = 0
    n_samples: int = 0
    excluded: dict = field(default_factory=dict)

    def row(self, with_time: bool = True) -> list:
        vals = [self.method, self.mde_m, self.mae_spl_db, self.mape_x_pct, self.mape_spl_pct]
        vals.append(self.time_s if with_time else "")
        vals.append(self.n_failed)
        return vals


def report(s: EstimateSet) -> MetricsReport:
    if len(s) == 0:
        nan = float("nan")
        return MetricsReport(s.method, nan, nan, nan, nan, nan, s.n_failed, 0)
    x_pct, s_pct, n_ex, n_es = mape_counts(s)
    return MetricsReport(
        s.method, mde(s), mae_spl(s), x_pct, s_pct, float(np.mean(s.times)), s.n_failed, len(s),
        {"x": n_ex, "spl": n_es},
    )


# -- methods ---------------------------------------------------------------------------


class Method(Protocol):
    """``estimate`` returns ``(x, y, SPL)``.  ``src`` is passed for oracles
    only; real methods read nothing but ``sig``."""

    name: str

    def prepare(self, sample_rate: int) -> None: ...

    def estimate(self, sig: MultichannelSignal, src: SourceSample) -> tuple[float, float, float]: ...


class TruthOracle:
    name = "oracle"

    def prepare(self, sample_rate):
        pass

    def estimate(self, sig, src):
        return src.x, src.y, spl_from_pressure(src.p)


class NearestGridOracle:
    """True position snapped to the nearest scan-grid node, true SPL."""

    def __init__(self, grid: ScanGrid, name: str = "grid-oracle"):
        self.grid, self.name = grid, name

    def prepare(self, sample_rate):
        pass

    def estimate(self, sig, src):
        x, y = self.grid.node(int(self.grid.nearest_index(src.x, src.y)))
        return x, y, spl_from_pressure(src.p)


class BeamformMethod:
    def __init__(self, beamformer: Beamformer, method: str):
        self.bf, self.name = beamformer, method

    def prepare(self, sample_rate):
        self.bf.prepare(self.name, sample_rate)

    def estimate(self, sig, src):
        return extract_estimate(self.bf.run(sig, self.name))


class NetworkMethod:
    """Trained network; timing covers feature extraction and inference."""

    def __init__(self, model, stft_cfg: StftConfig = DESK_STFT, name: str = "acoustic-net"):
        self.model, self.stft_cfg, self.name = model, stft_cfg, name

    def prepare(self, sample_rate):
        pass

    def estimate(self, sig, src):
        cfg = self.model.cfg
        stack, raw = sample_features(sig, self.stft_cfg, cfg.in_h, cfg.in_w, cfg.raw_decimation)
        x, y, spl = self.model.predict(stack[None], raw[None])[0]
        return float(x), float(y), float(spl)


# -- comparison ------------------------------------------------------------------------


def evaluate_method(method: Method, samples: Sequence[tuple[SourceSample, MultichannelSignal]], repeats: int = 3) -> tuple[EstimateSet, list[dict]]:
    """Runs ``method`` on every sample; the time is the median of ``repeats``
    runs.  Returns the scored set and one row per sample (failures included)."""
    if repeats < 1:
        raise InvalidArgumentError("repeats must be at least 1")
    truth, pred, times, ids, rows = [], [], [], [], []
    n_failed = 0
    prepared = set()
    for src, sig in samples:
        if sig.sample_rate not in prepared:
            method.prepare(int(sig.sample_rate))
            prepared.add(sig.sample_rate)
        true_row = (src.x, src.y, spl_from_pressure(src.p))
        row = {"method": method.name, "id": src.id, "x": src.x, "y": src.y, "spl": true_row[2]}
        try:
            durations = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                est = method.estimate(sig, src)
                durations.append(time.perf_counter() - t0)
        except (ValueError, ArithmeticError) as exc:
            n_failed += 1
            log.warning("%s failed on sample %d: %s", method.name, src.id, exc)
            rows.append({**row, "x_hat": "", "y_hat": "", "spl_hat": "", "time_s": "", "status": f"failed: {exc}"})
            continue
        t = float(np.median(durations))
        truth.append(true_row)
        pred.append(est)
        times.append(t)
        ids.append(src.id)
        rows.append({**row, "x_hat": est[0], "y_hat": est[1], "spl_hat": est[2], "time_s": t, "status": "ok"})
    est_set = EstimateSet(method.name, np.reshape(truth, (-1, 3)), np.reshape(pred, (-1, 3)), times, np.array(ids, dtype=int), n_failed)
    return est_set, rows


def compare(methods: Sequence[Method], manifest: DatasetManifest, split: str = "test", repeats: int = 3):
    """Scores every method on one split, in the order given.

    Recordings are loaded once, outside the timed region.  Returns
    ``(reports, per_sample_rows)``.
    """
    if not methods:
        raise InvalidArgumentError("compare needs at least one method")
    records = manifest.split(split)
    if not records:
        raise InvalidArgumentError(f"split {split!r} is empty")
    samples = [manifest.load(rec) for rec in records]
    reports, rows = [], []
    for m in methods:
        est_set, method_rows = evaluate_method(m, samples, repeats)
        reports.append(report(est_set))
        rows.extend(method_rows)
    return reports, rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def write_report_csv(path, reports: Sequence[MetricsReport], with_time: bool = True) -> Path:
    """Report CSV; ``with_time=False`` leaves the time column empty so the file
    is byte-reproducible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([_fmt(v) for v in r.row(with_time)])
    return path


def write_estimates_csv(path, rows: Sequence[dict], with_time: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ESTIMATE_COLUMNS)
        for row in rows:
            vals = [row[c] for c in ESTIMATE_COLUMNS]
            if not with_time:
                vals[ESTIMATE_COLUMNS.index("time_s")] = ""
            w.writerow([_fmt(v) if isinstance(v, float) else v for v in vals])
    return path


def format_table(reports: Sequence[MetricsReport]) -> str:
    header = ["Method", "MDE (m)", "MAE_SPL (dB)", "MAPE_X (%)", "MAPE_SPL (%)", "Time (s)", "Failed"]
    body = [
        [r.method, f"{r.mde_m:.4f}", f"{r.mae_spl_db:.4f}", f"{r.mape_x_pct:.4f}", f"{r.mape_spl_pct:.4f}",
         f"{r.time_s:.4f}", str(r.n_failed)]
        for r in reports
    ]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = []
    for k, row in enumerate([header] + body):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def grid_quantization_oracle(grid: ScanGrid = None, n: int = 10000, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo ``(MDE, MAPE_X %)`` of snapping uniform sources in the grid
    area to their nearest node."""
    grid = grid or ScanGrid()
    if n < 1:
        raise InvalidArgumentError("n must be positive")
    rng = np.random.default_rng(seed)
    xy = np.column_stack([rng.uniform(grid.x_min, grid.x_max, n), rng.uniform(grid.y_min, grid.y_max, n)])
    idx = grid.nearest_index(xy[:, 0], xy[:, 1])
    nodes = grid.points()[idx, :2]
    truth = np.column_stack([xy, np.full(n, 80.0)])
    pred = np.column_stack([nodes, np.full(n, 80.0)])
    s = EstimateSet.from_pairs("grid-oracle", truth, pred)
    return mde(s), mape(s)[0]
