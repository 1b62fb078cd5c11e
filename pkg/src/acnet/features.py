"""Network inputs built from a dataset manifest."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arraysim import DatasetManifest, MultichannelSignal
from .errors import FormatError, InvalidArgumentError
from .spectra import StftConfig, decimate_mean, spl_from_pressure, to_gray_stack

# 0.1 s recordings give 79 frames of 65 bins with this setting, cropped to 64 x 64
DESK_STFT = StftConfig(window_len=128, hop=64, fft_len=128)


@dataclass
class FeatureSet:
    ids: np.ndarray  # (N,)
    stacks: np.ndarray  # (N, mics, H, W) float32
    raws: np.ndarray  # (N, mics, T) float32
    targets: np.ndarray  # (N, 3): x [m], y [m], SPL [dB]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "FeatureSet":
        return FeatureSet(self.ids[idx], self.stacks[idx], self.raws[idx], self.targets[idx])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, ids=self.ids, stacks=self.stacks, raws=self.raws, targets=self.targets)

    @classmethod
    def load(cls, path) -> "FeatureSet":
        try:
            with np.load(Path(path)) as z:
                return cls(z["ids"], z["stacks"], z["raws"], z["targets"])
        except (KeyError, ValueError, OSError) as exc:
            raise FormatError(f"{path}: not a feature file ({exc})") from exc


def sample_features(
    sig: MultichannelSignal, stft_cfg: StftConfig, out_h: int, out_w: int, decimation: int
) -> tuple[np.ndarray, np.ndarray]:
    stack = to_gray_stack(sig, stft_cfg, out_h, out_w).data
    raw = decimate_mean(sig, decimation).astype(np.float32)
    return stack, raw


def build_features(
    manifest: DatasetManifest,
    split: str,
    stft_cfg: StftConfig = DESK_STFT,
    out_h: int = 64,
    out_w: int = 64,
    decimation: int = 8,
) -> FeatureSet:
    records = manifest.split(split)
    if not records:
        raise InvalidArgumentError(f"split {split!r} is empty")
    ids, stacks, raws, targets = [], [], [], []
    for rec in records:
        src, sig = manifest.load(rec)
        stack, raw = sample_features(sig, stft_cfg, out_h, out_w, decimation)
        ids.append(src.id)
        stacks.append(stack)
        raws.append(raw)
        targets.append((src.x, src.y, spl_from_pressure(src.p)))
    return FeatureSet(np.array(ids), np.stack(stacks), np.stack(raws), np.array(targets, dtype=np.float64))
