"""Checkpoint files and training-history CSV.

Layout: ``b"ACK1"``, a little-endian u32 header length, a UTF-8 JSON header,
then every tensor as little-endian float32 in header-index order.  The header
carries ``form`` ("train" or "fused"), the model config, epoch, metrics and an
index of ``{name, shape, offset}`` entries (offsets in bytes from the start of
the payload).
"""

from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .model import AcousticNet, ModelConfig, fused_skeleton

MAGIC = b"ACK1"
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_MDE", "val_MAE_SPL")
_HISTORY_KEYS = ("epoch", "train_loss", "val_loss", "val_mde", "val_mae_spl")


def save_checkpoint(path, model: AcousticNet, epoch: int = 0, metrics: dict | None = None) -> Path:
    path = Path(path)
    state = model.state_dict()
    index, offset, blobs = [], 0, []
    for name, arr in state.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "form": "fused" if model.fused else "train",
        "model_config": model.cfg.to_dict(),
        "epoch": int(epoch),
        "metrics": {k: float(v) for k, v in (metrics or {}).items()},
        "index": index,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(head)) + head)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def read_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    payload = raw[8 + n :]
    if len(payload) != header.get("payload_bytes", -1):
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header says {header.get('payload_bytes')}")
    return header, payload


def load_checkpoint(path, dtype=np.float32) -> tuple[AcousticNet, dict]:
    """Rebuilds the network in the stored form and returns it with the header."""
    header, payload = read_header(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    if header["form"] == "fused":
        model = fused_skeleton(cfg, dtype)
    elif header["form"] == "train":
        model = AcousticNet(cfg, seed=0, dtype=dtype)
    else:
        raise FormatError(f"{path}: unknown checkpoint form {header['form']!r}")
    state = {}
    for entry in header["index"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype)
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return model, header


def write_history(path, history: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            w.writerow([rec["epoch"]] + [repr(float(rec.get(k, float("nan")))) for k in _HISTORY_KEYS[1:]])
    return path


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        rec = {"epoch": int(row["epoch"])}
        for col, key in zip(HISTORY_COLUMNS[1:], _HISTORY_KEYS[1:]):
            rec[key] = float(row[col])
        out.append(rec)
    return out
