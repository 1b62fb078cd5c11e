"""Command-line pipeline: simulate, preprocess, beamform, train, fuse, eval, report.

Configuration is one JSON file (every key optional, unknown keys rejected).
Command-line flags override single config entries; ``--set section.key=VALUE``
reaches any entry (``VALUE`` is parsed as JSON when possible).  The output
directory can also be forced with the ``ACNET_OUTPUT_DIR`` environment
variable, which wins over both the file and ``--output-dir``.

Exit codes: 0 success, 1 user error (bad config, bad arguments, invalid data),
2 internal or I/O error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import re
import sys
import traceback
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .arraysim import DatasetConfig, DatasetManifest, ScanGrid, build_spiral_array, generate_dataset
from .beamform import METHODS, BeamMap, Beamformer, extract_estimate, write_beammap
from .errors import AcnetError, InvalidArgumentError
from .evalbench import (
    BeamformMethod,
    NetworkMethod,
    compare,
    format_table,
    write_estimates_csv,
    write_report_csv,
)
from .features import FeatureSet, build_features
from .spectra import StftConfig, export_pgm, to_gray_stack

log = logging.getLogger("acnet")

ENV_OUTPUT_DIR = "ACNET_OUTPUT_DIR"
COMMANDS = ("simulate", "preprocess", "beamform", "train", "fuse", "eval", "report")
NETWORK_METHOD = "acoustic-net"


def _model_defaults() -> dict:
    from .nn.model import ModelConfig

    return ModelConfig().to_dict()


def _train_defaults() -> dict:
    from .nn.train import TrainConfig

    d = TrainConfig().to_dict()
    d.pop("seed")  # drawn from the top-level seed
    return d


def default_config() -> dict:
    return {
        "paths": {"data_dir": "data", "output_dir": "out"},
        "seed": 0,
        "array": {"count": 56, "radius": 0.75},
        "grid": asdict(ScanGrid()),
        "signal": {
            "counts": [2400, 800, 1000],
            "duration": 1.0,
            "sample_rate": 51200,
            "speed_of_sound": 343.0,
            "p_min": 0.05,
            "workers": 1,
        },
        "stft": {"window_len": 128, "hop": 64, "fft_len": 128, "out_h": 64, "out_w": 64},
        "model": _model_defaults(),
        "train": _train_defaults(),
        "beamform": {
            "methods": list(METHODS),
            "band": [2000.0, 8000.0],
            "block_len": 1024,
            "damas_iters": 500,
            "clean_gain": 0.6,
            "clean_iters": 100,
            "fista_iters": 200,
            "remove_diagonal": False,
            "zoom_half_width": 0.05,
        },
        "eval": {"split": "test", "methods": list(METHODS), "repeats": 3, "checkpoint": None},
    }


class ConfigError(AcnetError, ValueError):
    pass


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _merge(base: dict, over: dict, where: str, text: str, src: str) -> None:
    for key, val in over.items():
        if key not in base:
            line = _line_of(text, key)
            loc = f"{src}:{line}" if line else src
            section = f" in section '{where}'" if where else ""
            raise ConfigError(f"{loc}: unknown key '{key}'{section}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                line = _line_of(text, key)
                raise ConfigError(f"{src}:{line or '?'}: '{key}' must be an object")
            _merge(base[key], val, f"{where}.{key}" if where else key, text, src)
        else:
            base[key] = val


def load_config(path=None, text: str | None = None) -> dict:
    """Defaults overlaid with the JSON file at ``path`` (or ``text``)."""
    cfg = default_config()
    if path is None and text is None:
        return cfg
    src = str(path) if path is not None else "<config>"
    if text is None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{src}: cannot read config ({exc.strerror})") from exc
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{src}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{src}:1: top level must be a JSON object")
    _merge(cfg, user, "", text, src)
    return cfg


def apply_override(cfg: dict, dotted: str, value) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"--set: unknown config path '{dotted}'")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"--set: unknown config path '{dotted}'")
    node[parts[-1]] = value


def config_hash(cfg: dict) -> str:
    """SHA-256 of the resolved config without its ``paths`` section."""
    body = {k: v for k, v in cfg.items() if k != "paths"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


# -- config -> objects -------------------------------------------------------------


def _grid(cfg) -> ScanGrid:
    try:
        return ScanGrid(**cfg["grid"])
    except TypeError as exc:
        raise ConfigError(f"grid: {exc}") from exc


def _dataset_config(cfg) -> DatasetConfig:
    s = cfg["signal"]
    return DatasetConfig(
        counts=tuple(s["counts"]),
        base_seed=int(cfg["seed"]),
        p_min=float(s["p_min"]),
        sample_rate=int(s["sample_rate"]),
        duration=float(s["duration"]),
        speed_of_sound=float(s["speed_of_sound"]),
        grid=_grid(cfg),
        geometry=build_spiral_array(int(cfg["array"]["count"]), float(cfg["array"]["radius"])),
    )


def _stft(cfg) -> tuple[StftConfig, int, int]:
    s = cfg["stft"]
    return StftConfig(int(s["window_len"]), int(s["hop"]), int(s["fft_len"])), int(s["out_h"]), int(s["out_w"])


def _model_config(cfg):
    from .nn.model import ModelConfig

    mcfg = ModelConfig.from_dict(cfg["model"])
    _, h, w = _stft(cfg)
    if (mcfg.in_h, mcfg.in_w) != (h, w):
        raise ConfigError(f"model input {mcfg.in_h}x{mcfg.in_w} does not match stft output {h}x{w}")
    if mcfg.in_mics != int(cfg["array"]["count"]):
        raise ConfigError(f"model expects {mcfg.in_mics} mics, array has {cfg['array']['count']}")
    return mcfg


def _train_config(cfg):
    from .nn.train import TrainConfig

    unknown = set(cfg["train"]) - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise ConfigError(f"train: unknown keys {sorted(unknown)}")
    return TrainConfig(**cfg["train"], seed=int(cfg["seed"]))


def _beamformer(cfg, manifest: DatasetManifest) -> Beamformer:
    b = cfg["beamform"]
    geom = build_spiral_array(int(cfg["array"]["count"]), float(cfg["array"]["radius"]))
    if manifest.geometry_hash != geom.digest():
        raise InvalidArgumentError("dataset was generated with a different array geometry than the config")
    return Beamformer(
        geom, manifest.grid(), tuple(b["band"]), int(b["block_len"]),
        float(manifest.params.get("speed_of_sound", cfg["signal"]["speed_of_sound"])),
        int(b["damas_iters"]), float(b["clean_gain"]), int(b["clean_iters"]), int(b["fista_iters"]),
        bool(b["remove_diagonal"]),
    )


def _data_dir(cfg) -> Path:
    return Path(cfg["paths"]["data_dir"])


def _out_dir(cfg) -> Path:
    return Path(cfg["paths"]["output_dir"])


def _manifest(cfg) -> DatasetManifest:
    path = _data_dir(cfg) / "manifest.json"
    if not path.exists():
        raise InvalidArgumentError(f"{path} not found; run 'simulate' first")
    return DatasetManifest.load_file(path)


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


# -- figure export -------------------------------------------------------------------


def emit_beammap_figure(bmap: BeamMap, truth, estimate, prefix, half_width: float = 0.05) -> list[Path]:
    """Full-grid PGM + CSV, and a zoomed CSV window ``estimate +- half_width``
    clipped to the grid.  ``estimate=None`` extracts it from the map."""
    if estimate is None:
        estimate = extract_estimate(bmap)
    g = bmap.grid
    ex, ey = float(estimate[0]), float(estimate[1])
    window = (
        max(g.x_min, ex - half_width), min(g.x_max, ex + half_width),
        max(g.y_min, ey - half_width), min(g.y_max, ey + half_width),
    )
    prefix = Path(prefix)
    paths = write_beammap(bmap, prefix)
    paths += write_beammap(bmap, prefix.with_name(prefix.name + "_zoom"), window)
    meta = {
        "method": bmap.method,
        "estimate": {"x": ex, "y": ey, "spl": float(estimate[2]) if len(estimate) > 2 else None},
        "truth": None if truth is None else {"x": float(truth[0]), "y": float(truth[1]), "spl": float(truth[2])},
        "zoom_window": list(window),
    }
    paths.append(_write_json(prefix.with_name(prefix.name + "_figure.json"), meta))
    return paths


# -- commands -------------------------------------------------------------------------


def cmd_simulate(cfg, args) -> int:
    dcfg = _dataset_config(cfg)
    workers = int(cfg["signal"]["workers"])
    manifest = generate_dataset(dcfg, _data_dir(cfg), workers=workers)
    print(f"wrote {len(manifest.records)} recordings to {_data_dir(cfg)} {manifest.counts}")
    return 0


def cmd_preprocess(cfg, args) -> int:
    manifest = _manifest(cfg)
    stft_cfg, h, w = _stft(cfg)
    decim = int(cfg["model"]["raw_decimation"])
    feat_dir = _data_dir(cfg) / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    for split, n in manifest.counts.items():
        if n == 0:
            continue
        fs = build_features(manifest, split, stft_cfg, h, w, decim)
        fs.save(feat_dir / f"{split}.npz")
        print(f"{split}: {len(fs)} samples -> {feat_dir / (split + '.npz')}")
    if args.pgm:
        src, sig = manifest.load(manifest.records[0])
        stack = to_gray_stack(sig, stft_cfg, h, w)
        paths = export_pgm(stack, _out_dir(cfg) / "pgm", prefix=f"{src.id:05d}_mic")
        print(f"exported {len(paths)} spectrogram images for sample {src.id}")
    return 0


def _select_records(manifest: DatasetManifest, split: str, sample: int | None):
    if sample is not None:
        recs = [r for r in manifest.records if r[0].id == sample]
        if not recs:
            raise InvalidArgumentError(f"sample {sample} is not in the dataset")
        return recs
    recs = manifest.split(split)
    if not recs:
        raise InvalidArgumentError(f"split {split!r} is empty")
    return recs


def cmd_beamform(cfg, args) -> int:
    manifest = _manifest(cfg)
    bf = _beamformer(cfg, manifest)
    methods = [args.method] if args.method else list(cfg["beamform"]["methods"])
    for m in methods:
        if m not in METHODS:
            raise InvalidArgumentError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    out = _out_dir(cfg) / "beamform"
    from .spectra import spl_from_pressure

    for m in methods:
        for src, rel in _select_records(manifest, cfg["eval"]["split"], args.sample):
            _, sig = manifest.load((src, rel))
            bmap = bf.run(sig, m)
            est = extract_estimate(bmap)
            truth = (src.x, src.y, spl_from_pressure(src.p))
            emit_beammap_figure(bmap, truth, est, out / m / f"{src.id:05d}", float(cfg["beamform"]["zoom_half_width"]))
            print(f"{m} sample {src.id}: estimate ({est[0]:.3f}, {est[1]:.3f}) m, {est[2]:.2f} dB; "
                  f"truth ({truth[0]:.3f}, {truth[1]:.3f}) m, {truth[2]:.2f} dB")
    return 0


def _features(cfg, split: str) -> FeatureSet:
    path = _data_dir(cfg) / "features" / f"{split}.npz"
    if not path.exists():
        raise InvalidArgumentError(f"{path} not found; run 'preprocess' first")
    return FeatureSet.load(path)


def cmd_train(cfg, args) -> int:
    from .nn.checkpoint import save_checkpoint, write_history
    from .nn.train import train

    mcfg, tcfg = _model_config(cfg), _train_config(cfg)
    train_set = _features(cfg, "train")
    val_path = _data_dir(cfg) / "features" / "val.npz"
    val_set = FeatureSet.load(val_path) if val_path.exists() else None
    out = _out_dir(cfg) / "model"

    def on_epoch(rec, model):
        msg = " ".join(f"{k}={v:.4f}" for k, v in rec.items() if k != "epoch")
        print(f"epoch {rec['epoch']}: {msg}", flush=True)

    result = train(train_set, val_set, tcfg, mcfg, on_epoch=on_epoch)
    save_checkpoint(out / "last.ack", result.model, tcfg.epochs, result.history[-1])
    save_checkpoint(out / "best.ack", result.best_model(), result.best_epoch, result.best_metrics)
    write_history(out / "history.csv", result.history)
    _write_json(out / "train_config.json", {"config_hash": config_hash(cfg), "train": tcfg.to_dict(), "model": mcfg.to_dict()})
    print(f"best epoch {result.best_epoch}: {result.best_metrics}; checkpoints in {out}")
    return 0


def cmd_fuse(cfg, args) -> int:
    from .nn.checkpoint import load_checkpoint, save_checkpoint

    src = Path(args.checkpoint) if args.checkpoint else _out_dir(cfg) / "model" / "best.ack"
    if not src.exists():
        raise InvalidArgumentError(f"{src} not found; run 'train' first")
    model, header = load_checkpoint(src)
    if header["form"] != "train":
        raise InvalidArgumentError(f"{src} is already fused")
    fused = model.fuse()
    dst = Path(args.output) if args.output else src.with_name(src.stem + "_fused.ack")
    save_checkpoint(dst, fused, header["epoch"], header["metrics"])
    for split in ("test", "val", "train"):
        path = _data_dir(cfg) / "features" / f"{split}.npz"
        if path.exists():
            fs = FeatureSet.load(path).subset(slice(0, 10))
            a, b = model.predict(fs.stacks, fs.raws), fused.predict(fs.stacks, fs.raws)
            rel = float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-12))
            print(f"fused vs training form on {len(fs)} {split} samples: max relative deviation {rel:.2e}")
            break
    print(f"wrote {dst}")
    return 0


def _eval_methods(cfg, manifest, names):
    from .nn.checkpoint import load_checkpoint

    methods = []
    bf = None
    for name in names:
        if name in METHODS:
            bf = bf or _beamformer(cfg, manifest)
            methods.append(BeamformMethod(bf, name))
        elif name == NETWORK_METHOD:
            ck = cfg["eval"]["checkpoint"]
            path = Path(ck) if ck else _out_dir(cfg) / "model" / "best_fused.ack"
            if not path.exists():
                raise InvalidArgumentError(f"{path} not found; train and fuse a model first")
            model, _ = load_checkpoint(path)
            stft_cfg, _, _ = _stft(cfg)
            methods.append(NetworkMethod(model, stft_cfg, NETWORK_METHOD))
        else:
            raise InvalidArgumentError(f"unknown method {name!r}")
    return methods


def cmd_eval(cfg, args) -> int:
    manifest = _manifest(cfg)
    names = args.methods.split(",") if args.methods else list(cfg["eval"]["methods"])
    methods = _eval_methods(cfg, manifest, names)
    reports, rows = compare(methods, manifest, cfg["eval"]["split"], int(cfg["eval"]["repeats"]))
    out = _out_dir(cfg) / "eval"
    write_report_csv(out / "report.csv", reports)
    write_estimates_csv(out / "estimates.csv", rows)
    _write_json(out / "eval_meta.json", {"config_hash": config_hash(cfg), "split": cfg["eval"]["split"], "methods": names})
    print(format_table(reports), end="")
    return 0


def cmd_report(cfg, args) -> int:
    import csv

    src = _out_dir(cfg) / "eval" / "report.csv"
    if not src.exists():
        raise InvalidArgumentError(f"{src} not found; run 'eval' first")
    h = config_hash(cfg)
    with open(src, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = _out_dir(cfg) / "report"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "table2.csv", "w", newline="") as fh:
        fh.write(f"# config_sha256={h}\n")
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else [])
        w.writeheader()
        w.writerows(rows)

    from .evalbench import MetricsReport

    reports = [
        MetricsReport(r["method"], float(r["mde_m"]), float(r["mae_spl_db"]), float(r["mape_x_pct"]),
                      float(r["mape_spl_pct"]), float(r["time_s"] or "nan"), int(r["n_failed"]))
        for r in rows
    ]
    text = f"config_sha256 {h}\n\n" + format_table(reports)
    (out / "table2.txt").write_text(text)
    _write_json(out / "report.json", {"config_sha256": h, "config": cfg, "rows": rows})
    print(text, end="")
    return 0


HANDLERS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "beamform": cmd_beamform,
    "train": cmd_train,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "report": cmd_report,
}


# -- argument parsing ---------------------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--data-dir", help="paths.data_dir")
    common.add_argument("--output-dir", help=f"paths.output_dir (the {ENV_OUTPUT_DIR} variable takes precedence)")
    common.add_argument("--seed", type=int, help="seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config entry")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="acnet", description="Acoustic source localization pipeline.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    s = sub.add_parser("simulate", parents=[common], help="synthesize a dataset")
    s.add_argument("--counts", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"), help="signal.counts")
    s.add_argument("--duration", type=float, help="signal.duration")
    s.add_argument("--workers", type=int, help="signal.workers")
    s = sub.add_parser("preprocess", parents=[common], help="build spectrogram stacks and raw inputs")
    s.add_argument("--pgm", action="store_true", help="also export the first sample's stack as PGM images")
    s = sub.add_parser("beamform", parents=[common], help="run classical beamforming and export maps")
    s.add_argument("--method", choices=METHODS, help="single method instead of beamform.methods")
    s.add_argument("--sample", type=int, help="one sample id instead of the eval split")
    s.add_argument("--split", help="eval.split")
    s = sub.add_parser("train", parents=[common], help="train the network")
    s.add_argument("--epochs", type=int, help="train.epochs")
    s = sub.add_parser("fuse", parents=[common], help="convert a training checkpoint to fused form")
    s.add_argument("--checkpoint", help="training-form checkpoint (default <output>/model/best.ack)")
    s.add_argument("--output", help="fused checkpoint path (default <name>_fused.ack)")
    s = sub.add_parser("eval", parents=[common], help="score methods on a split")
    s.add_argument("--methods", help="comma list, overrides eval.methods")
    s.add_argument("--split", help="eval.split")
    s.add_argument("--checkpoint", help="eval.checkpoint")
    sub.add_parser("report", parents=[common], help="summarize the last evaluation")
    return p


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> dict:
    cfg = load_config(args.config)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        apply_override(cfg, key.strip(), _parse_value(val))
    flag_map = {
        "data_dir": "paths.data_dir",
        "output_dir": "paths.output_dir",
        "seed": "seed",
        "counts": "signal.counts",
        "duration": "signal.duration",
        "workers": "signal.workers",
        "epochs": "train.epochs",
        "split": "eval.split",
    }
    for attr, dotted in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            apply_override(cfg, dotted, val)
    if getattr(args, "command", None) == "eval" and getattr(args, "checkpoint", None):
        apply_override(cfg, "eval.checkpoint", args.checkpoint)
    env = os.environ.get(ENV_OUTPUT_DIR)
    if env:
        cfg["paths"]["output_dir"] = env
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return HANDLERS[args.command](copy.deepcopy(cfg), args)
    except (AcnetError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except Exception:  # noqa: BLE001 - last-resort handler maps crashes to exit 2
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
