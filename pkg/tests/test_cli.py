import csv
import json

import numpy as np
import pytest

from acnet import cli
from acnet._pgm import read_pgm
from acnet.arraysim import ScanGrid
from acnet.beamform import BeamMap
from acnet.errors import NoSourceError


def run(args, capsys=None):
    code = cli.main(args)
    out = capsys.readouterr() if capsys else None
    return code, out


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.ENV_OUTPUT_DIR, raising=False)
    monkeypatch.chdir(tmp_path)
    return tmp_path


def small_config(path, **extra):
    cfg = {"signal": {"counts": [2, 1, 1], "duration": 0.1}, "seed": 3}
    cfg.update(extra)
    path.write_text(json.dumps(cfg, indent=2))
    return str(path)


def test_unknown_command(capsys):
    code, out = run(["explode"], capsys)
    assert code == 1 and "usage" in out.err


def test_no_command(capsys):
    code, out = run([], capsys)
    assert code == 1 and "usage" in out.err


def test_malformed_config_line_anchored(workdir, capsys):
    (workdir / "c.json").write_text('{\n  "seed": 1,\n  "signal": {"counts": [1, 1 1]}\n}\n')
    code, out = run(["simulate", "--config", "c.json"], capsys)
    assert code == 1
    assert "c.json:3:" in out.err


def test_unknown_key_rejected(workdir, capsys):
    (workdir / "c.json").write_text('{\n  "train": {\n    "epochz": 3\n  }\n}\n')
    code, out = run(["train", "--config", "c.json"], capsys)
    assert code == 1
    assert "c.json:3" in out.err and "epochz" in out.err


def test_defaults_match_modules():
    cfg = cli.default_config()
    assert cfg["grid"]["nx"] == 31 and cfg["grid"]["z_plane"] == 2.5
    assert cfg["signal"]["counts"] == [2400, 800, 1000]
    assert cfg["beamform"]["block_len"] == 1024 and cfg["beamform"]["damas_iters"] == 500
    assert cfg["train"]["lr"] == 0.01 and cfg["train"]["batch"] == 8 and cfg["train"]["epochs"] == 150
    assert cfg["model"]["stage_widths"] == [8, 8, 16, 32, 64]


def test_set_and_flags(workdir):
    args = cli.build_parser().parse_args(
        ["train", "--set", "train.alpha=2.5", "--set", "grid.nx=11", "--epochs", "4", "--seed", "9"]
    )
    cfg = cli.resolve_config(args)
    assert cfg["train"]["alpha"] == 2.5 and cfg["grid"]["nx"] == 11
    assert cfg["train"]["epochs"] == 4 and cfg["seed"] == 9
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(cli.build_parser().parse_args(["train", "--set", "train.nope=1"]))


def test_config_hash_ignores_paths():
    a, b = cli.default_config(), cli.default_config()
    b["paths"]["output_dir"] = "elsewhere"
    assert cli.config_hash(a) == cli.config_hash(b)
    b["seed"] = 1
    assert cli.config_hash(a) != cli.config_hash(b)


def test_simulate_and_env_override(workdir, monkeypatch, capsys):
    cfg = small_config(workdir / "c.json")
    code, _ = run(["simulate", "--config", cfg], capsys)
    assert code == 0
    manifest = json.loads((workdir / "data/manifest.json").read_text())
    assert len(manifest["records"]) == 4
    monkeypatch.setenv(cli.ENV_OUTPUT_DIR, str(workdir / "envout"))
    code, _ = run(["beamform", "--config", cfg, "--method", "das", "--sample", "3", "--output-dir", "ignored"], capsys)
    assert code == 0
    assert (workdir / "envout/beamform/das/00003.pgm").exists()
    assert not (workdir / "ignored").exists()


def test_missing_data_is_user_error(workdir, capsys):
    code, out = run(["preprocess"], capsys)
    assert code == 1 and "simulate" in out.err


def test_emit_figure_zoom(tmp_path):
    grid = ScanGrid()
    v = np.zeros(grid.shape)
    ix, iy = 15, 13  # node (0.0, -0.2)
    v[ix, iy] = 0.04
    bmap = BeamMap(grid, v, (2000.0, 8000.0), "das")
    paths = cli.emit_beammap_figure(bmap, (-0.03, -0.21, 80.0), (-0.03, -0.21, 80.0), tmp_path / "fig")
    meta = json.loads((tmp_path / "fig_figure.json").read_text())
    assert meta["zoom_window"] == pytest.approx([-0.08, 0.02, -0.26, -0.16])
    with open(tmp_path / "fig_zoom.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(float(r["x"]), float(r["y"])) for r in rows] == [(0.0, -0.2)]
    img = read_pgm(tmp_path / "fig.pgm")
    r, c = np.unravel_index(np.argmax(img), img.shape)
    assert (c, grid.ny - 1 - r) == (ix, iy)
    assert any(p.name == "fig.csv" for p in paths)


def test_emit_figure_clips_to_grid(tmp_path):
    grid = ScanGrid()
    v = np.zeros(grid.shape)
    v[0, 0] = 1.0
    cli.emit_beammap_figure(BeamMap(grid, v, (1, 2), "das"), None, None, tmp_path / "f")
    meta = json.loads((tmp_path / "f_figure.json").read_text())
    assert meta["zoom_window"] == pytest.approx([-1.5, -1.45, -1.5, -1.45])


def test_emit_figure_zero_map(tmp_path, monkeypatch, capsys):
    bmap = BeamMap(ScanGrid(), np.zeros((31, 31)), (1, 2), "das")
    with pytest.raises(NoSourceError):
        cli.emit_beammap_figure(bmap, None, None, tmp_path / "z")

    def boom(cfg, args):
        cli.emit_beammap_figure(bmap, None, None, tmp_path / "z")

    monkeypatch.setitem(cli.HANDLERS, "beamform", boom)
    code, out = run(["beamform"], capsys)
    assert code == 1 and "no positive maximum" in out.err


def test_io_failure_exit_two(tmp_path, monkeypatch, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    bmap = BeamMap(ScanGrid(), np.ones((31, 31)), (1, 2), "das")

    def write_into_file(cfg, args):
        cli.emit_beammap_figure(bmap, None, None, blocker / "sub" / "m")

    monkeypatch.setitem(cli.HANDLERS, "beamform", write_into_file)
    code, _ = run(["beamform"], capsys)
    assert code == 2


def test_full_pipeline_with_network(workdir, capsys):
    cfg = {"signal": {"counts": [4, 2, 10], "duration": 0.1}, "seed": 1,
           "train": {"epochs": 2}, "eval": {"repeats": 1, "methods": ["das", "acoustic-net"]}}
    (workdir / "c.json").write_text(json.dumps(cfg))
    base = ["--config", "c.json"]
    for cmd in (["simulate"], ["preprocess", "--pgm"], ["train"], ["fuse"]):
        code, out = run(cmd + base, capsys)
        assert code == 0, out.err
    assert "max relative deviation" in out.out
    dev = float(out.out.split("max relative deviation ")[1].split()[0])
    assert dev <= 1e-4
    assert (workdir / "out/model/best_fused.ack").exists()
    assert len(list((workdir / "out/pgm").glob("*.pgm"))) == 56
    hist = (workdir / "out/model/history.csv").read_text().splitlines()
    assert hist[0] == "epoch,train_loss,val_loss,val_MDE,val_MAE_SPL" and len(hist) == 3
    code, out = run(["eval"] + base, capsys)
    assert code == 0, out.err
    assert "acoustic-net" in out.out
    code, out = run(["report"] + base, capsys)
    assert code == 0
    h = cli.config_hash(cli.load_config("c.json"))
    assert h in out.out
    for name in ("table2.csv", "table2.txt", "report.json"):
        assert h in (workdir / "out/report" / name).read_text()


def test_fuse_rejects_fused(workdir, capsys):
    from acnet.nn.checkpoint import save_checkpoint
    from acnet.nn.model import AcousticNet

    save_checkpoint(workdir / "f.ack", AcousticNet(seed=0).fuse())
    code, out = run(["fuse", "--checkpoint", "f.ack"], capsys)
    assert code == 1 and "already fused" in out.err
