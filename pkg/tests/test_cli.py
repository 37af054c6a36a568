import json
import subprocess
import sys

import numpy as np
import pytest

from downscale_lab import cli
from downscale_lab.errors import DivergedAtStep
from downscale_lab.evaluation import read_report_csv
from downscale_lab.grid import DailyGridSeries, GeoTransform, read_grid, write_grid
from downscale_lab.plot import read_ppm

SUBCOMMANDS = ["synth", "coarsen", "refine", "train", "downscale", "indicators", "evaluate", "plot"]

SYNTH = {"seed": 3, "height": 16, "width": 16, "years": 4, "stations": 6}
EDSR = {"kind": "edsr", "width": 4, "depth": 1, "scale": 4}
FNO = {"kind": "fno", "layers": 1, "hidden": 4, "modes1": 2, "modes2": 2, "projection": 4, "scale": 4}
SPLIT = {"train": [2001, 2002], "val": [2003, 2003], "test": [2004, 2004]}


def run(*args):
    return cli.main([str(a) for a in args])


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.mark.parametrize("command", SUBCOMMANDS)
def test_help_lists_flags(command, capsys):
    assert run(command, "--help") == 0
    text = capsys.readouterr().out
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


def test_usage_errors():
    assert run() == 1
    assert run("frobnicate") == 1
    assert run("coarsen", "--in", "x.grd") == 1
    assert run("coarsen", "--in", "x.grd", "--factor", "two", "--out", "y.grd") == 1


def test_unknown_config_key(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"synth": {**SYNTH, "hieght": 3}})
    assert run("synth", "--config", cfg, "--out", tmp_path / "o") == 1
    assert "hieght" in capsys.readouterr().err
    cfg = write_json(tmp_path / "d.json", {"synth": SYNTH, "extra": 1})
    assert run("synth", "--config", cfg, "--out", tmp_path / "o") == 1


def test_data_errors(tmp_path):
    bad = tmp_path / "bad.grd"
    bad.write_bytes(b"XXXX" + bytes(60))
    assert run("coarsen", "--in", bad, "--factor", 2, "--out", tmp_path / "o.grd") == 2
    assert run("coarsen", "--in", tmp_path / "missing.grd", "--factor", 2, "--out", tmp_path / "o.grd") == 2
    g = DailyGridSeries(np.zeros((2, 6, 6)), __import__("datetime").date(2003, 1, 1), GeoTransform(0, 6, 1, 1))
    write_grid(g, tmp_path / "g.grd")
    assert run("coarsen", "--in", tmp_path / "g.grd", "--factor", 4, "--out", tmp_path / "o.grd") == 2


def test_divergence_exit_code(tmp_path, monkeypatch):
    cfg = write_json(tmp_path / "c.json", {"synth": SYNTH, "model": EDSR, "split": SPLIT})
    assert run("synth", "--config", cfg, "--out", tmp_path / "d") == 0

    def diverge(*a, **k):
        raise DivergedAtStep(7, float("nan"))

    monkeypatch.setattr(cli, "train", diverge)
    assert run("train", "--config", cfg, "--pairs-from", tmp_path / "d" / "hr.grd", "--out", tmp_path / "r") == 3


def test_thread_env(tmp_path, monkeypatch):
    cfg = write_json(tmp_path / "c.json", {"synth": SYNTH})
    monkeypatch.setenv("DOWNSCALE_LAB_THREADS", "many")
    assert run("synth", "--config", cfg, "--out", tmp_path / "o") == 1
    monkeypatch.setenv("DOWNSCALE_LAB_THREADS", "1")
    assert run("synth", "--config", cfg, "--out", tmp_path / "o") == 0


def test_plot_constant(tmp_path):
    import datetime as dt

    g = DailyGridSeries(np.full((3, 5, 7), 4.0), dt.date(2003, 4, 30), GeoTransform(0, 5, 1, 1))
    write_grid(g, tmp_path / "g.grd")
    assert run("plot", "--in", tmp_path / "g.grd", "--date", "2003-05-01", "--out", tmp_path / "f.ppm") == 0
    rgb, comments = read_ppm(tmp_path / "f.ppm")
    assert rgb.shape == (5, 7, 3)
    assert len(np.unique(rgb.reshape(-1, 3), axis=0)) == 1
    assert comments == ["min=4.0 max=4.0"]
    assert run("plot", "--in", tmp_path / "g.grd", "--date", "2004-05-01", "--out", tmp_path / "f.ppm") == 2


def test_coarsen_refine_idempotent(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"synth": SYNTH})
    assert run("synth", "--config", cfg, "--out", tmp_path / "d") == 0
    hr = tmp_path / "d" / "hr.grd"
    for i in range(2):
        assert run("coarsen", "--in", hr, "--factor", 4, "--out", tmp_path / f"c{i}.grd") == 0
        assert run("refine", "--in", tmp_path / f"c{i}.grd", "--factor", 4, "--out", tmp_path / f"r{i}.grd") == 0
    assert (tmp_path / "c0.grd").read_bytes() == (tmp_path / "c1.grd").read_bytes()
    assert (tmp_path / "r0.grd").read_bytes() == (tmp_path / "r1.grd").read_bytes()
    assert read_grid(tmp_path / "c0.grd").shape == (read_grid(hr).shape[0], 4, 4)
    # the synth projection is the cubic-spline coarsening of the HR grid (before float32 storage)
    np.testing.assert_allclose(
        read_grid(tmp_path / "c0.grd").values, read_grid(tmp_path / "d" / "projection.grd").values, atol=1e-5
    )


def test_evaluate_truth_grid_is_zero(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"synth": SYNTH})
    run("synth", "--config", cfg, "--out", tmp_path / "d")
    d = tmp_path / "d"
    assert run("evaluate", "--grids", d / "hr.grd", "--stations", d / "stations.csv", "--obs",
               d / "observations.csv", "--years", "2002-2003", "--out", tmp_path / "r.csv") == 0
    rows = read_report_csv(tmp_path / "r.csv")
    assert len(rows) == 5
    # the grid is stored as float32, observations as float64 text
    assert all(float(r["rmse"]) < 1e-5 for r in rows)


def test_indicators(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"synth": SYNTH})
    run("synth", "--config", cfg, "--out", tmp_path / "d")
    d = tmp_path / "d"
    assert run("indicators", "--in", d / "observations.csv", "--stations", d / "stations.csv",
               "--out", tmp_path / "obs.csv") == 0
    assert run("indicators", "--in", d / "hr.grd", "--stations", d / "stations.csv",
               "--indicators", "annual_tg,gdd", "--out", tmp_path / "grid.csv") == 0
    obs = (tmp_path / "obs.csv").read_text().splitlines()
    grid = (tmp_path / "grid.csv").read_text().splitlines()
    assert obs[0] == grid[0] == "series_id,indicator,year,month,value,unit,valid"
    assert len(obs) - 1 == 6 * 4 * (1 + 12 + 3)
    assert len(grid) - 1 == 6 * 4 * 2
    assert run("indicators", "--in", d / "projection.grd", "--indicators", "hdd", "--out", tmp_path / "p.csv") == 0
    assert len((tmp_path / "p.csv").read_text().splitlines()) - 1 == 16 * 4
    assert run("indicators", "--in", d / "hr.grd", "--indicators", "tx90p", "--out", tmp_path / "x.csv") == 1


def test_full_pipeline_script(tmp_path):
    """synth -> coarsen -> train x2 -> downscale -> evaluate, through the installed entry point."""

    def sh(*args):
        proc = subprocess.run([sys.executable, "-m", "downscale_lab", *map(str, args)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        return proc

    d = tmp_path
    training = {"epochs": 2, "batch_size": 32}
    write_json(d / "synth.json", {"synth": SYNTH})
    write_json(d / "edsr.json", {"seed": 1, "model": EDSR, "training": {**training, "loss": "l1"}, "split": SPLIT})
    write_json(d / "fno.json", {"seed": 2, "model": FNO, "training": {**training, "loss": "mse", "lr": 1e-3},
                                "split": SPLIT})
    sh("synth", "--config", d / "synth.json", "--out", d / "data")
    hr = d / "data" / "hr.grd"
    sh("coarsen", "--in", hr, "--factor", 4, "--kernel", "cubic_spline", "--out", d / "coarse.grd")
    grids = {"coarse": d / "coarse.grd"}
    for kernel in ("bilinear", "bicubic", "cubic_spline"):
        grids[kernel] = d / f"{kernel}.grd"
        sh("refine", "--in", d / "coarse.grd", "--factor", 4, "--kernel", kernel, "--out", grids[kernel])
    for model in ("edsr", "fno"):
        sh("train", "--config", d / f"{model}.json", "--pairs-from", hr, "--out", d / model, "--quiet")
        assert {p.name for p in (d / model).iterdir()} == {"config.json", "metrics.csv", "best.prm"}
        grids[model] = d / f"{model}.grd"
        sh("downscale", "--model", d / model / "best.prm", "--in", d / "coarse.grd", "--out", grids[model])
        assert read_grid(grids[model]).shape == read_grid(hr).shape
    grids["hr"] = hr
    sh("evaluate", "--grids", ",".join(map(str, grids.values())), "--names", ",".join(grids),
       "--stations", d / "data" / "stations.csv", "--obs", d / "data" / "observations.csv",
       "--years", "2004-2004", "--out", d / "report.csv")
    rows = read_report_csv(d / "report.csv")
    assert len(rows) == 7 * 5
    assert [r["method"] for r in rows[::5]] == list(grids)
    sh("plot", "--in", grids["edsr"], "--date", "2004-05-01", "--out", d / "fig.ppm")
    rgb, _ = read_ppm(d / "fig.ppm")
    assert rgb.shape == (16, 16, 3)
