"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numeric divergence during training. Messages go to standard error.
``DOWNSCALE_LAB_THREADS`` caps BLAS threads (0 or unset = library default).
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ConfigError, DataError, DivergedAtStep, DownscaleError
from .evaluation import evaluate_method, write_report_csv
from .experiment import downscale_series
from .grid import read_grid, read_observations, read_stations, write_grid, write_observations, write_stations
from .indicators import INDICATOR_NAMES, DailySeries, compute, write_indicator_csv
from .models import config_from_dict, load_params
from .plot import write_ppm
from .resample import KernelKind, coarsen_series, refine_series
from .synth import SynthConfig, synth_all
from .training import (
    SplitSpec,
    Standardizer,
    TrainConfig,
    build_pairs,
    fit_standardizer,
    train,
    write_run,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

_YEAR_RANGE = {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2}

_SYNTH_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        f.name: {"type": "boolean"} if f.type in ("bool", bool) else
        {"type": "integer"} if f.type in ("int", int) else {"type": "number"}
        for f in dataclasses.fields(SynthConfig)
    },
}

_MODEL_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"const": "edsr"},
                "width": {"type": "integer", "minimum": 1},
                "depth": {"type": "integer", "minimum": 1},
                "scale": {"type": "integer", "minimum": 1},
                "stages": {"type": "array", "items": {"type": "integer", "minimum": 2}},
                "residual_scaling": {"type": "number"},
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"const": "fno"},
                "layers": {"type": "integer", "minimum": 1},
                "hidden": {"type": "integer", "minimum": 1},
                "modes1": {"type": "integer", "minimum": 1},
                "modes2": {"type": "integer", "minimum": 1},
                "projection": {"type": "integer", "minimum": 1},
                "scale": {"type": "integer", "minimum": 1},
                "activation": {"enum": ["gelu", "relu", "linear"]},
                "global_skip": {"type": "boolean"},
            },
        },
    ]
}

_TRAINING_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "loss": {"enum": ["l1", "mse"]},
        "optimizer": {"enum": ["adam", "adamw"]},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "beta1": {"type": "number"},
        "beta2": {"type": "number"},
        "eps": {"type": "number"},
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr_min": {"type": "number", "minimum": 0},
        "patch": {"type": ["integer", "null"], "minimum": 1},
    },
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "synth": _SYNTH_SCHEMA,
        "factor": {"type": "integer", "minimum": 1},
        "kernel": {"enum": [k.value for k in KernelKind]},
        "model": _MODEL_SCHEMA,
        "training": _TRAINING_SCHEMA,
        "split": {
            "type": "object",
            "additionalProperties": False,
            "required": ["train", "val"],
            "properties": {"train": _YEAR_RANGE, "val": _YEAR_RANGE, "test": _YEAR_RANGE},
        },
    },
}


def load_run_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {where}: {exc.message}") from None
    return doc


def _require(doc, key, command):
    if key not in doc:
        raise ConfigError(f"{command} needs a {key!r} section in the config")
    return doc[key]


def _train_config(doc) -> TrainConfig:
    model = config_from_dict(_require(doc, "model", "train"))
    return TrainConfig(model, seed=doc.get("seed", 0), **doc.get("training", {}))


def _split(doc) -> SplitSpec:
    s = _require(doc, "split", "train")
    return SplitSpec(tuple(s["train"]), tuple(s["val"]), tuple(s.get("test", ())))


def _years(text):
    try:
        if "-" in text:
            a, b = text.split("-", 1)
            return list(range(int(a), int(b) + 1))
        return [int(y) for y in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad year range {text!r}; use YYYY-YYYY or YYYY,YYYY") from None


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    doc = load_run_config(args.config)
    cfg = SynthConfig(**_require(doc, "synth", "synth"))
    hr, projection, stations = synth_all(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_grid(hr, out / "hr.grd")
    write_grid(projection, out / "projection.grd")
    write_stations(stations, out / "stations.csv")
    write_observations(stations, out / "observations.csv")


def cmd_coarsen(args):
    series = read_grid(args.input)
    write_grid(coarsen_series(series, args.factor, KernelKind.parse(args.kernel)), args.out)


def cmd_refine(args):
    series = read_grid(args.input)
    write_grid(refine_series(series, args.factor, KernelKind.parse(args.kernel)), args.out)


def cmd_train(args):
    doc = load_run_config(args.config)
    cfg = _train_config(doc)
    split = _split(doc)
    hr = read_grid(args.pairs_from)
    factor = doc.get("factor", cfg.model.scale)
    pairs = build_pairs(hr, factor, KernelKind.parse(doc.get("kernel", "cubic_spline")))
    standardizer = fit_standardizer(hr, split)

    def progress(epoch, loss, val):
        if not args.quiet:
            print(f"epoch {epoch + 1}/{cfg.epochs} train_loss={loss:.6f} val_rmse={val:.6f}", file=sys.stderr)

    params, report = train(cfg, pairs, split, standardizer, progress=progress)
    snapshot = {
        "config": doc,
        "train": cfg.to_dict(),
        "split": split.to_dict(),
        "standardizer": {"mean": standardizer.mean, "std": standardizer.std},
    }
    write_run(args.out, snapshot, params, report)


def _load_model(model_path, config_path=None):
    model_path = Path(model_path)
    config_path = Path(config_path) if config_path else model_path.parent / "config.json"
    if not config_path.exists():
        raise ConfigError(f"no run config found at {config_path}; pass --config")
    snap = json.loads(config_path.read_text())
    try:
        model = config_from_dict(snap["train"]["model"])
        st = Standardizer(float(snap["standardizer"]["mean"]), float(snap["standardizer"]["std"]))
    except (KeyError, TypeError):
        raise ConfigError(f"{config_path} is not a run config written by 'train'") from None
    return model, load_params(model_path, model), st


def cmd_downscale(args):
    model, params, st = _load_model(args.model, args.config)
    coarse = read_grid(args.input)
    write_grid(downscale_series(model, params, st, coarse), args.out)


def cmd_indicators(args):
    names = args.indicators.split(",") if args.indicators else list(INDICATOR_NAMES)
    rows = []
    if args.input.endswith(".csv"):
        if not args.stations:
            raise ConfigError("observation CSV input needs --stations")
        stations = read_stations(args.stations)
        read_observations(args.input, stations)
        for s in stations:
            if not s.observations:
                continue
            start, end = min(s.observations), max(s.observations)
            values = np.full((end - start).days + 1, np.nan)
            for d, v in s.observations.items():
                values[(d - start).days] = v
            series = DailySeries(start, values)
            rows += [(s.id, n, iv) for n in names for iv in compute(n, series)]
    else:
        grid = read_grid(args.input)
        if args.stations:
            for s in read_stations(args.stations):
                r, c = grid.pixel_of(s.x, s.y)
                series = DailySeries(grid.start_date, np.array(grid.values[:, r, c]))
                rows += [(s.id, n, iv) for n in names for iv in compute(n, series)]
        else:
            _, h, w = grid.shape
            for r in range(h):
                for c in range(w):
                    series = DailySeries(grid.start_date, np.array(grid.values[:, r, c]))
                    rows += [(f"r{r}c{c}", n, iv) for n in names for iv in compute(n, series)]
    write_indicator_csv(rows, args.out)


def cmd_evaluate(args):
    stations = read_stations(args.stations)
    read_observations(args.obs, stations)
    paths = [p for p in args.grids.split(",") if p]
    names = args.names.split(",") if args.names else [Path(p).stem for p in paths]
    if len(names) != len(paths):
        raise ConfigError("--names must give one label per grid")
    years = _years(args.years)
    indicators = args.indicators.split(",") if args.indicators else list(INDICATOR_NAMES)
    reports = [
        evaluate_method(read_grid(p), stations, indicators, years, method=n) for p, n in zip(paths, names)
    ]
    write_report_csv(reports, args.out, args.per_station)


def cmd_plot(args):
    grid = read_grid(args.input)
    day = dt.date.fromisoformat(args.date)
    vmin, vmax = write_ppm(grid.values[grid.date_to_index(day)], args.out)
    print(f"{args.out}: min={vmin:.3f} max={vmax:.3f}", file=sys.stderr)


# ----------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="downscale-lab", description="Deep-learning downscaling of daily temperature grids.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic HR grid, projection and stations")
    s.add_argument("--config", required=True, help="run config JSON with a 'synth' section")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    kernels = [k.value for k in KernelKind]
    s = sub.add_parser("coarsen", help="coarsen a grid by an integer factor")
    s.add_argument("--in", dest="input", required=True, help="input GRD1 grid")
    s.add_argument("--factor", type=int, required=True, help="integer coarsening factor")
    s.add_argument("--kernel", default="cubic_spline", choices=kernels, help="resampling kernel")
    s.add_argument("--out", required=True, help="output GRD1 grid")
    s.set_defaults(func=cmd_coarsen)

    s = sub.add_parser("refine", help="interpolate a grid onto a finer grid (baselines)")
    s.add_argument("--in", dest="input", required=True, help="input GRD1 grid")
    s.add_argument("--factor", type=int, required=True, help="integer refinement factor")
    s.add_argument("--kernel", default="bicubic", choices=kernels, help="interpolation kernel")
    s.add_argument("--out", required=True, help="output GRD1 grid")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("train", help="train a model on (coarsened, HR) pairs")
    s.add_argument("--config", required=True, help="run config JSON (model, training, split)")
    s.add_argument("--pairs-from", required=True, help="HR GRD1 grid the pairs are built from")
    s.add_argument("--out", required=True, help="run directory (config.json, metrics.csv, best.prm)")
    s.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("downscale", help="apply a trained model to a coarse grid")
    s.add_argument("--model", required=True, help="PRM1 parameter file (best.prm of a run)")
    s.add_argument("--config", help="run config.json (default: next to --model)")
    s.add_argument("--in", dest="input", required=True, help="coarse GRD1 grid")
    s.add_argument("--out", required=True, help="output GRD1 grid")
    s.set_defaults(func=cmd_downscale)

    s = sub.add_parser("indicators", help="compute climate indicators")
    s.add_argument("--in", dest="input", required=True,
                   help="GRD1 grid, or observations CSV (station_id,date,value_c)")
    s.add_argument("--stations", help="stations CSV; for grids, restrict to station pixels")
    s.add_argument("--indicators", help=f"comma-separated subset of {','.join(INDICATOR_NAMES)}")
    s.add_argument("--out", required=True, help="output indicator CSV")
    s.set_defaults(func=cmd_indicators)

    s = sub.add_parser("evaluate", help="station-anchored indicator RMSE report")
    s.add_argument("--grids", required=True, help="comma-separated GRD1 grids, one per method")
    s.add_argument("--names", help="comma-separated method labels (default: file stems)")
    s.add_argument("--stations", required=True, help="stations CSV (id,x,y)")
    s.add_argument("--obs", required=True, help="observations CSV (station_id,date,value_c)")
    s.add_argument("--years", required=True, help="test years, YYYY-YYYY or comma list")
    s.add_argument("--indicators", help=f"comma-separated subset of {','.join(INDICATOR_NAMES)}")
    s.add_argument("--per-station", help="optional per-station CSV")
    s.add_argument("--out", required=True, help="report CSV")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("plot", help="heatmap of one day as binary PPM")
    s.add_argument("--in", dest="input", required=True, help="GRD1 grid")
    s.add_argument("--date", required=True, help="day to plot, YYYY-MM-DD")
    s.add_argument("--out", required=True, help="output .ppm")
    s.set_defaults(func=cmd_plot)
    return p


def _thread_limit():
    raw = os.environ.get("DOWNSCALE_LAB_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DOWNSCALE_LAB_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("DOWNSCALE_LAB_THREADS must be >= 0")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        threads = _thread_limit()
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                args.func(args)
        else:
            args.func(args)
    except DivergedAtStep as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DownscaleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
