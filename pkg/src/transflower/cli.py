"""Command-line interface: synth | split | train | eval | baseline | explain.

Settings resolve as defaults <- ``--config`` file <- command-line flags.  The
resolved settings are echoed to ``run_config.txt`` in the output directory;
passing that file back through ``--config`` replays the run.

Exit codes: 0 success, 2 usage or validation error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from . import analysis, baselines, geodata, metrics
from .geodata import DataError, SynthConfig
from .model import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .nnkernel import NumericHealthError
from .train import TrainConfig, featurizer_for, predict_volumes, stats_of, train

log = logging.getLogger("transflower")

EXIT_USAGE = 2
EXIT_NUMERIC = 3

VARIANTS = {
    "full": ("rle", "transformer"),
    "rle-prime": ("rle_prime", "transformer"),
    "no-rle": ("none", "transformer"),
    "deepgravity": ("none", "feedforward_only"),
    "deepgravity-rle": ("rle", "feedforward_only"),
}


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes", "on"):
        return True
    if str(v).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ratios(v) -> tuple:
    parts = tuple(float(x) for x in str(v).replace(" ", "").split(","))
    if len(parts) != 3:
        raise ValueError("ratios need three comma-separated numbers")
    return parts


# name -> (type, default, help)
GLOBAL = {
    "seed": (int, 1234, "master random seed"),
    "out": (str, ".", "output directory"),
    "crs": (str, "planar", "coordinate mode of x,y: planar meters or geodesic lon/lat degrees"),
    "threads": (int, 1, "BLAS threads"),
}
DATA = {
    "data": (str, None, "directory holding regions.csv and flows.csv"),
    "split": (str, None, "split manifest (default: <data>/split.csv or a fresh split)"),
    "ratios": (_ratios, (0.7, 0.1, 0.2), "train,val,test origin shares"),
}
SYNTH = {
    "n_regions": (int, 100, "number of regions"),
    "extent": (float, 20_000.0, "side of the square study area in meters"),
    "jitter": (float, 0.5, "centroid jitter as a fraction of grid spacing"),
    "epsilon": (float, 0.0, "anisotropy strength in [0, 1)"),
    "theta0": (float, 0.0, "anisotropy axis (radians)"),
    "beta0": (float, 1.0, "attractiveness exponent"),
    "gamma0": (float, 3.0, "base distance decay"),
    "mean_outflow": (float, 50.0, "mean commuters per origin"),
    "poi_rate": (float, 3.0, "mean POI count per attribute at unit activity"),
}
MODEL = {
    "variant": (str, "full", "full | rle-prime | no-rle | deepgravity | deepgravity-rle"),
    "d_geo": (int, 256, "geo feature embedding width"),
    "d_loc": (int, 64, "location embedding width"),
    "n_layers": (int, 2, "transformer layers"),
    "n_heads": (int, 8, "attention heads"),
    "ffn_hidden": (int, 256, "transformer feed-forward width"),
    "dropout": (float, 0.1, "dropout rate"),
    "max_destinations": (int, 256, "candidate destinations per origin"),
    "lambda_min": (float, 1.0, "finest encoder wavelength (m)"),
    "lambda_max": (float, 0.0, "coarsest wavelength (m); 0 = study-area diameter"),
    "n_scales": (int, 16, "number of encoder scales"),
    "scaled_attention": (_bool, False, "divide attention scores by sqrt(d_head)"),
}
OPTIM = {
    "lr": (float, 1e-4, "learning rate"),
    "momentum": (float, 0.9, "RMSprop momentum"),
    "batch_origins": (int, 512, "origins per batch"),
    "patience": (int, 20, "early-stopping patience (epochs)"),
    "max_epochs": (int, 200, "epoch cap"),
}
EVAL = {
    "checkpoint": (str, None, "model checkpoint"),
    "on": (str, "test", "split to score: train | val | test"),
    "name": (str, None, "model name written to reports.csv"),
}
EXPLAIN = {
    "origin": (str, None, "origin region id (attention)"),
    "compare": (str, None, "two checkpoints, comma separated (residuals)"),
    "cell_size": (float, 20.0, "residual grid cell size (m)"),
    "grid_n": (int, 100, "cluster grid resolution"),
    "k": (int, 10, "number of clusters"),
    "top_k": (int, 10, "influencers to list"),
    "per_head": (_bool, False, "also export per-layer, per-head attention"),
    "svg": (_bool, True, "write SVG heatmaps"),
}

COMMANDS = {
    "synth": [GLOBAL, SYNTH],
    "split": [GLOBAL, DATA],
    "train": [GLOBAL, DATA, MODEL, OPTIM],
    "eval": [GLOBAL, DATA, EVAL],
    "baseline": [GLOBAL, DATA, EVAL],
    "explain": [GLOBAL, DATA, EVAL, EXPLAIN],
}


class UsageError(Exception):
    pass


def _options(cmd: str) -> dict:
    out = {}
    for table in COMMANDS[cmd]:
        out.update(table)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transflower", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=argparse.SUPPRESS, help="key = value settings file")
        if cmd == "baseline":
            p.add_argument("model", choices=("gravity", "radiation"))
        if cmd == "explain":
            p.add_argument("analysis", choices=("attention", "clusters", "residuals"))
        for name, (_, default, help_) in _options(cmd).items():
            flag = "--" + name.replace("_", "-")
            if name == "compare":
                p.add_argument(flag, nargs=2, default=argparse.SUPPRESS, metavar=("A", "B"), help=help_)
            else:
                p.add_argument(flag, default=argparse.SUPPRESS, help=f"{help_} (default {default})")
    return parser


def read_config_file(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(cmd: str, ns: argparse.Namespace) -> dict:
    opts = _options(cmd)
    cfg = {k: d for k, (_, d, _) in opts.items()}
    given = vars(ns).copy()
    if "config" in given:
        try:
            file_cfg = read_config_file(given.pop("config"))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        for k, v in file_cfg.items():
            if k in opts:
                cfg[k] = v
    for k, v in given.items():
        if k in opts:
            cfg[k] = ",".join(v) if k == "compare" and isinstance(v, list) else v
    resolved = {}
    for k, v in cfg.items():
        typ = opts[k][0]
        try:
            resolved[k] = v if v is None or (typ is _ratios and isinstance(v, tuple)) else typ(v)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {k}: {v!r} ({exc})") from None
    if resolved["crs"] not in geodata.CRS_MODES:
        raise UsageError(f"--crs must be one of {geodata.CRS_MODES}")
    return resolved


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    return "" if v is None else str(v)


def write_run_config(out: Path, cmd: str, cfg: dict, extra: dict | None = None) -> None:
    lines = [f"# transflower {cmd}"]
    lines += [f"{k} = {_fmt(v)}" for k, v in sorted(cfg.items())]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"# {k} = {v}")
    (out / "run_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# helpers


def _dataset(cfg) -> geodata.Dataset:
    if not cfg.get("data"):
        raise UsageError("--data is required")
    d = Path(cfg["data"])
    for f in ("regions.csv", "flows.csv"):
        if not (d / f).exists():
            raise UsageError(f"missing {d / f}")
    return geodata.load_dataset(d / "regions.csv", d / "flows.csv", cfg["crs"])


def _split(cfg, ds) -> geodata.SplitAssignment:
    if cfg.get("split"):
        path = Path(cfg["split"])
        if not path.exists():
            raise UsageError(f"missing split manifest {path}")
        return geodata.load_split(path)
    default = Path(cfg["data"]) / "split.csv"
    if default.exists():
        return geodata.load_split(default)
    return geodata.split_by_origin(ds, cfg["ratios"], cfg["seed"])


def _origin_idx(ds, split, which: str) -> list[int]:
    if which not in ("train", "val", "test"):
        raise UsageError("--on must be train, val or test")
    return sorted(ds.regions.idx(r) for r in split.of(which))


def _checkpoint(path):
    if not path:
        raise UsageError("--checkpoint is required")
    if not Path(path).exists():
        raise UsageError(f"missing checkpoint {path}")
    return load_checkpoint(path)


def _write_predictions(path: Path, ds, predicted: dict) -> None:
    ids = ds.regions.ids
    real = {}
    for o, d, v in zip(ds.flows.origin, ds.flows.dest, ds.flows.volume):
        real[(int(o), int(d))] = float(v)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("origin_id,dest_id,volume_pred,volume_real\n")
        for (o, d) in sorted(predicted):
            fh.write(f"{ids[o]},{ids[d]},{predicted[(o, d)]!r},{real.get((o, d), 0.0)!r}\n")


def _real_map(ds, origins) -> dict:
    keep = set(origins)
    return {(int(o), int(d)): float(v) for o, d, v in zip(ds.flows.origin, ds.flows.dest, ds.flows.volume)
            if int(o) in keep}


def _report(out: Path, predicted, ds, origins, model_name, cfg, split_name) -> metrics.EvalReport:
    rep = metrics.evaluate(predicted, _real_map(ds, origins))
    metrics.append_report(out / "reports.csv", rep, model_name, Path(cfg["data"]).name, split_name)
    return rep


def _model_predictions(params, mcfg, ds, origins) -> dict:
    check = ds.regions.features.shape[1]
    if params["stats.mean"].shape != (check,):
        raise UsageError("checkpoint normalization does not match the dataset schema")
    return predict_volumes(params, mcfg, ds, origins)


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg, out: Path):
    scfg = SynthConfig(n_regions=cfg["n_regions"], extent_m=cfg["extent"], jitter=cfg["jitter"],
                       epsilon=cfg["epsilon"], theta0=cfg["theta0"], beta0=cfg["beta0"],
                       gamma0=cfg["gamma0"], mean_outflow=cfg["mean_outflow"], poi_rate=cfg["poi_rate"])
    try:
        ds = geodata.synth_city(scfg, cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    geodata.write_regions(out / "regions.csv", ds.regions)
    geodata.write_flows(out / "flows.csv", ds.flows, ds.regions)
    geodata.write_ground_truth(out / "ground_truth.txt", scfg, cfg["seed"])
    write_run_config(out, "synth", cfg)


def cmd_split(cfg, out: Path):
    ds = _dataset(cfg)
    try:
        split = geodata.split_by_origin(ds, cfg["ratios"], cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    geodata.write_split(out / "split.csv", split, ds.regions)
    write_run_config(out, "split", cfg)


def cmd_train(cfg, out: Path):
    ds = _dataset(cfg)
    split = _split(cfg, ds)
    if cfg["variant"] not in VARIANTS:
        raise UsageError(f"--variant must be one of {sorted(VARIANTS)}")
    rle_variant, predictor = VARIANTS[cfg["variant"]]
    try:
        mcfg = ModelConfig(
            d_geo=cfg["d_geo"], d_loc=cfg["d_loc"], n_layers=cfg["n_layers"], n_heads=cfg["n_heads"],
            ffn_hidden=cfg["ffn_hidden"], dropout=cfg["dropout"], rle_variant=rle_variant,
            predictor_variant=predictor, max_destinations=cfg["max_destinations"],
            scaled_attention=cfg["scaled_attention"], lambda_min=cfg["lambda_min"],
            lambda_max=cfg["lambda_max"] or ds.lambda_max, n_scales=cfg["n_scales"], seed=cfg["seed"])
        mcfg.encoder()
        tcfg = TrainConfig(learning_rate=cfg["lr"], momentum=cfg["momentum"],
                           batch_origins=cfg["batch_origins"], patience=cfg["patience"],
                           max_epochs=cfg["max_epochs"], seed=cfg["seed"])
        tcfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    params, history = train(ds, split, mcfg, tcfg)
    save_checkpoint(params, mcfg, out / "checkpoint.tflw")
    history.write_csv(out / "training_log.csv")
    geodata.write_split(out / "split.csv", split, ds.regions)
    write_run_config(out, "train", cfg, {"best_epoch": history.best_epoch, "epochs": history.epochs})


def cmd_eval(cfg, out: Path):
    params, mcfg = _checkpoint(cfg["checkpoint"])
    ds = _dataset(cfg)
    split = _split(cfg, ds)
    origins = _origin_idx(ds, split, cfg["on"])
    predicted = _model_predictions(params, mcfg, ds, origins)
    _write_predictions(out / "predictions.csv", ds, predicted)
    name = cfg["name"] or Path(cfg["checkpoint"]).parent.name or "model"
    rep = _report(out, predicted, ds, origins, name, cfg, cfg["on"])
    write_run_config(out, "eval", cfg)
    log.info("%s on %s: CPC %.4f MAE %.4f RMSE %.4f (%d pairs)", name, cfg["on"], rep.cpc, rep.mae, rep.rmse,
             rep.n_pairs)


def cmd_baseline(cfg, out: Path, model: str):
    ds = _dataset(cfg)
    split = _split(cfg, ds)
    origins = _origin_idx(ds, split, cfg["on"])
    extra = {}
    if model == "gravity":
        gp = baselines.fit_gravity(ds, _origin_idx(ds, split, "train"))
        predicted = baselines.gravity_predict(ds, gp, origins)
        extra = {"gravity_beta": gp.beta, "gravity_gamma": gp.gamma, "gravity_warning": int(gp.warning)}
    else:
        predicted = baselines.radiation_predict(ds, origins)
        extra = {"fitted_parameters": 0}
    _write_predictions(out / "predictions.csv", ds, predicted)
    rep = _report(out, predicted, ds, origins, cfg["name"] or model, cfg, cfg["on"])
    write_run_config(out, f"baseline {model}", cfg, extra)
    log.info("%s on %s: CPC %.4f", model, cfg["on"], rep.cpc)


def cmd_explain(cfg, out: Path, which: str):
    ds = _dataset(cfg)
    if which == "attention":
        params, mcfg = _checkpoint(cfg["checkpoint"])
        if not cfg["origin"]:
            raise UsageError("explain attention needs --origin")
        if cfg["origin"] not in ds.regions:
            raise UsageError(f"unknown origin id {cfg['origin']!r}")
        o = ds.regions.idx(cfg["origin"])
        if len(ds.flows.of_origin(o)[0]) == 0:
            raise UsageError(f"origin {cfg['origin']!r} has no flows")
        from .features import build_origin_batch
        batch = build_origin_batch(o, ds.flows, ds.regions.ids, mcfg.max_destinations, cfg["seed"], 0)
        feat = featurizer_for(ds, mcfg, stats_of(params))
        try:
            amap = analysis.attention_map(batch, params, mcfg, feat, cfg["top_k"])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        analysis.write_attention_csv(amap, out / "attention.csv")
        analysis.write_influencers_csv(amap, out / "influencers.csv")
        if cfg["per_head"]:
            analysis.write_attention_layers_csv(amap, out / "attention_layers.csv")
        if cfg["svg"]:
            n = len(amap.dest_ids)
            vals = {(j, n - 1 - i): float(amap.matrix[i, j]) for i in range(n) for j in range(n)}
            analysis.write_grid_svg(vals, n, out / "attention.svg", f"attention, origin {amap.origin_id}")
    elif which == "clusters":
        params, mcfg = _checkpoint(cfg["checkpoint"])
        if mcfg.rle_variant == "none":
            raise UsageError("checkpoint has no relative-location encoder")
        grid = analysis.cluster_embeddings(params, mcfg, mcfg.lambda_max, cfg["grid_n"], cfg["k"])
        analysis.write_cluster_csv(grid, out / "clusters.csv")
        if cfg["svg"]:
            n = grid.grid_n
            vals = {(ix, iy): int(grid.labels[ix * n + iy]) for ix in range(n) for iy in range(n)}
            analysis.write_grid_svg(vals, n, out / "clusters.svg", "location embedding clusters", categorical=True)
    else:
        if not cfg["compare"]:
            raise UsageError("explain residuals needs --compare A B")
        paths = cfg["compare"].split(",")
        if len(paths) != 2:
            raise UsageError("--compare takes two checkpoints")
        grids = []
        lam = None
        for k, p in enumerate(paths):
            params, mcfg = _checkpoint(p)
            lam = lam or mcfg.lambda_max
            origins = sorted(int(o) for o in ds.flows.origins_with_flows())
            predicted = _model_predictions(params, mcfg, ds, origins)
            rl, res = analysis.flow_residuals(ds, predicted)
            grid = analysis.residual_grid(rl, res, lam, cfg["cell_size"])
            grids.append(grid)
            analysis.write_residual_csv(grid, out / f"residuals_{'ab'[k]}.csv")
        diff = analysis.residual_diff_grid(grids[0], grids[1])
        analysis.write_residual_csv(diff, out / "residuals_diff.csv")
        if cfg["svg"]:
            vals = {k: v[0] for k, v in diff.cells.items()}
            analysis.write_grid_svg(vals, diff.n_cells, out / "residuals_diff.svg", "residual difference A - B")
    write_run_config(out, f"explain {which}", cfg)


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    ns = parser.parse_args(argv)
    cmd = ns.command
    positional = {k: getattr(ns, k) for k in ("model", "analysis") if hasattr(ns, k)}
    for k in ("command", "model", "analysis"):
        if hasattr(ns, k):
            delattr(ns, k)
    try:
        cfg = resolve(cmd, ns)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        with _thread_limit(cfg["threads"]):
            if cmd == "synth":
                cmd_synth(cfg, out)
            elif cmd == "split":
                cmd_split(cfg, out)
            elif cmd == "train":
                cmd_train(cfg, out)
            elif cmd == "eval":
                cmd_eval(cfg, out)
            elif cmd == "baseline":
                cmd_baseline(cfg, out, positional["model"])
            else:
                cmd_explain(cfg, out, positional["analysis"])
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"transflower {cmd}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"transflower {cmd}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericHealthError as exc:
        print(f"transflower {cmd}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
