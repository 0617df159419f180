"""Command-line entry point: ``dgate {toy,path,decay,gradcheck,gen-data}``.

Every command that takes ``--out`` writes CSV outputs plus a ``manifest.json``
holding the fully resolved configuration; passing that manifest back through
``--config`` reproduces the outputs byte for byte. Exit codes: 0 success,
1 tolerance failure, 2 usage or configuration error.
"""

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import (
    METHODS,
    PATH_COLUMNS,
    GroupSparseDgp,
    decay_problem,
    generate_group_sparse,
    lambda_grid,
    run_decay,
    run_path,
    run_toy,
)
from .numerics import ContractError, DivergenceError
from .optim import TrainConfig, write_trace_csv

log = logging.getLogger("dgating")

EXIT_OK, EXIT_TOLERANCE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    if not isinstance(obj, dict):
        raise UsageError("config must be a JSON object")
    # a manifest carries the resolved config under "config"
    if "manifest_version" in obj and "config" in obj:
        obj = obj["config"]
    return obj


def _resolve_seed(args, config, default=0):
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("DGATE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"DGATE_SEED must be an integer, got {env!r}")
    return int(config.get("seed", default))


def _prepare_out(args):
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if (out / "manifest.json").exists() and not args.force:
        raise UsageError(f"{out / 'manifest.json'} exists; pass --force to overwrite")
    return out


def _write_manifest(out, command, config, seeds, files):
    manifest = {
        "manifest_version": 1,
        "command": command,
        "package_version": __version__,
        "config": config,
        "seeds": seeds,
        "files": sorted(files),
    }
    with open(out / "manifest.json", "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _lam_tag(lam):
    return f"{lam:g}"


# ---------------------------------------------------------------- toy

TOY_DEFAULTS = {
    "depths": [2, 3, 4], "lambda": 0.5, "steps": 2000, "lr": 0.01,
    "x1": 1.0, "x2": 0.5, "y": 0.2, "start": [1.0, 0.6],
}


def cmd_toy(args):
    config = dict(TOY_DEFAULTS)
    config.update(_load_config(args.config))
    for key, attr in (("depths", "depths"), ("lambda", "lam"), ("steps", "steps"), ("lr", "lr")):
        if getattr(args, attr) is not None:
            config[key] = getattr(args, attr)
    out = _prepare_out(args)
    if config["steps"] < 1 or any(d < 2 for d in config["depths"]):
        raise UsageError("steps must be >= 1 and depths >= 2")
    rows = []
    for depth in config["depths"]:
        try:
            (run,) = run_toy([depth], config["lambda"], config["steps"], config["lr"],
                             config["x1"], config["x2"], config["y"], tuple(config["start"]))
        except DivergenceError as exc:
            log.warning("toy run diverged for D=%d at step %d", depth, exc.step)
            rows.append([str(exc.step), "diverged", str(depth), "nan", "nan"])
            continue
        for method, traj in (("direct", run.direct), ("gated", run.gated)):
            for step, (w1, w2) in enumerate(traj):
                rows.append([str(step), method, str(depth), repr(float(w1)), repr(float(w2))])
        log.info("D=%d: direct |w|=%.3e, gated |w|=%.3e", depth,
                 np.linalg.norm(run.direct[-1]), np.linalg.norm(run.gated[-1]))
    _write_csv(out / "toy_trajectories.csv", ["step", "method", "depth", "w1", "w2"], rows)
    _write_manifest(out, "toy", config, [], ["toy_trajectories.csv"])
    return EXIT_OK


# ---------------------------------------------------------------- path

PATH_DEFAULTS = {
    "dgp": asdict(GroupSparseDgp()),
    "methods": ["dgating", "fista", "subgrad", "oracle-ls"],
    "depths": [2, 3, 4],
    "grid": {"lo": 1e-5, "hi": 15.0, "num": 30},
    "n_seeds": 10,
    "reduction": "mean",
    "train": TrainConfig().to_json(),
    "fista_iters": 20000,
    "fista_tol": 1e-13,
}


def _grid(grid):
    if isinstance(grid, list):
        return [float(x) for x in grid]
    return [float(x) for x in lambda_grid(grid.get("lo", 1e-5), grid.get("hi", 15.0), grid.get("num", 30))]


def _aggregate(records_by_seed):
    groups = {}
    for records in records_by_seed:
        for r in records:
            groups.setdefault((r.method, r.depth, r.lam), []).append(r)
    rows = []
    for (method, depth, lam), recs in groups.items():
        ok = [r for r in recs if not r.diverged]

        def stats(attr):
            vals = np.array([getattr(r, attr) for r in ok], dtype=float)
            if vals.size == 0:
                return "nan", "nan"
            sd = vals.std(ddof=1) if vals.size > 1 else 0.0
            return repr(float(vals.mean())), repr(float(sd))

        rmse_m, rmse_s = stats("test_rmse")
        act_m, act_s = stats("active_group_count")
        obj_m, obj_s = stats("train_objective")
        mis_m, _ = stats("misalignment")
        rows.append([repr(lam), "" if depth is None else str(depth), method, str(len(recs)),
                     rmse_m, rmse_s, act_m, act_s, obj_m, obj_s, mis_m, str(len(recs) - len(ok))])
    return rows


def cmd_path(args):
    config = json.loads(json.dumps(PATH_DEFAULTS))
    user = _load_config(args.config)
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(config.get(key), dict):
            config[key].update(value)
        else:
            config[key] = value
    if args.methods is not None:
        config["methods"] = args.methods.split(",")
    if args.depths is not None:
        config["depths"] = args.depths
    if args.seeds is not None:
        config["n_seeds"] = args.seeds
    if args.grid is not None:
        config["grid"] = args.grid
    unknown = set(config["methods"]) - set(METHODS)
    if unknown:
        raise UsageError(f"unknown method(s): {', '.join(sorted(unknown))}")
    if "fista" in config["methods"] and 2 not in config["depths"]:
        raise UsageError("fista solves the D=2 group lasso only; include depth 2")
    if any(d < 2 for d in config["depths"]):
        raise UsageError("depths must be >= 2")
    base_seed = _resolve_seed(args, config["dgp"])
    config["dgp"]["seed"] = base_seed
    try:
        train = TrainConfig.from_json(config["train"])
        lambdas = _grid(config["grid"])
        GroupSparseDgp(**config["dgp"])
    except (ContractError, TypeError) as exc:
        raise UsageError(str(exc))
    out = _prepare_out(args)
    seeds = [base_seed ^ k for k in range(int(config["n_seeds"]))]
    depths = [d for d in config["depths"]]

    def job(seed):
        dgp = GroupSparseDgp(**{**config["dgp"], "seed": seed})
        data = generate_group_sparse(dgp)
        log.info("path: seed %d", seed)
        return run_path(data.train, data.test, data.partition, config["methods"], depths, lambdas,
                        train.replace(seed=seed), data.true_support, reduction=config["reduction"],
                        fista_iters=config["fista_iters"], fista_tol=config["fista_tol"])

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(job, seeds))
    files = []
    for seed, records in zip(seeds, results):
        sub = out / f"seed_{seed}"
        sub.mkdir(exist_ok=True)
        _write_csv(sub / "path.csv", PATH_COLUMNS, [r.row() for r in records])
        files.append(f"seed_{seed}/path.csv")
    _write_csv(out / "aggregate.csv",
               ["lambda", "depth", "method", "n_runs", "test_rmse_mean", "test_rmse_sd",
                "active_groups_mean", "active_groups_sd", "train_objective_mean",
                "train_objective_sd", "misalignment_mean", "diverged"],
               _aggregate(results))
    files.append("aggregate.csv")
    _write_manifest(out, "path", config, seeds, files)
    return EXIT_OK


# ---------------------------------------------------------------- decay

DECAY_DEFAULTS = {
    "model": "linear",
    "engine": "flow",
    "depths": [2, 3, 4],
    "lambdas": [0.01, 0.1, 1.0],
    "t_end": 10.0,
    "dt": 0.01,
    "record_every": 10,
    "seed": 0,
    "train": {"iters": 1000, "lr": 0.01, "schedule": "constant", "momentum": 0.0},
    "tolerance": 0.01,
    "conserved_tol": 1e-6,
}


def cmd_decay(args):
    config = json.loads(json.dumps(DECAY_DEFAULTS))
    config.update(_load_config(args.config))
    for key, attr in (("model", "model"), ("engine", "engine"), ("depths", "depths"),
                      ("lambdas", "lambdas"), ("t_end", "t_end"), ("dt", "dt")):
        if getattr(args, attr) is not None:
            config[key] = getattr(args, attr)
    config["seed"] = _resolve_seed(args, config)
    if config["engine"] not in ("flow", "sgd"):
        raise UsageError(f"unknown engine {config['engine']!r}")
    if config["model"] not in ("linear", "mlp"):
        raise UsageError(f"unknown model {config['model']!r}")
    try:
        train = TrainConfig.from_json({**config["train"], "seed": config["seed"]})
    except (ContractError, TypeError) as exc:
        raise UsageError(str(exc))
    out = _prepare_out(args)
    model, data, omega, v = decay_problem(config["model"], seed=config["seed"])
    results = run_decay(model, data, config["depths"], config["lambdas"], config["engine"],
                        omega, v, t_end=config["t_end"], dt=config["dt"], config=train,
                        record_every=config["record_every"])
    rows, files, failed = [], [], False
    for (depth, lam), res in sorted(results.items()):
        name = f"decay_{depth}_{_lam_tag(lam)}.csv"
        write_trace_csv(out / name, res.trace)
        files.append(name)
        theory = res.theory_slope
        if lam > 0:
            rel = abs(res.slope_imbalance - theory) / abs(theory)
            ok = rel < config["tolerance"]
            conserved = False
        else:
            imb = np.array([r.imbalance_max for r in res.trace])
            drift = float(np.max(np.abs(imb - imb[0])))
            rel = abs(res.slope_imbalance)
            conserved = drift < config["conserved_tol"] * max(1.0, abs(imb[0]))
            ok = conserved
        if config["engine"] == "flow" and not ok:
            failed = True
        rows.append([str(depth), repr(lam), config["engine"], repr(res.slope_imbalance), repr(theory),
                     repr(rel), str(int(ok)), repr(res.slope_gap), str(int(conserved))])
    _write_csv(out / "slopes.csv",
               ["depth", "lambda", "engine", "fit_slope", "theory_slope", "rel_err", "within_tol",
                "gap_slope", "conserved"], rows)
    files.append("slopes.csv")
    _write_manifest(out, "decay", config, [config["seed"]], files)
    return EXIT_TOLERANCE if failed else EXIT_OK


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck

    seed = _resolve_seed(args, {})
    results = run_gradcheck(eps=args.eps, seed=seed, points=args.points, inject_fault=args.inject_fault)
    worst = max(results, key=lambda r: r.rel_error)
    for r in results:
        print(f"{r.model:12s} D={r.depth}  max rel err {r.rel_error:.3e}")
    print(f"max relative error: {worst.rel_error:.3e} (tol {args.tol:g})")
    if args.out is not None:
        out = _prepare_out(args)
        _write_csv(out / "gradcheck.csv", ["model", "depth", "rel_error", "coordinate"],
                   [[r.model, str(r.depth), repr(r.rel_error), str(r.coordinate)] for r in results])
        _write_manifest(out, "gradcheck", {"eps": args.eps, "tol": args.tol, "points": args.points},
                        [seed], ["gradcheck.csv"])
    if worst.rel_error >= args.tol:
        print(f"FAIL: model={worst.model} D={worst.depth} coordinate={worst.coordinate}",
              file=sys.stderr)
        return EXIT_TOLERANCE
    return EXIT_OK


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args):
    config = asdict(GroupSparseDgp())
    config.update(_load_config(args.config))
    config["seed"] = _resolve_seed(args, config)
    try:
        dgp = GroupSparseDgp(**config)
    except (ContractError, TypeError) as exc:
        raise UsageError(str(exc))
    out = _prepare_out(args)
    data = generate_group_sparse(dgp)
    data.train.to_csv(out / "train.csv")
    data.test.to_csv(out / "test.csv")
    labels = data.partition.labels
    _write_csv(out / "true_weights.csv", ["index", "group", "weight"],
               [[str(i), str(labels[i]), repr(float(b))] for i, b in enumerate(data.true_weights)])
    with open(out / "partition.json", "w", newline="\n") as fh:
        json.dump(data.partition.to_json(), fh)
        fh.write("\n")
    _write_manifest(out, "gen-data", config, [dgp.seed],
                    ["train.csv", "test.csv", "true_weights.csv", "partition.json"])
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="dgate", description="D-Gating structured sparsity experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file (or a previous manifest.json)")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="seed override (beats DGATE_SEED and config)")
        p.add_argument("--force", action="store_true", help="overwrite an existing manifest")
        p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("toy", help="direct GD vs D-Gating on the two-feature toy objective")
    common(p)
    p.add_argument("--depths", type=_int_list)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("path", help="regularisation paths on the group-sparse regression benchmark")
    common(p)
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--depths", type=_int_list)
    p.add_argument("--seeds", type=int, help="number of simulation repeats")
    p.add_argument("--grid", type=_float_list, help="explicit comma-separated lambda values")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_path)

    p = sub.add_parser("decay", help="imbalance and loss-gap decay study")
    common(p)
    p.add_argument("--model", choices=["linear", "mlp"])
    p.add_argument("--engine", choices=["flow", "sgd"])
    p.add_argument("--depths", type=_int_list)
    p.add_argument("--lambdas", type=_float_list)
    p.add_argument("--t-end", dest="t_end", type=float)
    p.add_argument("--dt", type=float)
    p.set_defaults(func=cmd_decay)

    p = sub.add_parser("gradcheck", help="finite-difference check of the gated gradients")
    common(p, out_required=False)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--points", type=int, default=3)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a group-sparse regression dataset as CSV")
    common(p)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dgate {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
