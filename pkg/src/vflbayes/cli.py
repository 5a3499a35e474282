"""Command-line entry point: generate, fit, evaluate, cv, oracle, export-density."""
from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources

import numpy as np

from .data import DataError, GeneratorSpec, generate, load_dataset, save_dataset
from .experiments import (
    ExperimentConfig,
    MetricsReport,
    cross_validate,
    evaluate,
    export_density,
    grid_posterior,
    linear_oracle,
    load_data,
    load_run,
    run_single,
)
from .federation import ConfigError
from .mathcore import NumericalError
from .models import ModelError, ModelSpec

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _config_path(name: str) -> str:
    """Accept a file path or the name of a shipped config."""
    if os.path.exists(name):
        return name
    shipped = resources.files("vflbayes") / "configs" / (name if name.endswith(".json") else name + ".json")
    if shipped.is_file():
        return str(shipped)
    raise ConfigError(f"no config file or shipped config named {name!r}")


def cmd_generate(args) -> int:
    spec = GeneratorSpec(family=args.family, n=args.n, p=args.p, J=args.J, seed=args.seed,
                         n_levels=args.levels, intercept=args.intercept)
    data, _ = generate(spec)
    save_dataset(data, args.out, generator=spec.to_dict())
    print(f"wrote {data.n} rows, blocks {data.block_sizes} to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = ExperimentConfig.load(_config_path(args.config))
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    data = load_dataset(args.data) if args.data else None
    for seed in cfg.seeds:
        out = run_single(cfg, seed, data=data, iterations=args.iterations)
        print(f"seed {seed}: {out.meta['iterations']} iterations, "
              f"{out.meta.get('n_messages', 0)} messages -> {out.directory}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, meta = load_run(args.run)
    data = load_dataset(args.data) if args.data else load_data(meta["config"]["data"], meta["seed"])
    acc, ll, ll_inc = evaluate(model, data, args.draws, args.seed)
    rep = MetricsReport()
    rep.add(acc, ll, ll_inc)
    result = rep.to_dict()
    print(json.dumps(result, indent=1))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=1)
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = ExperimentConfig.load(_config_path(args.config))
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    rep = cross_validate(cfg, seed, folds_to_run=args.folds, iterations=args.iterations)
    result = rep.to_dict()
    print(json.dumps(result["summary"], indent=1))
    out_dir = args.output_dir or os.path.join(cfg.output_dir, cfg.name)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump({"schema_version": 1, "seed": seed, **result}, fh, indent=1)
    return EXIT_OK


def cmd_oracle(args) -> int:
    data = load_dataset(args.data)
    if args.task == "linear":
        result = linear_oracle(data, args.sigma, args.rho, args.prior_scale)
    else:
        spec = ModelSpec(family=args.family, formulation="true", intercept=args.intercept,
                         sigma=args.sigma if args.family == "linear-gaussian" else None)
        result = grid_posterior(data, spec, args.lo, args.hi, args.points)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "oracle.json"), "w", encoding="utf-8") as fh:
        json.dump({"schema_version": 1, "task": args.task, **result}, fh, indent=1)
    print(f"wrote {os.path.join(args.out, 'oracle.json')}")
    return EXIT_OK


def cmd_export(args) -> int:
    model, meta = load_run(args.run)
    data = load_dataset(args.data) if args.data else load_data(meta["config"]["data"], meta["seed"])
    df = export_density(model, data, args.param, args.draws, args.seed, meta.get("truths"))
    df.to_csv(args.out, index=False)
    print(f"wrote {len(df)} draws of {args.param} to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vflbayes", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset directory")
    g.add_argument("--family", required=True, choices=["linear-gaussian", "logistic", "poisson-multilevel"])
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--p", type=int, default=20)
    g.add_argument("--J", type=int, default=2)
    g.add_argument("--levels", type=int, default=5)
    g.add_argument("--intercept", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="run a config")
    f.add_argument("--config", required=True, help="JSON file or shipped config name")
    f.add_argument("--iterations", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--output-dir")
    f.add_argument("--data", help="dataset directory overriding the config's source")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("evaluate", help="predictive metrics of a finished run")
    e.add_argument("--run", required=True)
    e.add_argument("--data")
    e.add_argument("--draws", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("cv", help="k-fold cross-validation of a tabular config")
    c.add_argument("--config", required=True)
    c.add_argument("--folds", type=int, help="run only the first N folds")
    c.add_argument("--iterations", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--output-dir")
    c.set_defaults(func=cmd_cv)

    o = sub.add_parser("oracle", help="exact or quadrature posterior")
    o.add_argument("--task", choices=["linear", "grid"], required=True)
    o.add_argument("--data", required=True)
    o.add_argument("--sigma", type=float, default=1.0)
    o.add_argument("--rho", type=float, nargs="+", default=[0.0])
    o.add_argument("--prior-scale", type=float, default=1.0)
    o.add_argument("--family", default="logistic", choices=["logistic", "linear-gaussian"])
    o.add_argument("--intercept", action="store_true")
    o.add_argument("--lo", type=float, default=-5.0)
    o.add_argument("--hi", type=float, default=5.0)
    o.add_argument("--points", type=int, default=201)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_oracle)

    x = sub.add_parser("export-density", help="draws of one parameter from a fitted factor")
    x.add_argument("--run", required=True)
    x.add_argument("--param", required=True)
    x.add_argument("--draws", type=int, default=10000)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--data")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ModelError, DataError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
