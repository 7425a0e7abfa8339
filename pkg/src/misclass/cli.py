"""Command-line entry point: ``misclass {fit,simulate,oracle,experiment}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, MisclassError
from .experiments import EXPERIMENTS, LONG_ITERATIONS, run_experiment, run_fit
from .io import to_jsonable, load_config, load_csv, write_dataset_csv
from .oracle import enumerate_exact_posterior, exact_vs_is_distance
from .covariate import run_importance_sampling
from .simulate import simulate_covariate_mc, simulate_dichotomized, simulate_response_mc

THREADS_ENV = "MISCLASS_THREADS"
SCENARIOS = ("sim-5.1", "sim-5.2", "sim-5.3", "sim-5.4", "attenuation")


def resolve_threads(value: int | None) -> int:
    if value is not None:
        return max(1, int(value))
    env = os.environ.get(THREADS_ENV, "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from None
    return 1


def _common(p: argparse.ArgumentParser, iterations=True):
    p.add_argument("--seed", type=int, default=None, help="root random seed")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("--out", default=".", help="output directory")
    if iterations:
        p.add_argument("--iterations", type=int, default=None, help="importance-sampling draws M")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="misclass", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit naive and adjusted models from a config and a CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trace", action="store_true", help="write the per-draw trace CSV")
    _common(p)

    p = sub.add_parser("simulate", help="write a simulated dataset with truth columns")
    p.add_argument("--scenario", choices=SCENARIOS, default="sim-5.1")
    p.add_argument("--n", type=int, default=None)
    _common(p, iterations=False)

    p = sub.add_parser("oracle", help="exact posterior by enumeration (small n)")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--max-n", type=int, default=14)
    _common(p)

    p = sub.add_parser("experiment", help="run a named experiment")
    p.add_argument("name", choices=sorted(EXPERIMENTS))
    p.add_argument("--data", default=None, help="input CSV (birthweight)")
    p.add_argument("--case", type=int, default=1, help="birthweight case 1 or 2")
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--long-run", action="store_true",
                   help="use the long iteration counts (100k-200k draws)")
    p.add_argument("--trace", action="store_true", help=argparse.SUPPRESS)
    _common(p)
    return parser


def _cmd_fit(args) -> int:
    cfg = load_config(args.config).with_overrides(args.iterations, args.seed)
    ds = load_csv(args.data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace = out / "trace.csv" if (args.trace or cfg.experiment.emit_trace) else None
    bundle = run_fit(cfg, ds, threads=resolve_threads(args.threads), trace=trace)
    paths = bundle.write(out)
    print(f"wrote {paths['json']} and {paths['csv']}" + (f" and {trace}" if trace else ""))
    return 0


def _cmd_simulate(args) -> int:
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.scenario}.csv"
    if args.scenario in ("sim-5.1", "sim-5.3", "attenuation"):
        kw = {"seed": seed}
        if args.scenario == "sim-5.3":
            kw.update(matrix=((1.0, 0.0), (0.0, 1.0)), missing_rate=0.2)
        if args.scenario == "attenuation":
            kw.update(n=10_000, alpha=(0.0, 0.0), matrix=((0.9, 0.1), (0.1, 0.9)))
        if args.n is not None:
            kw["n"] = args.n
        ds = simulate_covariate_mc(**kw)
        write_dataset_csv(path, {"y": ds.y, "w": ds.observed_w(), "z": ds.column("z"),
                                 "x_true": ds.truth["x"]})
    elif args.scenario == "sim-5.2":
        s = simulate_dichotomized(n=args.n or 200, seed=seed)
        write_dataset_csv(path, {"y": s.y, "w_d": s.w_d, "w_c": s.w_c, "x_c": s.x_c, "x_d": s.x_d})
    else:
        ds = simulate_response_mc(n=args.n or 1000, seed=seed)
        write_dataset_csv(path, {"s": ds.y.astype(int)})
    print(f"wrote {path}")
    return 0


def _cmd_oracle(args) -> int:
    cfg = load_config(args.config).with_overrides(args.iterations, args.seed)
    ds = load_csv(args.data, cfg)
    res = enumerate_exact_posterior(ds, cfg.glm_spec, cfg.mc_model, cfg.exposure, max_n=args.max_n,
                                    quantile_levels=cfg.experiment.quantile_levels)
    report = {"schema_version": "1.0", "n": ds.n, "configurations": int(res.configs.shape[0]),
              "log_normalizer": res.log_normalizer, "exact": {}}
    for j, name in enumerate(res.coef_names):
        row = {"mean": res.means[j]}
        for k, a in enumerate(res.quantile_levels):
            row[f"q{a:g}"] = res.weighted_quantiles[k, j]
            row[f"mixture_q{a:g}"] = res.mixture_quantile(j, a)
        report["exact"][name] = row
    if cfg.iterations:
        if cfg.seed is None:
            raise ConfigError("a seed is required to compare against importance sampling")
        post = run_importance_sampling(ds, cfg.glm_spec, cfg.mc_model, cfg.exposure,
                                       iterations=cfg.iterations, seed=cfg.seed,
                                       quantile_levels=res.quantile_levels,
                                       threads=resolve_threads(args.threads))
        report["importance_sampling"] = {"iterations": cfg.iterations, "seed": cfg.seed,
                                         "ess": post.ess, "summary": post.summary()}
        report["distance"] = exact_vs_is_distance(res, post)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "oracle.json"
    path.write_text(json.dumps(to_jsonable(report), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {path}")
    return 0


def _cmd_experiment(args) -> int:
    kw = {"seed": 0 if args.seed is None else args.seed, "threads": resolve_threads(args.threads)}
    if args.long_run and args.name in LONG_ITERATIONS:
        kw["iterations"] = LONG_ITERATIONS[args.name]
    if args.iterations is not None:
        kw["iterations"] = args.iterations
    if args.replicates is not None:
        kw["replicates"] = args.replicates
    if args.name == "birthweight":
        kw.update(data=args.data, case=args.case)
    bundle = run_experiment(args.name, **kw)
    paths = bundle.write(args.out)
    print(f"wrote {paths['json']} and {paths['csv']}")
    for row in bundle.rows:
        extra = f"  ess={row['ess']:.1f}" if "ess" in row else ""
        print(f"  [{row['replicate']}] {row['model_variant']:<26} {row['coefficient']:<10} "
              f"{row['mean']: .4f}  ({row['lo95']: .4f}, {row['hi95']: .4f}){extra}")
    return 0


COMMANDS = {"fit": _cmd_fit, "simulate": _cmd_simulate, "oracle": _cmd_oracle,
            "experiment": _cmd_experiment}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with np.errstate(all="ignore"):
            return COMMANDS[args.command](args)
    except (MisclassError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
