"""Command line entry point: ``hotform {simulate,reduce,estimate,evaluate}``.

Exit status is 0 on success, 1 on invalid input or a failed acceptance
check, and 2 on a numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .container import ContainerError
from .experiment import (
    ConfigError,
    ExperimentConfig,
    Scenario,
    load_artifacts,
    load_plant,
    stage_estimate,
    stage_reduce,
    stage_simulate,
)
from .fom import DegenerateElementError, SensorOffPartError, SingularSystemError

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


def _config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _outdir(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args):
    cfg = _config(args)
    out = _outdir(cfg)
    run, _ = stage_simulate(cfg, Scenario.build(cfg), out)
    print(f"simulated {run.n_t} steps on {run.q.shape[1]} nodes -> {out}")
    return EXIT_OK


def cmd_reduce(args):
    cfg = _config(args)
    out = _outdir(cfg)
    red = stage_reduce(cfg, Scenario.build(cfg), out, rank_check=args.rank_check)
    print(f"basis r = {red.basis.r} (energy {red.basis.energy:.6f}, snapshot rank {red.rank}) -> {out}")
    return EXIT_OK


def _plant_source(value):
    if value == "fom":
        return None
    if value.startswith("external:"):
        return Path(value.split(":", 1)[1])
    raise ConfigError(f"--plant must be 'fom' or 'external:PATH', got {value!r}")


def cmd_estimate(args):
    cfg = _config(args)
    out = _outdir(cfg)
    scen = Scenario.build(cfg)
    if (out / "basis.hfc").exists() and (out / "schedule.hfc").exists():
        basis, schedule = load_artifacts(out)
    else:
        red = stage_reduce(cfg, scen, out, rank_check=False)
        basis, schedule = red.basis, red.schedule
    external = _plant_source(args.plant)
    plant = load_plant(external, scen, cfg) if external else None
    oc = stage_estimate(cfg, scen, basis, schedule, out, plant=plant,
                        with_disturbance=not args.no_disturbance_estimation)
    for tag, res in (("with", oc.with_d), ("without", oc.without_d)):
        if res is not None:
            print(f"peak RMSE {tag} disturbance estimation: {res.rmse.max():.3f} K")
    return EXIT_OK


def cmd_evaluate(args):
    from .evaluation import evaluate, report

    cfg = _config(args)
    out = _outdir(cfg)
    rep = report(evaluate(cfg, out))
    (out / "acceptance.json").write_text(json.dumps(rep, indent=2, default=float) + "\n")
    print(f"{'all criteria passed' if rep['passed'] else 'some criteria failed'} -> {out / 'acceptance.json'}")
    return EXIT_OK if rep["passed"] else EXIT_INVALID


def build_parser():
    parser = argparse.ArgumentParser(prog="hotform", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment YAML file")
    common.add_argument("--seed", type=int, help="override the configured RNG seed")
    common.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run the full-order plant and write sensor CSVs")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reduce", parents=[common], help="snapshot sweep, POD basis and LTV schedule")
    p.add_argument("--no-rank-check", dest="rank_check", action="store_false",
                   help="skip the error curve at the full snapshot rank")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("estimate", parents=[common], help="run the Kalman filter against a plant")
    p.add_argument("--plant", default="fom", help="'fom' or 'external:PATH' to a state container")
    p.add_argument("--no-disturbance-estimation", action="store_true",
                   help="run only the filter without disturbance states")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", parents=[common], help="check every acceptance criterion")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SingularSystemError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ContainerError, SensorOffPartError, DegenerateElementError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
