"""Command-line front end: ``srnbayes {simulate,infer,reproduce,emit-figure-data}``."""

import argparse
import json
import os
import sys

import numpy as np

from . import experiments as E
from .errors import ConfigError, SrnError
from .numerics import RngStream
from .simulate import (
    ObservationSet, observe, read_observations_json, write_observations_csv,
    write_observations_json, write_trajectories_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ALL_FAILED = 3
FIGURE_KINDS = ("diffusion-compare", "trajectory-bands", "violin")


def _common(p):
    p.add_argument("--config", metavar="PATH", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--reps", type=int, help="number of macro-replications")
    p.add_argument("--workers", type=int, default=1, help="worker processes")
    p.add_argument("--out", metavar="DIR", default=".", help="output directory")
    p.add_argument("--sampler", choices=E.SAMPLERS)
    p.add_argument("--H", type=int, help="number of observation intervals")
    p.add_argument("--c", type=float, help="Langevin step-size constant")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="srnbayes", description="Bayesian inference for stochastic reaction networks.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", help="simulate and observe trajectories")
    _common(p)
    p.add_argument("--case", choices=E.CASES, help="use a built-in preset instead of --config")
    p = sub.add_parser("infer", help="run the configured sampler over replications")
    _common(p)
    p.add_argument("--case", choices=E.CASES, help="use a built-in preset instead of --config")
    p.add_argument("--data", metavar="PATH", help="observation JSON to use for every replication")
    p = sub.add_parser("reproduce", help="run a built-in case study")
    p.add_argument("case", choices=E.CASES)
    _common(p)
    p = sub.add_parser("emit-figure-data", help="write plot-ready long-format CSV")
    p.add_argument("kind", choices=FIGURE_KINDS)
    _common(p)
    return parser


def _overrides(args):
    return {"seed": args.seed, "reps": args.reps, "sampler": args.sampler, "H": args.H,
            "c": args.c}


def _load(args, default_case=None):
    ov = _overrides(args)
    if args.config:
        return E.load_config(args.config, ov)
    case = getattr(args, "case", None) or default_case
    if case is None:
        raise ConfigError("either --config or --case is required")
    return E.load_preset(case, ov)


def _exit_for(reports):
    if any(r["solved"] == 0 for r in reports):
        return EXIT_ALL_FAILED
    return EXIT_OK


def cmd_simulate(args):
    cfg = _load(args)
    os.makedirs(args.out, exist_ok=True)
    gen = E.DataGenerator(cfg)
    stream = RngStream(cfg.seed, 0)
    paths, obs = [], []
    for r in range(cfg.replications):
        rng = stream.spawn(r)
        tr = gen.trajectory(cfg.truth_rates, rng)
        paths.append(tr)
        obs.append(observe(tr, cfg.schedule, rng))
    data = ObservationSet(obs, cfg.schedule)
    write_trajectories_csv(os.path.join(args.out, "trajectories.csv"), paths)
    write_observations_csv(os.path.join(args.out, "observations.csv"), data)
    write_observations_json(os.path.join(args.out, "observations.json"), data)
    return EXIT_OK


def cmd_infer(args):
    cfg = _load(args)
    data = None
    if args.data:
        try:
            data = read_observations_json(args.data, cfg.net.num_species)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"--data: cannot read observations ({exc})") from None
    report, _ = E.run_experiment(cfg, args.out, args.workers, data=data)
    print(json.dumps(report, indent=2, sort_keys=True))
    return _exit_for([report])


def cmd_reproduce(args):
    if args.config:
        cfg = E.load_config(args.config, _overrides(args))
        reports = [E.run_experiment(cfg, args.out, args.workers)[0]]
    else:
        reports = E.reproduce(args.case, _overrides(args), args.out, args.workers)
    for rep in reports:
        print(json.dumps(rep, indent=2, sort_keys=True))
    return _exit_for(reports)


def cmd_figure(args):
    os.makedirs(args.out, exist_ok=True)
    if args.kind == "diffusion-compare":
        cfg = _load(args, "lotka")
        fig = cfg.raw.get("figure", {})
        rows, dev = E.diffusion_compare(cfg, float(fig.get("t_end", 30.0)),
                                        tuple(fig.get("dts", (2.0, 1.0, 0.5, 0.1))),
                                        int(fig.get("em_paths", 100)))
        E.write_rows(os.path.join(args.out, "diffusion_compare.csv"),
                     ["dt", "time", "source", "species", "value"], rows)
        E.write_json(os.path.join(args.out, "diffusion_deviation.json"),
                     {str(k): v for k, v in dev.items()})
    elif args.kind == "trajectory-bands":
        ov = _overrides(args)
        ov["H"] = ov["H"] or 16
        cfg = E.load_config(args.config, ov) if args.config else E.load_preset("enzyme", ov)
        bands, truth = E.trajectory_bands(cfg)
        rows = []
        for t, m, lo, hi, s in zip(bands.times, bands.mean, bands.lo95, bands.hi95,
                                   truth.at(bands.times)):
            for j in range(len(m)):
                rows.append((float(t), j, float(m[j]), float(lo[j]), float(hi[j]), float(s[j])))
        E.write_rows(os.path.join(args.out, "trajectory_bands.csv"),
                     ["time", "species", "mean", "lo95", "hi95", "truth"], rows)
    else:
        doc = E.preset_document("lotka")
        if args.config:
            with open(args.config) as fh:
                doc = json.load(fh)
        sweep = [args.H] if args.H else doc.get("sweep", {}).get("intervals", [None])
        kinds = [args.sampler] if args.sampler else ["ula", "two-stage"]
        keyed = []
        for kind in kinds:
            for H in sweep:
                ov = {**_overrides(args), "sampler": kind, "H": H}
                keyed.append(((kind, H), E.parse_config(doc, ov)))
        rows = E.violin_samples(keyed, args.workers)
        E.write_rows(os.path.join(args.out, "violin.csv"),
                     ["sampler", "H", "replicate_id", "sample_id", "param", "log_value"], rows)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "infer": cmd_infer, "reproduce": cmd_reproduce,
            "emit-figure-data": cmd_figure}


def main(argv=None):
    args = build_parser().parse_args(argv)
    np.seterr(all="ignore")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SrnError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ALL_FAILED


if __name__ == "__main__":
    sys.exit(main())
