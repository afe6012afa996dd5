"""Command-line interface: simulate, analyze, impute, synth.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data_model import EstimatorKind
from .errors import ConfigError, DataFormatError, EstimationError, GibbsError, MibootError
from .wild_bootstrap import WeightScheme

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="miboot", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo study")
    sim.add_argument("--scenario", choices=("a", "b", "c", "d"), required=True)
    sim.add_argument("--n", type=int, default=1000)
    sim.add_argument("--reps", type=int, default=500)
    sim.add_argument("--m", default="5",
                     help="imputation counts, comma separated (e.g. 5,10)")
    sim.add_argument("--B", type=int, default=300)
    sim.add_argument("--weights", default="mammen",
                     choices=("mammen", "rademacher", "normal", "multinomial"))
    sim.add_argument("--estimators", default="regression,ipw,aipw,matching")
    sim.add_argument("--matches", type=int, default=1)
    sim.add_argument("--gibbs-iters", type=int, default=1500)
    sim.add_argument("--burn-in", type=int, default=500)
    sim.add_argument("--cond-draws", type=int, default=50,
                     help="Monte Carlo draws for conditional expectations")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", default="-",
                     help="output path ('-' for stdout)")
    sim.add_argument("--format", default="csv",
                     choices=("csv", "json", "markdown"))

    ana = sub.add_parser("analyze", help="analyze a CSV dataset")
    ana.add_argument("--data", required=True)
    ana.add_argument("--config", required=True)
    ana.add_argument("--out", required=True)

    imp = sub.add_parser("impute", help="write m completed CSV copies")
    imp.add_argument("--data", required=True)
    imp.add_argument("--config", required=True)
    imp.add_argument("--m", type=int, required=True)
    imp.add_argument("--out-dir", required=True)

    syn = sub.add_parser("synth", help="write the synthetic survey-style "
                                       "benchmark dataset")
    syn.add_argument("--out", required=True)
    syn.add_argument("--n", type=int, default=4845)
    syn.add_argument("--seed", type=int, default=12345)
    syn.add_argument("--amplified", action="store_true",
                     help="raise the missingness rate to roughly 35%%")
    return parser


def _cmd_simulate(args) -> int:
    from .sim_harness import ScenarioSpec, emit, run_study

    kinds = []
    for name in args.estimators.split(","):
        name = name.strip()
        if not name:
            continue
        if name == "matching":
            kinds.append(EstimatorKind("matching", M=args.matches))
        else:
            kinds.append(EstimatorKind(name))
    m_values = tuple(int(s) for s in str(args.m).split(",") if s.strip())
    spec = ScenarioSpec.make(args.scenario, n=args.n)
    report = run_study(
        spec, reps=args.reps, m_values=m_values, kinds=tuple(kinds),
        B=args.B, scheme=WeightScheme(args.weights), seed=args.seed,
        gibbs_iters=args.gibbs_iters, burn_in=args.burn_in,
        L=args.cond_draws, progress=args.verbose)
    text = emit(report, args.format)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return 0


def _load_analysis_inputs(args):
    from .data_io import analysis_config, load_csv, parse_config

    cfg = analysis_config(parse_config(args.config))
    data = load_csv(args.data, cfg.roles)
    return data, cfg


def _cmd_analyze(args) -> int:
    from .data_io import analyze, write_analysis

    data, cfg = _load_analysis_inputs(args)
    report = analyze(data, cfg)
    write_analysis(report, args.out, config_text=Path(args.config).read_text())
    return 0


def _cmd_impute(args) -> int:
    from .data_io import save_csv
    from .imputer import GibbsConfig, JointModelSpec, gibbs_run, impute_from_chain

    data, cfg = _load_analysis_inputs(args)
    if cfg.mechanism == "mnar":
        spec = JointModelSpec.for_dataset(
            data, "mnar",
            missingness_x=(None if cfg.missing_x_predictors is None else
                           {j: cfg.missing_x_predictors
                            for j in range(data.p)
                            if (data.R[:, j] == 0).any()}),
            missingness_y=cfg.missing_y_predictors)
    else:
        spec = JointModelSpec.mar(data.p)
    gibbs = GibbsConfig(iterations=cfg.gibbs.iterations,
                        burn_in=cfg.gibbs.burn_in, m=args.m,
                        seed=cfg.gibbs.seed)
    chain = gibbs_run(data, spec, cfg.prior, gibbs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for ds in impute_from_chain(chain, args.m):
        complete = type(data)(A=ds.A, Y=ds.Ystar, X=ds.Xstar,
                              R=data.R * 0 + 1,
                              R_Y=data.R_Y * 0 + 1)
        save_csv(complete, out_dir / f"imputed_{ds.j:03d}.csv", cfg.roles)
    return 0


def _cmd_synth(args) -> int:
    from .data_io import nhanes_roles, save_csv, synthesize_nhanes_like

    data = synthesize_nhanes_like(seed=args.seed, n=args.n,
                                  amplified=args.amplified)
    save_csv(data, args.out, nhanes_roles())
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    handler = {"simulate": _cmd_simulate, "analyze": _cmd_analyze,
               "impute": _cmd_impute, "synth": _cmd_synth}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationError, GibbsError, MibootError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
