"""Command line entry point.

::

    bpds design run --seed 1 --c 0.1 --out runs/design
    bpds portfolio synth --seed 3 --out prices.csv
    bpds portfolio run --config cfg.json --prices prices.csv --out runs/port
    bpds et-solve --config tilt.json --out runs/tilt
    bpds run --config any.json

Exit codes: 0 success, 2 validation or input error, 3 solver failure.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .design import run_design
from .dlm import read_prices, write_prices
from .errors import BPDSError, ConfigError
from .io import (config_from_dict, emit_design, emit_portfolio, emit_tilt, load_config, merge)
from .mixture import ModelEnsemble, predictive_from_dict
from .portfolio import run_backtest, synthetic_prices
from .tilting import TiltTarget, solve_tilt, solve_tilt_constrained

log = logging.getLogger("bpds")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 2, 3


def _common(p, config_required=False):
    p.add_argument("--config", required=config_required, help="JSON run config")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker threads")
    p.add_argument("--mc-samples", type=int, dest="mc_samples", help="Monte Carlo sample size")


def build_parser():
    ap = argparse.ArgumentParser(prog="bpds", description="Decision-guided synthesis of "
                                 "predictive model mixtures.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    design = sub.add_parser("design", help="optimal control design study")
    dsub = design.add_subparsers(dest="action", required=True)
    drun = dsub.add_parser("run", help="run one seed and write report/curves")
    _common(drun)
    drun.add_argument("--c", type=float, help="utility balance constant")

    port = sub.add_parser("portfolio", help="sequential portfolio study")
    psub = port.add_subparsers(dest="action", required=True)
    prun = psub.add_parser("run", help="backtest on a price CSV")
    _common(prun)
    prun.add_argument("--prices", help="price CSV (date column plus one column per asset)")
    psyn = psub.add_parser("synth", help="write a synthetic price CSV")
    psyn.add_argument("--seed", type=int, required=True)
    psyn.add_argument("--assets", type=int, default=3)
    psyn.add_argument("--days", type=int, default=600)
    psyn.add_argument("--out", help="output CSV path (default synthetic_prices_<seed>.csv)")

    ets = sub.add_parser("et-solve", help="solve a standalone tilting problem")
    _common(ets, config_required=True)

    run = sub.add_parser("run", help="dispatch on the study named in a config")
    _common(run, config_required=True)
    run.add_argument("--prices", help="price CSV for portfolio configs")
    return ap


def _overrides(args, study):
    over = {"study": study}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if args.threads is not None:
        over["threads"] = args.threads
    if args.mc_samples is not None:
        over["mc_samples"] = args.mc_samples
    if getattr(args, "c", None) is not None:
        over["design"] = {"c": args.c}
    return over


def _config(args, study):
    over = _overrides(args, study)
    if args.config:
        return load_config(args.config, over)
    return config_from_dict(merge({"seed": args.seed}, over))


def _out(cfg, args, default):
    return args.out or cfg.out or default


def run_design_cmd(cfg, out):
    report = run_design(cfg.design)
    files = emit_design(report, cfg, out)
    bp = report.row("BPDS")
    log.info("design seed %d: x_BPDS=%.3f loss=%.4f", cfg.seed, bp["x"], bp["loss"])
    return files


def run_portfolio_cmd(cfg, prices_path, out):
    if prices_path is None:
        assets, dates, prices = synthetic_prices(seed=cfg.seed)
        log.info("no --prices given; using synthetic prices for seed %d", cfg.seed)
    else:
        assets, dates, prices = read_prices(prices_path)
    result = run_backtest(cfg.portfolio, prices, dates, assets, threads=cfg.threads)
    return emit_portfolio(result, cfg, out)


def _moment_scores(samples):
    if samples.shape[-1] != 1:
        raise ConfigError(["et_solve.score: 'moments' needs scalar models"])
    y = samples[..., 0]
    return np.stack([y, -0.5 * y * y], axis=-1)


def run_et_cmd(cfg, out):
    ec = cfg.et_solve
    preds = [predictive_from_dict(m) for m in ec.models]
    ens = ModelEnsemble.from_predictives(preds, ec.n_samples, cfg.seed)
    w = (np.full(len(preds), 1.0 / len(preds)) if ec.weights is None
         else np.asarray(ec.weights, dtype=float))
    scores = ens.samples if ec.score == "identity" else _moment_scores(ens.samples)
    target = TiltTarget(ec.target, ec.target_mode)
    if ec.a_ub is None:
        sol = solve_tilt(scores, w, target, ec.tol, ec.max_iter)
    else:
        sol = solve_tilt_constrained(scores, w, target, ec.a_ub, ec.b_ub, ec.tol, ec.max_iter)
    return emit_tilt(sol, cfg, out)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "portfolio" and args.action == "synth":
            assets, dates, prices = synthetic_prices(args.assets, args.days, args.seed)
            path = args.out or f"synthetic_prices_{args.seed}.csv"
            write_prices(path, assets, dates, prices)
            print(path)
            return EXIT_OK
        if args.command == "run":
            cfg = load_config(args.config, {k: v for k, v in _overrides(args, None).items()
                                            if k != "study"})
        else:
            cfg = _config(args, "et-solve" if args.command == "et-solve" else args.command)
        if cfg.study == "design":
            out = _out(cfg, args, f"design_seed{cfg.seed}")
            run_design_cmd(cfg, out)
        elif cfg.study == "portfolio":
            out = _out(cfg, args, f"portfolio_seed{cfg.seed}")
            run_portfolio_cmd(cfg, getattr(args, "prices", None), out)
        else:
            out = _out(cfg, args, f"tilt_seed{cfg.seed}")
            run_et_cmd(cfg, out)
        print(out)
        return EXIT_OK
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_INVALID
    except BPDSError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
