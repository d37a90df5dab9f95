"""Command-line entry points ``glm-run`` and ``glm-compare``.

Exit codes: 0 success or pass, 2 tolerance failure, 1 error.
"""

import argparse
import dataclasses
import json
import logging
import sys

from .harness import (ALGORITHMS, ExperimentConfig, compare_traces, load_curve,
                      run_experiment)
from .records import to_db

log = logging.getLogger("glmamp")

EXIT_OK, EXIT_ERROR, EXIT_TOLERANCE = 0, 1, 2


def _run_parser():
    p = argparse.ArgumentParser(prog="glm-run", description="Run a GLM recovery experiment.")
    p.add_argument("--config", help="experiment JSON (defaults are used for missing keys)")
    p.add_argument("--algorithm", action="append", choices=ALGORITHMS,
                   help="algorithm to run; repeat for several (overrides the config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory (overrides the config's output)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run_main(argv=None):
    args = _run_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
        over = {k: v for k, v in (("seed", args.seed), ("trials", args.trials),
                                  ("workers", args.workers), ("output", args.out)) if v is not None}
        if args.algorithm:
            over["algorithms"] = tuple(args.algorithm)
        cfg = dataclasses.replace(cfg, **over)
        if cfg.output is None:
            raise ValueError("no output directory: pass --out or set 'output' in the config")
        res = run_experiment(cfg)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"glm-run: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for alg, agg in res.aggregates.items():
        print(f"{alg:10s} trials={agg['n']:3d} final median MSE {to_db(agg['median'][-1]):8.2f} dB")
    for f in res.failures:
        print(f"glm-run: trial {f['trial']} of {f['algorithm']} failed: {f['error']}",
              file=sys.stderr)
    print(f"wrote {len(res.files)} files to {cfg.output}")
    return EXIT_OK


def _compare_parser():
    p = argparse.ArgumentParser(prog="glm-compare",
                                description="Compare two per-iteration MSE curves.")
    p.add_argument("a", help="results.csv or aggregate.csv")
    p.add_argument("b", help="results.csv or aggregate.csv")
    p.add_argument("--tol-db", type=float, default=1.0)
    p.add_argument("--start-t", type=int, default=1, help="first iteration checked")
    p.add_argument("--algorithm", help="algorithm to read from a (and from b unless --algorithm-b)")
    p.add_argument("--algorithm-b")
    p.add_argument("--json", help="also write the report as JSON")
    return p


def compare_main(argv=None):
    args = _compare_parser().parse_args(argv)
    try:
        ca = load_curve(args.a, args.algorithm)
        cb = load_curve(args.b, args.algorithm_b or args.algorithm)
        rep = compare_traces(ca, cb, tol_db=args.tol_db, start_t=args.start_t)
        if args.json:
            with open(args.json, "w") as fh:
                json.dump(rep.to_dict(), fh, indent=1)
    except (OSError, ValueError, KeyError) as exc:
        print(f"glm-compare: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    status = "PASS" if rep.passed else "FAIL"
    print(f"{status} max gap {rep.max_gap_db:.3f} dB (t >= {rep.start_t}), "
          f"converged gap {rep.converged_gap_db:.3f} dB, tolerance {rep.tol_db:g} dB")
    return EXIT_OK if rep.passed else EXIT_TOLERANCE


if __name__ == "__main__":
    sys.exit(run_main())
