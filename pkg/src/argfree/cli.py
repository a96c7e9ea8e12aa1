"""Command-line entry point: ``argfree run|certify|sweep|graph``."""

from __future__ import annotations

import argparse
import json
import sys

from .graph import GraphError, erdos_renyi
from .harness import (SWEEP_PARAMS, ConfigError, ExperimentConfig, ReplicaAbort,
                      certificate_for, run_experiment, sweep)

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="argfree", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run a Monte Carlo experiment")
    p.add_argument("config")

    p = sub.add_parser("certify", help="print the convergence certificate as JSON")
    p.add_argument("config")

    p = sub.add_parser("sweep", help="terminal error over a parameter grid")
    p.add_argument("config")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma-separated list")

    p = sub.add_parser("graph", help="sample a connected Erdos-Renyi topology")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.cmd == "graph":
            erdos_renyi(args.n, args.p, args.seed).save(args.out)
            print(f"wrote {args.out}")
            return EXIT_OK
        cfg = ExperimentConfig.load(args.config)
        if args.cmd == "run":
            res = run_experiment(cfg)
            s = res.stats
            print(json.dumps({"algorithm": cfg.algorithm, "n_runs": s.n_runs,
                              "terminal_rel_loss_mean": s.terminal_rel_loss_mean,
                              "terminal_error_mean": s.terminal_error_mean,
                              "output_dir": cfg.output_dir}, indent=1))
        elif args.cmd == "certify":
            print(json.dumps(certificate_for(cfg).to_json(), indent=1))
        else:
            try:
                values = [float(v) for v in args.values.split(",") if v.strip()]
            except ValueError:
                raise ConfigError(f"cannot parse --values {args.values!r}") from None
            print(f"{args.param},terminal_error_mean,terminal_rel_loss_mean")
            for row in sweep(cfg, args.param, values):
                print(",".join(format(v, ".6g") for v in row))
        return EXIT_OK
    except (ConfigError, GraphError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ReplicaAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
