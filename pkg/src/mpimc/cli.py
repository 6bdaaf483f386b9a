"""Command-line entry point: ``mpimc {scalar-mult,solve-model,gene-network}``.

Exit codes: 0 success, 2 configuration error, 3 non-convergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError, DomainError
from .experiments import (
    ExperimentConfig,
    load_config,
    run_gene_network,
    run_scalar_mult,
    run_solve_model,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_IO = 4

RUNNERS = {
    "scalar-mult": run_scalar_mult,
    "solve-model": run_solve_model,
    "gene-network": run_gene_network,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpimc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML or JSON experiment configuration")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--noise-off", action="store_true",
                       help="disable programming/read noise, drift and the ADC")
    return parser


def _summary_line(kind: str, summary: dict) -> str:
    if kind == "scalar-mult":
        return f"std per K: {dict(zip(summary['k_values'], summary['std']))}; slope {summary['slope']}"
    if kind == "solve-model":
        return (f"converged: {summary['all_converged']}; median refinements "
                f"{summary['median_refinements']}")
    return (f"converged: {summary['converged']}; threshold {summary.get('threshold')}; "
            f"failed columns {summary['failed_columns']}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    kind = args.command
    try:
        cfg = load_config(args.config, kind) if args.config else ExperimentConfig.default(kind)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = args.out
        if args.noise_off:
            cfg.noise = cfg.noise.without_noise()
        summary = RUNNERS[kind](cfg)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(_summary_line(kind, summary))
    if kind == "solve-model" and not summary["all_converged"]:
        return EXIT_NOT_CONVERGED
    if kind == "gene-network" and not summary["converged"]:
        return EXIT_NOT_CONVERGED
    if cfg.out is None and kind != "gene-network":
        print(json.dumps(summary, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
