"""Command-line harness.

Subcommands mirror the experiment protocol:

* ``generate`` writes the surrogate dataset named by the config.
* ``sweep`` runs the regularization sweep and writes ``sweep.csv``.
* ``score`` evaluates the four regularize/score combinations on the
  test set.
* ``rewrap`` runs the plant-extraction re-wrap comparison.

Every command takes ``--config`` (JSON, see ``ExperimentConfig``),
``--out`` for the output directory, and ``--seed`` to override the
dataset seed. Exit codes: 0 success, 1 configuration error, 2 internal
assertion failure.
"""

from __future__ import annotations

import argparse
import sys

from .experiment import (ConfigError, ExperimentConfig, InternalCheckError,
                         run_rewrap, run_score, run_sweep)
from .furuta_sim import generate_dataset


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clkoop",
        description="Closed-loop Koopman identification harness")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
            ("generate", "generate the surrogate dataset"),
            ("sweep", "regularization sweep with cross-validated scores"),
            ("score", "test-set score table for the four "
                      "regularize/score combinations"),
            ("rewrap", "plant extraction and re-wrap comparison")):
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", help="experiment config JSON")
        cmd.add_argument("--out", default="results",
                         help="output directory (default: results)")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the dataset seed")
    return parser


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        cfg = ExperimentConfig()
    else:
        cfg = ExperimentConfig.from_json_file(args.config)
    return cfg.with_seed(args.seed)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "generate":
            try:
                manifest = generate_dataset(cfg.dataset, cfg.data_dir)
            except (ValueError, RuntimeError) as exc:
                raise ConfigError(str(exc)) from exc
            print(f"wrote {len(manifest['episodes'])} episodes to "
                  f"{cfg.data_dir}/manifest.json")
        elif args.command == "sweep":
            rows = run_sweep(cfg, args.out)
            print(f"wrote {len(rows)} sweep rows to {args.out}/sweep.csv")
        elif args.command == "score":
            reports = run_score(cfg, args.out)
            for combo, report in sorted(reports.items()):
                print(f"{combo}: r2_mean={report.r2_mean:.4g} "
                      f"nrmse_mean={report.nrmse_mean:.4g}")
        elif args.command == "rewrap":
            summary = run_rewrap(cfg, args.out)
            print(f"constrained max displacement: "
                  f"{summary['constrained_max_displacement']:.3e}")
            print(f"least-squares max displacement: "
                  f"{summary['lstsq_max_displacement']:.3e}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except InternalCheckError as exc:
        print(f"internal check failed: {exc}", file=sys.stderr)
        return 2
    return 0


def entry_point() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
