"""Command-line entry point for the completion pipeline.

Exit codes: 0 success, 1 usage or configuration error, 2 stage-dependency
error, 3 backend or network error.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .evaluate import EvaluationError
from .labeling import BackendError
from .pipeline import (
    STAGE_FUNCS,
    StageDependencyError,
    run_all,
    sweep_maxlen,
)
from .scorer import ScorerError
from .synthetic import SynthConfig, generate_dataset

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_STAGE = 2
EXIT_BACKEND = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="TOML configuration file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable; wins over the file)",
    )
    p.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
    p.add_argument("--force", action="store_true", help="ignore stale artifact checks")
    p.add_argument("--jobs", type=int, metavar="N", help="worker cap for parallel stages")
    p.add_argument(
        "--ablate",
        action="append",
        default=[],
        choices=["pf", "nf", "te"],
        help="disable positive filtering, negative filtering, or trajectory entities",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="kgcf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    stages = {
        "paths": "enumerate candidate paths for train triplets",
        "label": "label enumerated paths with the configured backend",
        "train-sc": "train the sequence classifier",
        "build-plm": "build the filtered scorer dataset",
        "train-scorer": "train (or request training of) the path scorer",
        "eval": "rank test triplets and report Hits@k / MRR",
        "run-all": "run every stage in order",
    }
    for name, help_text in stages.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("sweep-maxlen", help="train and evaluate over several max path lengths")
    _add_common(p)
    p.add_argument("--lengths", default="1,2,3", metavar="L1,L2,...")
    p.add_argument("--setting", choices=["fixed", "diff"], default="fixed")

    p = sub.add_parser("gen-synth", help="generate the bundled synthetic dataset")
    p.add_argument("--out-dir", required=True, metavar="DIR")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--inductive", action="store_true")
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--n-valid", type=int, default=20)
    return parser


def _config_from_args(args) -> "PipelineConfig":
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"output.dir={args.out}")
    if args.jobs is not None:
        overrides.append(f"eval.jobs={args.jobs}")
    cfg = load_config(args.config, overrides)
    for a in args.ablate:
        if a not in cfg.filter.ablate:
            cfg.filter.ablate.append(a)
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gen-synth":
            summary = generate_dataset(
                args.out_dir,
                SynthConfig(
                    seed=args.seed,
                    inductive=args.inductive,
                    n_test=args.n_test,
                    n_valid=args.n_valid,
                ),
            )
            print(
                f"wrote {summary['scenario']} dataset to {args.out_dir} "
                f"({summary['n_train']} train / {summary['n_valid']} valid "
                f"/ {summary['n_test']} test triples)"
            )
            return EXIT_OK
        cfg = _config_from_args(args)
        if args.command == "run-all":
            artifact = run_all(cfg, force=args.force)
            print(f"wrote {artifact}")
        elif args.command == "sweep-maxlen":
            lengths = [int(v) for v in args.lengths.split(",") if v]
            if not lengths:
                raise ConfigError("--lengths must name at least one value")
            result = sweep_maxlen(cfg, lengths, args.setting, force=args.force)
            print(result.table())
        else:
            artifact = STAGE_FUNCS[args.command](cfg, force=args.force)
            print(f"wrote {artifact}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageDependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (BackendError, ScorerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except EvaluationError as exc:
        cause = exc.__cause__
        while cause is not None:
            if isinstance(cause, (BackendError, ScorerError)):
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_BACKEND
            cause = cause.__cause__
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
