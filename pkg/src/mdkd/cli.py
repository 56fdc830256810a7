"""Command-line interface: one subcommand per pipeline stage.

Exit codes: 0 success, 1 configuration or validation error, 2 I/O error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import yaml
from threadpoolctl import threadpool_limits

from . import pipeline
from .config import HELP, load_config
from .errors import ConfigError, DivergenceError

logger = logging.getLogger("mdkd")

_TRAIN_COMMON = ["seed", "train.batch_size", "train.warmup", "train.lr_scale", "train.dropout"]

KEYS: dict[str, list[str]] = {
    "preprocess": ["data.generic", "data.domains", "preprocess.bpe_merges", "preprocess.max_len",
                   "preprocess.max_ratio"],
    "select": ["preprocess.reverse_source", "selection.alpha", "selection.beta", "selection.nu",
               "selection.integer_exponent", "selection.lm_order", "selection.normalized",
               "train.teacher_epochs"],
    "train:generic": ["model.embed_dim", "model.hidden_dim", "model.max_decode_len",
                      "loss.label_smoothing", *_TRAIN_COMMON, "train.generic_steps",
                      "train.checkpoint_every", "train.average_last", "train.generic_patience"],
    "train:teacher": ["selection.alpha", "selection.beta", "selection.nu", "selection.integer_exponent",
                      *_TRAIN_COMMON, "train.teacher_epochs", "train.teacher_patience",
                      "train.teacher_label_smoothing"],
    "train:student": ["student_model.embed_dim", "student_model.hidden_dim", "loss.lambda",
                      "loss.label_smoothing", *_TRAIN_COMMON, "train.student_epochs",
                      "train.student_patience", "train.generic_subset_fraction"],
    "distill-targets": ["loss.top_k"],
    "evaluate": ["model.max_decode_len"],
}
KEYS["train:baseline"] = [k for k in KEYS["train:student"] if k != "loss.lambda"]


def _keys_epilog(*groups: str) -> str:
    lines = []
    for g in groups:
        title = g.split(":")[1] + " stage" if ":" in g else g
        lines.append(f"config keys read ({title}):")
        lines += [f"  {k:<34} {HELP[k]}" for k in KEYS[g]]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment YAML file")
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: ./run)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for independent jobs such as teachers (default: all cores)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. loss.lambda=0.5 (repeatable)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")

    parser = argparse.ArgumentParser(prog="mdkd", description="Multi-domain word-level knowledge distillation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    fmt = argparse.RawDescriptionHelpFormatter

    sub.add_parser("preprocess", parents=[common], formatter_class=fmt,
                   help="filter, learn BPE and the shared vocabulary",
                   epilog=_keys_epilog("preprocess"))
    sub.add_parser("select", parents=[common], formatter_class=fmt,
                   help="rank the generic corpus for every domain",
                   epilog=_keys_epilog("select"))
    train = sub.add_parser("train", parents=[common], formatter_class=fmt,
                           help="train the generic model, teachers, student or baseline",
                           epilog=_keys_epilog("train:generic", "train:teacher", "train:student",
                                               "train:baseline"))
    train.add_argument("--stage", required=True, choices=["generic", "teacher", "student", "baseline"])
    sub.add_parser("distill-targets", parents=[common], formatter_class=fmt,
                   help="write the top-K teacher distributions of every domain",
                   epilog=_keys_epilog("distill-targets"))
    sub.add_parser("evaluate", parents=[common], formatter_class=fmt,
                   help="BLEU of every trained model plus the student-vs-baseline gain",
                   epilog=_keys_epilog("evaluate"))
    synth = sub.add_parser("synth", formatter_class=fmt,
                           help="write a synthetic multi-domain task and a matching config")
    synth.add_argument("--out", type=Path, required=True, help="directory for the data and config.yaml")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--domains", type=int, default=2)
    return parser


def _synth(args) -> int:
    from .synthetic import SyntheticSpec, domain_tags, write_task

    spec = SyntheticSpec(n_domains=args.domains, seed=args.seed)
    paths = write_task(spec, args.out / "data")
    rel = {tag: {s: [str(Path(p).relative_to(args.out)) for p in pair] for s, pair in splits.items()}
           for tag, splits in paths.items()}
    cfg = {"seed": args.seed,
           "data": {"generic": rel["generic"],
                    "domains": [{"tag": t, **rel[t]} for t in domain_tags(spec.n_domains)]}}
    with open(args.out / "config.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg, f, sort_keys=False)
    print(args.out / "config.yaml")
    return 0


def _dispatch(args) -> int:
    if args.config is None:
        raise ConfigError("--config is required")
    cfg = load_config(args.config, args.override, args.seed)
    if args.command == "preprocess":
        pipeline.preprocess(cfg, args.out)
        return 0
    cfg.validate(check_files=False)
    run = pipeline.Run.open(cfg, args.out)
    if not run.manifest:
        raise ConfigError(f"no manifest in {args.out}; run 'mdkd preprocess' first")
    if args.command == "select":
        pipeline.select(run)
    elif args.command == "train":
        if args.stage == "generic":
            pipeline.train_generic(run)
        elif args.stage == "teacher":
            pipeline.finetune_teachers(run, args.threads)
        elif args.stage == "student":
            pipeline.distill_student(run)
        else:
            pipeline.run_baseline_finetune(run)
    elif args.command == "distill-targets":
        pipeline.distill_targets(run)
    elif args.command == "evaluate":
        print(pipeline.format_table(pipeline.evaluate(run)))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(getattr(args, "verbose", 0), logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return _synth(args)
        # one BLAS thread keeps results identical whatever --threads is
        with threadpool_limits(1):
            return _dispatch(args)
    except DivergenceError as e:
        print(f"mdkd: numerical divergence: {e}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError, yaml.YAMLError) as e:
        print(f"mdkd: configuration error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"mdkd: I/O error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
