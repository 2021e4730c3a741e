import argparse
from typing import Any, Dict

from ..models.config import EvalOptions, flat_keys

BOOLEAN_KEYS = tuple(key for key, field in EvalOptions.model_fields.items() if field.annotation is bool)
FLAG_ALIASES = {"loss_variant": ("--loss",)}


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One optional flag per flat config key; values stay strings until RunConfig validates them."""
    group = parser.add_argument_group("config overrides")
    for key in flat_keys():
        names = (f"--{key.replace('_', '-')}",) + FLAG_ALIASES.get(key, ())
        if key in BOOLEAN_KEYS:
            group.add_argument(*names, dest=key, nargs="?", const="true", default=None, metavar="BOOL")
        else:
            group.add_argument(*names, dest=key, default=None, metavar=key.upper())


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Flag values the user actually passed."""
    return {key: getattr(args, key) for key in flat_keys() if getattr(args, key, None) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nearid",
        description="Near-identity contrastive training and identity-discrimination evaluation on a synthetic world",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("gen", help="Generate a synthetic matched-context world")
    gen.add_argument("--config", help="Flat key = value config file")
    gen.add_argument("--out", required=True, help="Output world directory")
    gen.add_argument("--export-grids", action="store_true", help="Also write every token grid to grids.nide")
    add_config_flags(gen)

    train = subparsers.add_parser("train", help="Train the attention-pooling head")
    train.add_argument("--config", help="Flat key = value config file (world keys are taken from the world)")
    train.add_argument("--world", required=True, help="World directory written by 'gen'")
    train.add_argument("--out", required=True, help="Checkpoint path")
    train.add_argument("--log", help="Training log path (default: <out>.log.jsonl)")
    add_config_flags(train)

    evaluate = subparsers.add_parser("eval", help="Evaluate a checkpoint or the frozen baseline")
    evaluate.add_argument("checkpoint", help="Checkpoint path, or 'frozen' for the mean-pooled baseline")
    evaluate.add_argument("--config", help="Flat key = value config file (world keys are taken from the world)")
    evaluate.add_argument("--world", required=True, help="World directory written by 'gen'")
    evaluate.add_argument("--report", required=True, help="Report JSON path")
    evaluate.add_argument("--export-embeddings", help="Write the evaluated view embeddings to this .nide file")
    add_config_flags(evaluate)

    ablate = subparsers.add_parser("ablate", help="Train and evaluate every cell of a sweep")
    ablate.add_argument("--config", help="Flat key = value base config file")
    ablate.add_argument("--world", required=True, help="World directory written by 'gen'")
    ablate.add_argument("--out", required=True, help="Output directory for cell reports and summary.csv")
    ablate.add_argument(
        "--sweep",
        action="append",
        default=[],
        metavar="KEY=V1,V2",
        help="Swept config key and its values; repeat for a cartesian product",
    )
    add_config_flags(ablate)

    report = subparsers.add_parser("report", help="Convert a report JSON into CSV plot data")
    report.add_argument("report", help="Report JSON written by 'eval' or 'ablate'")
    report.add_argument("--out", required=True, help="Output directory for CSV files")

    return parser
