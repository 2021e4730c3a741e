"""
Subcommand implementations and the exit-code boundary.

Exit codes: 0 ok, 1 unexpected, 2 configuration, 3 I/O or file format, 4 non-finite training
values, 5 missing split.
"""
import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from config.settings import get_settings

from ..models.config import WorldConfig, RunConfig
from ..models.errors import (
    ConfigError,
    DimensionMismatchError,
    FileFormatError,
    InvalidScheduleError,
    MissingSplitError,
    NearIDError,
    NonFiniteGradientError,
    TrainingDivergedError,
)
from ..models.report import EvalReport
from ..services.evaluation_service import EvaluationService, make_provenance
from ..services.head_service import FrozenEncoder, MAPHead, load_checkpoint, save_checkpoint
from ..services.training_service import TrainingService, TrainResult
from ..services.world_service import CONFIG_FILE, SynthWorld, generate_world
from ..utils.file_formats import atomic_write_text, write_embeddings
from .parser import build_parser, config_overrides

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_MISSING_SPLIT = 5

FROZEN = "frozen"
GRIDS_FILE = "grids.nide"
SUMMARY_FILE = "summary.csv"
SUMMARY_COLUMNS = ("cell", "loss_variant", "alpha", "beta", "ssr", "pa", "m_o", "m_o_pair", "m_h", "status")
WORLD_ONLY_KEYS = tuple(key for key in WorldConfig.model_fields if key != "seed")


# --- configuration ----------------------------------------------------------------------------


def _read_config_file(path: Optional[str]) -> RunConfig:
    if not path:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as f:
        return RunConfig.parse(f.read())


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Flag overrides plus NEARID_SEED; an explicit --seed flag wins over the environment."""
    overrides = config_overrides(args)
    settings = get_settings()
    if settings.seed is not None and "seed" not in overrides:
        overrides["seed"] = settings.seed
    return overrides


def bind_world(cfg: RunConfig, world_config: WorldConfig) -> RunConfig:
    """
    Replace the world section with a generated world's settings.

    The flat document has a single ``seed`` key, so the bound world section carries the run seed;
    rendering always uses the seed stored in the world directory itself.
    """
    return cfg.model_copy(update={"world": world_config.model_copy(update={"seed": cfg.train.seed})})


def resolve_config(
    args: argparse.Namespace,
    world_run_config: Optional[RunConfig] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Effective run config: file values (or the world's config echo), then NEARID_SEED, then flags.

    When a world is given its generation-time settings are authoritative and world-only flags are
    ignored with a warning.
    """
    path = getattr(args, "config", None)
    base = _read_config_file(path) if path or world_run_config is None else world_run_config
    overrides = _overrides(args)
    overrides.update(extra or {})
    if world_run_config is not None:
        ignored = sorted(key for key in overrides if key in WORLD_ONLY_KEYS)
        if ignored:
            logger.warning(f"World keys are fixed at generation time; ignoring {ignored}")
        overrides = {k: v for k, v in overrides.items() if k not in WORLD_ONLY_KEYS}
    cfg = base.with_overrides(overrides) if overrides else base
    if world_run_config is not None:
        cfg = bind_world(cfg, world_run_config.world)
    return cfg


def _load_world(world_dir: str) -> Tuple[SynthWorld, RunConfig]:
    if not os.path.exists(os.path.join(world_dir, CONFIG_FILE)):
        raise FileNotFoundError(f"No world found in {world_dir}")
    return SynthWorld.load(world_dir)


def _echo_path(path: str) -> str:
    return f"{path}.config.txt"


# --- shared pipeline pieces -------------------------------------------------------------------


def run_training(world: SynthWorld, cfg: RunConfig) -> TrainResult:
    return TrainingService(cfg.train, cfg.loss).train(world)


def run_evaluation(
    world: SynthWorld,
    cfg: RunConfig,
    embed: Callable[[np.ndarray], np.ndarray],
    embedder_name: str,
) -> Tuple[EvalReport, EvaluationService]:
    service = EvaluationService(world, embed, cfg.eval)
    provenance = make_provenance(cfg.train.seed, cfg.config_hash(), embedder_name)
    return service.evaluate(cfg.eval.split, provenance), service


def _report_json(report: EvalReport) -> str:
    return report.model_dump_json(indent=2) + "\n"


def _log_jsonl(result: TrainResult) -> str:
    return "".join(record.model_dump_json() + "\n" for record in result.log)


# --- subcommands ------------------------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    world = generate_world(cfg.world)
    manifest_path = world.save(args.out, cfg)
    if args.export_grids:
        write_embeddings(os.path.join(args.out, GRIDS_FILE), world.grids(world.records))
        logger.info(f"Exported {len(world.records)} token grids")
    print(f"gen: {len(world.records)} records -> {manifest_path} (config {cfg.config_hash()})")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    world, world_cfg = _load_world(args.world)
    cfg = resolve_config(args, world_cfg)
    result = run_training(world, cfg)

    save_checkpoint(args.out, result.params, result.n_tokens)
    atomic_write_text(args.log or f"{args.out}.log.jsonl", _log_jsonl(result))
    atomic_write_text(_echo_path(args.out), cfg.serialize())

    final = result.final
    if final is None:
        print(f"train: 0 steps, checkpoint {args.out} holds the initialized head")
    else:
        print(
            f"train: {len(result.log)} steps, final loss {final.loss:.6f} "
            f"(disc {final.disc:.6f}, rank {final.rank:.6f}, cohesion {final.cohesion:.6f}) -> {args.out}"
        )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    world, world_cfg = _load_world(args.world)
    cfg = resolve_config(args, world_cfg)

    if args.checkpoint == FROZEN:
        embed, name = FrozenEncoder().embed, FROZEN
    else:
        params, n_tokens = load_checkpoint(args.checkpoint)
        expected = cfg.world.tokens_fg + cfg.world.tokens_bg
        if n_tokens != expected:
            raise ConfigError(f"Checkpoint was trained on {n_tokens} tokens per grid, world has {expected}")
        if params.dims.width != cfg.world.token_dim:
            raise ConfigError(f"Checkpoint width {params.dims.width} does not match token_dim {cfg.world.token_dim}")
        embed, name = MAPHead(params).embed, f"map_head:{os.path.basename(args.checkpoint)}"

    report, service = run_evaluation(world, cfg, embed, name)
    atomic_write_text(args.report, _report_json(report))
    atomic_write_text(_echo_path(args.report), cfg.serialize())
    if args.export_embeddings:
        views = [r for i in world.identities(cfg.eval.split) for r in world.views(i)]
        write_embeddings(args.export_embeddings, np.stack([service.embedding(r) for r in views]))

    print(
        f"eval [{name}] split={report.split}: SSR {report.ssr:.4f}  PA {report.pa:.4f}  "
        f"M-O {_fmt(report.m_o)}  M-O_pair {_fmt(report.m_o_pair)}  M-H {_fmt(report.m_h)}"
    )
    return EXIT_OK


def parse_sweep(specs: Sequence[str]) -> List[Dict[str, str]]:
    """Cartesian product of ``key=v1,v2`` specs, in the order given."""
    axes: List[Tuple[str, List[str]]] = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"Sweep spec '{spec}' is not key=v1,v2")
        key, values = (part.strip() for part in spec.split("=", 1))
        choices = [v.strip() for v in values.split(",") if v.strip()]
        if not choices:
            raise ConfigError(f"Sweep key '{key}' has no values")
        if key in WORLD_ONLY_KEYS:
            raise ConfigError(f"Sweep key '{key}' belongs to the world; generate one world per value instead")
        axes.append((key, choices))
    if not axes:
        return [{}]
    keys = [key for key, _ in axes]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(choices for _, choices in axes))]


def cmd_ablate(args: argparse.Namespace) -> int:
    world, world_cfg = _load_world(args.world)
    sweep = parse_sweep(args.sweep)
    os.makedirs(args.out, exist_ok=True)

    cells: Dict[str, RunConfig] = {}
    for overrides in sweep:
        cell_cfg = resolve_config(args, world_cfg, extra=overrides)
        cell_hash = cell_cfg.config_hash()
        if cell_hash in cells:
            logger.info(f"Skipping duplicate sweep cell {overrides}")
            continue
        cells[cell_hash] = cell_cfg
    logger.info(f"Ablation sweep: {len(cells)} cell(s)")

    rows: List[Dict[str, Any]] = []
    for cell_hash, cell_cfg in cells.items():
        row: Dict[str, Any] = {
            "cell": cell_hash,
            "loss_variant": cell_cfg.train.loss_variant.value,
            "alpha": cell_cfg.loss.alpha,
            "beta": cell_cfg.loss.beta,
        }
        try:
            result = run_training(world, cell_cfg)
            report, _ = run_evaluation(world, cell_cfg, MAPHead(result.params).embed, f"map_head:cell_{cell_hash}")
            atomic_write_text(os.path.join(args.out, f"cell_{cell_hash}.json"), _report_json(report))
            atomic_write_text(os.path.join(args.out, f"cell_{cell_hash}.config.txt"), cell_cfg.serialize())
            row.update(ssr=report.ssr, pa=report.pa, m_o=report.m_o, m_o_pair=report.m_o_pair, m_h=report.m_h, status="ok")
        except NearIDError as e:
            logger.error(f"Sweep cell {cell_hash} failed: {e}")
            row["status"] = f"failed: {type(e).__name__}"
        rows.append(row)
        print(f"ablate: cell {cell_hash} {row['loss_variant']} alpha={row['alpha']} beta={row['beta']} -> {row['status']}")

    atomic_write_text(os.path.join(args.out, SUMMARY_FILE), _csv_text(SUMMARY_COLUMNS, rows))
    return EXIT_OK


def ecdf(values: Sequence[float]) -> List[Tuple[float, float]]:
    """Empirical CDF points (value, fraction of values <= value) at every sorted sample."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    n = len(ordered)
    return [(float(v), (i + 1) / n) for i, v in enumerate(ordered)]


def cmd_report(args: argparse.Namespace) -> int:
    with open(args.report, "r", encoding="utf-8") as f:
        try:
            report = EvalReport.model_validate(json.load(f))
        except ValueError as e:
            raise FileFormatError(f"{args.report} is not an evaluation report: {e}") from e
    os.makedirs(args.out, exist_ok=True)

    written: List[str] = []

    def emit(name: str, columns: Sequence[str], rows: List[Dict[str, Any]]) -> None:
        atomic_write_text(os.path.join(args.out, name), _csv_text(columns, rows))
        written.append(name)

    edges, counts = report.margin_histogram.edges, report.margin_histogram.counts
    emit("margin_histogram.csv", ("left", "right", "count"), [
        {"left": edges[k], "right": edges[k + 1], "count": counts[k]} for k in range(len(counts))
    ])
    emit("per_source.csv", ("source_id", "held_out", "ssr", "pa", "n", "n_margins"), [
        summary.model_dump() for summary in report.per_source.values()
    ])
    if report.edit_scores:
        emit("edit_scores.csv", ("identity_id", "sample_id", "severity", "human_proxy", "similarity"), [
            score.model_dump() for score in report.edit_scores
        ])
        for field in ("similarity", "severity", "human_proxy"):
            points = ecdf([getattr(score, field) for score in report.edit_scores])
            emit(f"ecdf_{field}.csv", ("value", "ecdf"), [{"value": v, "ecdf": p} for v, p in points])
    if report.projection_coords:
        labels = report.projection_labels or [""] * len(report.projection_coords)
        emit("projection.csv", ("label", "x", "y"), [
            {"label": label, "x": x, "y": y} for label, (x, y) in zip(labels, report.projection_coords)
        ])

    print(f"report: wrote {', '.join(written)} to {args.out}")
    return EXIT_OK


# --- dispatch ---------------------------------------------------------------------------------


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (ConfigError, InvalidScheduleError, DimensionMismatchError, ValidationError)):
        return EXIT_CONFIG
    if isinstance(error, (FileFormatError, OSError)):
        return EXIT_IO
    if isinstance(error, (TrainingDivergedError, NonFiniteGradientError)):
        return EXIT_DIVERGED
    if isinstance(error, MissingSplitError):
        return EXIT_MISSING_SPLIT
    return EXIT_UNEXPECTED


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one subcommand and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except Exception as e:
        code = exit_code_for(e)
        logger.debug("Command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return code


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _csv_text(columns: Sequence[str], rows: List[Dict[str, Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({key: "" if row.get(key) is None else row.get(key) for key in columns})
    return buffer.getvalue()
