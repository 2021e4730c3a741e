import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Tuple

import numpy as np

from ..models.batch import GridTuple, OracleLabels, TokenGrid, TupleBatch
from ..models.config import LossConfig, TrainConfig
from ..models.errors import ConfigError, InvalidScheduleError, NonFiniteGradientError, TrainingDivergedError
from ..models.head import BLOCK_ORDER, HeadDims, HeadParams, OptimizerState
from ..models.report import StepRecord
from ..models.world import Role
from ..utils.rng import substream
from .head_service import MAPHead, init_head_params
from .loss_service import LossService
from .world_service import SynthWorld

logger = logging.getLogger(__name__)


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """
    Learning rate after ``step`` updates: linear ramp 0 -> lr over warmup_steps, then cosine
    annealing to 0 at total_steps.

    Raises:
        InvalidScheduleError: if total_steps <= warmup_steps
    """
    if total_steps <= cfg.warmup_steps:
        raise InvalidScheduleError(
            f"total_steps ({total_steps}) must exceed warmup_steps ({cfg.warmup_steps})"
        )
    if not 0 <= step <= total_steps:
        raise ValueError(f"Step {step} outside [0, {total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (total_steps - cfg.warmup_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr_now: float,
    cfg: TrainConfig,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    One AdamW update of a single array; ``step`` is the 1-based update count.

    Weight decay is decoupled: param <- param - lr * wd * param, applied before the adaptive step.

    Returns:
        Tuple of (new param, new first moment, new second moment)
    """
    beta1, beta2 = cfg.adam_beta1, cfg.adam_beta2
    decayed = param - lr_now * cfg.weight_decay * param
    m_new = beta1 * m + (1.0 - beta1) * grad
    v_new = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m_new / (1.0 - beta1 ** step)
    v_hat = v_new / (1.0 - beta2 ** step)
    updated = decayed - lr_now * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return updated, m_new, v_new


def adamw_step(
    params: HeadParams,
    grads: HeadParams,
    state: OptimizerState,
    lr_now: float,
    cfg: TrainConfig,
) -> Tuple[HeadParams, OptimizerState]:
    """
    Apply AdamW to every parameter block.

    Raises:
        NonFiniteGradientError: before any block is touched, naming the first offending block
    """
    for name in BLOCK_ORDER:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(name)

    step = state.step + 1
    blocks: Dict[str, np.ndarray] = {}
    m: Dict[str, np.ndarray] = {}
    v: Dict[str, np.ndarray] = {}
    for name in BLOCK_ORDER:
        blocks[name], m[name], v[name] = adamw_update(
            params[name], grads[name], state.m[name], state.v[name], step, lr_now, cfg
        )
    return HeadParams(dims=params.dims, blocks=blocks), OptimizerState(step=step, m=m, v=v)


def apply_role_masking(item: GridTuple, rng: np.random.Generator, cfg: TrainConfig) -> GridTuple:
    """
    Black out background tokens per slot with role-specific probability (anchor, positive,
    distractor). Draws are taken in slot order: anchor, positives, distractors.
    """
    probs = cfg.mask_probs

    def maybe_mask(grid: TokenGrid, p: float) -> TokenGrid:
        if rng.random() < p:
            return grid.masked_background()
        return grid

    return GridTuple(
        identity_id=item.identity_id,
        anchor=maybe_mask(item.anchor, probs["anchor"]),
        positives=[maybe_mask(grid, probs["positive"]) for grid in item.positives],
        distractors=[maybe_mask(grid, probs["distractor"]) for grid in item.distractors],
        severities=list(item.severities),
        kind=item.kind,
    )


def apply_token_jitter(item: GridTuple, rng: np.random.Generator, sigma: float) -> GridTuple:
    """Additive Gaussian jitter on every token of every slot; the token-level photometric analogue."""
    if sigma <= 0:
        return item

    def jitter(grid: TokenGrid) -> TokenGrid:
        return TokenGrid(tokens=grid.tokens + rng.normal(0.0, sigma, size=grid.tokens.shape), fg_mask=grid.fg_mask)

    return GridTuple(
        identity_id=item.identity_id,
        anchor=jitter(item.anchor),
        positives=[jitter(grid) for grid in item.positives],
        distractors=[jitter(grid) for grid in item.distractors],
        severities=list(item.severities),
        kind=item.kind,
    )


@dataclass(frozen=True)
class TupleSpec:
    """Which manifest samples form one tuple; grids are rendered when the batch is assembled."""

    identity_id: int
    anchor_view: int
    kind: str


@dataclass
class TrainResult:
    params: HeadParams
    log: List[StepRecord] = field(default_factory=list)
    n_tokens: int = 0
    elapsed: float = 0.0

    @property
    def final(self) -> Optional[StepRecord]:
        return self.log[-1] if self.log else None


def chunk_unique(items: List[TupleSpec], size: int) -> List[List[TupleSpec]]:
    """
    Split an ordered tuple list into batches of at most ``size`` with each identity at most once
    per batch; a repeated identity is deferred to the next batch.
    """
    batches: List[List[TupleSpec]] = []
    queue: Deque[TupleSpec] = deque(items)
    while queue:
        current: List[TupleSpec] = []
        seen = set()
        deferred: List[TupleSpec] = []
        while queue and len(current) < size:
            item = queue.popleft()
            if item.identity_id in seen:
                deferred.append(item)
                continue
            current.append(item)
            seen.add(item.identity_id)
        queue.extendleft(reversed(deferred))
        batches.append(current)
    return batches


class TrainingService:
    """Trains the MAP head on the train split of a synthetic world."""

    def __init__(self, cfg: TrainConfig, loss_cfg: LossConfig):
        self.cfg = cfg
        self.loss_cfg = loss_cfg
        self.loss = LossService(loss_cfg, cfg.loss_variant)

    # --- epoch assembly ------------------------------------------------------------------------

    def part_identities(self, train_ids: List[int]) -> List[int]:
        count = int(round(self.cfg.part_edit_fraction * len(train_ids)))
        if count == 0:
            return []
        chosen = substream(self.cfg.seed, "part-identities").choice(len(train_ids), size=count, replace=False)
        return sorted(train_ids[i] for i in chosen)

    def epoch_plan(self, world: SynthWorld, train_ids: List[int], part_ids: List[int], epoch: int) -> List[List[TupleSpec]]:
        """Shuffled object tuples for every train identity plus upsampled part-edit tuples, batched."""
        items: List[TupleSpec] = []
        for identity in train_ids:
            n_views = len(world.views(identity))
            view = int(substream(self.cfg.seed, "anchor", epoch, identity).integers(n_views))
            items.append(TupleSpec(identity_id=identity, anchor_view=view, kind="object"))
        for _ in range(self.cfg.part_upsample):
            for identity in part_ids:
                items.append(TupleSpec(identity_id=identity, anchor_view=0, kind="part"))

        order = substream(self.cfg.seed, "shuffle", epoch).permutation(len(items))
        return chunk_unique([items[i] for i in order], self.cfg.batch_identities)

    def build_tuple(self, world: SynthWorld, spec: TupleSpec) -> GridTuple:
        views = world.views(spec.identity_id)
        anchor = next(r for r in views if r.view_index == spec.anchor_view)
        positives = [r for r in views if r.view_index != spec.anchor_view]
        if spec.kind == "part":
            distractors = world.part_edits(spec.identity_id)
        else:
            distractors = world.distractors(spec.identity_id, view_index=spec.anchor_view, sources=world.train_sources)
        return GridTuple(
            identity_id=spec.identity_id,
            anchor=world.grid(anchor),
            positives=[world.grid(r) for r in positives],
            distractors=[world.grid(r) for r in distractors],
            severities=[r.oracle_severity if r.role == Role.PART_EDIT else 0.0 for r in distractors],
            kind=spec.kind,
        )

    def augment(self, tuples: List[GridTuple], step: int) -> List[GridTuple]:
        mask_rng = substream(self.cfg.seed, "masking", step)
        jitter_rng = substream(self.cfg.seed, "jitter", step)
        masked = [apply_role_masking(item, mask_rng, self.cfg) for item in tuples]
        return [apply_token_jitter(item, jitter_rng, self.cfg.jitter_sigma) for item in masked]

    # --- one step ------------------------------------------------------------------------------

    @staticmethod
    def stack(tuples: List[GridTuple]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, Tuple[int, int]]:
        """
        Flatten tuples into one grid array plus index maps.

        Returns:
            (tokens (B, T, D), pos_index (N, P), pos_valid, dis_index (N, K), dis_valid, (P, K))
            where index arrays point into the grid array and invalid slots point at row 0.
        """
        N = len(tuples)
        P = max(1, max(len(t.positives) for t in tuples))
        K = max(len(t.distractors) for t in tuples)
        grids: List[np.ndarray] = [t.anchor.tokens for t in tuples]
        pos_index = np.zeros((N, P), dtype=np.int64)
        pos_valid = np.zeros((N, P), dtype=bool)
        dis_index = np.zeros((N, K), dtype=np.int64)
        dis_valid = np.zeros((N, K), dtype=bool)
        for i, item in enumerate(tuples):
            for p, grid in enumerate(item.positives):
                pos_index[i, p] = len(grids)
                pos_valid[i, p] = True
                grids.append(grid.tokens)
            for k, grid in enumerate(item.distractors):
                dis_index[i, k] = len(grids)
                dis_valid[i, k] = True
                grids.append(grid.tokens)
        return np.stack(grids), pos_index, pos_valid, dis_index, dis_valid, (P, K)

    def step(self, params: HeadParams, tuples: List[GridTuple]):
        """Forward, loss and backward for one batch; returns (loss output, parameter gradients)."""
        tokens, pos_index, pos_valid, dis_index, dis_valid, _ = self.stack(tuples)
        N = len(tuples)
        head = MAPHead(params)
        Z, cache = head.forward(tokens)

        batch = TupleBatch(
            anchors=Z[:N],
            positives=np.where(pos_valid[:, :, None], Z[pos_index], 0.0),
            pos_valid=pos_valid,
            distractors=np.where(dis_valid[:, :, None], Z[dis_index], 0.0),
            dis_valid=dis_valid,
        )
        severity = np.zeros(dis_valid.shape)
        for i, item in enumerate(tuples):
            severity[i, : len(item.severities)] = item.severities
        oracle = OracleLabels(severity=severity)

        output = self.loss.compute(batch, oracle)

        grad_z = np.zeros_like(Z)
        grad_z[:N] += output.grads.anchors
        np.add.at(grad_z, pos_index[pos_valid], output.grads.positives[pos_valid])
        np.add.at(grad_z, dis_index[dis_valid], output.grads.distractors[dis_valid])
        param_grads, _ = head.backward(cache, grad_z)
        return output, param_grads

    # --- loop ----------------------------------------------------------------------------------

    def train(self, world: SynthWorld, split: str = "train") -> TrainResult:
        """
        Run the full schedule. Deterministic given the train seed and the world manifest.

        Raises:
            TrainingDivergedError: on the first non-finite loss, with its step index
        """
        cfg = self.cfg
        if cfg.head_width != world.cfg.token_dim:
            raise ConfigError(f"head_width ({cfg.head_width}) must equal token_dim ({world.cfg.token_dim})")

        dims = HeadDims(width=cfg.head_width, heads=cfg.head_heads, out=cfg.head_out)
        params = init_head_params(dims, substream(cfg.seed, "init"))
        n_tokens = world.cfg.tokens_fg + world.cfg.tokens_bg
        result = TrainResult(params=params, n_tokens=n_tokens)
        if cfg.epochs == 0:
            logger.info("epochs = 0: returning the initialized head")
            return result

        train_ids = world.identities(split)
        part_ids = self.part_identities(train_ids)
        plans = [self.epoch_plan(world, train_ids, part_ids, epoch) for epoch in range(cfg.epochs)]
        total_steps = sum(len(plan) for plan in plans)
        lr_at(0, cfg, total_steps)
        logger.info(
            f"Training {self.loss.variant.value} on {len(train_ids)} identities "
            f"({len(part_ids)} with part edits) for {cfg.epochs} epochs, {total_steps} steps"
        )

        state = OptimizerState.zeros(params)
        start = time.perf_counter()
        global_step = 0
        try:
            for epoch, plan in enumerate(plans):
                epoch_losses: List[float] = []
                for specs in plan:
                    tuples = self.augment([self.build_tuple(world, spec) for spec in specs], global_step)
                    output, grads = self.step(params, tuples)
                    if not np.isfinite(output.value):
                        raise TrainingDivergedError(global_step, output.value)

                    lr_now = lr_at(global_step + 1, cfg, total_steps)
                    params, state = adamw_step(params, grads, state, lr_now, cfg)

                    components = dict(output.components)
                    record = StepRecord(
                        step=global_step,
                        epoch=epoch,
                        lr=lr_now,
                        loss=output.value,
                        disc=components.pop("disc", 0.0),
                        rank=components.pop("rank", 0.0),
                        cohesion=components.pop("cohesion", 0.0),
                        extra=components,
                        diagnostics=output.diagnostics,
                    )
                    result.log.append(record)
                    epoch_losses.append(output.value)
                    logger.debug(f"step {global_step} lr={lr_now:.3e} loss={output.value:.4f}")
                    global_step += 1

                logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: mean loss {np.mean(epoch_losses):.4f}")

        except TrainingDivergedError as e:
            logger.error(f"Training diverged: {e}")
            raise

        result.params = params
        result.elapsed = time.perf_counter() - start
        logger.info(f"Training finished in {result.elapsed:.1f}s")
        return result


def train(world: SynthWorld, cfg: TrainConfig, loss_cfg: Optional[LossConfig] = None) -> TrainResult:
    return TrainingService(cfg, loss_cfg or LossConfig()).train(world)
