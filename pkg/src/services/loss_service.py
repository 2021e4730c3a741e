import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from ..models.batch import BatchGrads, GradCheckReport, LossOutput, OracleLabels, TupleBatch
from ..models.config import LossConfig, LossVariant
from ..models.errors import (
    DegeneratePrototypeError,
    DimensionMismatchError,
    EmptyNegativePoolError,
    MissingOracleError,
    NearIDError,
    NoValidPositiveError,
)
from ..utils.geometry import ZERO_NORM, check_temperature, normalize_backward, normalize_rows

logger = logging.getLogger(__name__)

# Severity gap below which two distractors count as tied and form no RankNet pair.
SEVERITY_TIE = 1e-9

LossFn = Callable[[TupleBatch, LossConfig], LossOutput]


@dataclass
class _Prepared:
    """Normalized batch views and cosine matrices shared by every loss."""

    A: np.ndarray
    a_norms: np.ndarray
    G: np.ndarray
    g_norms: np.ndarray
    R: np.ndarray
    r_norms: np.ndarray
    pool: np.ndarray        # (M, d) flattened valid positives, row-major over (row, slot)
    owner: np.ndarray       # (M,) row of each pool entry
    slot: np.ndarray        # (M,) positive slot of each pool entry
    index_of: np.ndarray    # (N, P) pool index of (row, slot), -1 where invalid
    cos_g: np.ndarray       # (N, M) anchor-to-pool cosines
    cos_r: np.ndarray       # (N, K) anchor-to-own-distractor cosines (0 where invalid)

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    @property
    def pool_size(self) -> int:
        return self.pool.shape[0]

    def own_mask(self) -> np.ndarray:
        return self.owner[None, :] == np.arange(self.n_rows)[:, None]


def _prepare(batch: TupleBatch) -> _Prepared:
    A, a_norms = normalize_rows(batch.anchors)
    G, g_norms = normalize_rows(batch.positives, batch.pos_valid)
    R, r_norms = normalize_rows(batch.distractors, batch.dis_valid)
    owner, slot = np.nonzero(batch.pos_valid)
    pool = G[owner, slot]
    index_of = np.full(batch.pos_valid.shape, -1, dtype=np.int64)
    index_of[owner, slot] = np.arange(owner.size)
    cos_g = A @ pool.T
    cos_r = np.where(batch.dis_valid, np.einsum("nd,nkd->nk", A, R), 0.0)
    return _Prepared(A, a_norms, G, g_norms, R, r_norms, pool, owner, slot, index_of, cos_g, cos_r)


def _backprop(batch: TupleBatch, prep: _Prepared, d_cos_g: np.ndarray, d_cos_r: np.ndarray) -> BatchGrads:
    """Chain cosine-matrix gradients back to the raw (pre-normalization) embeddings."""
    d_cos_r = np.where(batch.dis_valid, d_cos_r, 0.0)
    dA = d_cos_g @ prep.pool + np.einsum("nk,nkd->nd", d_cos_r, prep.R)
    dG = np.zeros_like(prep.G)
    dG[prep.owner, prep.slot] = d_cos_g.T @ prep.A
    dR = d_cos_r[:, :, None] * prep.A[:, None, :]

    grads = BatchGrads(
        anchors=normalize_backward(prep.A, prep.a_norms, dA),
        positives=normalize_backward(prep.G, prep.g_norms, dG),
        distractors=normalize_backward(prep.R, prep.r_norms, dR),
    )
    grads.positives[~batch.pos_valid] = 0.0
    grads.distractors[~batch.dis_valid] = 0.0
    return grads


def _require_positive_per_row(batch: TupleBatch) -> None:
    empty = np.flatnonzero(~batch.pos_valid.any(axis=1))
    if empty.size:
        raise NoValidPositiveError(f"Anchor row(s) {empty.tolist()} have no valid positive")


def _slot_weights(valid: np.ndarray) -> np.ndarray:
    """
    Weights realizing (1/S') * sum_s mean_{rows valid at s}: entry (i, s) = 1 / (count_s * S').

    S' counts the slots with at least one valid row; all-invalid inputs give all-zero weights.
    """
    counts = valid.sum(axis=0)
    active_slots = int(np.count_nonzero(counts))
    if active_slots == 0:
        return np.zeros(valid.shape, dtype=np.float64)
    safe = np.where(counts > 0, counts, 1)
    return valid / (safe[None, :] * active_slots)


def _negative_pool(prep: _Prepared, logits_g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row batch-negative mask, its log-sum-exp (0 for empty rows) and the row softmax over it."""
    neg_mask = ~prep.own_mask()
    has_neg = neg_mask.any(axis=1)
    weights = np.where(has_neg[:, None], neg_mask, 1.0)
    lse = np.where(has_neg, logsumexp(logits_g, axis=1, b=weights), 0.0)
    probs = np.where(neg_mask, np.exp(logits_g - lse[:, None]), 0.0)
    return neg_mask, lse, probs


def _as_float(value: float) -> float:
    return float(np.asarray(value, dtype=np.float64))


# --- NearID objective -------------------------------------------------------------------------


def disc_loss(batch: TupleBatch, cfg: LossConfig) -> LossOutput:
    """
    Softmax cross-entropy of each valid positive against the global positive pool plus the
    anchor's own valid distractors, averaged over anchors per positive slot and then over slots.

    The other positives of the same anchor stay in the denominator.

    Raises:
        NoValidPositiveError: if an anchor row has no valid positive
    """
    tau = check_temperature(cfg.tau)
    _require_positive_per_row(batch)
    prep = _prepare(batch)
    M = prep.pool_size

    logits = np.concatenate([prep.cos_g, prep.cos_r], axis=1) / tau
    include = np.concatenate([np.ones((batch.n_rows, M)), batch.dis_valid.astype(np.float64)], axis=1)
    lse = logsumexp(logits, axis=1, b=include)
    probs = np.where(include > 0, np.exp(logits - lse[:, None]), 0.0)

    weights = _slot_weights(batch.pos_valid)
    w = weights[prep.owner, prep.slot]
    own_logits = logits[prep.owner, np.arange(M)]
    value = float(np.sum(w * (lse[prep.owner] - own_logits)))

    d_logits = weights.sum(axis=1)[:, None] * probs
    d_logits[prep.owner, np.arange(M)] -= w
    grads = _backprop(batch, prep, d_logits[:, :M] / tau, d_logits[:, M:] / tau)
    return LossOutput(value=value, grads=grads, components={"disc": value})


def batch_negative_lse(batch: TupleBatch, anchor_index: int, cfg: LossConfig) -> float:
    """Smooth maximum log sum exp(l(a_i, g)) over the pool positives that do not belong to anchor i."""
    tau = check_temperature(cfg.tau)
    if not 0 <= anchor_index < batch.n_rows:
        raise IndexError(f"Anchor index {anchor_index} out of range for {batch.n_rows} rows")
    prep = _prepare(batch)
    negatives = prep.owner != anchor_index
    if not negatives.any():
        raise EmptyNegativePoolError(f"Anchor {anchor_index} has no batch negatives")
    return _as_float(logsumexp(prep.cos_g[anchor_index, negatives] / tau))


def rank_loss(batch: TupleBatch, cfg: LossConfig) -> LossOutput:
    """
    Softplus ranking term keeping every valid distractor above the batch-negative log-sum-exp:
    (1/K') sum_k mean_i log(1 + exp(LSE_i - l(a_i, r_ik))).

    Rows with no batch negatives or no valid distractors contribute nothing and are counted in
    ``diagnostics["rank_rows_skipped"]``.
    """
    tau = check_temperature(cfg.tau)
    prep = _prepare(batch)
    logits_g = prep.cos_g / tau
    logits_r = prep.cos_r / tau

    neg_mask, lse, probs = _negative_pool(prep, logits_g)
    active = batch.dis_valid & neg_mask.any(axis=1)[:, None]
    skipped = int(np.count_nonzero(~active.any(axis=1)))
    if skipped:
        logger.debug(f"rank_loss skipped {skipped} row(s) without negatives or distractors")

    v = _slot_weights(active)
    x = np.where(active, lse[:, None] - logits_r, 0.0)
    value = float(np.sum(v * np.logaddexp(0.0, x)))

    sig = v * expit(x)
    d_logits_r = -sig
    d_logits_g = sig.sum(axis=1)[:, None] * probs
    grads = _backprop(batch, prep, d_logits_g / tau, d_logits_r / tau)
    return LossOutput(value=value, grads=grads, components={"rank": value}, diagnostics={"rank_rows_skipped": skipped})


def rank_loss_cross_entropy(batch: TupleBatch, cfg: LossConfig) -> float:
    """Value of the ranking term written as -log softmax of each distractor against its batch negatives."""
    tau = check_temperature(cfg.tau)
    prep = _prepare(batch)
    logits_g = prep.cos_g / tau
    logits_r = prep.cos_r / tau
    neg_mask = ~prep.own_mask()
    active = batch.dis_valid & neg_mask.any(axis=1)[:, None]
    v = _slot_weights(active)

    total = 0.0
    for i, k in zip(*np.nonzero(active)):
        candidates = np.concatenate([[logits_r[i, k]], logits_g[i, neg_mask[i]]])
        total += v[i, k] * -(logits_r[i, k] - logsumexp(candidates))
    return float(total)


def cohesion_loss(batch: TupleBatch, cfg: Optional[LossConfig] = None) -> LossOutput:
    """
    Mean cosine distance of each valid positive to its row's l2-normalized prototype, averaged
    over all rows; rows with fewer than two valid positives contribute zero.

    Raises:
        DegeneratePrototypeError: if the positives of a row sum to (numerically) zero
    """
    G, g_norms = normalize_rows(batch.positives, batch.pos_valid)
    counts = batch.pos_valid.sum(axis=1)
    rows = counts >= 2
    S = G.sum(axis=1)
    s_norm = np.linalg.norm(S, axis=1)
    degenerate = np.flatnonzero(rows & (s_norm < ZERO_NORM))
    if degenerate.size:
        raise DegeneratePrototypeError(f"Positives of row(s) {degenerate.tolist()} cancel out")

    N = batch.n_rows
    safe_counts = np.maximum(counts, 1)
    safe_norm = np.where(rows, s_norm, 1.0)
    per_row = np.where(rows, np.maximum(1.0 - s_norm / safe_counts, 0.0), 0.0)
    value = float(per_row.mean())

    prototype = S / safe_norm[:, None]
    scale = np.where(rows, 1.0 / (safe_counts * N), 0.0)
    dG = -(scale[:, None] * prototype)[:, None, :] * batch.pos_valid[:, :, None]
    grads = BatchGrads(
        anchors=np.zeros_like(batch.anchors, dtype=np.float64),
        positives=normalize_backward(G, g_norms, dG),
        distractors=np.zeros_like(batch.distractors, dtype=np.float64),
    )
    grads.positives[~batch.pos_valid] = 0.0
    return LossOutput(value=value, grads=grads, components={"cohesion": value})


def nearid_loss(batch: TupleBatch, cfg: LossConfig, oracle: Optional[OracleLabels] = None) -> LossOutput:
    """disc + alpha * rank (+ beta * cohesion). Oracle labels are accepted and ignored."""
    disc = disc_loss(batch, cfg)
    value = disc.value
    grads = disc.grads
    components = {"disc": disc.value, "rank": 0.0, "cohesion": 0.0}
    diagnostics: Dict[str, int] = {}

    if cfg.alpha > 0:
        rank = rank_loss(batch, cfg)
        value += cfg.alpha * rank.value
        grads.add_scaled(rank.grads, cfg.alpha)
        components["rank"] = rank.value
        diagnostics.update(rank.diagnostics)

    if cfg.beta > 0:
        cohesion = cohesion_loss(batch, cfg)
        value += cfg.beta * cohesion.value
        grads.add_scaled(cohesion.grads, cfg.beta)
        components["cohesion"] = cohesion.value

    return LossOutput(value=value, grads=grads, components=components, diagnostics=diagnostics)


# --- Ablation objectives ----------------------------------------------------------------------


def _symmetric_infonce(batch: TupleBatch, cfg: LossConfig, with_distractors: bool) -> LossOutput:
    """Symmetric softmax CE over one positive per anchor (the first valid slot)."""
    tau = check_temperature(cfg.tau)
    _require_positive_per_row(batch)
    prep = _prepare(batch)
    N = batch.n_rows
    first = np.argmax(batch.pos_valid, axis=1)
    selected = prep.index_of[np.arange(N), first]

    S = prep.cos_g[:, selected] / tau
    logits_r = prep.cos_r / tau
    eye = np.eye(N)

    if with_distractors:
        row_logits = np.concatenate([S, logits_r], axis=1)
        row_weights = np.concatenate([np.ones((N, N)), batch.dis_valid.astype(np.float64)], axis=1)
        row_lse = logsumexp(row_logits, axis=1, b=row_weights)
    else:
        row_lse = logsumexp(S, axis=1)
    col_lse = logsumexp(S, axis=0)
    diag = np.diag(S)
    value = float(0.5 * (np.mean(row_lse - diag) + np.mean(col_lse - diag)))

    d_S = (np.exp(S - row_lse[:, None]) - eye) / (2 * N) + (np.exp(S - col_lse[None, :]) - eye) / (2 * N)
    d_logits_r = np.zeros_like(logits_r)
    if with_distractors:
        d_logits_r = np.where(batch.dis_valid, np.exp(logits_r - row_lse[:, None]), 0.0) / (2 * N)

    d_cos_g = np.zeros_like(prep.cos_g)
    d_cos_g[:, selected] = d_S / tau
    grads = _backprop(batch, prep, d_cos_g, d_logits_r / tau)
    name = "infonce_rneg" if with_distractors else "infonce_sym"
    return LossOutput(value=value, grads=grads, components={name: value})


def oracle_rank_loss(batch: TupleBatch, cfg: LossConfig, oracle: Optional[OracleLabels]) -> LossOutput:
    """
    RankNet on oracle-ordered distractor pairs of the same anchor: mean over ordered pairs
    (severity_k > severity_l) of -log sigmoid(l_k - l_l - m), then mean over all rows.

    Rows with fewer than two valid distractors, or only tied severities, contribute zero.
    """
    if oracle is None:
        raise MissingOracleError("Oracle-ranked objectives need OracleLabels")
    if oracle.severity.shape != batch.dis_valid.shape:
        raise DimensionMismatchError(
            f"Oracle severities {oracle.severity.shape} do not match distractors {batch.dis_valid.shape}"
        )
    tau = check_temperature(cfg.tau)
    prep = _prepare(batch)
    logits_r = prep.cos_r / tau
    N = batch.n_rows

    total = 0.0
    skipped = 0
    d_logits_r = np.zeros_like(logits_r)
    for i in range(N):
        valid = np.flatnonzero(batch.dis_valid[i])
        if valid.size < 2:
            skipped += 1
            continue
        severity = oracle.severity[i, valid]
        hi, lo = np.nonzero(severity[:, None] > severity[None, :] + SEVERITY_TIE)
        if hi.size == 0:
            skipped += 1
            continue
        x = logits_r[i, valid[hi]] - logits_r[i, valid[lo]] - cfg.margin_m
        total += float(np.mean(np.logaddexp(0.0, -x)))
        g = -expit(-x) / hi.size
        np.add.at(d_logits_r[i], valid[hi], g)
        np.add.at(d_logits_r[i], valid[lo], -g)

    value = total / N
    grads = _backprop(batch, prep, np.zeros_like(prep.cos_g), d_logits_r / (N * tau))
    return LossOutput(
        value=value,
        grads=grads,
        components={"oracle_rank": value},
        diagnostics={"oracle_rows_skipped": skipped},
    )


def _siglip_bce(batch: TupleBatch, cfg: LossConfig) -> LossOutput:
    """Pairwise sigmoid BCE (no bias): own pool positives labelled +1, other pool entries and distractors -1."""
    tau = check_temperature(cfg.tau)
    _require_positive_per_row(batch)
    prep = _prepare(batch)
    N = batch.n_rows
    logits_g = prep.cos_g / tau
    logits_r = prep.cos_r / tau

    labels = np.where(prep.own_mask(), 1.0, -1.0)
    n_terms = prep.pool_size + batch.dis_valid.sum(axis=1)
    loss_g = np.logaddexp(0.0, -labels * logits_g).sum(axis=1)
    loss_r = np.where(batch.dis_valid, np.logaddexp(0.0, logits_r), 0.0).sum(axis=1)
    value = float(np.mean((loss_g + loss_r) / n_terms))

    scale = 1.0 / (N * n_terms)
    d_logits_g = -labels * expit(-labels * logits_g) * scale[:, None]
    d_logits_r = np.where(batch.dis_valid, expit(logits_r), 0.0) * scale[:, None]
    grads = _backprop(batch, prep, d_logits_g / tau, d_logits_r / tau)
    return LossOutput(value=value, grads=grads, components={"siglip_bce": value})


def _circle(batch: TupleBatch, cfg: LossConfig) -> LossOutput:
    """
    Circle loss per anchor with self-paced weights (relaxation m, scale 1/tau). Positives are the
    anchor's own pool entries; negatives are the rest of the pool plus its valid distractors.
    """
    tau = check_temperature(cfg.tau)
    _require_positive_per_row(batch)
    prep = _prepare(batch)
    N = batch.n_rows
    gamma = 1.0 / tau
    m = cfg.circle_relaxation
    own = prep.own_mask()

    d_cos_g = np.zeros_like(prep.cos_g)
    d_cos_r = np.zeros_like(prep.cos_r)
    total = 0.0
    skipped = 0
    for i in range(N):
        pos_idx = np.flatnonzero(own[i])
        neg_idx = np.flatnonzero(~own[i])
        dis_idx = np.flatnonzero(batch.dis_valid[i])
        if neg_idx.size + dis_idx.size == 0:
            skipped += 1
            continue
        sp = prep.cos_g[i, pos_idx]
        sn = np.concatenate([prep.cos_g[i, neg_idx], prep.cos_r[i, dis_idx]])

        ap = np.maximum(0.0, 1.0 + m - sp)
        an = np.maximum(0.0, sn + m)
        up = -gamma * ap * (sp - (1.0 - m))
        un = gamma * an * (sn - m)
        lse_p = logsumexp(up)
        lse_n = logsumexp(un)
        x = lse_p + lse_n
        total += float(np.logaddexp(0.0, x))

        s = expit(x) / N
        dsp = s * np.exp(up - lse_p) * -gamma * (ap - (sp - (1.0 - m)) * (ap > 0))
        dsn = s * np.exp(un - lse_n) * gamma * (an + (sn - m) * (an > 0))
        d_cos_g[i, pos_idx] = dsp
        d_cos_g[i, neg_idx] = dsn[: neg_idx.size]
        d_cos_r[i, dis_idx] = dsn[neg_idx.size:]

    value = total / N
    grads = _backprop(batch, prep, d_cos_g, d_cos_r)
    return LossOutput(value=value, grads=grads, components={"circle": value}, diagnostics={"circle_rows_skipped": skipped})


def hinge_rank_loss(batch: TupleBatch, cfg: LossConfig) -> LossOutput:
    """[max_b l(a_i, b) - l(a_i, r_ik) + m]_+ over the batch negatives b, averaged like the softplus rank term."""
    tau = check_temperature(cfg.tau)
    prep = _prepare(batch)
    logits_g = prep.cos_g / tau
    logits_r = prep.cos_r / tau
    neg_mask = ~prep.own_mask()
    has_neg = neg_mask.any(axis=1)
    active = batch.dis_valid & has_neg[:, None]
    skipped = int(np.count_nonzero(~active.any(axis=1)))

    masked = np.where(neg_mask, logits_g, -np.inf)
    hardest = np.argmax(np.where(has_neg[:, None], masked, 0.0), axis=1)
    hardest_logit = logits_g[np.arange(batch.n_rows), hardest]

    v = _slot_weights(active)
    h = np.where(active, hardest_logit[:, None] - logits_r + cfg.margin_m, 0.0)
    on = (h > 0) & active
    value = float(np.sum(v * np.maximum(h, 0.0)))

    d_logits_r = -v * on
    d_logits_g = np.zeros_like(logits_g)
    d_logits_g[np.arange(batch.n_rows), hardest] = (v * on).sum(axis=1)
    grads = _backprop(batch, prep, d_logits_g / tau, d_logits_r / tau)
    return LossOutput(value=value, grads=grads, components={"hinge_rank": value}, diagnostics={"hinge_rows_skipped": skipped})


def _combine(base: LossOutput, extra: LossOutput, weight: float) -> LossOutput:
    components = dict(base.components)
    components.update(extra.components)
    diagnostics = dict(base.diagnostics)
    diagnostics.update(extra.diagnostics)
    grads = base.grads
    grads.add_scaled(extra.grads, weight)
    return LossOutput(value=base.value + weight * extra.value, grads=grads, components=components, diagnostics=diagnostics)


def ablation_loss(
    variant: LossVariant,
    batch: TupleBatch,
    cfg: LossConfig,
    oracle: Optional[OracleLabels] = None,
) -> LossOutput:
    """
    Evaluate one of the ablation objectives.

    Args:
        variant: Any LossVariant except NEARID
        batch: Training tuples
        cfg: Loss hyperparameters (alpha weights the ranking part of composite variants)
        oracle: Distractor severities, required by the oracle-ranked variants

    Returns:
        LossOutput with value, gradients and per-component values
    """
    variant = LossVariant(variant)
    if variant == LossVariant.INFONCE_SYM:
        return _symmetric_infonce(batch, cfg, with_distractors=False)
    if variant == LossVariant.INFONCE_RNEG:
        return _symmetric_infonce(batch, cfg, with_distractors=True)
    if variant == LossVariant.INFONCE_ORACLE_RANK:
        return _combine(_symmetric_infonce(batch, cfg, False), oracle_rank_loss(batch, cfg, oracle), cfg.alpha)
    if variant == LossVariant.INFONCE_RNEG_ORACLE_RANK:
        return _combine(_symmetric_infonce(batch, cfg, True), oracle_rank_loss(batch, cfg, oracle), cfg.alpha)
    if variant == LossVariant.SIGLIP_BCE_RANK:
        return _combine(_siglip_bce(batch, cfg), rank_loss(batch, cfg), cfg.alpha)
    if variant == LossVariant.CIRCLE_RANK:
        return _combine(_circle(batch, cfg), hinge_rank_loss(batch, cfg), cfg.alpha)
    raise ValueError(f"{variant.value} is not an ablation objective; use nearid_loss")


class LossService:
    """Selects and evaluates the configured training objective."""

    def __init__(self, cfg: LossConfig, variant: LossVariant = LossVariant.NEARID):
        self.cfg = cfg
        self.variant = LossVariant(variant)
        logger.info(f"Loss: {self.variant.value} (alpha={cfg.alpha}, beta={cfg.beta}, tau={cfg.tau})")

    @property
    def needs_oracle(self) -> bool:
        return self.variant in (LossVariant.INFONCE_ORACLE_RANK, LossVariant.INFONCE_RNEG_ORACLE_RANK)

    def compute(self, batch: TupleBatch, oracle: Optional[OracleLabels] = None) -> LossOutput:
        if self.variant == LossVariant.NEARID:
            return nearid_loss(batch, self.cfg, oracle)
        return ablation_loss(self.variant, batch, self.cfg, oracle)


def grad_check(
    lossfn: LossFn,
    batch: TupleBatch,
    cfg: LossConfig,
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """
    Compare analytic gradients with central finite differences on every embedding coordinate.

    Relative error per coordinate is |a - fd| / max(|a|, |fd|, 1e-8). Failures are reported in
    the returned GradCheckReport, never raised.
    """
    try:
        analytic = lossfn(batch, cfg).grads
    except NearIDError as e:
        logger.error(f"Gradient check could not evaluate the loss: {e}")
        return GradCheckReport(max_rel_error=float("inf"), n_coordinates=0, worst=None, tolerance=tolerance)

    worst_error = 0.0
    worst: Optional[Tuple[str, Tuple[int, ...]]] = None
    n_coordinates = 0
    for name in ("anchors", "positives", "distractors"):
        base = np.asarray(getattr(batch, name), dtype=np.float64)
        grad = getattr(analytic, name)
        for index in np.ndindex(base.shape):
            plus = base.copy()
            minus = base.copy()
            plus[index] += step
            minus[index] -= step
            f_plus = lossfn(batch.replace(**{name: plus}), cfg).value
            f_minus = lossfn(batch.replace(**{name: minus}), cfg).value
            numeric = (f_plus - f_minus) / (2.0 * step)
            exact = grad[index]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            n_coordinates += 1
            if error > worst_error:
                worst_error = error
                worst = (name, index)

    report = GradCheckReport(max_rel_error=worst_error, n_coordinates=n_coordinates, worst=worst, tolerance=tolerance)
    if not report.passed:
        logger.warning(f"Gradient check failed: max relative error {worst_error:.3e} at {worst}")
    return report
