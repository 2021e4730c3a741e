import logging
from collections import OrderedDict
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import eigh

from .. import __version__
from ..models.config import EvalOptions, KernelType, SourceFilter
from ..models.errors import (
    ConstantSeriesError,
    EmptyInputError,
    EmptyRecordsError,
    InsufficientPointsError,
    NoValidGroupsError,
)
from ..models.report import (
    Direction,
    EditScore,
    EvalReport,
    HierarchySummary,
    Histogram,
    MarginRecord,
    Provenance,
    SourceSummary,
)
from ..models.world import SampleRecord
from ..utils.geometry import l2_normalize
from ..utils.stats import fisher_mean, pearson
from .index_service import recall_at_1
from .world_service import SynthWorld

logger = logging.getLogger(__name__)

Embedder = Callable[[np.ndarray], np.ndarray]
HISTOGRAM_RANGE = (-2.0, 2.0)
EMBED_CHUNK = 256


# --- margin protocol --------------------------------------------------------------------------


def directed_margins(
    positives: Sequence[np.ndarray],
    distractors: Sequence[Optional[np.ndarray]],
    identity_id: int = 0,
    source_id: Optional[int] = None,
) -> List[MarginRecord]:
    """
    Directed discriminability margins of one identity.

    For every view pair (i, j), i < j:
        i_to_j: s(p_i, p_j) - s(p_i, n_i)
        j_to_i: s(p_i, p_j) - s(p_j, n_j)
    A direction is emitted only when the anchoring view has a distractor. Fewer than two
    views give an empty list.
    """
    if len(distractors) != len(positives):
        raise ValueError("Need one (possibly missing) distractor per positive view")
    if len(positives) < 2:
        return []
    views = [l2_normalize(p) for p in positives]
    matched = [None if n is None else l2_normalize(n) for n in distractors]

    records: List[MarginRecord] = []
    for i in range(len(views)):
        for j in range(i + 1, len(views)):
            same = float(views[i] @ views[j])
            if matched[i] is not None:
                records.append(MarginRecord(
                    identity_id=identity_id, pair=(i, j), direction=Direction.I_TO_J,
                    delta=same - float(views[i] @ matched[i]), source_id=source_id,
                ))
            if matched[j] is not None:
                records.append(MarginRecord(
                    identity_id=identity_id, pair=(i, j), direction=Direction.J_TO_I,
                    delta=same - float(views[j] @ matched[j]), source_id=source_id,
                ))
    return records


def ssr_pa(records: Iterable[MarginRecord]) -> Tuple[float, float]:
    """
    SSR: fraction of identities whose every margin is strictly positive.
    PA: fraction of all margins that are strictly positive. A zero margin is a failure.
    """
    by_identity: Dict[int, List[bool]] = OrderedDict()
    for record in records:
        by_identity.setdefault(record.identity_id, []).append(record.delta > 0.0)
    if not by_identity:
        raise EmptyRecordsError("ssr_pa needs at least one margin record")
    outcomes = [ok for results in by_identity.values() for ok in results]
    ssr = sum(all(results) for results in by_identity.values()) / len(by_identity)
    pa = sum(outcomes) / len(outcomes)
    return float(ssr), float(pa)


def pool_sources(per_source: Sequence[Tuple[float, float, int]]) -> Tuple[float, float]:
    """Support-weighted (n-weighted) mean of per-source (ssr, pa, n)."""
    if not per_source:
        raise EmptyInputError("pool_sources needs at least one source")
    weights = np.array([n for _, _, n in per_source], dtype=np.float64)
    if np.any(weights <= 0):
        raise ValueError("Every source needs n > 0")
    ssr = np.array([s for s, _, _ in per_source])
    pa = np.array([p for _, p, _ in per_source])
    return float(weights @ ssr / weights.sum()), float(weights @ pa / weights.sum())


# --- correlation aggregation ------------------------------------------------------------------


def alignment(
    similarities: Sequence[float],
    scores: Sequence[float],
    groups: Sequence[int],
) -> float:
    """
    Per-group Pearson correlation between similarities and scores, aggregated with fisher_mean.

    Groups with fewer than two comparisons or a constant series are skipped.

    Raises:
        NoValidGroupsError: if no group yields a correlation
    """
    sims = np.asarray(similarities, dtype=np.float64)
    vals = np.asarray(scores, dtype=np.float64)
    keys = np.asarray(groups)
    if not (sims.shape == vals.shape == keys.shape):
        raise ValueError("similarities, scores and groups must have equal length")

    correlations: List[float] = []
    skipped = 0
    for group in sorted(set(keys.tolist())):
        members = keys == group
        if np.count_nonzero(members) < 2:
            skipped += 1
            continue
        try:
            correlations.append(pearson(sims[members], vals[members]))
        except ConstantSeriesError:
            skipped += 1
    if skipped:
        logger.warning(f"alignment skipped {skipped} group(s) with too few or constant comparisons")
    if not correlations:
        raise NoValidGroupsError("No group has a defined correlation")
    return fisher_mean(correlations)


# --- projection -------------------------------------------------------------------------------


def kpca_project(
    embeddings: Sequence[np.ndarray],
    kernel: KernelType = KernelType.LINEAR,
    gamma: Optional[float] = None,
) -> np.ndarray:
    """
    Two-dimensional kernel PCA coordinates.

    The kernel matrix is double-centered; the top two eigenvectors are scaled by the square root
    of their eigenvalues and each axis is signed so its largest-magnitude coordinate is positive.
    A kernel of rank < 2 yields a zero second axis.

    Args:
        embeddings: At least three vectors of equal dimension
        kernel: linear or rbf
        gamma: rbf width; defaults to 1 / dimension

    Returns:
        Array of shape (n, 2)
    """
    X = np.asarray([np.asarray(e, dtype=np.float64) for e in embeddings])
    if X.ndim != 2 or X.shape[0] < 3:
        raise InsufficientPointsError(f"kpca_project needs at least 3 points, got {len(X)}")
    n, d = X.shape

    if KernelType(kernel) == KernelType.RBF:
        g = gamma if gamma is not None else 1.0 / d
        sq = np.sum(X ** 2, axis=1)
        dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
        K = np.exp(-g * dist)
    else:
        K = X @ X.T

    row_mean = K.mean(axis=0)
    Kc = K - row_mean[None, :] - row_mean[:, None] + K.mean()
    Kc = 0.5 * (Kc + Kc.T)
    eigenvalues, eigenvectors = eigh(Kc)
    order = np.argsort(eigenvalues)[::-1][:2]
    tolerance = 1e-10 * max(1.0, float(np.abs(eigenvalues).max()))

    coords = np.zeros((n, 2))
    for axis, idx in enumerate(order):
        lam = eigenvalues[idx]
        if lam <= tolerance:
            logger.warning(f"Kernel rank below 2: axis {axis} zeroed (eigenvalue {lam:.3e})")
            continue
        column = eigenvectors[:, idx] * np.sqrt(lam)
        if column[np.argmax(np.abs(column))] < 0:
            column = -column
        coords[:, axis] = column
    return coords


# --- end-to-end evaluation --------------------------------------------------------------------


class EvaluationService:
    """Runs the full identity-discrimination protocol for one embedder on one world split."""

    def __init__(self, world: SynthWorld, embedder: Embedder, options: EvalOptions):
        self.world = world
        self.embedder = embedder
        self.options = options
        self._cache: Dict[str, np.ndarray] = {}

    def sources_in_scope(self) -> List[int]:
        if self.options.sources == SourceFilter.TRAIN:
            return self.world.train_sources
        if self.options.sources == SourceFilter.HELD_OUT:
            return self.world.held_out_sources
        return self.world.train_sources + self.world.held_out_sources

    def embed_records(self, records: Sequence[SampleRecord]) -> None:
        """Embed (and cache) every record not yet embedded, in fixed-size chunks."""
        pending = [r for r in records if r.sample_id not in self._cache]
        fg_mask = self.world.fg_mask()
        for start in range(0, len(pending), EMBED_CHUNK):
            chunk = pending[start:start + EMBED_CHUNK]
            tokens = self.world.grids(chunk)
            if self.options.fg_only:
                tokens = np.where(fg_mask[None, :, None], tokens, 0.0)
            for record, z in zip(chunk, self.embedder(tokens)):
                self._cache[record.sample_id] = np.asarray(z, dtype=np.float64)

    def embedding(self, record: SampleRecord) -> np.ndarray:
        return self._cache[record.sample_id]

    def _matched(self, identity: int, view: int, source: int) -> Optional[SampleRecord]:
        candidates = self.world.distractors(identity, view_index=view, sources=[source])
        candidates = sorted(candidates, key=lambda r: r.sample_id)
        return candidates[0] if candidates else None

    def margins(self, identities: List[int], sources: List[int], diagnostics: Dict[str, int]) -> Dict[int, List[MarginRecord]]:
        per_source: Dict[int, List[MarginRecord]] = {}
        for source in sources:
            records: List[MarginRecord] = []
            for identity in identities:
                views = self.world.views(identity)
                if len(views) < 2:
                    diagnostics["too_few_views"] = diagnostics.get("too_few_views", 0) + 1
                    continue
                matched = [self._matched(identity, v.view_index, source) for v in views]
                if all(m is None for m in matched):
                    diagnostics["missing_distractors"] = diagnostics.get("missing_distractors", 0) + 1
                    continue
                records.extend(directed_margins(
                    [self.embedding(v) for v in views],
                    [None if m is None else self.embedding(m) for m in matched],
                    identity_id=identity,
                    source_id=source,
                ))
            per_source[source] = records
        return per_source

    def hierarchy(self, identities: List[int], sources: List[int]) -> HierarchySummary:
        """Mean cosine of anchors to own positives, own matched distractors and other identities' views."""
        anchors = np.stack([self.embedding(self.world.views(i)[0]) for i in identities])
        owners: List[int] = []
        views: List[np.ndarray] = []
        for identity in identities:
            for record in self.world.views(identity):
                owners.append(identity)
                views.append(self.embedding(record))
        owner_arr = np.array(owners)
        cos = anchors @ np.stack(views).T

        positive: List[float] = []
        negative: List[float] = []
        distractor: List[float] = []
        for row, identity in enumerate(identities):
            own = owner_arr == identity
            own_views = cos[row, own]
            positive.extend(own_views[1:].tolist())
            negative.extend(cos[row, ~own].tolist())
            for record in self.world.distractors(identity, view_index=0, sources=sources):
                distractor.append(float(anchors[row] @ self.embedding(record)))

        return HierarchySummary(
            positive=float(np.mean(positive)) if positive else float("nan"),
            distractor=float(np.mean(distractor)) if distractor else float("nan"),
            batch_negative=float(np.mean(negative)) if negative else float("nan"),
        )

    def retrieval(self, identities: List[int], sources: List[int]) -> float:
        views = [r for i in identities for r in self.world.views(i)]
        distractors = [r for i in identities for r in self.world.distractors(i, sources=sources)]
        anchors = [self.world.views(i)[0] for i in identities]
        gallery = views + distractors
        return recall_at_1(
            queries=np.stack([self.embedding(r) for r in anchors]),
            query_ids=[r.sample_id for r in anchors],
            query_labels=[r.identity_id for r in anchors],
            gallery=np.stack([self.embedding(r) for r in gallery]),
            gallery_ids=[r.sample_id for r in gallery],
            gallery_labels=[r.identity_id for r in views] + [-1] * len(distractors),
        )

    def edit_alignment(self, identities: List[int], diagnostics: Dict[str, int]) -> Tuple[Dict[str, Optional[float]], List[EditScore]]:
        pair_sims: List[float] = []
        pair_sev: List[float] = []
        pair_human: List[float] = []
        pair_groups: List[int] = []
        full_sims: List[float] = []
        full_sev: List[float] = []
        full_groups: List[int] = []
        scores: List[EditScore] = []

        for identity in identities:
            views = self.world.views(identity)
            anchor = self.embedding(views[0])
            for edit in self.world.part_edits(identity):
                z = self.embedding(edit)
                sim = float(anchor @ z)
                pair_sims.append(sim)
                pair_sev.append(edit.oracle_severity)
                pair_human.append(edit.human_proxy)
                pair_groups.append(identity)
                scores.append(EditScore(
                    identity_id=identity, sample_id=edit.sample_id, severity=edit.oracle_severity,
                    human_proxy=edit.human_proxy, similarity=sim,
                ))
                for other in views[1:]:
                    full_sims.append(float(self.embedding(other) @ z))
                    full_sev.append(edit.oracle_severity)
                    full_groups.append(identity)

        results: Dict[str, Optional[float]] = {}
        for name, args in (
            ("m_o", (full_sims, full_sev, full_groups)),
            ("m_o_pair", (pair_sims, pair_sev, pair_groups)),
            ("m_h", (pair_sims, pair_human, pair_groups)),
        ):
            try:
                results[name] = alignment(*args)
            except NoValidGroupsError:
                logger.warning(f"{name} undefined: no identity has a valid correlation group")
                diagnostics[f"{name}_undefined"] = 1
                results[name] = None
        return results, scores

    def evaluate(self, split: str, provenance: Provenance) -> EvalReport:
        """
        Evaluate one split.

        Raises:
            MissingSplitError: if the split has no identities
        """
        identities = self.world.identities(split)
        sources = self.sources_in_scope()
        if not sources:
            raise EmptyRecordsError(f"Source filter '{self.options.sources.value}' selects no distractor sources")
        diagnostics: Dict[str, int] = {}

        needed: List[SampleRecord] = []
        for identity in identities:
            needed.extend(self.world.views(identity))
            needed.extend(self.world.distractors(identity, sources=sources))
            needed.extend(self.world.part_edits(identity))
        self.embed_records(needed)
        logger.info(f"Evaluating split '{split}': {len(identities)} identities, {len(self._cache)} embeddings")

        per_source_records = self.margins(identities, sources, diagnostics)
        summaries: Dict[str, SourceSummary] = {}
        all_records: List[MarginRecord] = []
        for source, records in per_source_records.items():
            if not records:
                continue
            ssr, pa = ssr_pa(records)
            summaries[str(source)] = SourceSummary(
                source_id=source,
                held_out=source not in self.world.train_sources,
                ssr=ssr,
                pa=pa,
                n=len({r.identity_id for r in records}),
                n_margins=len(records),
            )
            all_records.extend(records)
        if not summaries:
            raise EmptyRecordsError(f"Split '{split}' produced no margin records")

        ssr, pa = pool_sources([(s.ssr, s.pa, s.n) for s in summaries.values()])
        train_group = [(s.ssr, s.pa, s.n) for s in summaries.values() if not s.held_out]
        held_group = [(s.ssr, s.pa, s.n) for s in summaries.values() if s.held_out]

        deltas = np.array([r.delta for r in all_records])
        counts, edges = np.histogram(deltas, bins=self.options.histogram_bins, range=HISTOGRAM_RANGE)
        outside = int(np.count_nonzero((deltas < HISTOGRAM_RANGE[0]) | (deltas > HISTOGRAM_RANGE[1])))
        if outside:
            diagnostics["margins_outside_histogram"] = outside

        correlation, edit_scores = self.edit_alignment(identities, diagnostics)
        hierarchy = self.hierarchy(identities, sources)

        coords = labels = None
        if self.options.kpca:
            points = [r for i in identities for r in self.world.views(i)]
            for identity in identities:
                for view in self.world.views(identity):
                    matched = self._matched(identity, view.view_index, sources[0])
                    if matched is not None:
                        points.append(matched)
            projected = kpca_project([self.embedding(r) for r in points], self.options.kpca_kernel, self.options.kpca_gamma)
            coords = [(float(x), float(y)) for x, y in projected]
            labels = [r.sample_id for r in points]

        report = EvalReport(
            split=split,
            ssr=ssr,
            pa=pa,
            n_samples=sum(s.n for s in summaries.values()),
            n_margins=len(all_records),
            per_source=summaries,
            train_ssr=pool_sources(train_group)[0] if train_group else None,
            held_out_ssr=pool_sources(held_group)[0] if held_group else None,
            m_o=correlation["m_o"],
            m_o_pair=correlation["m_o_pair"],
            m_h=correlation["m_h"],
            hierarchy=hierarchy,
            hierarchy_ordered=hierarchy.ordered,
            retrieval_recall_at_1=self.retrieval(identities, sources),
            margin_histogram=Histogram(edges=edges.tolist(), counts=counts.tolist()),
            edit_scores=edit_scores,
            projection_coords=coords,
            projection_labels=labels,
            diagnostics=diagnostics,
            provenance=provenance,
        )
        logger.info(f"SSR {report.ssr:.4f}  PA {report.pa:.4f}  M-O {report.m_o}  M-H {report.m_h}")
        return report


def make_provenance(seed: int, config_hash: str, embedder: str) -> Provenance:
    return Provenance(seed=seed, config_hash=config_hash, code_version=__version__, embedder=embedder)
