import json
import logging
import os
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..models.batch import TokenGrid
from ..models.config import RunConfig, WorldConfig
from ..models.errors import ConfigError, FileFormatError, MissingSplitError
from ..models.world import Role, SampleRecord
from ..utils.file_formats import atomic_write_text
from ..utils.geometry import l2_normalize
from ..utils.rng import substream
from ..utils.stats import oracle_score

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SOURCE_STYLES = ("isotropic", "sparse", "lowrank", "heavytail")
MANIFEST_FILE = "manifest.jsonl"
CONFIG_FILE = "config.txt"
HUMAN_NOISE = 0.1


@lru_cache(maxsize=8)
def _token_maps(seed: int, token_dim: int, d_latent: int, bg_scale: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Fixed foreground and background maps (token_dim x d_latent) of a world seed.

    Both are scaled isometries onto mutually orthogonal random subspaces of token space, so every
    latent direction is rendered with the same gain and foreground never leaks into background.
    """
    gaussian = substream(seed, "maps").standard_normal((token_dim, 2 * d_latent))
    frame, _ = np.linalg.qr(gaussian)
    gain = np.sqrt(token_dim)
    a_fg = gain * frame[:, :d_latent]
    a_bg = bg_scale * gain * frame[:, d_latent:]
    a_fg.setflags(write=False)
    a_bg.setflags(write=False)
    return a_fg, a_bg


def token_maps(cfg: WorldConfig) -> Tuple[np.ndarray, np.ndarray]:
    return _token_maps(cfg.seed, cfg.token_dim, cfg.d_latent, cfg.bg_scale)


def random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    return l2_normalize(rng.standard_normal(dim))


def source_direction(source_id: int, cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Unit perturbation direction in the style of a distractor source.

    Styles cycle through isotropic Gaussian, sparse-coordinate, low-rank (a fixed 2-D basis per
    source) and heavy-tailed (Student t, 2 dof) noise.
    """
    style = SOURCE_STYLES[source_id % len(SOURCE_STYLES)]
    d = cfg.d_latent
    if style == "isotropic":
        eps = rng.standard_normal(d)
    elif style == "sparse":
        eps = np.zeros(d)
        support = rng.choice(d, size=max(1, d // 4), replace=False)
        eps[support] = rng.standard_normal(support.size)
    elif style == "lowrank":
        basis = substream(cfg.seed, "source-basis", source_id).standard_normal((d, min(2, d)))
        eps = basis @ rng.standard_normal(basis.shape[1])
    else:
        eps = rng.standard_t(2.0, size=d)
    return l2_normalize(eps)


def perturb_identity(z_id: np.ndarray, sigma_near: float, eps: np.ndarray) -> np.ndarray:
    """Near-identity latent normalize(z + sigma * eps); sigma = 0 returns the identity itself."""
    return l2_normalize(np.asarray(z_id, dtype=np.float64) + sigma_near * np.asarray(eps, dtype=np.float64))


def render(z_id: np.ndarray, z_bg: np.ndarray, cfg: WorldConfig, rng: np.random.Generator) -> TokenGrid:
    """
    Token grid of an identity composed on a background: tokens_fg foreground tokens A_fg z_id
    followed by tokens_bg background tokens A_bg z_bg (scaled by bg_scale), each plus N(0, sigma_noise) noise.
    """
    a_fg, a_bg = token_maps(cfg)
    fg = np.tile(a_fg @ z_id, (cfg.tokens_fg, 1))
    bg = np.tile(a_bg @ z_bg, (cfg.tokens_bg, 1))
    tokens = np.concatenate([fg, bg], axis=0)
    if cfg.sigma_noise > 0:
        tokens = tokens + rng.normal(0.0, cfg.sigma_noise, size=tokens.shape)
    fg_mask = np.zeros(tokens.shape[0], dtype=bool)
    fg_mask[: cfg.tokens_fg] = True
    return TokenGrid(tokens=tokens, fg_mask=fg_mask)


def human_proxy(severity: float, rng: np.random.Generator, noise: float = HUMAN_NOISE) -> float:
    """Noisy monotone stand-in for a human similarity judgement: clamp(severity + N(0, noise), 0, 1)."""
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"Severity must lie in [0, 1], got {severity}")
    return float(np.clip(severity + rng.normal(0.0, noise), 0.0, 1.0))


def _split_assignment(cfg: WorldConfig) -> Dict[int, str]:
    order = substream(cfg.seed, "split").permutation(cfg.n_identities)
    n_test = int(round(cfg.test_fraction * cfg.n_identities))
    n_val = int(round(cfg.val_fraction * cfg.n_identities))
    if n_test + n_val >= cfg.n_identities:
        raise ConfigError(f"{cfg.n_identities} identities leave no training split")
    assignment: Dict[int, str] = {}
    for rank, identity in enumerate(order.tolist()):
        if rank < n_test:
            assignment[identity] = "test"
        elif rank < n_test + n_val:
            assignment[identity] = "val"
        else:
            assignment[identity] = "train"
    return assignment


def _pick_donor(identity: int, split_members: Sequence[int], n_identities: int, rng: np.random.Generator) -> Optional[int]:
    candidates = [other for other in split_members if other != identity]
    if not candidates:
        candidates = [other for other in range(n_identities) if other != identity]
    if not candidates:
        return None
    return int(candidates[rng.integers(len(candidates))])


class SynthWorld:
    """
    A matched-context world: the manifest (source of truth) plus the seed-determined latents
    and token maps needed to re-render any sample on demand.
    """

    def __init__(self, cfg: WorldConfig, records: List[SampleRecord]):
        self.cfg = cfg
        self.records = records
        self.by_id: Dict[str, SampleRecord] = {record.sample_id: record for record in records}
        self._by_identity: Dict[int, List[SampleRecord]] = {}
        for record in records:
            self._by_identity.setdefault(record.identity_id, []).append(record)
        self._latents: Dict[Tuple[str, int], np.ndarray] = {}

    # --- latents -------------------------------------------------------------------------------

    def _latent(self, kind: str, index: int) -> np.ndarray:
        key = (kind, index)
        if key not in self._latents:
            self._latents[key] = random_unit(substream(self.cfg.seed, kind, index), self.cfg.d_latent)
        return self._latents[key]

    def identity_latent(self, identity: int) -> np.ndarray:
        return self._latent("identity", identity)

    def background_latent(self, background: int) -> np.ndarray:
        return self._latent("background", background)

    def _donor_latent(self, record: SampleRecord) -> np.ndarray:
        if record.donor_identity is not None:
            return self.identity_latent(record.donor_identity)
        return random_unit(substream(self.cfg.seed, "donor", record.sample_id), self.cfg.d_latent)

    # --- rendering -----------------------------------------------------------------------------

    def grid(self, record: SampleRecord) -> TokenGrid:
        """Re-render the token grid of a manifest record."""
        cfg = self.cfg
        z_bg = self.background_latent(record.background_id)
        z_id = self.identity_latent(record.identity_id)

        if record.role == Role.DISTRACTOR:
            eps = source_direction(record.source_id, cfg, substream(cfg.seed, "distractor", record.sample_id))
            return render(perturb_identity(z_id, cfg.sigma_near, eps), z_bg, cfg, substream(cfg.seed, "render", record.sample_id))

        if record.role == Role.PART_EDIT:
            anchor = self.view_record(record.identity_id, record.view_index)
            base = self.grid(anchor)
            tokens = base.tokens.copy()
            if record.edited_tokens:
                rng = substream(cfg.seed, "part", record.sample_id)
                positions = np.sort(rng.choice(cfg.tokens_fg, size=record.edited_tokens, replace=False))
                donor = render(self._donor_latent(record), z_bg, cfg, substream(cfg.seed, "render", record.sample_id))
                tokens[positions] = donor.tokens[positions]
            return TokenGrid(tokens=tokens, fg_mask=base.fg_mask)

        return render(z_id, z_bg, cfg, substream(cfg.seed, "render", record.sample_id))

    def grids(self, records: Iterable[SampleRecord]) -> np.ndarray:
        """Stacked token arrays (B, T, D) of several records."""
        return np.stack([self.grid(record).tokens for record in records])

    def fg_mask(self) -> np.ndarray:
        mask = np.zeros(self.cfg.tokens_fg + self.cfg.tokens_bg, dtype=bool)
        mask[: self.cfg.tokens_fg] = True
        return mask

    # --- queries -------------------------------------------------------------------------------

    def identities(self, split: str) -> List[int]:
        members = sorted({r.identity_id for r in self.records if r.split == split})
        if not members:
            raise MissingSplitError(f"Split '{split}' has no identities")
        return members

    def samples(self, identity: int, role: Optional[Role] = None) -> List[SampleRecord]:
        records = self._by_identity.get(identity, [])
        if role is None:
            return list(records)
        return [r for r in records if r.role == role]

    def views(self, identity: int) -> List[SampleRecord]:
        """Anchor and positive records of an identity ordered by view index."""
        records = [r for r in self._by_identity.get(identity, []) if r.role in (Role.ANCHOR, Role.POSITIVE)]
        return sorted(records, key=lambda r: r.view_index)

    def view_record(self, identity: int, view_index: int) -> SampleRecord:
        for record in self.views(identity):
            if record.view_index == view_index:
                return record
        raise KeyError(f"Identity {identity} has no view {view_index}")

    def distractors(self, identity: int, view_index: Optional[int] = None, sources: Optional[Sequence[int]] = None) -> List[SampleRecord]:
        records = self.samples(identity, Role.DISTRACTOR)
        if view_index is not None:
            records = [r for r in records if r.view_index == view_index]
        if sources is not None:
            allowed = set(sources)
            records = [r for r in records if r.source_id in allowed]
        return records

    def part_edits(self, identity: int) -> List[SampleRecord]:
        return self.samples(identity, Role.PART_EDIT)

    @property
    def train_sources(self) -> List[int]:
        return list(range(self.cfg.n_train_sources))

    @property
    def held_out_sources(self) -> List[int]:
        return list(range(self.cfg.n_train_sources, self.cfg.n_distractor_sources))

    # --- persistence ---------------------------------------------------------------------------

    def manifest_text(self) -> str:
        return "".join(record.to_json() + "\n" for record in self.records)

    def save(self, out_dir: str, run_config: RunConfig) -> str:
        """Write the manifest and the config echo; returns the manifest path."""
        os.makedirs(out_dir, exist_ok=True)
        manifest_path = os.path.join(out_dir, MANIFEST_FILE)
        atomic_write_text(manifest_path, self.manifest_text())
        atomic_write_text(os.path.join(out_dir, CONFIG_FILE), run_config.serialize())
        logger.info(f"Wrote {len(self.records)} manifest records to {manifest_path}")
        return manifest_path

    @classmethod
    def load(cls, world_dir: str) -> Tuple["SynthWorld", RunConfig]:
        """Read a world directory written by ``save``."""
        with open(os.path.join(world_dir, CONFIG_FILE), "r", encoding="utf-8") as f:
            run_config = RunConfig.parse(f.read())
        records: List[SampleRecord] = []
        manifest_path = os.path.join(world_dir, MANIFEST_FILE)
        with open(manifest_path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(SampleRecord.model_validate(json.loads(line)))
                except ValueError as e:
                    raise FileFormatError(f"Invalid manifest record at {manifest_path}:{line_number}: {e}") from e
        if not records:
            raise FileFormatError(f"Manifest {manifest_path} is empty")
        logger.info(f"Loaded world with {len(records)} records from {world_dir}")
        return cls(run_config.world, records), run_config


def _identity_records(identity: int, split: str, split_members: Sequence[int], cfg: WorldConfig, first_background: int) -> List[SampleRecord]:
    """All manifest records of one identity; depends only on (seed, identity)."""
    view_rng = substream(cfg.seed, "views", identity)
    n_views = 3 if view_rng.random() < cfg.view_split else 2
    records: List[SampleRecord] = []

    def proxy(sample_id: str, severity: float) -> float:
        return human_proxy(severity, substream(cfg.seed, "human", sample_id), cfg.human_noise)

    for view in range(n_views):
        sample_id = f"{identity:05d}-view{view}"
        records.append(SampleRecord(
            sample_id=sample_id,
            identity_id=identity,
            role=Role.ANCHOR if view == 0 else Role.POSITIVE,
            background_id=first_background + view,
            view_index=view,
            oracle_severity=1.0,
            human_proxy=proxy(sample_id, 1.0),
            split=split,
        ))

    for view in range(n_views):
        for source in range(cfg.n_distractor_sources):
            for copy in range(cfg.distractors_per_source):
                sample_id = f"{identity:05d}-view{view}-src{source}-{copy}"
                records.append(SampleRecord(
                    sample_id=sample_id,
                    identity_id=identity,
                    role=Role.DISTRACTOR,
                    background_id=first_background + view,
                    source_id=source,
                    view_index=view,
                    oracle_severity=0.0,
                    human_proxy=proxy(sample_id, 0.0),
                    split=split,
                ))

    edit_rng = substream(cfg.seed, "edits", identity)
    n_edits = min(cfg.n_part_edits, cfg.max_edited_tokens)
    counts = np.sort(1 + edit_rng.choice(cfg.max_edited_tokens, size=n_edits, replace=False))
    for edit, count in enumerate(counts.tolist()):
        sample_id = f"{identity:05d}-part{edit}"
        severity = oracle_score(count, cfg.tokens_fg)
        records.append(SampleRecord(
            sample_id=sample_id,
            identity_id=identity,
            role=Role.PART_EDIT,
            background_id=first_background,
            view_index=0,
            oracle_severity=severity,
            human_proxy=proxy(sample_id, severity),
            split=split,
            donor_identity=_pick_donor(identity, split_members, cfg.n_identities, edit_rng),
            edited_tokens=count,
        ))
    return records


def generate_world(cfg: WorldConfig) -> SynthWorld:
    """
    Build the manifest of a synthetic world. Splits are disjoint by identity; every view of an
    identity gets its own background and every distractor reuses the background of its view.
    """
    try:
        assignment = _split_assignment(cfg)
        members: Dict[str, List[int]] = {split: [] for split in SPLITS}
        for identity in range(cfg.n_identities):
            members[assignment[identity]].append(identity)

        records: List[SampleRecord] = []
        # Three background slots per identity so background ids do not depend on other identities.
        for identity in range(cfg.n_identities):
            split = assignment[identity]
            records.extend(_identity_records(identity, split, members[split], cfg, first_background=3 * identity))

        counts = {split: len(ids) for split, ids in members.items()}
        logger.info(f"Generated world: {len(records)} samples, identities per split {counts}")
        return SynthWorld(cfg, records)

    except ConfigError:
        raise
    except Exception as e:
        logger.error(f"Error generating world: {e}")
        raise
