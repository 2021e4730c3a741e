from typing import Optional

import numpy as np
import pytest

from src.models.batch import TupleBatch
from src.models.config import WorldConfig
from src.services.world_service import generate_world


def make_batch(
    rng: np.random.Generator,
    n: int = 2,
    p: int = 2,
    k: int = 2,
    d: int = 8,
    pos_valid: Optional[np.ndarray] = None,
    dis_valid: Optional[np.ndarray] = None,
) -> TupleBatch:
    """Random raw (unnormalized) embeddings; invalid slots are zeroed."""
    pos_valid = np.ones((n, p), dtype=bool) if pos_valid is None else np.asarray(pos_valid, dtype=bool)
    dis_valid = np.ones((n, k), dtype=bool) if dis_valid is None else np.asarray(dis_valid, dtype=bool)
    return TupleBatch(
        anchors=rng.standard_normal((n, d)),
        positives=np.where(pos_valid[:, :, None], rng.standard_normal((n, p, d)), 0.0),
        pos_valid=pos_valid,
        distractors=np.where(dis_valid[:, :, None], rng.standard_normal((n, k, d)), 0.0),
        dis_valid=dis_valid,
    )


def unit(*coords: float) -> np.ndarray:
    v = np.asarray(coords, dtype=np.float64)
    return v / np.linalg.norm(v)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_world_config() -> WorldConfig:
    return WorldConfig(
        n_identities=24,
        d_latent=6,
        tokens_fg=4,
        tokens_bg=8,
        token_dim=16,
        n_distractor_sources=3,
        n_train_sources=2,
        distractors_per_source=1,
        n_part_edits=2,
        val_fraction=0.125,
        test_fraction=0.25,
        seed=7,
    )


@pytest.fixture(scope="session")
def small_world(small_world_config):
    return generate_world(small_world_config)
