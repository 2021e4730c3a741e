import hashlib
from typing import Union

import numpy as np

StreamName = Union[str, int]


def _name_key(name: StreamName) -> int:
    digest = hashlib.blake2b(str(name).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, *names: StreamName) -> np.random.Generator:
    """
    Return an independent counter-based (Philox) generator for a purpose path.

    The stream depends only on ``seed`` and the names, so e.g. toggling masking never
    shifts the jitter or shuffling draws, and per-identity work can run in any order.

    Args:
        seed: Non-negative run seed
        names: Purpose path, e.g. ("masking", epoch) or ("render", sample_id)

    Returns:
        numpy Generator backed by Philox
    """
    if seed < 0:
        raise ValueError(f"Seed must be non-negative, got {seed}")
    sequence = np.random.SeedSequence(
        entropy=int(seed),
        spawn_key=tuple(_name_key(name) for name in names),
    )
    return np.random.Generator(np.random.Philox(sequence))
