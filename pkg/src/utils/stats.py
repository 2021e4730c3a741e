import logging
from typing import Sequence

import numpy as np

from ..models.errors import BadAreasError, ConstantSeriesError, EmptyInputError

logger = logging.getLogger(__name__)

CORRELATION_CLAMP = 1.0 - 1e-12


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Product-moment correlation, computed two-pass (center first, then dot products).

    Raises:
        ValueError: if the series differ in length or have fewer than two points
        ConstantSeriesError: if either series has zero variance
    """
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError(f"Series must be 1-D and equal length, got {xs.shape} and {ys.shape}")
    if xs.size < 2:
        raise ValueError("Pearson correlation needs at least two points")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sx = np.sqrt(dx @ dx)
    sy = np.sqrt(dy @ dy)
    if sx == 0.0 or sy == 0.0:
        raise ConstantSeriesError("Pearson correlation is undefined for a constant series")
    r = (dx @ dy) / (sx * sy)
    return float(np.clip(r, -1.0, 1.0))


def fisher_mean(rs: Sequence[float]) -> float:
    """Average correlations in Fisher z space: tanh(mean(atanh(r)))."""
    values = np.asarray(rs, dtype=np.float64).ravel()
    if values.size == 0:
        raise EmptyInputError("fisher_mean needs at least one correlation")
    clamped = np.clip(values, -CORRELATION_CLAMP, CORRELATION_CLAMP)
    n_clamped = int(np.count_nonzero(clamped != values))
    if n_clamped:
        logger.warning(f"Clamped {n_clamped} correlation(s) to |r| <= 1-1e-12 before atanh")
    return float(np.tanh(np.mean(np.arctanh(clamped))))


def oracle_score(part_area: float, object_area: float) -> float:
    """Edit severity 1 - |part| / |object|: 1.0 for an untouched object, 0.0 for a full replacement."""
    if not np.isfinite(part_area) or not np.isfinite(object_area):
        raise BadAreasError("Areas must be finite")
    if object_area <= 0 or part_area < 0 or part_area > object_area:
        raise BadAreasError(f"Need 0 <= part_area <= object_area and object_area > 0, got {part_area}, {object_area}")
    return float(1.0 - part_area / object_area)
