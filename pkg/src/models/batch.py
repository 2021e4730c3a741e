from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import DimensionMismatchError


@dataclass(frozen=True)
class TokenGrid:
    """T x D token matrix from the frozen feature extractor stand-in, with foreground flags."""

    tokens: np.ndarray
    fg_mask: np.ndarray

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise DimensionMismatchError(f"TokenGrid needs a T x D matrix with T >= 1, got {self.tokens.shape}")
        if self.fg_mask.shape != (self.tokens.shape[0],):
            raise DimensionMismatchError("fg_mask must hold one flag per token")

    def masked_background(self) -> "TokenGrid":
        return TokenGrid(tokens=np.where(self.fg_mask[:, None], self.tokens, 0.0), fg_mask=self.fg_mask)


@dataclass(frozen=True)
class TupleBatch:
    """
    N training tuples: anchors (N, d), positives (N, P, d), distractors (N, K, d).

    Invalid slots (per the boolean masks) are ignored by every loss and receive zero gradient.
    """

    anchors: np.ndarray
    positives: np.ndarray
    pos_valid: np.ndarray
    distractors: np.ndarray
    dis_valid: np.ndarray

    def __post_init__(self):
        N, d = self.anchors.shape
        if self.positives.ndim != 3 or self.positives.shape[0] != N or self.positives.shape[2] != d:
            raise DimensionMismatchError(f"positives must be (N, P, d), got {self.positives.shape}")
        if self.distractors.ndim != 3 or self.distractors.shape[0] != N or self.distractors.shape[2] != d:
            raise DimensionMismatchError(f"distractors must be (N, K, d), got {self.distractors.shape}")
        if self.pos_valid.shape != self.positives.shape[:2]:
            raise DimensionMismatchError("pos_valid must be (N, P)")
        if self.dis_valid.shape != self.distractors.shape[:2]:
            raise DimensionMismatchError("dis_valid must be (N, K)")

    @property
    def n_rows(self) -> int:
        return self.anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    def replace(self, **arrays: np.ndarray) -> "TupleBatch":
        values = {
            "anchors": self.anchors,
            "positives": self.positives,
            "pos_valid": self.pos_valid,
            "distractors": self.distractors,
            "dis_valid": self.dis_valid,
        }
        values.update(arrays)
        return TupleBatch(**values)


@dataclass(frozen=True)
class OracleLabels:
    """Per-distractor edit severity in [0, 1]: 1 = unedited-identical, 0 = fully replaced."""

    severity: np.ndarray

    def __post_init__(self):
        if np.any(self.severity < 0.0) or np.any(self.severity > 1.0):
            raise ValueError("Oracle severities must lie in [0, 1]")


@dataclass
class BatchGrads:
    anchors: np.ndarray
    positives: np.ndarray
    distractors: np.ndarray

    def add_scaled(self, other: "BatchGrads", scale: float) -> None:
        self.anchors += scale * other.anchors
        self.positives += scale * other.positives
        self.distractors += scale * other.distractors


@dataclass
class LossOutput:
    value: float
    grads: BatchGrads
    components: Dict[str, float] = field(default_factory=dict)
    diagnostics: Dict[str, int] = field(default_factory=dict)


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coordinates: int
    worst: Optional[Tuple[str, Tuple[int, ...]]]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


@dataclass(frozen=True)
class GridTuple:
    """One training tuple before embedding: anchor grid, positive views and distractor grids."""

    identity_id: int
    anchor: TokenGrid
    positives: List[TokenGrid]
    distractors: List[TokenGrid]
    severities: List[float]
    kind: str = "object"

    def __post_init__(self):
        if len(self.severities) != len(self.distractors):
            raise DimensionMismatchError("One severity per distractor is required")
