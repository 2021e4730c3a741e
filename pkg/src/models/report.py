from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field


class Direction(str, Enum):
    I_TO_J = "i_to_j"
    J_TO_I = "j_to_i"


class MarginRecord(BaseModel):
    """One directed margin trial: s(p_i, p_j) minus the similarity of the anchoring view to its distractor."""

    identity_id: int
    pair: Tuple[int, int]
    direction: Direction
    delta: float = Field(..., allow_inf_nan=False)
    source_id: Optional[int] = None

    @property
    def success(self) -> bool:
        return self.delta > 0.0


class SourceSummary(BaseModel):
    source_id: int
    held_out: bool
    ssr: float = Field(..., ge=0.0, le=1.0)
    pa: float = Field(..., ge=0.0, le=1.0)
    n: int = Field(..., gt=0)
    n_margins: int = 0


class HierarchySummary(BaseModel):
    positive: float
    distractor: float
    batch_negative: float

    @property
    def ordered(self) -> bool:
        return self.positive > self.distractor > self.batch_negative


class EditScore(BaseModel):
    identity_id: int
    sample_id: str
    severity: float
    human_proxy: float
    similarity: float


class Histogram(BaseModel):
    edges: List[float]
    counts: List[int]


class Provenance(BaseModel):
    seed: int
    config_hash: str
    code_version: str
    embedder: str


class EvalReport(BaseModel):
    split: str
    ssr: float = Field(..., ge=0.0, le=1.0)
    pa: float = Field(..., ge=0.0, le=1.0)
    n_samples: int
    n_margins: int
    per_source: Dict[str, SourceSummary]
    train_ssr: Optional[float] = None
    held_out_ssr: Optional[float] = None
    m_o: Optional[float] = None
    m_o_pair: Optional[float] = None
    m_h: Optional[float] = None
    hierarchy: Optional[HierarchySummary] = None
    hierarchy_ordered: Optional[bool] = None
    retrieval_recall_at_1: Optional[float] = None
    margin_histogram: Histogram
    edit_scores: List[EditScore] = Field(default_factory=list)
    projection_coords: Optional[List[Tuple[float, float]]] = None
    projection_labels: Optional[List[str]] = None
    diagnostics: Dict[str, int] = Field(default_factory=dict)
    provenance: Provenance


class StepRecord(BaseModel):
    """One line of the training log (JSON lines)."""

    step: int
    epoch: int
    lr: float
    loss: float
    disc: float = 0.0
    rank: float = 0.0
    cohesion: float = 0.0
    extra: Dict[str, float] = Field(default_factory=dict)
    diagnostics: Dict[str, int] = Field(default_factory=dict)
