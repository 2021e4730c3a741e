from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field


class Role(str, Enum):
    ANCHOR = "anchor"
    POSITIVE = "positive"
    DISTRACTOR = "distractor"
    PART_EDIT = "part_edit"


class SampleRecord(BaseModel):
    """One manifest line. Grids are not stored; they are re-rendered from (seed, record)."""

    model_config = ConfigDict(extra="forbid", use_enum_values=False)

    sample_id: str
    identity_id: int = Field(..., ge=0)
    role: Role
    background_id: int = Field(..., ge=0)
    source_id: Optional[int] = None
    view_index: int = Field(..., ge=0)
    oracle_severity: float = Field(..., ge=0.0, le=1.0)
    human_proxy: float = Field(..., ge=0.0, le=1.0)
    split: str

    # Part edits only: which identity donated the replacement tokens and how many.
    donor_identity: Optional[int] = None
    edited_tokens: int = Field(0, ge=0)

    def to_json(self) -> str:
        return self.model_dump_json()
