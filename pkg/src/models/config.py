import hashlib
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Type

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError


class LossVariant(str, Enum):
    NEARID = "nearid"
    INFONCE_SYM = "infonce_sym"
    INFONCE_RNEG = "infonce_rneg"
    INFONCE_ORACLE_RANK = "infonce_oracle_rank"
    INFONCE_RNEG_ORACLE_RANK = "infonce_rneg_oracle_rank"
    SIGLIP_BCE_RANK = "siglip_bce_rank"
    CIRCLE_RANK = "circle_rank"


class SourceFilter(str, Enum):
    ALL = "all"
    TRAIN = "train"
    HELD_OUT = "held_out"


class KernelType(str, Enum):
    LINEAR = "linear"
    RBF = "rbf"


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(0.5, ge=0.0, allow_inf_nan=False)
    beta: float = Field(0.0, ge=0.0, allow_inf_nan=False)
    margin_m: float = Field(0.1, ge=0.0, allow_inf_nan=False)
    tau: float = Field(0.07, gt=0.0, allow_inf_nan=False)
    circle_relaxation: float = Field(0.25, ge=0.0, lt=1.0)


class WorldConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_identities: int = Field(600, ge=1)
    d_latent: int = Field(16, ge=1)
    tokens_fg: int = Field(8, ge=1)
    tokens_bg: int = Field(24, ge=1)
    token_dim: int = Field(64, ge=1)
    sigma_near: float = Field(0.3, gt=0.0)
    sigma_noise: float = Field(0.05, ge=0.0)
    bg_scale: float = Field(0.15, ge=0.0, allow_inf_nan=False)
    view_split: float = Field(0.33, ge=0.0, le=1.0)
    n_distractor_sources: int = Field(4, ge=1)
    n_train_sources: int = Field(2, ge=1)
    distractors_per_source: int = Field(2, ge=1)
    n_part_edits: int = Field(4, ge=1)
    max_edit_fraction: float = Field(0.5, gt=0.0, le=1.0)
    human_noise: float = Field(0.1, ge=0.0)
    val_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_splits(self) -> "WorldConfig":
        if self.n_train_sources > self.n_distractor_sources:
            raise ValueError("n_train_sources cannot exceed n_distractor_sources")
        if self.val_fraction + self.test_fraction >= 1.0:
            raise ValueError("val_fraction + test_fraction must leave room for a train split")
        if self.tokens_fg < 2:
            raise ValueError("tokens_fg must be at least 2 so part edits can replace a fraction")
        if 2 * self.d_latent > self.token_dim:
            raise ValueError("token_dim must hold separate foreground and background subspaces (2 * d_latent)")
        return self

    @property
    def max_edited_tokens(self) -> int:
        return max(1, int(self.max_edit_fraction * self.tokens_fg))


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(1e-4, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    warmup_steps: int = Field(100, ge=0)
    epochs: int = Field(30, ge=0)
    batch_identities: int = Field(32, ge=2)
    seed: int = Field(0, ge=0)
    loss_variant: LossVariant = LossVariant.NEARID
    mask_p_anchor: float = Field(0.5, ge=0.0, le=1.0)
    mask_p_positive: float = Field(0.2, ge=0.0, le=1.0)
    mask_p_distractor: float = Field(0.6, ge=0.0, le=1.0)
    jitter_sigma: float = Field(0.05, ge=0.0)
    part_edit_fraction: float = Field(0.25, ge=0.0, le=1.0)
    part_upsample: int = Field(4, ge=1)
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    head_width: int = Field(64, ge=1)
    head_heads: int = Field(4, ge=1)
    head_out: int = Field(32, ge=1)

    @property
    def mask_probs(self) -> Dict[str, float]:
        return {
            "anchor": self.mask_p_anchor,
            "positive": self.mask_p_positive,
            "distractor": self.mask_p_distractor,
        }

    @model_validator(mode="after")
    def _check_heads(self) -> "TrainConfig":
        if self.head_width % self.head_heads != 0:
            raise ValueError("head_width must be divisible by head_heads")
        return self


class EvalOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    split: str = "test"
    fg_only: bool = False
    sources: SourceFilter = SourceFilter.ALL
    kpca: bool = False
    kpca_kernel: KernelType = KernelType.LINEAR
    kpca_gamma: Optional[float] = Field(None, gt=0.0)
    histogram_bins: int = Field(20, ge=1)


SECTIONS: Tuple[Tuple[str, Type[BaseModel]], ...] = (
    ("world", WorldConfig),
    ("train", TrainConfig),
    ("loss", LossConfig),
    ("eval", EvalOptions),
)


def _owners(key: str) -> List[str]:
    return [name for name, model in SECTIONS if key in model.model_fields]


def flat_keys() -> List[str]:
    """All flat config keys in canonical (serialization) order."""
    keys: List[str] = []
    for _, model in SECTIONS:
        for key in model.model_fields:
            if key not in keys:
                keys.append(key)
    return keys


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig(BaseModel):
    """Union of world, training, loss and evaluation settings; serialized as flat key = value text."""

    model_config = ConfigDict(extra="forbid")

    world: WorldConfig = Field(default_factory=WorldConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    eval: EvalOptions = Field(default_factory=EvalOptions)

    @classmethod
    def from_flat(cls, values: Dict[str, Any]) -> "RunConfig":
        sections: Dict[str, Dict[str, Any]] = {name: {} for name, _ in SECTIONS}
        for key, value in values.items():
            owners = _owners(key)
            if not owners:
                raise ConfigError(f"Unknown config key '{key}'")
            if isinstance(value, str) and value.strip() == "":
                value = None
            for owner in owners:
                sections[owner][key] = value
        try:
            return cls(**sections)
        except ValidationError as e:
            raise ConfigError(f"Invalid configuration: {e}") from e

    def to_flat(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {}
        for name, _ in SECTIONS:
            section = getattr(self, name)
            for key in type(section).model_fields:
                flat.setdefault(key, getattr(section, key))
        return flat

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        flat = self.to_flat()
        for key, value in overrides.items():
            if not _owners(key):
                raise ConfigError(f"Unknown config key '{key}'")
            flat[key] = value
        return RunConfig.from_flat({k: _format_value(v) if not isinstance(v, str) else v for k, v in flat.items()})

    def serialize(self) -> str:
        flat = self.to_flat()
        return "".join(f"{key} = {_format_value(flat[key])}\n" for key in flat_keys())

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        values: Dict[str, str] = {}
        for line_number, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"Line {line_number}: expected 'key = value', got '{raw.strip()}'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in values:
                raise ConfigError(f"Line {line_number}: duplicate key '{key}'")
            values[key] = value
        return cls.from_flat(values)

    def config_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()[:16]
