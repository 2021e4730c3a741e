from dataclasses import dataclass
from typing import Dict, Iterator, Tuple

import numpy as np

from .errors import DimensionMismatchError

# Fixed serialization order of the parameter blocks (checkpoint layout).
BLOCK_ORDER: Tuple[str, ...] = (
    "query",
    "w_q", "b_q",
    "w_k", "b_k",
    "w_v", "b_v",
    "w_o", "b_o",
    "ln_gain", "ln_bias",
    "w_1", "b_1",
    "w_2", "b_2",
    "w_p", "b_p",
)

MLP_EXPANSION = 4


@dataclass(frozen=True)
class HeadDims:
    width: int
    heads: int
    out: int

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise DimensionMismatchError(f"width {self.width} is not divisible by {self.heads} heads")

    @property
    def head_width(self) -> int:
        return self.width // self.heads

    def block_shapes(self) -> Dict[str, Tuple[int, ...]]:
        D, hidden, out = self.width, MLP_EXPANSION * self.width, self.out
        return {
            "query": (1, D),
            "w_q": (D, D), "b_q": (D,),
            "w_k": (D, D), "b_k": (D,),
            "w_v": (D, D), "b_v": (D,),
            "w_o": (D, D), "b_o": (D,),
            "ln_gain": (D,), "ln_bias": (D,),
            "w_1": (D, hidden), "b_1": (hidden,),
            "w_2": (hidden, D), "b_2": (D,),
            "w_p": (D, out), "b_p": (out,),
        }


@dataclass
class HeadParams:
    """Learnable MAP-pooling parameters; one float64 array per block in BLOCK_ORDER."""

    dims: HeadDims
    blocks: Dict[str, np.ndarray]

    def __post_init__(self):
        shapes = self.dims.block_shapes()
        missing = [name for name in BLOCK_ORDER if name not in self.blocks]
        if missing:
            raise DimensionMismatchError(f"Missing parameter blocks: {missing}")
        for name in BLOCK_ORDER:
            if self.blocks[name].shape != shapes[name]:
                raise DimensionMismatchError(
                    f"Block '{name}' has shape {self.blocks[name].shape}, expected {shapes[name]}"
                )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name in BLOCK_ORDER:
            yield name, self.blocks[name]

    def copy(self) -> "HeadParams":
        return HeadParams(dims=self.dims, blocks={name: value.copy() for name, value in self.items()})

    def zeros_like(self) -> "HeadParams":
        return HeadParams(dims=self.dims, blocks={name: np.zeros_like(value) for name, value in self.items()})

    def n_parameters(self) -> int:
        return int(sum(value.size for _, value in self.items()))


@dataclass
class OptimizerState:
    """AdamW moments per parameter block and the number of completed updates."""

    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: HeadParams) -> "OptimizerState":
        return cls(
            step=0,
            m=params.zeros_like().blocks,
            v=params.zeros_like().blocks,
        )
