import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from ..models.batch import TokenGrid
from ..models.errors import DimensionMismatchError, FileFormatError, StaleCacheError
from ..models.head import BLOCK_ORDER, HeadDims, HeadParams
from ..utils.file_formats import atomic_write_bytes, decode_checkpoint, encode_checkpoint
from ..utils.geometry import ZERO_NORM, normalize_backward

logger = logging.getLogger(__name__)

LN_EPS = 1e-6
QUERY_INIT_STD = 0.02
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


def _gelu(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Tanh-approximated GELU; returns (value, tanh term) so backward can reuse it."""
    t = np.tanh(_GELU_C * (x + _GELU_K * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3.0 * _GELU_K * x ** 2)


def init_head_params(dims: HeadDims, rng: np.random.Generator) -> HeadParams:
    """
    Fresh head parameters: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), query ~ N(0, 0.02),
    zero biases, layer-norm gain 1 and bias 0.
    """
    blocks: Dict[str, np.ndarray] = {}
    for name, shape in dims.block_shapes().items():
        if name == "query":
            blocks[name] = rng.normal(0.0, QUERY_INIT_STD, size=shape)
        elif name == "ln_gain":
            blocks[name] = np.ones(shape)
        elif name.startswith("w_"):
            bound = 1.0 / np.sqrt(shape[0])
            blocks[name] = rng.uniform(-bound, bound, size=shape)
        else:
            blocks[name] = np.zeros(shape)
    return HeadParams(dims=dims, blocks=blocks)


@dataclass
class HeadCache:
    """Forward intermediates; consumed by exactly one backward pass."""

    params: HeadParams
    tokens: np.ndarray
    q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    attn: np.ndarray
    ctx: np.ndarray
    o: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    y: np.ndarray
    h1: np.ndarray
    tanh_h1: np.ndarray
    act: np.ndarray
    r: np.ndarray
    z: np.ndarray
    p_norm: np.ndarray
    consumed: bool = field(default=False)


class MAPHead:
    """
    Multi-head attention pooling head: one learnable query cross-attends to the token grid,
    followed by a pre-norm residual GELU MLP, a linear projection and l2 normalization.

    Works on batches of grids shaped (B, T, D). There is no positional encoding, so the
    output does not depend on token order.
    """

    def __init__(self, params: HeadParams):
        self.params = params

    @property
    def dims(self) -> HeadDims:
        return self.params.dims

    def forward(self, tokens: np.ndarray) -> Tuple[np.ndarray, HeadCache]:
        """
        Embed a batch of token grids.

        Args:
            tokens: Array of shape (B, T, D) or (T, D)

        Returns:
            Tuple of (unit embeddings (B, d_out), cache for backward)
        """
        X = np.asarray(tokens, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        dims = self.dims
        if X.ndim != 3 or X.shape[2] != dims.width or X.shape[1] < 1:
            raise DimensionMismatchError(f"Expected tokens (B, T, {dims.width}), got {np.shape(tokens)}")
        P = self.params
        B, T, D = X.shape
        H, dh = dims.heads, dims.head_width

        q = (P["query"] @ P["w_q"] + P["b_q"]).reshape(H, dh)
        K = (X @ P["w_k"] + P["b_k"]).reshape(B, T, H, dh)
        V = (X @ P["w_v"] + P["b_v"]).reshape(B, T, H, dh)

        scores = np.einsum("hc,bthc->bht", q, K) / np.sqrt(dh)
        scores = scores - scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        attn = weights / weights.sum(axis=-1, keepdims=True)
        ctx = np.einsum("bht,bthc->bhc", attn, V).reshape(B, D)

        o = ctx @ P["w_o"] + P["b_o"]
        mu = o.mean(axis=-1, keepdims=True)
        var = o.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + LN_EPS)
        xhat = (o - mu) * inv_std
        y = P["ln_gain"] * xhat + P["ln_bias"]

        h1 = y @ P["w_1"] + P["b_1"]
        act, tanh_h1 = _gelu(h1)
        r = o + act @ P["w_2"] + P["b_2"]
        p = r @ P["w_p"] + P["b_p"]

        p_norm = np.linalg.norm(p, axis=-1)
        p_norm = np.maximum(p_norm, ZERO_NORM)
        z = p / p_norm[:, None]

        cache = HeadCache(
            params=P, tokens=X, q=q, K=K, V=V, attn=attn, ctx=ctx, o=o, xhat=xhat,
            inv_std=inv_std, y=y, h1=h1, tanh_h1=tanh_h1, act=act, r=r, z=z, p_norm=p_norm,
        )
        return z, cache

    def backward(self, cache: HeadCache, grad_out: np.ndarray) -> Tuple[HeadParams, np.ndarray]:
        """
        Gradients of a downstream scalar w.r.t. every parameter block and the input tokens.

        Raises:
            StaleCacheError: if the cache was already consumed or belongs to other parameters
        """
        if cache.consumed:
            raise StaleCacheError("Forward cache already consumed by a backward pass")
        if cache.params is not self.params:
            raise StaleCacheError("Forward cache was produced with different parameters")
        cache.consumed = True

        P = self.params
        dims = self.dims
        H, dh = dims.heads, dims.head_width
        dz = np.asarray(grad_out, dtype=np.float64).reshape(cache.z.shape)
        B, T, D = cache.tokens.shape
        grads: Dict[str, np.ndarray] = {}

        dp = normalize_backward(cache.z, cache.p_norm, dz)
        grads["w_p"] = cache.r.T @ dp
        grads["b_p"] = dp.sum(axis=0)
        dr = dp @ P["w_p"].T

        grads["w_2"] = cache.act.T @ dr
        grads["b_2"] = dr.sum(axis=0)
        dh1 = (dr @ P["w_2"].T) * _gelu_grad(cache.h1, cache.tanh_h1)
        grads["w_1"] = cache.y.T @ dh1
        grads["b_1"] = dh1.sum(axis=0)
        dy = dh1 @ P["w_1"].T

        grads["ln_gain"] = np.sum(dy * cache.xhat, axis=0)
        grads["ln_bias"] = dy.sum(axis=0)
        dxhat = dy * P["ln_gain"]
        do = dr + cache.inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - cache.xhat * np.mean(dxhat * cache.xhat, axis=-1, keepdims=True)
        )

        grads["w_o"] = cache.ctx.T @ do
        grads["b_o"] = do.sum(axis=0)
        dctx = (do @ P["w_o"].T).reshape(B, H, dh)

        dattn = np.einsum("bhc,bthc->bht", dctx, cache.V)
        dV = np.einsum("bht,bhc->bthc", cache.attn, dctx).reshape(B, T, D)
        dscores = cache.attn * (dattn - np.sum(dattn * cache.attn, axis=-1, keepdims=True))
        dscores /= np.sqrt(dh)
        dq = np.einsum("bht,bthc->hc", dscores, cache.K).reshape(1, D)
        dK = np.einsum("bht,hc->bthc", dscores, cache.q).reshape(B, T, D)

        X = cache.tokens
        grads["w_k"] = np.einsum("btd,bte->de", X, dK)
        grads["b_k"] = dK.sum(axis=(0, 1))
        grads["w_v"] = np.einsum("btd,bte->de", X, dV)
        grads["b_v"] = dV.sum(axis=(0, 1))
        grads["w_q"] = P["query"].T @ dq
        grads["b_q"] = dq[0]
        grads["query"] = dq @ P["w_q"].T

        token_grads = dK @ P["w_k"].T + dV @ P["w_v"].T
        return HeadParams(dims=dims, blocks={name: grads[name] for name in BLOCK_ORDER}), token_grads

    def embed(self, tokens: np.ndarray) -> np.ndarray:
        z, _ = self.forward(tokens)
        return z


class FrozenEncoder:
    """Untrained stand-in embedding: mean-pooled tokens, l2-normalized. Holds no trainable parameters."""

    n_trainable = 0

    def embed(self, tokens: np.ndarray) -> np.ndarray:
        X = np.asarray(tokens, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        pooled = X.mean(axis=1)
        norms = np.maximum(np.linalg.norm(pooled, axis=-1, keepdims=True), ZERO_NORM)
        return pooled / norms


def head_forward(grid: TokenGrid, params: HeadParams) -> Tuple[np.ndarray, HeadCache]:
    z, cache = MAPHead(params).forward(grid.tokens)
    return z[0], cache


def head_backward(cache: HeadCache, grad_out: np.ndarray) -> Tuple[HeadParams, np.ndarray]:
    params_grads, token_grads = MAPHead(cache.params).backward(cache, np.atleast_2d(grad_out))
    if token_grads.shape[0] == 1:
        token_grads = token_grads[0]
    return params_grads, token_grads


def save_checkpoint(path: str, params: HeadParams, n_tokens: int) -> None:
    dims = params.dims
    data = encode_checkpoint((dims.width, dims.heads, dims.out, n_tokens), params.blocks, BLOCK_ORDER)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    atomic_write_bytes(path, data)
    logger.info(f"Saved head checkpoint ({params.n_parameters()} parameters) to {path}")


def load_checkpoint(path: str) -> Tuple[HeadParams, int]:
    """Read a head checkpoint; returns (params, tokens per grid recorded at training time)."""
    with open(path, "rb") as f:
        data = f.read()
    (D, H, d_out, T), body = decode_checkpoint(data)
    dims = HeadDims(width=D, heads=H, out=d_out)
    shapes = dims.block_shapes()
    expected = sum(int(np.prod(shapes[name])) for name in BLOCK_ORDER) * 8
    if len(body) != expected:
        raise FileFormatError(f"Checkpoint body has {len(body)} bytes, expected {expected}")

    blocks: Dict[str, np.ndarray] = {}
    offset = 0
    for name in BLOCK_ORDER:
        size = int(np.prod(shapes[name]))
        blocks[name] = np.frombuffer(body, dtype="<f8", count=size, offset=offset).astype(np.float64).reshape(shapes[name])
        offset += size * 8
    logger.info(f"Loaded head checkpoint from {path} (D={D}, H={H}, d_out={d_out})")
    return HeadParams(dims=dims, blocks=blocks), T
