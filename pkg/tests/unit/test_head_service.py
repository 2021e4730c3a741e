import numpy as np
import pytest

from src.models.batch import TokenGrid
from src.models.errors import DimensionMismatchError, FileFormatError, StaleCacheError
from src.models.head import BLOCK_ORDER, HeadDims
from src.services.head_service import (
    FrozenEncoder,
    MAPHead,
    head_backward,
    head_forward,
    init_head_params,
    load_checkpoint,
    save_checkpoint,
)

DIMS = HeadDims(width=8, heads=2, out=8)
N_TOKENS = 6
FD_STEP = 1e-5


@pytest.fixture
def params(rng):
    params = init_head_params(DIMS, rng)
    # Spread the query so attention is far from uniform and every block carries gradient.
    params.blocks["query"] = rng.normal(0.0, 0.5, size=(1, DIMS.width))
    for name in ("b_q", "b_k", "b_v", "b_o", "ln_bias", "b_1", "b_2", "b_p"):
        params.blocks[name] = rng.normal(0.0, 0.1, size=params.blocks[name].shape)
    params.blocks["ln_gain"] = 1.0 + rng.normal(0.0, 0.1, size=DIMS.width)
    return params


@pytest.fixture
def tokens(rng):
    return rng.standard_normal((N_TOKENS, DIMS.width))


def relative_error(exact, numeric, floor=1e-6):
    """Relative error; near-zero gradients are compared on an absolute scale of ``floor``."""
    return abs(exact - numeric) / max(abs(exact), abs(numeric), floor)


def test_init_shapes_and_values(rng):
    params = init_head_params(DIMS, rng)
    assert [name for name, _ in params.items()] == list(BLOCK_ORDER)
    np.testing.assert_array_equal(params["ln_gain"], 1.0)
    np.testing.assert_array_equal(params["b_k"], 0.0)
    assert np.all(np.abs(params["w_1"]) <= 1.0 / np.sqrt(DIMS.width))
    assert params.n_parameters() == sum(int(np.prod(shape)) for shape in DIMS.block_shapes().values())


def test_width_must_divide_heads():
    with pytest.raises(DimensionMismatchError):
        HeadDims(width=10, heads=4, out=8)


def test_output_is_unit_norm(params, rng):
    z = MAPHead(params).embed(rng.standard_normal((5, N_TOKENS, DIMS.width)))
    assert z.shape == (5, DIMS.out)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)


def test_token_order_does_not_matter(params, tokens, rng):
    head = MAPHead(params)
    shuffled = tokens[rng.permutation(N_TOKENS)]
    np.testing.assert_allclose(head.embed(shuffled), head.embed(tokens), atol=1e-12)


def test_duplicating_every_token_leaves_embedding_unchanged(params, tokens):
    head = MAPHead(params)
    np.testing.assert_allclose(head.embed(np.repeat(tokens, 2, axis=0)), head.embed(tokens), atol=1e-12)


def test_rejects_wrong_width(params, rng):
    with pytest.raises(DimensionMismatchError):
        MAPHead(params).forward(rng.standard_normal((N_TOKENS, DIMS.width + 1)))


def test_backward_matches_finite_differences(params, tokens, rng):
    """Scalar c . z differentiated w.r.t. every parameter and every input token."""
    c = rng.standard_normal(DIMS.out)
    grid = TokenGrid(tokens=tokens, fg_mask=np.ones(N_TOKENS, dtype=bool))

    def scalar(p, x):
        z, _ = head_forward(TokenGrid(tokens=x, fg_mask=grid.fg_mask), p)
        return float(c @ z)

    _, cache = head_forward(grid, params)
    param_grads, token_grads = head_backward(cache, c)
    assert token_grads.shape == tokens.shape

    worst = 0.0
    for name, value in params.items():
        for index in np.ndindex(value.shape):
            plus, minus = params.copy(), params.copy()
            plus.blocks[name][index] += FD_STEP
            minus.blocks[name][index] -= FD_STEP
            numeric = (scalar(plus, tokens) - scalar(minus, tokens)) / (2 * FD_STEP)
            worst = max(worst, relative_error(param_grads[name][index], numeric))
    for index in np.ndindex(tokens.shape):
        plus, minus = tokens.copy(), tokens.copy()
        plus[index] += FD_STEP
        minus[index] -= FD_STEP
        numeric = (scalar(params, plus) - scalar(params, minus)) / (2 * FD_STEP)
        worst = max(worst, relative_error(token_grads[index], numeric))
    assert worst <= 1e-4


def test_key_bias_gradient_vanishes(params, tokens, rng):
    # A key bias shifts every token score of a head equally, so softmax ignores it.
    _, cache = MAPHead(params).forward(tokens)
    grads, _ = MAPHead(params).backward(cache, rng.standard_normal((1, DIMS.out)))
    np.testing.assert_allclose(grads["b_k"], 0.0, atol=1e-12)


def test_relative_error_floor():
    assert relative_error(-6.9e-18, 3.1e-12) < 1e-5
    assert relative_error(1.0, 1.0 + 1e-3) == pytest.approx(1e-3, rel=1e-2)


def test_projection_bias_grad_is_orthogonal_to_embedding(params, tokens, rng):
    z, cache = MAPHead(params).forward(tokens)
    grads, _ = MAPHead(params).backward(cache, rng.standard_normal((1, DIMS.out)))
    assert abs(grads["b_p"] @ z[0]) < 1e-12


def test_zero_upstream_gradient(params, tokens):
    head = MAPHead(params)
    _, cache = head.forward(tokens)
    grads, token_grads = head.backward(cache, np.zeros((1, DIMS.out)))
    for name, value in grads.items():
        np.testing.assert_array_equal(value, 0.0, err_msg=name)
    np.testing.assert_array_equal(token_grads, 0.0)


def test_cache_is_single_use(params, tokens):
    head = MAPHead(params)
    _, cache = head.forward(tokens)
    head.backward(cache, np.ones((1, DIMS.out)))
    with pytest.raises(StaleCacheError):
        head.backward(cache, np.ones((1, DIMS.out)))


def test_cache_from_other_parameters_is_stale(params, tokens):
    _, cache = MAPHead(params).forward(tokens)
    with pytest.raises(StaleCacheError):
        MAPHead(params.copy()).backward(cache, np.ones((1, DIMS.out)))


def test_batched_backward_sums_parameter_grads(params, rng):
    grids = rng.standard_normal((3, N_TOKENS, DIMS.width))
    upstream = rng.standard_normal((3, DIMS.out))
    head = MAPHead(params)
    _, cache = head.forward(grids)
    batched, _ = head.backward(cache, upstream)

    total = np.zeros_like(params["w_k"])
    for b in range(3):
        _, single = head.forward(grids[b])
        grads, _ = head.backward(single, upstream[b:b + 1])
        total += grads["w_k"]
    np.testing.assert_allclose(batched["w_k"], total, atol=1e-12)


class TestFrozenEncoder:
    def test_has_no_trainable_parameters(self):
        assert FrozenEncoder.n_trainable == 0

    def test_mean_pools_and_normalizes(self, tokens):
        z = FrozenEncoder().embed(tokens)
        expected = tokens.mean(axis=0) / np.linalg.norm(tokens.mean(axis=0))
        np.testing.assert_allclose(z[0], expected)


class TestCheckpoint:
    def test_roundtrip(self, params, tmp_path):
        path = tmp_path / "nested" / "head.ckpt"
        save_checkpoint(str(path), params, N_TOKENS)
        loaded, n_tokens = load_checkpoint(str(path))
        assert n_tokens == N_TOKENS
        assert loaded.dims == DIMS
        for name, value in params.items():
            np.testing.assert_array_equal(loaded[name], value)

    def test_resave_is_byte_identical(self, params, tmp_path):
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        save_checkpoint(str(first), params, N_TOKENS)
        save_checkpoint(str(second), load_checkpoint(str(first))[0], N_TOKENS)
        assert first.read_bytes() == second.read_bytes()

    def test_corrupted_body(self, params, tmp_path):
        path = tmp_path / "head.ckpt"
        save_checkpoint(str(path), params, N_TOKENS)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(FileFormatError):
            load_checkpoint(str(path))

    def test_truncated(self, params, tmp_path):
        path = tmp_path / "head.ckpt"
        save_checkpoint(str(path), params, N_TOKENS)
        path.write_bytes(path.read_bytes()[:10])
        with pytest.raises(FileFormatError):
            load_checkpoint(str(path))
