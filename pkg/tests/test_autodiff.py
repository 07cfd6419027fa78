import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caface import autodiff as ad


def leaf(x):
    return ad.tensor(x, requires_grad=True, dtype=np.float64)


def f64(x):
    return ad.tensor(x, dtype=np.float64)


def grad_of(fn, *xs):
    with ad.Tape() as tape:
        out = fn(*xs)
    tape.backward(out)
    return [x.grad for x in xs]


# ---------------------------------------------------------------- matmul


def test_matmul_identity_and_hand_case():
    a = ad.tensor(np.eye(2))
    b = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ b).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal((ad.tensor([[1.0, 2.0]]) @ ad.tensor([[3.0], [4.0]])).data, [[11]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    want = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    got = (ad.tensor(a, dtype=np.float32) @ ad.tensor(b, dtype=np.float32)).data
    np.testing.assert_allclose(got, want, atol=1e-6 * 10)  # float32 storage
    np.testing.assert_allclose((ad.tensor(a) @ ad.tensor(b)).data, want, atol=1e-12)


def test_matmul_rejects_mismatched_inner_dims():
    with pytest.raises(ValueError):
        ad.tensor(np.ones((2, 3))) @ ad.tensor(np.ones((2, 3)))


def test_batched_matmul_shared_weight_grad(rng):
    x, w = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
    err = ad.finite_difference_check(lambda: ((x @ w) * (x @ w)).sum(), [x, w], h=1e-5)
    assert err < 1e-6


# ---------------------------------------------------------------- softmax


def test_softmax_cols_examples():
    np.testing.assert_allclose(ad.softmax_cols(ad.tensor(np.zeros((3, 2)))).data, 1 / 3)
    col = ad.softmax_cols(ad.tensor([[0.0], [math.log(3)]])).data[:, 0]
    np.testing.assert_allclose(col, [0.25, 0.75], atol=1e-7)


def test_softmax_scalar_oracle(rng):
    x = rng.normal(size=(4, 3)) * 3
    got = ad.softmax_cols(ad.tensor(x, dtype=np.float64)).data
    for c in range(3):
        z = sum(math.exp(v) for v in x[:, c])
        for r in range(4):
            assert got[r, c] == pytest.approx(math.exp(x[r, c]) / z, abs=1e-12)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31 - 1), st.floats(1e-3, 1e4))
def test_softmax_cols_stochastic_for_extreme_logits(m, n, seed, scale):
    x = np.random.default_rng(seed).uniform(-1, 1, (m, n)) * scale
    p = ad.softmax_cols(ad.tensor(x, dtype=np.float32)).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-6)


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(3, 4))
    shifted = x + rng.normal(size=(1, 4)) * 50
    np.testing.assert_allclose(ad.softmax_cols(f64(x)).data, ad.softmax_cols(f64(shifted)).data,
                               atol=1e-12)


# ---------------------------------------------------------------- layer norm


def test_layer_norm_examples(rng):
    g, b = ad.tensor(np.ones(2)), ad.tensor(np.zeros(2))
    np.testing.assert_allclose(ad.layer_norm(ad.tensor([[5.0, 5.0]]), g, b).data, 0.0)
    np.testing.assert_allclose(ad.layer_norm(ad.tensor([[1.0, -1.0]]), g, b).data, [[1, -1]], atol=1e-5)
    row = rng.normal(3, 7, size=(1, 64))
    out = ad.layer_norm(ad.tensor(row), ad.tensor(np.ones(64)), ad.tensor(np.zeros(64))).data
    assert abs(out.mean()) < 1e-6
    assert abs(out.var() - 1) < 1e-3


# ---------------------------------------------------------------- backward


def test_backward_hand_cases(rng):
    x = leaf([3.0])
    (g,) = grad_of(lambda t: (t * t).sum(), x)
    np.testing.assert_allclose(g, [6.0])
    y = leaf(rng.normal(size=5))
    (g,) = grad_of(lambda t: ad.softmax(t, axis=0).sum(), y)
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with ad.Tape() as tape:
        out = x * 2
    with pytest.raises(ValueError):
        tape.backward(out)


def test_tensor_rejects_non_finite():
    with pytest.raises(ad.NonFiniteError):
        ad.tensor([1.0, np.nan])
    with pytest.raises(ad.NonFiniteError):
        ad.tensor([np.inf])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.Tape() as tape:
        with ad.no_grad():
            _ = x * x
    assert tape.nodes == []


def test_replay_reproduces_forward(rng):
    x = leaf(rng.normal(size=(3, 4)))
    with ad.Tape() as tape:
        ad.softmax_cols(x @ f64(rng.normal(size=(4, 4))))
    replayed = tape.replay()
    for node, value in zip(tape.nodes, replayed):
        np.testing.assert_array_equal(node.output.data, value)


def test_composite_matches_finite_differences(rng):
    x = leaf(rng.normal(size=(3, 4)))
    w = leaf(rng.normal(size=(4, 4)))
    g, b = leaf(rng.normal(size=4)), leaf(rng.normal(size=4))
    t = rng.normal(size=(3, 4))

    def fn():
        h = ad.layer_norm(ad.softmax_cols(x @ w), g, b)
        return (h * f64(t)).sum()

    assert ad.finite_difference_check(fn, [x, w, g, b], h=1e-3) < 1e-4


def test_finite_difference_check_trivial_functions(rng):
    x = leaf(rng.normal(size=3))
    assert ad.finite_difference_check(lambda: (x * 0.0).sum(), [x]) == 0.0
    c = rng.normal(size=3)
    assert ad.finite_difference_check(lambda: (x * f64(c)).sum(), [x], floor=1e-12) < 1e-7


UNARY = {
    "exp": ad.exp,
    "log": lambda t: ad.log(t * t + 1.0),
    "sqrt": lambda t: ad.sqrt(t * t + 1.0),
    "square": ad.square,
    "gelu": ad.gelu,
    "neg": ad.neg,
    "softmax_rows": ad.softmax_rows,
    "softmax_cols": ad.softmax_cols,
    "swap_last": lambda t: t.swap_last(),
    "reshape": lambda t: t.reshape(-1, 2),
    "getitem": lambda t: t[1:, ::2],
    "permute": lambda t: ad.permute(t, (1, 0)),
    "mean": lambda t: t.mean(axis=0, keepdims=True),
    "sum": lambda t: t.sum(axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_unary_ops_match_finite_differences(name, seed):
    r = np.random.default_rng(seed)
    x = leaf(r.normal(size=(3, 4)))
    weights = r.normal(size=UNARY[name](ad.tensor(np.zeros((3, 4)))).shape)
    err = ad.finite_difference_check(lambda: (UNARY[name](x) * f64(weights)).sum(), [x], h=1e-5)
    assert err < 1e-4


def test_relu_away_from_kink(rng):
    x = leaf(np.sign(rng.normal(size=6)) * rng.uniform(0.1, 1, 6))
    assert ad.finite_difference_check(lambda: (ad.relu(x) * f64(np.arange(6.0))).sum(), [x], h=1e-5) < 1e-8


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, b * b + 1.0),
    "matmul": lambda a, b: a @ b.swap_last(),
    "concat": lambda a, b: ad.concat([a, b], axis=0),
    "layer_norm_like": lambda a, b: ad.layer_norm(a, b[0], b[1]),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@given(seed=st.integers(0, 2 ** 31 - 1), broadcast=st.booleans())
def test_binary_ops_match_finite_differences(name, seed, broadcast):
    r = np.random.default_rng(seed)
    a = leaf(r.normal(size=(3, 4)))
    shape = (1, 4) if broadcast and name in ("add", "sub", "mul", "div") else (3, 4)
    b = leaf(r.normal(size=shape))
    out_shape = BINARY[name](ad.tensor(np.ones((3, 4))), ad.tensor(np.ones(shape))).shape
    weights = r.normal(size=out_shape)
    err = ad.finite_difference_check(lambda: (BINARY[name](a, b) * f64(weights)).sum(), [a, b], h=1e-5)
    assert err < 1e-4


def test_broadcast_to_grad_sums_back(rng):
    x = leaf(rng.normal(size=(1, 3)))
    (g,) = grad_of(lambda t: ad.broadcast_to(t, (4, 3)).sum(), x)
    np.testing.assert_allclose(g, 4.0)


def test_forward_is_bit_deterministic(rng):
    x = rng.normal(size=(5, 7)).astype(np.float32)
    w = rng.normal(size=(7, 7)).astype(np.float32)

    def run():
        return ad.gelu(ad.softmax_cols(ad.tensor(x) @ ad.tensor(w))).data

    assert run().tobytes() == run().tobytes()
