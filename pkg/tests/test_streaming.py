import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caface.autodiff import NonFiniteError
from caface.streaming import (
    FormatError,
    SessionError,
    absorb,
    batch_sums,
    finalize,
    load_snapshot,
    open_session,
    pooled_intermediate,
    snapshot_bytes,
)

from conftest import SMALL, make_model, random_records


def stream(model, rs, bounds, order=None):
    session = open_session(model.cfg)
    parts = [np.arange(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
    for k in (order if order is not None else range(len(parts))):
        absorb(session, rs[parts[k]], model)
    return session


def test_fresh_session_state():
    s = open_session(SMALL)
    assert s.a.shape == (SMALL.n_centers,) and not s.a.any()
    assert s.F_hat.dtype == np.float64
    with pytest.raises(SessionError):
        finalize(s, make_model())
    t = open_session(SMALL)
    t.a[0] = 1
    assert s.a[0] == 0


def test_single_batch_equals_concurrent(small_model):
    rs = random_records(SMALL, 12)
    s = stream(small_model, rs, [0, 12])
    out = finalize(s, small_model)
    direct = small_model.fuse(rs)
    np.testing.assert_allclose(out.fused, direct.fused, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(out.P, direct.P, atol=1e-6)


def test_two_batch_order_swap(small_model):
    rs = random_records(SMALL, 20, seed=3)
    a = stream(small_model, rs, [0, 7, 20], [0, 1])
    b = stream(small_model, rs, [0, 7, 20], [1, 0])
    for x, y in ((a.F_hat, b.F_hat), (a.S_hat, b.S_hat), (a.a, b.a)):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-12)


def test_incremental_matches_pooled(small_model):
    rs = random_records(SMALL, 30, seed=4)
    bounds = [0, 5, 17, 30]
    s = stream(small_model, rs, bounds)
    sums = [batch_sums(small_model, rs[np.arange(lo, hi)])[0] for lo, hi in zip(bounds[:-1], bounds[1:])]
    F, S, mass = pooled_intermediate(sums)
    np.testing.assert_allclose(s.F_hat, F, rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(s.S_hat, S, rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(s.a, mass, rtol=1e-12)


def test_finalize_is_non_destructive(small_model):
    rs = random_records(SMALL, 10)
    s = stream(small_model, rs, [0, 5])
    before = snapshot_bytes(s)
    first = finalize(s, small_model).fused
    assert snapshot_bytes(s) == before
    np.testing.assert_array_equal(first, finalize(s, small_model).fused)
    absorb(s, rs[np.arange(5, 10)], small_model)
    assert s.items_seen == 10


def test_single_item_session_returns_that_item(small_model):
    rs = random_records(SMALL, 1)
    s = stream(small_model, rs, [0, 1])
    np.testing.assert_allclose(finalize(s, small_model).fused, rs.features[0], rtol=1e-5, atol=1e-5)


def test_mass_is_monotone(small_model):
    rs = random_records(SMALL, 40, seed=2)
    s = open_session(SMALL)
    prev = s.a.copy()
    for lo in range(0, 40, 8):
        absorb(s, rs[np.arange(lo, lo + 8)], small_model)
        assert np.all(s.a >= prev)
        prev = s.a.copy()


@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 6))
def test_random_partitions_and_orders(seed, t):
    model = make_model()
    r = np.random.default_rng(seed)
    n = int(r.integers(t, 60))
    rs = random_records(SMALL, n, seed=seed % 1000)
    bounds = [0, *sorted(r.choice(np.arange(1, n), t - 1, replace=False)), n]
    a = finalize(stream(model, rs, bounds), model).fused
    b = finalize(stream(model, rs, bounds, r.permutation(t)), model).fused
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-7)


def test_batch_validation(small_model):
    s = open_session(SMALL)
    rs = random_records(SMALL, SMALL.max_batch + 1)
    with pytest.raises(SessionError):
        absorb(s, rs, small_model)
    with pytest.raises(SessionError):
        absorb(s, rs[np.arange(0)], small_model)
    bad = random_records(SMALL, 3)
    bad.features[1, 0] = np.nan
    with pytest.raises(NonFiniteError):
        absorb(s, bad, small_model)
    assert s.items_seen == 0 and not s.a.any()


def test_snapshot_round_trip_and_validation(small_model):
    s = stream(small_model, random_records(SMALL, 9), [0, 4, 9])
    blob = snapshot_bytes(s)
    restored = load_snapshot(blob)
    assert snapshot_bytes(restored) == blob
    assert restored.session_id == s.session_id and restored.items_seen == 9
    with pytest.raises(FormatError):
        load_snapshot(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        load_snapshot(blob[:-1])
    with pytest.raises(FormatError):
        load_snapshot(blob[:8])
    bumped = bytearray(blob)
    bumped[4] = 9
    with pytest.raises(FormatError):
        load_snapshot(bytes(bumped))
