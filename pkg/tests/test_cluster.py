import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caface import autodiff as ad
from caface.cluster import MASS_EPS, AssignmentMap, ClusterNetwork, assignment_map, cluster
from caface.config import ModelConfig

from conftest import SMALL

D = SMALL.style_dim


def net(seed=0, cfg=SMALL):
    return ClusterNetwork(cfg, np.random.default_rng(seed)).astype(np.float64)


def f64(x):
    return ad.tensor(x, dtype=np.float64)


def amap_from(A):
    A = f64(A)
    return AssignmentMap(A, A.sum(axis=-1, keepdims=True))


def test_key_embedding_is_permutation_equivariant(rng):
    cn = net()
    S = rng.normal(size=(7, D))
    perm = rng.permutation(7)
    a = cn.embed_keys(f64(S)).data
    b = cn.embed_keys(f64(S[perm])).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_key_embedding_single_item_and_layer_norm_bound(rng):
    cn = net()
    one = cn.embed_keys(f64(rng.normal(size=(1, D)))).data
    assert one.shape == (1, D)
    cn.ln_out.params["gain"].data[:] = 1
    cn.ln_out.params["bias"].data[:] = 0
    out = cn.embed_keys(f64(rng.normal(size=(20, D)) * 5)).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-3)


def test_assignment_zero_logits_uniform():
    K = np.zeros((5, D))
    A = assignment_map(f64(K), f64(np.ones((3, D))), f64(np.eye(D)), f64(np.eye(D))).A.data
    np.testing.assert_allclose(A, 1 / 3)


def test_assignment_single_center_is_ones(rng):
    A = assignment_map(f64(rng.normal(size=(6, D))), f64(rng.normal(size=(1, D))),
                       f64(rng.normal(size=(D, D))), f64(rng.normal(size=(D, D)))).A.data
    np.testing.assert_array_equal(A, np.ones((1, 6)))


def test_assignment_hand_logits():
    # logits = C K^T / sqrt(d) with d = 1 so the logits are set directly
    C = f64([[1.0], [0.0]])
    K = f64([[0.0], [math.log(3)]])
    A = assignment_map(K, C, f64([[1.0]]), f64([[1.0]])).A.data
    np.testing.assert_allclose(A[:, 0], [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(A[:, 1], [0.75, 0.25], atol=1e-12)


def test_cluster_examples(rng):
    V = rng.normal(size=(1, 5))
    out = cluster(amap_from(np.full((3, 1), 1 / 3)), f64(V)).data
    np.testing.assert_allclose(out, np.repeat(V, 3, 0), atol=1e-7)
    V = rng.normal(size=(4, 5))
    out = cluster(amap_from(np.full((2, 4), 0.5)), f64(V)).data
    np.testing.assert_allclose(out, np.repeat(V.mean(0, keepdims=True), 2, 0), atol=1e-7)


def test_cluster_weighted_mean_oracle(rng):
    A = np.array([[0.1, 0.7, 0.4, 0.9], [0.9, 0.3, 0.6, 0.1]])
    V = rng.normal(size=(4, 3))
    got = cluster(amap_from(A), f64(V)).data
    for j in range(2):
        total = sum(A[j, i] for i in range(4))
        for c in range(3):
            want = sum(A[j, i] * V[i, c] for i in range(4)) / (total + MASS_EPS)
            assert got[j, c] == pytest.approx(want, abs=1e-6)


def test_cluster_is_linear_in_values(rng):
    am = amap_from(ad.softmax_cols(f64(rng.normal(size=(3, 6)))).data)
    V1, V2 = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    lhs = cluster(am, f64(2.5 * V1 - 0.7 * V2)).data
    rhs = 2.5 * cluster(am, f64(V1)).data - 0.7 * cluster(am, f64(V2)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_cluster_network_permutation_invariance_and_duplication(rng):
    cn = net()
    S, F = rng.normal(size=(9, D)), rng.normal(size=(9, SMALL.feat_dim))
    inter, am = cn(f64(S), f64(F))
    perm = rng.permutation(9)
    inter_p, am_p = cn(f64(S[perm]), f64(F[perm]))
    np.testing.assert_allclose(inter_p.F_prime.data, inter.F_prime.data, atol=1e-5)
    np.testing.assert_allclose(inter_p.S_prime.data, inter.S_prime.data, atol=1e-5)
    np.testing.assert_allclose(am_p.row_mass.data, am.row_mass.data, atol=1e-5)
    np.testing.assert_allclose(am_p.A.data, am.A.data[:, perm], atol=1e-12)


def test_duplicated_items_at_fixed_keys(rng):
    # center tokens attend alongside items, so duplication is checked after key embedding
    cn = net()
    S, F = rng.normal(size=(9, D)), rng.normal(size=(9, SMALL.feat_dim))
    K = cn.embed_keys(f64(S))
    am = cn.assignment_map(K)
    am_d = cn.assignment_map(ad.concat([K, K], axis=0))
    F2 = f64(np.concatenate([F, F]))
    np.testing.assert_allclose(cluster(am_d, F2).data, cluster(am, f64(F)).data, atol=1e-10)
    np.testing.assert_allclose(am_d.row_mass.data, 2 * am.row_mass.data, atol=1e-12)


def test_cluster_network_matches_direct_expression(rng):
    """Assignment and cluster rows written as one expression from the layer outputs."""
    cn = net()
    S, F = rng.normal(size=(6, D)), rng.normal(size=(6, SMALL.feat_dim))
    inter, _ = cn(f64(S), f64(F))
    K = cn.embed_keys(f64(S)).data
    C, Wq, Wk = cn.centers.data, cn.params["w_q"].data, cn.params["w_k"].data
    logits = (C @ Wq) @ (K @ Wk).T / np.sqrt(D)
    A = np.exp(logits - logits.max(0)) / np.exp(logits - logits.max(0)).sum(0)
    want = (A @ F) / (A.sum(1, keepdims=True) + MASS_EPS)
    np.testing.assert_allclose(inter.F_prime.data, want, atol=1e-6)


@given(st.integers(1, 64), st.integers(0, 2 ** 31 - 1))
def test_columns_stochastic_and_rows_convex(n, seed):
    r = np.random.default_rng(seed)
    cn = net(seed % 7)
    S, F = r.normal(size=(n, D)) * 3, r.normal(size=(n, SMALL.feat_dim))
    inter, am = cn(f64(S), f64(F))
    np.testing.assert_allclose(am.A.data.sum(axis=0), 1.0, atol=1e-6)
    lo, hi = F.min(0), F.max(0)
    assert np.all(inter.F_prime.data >= lo - 1e-6) and np.all(inter.F_prime.data <= hi + 1e-6)


def test_leading_batch_dims_match_loop(rng):
    cn = net()
    S, F = rng.normal(size=(3, 5, D)), rng.normal(size=(3, 5, SMALL.feat_dim))
    batched = cn(f64(S), f64(F))[0].F_prime.data
    for b in range(3):
        np.testing.assert_allclose(batched[b], cn(f64(S[b]), f64(F[b]))[0].F_prime.data, atol=1e-10)


def test_mismatched_items_rejected(rng):
    with pytest.raises(ValueError):
        net()(f64(rng.normal(size=(3, D))), f64(rng.normal(size=(4, SMALL.feat_dim))))


def test_default_config_sizes():
    cfg = ModelConfig()
    assert cfg.style_dim == 128 and cfg.style_dim % cfg.n_heads == 0
