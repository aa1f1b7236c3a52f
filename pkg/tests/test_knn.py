import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgul.encoders import RgcnParams, dense_operator, rgcn_forward
from hgul.knn import (
    KnnConfig,
    build_knn_edges,
    build_similarity_graph,
    knn_encode,
    knn_operators,
    similarity_matrix,
    topk_mask,
)
from hgul.tensor import Tensor, check_gradients, mul, sum_all

from conftest import make_graph


def brute_topk(S, k):
    """Sort each row by (-value, column) and take the first k."""
    out = np.zeros(S.shape, dtype=bool)
    for i, row in enumerate(S):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        out[i, order[:k]] = True
    return out


# -- similarity ---------------------------------------------------------------------


def test_similarity_identical_and_orthogonal():
    h = np.array([[3.0, 4.0], [0.0, 2.0], [-5.0, 0.0]])
    S = similarity_matrix(h, h).values
    np.testing.assert_allclose(np.diag(S), 1.0, atol=1e-12)
    assert abs(similarity_matrix([[1.0, 0.0]], [[0.0, 7.0]]).item()) < 1e-12


def test_similarity_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
    S = similarity_matrix(a, b).values
    for i in range(3):
        for j in range(4):
            oracle = a[i] @ b[j] / (np.linalg.norm(a[i]) * np.linalg.norm(b[j]) + 1e-12)
            assert abs(S[i, j] - oracle) < 1e-12


def test_similarity_of_zero_row_is_zero():
    S = similarity_matrix(np.zeros((1, 3)), np.ones((2, 3))).values
    np.testing.assert_array_equal(S, 0.0)


def test_similarity_gradients():
    rng = np.random.default_rng(1)
    b = rng.standard_normal((4, 3))
    W = rng.standard_normal((3, 4))
    assert check_gradients(lambda x: sum_all(mul(similarity_matrix(x, b), W)), Tensor(rng.standard_normal((3, 3)))) < 1e-6


# -- selection --------------------------------------------------------------------------


def test_k_at_least_width_is_complete():
    S = np.random.default_rng(2).standard_normal((3, 4))
    assert len(build_knn_edges(S, 4)) == 12
    assert len(build_knn_edges(S, 10)) == 12


def test_tie_goes_to_smaller_column():
    edges = build_knn_edges(np.array([[0.9, 0.1, 0.9]]), 1)
    assert edges == [(0, 0, 0.9)]


def test_random_6x6_matches_brute_force():
    S = np.random.default_rng(3).standard_normal((6, 6))
    assert np.array_equal(topk_mask(S, 2), brute_topk(S, 2))


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 9), st.integers(0, 10_000))
def test_topk_matches_brute_force_with_ties(n, m, k, seed):
    # rounded values force ties
    S = np.round(np.random.default_rng(seed).standard_normal((n, m)), 1)
    assert np.array_equal(topk_mask(S, k), brute_topk(S, k))


def test_k_must_be_positive():
    with pytest.raises(ValueError):
        KnnConfig(k=0)
    with pytest.raises(ValueError):
        topk_mask(np.ones((2, 2)), 0)


# -- contracts over random feature matrices -----------------------------------------------


def _feature_graph(seed, n_p=7, n_a=5):
    g = make_graph(
        {"p": n_p, "a": n_a},
        [("p", "c", "p", [[0, 1]], True), ("a", "w", "p", [[0, 0]], True)],
        "p",
        np.arange(n_p) % 2,
        seed=seed,
    )
    rng = np.random.default_rng(seed + 1)
    proj = {t: Tensor(rng.standard_normal((g.num_nodes(t), 4))) for t in g.node_types}
    return g, proj


@settings(max_examples=100)
@given(st.integers(0, 100_000), st.integers(1, 9))
def test_out_degree_exactness(seed, k):
    g, proj = _feature_graph(seed)
    sg = build_similarity_graph(g, proj, KnnConfig(k=k, direction="src"))
    for rel in g.directed_relations:
        mask = sg.masks[rel.key]
        candidates = mask.shape[1] - (1 if rel.src_type == rel.dst_type else 0)
        np.testing.assert_array_equal(mask.sum(axis=1), min(k, candidates))
        if rel.src_type == rel.dst_type:
            assert not np.diag(mask).any()
        w = sg.weights[rel.key].values[mask]
        assert np.all((w >= -1) & (w <= 1))


@settings(max_examples=100)
@given(st.integers(0, 100_000), st.integers(1, 8), st.sampled_from(["src", "both"]))
def test_k_monotonicity(seed, k, direction):
    g, proj = _feature_graph(seed)
    small = build_similarity_graph(g, proj, KnnConfig(k=k, direction=direction))
    big = build_similarity_graph(g, proj, KnnConfig(k=k + 1, direction=direction))
    for key in small.masks:
        assert not (small.masks[key] & ~big.masks[key]).any()


@settings(max_examples=100)
@given(st.integers(0, 100_000), st.integers(1, 6))
def test_scale_invariance(seed, k):
    g, proj = _feature_graph(seed)
    rng = np.random.default_rng(seed + 2)
    scaled = {t: Tensor(v.values * rng.choice([0.5, 2.0, 4.0, 0.25], size=(v.shape[0], 1))) for t, v in proj.items()}
    a = build_similarity_graph(g, proj, KnnConfig(k=k))
    b = build_similarity_graph(g, scaled, KnnConfig(k=k))
    for key in a.masks:
        assert np.array_equal(a.masks[key], b.masks[key])


def test_both_direction_is_union():
    g, proj = _feature_graph(4)
    src = build_similarity_graph(g, proj, KnnConfig(k=2, direction="src"))
    both = build_similarity_graph(g, proj, KnnConfig(k=2, direction="both"))
    for rel in g.directed_relations:
        S = src.weights[rel.key].values
        excl = np.eye(*S.shape, dtype=bool) if rel.src_type == rel.dst_type else None
        dst_side = topk_mask(S.T, 2, None if excl is None else excl.T).T
        assert np.array_equal(both.masks[rel.key], src.masks[rel.key] | dst_side)


def test_keep_negative_flag_drops_negative_weights():
    g, proj = _feature_graph(5)
    sg = build_similarity_graph(g, proj, KnnConfig(k=4, keep_negative=False))
    for key, m in sg.masks.items():
        assert np.all(sg.weights[key].values[m] > 0)


# -- encoding --------------------------------------------------------------------------------


def test_large_k_equals_complete_weighted_graph():
    g, proj = _feature_graph(6)
    rng = np.random.default_rng(6)
    enc = RgcnParams.init({t: 4 for t in g.node_types}, g.directed_relations, 3, rng)
    out = knn_encode(g, proj, KnnConfig(k=50), enc)
    ops = {}
    for rel in g.directed_relations:
        S = similarity_matrix(proj[rel.src_type], proj[rel.dst_type]).values
        full = np.ones(S.shape, dtype=bool)
        if rel.src_type == rel.dst_type:
            np.fill_diagonal(full, False)
        ops[rel.key] = dense_operator(S.T, full.T)
    expected = rgcn_forward(proj, ops, enc)
    for t in g.node_types:
        np.testing.assert_allclose(out[t].values, expected[t].values, atol=1e-12)


def test_single_node_same_type_graph_is_self_only():
    g = make_graph({"p": 1}, [("p", "c", "p", np.zeros((0, 2)), True)], "p", [0])
    proj = {"p": Tensor(np.array([[1.0, 2.0]]))}
    enc = RgcnParams.init({"p": 2}, g.directed_relations, 3, np.random.default_rng(0))
    out = knn_encode(g, proj, KnnConfig(k=3), enc)["p"].values
    np.testing.assert_allclose(out, proj["p"].values @ enc.w_self["p"].values + enc.bias["p"].values, atol=1e-15)


def test_ten_node_pipeline_composes_oracles():
    g, proj = _feature_graph(7, n_p=6, n_a=4)
    rng = np.random.default_rng(7)
    enc = RgcnParams.init({t: 4 for t in g.node_types}, g.directed_relations, 3, rng)
    out = knn_encode(g, proj, KnnConfig(k=2), enc)
    # oracle: pairwise similarity, brute top-k from both sides, weighted row mean, dense R-GCN
    ops = {}
    for rel in g.directed_relations:
        a, b = proj[rel.src_type].values, proj[rel.dst_type].values
        S = np.array([[x @ y / (np.linalg.norm(x) * np.linalg.norm(y) + 1e-12) for y in b] for x in a])
        Sx = S.copy()
        if rel.src_type == rel.dst_type:
            np.fill_diagonal(Sx, -np.inf)
        mask = brute_topk(Sx, 2) | brute_topk(Sx.T, 2).T
        M = (S * mask).T
        deg = mask.T.sum(axis=1, keepdims=True)
        ops[rel.key] = M / np.maximum(deg, 1)
    for t in g.node_types:
        h = proj[t].values @ enc.w_self[t].values + enc.bias[t].values
        for rel in g.directed_relations:
            if rel.dst_type == t:
                h = h + ops[rel.key] @ proj[rel.src_type].values @ enc.w_rel[rel.key].values
        np.testing.assert_allclose(out[t].values, h, atol=1e-12)


def test_knn_operator_gradient_through_similarity():
    g, proj = _feature_graph(8)
    sg = build_similarity_graph(g, proj, KnnConfig(k=2))
    key = g.directed_relations[0].key
    mask = sg.masks[key]
    W = np.random.default_rng(8).standard_normal(mask.T.shape)
    b = proj["p"].values

    def f(x):
        S = similarity_matrix(x, b)
        return sum_all(mul(dense_operator(S.T, mask.T), W))

    assert check_gradients(f, Tensor(proj["p"].values.copy())) < 1e-6
    assert knn_operators(sg)[key].shape == mask.T.shape
