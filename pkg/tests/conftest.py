import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hgul.graph import HeteroGraph, MetaRelation, RelationSpec, SyntheticConfig, generate_synthetic
from hgul.spectral import block_laplacian_from_adjacency

settings.register_profile("hgul", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("hgul")


def tiny_config(seed=0, n_target=12, n_other=8, sep=1.0, p_intra=0.3, p_inter=0.1, classes=2, dim=4):
    return SyntheticConfig(
        node_counts={"p": n_target, "a": n_other},
        target_type="p",
        relations=(
            RelationSpec("p", "cites", "p", p_intra, p_inter),
            RelationSpec("a", "writes", "p", p_intra, p_inter),
        ),
        num_classes=classes,
        feature_dim=dim,
        class_sep=sep,
        train_frac=0.34,
        val_frac=0.33,
        seed=seed,
    )


def make_graph(node_counts, relations, target, labels, dims=None, seed=0, masks=None):
    """Hand-built graph; ``relations`` is a list of (src, name, dst, edges, symmetric)."""
    rng = np.random.default_rng(seed)
    dims = dims or {t: 3 for t in node_counts}
    feats = {t: rng.standard_normal((n, dims[t])) for t, n in node_counts.items()}
    rels = tuple(MetaRelation(s, nm, d, np.asarray(e, dtype=np.int64).reshape(-1, 2), sym) for s, nm, d, e, sym in relations)
    labels = np.asarray(labels)
    n = labels.size
    if masks is None:
        train = np.ones(n, dtype=bool)
        val = np.zeros(n, dtype=bool)
        test = np.zeros(n, dtype=bool)
    else:
        train, val, test = (np.asarray(m, dtype=bool) for m in masks)
    return HeteroGraph(tuple(node_counts), feats, rels, target, labels, train, val, test)


def random_two_type(n1, n2, seed, p=0.3):
    """Random symmetric blocks where every type-1 node has a cross edge, so I - Â1 is invertible."""
    rng = np.random.default_rng(seed)
    a1 = np.triu(rng.random((n1, n1)) < p, k=1).astype(float)
    a2 = np.triu(rng.random((n2, n2)) < p, k=1).astype(float)
    b = (rng.random((n1, n2)) < p).astype(float)
    b[np.arange(n1), rng.integers(0, n2, n1)] = 1.0
    return block_laplacian_from_adjacency(a1 + a1.T, a2 + a2.T, b)


@pytest.fixture
def tiny_graph():
    return generate_synthetic(tiny_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
