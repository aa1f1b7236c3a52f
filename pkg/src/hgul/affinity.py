"""Class-level affinity from a personalized-PageRank kernel, and the gated fusion it feeds.

The kernel is the truncated Neumann series ``sum_k alpha^k Â^k`` of
``(I - alpha Â)^{-1}``; the class affinity is ``Y^T K Y``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .encoders import RgcnParams, init_bias, init_weight, original_operators, stack_rgcn
from .graph import HeteroGraph, normalize_adjacency
from .tensor import (
    Tensor,
    Tape,
    add,
    as_tensor,
    clamp_min,
    concat_cols,
    cross_entropy,
    div,
    make_op,
    matmul,
    mul,
    sigmoid,
    softmax_rows,
    sub,
    sum_rows,
)


@dataclass(frozen=True)
class PprConfig:
    alpha: float = 0.85
    max_iter: int = 200
    tol: float = 1e-10

    def __post_init__(self):
        # alpha = 0 is accepted as a test knob (kernel collapses to I)
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class AffinityMatrix:
    values: np.ndarray
    surrogate: bool = False


@dataclass
class SurrogateLabels:
    probs: np.ndarray  # n_t x C, train rows one-hot
    train_accuracy: float = float("nan")


# -- kernel -----------------------------------------------------------------


def _series(apply, start: np.ndarray, cfg: PprConfig, n_terms: int | None = None) -> tuple[np.ndarray, int]:
    """Sum ``alpha^k M^k start`` with ``apply(x) = M x``; returns (sum, terms used)."""
    total = start.copy()
    term = start
    used = 1
    limit = cfg.max_iter if n_terms is None else n_terms - 1
    for _ in range(limit):
        if n_terms is None and (cfg.alpha == 0.0 or np.linalg.norm(term) < cfg.tol):
            break
        term = cfg.alpha * apply(term)
        total += term
        used += 1
    return total, used


def ppr_kernel(a_hat: np.ndarray, cfg: PprConfig = PprConfig()) -> np.ndarray:
    """Dense truncated kernel ``sum_{k<=K} alpha^k Â^k``.

    Stops once the Frobenius norm of the latest term drops below ``cfg.tol``.
    """
    kernel, _ = ppr_kernel_terms(a_hat, cfg)
    return kernel


def ppr_kernel_terms(a_hat: np.ndarray, cfg: PprConfig = PprConfig()) -> tuple[np.ndarray, int]:
    """Like :func:`ppr_kernel` but also returns the highest power used."""
    a_hat = np.asarray(a_hat, dtype=np.float64)
    n = a_hat.shape[0]
    kernel, used = _series(lambda x: a_hat @ x, np.eye(n), cfg)
    return kernel, used - 1


def ppr_block(a_hat: Tensor, index: np.ndarray, cfg: PprConfig) -> Tensor:
    """Differentiable ``K[index, index]`` of the kernel of ``a_hat``."""
    index = np.asarray(index, dtype=np.int64)
    basis = np.zeros((as_tensor(a_hat).shape[0], index.size))
    basis[index, np.arange(index.size)] = 1.0
    return ppr_quadratic(a_hat, basis, cfg)


def ppr_quadratic(a_hat: Tensor, V: np.ndarray, cfg: PprConfig) -> Tensor:
    """Differentiable ``V^T K(Â) V`` for a constant ``V`` (N x c).

    The forward series runs on the ``c`` columns of ``V`` with sparse
    products.  The backward pass uses the resolvent identity
    ``dL/dÂ = alpha (K^T V) G (K V)^T`` with the same number of terms.
    """
    a_hat = as_tensor(a_hat)
    V = np.asarray(V, dtype=np.float64)
    mat = sp.csr_matrix(a_hat.values)
    cols, used = _series(lambda x: mat @ x, V, cfg)

    def backward(g):
        mat_t = mat.T.tocsr()
        rows_t, _ = _series(lambda x: mat_t @ x, V, cfg, n_terms=used)
        return (cfg.alpha * (rows_t @ g) @ cols.T,)

    return make_op(V.T @ cols, (a_hat,), backward)


def extended_affinity(a_hat: np.ndarray, Y: np.ndarray, cfg: PprConfig = PprConfig()) -> AffinityMatrix:
    """``C = Y^T K(Â) Y`` for an already normalized adjacency.

    The series runs on the columns of ``Y`` (early stop on ``alpha^k Â^k Y``),
    the same truncation :func:`hetero_affinity` uses.
    """
    a_hat = np.asarray(a_hat, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape[0] != a_hat.shape[0]:
        raise ValueError(f"label rows ({Y.shape[0]}) do not match adjacency size ({a_hat.shape[0]})")
    return AffinityMatrix(ppr_quadratic(Tensor(a_hat), Y, cfg).values)


# -- heterogeneous affinity ---------------------------------------------------


@dataclass
class TypeImportance:
    R: Tensor

    @classmethod
    def init(cls, num_types: int):
        return cls(Tensor(np.ones((num_types, num_types)), requires_grad=True, name="type_importance"))

    def parameters(self) -> list[Tensor]:
        return [self.R]


def _expand_blocks(R: Tensor, type_index: np.ndarray) -> Tensor:
    """N x N matrix with entry ``R[phi(i), phi(j)]``."""
    R = as_tensor(R)
    k = R.shape[0]
    flat = type_index[:, None] * k + type_index[None, :]

    def backward(g):
        return (np.bincount(flat.reshape(-1), weights=g.reshape(-1), minlength=k * k).reshape(k, k),)

    return make_op(R.values[type_index][:, type_index], (R,), backward)


def reweight_adjacency(graph: HeteroGraph, R, adjacency: np.ndarray | None = None) -> Tensor:
    """``Ā_ij = A_ij R[phi(i), phi(j)]`` over the concatenated node ordering."""
    R = R.R if isinstance(R, TypeImportance) else as_tensor(R)
    k = len(graph.node_types)
    if R.shape != (k, k):
        raise ValueError(f"type importance must be {k}x{k}, got {R.shape}")
    A = graph.full_adjacency() if adjacency is None else adjacency
    return mul(_expand_blocks(R, graph.type_index), A)


def hetero_affinity(a_bar, target_index: np.ndarray, Y_t: np.ndarray, cfg: PprConfig = PprConfig()) -> Tensor:
    """``Y_t^T B_t Y_t`` with ``B_t`` the target block of the kernel of normalize(Ā)."""
    target_index = np.asarray(target_index, dtype=np.int64)
    if target_index.size == 0:
        raise ValueError("target type has no nodes")
    Y_t = np.asarray(Y_t, dtype=np.float64)
    a_bar = as_tensor(a_bar)
    # Y_t^T B[t, t] Y_t == V^T B V with V the target rows of Y_t embedded in N rows
    V = np.zeros((a_bar.shape[0], Y_t.shape[1]))
    V[target_index] = Y_t
    return ppr_quadratic(normalize_adjacency(a_bar), V, cfg)


def node_affinity(C_hat, Y_t: np.ndarray) -> Tensor:
    """Row-normalized ``max(Y C Y^T, 0)``; all-zero rows fall back to the identity row."""
    Y_t = np.asarray(Y_t, dtype=np.float64)
    raw = clamp_min(matmul(matmul(Y_t, C_hat), Y_t.T), 0.0)
    rows = raw.values.sum(axis=1)
    empty = rows <= 0
    if empty.any():
        raw = add(raw, np.diag(empty.astype(np.float64)))
    return div(raw, sum_rows(raw))


def affinity_features(C_hat, Y_t: np.ndarray, X) -> Tensor:
    """Affinity-guided features ``H_aff = rownorm(Y C Y^T) X``."""
    return matmul(node_affinity(C_hat, Y_t), X)


def gate_fuse(h, h_aff, W, b) -> Tensor:
    """``(1 - g) * h + g * h_aff`` with ``g = sigmoid([h; h_aff] W + b)``."""
    h, h_aff = as_tensor(h), as_tensor(h_aff)
    if h.shape != h_aff.shape:
        raise ValueError(f"gate_fuse: shape mismatch {h.shape} vs {h_aff.shape}")
    g = sigmoid(add(matmul(concat_cols([h, h_aff]), W), b))
    return add(h, mul(g, sub(h_aff, h)))


@dataclass
class GateParams:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator):
        return cls(init_weight(rng, 2 * d, d, "gate.W"), Tensor(np.zeros((1, d)), requires_grad=True, name="gate.b"))

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


# -- surrogate labels ---------------------------------------------------------


def pretrain_predict(
    graph: HeteroGraph,
    epochs: int = 200,
    seed: int = 0,
    hidden: int = 64,
    lr: float = 5e-3,
    weight_decay: float = 0.0,
    num_layers: int = 1,
) -> SurrogateLabels:
    """Fit an R-GCN with a linear readout on the observed graph and return soft labels.

    Train-mask rows are overwritten with the ground-truth one-hot labels.
    """
    from .trainer import Adam  # local import: trainer depends on this module

    rng = np.random.default_rng(seed)
    dims = {t: graph.features[t].shape[1] for t in graph.node_types}
    rels = graph.directed_relations
    layers = []
    in_dims = dims
    for _ in range(num_layers):
        layers.append(RgcnParams.init(in_dims, rels, hidden, rng))
        in_dims = {t: hidden for t in graph.node_types}
    C = graph.num_classes
    w_out = init_weight(rng, hidden, C, "pretrain.readout.w")
    b_out = init_bias(rng, hidden, C, "pretrain.readout.b")
    params = [p for layer in layers for p in layer.parameters()] + [w_out, b_out]
    ops = original_operators(graph)
    opt = Adam(params, lr=lr, weight_decay=weight_decay)
    t = graph.target_type

    def logits_fn():
        h = stack_rgcn(graph.features, ops, layers)[t]
        return add(matmul(h, w_out), b_out)

    for _ in range(epochs):
        with Tape() as tape:
            loss = cross_entropy(logits_fn(), graph.labels, graph.train_mask)
        opt.zero_grad()
        tape.backward(loss)
        opt.step()

    probs = softmax_rows(logits_fn()).values.copy()
    train_acc = float(np.mean(probs[graph.train_mask].argmax(axis=1) == graph.labels[graph.train_mask]))
    probs[graph.train_mask] = np.eye(C)[graph.labels[graph.train_mask]]
    return SurrogateLabels(probs, train_acc)
