"""Type-specific MLP projection, relational graph convolution and GraphNorm."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .graph import HeteroGraph, MetaRelation
from .tensor import (
    Tensor,
    add,
    as_tensor,
    div,
    matmul,
    mean_cols,
    mul,
    relu,
    scatter,
    sqrt,
    square,
    sub,
)

RelKey = tuple[str, str, str]


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, name: str | None = None) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=name)


def init_bias(rng: np.random.Generator, fan_in: int, fan_out: int, name: str | None = None) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(1, fan_out)), requires_grad=True, name=name)


# -- projection --------------------------------------------------------------


@dataclass
class MlpParams:
    """Per-type two-layer MLP ``d_t -> hidden -> d``."""

    layers: dict[str, tuple[Tensor, Tensor, Tensor, Tensor]]
    activation: str = "relu"

    @classmethod
    def init(cls, in_dims: Mapping[str, int], d: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or d
        layers = {}
        for t, d_t in in_dims.items():
            layers[t] = (
                init_weight(rng, d_t, hidden, f"mlp.{t}.w1"),
                init_bias(rng, d_t, hidden, f"mlp.{t}.b1"),
                init_weight(rng, hidden, d, f"mlp.{t}.w2"),
                init_bias(rng, hidden, d, f"mlp.{t}.b2"),
            )
        return cls(layers)

    def parameters(self) -> list[Tensor]:
        return [p for t in sorted(self.layers) for p in self.layers[t]]


def project_features(graph: HeteroGraph, params: MlpParams) -> dict[str, Tensor]:
    out = {}
    for t in graph.node_types:
        if t not in params.layers:
            raise KeyError(f"no projection parameters for node type {t!r}")
        w1, b1, w2, b2 = params.layers[t]
        hidden = add(matmul(graph.features[t], w1), b1)
        if params.activation == "relu":
            hidden = relu(hidden)
        elif params.activation != "linear":
            raise ValueError(f"unknown activation {params.activation!r}")
        out[t] = add(matmul(hidden, w2), b2)
    return out


# -- relational graph convolution ------------------------------------------


@dataclass
class RgcnParams:
    """One R-GCN layer: a transform per relation plus a self-loop transform per type.

    Types may have different input widths (raw features), so ``w_rel[r]`` is
    ``d_src(r) x d_out`` and ``w_self[t]`` is ``d_t x d_out``.
    """

    w_rel: dict[RelKey, Tensor]
    w_self: dict[str, Tensor]
    bias: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(
        cls,
        in_dims: Mapping[str, int],
        relations: tuple[MetaRelation, ...],
        d_out: int,
        rng: np.random.Generator,
        bias: bool = True,
    ):
        w_self = {t: init_weight(rng, d, d_out, f"rgcn.self.{t}") for t, d in in_dims.items()}
        w_rel = {r.key: init_weight(rng, in_dims[r.src_type], d_out, f"rgcn.{':'.join(r.key)}") for r in relations}
        b = {t: Tensor(np.zeros((1, d_out)), requires_grad=True, name=f"rgcn.bias.{t}") for t in in_dims} if bias else {}
        return cls(w_rel, w_self, b)

    @property
    def d_out(self) -> int:
        return next(iter(self.w_self.values())).shape[1]

    def parameters(self) -> list[Tensor]:
        out = [self.w_rel[k] for k in sorted(self.w_rel)]
        out += [self.w_self[t] for t in sorted(self.w_self)]
        out += [self.bias[t] for t in sorted(self.bias)]
        return out


def relation_operator(
    rel: MetaRelation,
    n_src: int,
    n_dst: int,
    weights: Tensor | np.ndarray | None = None,
    keep: np.ndarray | None = None,
) -> Tensor:
    """Mean-aggregation operator (n_dst x n_src) for one directed relation.

    Entry ``(v, u)`` is ``w_uv / |N_r(v)|`` where the neighbor count only
    includes kept edges.  Unweighted edges use ``w = keep``.  Weighted callers
    must already carry zeros on dropped edges; the count is held fixed so a
    dropped edge still sees a gradient through its weight.
    """
    src, dst = rel.edges[:, 0], rel.edges[:, 1]
    if keep is not None:
        keep = np.asarray(keep, dtype=bool).reshape(-1)
    else:
        keep = np.ones(src.size, dtype=bool)
    counts = np.bincount(dst[keep], minlength=n_dst).astype(np.float64)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    coef = inv[dst]
    if weights is None:
        w = Tensor((coef * keep).reshape(-1, 1))
    else:
        w = mul(as_tensor(weights), coef.reshape(-1, 1))
    return scatter(w, dst, src, (n_dst, n_src))


def dense_operator(weights, mask: np.ndarray) -> Tensor:
    """Mean-aggregation operator from a dense weight matrix and a 0/1 mask."""
    mask = np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=1, keepdims=True)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    return mul(mul(as_tensor(weights), mask), inv)


def rgcn_forward(
    features: Mapping[str, Tensor | np.ndarray],
    adjacency: Mapping[RelKey, Tensor | np.ndarray],
    params: RgcnParams,
) -> dict[str, Tensor]:
    """``h_v = x_v W_self + sum_r (Â_r X_src)_v W_r + b`` for every node type.

    ``adjacency[r]`` is already normalized and indexed (dst, src).
    """
    out = {}
    for t, w in params.w_self.items():
        if t not in features:
            raise KeyError(f"no features for node type {t!r}")
        h = matmul(features[t], w)
        if t in params.bias:
            h = add(h, params.bias[t])
        out[t] = h
    for key, adj in adjacency.items():
        src_t, _, dst_t = key
        if src_t not in features or dst_t not in out:
            raise KeyError(f"relation {key} references an unknown node type")
        if key not in params.w_rel:
            raise KeyError(f"no weights for relation {key}")
        msg = matmul(adj, matmul(features[src_t], params.w_rel[key]))
        out[dst_t] = add(out[dst_t], msg)
    return out


def stack_rgcn(
    features: Mapping[str, Tensor | np.ndarray],
    adjacency: Mapping[RelKey, Tensor | np.ndarray],
    layers: list[RgcnParams],
) -> dict[str, Tensor]:
    h = dict(features)
    for i, p in enumerate(layers):
        h = rgcn_forward(h, adjacency, p)
        if i < len(layers) - 1:
            h = {t: relu(v) for t, v in h.items()}
    return h


def original_operators(graph: HeteroGraph) -> dict[RelKey, Tensor]:
    """Unweighted mean-aggregation operators of the graph's own edges."""
    return {
        r.key: relation_operator(r, graph.num_nodes(r.src_type), graph.num_nodes(r.dst_type))
        for r in graph.directed_relations
    }


# -- normalization ---------------------------------------------------------


NORM_EPS = 1e-12


@dataclass
class NormParams:
    scale: Tensor
    shift: Tensor

    @classmethod
    def init(cls, d: int, name: str = "norm"):
        return cls(
            Tensor(np.ones((1, d)), requires_grad=True, name=f"{name}.scale"),
            Tensor(np.zeros((1, d)), requires_grad=True, name=f"{name}.shift"),
        )

    def parameters(self) -> list[Tensor]:
        return [self.scale, self.shift]


def graph_norm(h, params: NormParams, eps: float = NORM_EPS) -> Tensor:
    """Per-feature standardization over nodes followed by a learned affine map.

    Uses ``sqrt(var + eps)`` so constant columns map to zero with a finite
    gradient.
    """
    h = as_tensor(h)
    centered = sub(h, mean_cols(h))
    std = sqrt(add(mean_cols(square(centered)), eps))
    return add(mul(div(centered, std), params.scale), params.shift)
