"""Per-relation top-k similarity graphs built from projected features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import RelKey, RgcnParams, dense_operator, stack_rgcn
from .graph import HeteroGraph
from .tensor import Tensor, add, as_tensor, div, matmul, sqrt, square, sum_rows, transpose

SIM_EPS = 1e-12


@dataclass(frozen=True)
class KnnConfig:
    k: int = 8
    direction: str = "both"  # "both" or "src"
    keep_negative: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.direction not in ("both", "src"):
            raise ValueError(f"direction must be 'both' or 'src', got {self.direction!r}")


@dataclass
class SimilarityGraph:
    """Selected kNN edges per relation: boolean masks and similarity weights (n_src x n_dst)."""

    masks: dict[RelKey, np.ndarray]
    weights: dict[RelKey, Tensor]

    def edge_list(self, key: RelKey) -> list[tuple[int, int, float]]:
        m = self.masks[key]
        w = self.weights[key].values
        return [(int(i), int(j), float(w[i, j])) for i, j in zip(*np.nonzero(m))]


def similarity_matrix(h_i, h_j, eps: float = SIM_EPS) -> Tensor:
    """Cosine similarity ``<h_u, h_v> / (|h_u| |h_v| + eps)``, differentiable."""
    h_i, h_j = as_tensor(h_i), as_tensor(h_j)
    n_i = sqrt(add(sum_rows(square(h_i)), 1e-300))
    n_j = sqrt(add(sum_rows(square(h_j)), 1e-300))
    return div(matmul(h_i, transpose(h_j)), add(matmul(n_i, transpose(n_j)), eps))


def build_knn_edges(S: np.ndarray, k: int) -> list[tuple[int, int, float]]:
    """Each row keeps its ``k`` largest entries; ties go to the smaller column."""
    mask = topk_mask(S, k)
    return [(int(i), int(j), float(S[i, j])) for i, j in zip(*np.nonzero(mask))]


def topk_mask(S: np.ndarray, k: int, exclude: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask of each row's ``k`` largest entries (ties to the smaller column)."""
    S = np.asarray(S, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    n, m = S.shape
    if exclude is not None:
        S = np.where(exclude, -np.inf, S)
    if m == 0:
        return np.zeros((n, m), dtype=bool)
    if k >= m:
        mask = np.ones((n, m), dtype=bool)
    else:
        thresh = -np.partition(-S, k - 1, axis=1)[:, k - 1 : k]
        above = S > thresh
        room = k - above.sum(axis=1, keepdims=True)
        tied = S == thresh
        mask = above | (tied & (np.cumsum(tied, axis=1) <= room))
    if exclude is not None:
        mask &= ~exclude
    return mask


def build_similarity_graph(graph: HeteroGraph, projected: dict[str, Tensor], cfg: KnnConfig) -> SimilarityGraph:
    """kNN selection for every directed relation of ``graph``.

    Same-type relations never select a node as its own neighbor.
    """
    masks, weights = {}, {}
    sims: dict[tuple[str, str], Tensor] = {}
    for rel in graph.directed_relations:
        pair = (rel.src_type, rel.dst_type)
        if pair not in sims:
            sims[pair] = similarity_matrix(projected[rel.src_type], projected[rel.dst_type])
        S = sims[pair]
        sv = S.values
        exclude = np.eye(*sv.shape, dtype=bool) if rel.src_type == rel.dst_type else None
        mask = topk_mask(sv, cfg.k, exclude)
        if cfg.direction == "both":
            mask |= topk_mask(sv.T, cfg.k, None if exclude is None else exclude.T).T
        if not cfg.keep_negative:
            mask &= sv > 0
        masks[rel.key] = mask
        weights[rel.key] = S
    return SimilarityGraph(masks, weights)


def knn_operators(sg: SimilarityGraph) -> dict[RelKey, Tensor]:
    """Weighted mean-aggregation operators (dst x src) of a similarity graph."""
    return {key: dense_operator(transpose(sg.weights[key]), sg.masks[key].T) for key in sg.masks}


def knn_encode(
    graph: HeteroGraph,
    projected: dict[str, Tensor],
    cfg: KnnConfig,
    encoder: RgcnParams | list[RgcnParams],
) -> dict[str, Tensor]:
    layers = encoder if isinstance(encoder, list) else [encoder]
    sg = build_similarity_graph(graph, projected, cfg)
    return stack_rgcn(projected, knn_operators(sg), layers)
