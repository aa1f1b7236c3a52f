"""Structure learning over the observed edges.

Each directed edge carries a learnable logit ``A_uv`` initialised to the
cosine similarity of its projected endpoints.  A forward pass draws Gumbel
noise, forms ``y = sigmoid((sigmoid(A) + g) / tau)``, keeps edges with
``y > delta`` (straight-through gradient), and encodes the raw features over
``A * z`` with an R-GCN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import RelKey, RgcnParams, relation_operator, stack_rgcn
from .graph import HeteroGraph
from .knn import similarity_matrix
from .tensor import Tensor, add, gather, mul, scale, sigmoid, square, straight_through, sub, sum_all


@dataclass(frozen=True)
class GumbelConfig:
    tau0: float = 1.0
    tau_min: float = 0.1
    decay: float = 0.98
    delta: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.tau_min <= self.tau0:
            raise ValueError("need 0 < tau_min <= tau0")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must be in [0, 1]")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")

    def temperature(self, epoch: int) -> float:
        return max(self.tau_min, self.tau0 * self.decay**epoch)


@dataclass
class EdgeLogits:
    logits: dict[RelKey, Tensor]  # one (m_r x 1) column per directed relation

    def parameters(self) -> list[Tensor]:
        return [self.logits[k] for k in sorted(self.logits)]

    def probabilities(self) -> dict[RelKey, np.ndarray]:
        return {k: 1.0 / (1.0 + np.exp(-v.values[:, 0])) for k, v in self.logits.items()}


@dataclass
class RefinedGraph:
    mask: dict[RelKey, np.ndarray]  # Z, bool per edge
    weights: dict[RelKey, Tensor]  # A * Z per edge
    soft: dict[RelKey, Tensor]  # y per edge
    noise: dict[RelKey, np.ndarray]

    def kept_fraction(self) -> float:
        total = sum(m.size for m in self.mask.values())
        return sum(int(m.sum()) for m in self.mask.values()) / total if total else 1.0


def init_edge_logits(projected: dict[str, Tensor], graph: HeteroGraph) -> EdgeLogits:
    out = {}
    for rel in graph.directed_relations:
        S = similarity_matrix(projected[rel.src_type].values, projected[rel.dst_type].values)
        vals = gather(S, rel.edges[:, 0], rel.edges[:, 1]).values if rel.num_edges else np.zeros((0, 1))
        out[rel.key] = Tensor(vals.copy(), requires_grad=True, name=f"edge_logits.{':'.join(rel.key)}")
    return EdgeLogits(out)


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    # open interval so both logs stay finite
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).eps)
    return -np.log(-np.log(u))


def gumbel_sample(pi, tau: float, rng: np.random.Generator | None = None, noise: np.ndarray | None = None):
    """Soft samples ``sigmoid((pi + g) / tau)``; returns ``(y, g)``.

    Pass ``noise`` to freeze ``g`` (zeros give the noise-free value).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    pi = pi if isinstance(pi, Tensor) else Tensor(np.asarray(pi, dtype=np.float64).reshape(-1, 1))
    if noise is None:
        if rng is None:
            raise ValueError("need either rng or noise")
        noise = sample_gumbel(pi.shape, rng)
    noise = np.asarray(noise, dtype=np.float64).reshape(pi.shape)
    return sigmoid(scale(add(pi, noise), 1.0 / tau)), noise


def hard_threshold_ste(y, delta: float) -> Tensor:
    """Heaviside ``y > delta`` in the forward pass, identity gradient backward."""
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64).reshape(-1, 1))
    return straight_through(y, (y.values > delta).astype(np.float64))


def refine(
    logits: EdgeLogits,
    tau: float,
    delta: float,
    rng: np.random.Generator | None = None,
    noise: dict[RelKey, np.ndarray] | None = None,
    hard_override: dict[RelKey, np.ndarray] | None = None,
) -> RefinedGraph:
    """Sample, threshold and mask every relation's edge weights.

    ``hard_override`` replaces the thresholded mask values while keeping the
    straight-through path, which is how gradient checks freeze the discrete
    decision.
    """
    mask, weights, soft, used = {}, {}, {}, {}
    for key in sorted(logits.logits):
        a = logits.logits[key]
        pi = sigmoid(a)
        g = None if noise is None else noise[key]
        y, g = gumbel_sample(pi, tau, rng=rng, noise=g)
        if hard_override is not None:
            z = straight_through(y, hard_override[key])
        else:
            z = hard_threshold_ste(y, delta)
        mask[key] = z.values[:, 0] > 0.5
        weights[key] = mul(a, z)
        soft[key] = y
        used[key] = g
    return RefinedGraph(mask, weights, soft, used)


def structure_regularizer(logits: EdgeLogits, refined: RefinedGraph) -> Tensor:
    """``||A*Z - A||^2`` summed over the observed edges."""
    total = Tensor(np.zeros((1, 1)))
    for key in sorted(logits.logits):
        total = add(total, sum_all(square(sub(refined.weights[key], logits.logits[key]))))
    return total


def refined_operators(graph: HeteroGraph, refined: RefinedGraph) -> dict[RelKey, Tensor]:
    ops = {}
    for rel in graph.directed_relations:
        ops[rel.key] = relation_operator(
            rel,
            graph.num_nodes(rel.src_type),
            graph.num_nodes(rel.dst_type),
            weights=refined.weights[rel.key],
            keep=refined.mask[rel.key],
        )
    return ops


def refine_and_encode(
    graph: HeteroGraph,
    logits: EdgeLogits,
    cfg: GumbelConfig,
    encoder: RgcnParams | list[RgcnParams],
    tau: float | None = None,
    rng: np.random.Generator | None = None,
    noise: dict[RelKey, np.ndarray] | None = None,
    hard_override: dict[RelKey, np.ndarray] | None = None,
) -> tuple[dict[str, Tensor], Tensor, RefinedGraph]:
    """Refine the observed graph and encode the raw features over it.

    Returns ``(h_HGSL, L_reg, refined)``.  With ``rng=None`` and no ``noise``
    the Gumbel noise is zero (evaluation mode).
    """
    tau = cfg.temperature(0) if tau is None else tau
    if rng is None and noise is None:
        noise = {k: np.zeros(v.shape) for k, v in logits.logits.items()}
    refined = refine(logits, tau, cfg.delta, rng=rng, noise=noise, hard_override=hard_override)
    layers = encoder if isinstance(encoder, list) else [encoder]
    h = stack_rgcn(graph.features, refined_operators(graph, refined), layers)
    return h, structure_regularizer(logits, refined), refined
