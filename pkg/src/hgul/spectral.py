"""Two-type block Laplacian analysis: Schur complement, signal energy, Weyl bounds."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import HeteroGraph, normalize_adjacency

REGULARIZATION = 1e-8
MAX_NODES = 2000


@dataclass
class BlockLaplacian:
    a1: np.ndarray  # normalized intra-type block of type 1
    a2: np.ndarray
    b: np.ndarray  # normalized cross block, n1 x n2
    types: tuple[str, str] = ("1", "2")

    @property
    def n1(self) -> int:
        return self.a1.shape[0]

    @property
    def n2(self) -> int:
        return self.a2.shape[0]

    @property
    def laplacian(self) -> np.ndarray:
        adj = np.block([[self.a1, self.b], [self.b.T, self.a2]])
        return np.eye(self.n1 + self.n2) - adj

    @property
    def l1(self) -> np.ndarray:
        return np.eye(self.n1) - self.a1

    def l1_eigen(self) -> tuple[np.ndarray, np.ndarray]:
        return np.linalg.eigh(self.l1)


def block_laplacian_from_adjacency(a1: np.ndarray, a2: np.ndarray, b: np.ndarray, types=("1", "2")) -> BlockLaplacian:
    """Normalize the assembled two-type adjacency jointly, then split it into blocks."""
    n1 = a1.shape[0]
    full = np.block([[a1, b], [b.T, a2]])
    norm = normalize_adjacency(full)
    return BlockLaplacian(norm[:n1, :n1], norm[n1:, n1:], norm[:n1, n1:], tuple(types))


def build_block_laplacian(graph: HeteroGraph, types: tuple[str, str] | None = None, relations=None) -> BlockLaplacian:
    """Block Laplacian of the subgraph induced by two node types.

    Relations are taken in both directions (union), so the adjacency is
    symmetric.  ``relations`` optionally restricts which relation names count.
    """
    if types is None:
        if len(graph.node_types) < 2:
            raise ValueError("graph needs at least two node types")
        others = [t for t in graph.node_types if t != graph.target_type]
        types = (graph.target_type, others[0])
    t1, t2 = types
    n = {t: graph.num_nodes(t) for t in types}
    if min(n.values()) < 1:
        raise ValueError("each node type needs at least one node")
    if n[t1] + n[t2] > MAX_NODES:
        raise ValueError(f"spectral analysis is capped at {MAX_NODES} nodes")
    offset = {t1: 0, t2: n[t1]}
    size = n[t1] + n[t2]
    adj = np.zeros((size, size))
    for rel in graph.relations:
        if rel.src_type not in offset or rel.dst_type not in offset:
            continue
        if relations is not None and rel.name not in relations:
            continue
        src = rel.edges[:, 0] + offset[rel.src_type]
        dst = rel.edges[:, 1] + offset[rel.dst_type]
        adj[src, dst] = 1.0
        adj[dst, src] = 1.0
    k = n[t1]
    return block_laplacian_from_adjacency(adj[:k, :k], adj[k:, k:], adj[:k, k:], types)


def _l1_inverse(bl: BlockLaplacian, eps: float) -> tuple[np.ndarray, bool]:
    l1 = bl.l1
    smallest = np.linalg.eigvalsh(l1)[0] if bl.n1 else 1.0
    regularized = smallest < 1e-10
    if regularized:
        l1 = l1 + eps * np.eye(bl.n1)
    return np.linalg.inv(l1), regularized


@dataclass
class SchurResult:
    S: np.ndarray
    regularized: bool


def schur_complement(bl: BlockLaplacian, eps: float = REGULARIZATION) -> SchurResult:
    """``S = (I - Â2) - B̂^T (I - Â1)^{-1} B̂``.

    Adds ``eps * I`` to ``I - Â1`` when its smallest eigenvalue is below
    1e-10 and reports it through ``regularized``.
    """
    inv, reg = _l1_inverse(bl, eps)
    S = (np.eye(bl.n2) - bl.a2) - bl.b.T @ inv @ bl.b
    return SchurResult(S, reg)


def decomposition_factors(bl: BlockLaplacian, eps: float = REGULARIZATION):
    """Lower, block-diagonal and upper factors with ``L = lower @ middle @ upper``."""
    inv, _ = _l1_inverse(bl, eps)
    n1, n2 = bl.n1, bl.n2
    S = schur_complement(bl, eps).S
    lower = np.block([[np.eye(n1), np.zeros((n1, n2))], [-bl.b.T @ inv, np.eye(n2)]])
    middle = np.block([[bl.l1, np.zeros((n1, n2))], [np.zeros((n2, n1)), S]])
    upper = np.block([[np.eye(n1), -inv @ bl.b], [np.zeros((n2, n1)), np.eye(n2)]])
    return lower, middle, upper


def verify_decomposition(bl: BlockLaplacian, eps: float = REGULARIZATION) -> float:
    """Frobenius norm of ``lower @ middle @ upper - L``."""
    lower, middle, upper = decomposition_factors(bl, eps)
    return float(np.linalg.norm(lower @ middle @ upper - bl.laplacian))


def correction_term(bl: BlockLaplacian, eps: float = REGULARIZATION) -> np.ndarray:
    """``B̂^T L1^{-1} B̂``, the coupling removed from ``I - Â2`` in ``S``."""
    inv, _ = _l1_inverse(bl, eps)
    return bl.b.T @ inv @ bl.b


def correction_eigen_expansion(bl: BlockLaplacian) -> np.ndarray:
    """``sum_k (1/lambda_k) (B̂^T u_k)(B̂^T u_k)^T`` over the eigenpairs of L1."""
    lam, U = bl.l1_eigen()
    proj = bl.b.T @ U  # column k is B̂^T u_k
    return (proj / lam) @ proj.T


# -- signal energy ----------------------------------------------------------


@dataclass
class SpectralEnergy:
    eigenvalues: np.ndarray
    energy: np.ndarray

    @property
    def total(self) -> float:
        return float(self.energy.sum())

    @property
    def cumulative(self) -> np.ndarray:
        total = self.total
        return np.cumsum(self.energy) / total if total > 0 else np.zeros_like(self.energy)

    @property
    def centroid(self) -> float:
        """Energy-weighted mean eigenvalue."""
        return float(self.eigenvalues @ self.energy / self.total)

    @property
    def entropy(self) -> float:
        """Shannon entropy (nats) of the normalized energy distribution."""
        p = self.energy / self.total
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())

    def low_fraction(self, split: float | None = None) -> float:
        """Share of energy at eigenvalues below ``split`` (default: the spectrum median)."""
        split = float(np.median(self.eigenvalues)) if split is None else split
        return float(self.energy[self.eigenvalues < split].sum() / self.total)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eigenvalue", "energy", "cumulative_fraction"])
            for lam, e, c in zip(self.eigenvalues, self.energy, self.cumulative):
                w.writerow([repr(float(lam)), repr(float(e)), repr(float(c))])


def spectral_energy(L: np.ndarray, f: np.ndarray) -> SpectralEnergy:
    L = np.asarray(L, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    if f.size != L.shape[0]:
        raise ValueError(f"signal length {f.size} does not match Laplacian size {L.shape[0]}")
    if L.shape[0] > MAX_NODES:
        raise ValueError(f"eigensolve is capped at {MAX_NODES} nodes")
    lam, U = np.linalg.eigh(L)
    return SpectralEnergy(lam, (U.T @ f) ** 2)


def label_signal(graph: HeteroGraph, bl: BlockLaplacian, cls: int = 0) -> np.ndarray:
    """One-vs-rest ``±1`` signal on target nodes, zero on nodes without labels."""
    parts = []
    for t, n in zip(bl.types, (bl.n1, bl.n2)):
        if t == graph.target_type:
            parts.append(np.where(graph.labels == cls, 1.0, -1.0))
        else:
            parts.append(np.zeros(n))
    return np.concatenate(parts)


def cross_dirichlet(b_hat: np.ndarray, f1: np.ndarray, f2: np.ndarray) -> float:
    """``sum_ij B̂_ij (f1_i - f2_j)^2``."""
    b_hat = np.asarray(b_hat, dtype=np.float64)
    f1 = np.asarray(f1, dtype=np.float64).reshape(-1)
    f2 = np.asarray(f2, dtype=np.float64).reshape(-1)
    if b_hat.shape != (f1.size, f2.size):
        raise ValueError(f"B̂ is {b_hat.shape} but signals have lengths {f1.size}, {f2.size}")
    return float((b_hat * (f1[:, None] - f2[None, :]) ** 2).sum())


@dataclass
class WeylResult:
    max_shift: float
    bound: float
    holds: bool


def weyl_bound_check(L: np.ndarray, L_perturbed: np.ndarray) -> WeylResult:
    L = np.asarray(L, dtype=np.float64)
    Lp = np.asarray(L_perturbed, dtype=np.float64)
    if L.shape != Lp.shape:
        raise ValueError("Laplacians must have the same shape")
    shift = float(np.max(np.abs(np.linalg.eigvalsh(L) - np.linalg.eigvalsh(Lp)))) if L.size else 0.0
    bound = float(np.linalg.norm(Lp - L, 2)) if L.size else 0.0
    return WeylResult(shift, bound, shift <= bound + 1e-10)
