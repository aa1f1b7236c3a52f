"""Schema-preserving edge noise and robustness sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import HeteroGraph, MetaRelation

log = logging.getLogger(__name__)

# above this many candidate pairs, non-edges are drawn by rejection
_ENUMERATE_LIMIT = 4_000_000


@dataclass(frozen=True)
class PerturbConfig:
    rate: float = 0.0
    seed: int = 0
    removal_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("perturbation rate must be in [0, 1]")
        if not 0.0 <= self.removal_fraction <= 1.0:
            raise ValueError("removal_fraction must be in [0, 1]")


@dataclass
class PerturbReport:
    removed: dict[tuple, int] = field(default_factory=dict)
    added: dict[tuple, int] = field(default_factory=dict)
    shortfall: dict[tuple, int] = field(default_factory=dict)


def _pair_codes(edges: np.ndarray, n_dst: int, undirected: bool) -> np.ndarray:
    if undirected:
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        return lo * n_dst + hi
    return edges[:, 0] * n_dst + edges[:, 1]


def _sample_non_edges(rel: MetaRelation, n_src: int, n_dst: int, count: int, rng) -> np.ndarray:
    same = rel.src_type == rel.dst_type
    undirected = same and rel.is_symmetric
    taken = set(_pair_codes(rel.edges, n_dst, undirected).tolist())
    if n_src * n_dst <= _ENUMERATE_LIMIT:
        src, dst = np.meshgrid(np.arange(n_src), np.arange(n_dst), indexing="ij")
        src, dst = src.reshape(-1), dst.reshape(-1)
        ok = np.ones(src.size, dtype=bool)
        if same:
            ok &= (src < dst) if undirected else (src != dst)
        codes = src * n_dst + dst
        ok &= ~np.isin(codes, np.fromiter(taken, dtype=np.int64, count=len(taken)))
        cand = np.flatnonzero(ok)
        pick = cand[rng.choice(cand.size, size=min(count, cand.size), replace=False)] if cand.size else cand
        return np.stack([src[pick], dst[pick]], axis=1)
    chosen: list[tuple[int, int]] = []
    attempts = 0
    while len(chosen) < count and attempts < 50 * count + 1000:
        attempts += 1
        u, v = int(rng.integers(n_src)), int(rng.integers(n_dst))
        if same and u == v:
            continue
        if undirected and u > v:
            u, v = v, u
        code = u * n_dst + v
        if code in taken:
            continue
        taken.add(code)
        chosen.append((u, v))
    return np.array(chosen, dtype=np.int64).reshape(-1, 2)


def perturb_graph(graph: HeteroGraph, cfg: PerturbConfig, report: PerturbReport | None = None) -> HeteroGraph:
    """Remove and add edges relation by relation at rate ``cfg.rate``.

    Each relation with ``m`` edges loses ``floor(p * f * m)`` uniformly chosen
    edges and gains ``floor(p * (1 - f) * m)`` uniformly chosen type-consistent
    non-edges (never one of the removed ones).  Node sets, features and labels
    are shared with the input graph.
    """
    if cfg.rate == 0.0:
        return graph
    rng = np.random.default_rng(cfg.seed)
    report = report if report is not None else PerturbReport()
    new_relations = []
    for rel in graph.relations:
        m = rel.num_edges
        n_remove = int(np.floor(cfg.rate * cfg.removal_fraction * m))
        n_add = int(np.floor(cfg.rate * (1.0 - cfg.removal_fraction) * m))
        n_src, n_dst = graph.num_nodes(rel.src_type), graph.num_nodes(rel.dst_type)
        drop = rng.choice(m, size=n_remove, replace=False) if n_remove else np.zeros(0, dtype=np.int64)
        keep = np.ones(m, dtype=bool)
        keep[drop] = False
        added = _sample_non_edges(rel, n_src, n_dst, n_add, rng) if n_add else np.zeros((0, 2), dtype=np.int64)
        if added.shape[0] < n_add:
            report.shortfall[rel.key] = n_add - added.shape[0]
            log.warning("relation %s saturated: added %d of %d edges", rel.key, added.shape[0], n_add)
        report.removed[rel.key] = n_remove
        report.added[rel.key] = int(added.shape[0])
        edges = np.concatenate([rel.edges[keep], added]) if m or added.size else rel.edges
        new_relations.append(replace(rel, edges=edges))
    return graph.replace_relations(new_relations)


# -- sweeps -------------------------------------------------------------------


@dataclass
class CurveRow:
    rate: float
    model: str
    mean: float
    std: float
    repeats: int
    values: list[float] = field(default_factory=list)


def sweep_seeds(base_seed: int, repeat: int) -> tuple[int, int]:
    """(perturbation seed, training seed) for one repeat; shared across models."""
    return base_seed + 1000 + repeat, base_seed + repeat


def _train_cell(cell) -> float:
    from .trainer import train

    graph, cfg = cell
    return train(graph, cfg).test_at_best


def robustness_sweep(
    graph: HeteroGraph,
    rates,
    model_configs: dict,
    repeats: int = 5,
    base_seed: int = 0,
    removal_fraction: float = 0.5,
    map_fn=map,
) -> list[CurveRow]:
    """Test metric at best validation for every (rate, model, repeat).

    Every model sees the same perturbed graph for a given (rate, repeat).
    ``map_fn`` may be an executor's ordered ``map`` to run cells in parallel.
    """
    rates = list(rates)
    if rates != sorted(rates):
        raise ValueError("rates must be sorted ascending")
    cells, keys = [], []
    for rate in rates:
        graphs = [
            perturb_graph(graph, PerturbConfig(rate, sweep_seeds(base_seed, r)[0], removal_fraction))
            for r in range(repeats)
        ]
        for name, cfg in model_configs.items():
            for r in range(repeats):
                cells.append((graphs[r], replace(cfg, seed=cfg.seed + sweep_seeds(base_seed, r)[1])))
                keys.append((rate, name))
    results = list(map_fn(_train_cell, cells))
    rows = []
    for rate in rates:
        for name in model_configs:
            vals = [v for k, v in zip(keys, results) if k == (rate, name)]
            rows.append(CurveRow(rate, name, float(np.mean(vals)), float(np.std(vals)), repeats, vals))
    return rows
