"""Heterogeneous graph container, JSON file format, and synthetic generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Tensor, add, matmul, mul, power, sum_rows, transpose


class GraphFormatError(ValueError):
    """The graph file could not be parsed."""


class GraphInvariantError(ValueError):
    """A structural invariant of :class:`HeteroGraph` is violated."""


@dataclass(frozen=True, eq=False)
class MetaRelation:
    src_type: str
    name: str
    dst_type: str
    edges: np.ndarray  # (m, 2) int64, columns (src_index, dst_index)
    is_symmetric: bool = False

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", edges)

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.src_type, self.name, self.dst_type)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def __eq__(self, other):
        if not isinstance(other, MetaRelation):
            return NotImplemented
        return (
            self.key == other.key
            and self.is_symmetric == other.is_symmetric
            and np.array_equal(self.edges, other.edges)
        )


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    """Typed node sets, per-relation edge lists and target-type supervision.

    ``relations`` keeps the relations as declared.  Message passing should use
    :attr:`directed_relations`, where symmetric relations are expanded to both
    directions.
    """

    node_types: tuple[str, ...]
    features: dict[str, np.ndarray]
    relations: tuple[MetaRelation, ...]
    target_type: str
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "node_types", tuple(self.node_types))
        object.__setattr__(self, "relations", tuple(self.relations))
        feats = {t: np.asarray(self.features[t], dtype=np.float64) for t in self.node_types if t in self.features}
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        for m in ("train_mask", "val_mask", "test_mask"):
            object.__setattr__(self, m, np.asarray(getattr(self, m), dtype=bool))
        self.validate()

    # -- invariants -------------------------------------------------------

    def validate(self) -> None:
        if len(set(self.node_types)) != len(self.node_types):
            raise GraphInvariantError("node type names must be unique")
        for t in self.node_types:
            if t not in self.features:
                raise GraphInvariantError(f"missing feature matrix for node type {t!r}")
            x = self.features[t]
            if x.ndim != 2 or x.shape[1] < 1:
                raise GraphInvariantError(f"feature dimension d_t >= 1 violated for type {t!r}")
        if self.target_type not in self.features:
            raise GraphInvariantError(f"target type {self.target_type!r} is not a node type")
        n_t = self.num_nodes(self.target_type)
        if n_t == 0:
            raise GraphInvariantError("target type has zero nodes")
        for rel in self.relations:
            for t in (rel.src_type, rel.dst_type):
                if t not in self.features:
                    raise GraphInvariantError(f"relation {rel.key} references unknown type {t!r}")
            if rel.num_edges:
                if rel.edges.min() < 0:
                    raise GraphInvariantError(f"edge index out of range in relation {rel.key}: negative index")
                if rel.edges[:, 0].max() >= self.num_nodes(rel.src_type):
                    raise GraphInvariantError(
                        f"edge index out of range in relation {rel.key}: src index "
                        f"{rel.edges[:, 0].max()} >= {self.num_nodes(rel.src_type)}"
                    )
                if rel.edges[:, 1].max() >= self.num_nodes(rel.dst_type):
                    raise GraphInvariantError(
                        f"edge index out of range in relation {rel.key}: dst index "
                        f"{rel.edges[:, 1].max()} >= {self.num_nodes(rel.dst_type)}"
                    )
                if np.unique(rel.edges, axis=0).shape[0] != rel.num_edges:
                    raise GraphInvariantError(f"duplicate (src, dst) pair in relation {rel.key}")
        if len({r.key for r in self.relations}) != len(self.relations):
            raise GraphInvariantError("relation keys (src_type, name, dst_type) must be unique")
        if self.labels.shape != (n_t,):
            raise GraphInvariantError(f"expected {n_t} labels for target type, got {self.labels.shape[0]}")
        if self.labels.min() < 0:
            raise GraphInvariantError("labels must be in [0, C)")
        for m in (self.train_mask, self.val_mask, self.test_mask):
            if m.shape != (n_t,):
                raise GraphInvariantError("masks must cover exactly the target-type nodes")
        if (self.train_mask & self.val_mask).any() or (self.train_mask & self.test_mask).any() or (
            self.val_mask & self.test_mask
        ).any():
            raise GraphInvariantError("train/val/test masks must be disjoint")
        seen = np.unique(self.labels[self.train_mask])
        if seen.size != self.num_classes:
            missing = sorted(set(range(self.num_classes)) - set(seen.tolist()))
            raise GraphInvariantError(f"every class must appear in the train mask; missing {missing}")

    # -- accessors --------------------------------------------------------

    def num_nodes(self, node_type: str) -> int:
        return int(self.features[node_type].shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def total_nodes(self) -> int:
        return sum(self.num_nodes(t) for t in self.node_types)

    @cached_property
    def offsets(self) -> dict[str, int]:
        """Start of each type's block in the concatenated node ordering."""
        out, pos = {}, 0
        for t in self.node_types:
            out[t] = pos
            pos += self.num_nodes(t)
        return out

    @cached_property
    def type_index(self) -> np.ndarray:
        """Type id of every node in the concatenated ordering."""
        return np.concatenate(
            [np.full(self.num_nodes(t), i, dtype=np.int64) for i, t in enumerate(self.node_types)]
        )

    @cached_property
    def target_index(self) -> np.ndarray:
        start = self.offsets[self.target_type]
        return np.arange(start, start + self.num_nodes(self.target_type))

    @cached_property
    def directed_relations(self) -> tuple[MetaRelation, ...]:
        """Relations as directed edge lists with symmetric ones in both directions.

        A symmetric cross-type relation gains a ``rev_<name>`` partner; a
        symmetric same-type relation is replaced by the union of both
        directions.
        """
        out = []
        for rel in self.relations:
            if not rel.is_symmetric:
                out.append(rel)
                continue
            rev = rel.edges[:, ::-1]
            if rel.src_type == rel.dst_type:
                both = np.unique(np.concatenate([rel.edges, rev]), axis=0)
                out.append(MetaRelation(rel.src_type, rel.name, rel.dst_type, both, False))
            else:
                out.append(MetaRelation(rel.src_type, rel.name, rel.dst_type, rel.edges, False))
                out.append(MetaRelation(rel.dst_type, f"rev_{rel.name}", rel.src_type, rev.copy(), False))
        return tuple(out)

    def full_adjacency(self) -> np.ndarray:
        """Binary (N x N) adjacency over all nodes, row = dst, col = src."""
        n = self.total_nodes
        adj = np.zeros((n, n))
        for rel in self.directed_relations:
            src = rel.edges[:, 0] + self.offsets[rel.src_type]
            dst = rel.edges[:, 1] + self.offsets[rel.dst_type]
            adj[dst, src] = 1.0
        return adj

    def one_hot_labels(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.labels]

    def replace_relations(self, relations: Sequence[MetaRelation]) -> "HeteroGraph":
        return HeteroGraph(
            self.node_types,
            self.features,
            tuple(relations),
            self.target_type,
            self.labels,
            self.train_mask,
            self.val_mask,
            self.test_mask,
        )

    def __eq__(self, other):
        if not isinstance(other, HeteroGraph):
            return NotImplemented
        return (
            self.node_types == other.node_types
            and all(np.array_equal(self.features[t], other.features[t]) for t in self.node_types)
            and self.relations == other.relations
            and self.target_type == other.target_type
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.train_mask, other.train_mask)
            and np.array_equal(self.val_mask, other.val_mask)
            and np.array_equal(self.test_mask, other.test_mask)
        )

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "node_types": [
                {"name": t, "count": self.num_nodes(t), "features": self.features[t].tolist()}
                for t in self.node_types
            ],
            "relations": [
                {
                    "src_type": r.src_type,
                    "name": r.name,
                    "dst_type": r.dst_type,
                    "edges": r.edges.tolist(),
                    "is_symmetric": r.is_symmetric,
                }
                for r in self.relations
            ],
            "target_type": self.target_type,
            "labels": self.labels.tolist(),
            "masks": {
                "train": np.flatnonzero(self.train_mask).tolist(),
                "val": np.flatnonzero(self.val_mask).tolist(),
                "test": np.flatnonzero(self.test_mask).tolist(),
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HeteroGraph":
        try:
            node_types, features = [], {}
            for i, nt in enumerate(data["node_types"]):
                name, count = nt["name"], int(nt["count"])
                rows = nt["features"]
                if len(rows) != count:
                    raise GraphFormatError(
                        f"node_types[{i}] ({name!r}): count={count} but {len(rows)} feature rows"
                    )
                widths = {len(r) for r in rows}
                if len(widths) > 1:
                    raise GraphFormatError(f"node_types[{i}] ({name!r}): feature rows have unequal lengths {sorted(widths)}")
                node_types.append(name)
                features[name] = np.array(rows, dtype=np.float64).reshape(count, widths.pop() if widths else 0)
            relations = []
            for i, r in enumerate(data["relations"]):
                edges = r.get("edges", [])
                if any(len(e) != 2 for e in edges):
                    raise GraphFormatError(f"relations[{i}] ({r.get('name')!r}): every edge must be a [src, dst] pair")
                relations.append(
                    MetaRelation(r["src_type"], r["name"], r["dst_type"], np.array(edges, dtype=np.int64),
                                 bool(r.get("is_symmetric", False)))
                )
            target = data["target_type"]
            if target not in features:
                raise GraphInvariantError(f"target type {target!r} is not a node type")
            n_t = len(features[target])
            masks = data["masks"]
            mask_arrays = []
            for split in ("train", "val", "test"):
                m = np.zeros(n_t, dtype=bool)
                idx = np.asarray(masks.get(split, []), dtype=np.int64)
                if idx.size and (idx.min() < 0 or idx.max() >= n_t):
                    raise GraphInvariantError(f"masks.{split}: index out of range for {n_t} target nodes")
                if np.unique(idx).size != idx.size:
                    raise GraphFormatError(f"masks.{split}: repeated index")
                m[idx] = True
                mask_arrays.append(m)
            labels = data["labels"]
        except KeyError as exc:
            raise GraphFormatError(f"missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, (GraphFormatError, GraphInvariantError)):
                raise
            raise GraphFormatError(str(exc)) from None
        return cls(tuple(node_types), features, tuple(relations), target, labels, *mask_arrays)


def load_graph(path) -> HeteroGraph:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return HeteroGraph.from_dict(data)


def save_graph(graph: HeteroGraph, path) -> None:
    # repr round-trips float64 exactly, which json.dumps relies on
    Path(path).write_text(json.dumps(graph.to_dict()))


# -- adjacency normalization ----------------------------------------------


def normalize_adjacency(adj):
    """D^{-1/2} (A + I) D^{-1/2} with D the row sums of A + I.

    Accepts an ndarray or a :class:`Tensor`; the tensor path is differentiable.
    """
    if isinstance(adj, Tensor):
        n = adj.shape[0]
        a = add(adj, np.eye(n))
        inv_sqrt = power(sum_rows(a), -0.5)
        return mul(a, matmul(inv_sqrt, transpose(inv_sqrt)))
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError(f"adjacency must be square, got {adj.shape}")
    a = adj + np.eye(adj.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    # scaling by the outer product keeps symmetric inputs exactly symmetric
    return a * (inv_sqrt[:, None] * inv_sqrt[None, :])


def edge_homophily(graph: HeteroGraph, classes: dict[str, np.ndarray], rel: MetaRelation) -> float:
    """Fraction of edges in ``rel`` whose endpoints share a class."""
    if rel.num_edges == 0:
        return float("nan")
    cs = classes[rel.src_type][rel.edges[:, 0]]
    cd = classes[rel.dst_type][rel.edges[:, 1]]
    return float(np.mean(cs == cd))


# -- synthetic generator ---------------------------------------------------


@dataclass(frozen=True)
class RelationSpec:
    src_type: str
    name: str
    dst_type: str
    p_intra: float
    p_inter: float
    symmetric: bool = True


@dataclass(frozen=True)
class SyntheticConfig:
    node_counts: dict[str, int]
    target_type: str
    relations: tuple[RelationSpec, ...]
    num_classes: int = 3
    feature_dim: int = 16
    class_sep: float = 1.0
    train_frac: float = 0.2
    val_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "relations", tuple(self.relations))
        for r in self.relations:
            for p in (r.p_intra, r.p_inter):
                if not 0.0 <= p <= 1.0:
                    raise ValueError(f"relation {r.name!r}: probabilities must be in [0, 1]")
            for t in (r.src_type, r.dst_type):
                if t not in self.node_counts:
                    raise ValueError(f"relation {r.name!r} references unknown type {t!r}")
        if self.node_counts.get(self.target_type, 0) <= 0:
            raise ValueError("target type needs at least one node")
        if self.num_classes < 1 or self.feature_dim < 1:
            raise ValueError("num_classes and feature_dim must be >= 1")


@dataclass
class SyntheticGraph:
    graph: HeteroGraph
    classes: dict[str, np.ndarray] = field(default_factory=dict)  # latent class of every node


def generate_synthetic(cfg: SyntheticConfig, *, with_classes: bool = False):
    """Sample a class-structured heterogeneous graph.

    Every node (of every type) draws a latent class; features are Gaussian
    around per-class centers scaled by ``class_sep``; an edge of a relation
    appears with ``p_intra`` between same-class endpoints and ``p_inter``
    otherwise.  Only target-type classes are exposed as labels.
    """
    rng = np.random.default_rng(cfg.seed)
    C = cfg.num_classes
    classes = {}
    features = {}
    for t in cfg.node_counts:
        n = cfg.node_counts[t]
        classes[t] = rng.permutation(np.arange(n) % C)
        centers = rng.standard_normal((C, cfg.feature_dim))
        centers *= cfg.class_sep / np.sqrt(cfg.feature_dim)
        features[t] = centers[classes[t]] + rng.standard_normal((n, cfg.feature_dim)) / np.sqrt(cfg.feature_dim)

    relations = []
    for spec in cfg.relations:
        cs, cd = classes[spec.src_type], classes[spec.dst_type]
        prob = np.where(cs[:, None] == cd[None, :], spec.p_intra, spec.p_inter)
        hit = rng.random(prob.shape) < prob
        if spec.src_type == spec.dst_type:
            # store each unordered pair once, no self-loops
            hit = np.triu(hit, k=1) if spec.symmetric else hit & ~np.eye(len(cs), dtype=bool)
        edges = np.argwhere(hit)
        relations.append(MetaRelation(spec.src_type, spec.name, spec.dst_type, edges, spec.symmetric))

    labels = classes[cfg.target_type]
    n_t = labels.size
    train = np.zeros(n_t, dtype=bool)
    val = np.zeros(n_t, dtype=bool)
    test = np.zeros(n_t, dtype=bool)
    for c in range(C):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_tr = max(1, int(round(cfg.train_frac * idx.size)))
        n_va = int(round(cfg.val_frac * idx.size))
        train[idx[:n_tr]] = True
        val[idx[n_tr : n_tr + n_va]] = True
        test[idx[n_tr + n_va :]] = True

    graph = HeteroGraph(tuple(cfg.node_counts), features, tuple(relations), cfg.target_type, labels, train, val, test)
    if with_classes:
        return SyntheticGraph(graph, classes)
    return graph
