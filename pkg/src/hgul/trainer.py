"""End-to-end training of the full model and its ablations."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .affinity import (
    GateParams,
    PprConfig,
    SurrogateLabels,
    TypeImportance,
    affinity_features,
    gate_fuse,
    hetero_affinity,
    pretrain_predict,
    reweight_adjacency,
)
from .encoders import (
    MlpParams,
    NormParams,
    RgcnParams,
    graph_norm,
    init_bias,
    init_weight,
    original_operators,
    project_features,
    stack_rgcn,
)
from .graph import HeteroGraph, normalize_adjacency
from .hgsl import EdgeLogits, GumbelConfig, init_edge_logits, refine_and_encode
from .knn import KnnConfig, knn_encode
from .tensor import Tape, Tensor, add, as_tensor, concat_rows, cross_entropy, matmul, relu, scale, take_rows

log = logging.getLogger(__name__)

MODELS = ("hgul", "rgcn", "gcn")


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.1
    lr: float = 5e-3
    weight_decay: float = 0.0
    epochs: int = 100
    seed: int = 0
    hidden_dim: int = 64
    num_layers: int = 1
    knn: KnnConfig = field(default_factory=KnnConfig)
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)
    ppr: PprConfig = field(default_factory=PprConfig)
    disable_knn: bool = False
    disable_gsl: bool = False
    disable_affinity: bool = False
    freeze_type_importance: bool = False
    pretrain_epochs: int = 200
    metric: str = "accuracy"
    model: str = "hgul"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.metric not in ("accuracy", "macro_f1"):
            raise ValueError(f"metric must be 'accuracy' or 'macro_f1', got {self.metric!r}")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.num_layers not in (1, 2):
            raise ValueError("num_layers must be 1 or 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @property
    def effective(self) -> "TrainConfig":
        """The ``rgcn`` baseline is the full model with every module disabled."""
        if self.model == "rgcn":
            return replace(self, disable_knn=True, disable_gsl=True, disable_affinity=True)
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss_task: float
    loss_reg: float
    loss: float
    tau: float
    train: float
    val: float
    test: float


@dataclass
class Metrics:
    epochs: list[EpochRecord] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = -math.inf
    test_at_best: float = float("nan")
    pretrain_seconds: float = 0.0
    surrogate_train_accuracy: float = float("nan")

    def summary(self) -> dict:
        last = self.epochs[-1] if self.epochs else None
        return {
            "best_epoch": self.best_epoch,
            "best_val": self.best_val,
            "test_at_best": self.test_at_best,
            "final_train": last.train if last else None,
            "final_loss": last.loss if last else None,
            "mean_epoch_seconds": float(np.mean(self.epoch_seconds)) if self.epoch_seconds else 0.0,
            "pretrain_seconds": self.pretrain_seconds,
            "surrogate_train_accuracy": self.surrogate_train_accuracy,
        }


# -- small pieces ----------------------------------------------------------


def combine_paths(h_hgsl, h_knn, norm: NormParams) -> Tensor:
    """``Norm(h_HGSL + h_kNN)``; either path may be None when ablated."""
    if h_hgsl is None and h_knn is None:
        raise ValueError("at least one path is required")
    if h_hgsl is None:
        total = as_tensor(h_knn)
    elif h_knn is None:
        total = as_tensor(h_hgsl)
    else:
        h_hgsl, h_knn = as_tensor(h_hgsl), as_tensor(h_knn)
        if h_hgsl.shape != h_knn.shape:
            raise ValueError(f"combine_paths: shape mismatch {h_hgsl.shape} vs {h_knn.shape}")
        total = add(h_hgsl, h_knn)
    return graph_norm(total, norm)


def total_loss(loss_task, loss_reg, gamma: float) -> Tensor:
    return add(loss_task, scale(loss_reg, gamma))


class Adam:
    """Adam with decoupled weight decay (``p -= lr * wd * p``)."""

    def __init__(self, params, lr=5e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        grads = [np.zeros_like(p.values) if p.grad is None else p.grad for p in self.params]
        adam_step(self.params, grads, self, self.lr, self.weight_decay)


def adam_step(params, grads, state: Adam, lr: float, wd: float) -> None:
    """One in-place Adam update; ``state.t`` must already count this step."""
    b1, b2, t = state.b1, state.b2, state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1**t)
        v_hat = state.v[i] / (1 - b2**t)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if wd:
            p.values -= lr * wd * p.values


def evaluate(logits, labels, mask, metric: str = "accuracy") -> float:
    """Accuracy or macro-F1 of argmax predictions over ``mask``."""
    values = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    if idx.size == 0:
        raise ValueError("evaluate: mask selects no nodes")
    pred = values[idx].argmax(axis=1)
    true = np.asarray(labels)[idx]
    if metric == "accuracy":
        return float(np.mean(pred == true))
    if metric == "macro_f1":
        C = values.shape[1]
        scores = []
        for c in range(C):
            tp = np.sum((pred == c) & (true == c))
            fp = np.sum((pred == c) & (true != c))
            fn = np.sum((pred != c) & (true == c))
            denom = 2 * tp + fp + fn
            scores.append(2 * tp / denom if denom else 0.0)
        return float(np.mean(scores))
    raise ValueError(f"unknown metric {metric!r}")


# -- model -----------------------------------------------------------------


class HGUL:
    """Parameters and forward pass of the full model and its ablations."""

    def __init__(self, graph: HeteroGraph, cfg: TrainConfig, surrogate: SurrogateLabels | None = None):
        self.graph = graph
        self.cfg = cfg = cfg.effective
        seeds = np.random.SeedSequence(cfg.seed).spawn(2)
        rng = np.random.default_rng(seeds[0])
        self.noise_rng = np.random.default_rng(seeds[1])
        d = cfg.hidden_dim
        raw_dims = {t: graph.features[t].shape[1] for t in graph.node_types}
        proj_dims = {t: d for t in graph.node_types}
        rels = graph.directed_relations
        self.C = graph.num_classes
        self.target = graph.target_type

        self.mlp = MlpParams.init(raw_dims, d, rng)

        def layers(first_dims):
            out, dims = [], first_dims
            for _ in range(cfg.num_layers):
                out.append(RgcnParams.init(dims, rels, d, rng))
                dims = proj_dims
            return out

        self.norm = NormParams.init(d)
        self.head_w = init_weight(rng, d, self.C, "head.w")
        self.head_b = init_bias(rng, d, self.C, "head.b")
        self.knn_layers = self.gsl_layers = self.plain_layers = None
        self.edge_logits: EdgeLogits | None = None
        self.gate = self.importance = None
        self.surrogate = surrogate
        self.c_hat: np.ndarray | None = None

        if cfg.model == "gcn":
            self.gcn_w = [init_weight(rng, d, d, f"gcn.{i}") for i in range(cfg.num_layers)]
            self.gcn_adj = normalize_adjacency(graph.full_adjacency())
            return
        if not cfg.disable_knn:
            self.knn_layers = layers(proj_dims)
        if not cfg.disable_gsl:
            self.gsl_layers = layers(raw_dims)
            init_proj = project_features(graph, self.mlp)
            self.edge_logits = init_edge_logits(init_proj, graph)
        else:
            self.plain_layers = layers(proj_dims)
            self.plain_ops = original_operators(graph)
        if not cfg.disable_affinity:
            if surrogate is None:
                raise ValueError("affinity path needs surrogate labels")
            self.gate = GateParams.init(d, rng)
            self.importance = TypeImportance.init(len(graph.node_types))
            self.full_adj = graph.full_adjacency()
            self.y_t = surrogate.probs

    def parameters(self) -> list[Tensor]:
        ps = self.mlp.parameters() + self.norm.parameters() + [self.head_w, self.head_b]
        if self.cfg.model == "gcn":
            return ps + self.gcn_w
        for group in (self.knn_layers, self.gsl_layers, self.plain_layers):
            for layer in group or []:
                ps += layer.parameters()
        if self.edge_logits is not None:
            ps += self.edge_logits.parameters()
        if self.gate is not None:
            ps += self.gate.parameters()
            if not self.cfg.freeze_type_importance:
                ps += self.importance.parameters()
        return ps

    def forward(self, tau: float, training: bool, noise=None, hard_override=None):
        """Returns ``(logits, L_reg, refined)`` for the target type."""
        g = self.graph
        t = self.target
        zero = Tensor(np.zeros((1, 1)))
        proj = project_features(g, self.mlp)
        if self.cfg.model == "gcn":
            h = concat_rows([proj[nt] for nt in g.node_types])
            for i, w in enumerate(self.gcn_w):
                h = matmul(self.gcn_adj, matmul(h, w))
                if i < len(self.gcn_w) - 1:
                    h = relu(h)
            h_t = graph_norm(take_rows(h, g.target_index), self.norm)
            return add(matmul(h_t, self.head_w), self.head_b), zero, None

        h_knn = knn_encode(g, proj, self.cfg.knn, self.knn_layers)[t] if self.knn_layers else None
        refined = None
        if self.gsl_layers is not None:
            rng = self.noise_rng if (training and noise is None) else None
            if not training and noise is None:
                noise = {k: np.zeros(v.shape) for k, v in self.edge_logits.logits.items()}
            hs, reg, refined = refine_and_encode(
                g, self.edge_logits, self.cfg.gumbel, self.gsl_layers, tau=tau, rng=rng, noise=noise,
                hard_override=hard_override,
            )
            h_gsl = hs[t]
        else:
            h_gsl = stack_rgcn(proj, self.plain_ops, self.plain_layers)[t]
            reg = zero
        h = combine_paths(h_gsl, h_knn, self.norm)
        if self.gate is not None:
            if training or self.c_hat is None:
                a_bar = reweight_adjacency(g, self.importance.R, self.full_adj)
                c_hat = hetero_affinity(a_bar, g.target_index, self.y_t, self.cfg.ppr)
                self.c_hat = c_hat.values.copy()
            else:
                # evaluation reuses the affinity computed for this epoch
                c_hat = Tensor(self.c_hat)
            h_aff = affinity_features(c_hat, self.y_t, h)
            h = gate_fuse(h, h_aff, self.gate.W, self.gate.b)
        return add(matmul(h, self.head_w), self.head_b), reg, refined

    def loss(self, tau: float, training: bool = True, noise=None, hard_override=None):
        logits, reg, refined = self.forward(tau, training, noise, hard_override)
        task = cross_entropy(logits, self.graph.labels, self.graph.train_mask)
        return total_loss(task, reg, self.cfg.gamma), task, reg, logits, refined


# -- training loop ---------------------------------------------------------


def train(
    graph: HeteroGraph,
    cfg: TrainConfig,
    surrogate: SurrogateLabels | None = None,
    on_step=None,
) -> Metrics:
    """Full-batch training with best-validation model selection.

    ``on_step(epoch, model, refined)`` is called after every forward pass
    (before the parameter update) for instrumentation.
    """
    eff = cfg.effective
    metrics = Metrics()
    if not eff.disable_affinity and eff.model == "hgul" and surrogate is None:
        start = time.perf_counter()
        pre_seed = int(np.random.SeedSequence([cfg.seed, 1]).generate_state(1)[0])
        surrogate = pretrain_predict(
            graph, epochs=cfg.pretrain_epochs, seed=pre_seed, hidden=cfg.hidden_dim, lr=cfg.lr,
            weight_decay=cfg.weight_decay, num_layers=cfg.num_layers,
        )
        metrics.pretrain_seconds = time.perf_counter() - start
    if surrogate is not None:
        metrics.surrogate_train_accuracy = surrogate.train_accuracy
    model = HGUL(graph, cfg, surrogate)
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        tau = cfg.gumbel.temperature(epoch)
        with Tape() as tape:
            loss, task, reg, _, refined = model.loss(tau, training=True)
        lv = loss.item()
        if not math.isfinite(lv):
            raise DivergenceError(epoch, lv)
        if on_step is not None:
            on_step(epoch, model, refined)
        opt.zero_grad()
        tape.backward(loss)
        opt.step()

        logits, _, _ = model.forward(tau, training=False)
        rec = EpochRecord(
            epoch,
            task.item(),
            reg.item(),
            lv,
            tau,
            evaluate(logits, graph.labels, graph.train_mask, cfg.metric),
            _safe_eval(logits, graph, graph.val_mask, cfg.metric),
            _safe_eval(logits, graph, graph.test_mask, cfg.metric),
        )
        metrics.epochs.append(rec)
        metrics.epoch_seconds.append(time.perf_counter() - start)
        score = rec.train if math.isnan(rec.val) else rec.val
        if score > metrics.best_val:
            metrics.best_val, metrics.best_epoch, metrics.test_at_best = score, epoch, rec.test
        log.debug("epoch %d loss %.4f val %.4f", epoch, lv, rec.val)
    return metrics


def _safe_eval(logits, graph, mask, metric):
    return evaluate(logits, graph.labels, mask, metric) if mask.any() else float("nan")
