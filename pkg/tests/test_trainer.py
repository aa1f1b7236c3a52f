from dataclasses import replace

import numpy as np
import pytest

from hgul.affinity import SurrogateLabels
from hgul.encoders import NormParams, graph_norm
from hgul.graph import generate_synthetic
from hgul.hgsl import sample_gumbel
from hgul.trainer import HGUL, Adam, DivergenceError, TrainConfig, combine_paths, evaluate, total_loss, train
from hgul.tensor import Tensor, check_gradients

from conftest import tiny_config


def small_cfg(**kw):
    base = dict(epochs=8, hidden_dim=8, pretrain_epochs=10, lr=0.01)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def graph():
    return generate_synthetic(tiny_config(seed=3))


# -- pieces --------------------------------------------------------------------------------


def test_combine_paths_sums_then_normalizes():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    norm = NormParams.init(3)
    np.testing.assert_allclose(combine_paths(a, b, norm).values, graph_norm(a + b, norm).values, atol=1e-15)
    np.testing.assert_allclose(combine_paths(a, None, norm).values, graph_norm(a, norm).values, atol=1e-15)
    np.testing.assert_allclose(combine_paths(None, b, norm).values, graph_norm(b, norm).values, atol=1e-15)
    with pytest.raises(ValueError):
        combine_paths(None, None, norm)
    with pytest.raises(ValueError, match="shape mismatch"):
        combine_paths(a, b[:, :2], norm)


@pytest.mark.parametrize("task, reg, gamma, expected", [(0.5, 1.2, 0.4, 0.98), (0.5, 1.2, 0.0, 0.5), (1.0, 2.0, 10.0, 21.0)])
def test_total_loss_examples(task, reg, gamma, expected):
    assert total_loss(Tensor(task), Tensor(reg), gamma).item() == pytest.approx(expected, abs=1e-15)


def test_adam_zero_gradient_is_a_no_op():
    p = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros((1, 2))
    opt.step()
    np.testing.assert_array_equal(p.values, [[1.0, -2.0]])


def test_adam_first_step_is_sign_step():
    p = Tensor(np.array([[1.0, -2.0, 0.5]]), requires_grad=True)
    g = np.array([[0.3, -4.0, 1e-3]])
    opt = Adam([p], lr=0.1)
    p.grad = g.copy()
    opt.step()
    np.testing.assert_allclose(p.values, np.array([[1.0, -2.0, 0.5]]) - 0.1 * g / (np.abs(g) + 1e-8), atol=1e-15)


def test_adam_decoupled_weight_decay_shrinks():
    p = Tensor(np.array([[2.0, -4.0]]), requires_grad=True)
    opt = Adam([p], lr=0.1, weight_decay=0.5)
    opt.step()  # no gradient at all counts as zero
    np.testing.assert_allclose(p.values, np.array([[2.0, -4.0]]) * (1 - 0.1 * 0.5), atol=1e-15)


def test_evaluate_constant_predictor():
    logits = np.tile([5.0, 0.0], (4, 1))
    labels = np.array([0, 0, 1, 1])
    mask = np.ones(4, dtype=bool)
    assert evaluate(logits, labels, mask) == 0.5
    assert evaluate(logits, labels, mask, "macro_f1") == pytest.approx(1 / 3, abs=1e-15)


def test_macro_f1_matches_confusion_matrix_oracle():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 3, 50)
    logits = rng.standard_normal((50, 3))
    pred = logits.argmax(axis=1)
    cm = np.zeros((3, 3))
    np.add.at(cm, (labels, pred), 1)
    f1 = []
    for c in range(3):
        prec = cm[c, c] / cm[:, c].sum() if cm[:, c].sum() else 0.0
        rec = cm[c, c] / cm[c].sum() if cm[c].sum() else 0.0
        f1.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    mask = np.ones(50, dtype=bool)
    assert evaluate(logits, labels, mask, "macro_f1") == pytest.approx(np.mean(f1), abs=1e-12)
    assert evaluate(logits, labels, mask) == pytest.approx(np.trace(cm) / 50, abs=1e-15)


def test_evaluate_errors():
    with pytest.raises(ValueError, match="no nodes"):
        evaluate(np.ones((2, 2)), [0, 1], [False, False])
    with pytest.raises(ValueError, match="unknown metric"):
        evaluate(np.ones((2, 2)), [0, 1], [True, True], "auc")


def test_train_config_validation():
    for bad in (dict(gamma=-1), dict(metric="auc"), dict(model="gat"), dict(num_layers=3), dict(epochs=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    eff = TrainConfig(model="rgcn").effective
    assert eff.disable_knn and eff.disable_gsl and eff.disable_affinity


# -- training ---------------------------------------------------------------------------------


@pytest.mark.parametrize("gamma", [0.0, 0.1, 1.0, 10.0])
def test_logged_loss_is_task_plus_gamma_reg(graph, gamma):
    cfg = small_cfg(gamma=gamma, epochs=4, gumbel=replace(TrainConfig().gumbel, delta=0.7))
    for rec in train(graph, cfg).epochs:
        assert rec.loss == pytest.approx(rec.loss_task + gamma * rec.loss_reg, rel=1e-12, abs=1e-15)


def test_training_is_deterministic(graph):
    a = train(graph, small_cfg(seed=5))
    b = train(graph, small_cfg(seed=5))
    assert [vars(r) for r in a.epochs] == [vars(r) for r in b.epochs]
    c = train(graph, small_cfg(seed=6))
    assert [r.loss for r in a.epochs] != [r.loss for r in c.epochs]


def test_without_gsl_regularizer_is_zero(graph):
    assert all(r.loss_reg == 0.0 for r in train(graph, small_cfg(disable_gsl=True)).epochs)


@pytest.mark.parametrize("model", ["rgcn", "gcn"])
def test_baseline_loss_decreases(graph, model):
    m = train(graph, small_cfg(model=model, epochs=30))
    assert m.epochs[-1].loss < m.epochs[0].loss
    assert np.isnan(m.surrogate_train_accuracy)


def test_ablations_all_train(graph):
    for flag in ("disable_knn", "disable_gsl", "disable_affinity"):
        m = train(graph, small_cfg(**{flag: True}, epochs=3))
        assert len(m.epochs) == 3 and 0 <= m.best_epoch < 3


def test_on_step_sees_every_epoch(graph):
    seen = []
    train(graph, small_cfg(epochs=5), on_step=lambda e, model, refined: seen.append((e, refined.kept_fraction())))
    assert [e for e, _ in seen] == list(range(5))


def test_divergence_is_reported(graph):
    # the first update with an infinite step poisons the weights
    with np.errstate(all="ignore"), pytest.raises(DivergenceError, match="epoch 1") as info:
        train(graph, small_cfg(model="rgcn", lr=np.inf, epochs=3))
    assert info.value.epoch == 1


def test_affinity_needs_surrogate(graph):
    with pytest.raises(ValueError, match="surrogate"):
        HGUL(graph, small_cfg())


def test_full_loss_gradients_with_frozen_sampling(graph):
    # noise and the thresholded mask are frozen; every parameter outside the
    # edge logits then sees an ordinary differentiable loss
    surrogate = SurrogateLabels(np.eye(graph.num_classes)[graph.labels] * 0.8 + 0.1)
    model = HGUL(graph, small_cfg(hidden_dim=4, gamma=0.3), surrogate)
    rng = np.random.default_rng(0)
    noise = {k: sample_gumbel(v.shape, rng) for k, v in model.edge_logits.logits.items()}
    _, _, _, _, refined = model.loss(0.7, training=True, noise=noise)
    frozen = {k: m.astype(float).reshape(-1, 1) for k, m in refined.mask.items()}

    def f(_):
        return model.loss(0.7, training=True, noise=noise, hard_override=frozen)[0]

    checked = [
        model.head_w,
        model.gate.W,
        model.importance.R,
        model.gsl_layers[0].w_self[graph.target_type],
        model.knn_layers[0].w_self[graph.target_type],
        model.norm.scale,
        model.mlp.layers[graph.target_type][2],
    ]
    for p in checked:
        assert check_gradients(f, p) < 1e-4, p.name
