import numpy as np
import pytest

from bamdp_lab.embedding import (
    EmbeddingTable,
    FitConfig,
    all_pairs,
    bisim_targets,
    fit_embeddings,
    init_table,
    loss_and_grad,
    pearson_fidelity,
    permutation_pairs,
    seeded_projection,
    specific_anchor_table,
)
from bamdp_lab.errors import PreconditionError, TrainingError
from bamdp_lab.metric import one_step_task_metric
from bamdp_lab.models import models_from_task


def _finite_difference(table, target, pairs, kw, anchors, h=1e-5):
    K, d = table.mu.shape
    flat = np.concatenate([table.mu.ravel(), table.log_sigma.ravel()])
    out = np.zeros_like(flat)
    for p in range(len(flat)):
        vals = []
        for sgn in (1, -1):
            v = flat.copy()
            v[p] += sgn * h
            t = EmbeddingTable(v[: K * d].reshape(K, d), v[K * d:].reshape(K, d))
            vals.append(loss_and_grad(t, target, pairs, kw, anchors)[0])
        out[p] = (vals[0] - vals[1]) / (2 * h)
    return out


@pytest.mark.parametrize("kw", [0.0, 0.1, 1.0])
def test_gradient_matches_central_differences(kw):
    rng = np.random.default_rng(int(kw * 10))
    K, d = 4, 3
    table = EmbeddingTable(rng.normal(size=(K, d)), rng.normal(scale=0.3, size=(K, d)))
    target = np.abs(rng.normal(size=(K, K)))
    target = 0.5 * (target + target.T)
    anchors = EmbeddingTable(rng.normal(size=(K, d)), rng.normal(scale=0.3, size=(K, d)), "specific_anchor") if kw else None
    _, (g_mu, g_ls) = loss_and_grad(table, target, all_pairs(K), kw, anchors)
    fd = _finite_difference(table, target, all_pairs(K), kw, anchors)
    num = np.concatenate([g_mu.ravel(), g_ls.ravel()])
    assert np.linalg.norm(num - fd) / np.linalg.norm(fd) < 1e-6


def test_loss_value_by_hand():
    table = EmbeddingTable(np.array([[0.0], [2.0]]), np.zeros((2, 1)))
    target = np.array([[0, 1.5], [1.5, 0]])
    loss, _ = loss_and_grad(table, target, [[0, 1]], 0.0)
    assert loss == pytest.approx(0.25)
    anchors = EmbeddingTable(np.array([[0.0], [2.0]]), np.zeros((2, 1)), "specific_anchor")
    loss_kl, _ = loss_and_grad(table, target, [[0, 1]], 0.1, anchors)
    assert loss_kl == pytest.approx(0.25)  # KL to an identical anchor is 0


def test_anchors_required_exactly_with_kl():
    t = init_table(3, 2, 0)
    with pytest.raises(PreconditionError):
        loss_and_grad(t, np.zeros((3, 3)), all_pairs(3), 0.1, None)
    with pytest.raises(PreconditionError):
        loss_and_grad(t, np.zeros((3, 3)), all_pairs(3), 0.0, t)


def test_fit_recovers_line_distances():
    x = np.array([0.0, 1.0, 3.0, 6.0])
    target = np.abs(x[:, None] - x[None, :])
    fitted = fit_embeddings(init_table(4, 2, 0), target, FitConfig(step_size=5e-2, steps=3000, kl_weight=0.0))
    assert fitted.meta["final_loss"] < 1e-3 * fitted.meta["initial_loss"]
    assert pearson_fidelity(fitted, target) > 0.99


def test_divergence_is_a_training_error():
    target = np.full((3, 3), 5.0)
    with pytest.raises(TrainingError):
        fit_embeddings(init_table(3, 2, 0), target, FitConfig(step_size=10.0, steps=50, kl_weight=0.0))


def test_table_roundtrip(tmp_path):
    t = init_table(3, 4, 9)
    t.save(tmp_path / "e.csv")
    back = EmbeddingTable.load(tmp_path / "e.csv")
    assert np.allclose(back.mu, t.mu, rtol=1e-11) and np.allclose(back.sigma, t.sigma, rtol=1e-11)
    assert back.role == t.role


def test_targets_are_the_one_step_metric(small_grid_family):
    models = [models_from_task(t) for t in small_grid_family.train_tasks]
    tg = bisim_targets(models)
    assert np.array_equal(tg.total, one_step_task_metric(models).d)
    assert np.allclose(tg.reward_gap + tg.w2_gap + tg.inverse_gap, tg.total)


def test_anchor_table_is_seeded(small_grid_family):
    models = [models_from_task(t) for t in small_grid_family.train_tasks]
    a, b = specific_anchor_table(models, 5, 3), specific_anchor_table(models, 5, 3)
    assert np.array_equal(a.mu, b.mu) and a.role == "specific_anchor"
    q = seeded_projection(10, 4, 1)
    assert np.allclose(q.T @ q, np.eye(4))


def test_permutation_pairs_cover_each_task():
    pairs = permutation_pairs(6, np.random.default_rng(0))
    assert sorted(pairs[:, 0].tolist()) == list(range(6))
    assert np.all(pairs[:, 0] != pairs[:, 1])
