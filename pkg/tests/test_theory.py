import numpy as np
import pytest

from bamdp_lab.errors import PreconditionError, VerificationError
from bamdp_lab.metric import fixed_point_task_metric, one_step_task_metric
from bamdp_lab.models import StateAbstraction, models_from_task, uniform_policy
from bamdp_lab.tasks import generate_family
from bamdp_lab.theory import (
    check_transfer_bound,
    check_value_bound,
    deviation_matrix,
    lemma_monotone,
    optimal_q,
    oracle_embeddings,
    policy_value,
)

from conftest import random_task


def test_policy_value_solves_bellman():
    rng = np.random.default_rng(0)
    task = random_task(rng, S=5, A=3)
    pi = rng.dirichlet(np.ones(3), size=5)
    V = policy_value(task, pi)
    # iterate the backup to convergence as an independent route
    W = np.zeros(5)
    for _ in range(2000):
        W = np.sum(pi * (task.reward + task.gamma * task.transition @ W), axis=1)
    assert np.allclose(V, W, atol=1e-12)
    assert np.allclose(policy_value(task, pi, horizon=2000), W, atol=1e-12)
    with pytest.raises(PreconditionError):
        policy_value(task, pi, gamma=1.0)


def test_optimal_q_matches_value_iteration():
    rng = np.random.default_rng(1)
    task = random_task(rng, S=6, A=3)
    Q, pi = optimal_q(task)
    V = np.zeros(6)
    for _ in range(3000):
        V = np.max(task.reward + task.gamma * task.transition @ V, axis=1)
    assert np.allclose(Q.max(axis=1), V, atol=1e-10)
    assert np.all(pi.sum(axis=1) == 1)


@pytest.fixture(scope="module")
def grid5():
    return generate_family("semicircle_grid", {"grid": 5, "K": 3, "placement": "even", "horizon": 10}, 0)


def test_value_bound_holds_under_the_fixed_point(grid5):
    models = [models_from_task(t) for t in grid5.train_tasks]
    joint, _ = fixed_point_task_metric(models, gamma=grid5.gamma, tol=1e-11)
    rep = check_value_bound(grid5, None, joint, one_step_task_metric(models))
    assert rep.tiers["A"] is True
    fixed = [r for r in rep.rows if r["variant"] == "fixed_point"]
    assert len(fixed) == 3 * grid5.tasks[0].n_states
    assert all(r["margin"] >= -1e-9 for r in fixed)


def test_value_bound_rejects_mismatched_provenance(grid5):
    models = [models_from_task(t) for t in grid5.train_tasks]
    joint, _ = fixed_point_task_metric(models, gamma=0.5, tol=1e-9)
    with pytest.raises(VerificationError):
        check_value_bound(grid5, None, joint)
    joint, _ = fixed_point_task_metric(models, gamma=grid5.gamma, tol=1e-9)
    S, A = models[0].n_states, models[0].n_actions
    other = np.zeros((S, A))
    other[:, 0] = 1.0
    with pytest.raises(VerificationError):
        check_value_bound(grid5, other, joint)


def test_transfer_bound_tiers(grid5):
    models = [models_from_task(t) for t in grid5.train_tasks]
    rep = check_transfer_bound(grid5, oracle_embeddings(models))
    assert rep.tiers == {"A": True, "B": True}
    diag = [r for r in rep.rows if r["task_i"] == r["task_j"]]
    assert diag and all(r["lhs"] == 0.0 and r["rhs"] == 0.0 for r in diag)
    # a merging abstraction has no tier verdicts and never tightens the bound
    g = StateAbstraction.from_labels([0, 0] + list(range(1, grid5.tasks[0].n_states - 1)))
    merged = check_transfer_bound(grid5, oracle_embeddings(models), g)
    assert merged.tiers["A"] is None and "B" not in merged.tiers
    assert lemma_monotone(grid5, oracle_embeddings(models), g)


def test_oracle_embedding_distances():
    rng = np.random.default_rng(2)
    models = [models_from_task(random_task(rng, task_id=k)) for k in range(3)]
    dev = deviation_matrix(models)
    z = oracle_embeddings(models)
    off = ~np.eye(3, dtype=bool)
    assert np.allclose(z.pairwise_l1()[off], dev.max())
    assert np.allclose(dev, dev.T) and np.all(np.diag(dev) == 0)


def test_transfer_bound_gamma_mismatch(grid5):
    models = [models_from_task(t) for t in grid5.train_tasks]
    with pytest.raises(VerificationError):
        check_transfer_bound(grid5, oracle_embeddings(models), gamma=0.5)


def test_uniform_policy_is_default():
    assert np.allclose(uniform_policy(2, 4), 0.25)
