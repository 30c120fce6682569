import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bamdp_lab.errors import EstimationError, PreconditionError
from bamdp_lab.models import (
    StateAbstraction,
    abstraction_errors,
    compose_inverse,
    estimate_models,
    load_models,
    models_from_task,
    save_models,
    uniform_policy,
)
from bamdp_lab.tasks import History, TabularTask, run_meta_episode, uniform_random_policy

from conftest import random_task


@given(st.integers(0, 10_000), st.integers(2, 5), st.integers(1, 4))
def test_inverse_dynamics_is_bayes_rule(seed, S, A):
    rng = np.random.default_rng(seed)
    T = rng.dirichlet(np.ones(S), size=(S, A))
    pi = rng.dirichlet(np.ones(A), size=S)
    inv = compose_inverse(T, pi)
    for s in range(S):
        for s2 in range(S):
            num = np.array([pi[s, a] * T[s, a, s2] for a in range(A)])
            assert np.allclose(inv[s, s2], num / num.sum(), atol=1e-13)


def test_unreachable_pair_gets_uniform_inverse():
    T = np.zeros((2, 2, 2))
    T[:, :, 0] = 1.0
    inv = compose_inverse(T, uniform_policy(2, 2))
    assert np.allclose(inv[0, 1], 0.5)


def _history(steps, task_id=0, horizon=None):
    s, a, r, s2 = (np.array(x) for x in zip(*steps))
    return History(s, a, r.astype(float), s2, (), task_id, 1, horizon or len(steps))


def test_smoothed_estimates_match_hand_counts():
    # two visits of (0, 0): one to 1 with reward 1, one to 0 with reward 0
    h = _history([(0, 0, 1.0, 1), (0, 0, 0.0, 0)])
    m = estimate_models(h, (2, 1), smoothing=0.5, r_max=1.0)
    assert np.allclose(m.t_hat[0, 0], [(1 + 0.5) / (2 + 1.0), (1 + 0.5) / (2 + 1.0)])
    assert np.isclose(m.r_hat[0, 0], (1.0 + 0.5 * 0.5) / (2 + 0.5))
    # unvisited row relaxes to the prior
    assert np.allclose(m.t_hat[1, 0], [0.5, 0.5])
    assert np.isclose(m.r_hat[1, 0], 0.5)


def test_unsmoothed_estimates_converge_to_the_task():
    rng = np.random.default_rng(3)
    task = random_task(rng, S=3, A=2, horizon=50)
    hs = [run_meta_episode(task, uniform_random_policy(2), 4, None, rng) for _ in range(100)]
    m = estimate_models(hs, (3, 2), smoothing=0.0)
    assert np.max(np.abs(m.t_hat - task.transition)) < 0.05
    assert np.allclose(m.r_hat, task.reward)


def test_empty_history_without_prior_is_rejected():
    with pytest.raises(EstimationError):
        estimate_models([], (2, 2), smoothing=0.0)
    with pytest.raises(PreconditionError):
        estimate_models([], (2, 2), smoothing=-1.0)


def test_model_roundtrip(tmp_path):
    task = random_task(np.random.default_rng(0))
    m = models_from_task(task)
    save_models([m, m], tmp_path / "m.json")
    back = load_models(tmp_path / "m.json")
    assert len(back) == 2 and back[0].digest() == m.digest()


def test_identity_abstraction_has_no_error():
    task = random_task(np.random.default_rng(1))
    e = abstraction_errors(task, StateAbstraction.identity(task.n_states))
    assert (e.eps_r, e.eps_t, e.eps_i) == (0.0, 0.0, 0.0)


def test_merging_duplicate_states_is_free_but_merging_distinct_ones_is_not():
    T = np.zeros((3, 1, 3))
    T[:, 0, 2] = 1.0
    R = np.array([[0.2], [0.2], [1.0]])
    task = TabularTask(0, T, R, np.full(3, 1 / 3), 0.9, 4)
    e = abstraction_errors(task, StateAbstraction.from_labels([0, 0, 1]))
    assert (e.eps_r, e.eps_t) == (0.0, 0.0)
    e2 = abstraction_errors(task, StateAbstraction.from_labels([0, 1, 1]))
    assert np.isclose(e2.eps_r, 0.8)
