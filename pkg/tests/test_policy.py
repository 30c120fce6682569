import numpy as np
import pytest

from bamdp_lab.belief import BeliefPipeline
from bamdp_lab.embedding import EmbeddingTable
from bamdp_lab.errors import ConfigurationError, PreconditionError, ResourceError
from bamdp_lab.policy import (
    BeliefFeaturizer,
    SoftQConfig,
    bayes_optimal_value,
    evaluate,
    finite_horizon_values,
    ood_tasks,
    soft_q_learn,
    soft_value,
)
from bamdp_lab.tasks import TabularTask, generate_family

# exact Bayes-optimal value of the two-goal grid (K=2, H=6, N=2), frozen from the oracle
TWO_GOAL_VALUE = 6.0


def _tiny_tasks(seed, K=2, S=3, A=2, H=2):
    rng = np.random.default_rng(seed)
    rho0 = rng.dirichlet(np.ones(S))
    out = []
    for k in range(K):
        T = rng.dirichlet(np.ones(S), size=(S, A))
        R = rng.integers(0, 2, size=(S, A)).astype(float)
        out.append(TabularTask(k, T, R, rho0, 0.9, H))
    return out


def _brute(tasks, p, N):
    """Expectimax over the true task, with no memo and no observation grouping."""
    H = tasks[0].horizon
    S, A = tasks[0].n_states, tasks[0].n_actions

    def post(p, lik):
        q = p * lik
        return q / q.sum()

    def start(t, p):
        if t >= N * H:
            return 0.0
        v = 0.0
        for k, tk in enumerate(tasks):
            for s in range(S):
                w = p[k] * tk.rho0[s]
                if w > 0:
                    v += w * node(t, s, post(p, np.array([x.rho0[s] for x in tasks])))
        return v

    def node(t, s, p):
        best = -np.inf
        for a in range(A):
            q = 0.0
            for k, tk in enumerate(tasks):
                if p[k] == 0:
                    continue
                r = tk.reward[s, a]
                q += p[k] * r
                if t + 1 >= N * H:
                    continue
                for s2 in range(S):
                    w = p[k] * tk.transition[s, a, s2]
                    if w == 0:
                        continue
                    lik = np.array([x.transition[s, a, s2] * (x.reward[s, a] == r) for x in tasks])
                    p2 = post(p, lik)
                    q += w * (start(t + 1, p2) if (t + 1) % H == 0 else node(t + 1, s2, p2))
            best = max(best, q)
        return best

    return start(0, np.asarray(p, dtype=float))


@pytest.mark.parametrize("seed", range(4))
def test_planner_matches_brute_force_expectimax(seed):
    tasks = _tiny_tasks(seed)
    for N in (1, 2):
        sol = bayes_optimal_value(tasks, [0.3, 0.7], n_episodes=N)
        assert abs(sol.value - _brute(tasks, [0.3, 0.7], N)) < 1e-10


def test_single_task_value_is_the_planning_value():
    task = _tiny_tasks(5, K=1, H=3)[0]
    sol = bayes_optimal_value([task], n_episodes=2)
    assert abs(sol.value - 2 * task.rho0 @ finite_horizon_values(task)[-1]) < 1e-12


def test_two_goal_golden_value(two_goal_family):
    sol = bayes_optimal_value(two_goal_family, n_episodes=2)
    assert sol.value == pytest.approx(TWO_GOAL_VALUE, abs=1e-12)


def test_node_budget_is_enforced(two_goal_family):
    with pytest.raises(ResourceError):
        bayes_optimal_value(two_goal_family, n_episodes=2, budget=50)
    with pytest.raises(PreconditionError):
        bayes_optimal_value(two_goal_family, prior=[0.5, 0.6])


def test_oracle_agent_attains_its_value_on_deterministic_tasks(two_goal_family):
    sol = bayes_optimal_value(two_goal_family, n_episodes=2)
    pipe = BeliefPipeline(two_goal_family.train_tasks, tempering=0.0)
    res = evaluate(sol, two_goal_family.train_tasks, 5, pipe, seed=0, n_episodes=2)
    assert res.returns.shape == (2, 5, 2)
    assert res.mean_return() == pytest.approx(sol.value)


def test_soft_value_limits():
    q = np.array([1.0, 2.0, 0.5])
    assert soft_value(q, 0.0) == 2.0
    assert soft_value(q, 1e-4) == pytest.approx(2.0, abs=1e-3)
    assert soft_value(q, 0.5) == pytest.approx(0.5 * np.log(np.exp(q / 0.5).sum()))


def test_featurizer_quantizes():
    f = BeliefFeaturizer("quantized_posterior", bins=0.1)
    assert f(np.array([0.26, 0.74])) == (3, 7)
    with pytest.raises(ConfigurationError):
        BeliefFeaturizer("pixels")
    with pytest.raises(PreconditionError):
        BeliefFeaturizer("moments")(np.array([1.0]), None)


def _pipeline(family):
    K = len(family.train_ids)
    table = EmbeddingTable(np.eye(K), np.full((K, K), np.log(0.1)), "specific_anchor")
    return BeliefPipeline(family.train_tasks, specific=table, latent=table, featurizer=BeliefFeaturizer())


def test_learning_is_seed_deterministic(two_goal_family):
    cfg = SoftQConfig(meta_episodes=200, seed=4)
    a = soft_q_learn(two_goal_family, _pipeline(two_goal_family), cfg)
    b = soft_q_learn(two_goal_family, _pipeline(two_goal_family), cfg)
    assert a.digest() == b.digest() and a.curve == b.curve
    c = soft_q_learn(two_goal_family, _pipeline(two_goal_family), SoftQConfig(meta_episodes=200, seed=5))
    assert c.digest() != a.digest()


def test_learner_needs_a_featurizer(two_goal_family):
    with pytest.raises(PreconditionError):
        soft_q_learn(two_goal_family, BeliefPipeline(two_goal_family.train_tasks), SoftQConfig(meta_episodes=1))


def test_epsilon_schedule_is_linear():
    cfg = SoftQConfig(meta_episodes=11, eps_start=0.3, eps_end=0.1)
    assert cfg.epsilon(0) == pytest.approx(0.3) and cfg.epsilon(10) == pytest.approx(0.1)
    assert cfg.epsilon(5) == pytest.approx(0.2)


def test_ood_tasks_move_the_goals():
    fam = generate_family(
        "semicircle_grid", {"grid": 11, "K": 4, "placement": "even", "horizon": 12, "goal_radius_frac": 0.35}, 0
    )
    same = ood_tasks(fam, 1.0)
    assert all(np.array_equal(a.reward, b.reward) for a, b in zip(same, fam.train_tasks))
    far = ood_tasks(fam, 1.2)
    assert any(not np.array_equal(a.reward, b.reward) for a, b in zip(far, fam.train_tasks))
    with pytest.raises(PreconditionError):
        ood_tasks(generate_family("velocity_band", {"K": 2}, 0), 1.2)
