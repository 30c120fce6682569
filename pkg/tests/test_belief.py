import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bamdp_lab.belief import (
    BeliefPipeline,
    DiscretePosterior,
    GaussianBeliefSummary,
    bayes_update,
    fold_posterior,
    gaussian_kl,
    mix_beliefs,
    moment_match,
)
from bamdp_lab.embedding import EmbeddingTable
from bamdp_lab.errors import InferenceError, PreconditionError
from bamdp_lab.tasks import generate_family, run_meta_episode, uniform_random_policy


@pytest.fixture(scope="module")
def walk():
    return generate_family("param_walk", {"K": 4, "v_bins": 8, "horizon": 6}, 0)


@given(st.integers(0, 10_000))
def test_fold_equals_joint_likelihood(seed):
    fam = generate_family("param_walk", {"K": 3, "v_bins": 8, "horizon": 5}, seed % 7)
    tasks = fam.train_tasks
    rng = np.random.default_rng(seed)
    truth = tasks[int(rng.integers(3))]
    h = run_meta_episode(truth, uniform_random_policy(truth.n_actions), 2, None, rng)
    prior = rng.dirichlet(np.ones(3))
    joint = prior.copy()
    for s, a, r, s2 in h.steps:
        joint *= [t.transition[s, a, s2] * (t.reward[s, a] == r) for t in tasks]
    post = fold_posterior(prior, tasks, h.steps).probs
    assert np.max(np.abs(post - joint / joint.sum())) <= 1e-12


def test_impossible_observation_raises_without_tempering(walk):
    tasks = walk.train_tasks
    t0 = tasks[0]
    # an observed reward no task can emit
    with pytest.raises(InferenceError) as exc:
        bayes_update(DiscretePosterior.uniform(4), tasks, (0, 0, 0.123, 0), step=5)
    assert exc.value.step == 5
    post = bayes_update(DiscretePosterior.uniform(4), tasks, (0, 0, 0.123, 0), tempering=1e-6)
    assert np.allclose(post.probs, 0.25)
    with pytest.raises(PreconditionError):
        bayes_update(DiscretePosterior.uniform(4), tasks, (t0.n_states, 0, 0.0, 0))


def test_posterior_validation():
    with pytest.raises(PreconditionError):
        DiscretePosterior(np.array([0.5, 0.6]))
    assert DiscretePosterior.point(3, 1).entropy() == 0.0
    assert np.isclose(DiscretePosterior.uniform(4).entropy(), np.log(4))


def test_moment_match_of_point_mass_is_exact():
    rng = np.random.default_rng(0)
    table = EmbeddingTable(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)) * 0.2)
    g = moment_match(DiscretePosterior.point(3, 2), table)
    assert np.array_equal(g.mu, table.mu[2]) and np.array_equal(g.sigma, table.sigma[2])


def test_moment_match_against_sampling():
    rng = np.random.default_rng(1)
    table = EmbeddingTable(rng.normal(size=(3, 2)), np.log(rng.uniform(0.2, 0.8, size=(3, 2))))
    p = np.array([0.2, 0.5, 0.3])
    g = moment_match(p, table)
    k = rng.choice(3, size=400_000, p=p)
    z = rng.normal(table.mu[k], table.sigma[k])
    assert np.allclose(z.mean(0), g.mu, atol=1e-2) and np.allclose(z.std(0), g.sigma, atol=1e-2)


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_mixture_is_swap_symmetric(seed, w):
    rng = np.random.default_rng(seed)
    a = GaussianBeliefSummary(rng.normal(size=3), rng.uniform(0.1, 1, 3))
    b = GaussianBeliefSummary(rng.normal(size=3), rng.uniform(0.1, 1, 3))
    m1, m2 = mix_beliefs(a, b, w, 1 - w), mix_beliefs(b, a, 1 - w, w)
    assert np.allclose(m1.mu, m2.mu, atol=1e-15) and np.allclose(m1.sigma, m2.sigma, atol=1e-15)


def test_degenerate_weights_copy_one_component():
    a = GaussianBeliefSummary(np.array([1.0]), np.array([0.5]))
    b = GaussianBeliefSummary(np.array([-1.0]), np.array([2.0]))
    m = mix_beliefs(a, b, 1.0, 0.0)
    assert m.mu[0] == 1.0 and m.sigma[0] == 0.5
    with pytest.raises(PreconditionError):
        mix_beliefs(a, b, 0.7, 0.7)


def test_gaussian_kl_against_quadrature():
    a = GaussianBeliefSummary(np.array([0.3]), np.array([0.7]))
    b = GaussianBeliefSummary(np.array([-0.4]), np.array([1.3]))
    x = np.linspace(-12, 12, 400_001)
    pa = np.exp(-0.5 * ((x - 0.3) / 0.7) ** 2) / (0.7 * np.sqrt(2 * np.pi))
    pb = np.exp(-0.5 * ((x + 0.4) / 1.3) ** 2) / (1.3 * np.sqrt(2 * np.pi))
    numeric = np.sum(pa * np.log(pa / pb)) * (x[1] - x[0])
    assert abs(gaussian_kl(a, b) - numeric) < 1e-6
    assert gaussian_kl(a, a) == 0.0


def test_pipeline_tracks_fold_and_resets(walk):
    tasks = walk.train_tasks
    rng = np.random.default_rng(3)
    table = EmbeddingTable(rng.normal(size=(4, 2)), np.zeros((4, 2)), "specific_anchor")
    pipe = BeliefPipeline(tasks, specific=table, latent=table, tempering=0.0)
    h = run_meta_episode(tasks[1], uniform_random_policy(tasks[1].n_actions), 2, pipe, rng)
    assert np.allclose(pipe.posterior, fold_posterior(np.full(4, 0.25), tasks, h.steps).probs, atol=1e-15)
    assert h.beliefs.shape == (len(h) + 1, 4)
    state = pipe.current()
    assert state is pipe.current()  # cached until the next update
    pipe.reset()
    assert np.allclose(pipe.posterior, 0.25)
    with pytest.raises(PreconditionError):
        BeliefPipeline(tasks, weights=(0.6, 0.6))
