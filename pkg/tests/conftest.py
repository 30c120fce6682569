import numpy as np
import pytest
from hypothesis import settings

from bamdp_lab.tasks import TabularTask, generate_family

settings.register_profile("lab", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("lab")


@pytest.fixture(scope="session")
def two_goal_family():
    return generate_family("semicircle_grid", {"grid": 7, "K": 2, "placement": "even", "horizon": 6}, 0)


@pytest.fixture(scope="session")
def small_grid_family():
    return generate_family("semicircle_grid", {"grid": 5, "K": 3, "placement": "even", "horizon": 10}, 0)


def random_task(rng, S=4, A=2, task_id=0, gamma=0.9, horizon=5, sparse=False):
    T = rng.dirichlet(np.ones(S) * (0.3 if sparse else 1.0), size=(S, A))
    R = rng.uniform(0, 1, size=(S, A))
    return TabularTask(task_id, T, R, np.full(S, 1.0 / S), gamma, horizon)
