"""Bayes-optimal planning on the belief MDP and tabular soft Q-learning.

The oracle expands the reachable ``(t, state, posterior)`` graph exactly and
solves it by backward induction on the undiscounted meta-episode return.
The learner runs soft Q-learning on ``(state, belief feature)`` cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .belief import BeliefPipeline
from .emit import write_rows
from .errors import ConfigurationError, PreconditionError, ResourceError
from .models import array_hash
from .tasks import TabularTask, TaskFamily, generate_family, run_meta_episode, step

FEATURE_MODES = ("moments", "quantized_posterior")
DEFAULT_BINS = {"moments": 0.25, "quantized_posterior": 0.1}
NODE_BUDGET = 1_000_000
DEDUP_DECIMALS = 12


# --------------------------------------------------------------------------
# belief features


@dataclass(frozen=True)
class BeliefFeaturizer:
    mode: str = "moments"
    bins: Optional[float] = None

    def __post_init__(self):
        if self.mode not in FEATURE_MODES:
            raise ConfigurationError("featurizer", f"mode must be one of {FEATURE_MODES}")
        if self.bins is None:
            object.__setattr__(self, "bins", DEFAULT_BINS[self.mode])
        if self.bins <= 0:
            raise ConfigurationError("featurizer", "bins must be positive")

    def d_feat(self, n_tasks: int, d_z: int = 0) -> int:
        return n_tasks if self.mode == "quantized_posterior" else 2 * d_z

    def __call__(self, posterior: np.ndarray, mixed=None) -> tuple:
        if self.mode == "quantized_posterior":
            vals = np.asarray(posterior, dtype=float)
        else:
            if mixed is None:
                raise PreconditionError("moments features need a pipeline with embedding tables")
            vals = np.concatenate([mixed.mu, mixed.sigma])
        return tuple(int(c) for c in np.floor(vals / self.bins + 0.5))


# --------------------------------------------------------------------------
# soft Q-learning


def soft_value(q: np.ndarray, alpha: float) -> float:
    """``alpha * log sum exp(q / alpha)``; the hard max when ``alpha == 0``."""
    m = float(q.max())
    if alpha <= 0:
        return m
    return m + alpha * math.log(float(np.exp((q - m) / alpha).sum()))


@dataclass
class SoftQTable:
    n_actions: int
    alpha: float = 0.01
    q: dict = field(default_factory=dict)
    visits: dict = field(default_factory=dict)
    curve: list = field(default_factory=list)
    seed: int = 0

    def values(self, state: int, feat: tuple) -> np.ndarray:
        key = (int(state), feat)
        if key not in self.q:
            self.q[key] = np.zeros(self.n_actions)
            self.visits[key] = np.zeros(self.n_actions, dtype=np.int64)
        return self.q[key]

    def peek(self, state: int, feat: tuple) -> np.ndarray:
        return self.q.get((int(state), feat), np.zeros(self.n_actions))

    def soft_policy(self, state: int, feat: tuple) -> np.ndarray:
        q = self.peek(state, feat)
        if self.alpha <= 0:
            p = (q == q.max()).astype(float)
        else:
            p = np.exp((q - q.max()) / self.alpha)
        return p / p.sum()

    def greedy(self, state: int, feat: tuple, rng: Optional[np.random.Generator] = None) -> int:
        q = self.peek(state, feat)
        best = np.flatnonzero(q >= q.max() - 1e-12)
        if rng is None or len(best) == 1:
            return int(best[0])
        return int(rng.choice(best))

    def as_policy(self):
        """Greedy agent usable with ``run_meta_episode``."""

        def act(state, belief, rng):
            return self.greedy(state, belief.features, rng)

        return act

    def digest(self) -> str:
        keys = sorted(self.q, key=repr)
        return array_hash(np.array([self.q[k] for k in keys])) if keys else "empty"


@dataclass(frozen=True)
class SoftQConfig:
    alpha: float = 0.01
    learning_rate: float = 0.2
    meta_episodes: int = 4000
    n_episodes: int = 2
    eps_start: float = 0.3
    eps_end: float = 0.01
    seed: int = 0

    def epsilon(self, m: int) -> float:
        if self.meta_episodes <= 1:
            return self.eps_end
        frac = m / (self.meta_episodes - 1)
        return self.eps_start + (self.eps_end - self.eps_start) * frac


def soft_q_learn(
    family: TaskFamily,
    pipeline: BeliefPipeline,
    config: SoftQConfig = SoftQConfig(),
    tasks: Optional[Sequence[TabularTask]] = None,
) -> SoftQTable:
    """Tabular soft Q-learning with an epsilon-greedy overlay.

    Each meta-episode draws a training task uniformly, resets the belief and
    runs ``n_episodes`` episodes. Episode ends are time-limit truncations:
    the backup always bootstraps from the observed successor.
    """
    if pipeline.featurizer is None:
        raise PreconditionError("pipeline must carry a featurizer")
    tasks = family.train_tasks if tasks is None else list(tasks)
    gamma = family.gamma
    A = tasks[0].n_actions
    table = SoftQTable(n_actions=A, alpha=config.alpha, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    lr, alpha = config.learning_rate, config.alpha

    for m in range(config.meta_episodes):
        task = tasks[int(rng.integers(len(tasks)))]
        eps = config.epsilon(m)
        pipeline.reset()
        feat = pipeline.current().features
        total, success = 0.0, False
        t = 0
        for _ in range(config.n_episodes):
            s = task.sample_initial(rng)
            for _ in range(task.horizon):
                q = table.values(s, feat)
                if rng.random() < eps:
                    a = int(rng.integers(A))
                else:
                    best = np.flatnonzero(q >= q.max() - 1e-12)
                    a = int(best[0]) if len(best) == 1 else int(rng.choice(best))
                s2, r = step(task, s, a, rng)
                pipeline.update(s, a, r, s2, step=t)
                feat2 = pipeline.current().features
                target = r + gamma * soft_value(table.values(s2, feat2), alpha)
                q[a] += lr * (target - q[a])
                table.visits[(s, feat)][a] += 1
                total += r
                success |= r > 0
                s, feat = s2, feat2
                t += 1
        table.curve.append((m, total, bool(success)))
    return table


def write_learning_curve(path, table: SoftQTable) -> None:
    write_rows(
        path,
        ["seed", "episode", "return", "success"],
        ([table.seed, m, ret, int(ok)] for m, ret, ok in table.curve),
    )


# --------------------------------------------------------------------------
# Bayes-optimal oracle


@dataclass
class BayesOptimalSolution:
    value: float
    policy: dict
    node_count: int
    tasks: list
    n_episodes: int
    horizon: int
    prior: np.ndarray
    planner: "BeliefPlanner" = None

    def digest(self) -> str:
        keys = sorted(self.policy, key=repr)
        return array_hash(np.array([self.policy[k] for k in keys], dtype=float))

    def summary(self) -> dict:
        return {"value": self.value, "node_count": self.node_count, "policy_digest": self.digest()}


class BeliefPlanner:
    """Memoized backward induction over ``(t, state, posterior)`` nodes."""

    def __init__(self, tasks: Sequence[TabularTask], n_episodes: int, budget: int = NODE_BUDGET):
        self.tasks = list(tasks)
        self.T = np.stack([t.transition for t in self.tasks])
        self.R = np.stack([t.reward for t in self.tasks])
        self.rho0 = np.stack([t.rho0 for t in self.tasks])
        self.H = self.tasks[0].horizon
        self.total = n_episodes * self.H
        self.budget = budget
        self.memo: dict = {}
        self.actions: dict = {}

    @staticmethod
    def key(p: np.ndarray) -> tuple:
        return tuple(np.round(p, DEDUP_DECIMALS) + 0.0)

    def _count(self):
        if len(self.memo) >= self.budget:
            raise ResourceError(len(self.memo), f"belief expansion exceeded {self.budget} nodes")

    def start_value(self, t: int, p: np.ndarray) -> float:
        """Value at an episode start: the initial state is drawn, then observed."""
        if t >= self.total:
            return 0.0
        key = ("start", t, self.key(p))
        if key in self.memo:
            return self.memo[key]
        self._count()
        pred = p @ self.rho0
        v = 0.0
        for s0 in np.flatnonzero(pred > 0):
            post = p * self.rho0[:, s0]
            v += pred[s0] * self.value(t, int(s0), post / post.sum())
        self.memo[key] = v
        return v

    def q_values(self, t: int, s: int, p: np.ndarray) -> np.ndarray:
        A = self.R.shape[2]
        q = np.zeros(A)
        t2 = t + 1
        boundary = t2 % self.H == 0
        live = p > 0
        for a in range(A):
            r_k = self.R[:, s, a]
            q[a] = float(p @ r_k)
            if t2 >= self.total:
                continue
            # group tasks by the (reward, successor) observation they predict
            T_sa = self.T[:, s, a, :]
            for s2 in np.flatnonzero((p[:, None] * T_sa).sum(axis=0) > 0):
                joint = p * T_sa[:, s2]
                for r in np.unique(r_k[live & (joint > 0)]):
                    w = joint * (r_k == r)
                    mass = w.sum()
                    if mass <= 0:
                        continue
                    post = w / mass
                    nxt = self.start_value(t2, post) if boundary else self.value(t2, int(s2), post)
                    q[a] += mass * nxt
        return q

    def value(self, t: int, s: int, p: np.ndarray) -> float:
        if t >= self.total:
            return 0.0
        key = (t, s, self.key(p))
        if key in self.memo:
            return self.memo[key]
        self._count()
        q = self.q_values(t, s, p)
        best = int(np.flatnonzero(q >= q.max() - 1e-12)[0])
        self.memo[key] = float(q[best])
        self.actions[key] = best
        return float(q[best])

    def action(self, t: int, s: int, p: np.ndarray) -> int:
        key = (t, s, self.key(p))
        if key not in self.actions:
            self.value(t, s, p)
        return self.actions[key]


def bayes_optimal_value(
    family_or_tasks,
    prior=None,
    n_episodes: int = 2,
    budget: int = NODE_BUDGET,
) -> BayesOptimalSolution:
    tasks = family_or_tasks.train_tasks if isinstance(family_or_tasks, TaskFamily) else list(family_or_tasks)
    K = len(tasks)
    p0 = np.full(K, 1.0 / K) if prior is None else np.asarray(getattr(prior, "probs", prior), dtype=float)
    if len(p0) != K or abs(p0.sum() - 1) > 1e-12:
        raise PreconditionError("prior must be a distribution over the tasks")
    planner = BeliefPlanner(tasks, n_episodes, budget)
    v = planner.start_value(0, p0)
    return BayesOptimalSolution(
        value=v,
        policy=planner.actions,
        node_count=len(planner.memo),
        tasks=tasks,
        n_episodes=n_episodes,
        horizon=planner.H,
        prior=p0,
        planner=planner,
    )


class OracleAgent:
    """Acts with the planner's action at the pipeline's posterior.

    Unseen posteriors (tempered or out-of-distribution evidence) are expanded
    lazily.
    """

    def __init__(self, solution: BayesOptimalSolution):
        self.planner = solution.planner
        self.t = 0

    def reset(self):
        self.t = 0

    def __call__(self, state, belief, rng):
        a = self.planner.action(self.t % self.planner.total, int(state), belief.posterior)
        self.t += 1
        return a


def finite_horizon_values(task: TabularTask, horizon: Optional[int] = None) -> np.ndarray:
    """Optimal undiscounted ``V_h(s)`` tables for ``h = 0..H`` by value iteration."""
    H = task.horizon if horizon is None else horizon
    V = np.zeros((H + 1, task.n_states))
    for h in range(1, H + 1):
        V[h] = np.max(task.reward + task.transition @ V[h - 1], axis=1)
    return V


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalTable:
    returns: np.ndarray  # (n_tasks, n_meta, N)
    success: np.ndarray  # (n_tasks, n_meta, N) bool
    task_ids: list
    seed: int

    def adaptation_curve(self) -> tuple:
        return self.returns.mean(axis=(0, 1)), self.success.mean(axis=(0, 1))

    def mean_return(self) -> float:
        """Mean meta-episode return (summed over its episodes)."""
        return float(self.returns.sum(axis=2).mean())

    def rows(self):
        n_t, n_m, N = self.returns.shape
        for a in range(n_t):
            for m in range(n_m):
                for e in range(N):
                    yield [self.seed, self.task_ids[a], m, e, self.returns[a, m, e], int(self.success[a, m, e])]

    def to_csv(self, path) -> None:
        write_rows(path, ["seed", "task_id", "meta_episode", "episode", "return", "success"], self.rows())


def evaluate(
    agent,
    tasks: Sequence[TabularTask],
    n_meta_episodes: int,
    pipeline: BeliefPipeline,
    seed: int = 0,
    n_episodes: int = 2,
) -> EvalTable:
    """Per-episode returns of ``agent`` on every task, with a persistent belief."""
    ref = pipeline.tasks[0]
    for t in tasks:
        if (t.n_states, t.n_actions) != (ref.n_states, ref.n_actions):
            raise PreconditionError("evaluation tasks must share spaces with the training family")
    if isinstance(agent, SoftQTable):
        agent = agent.as_policy()
    elif isinstance(agent, BayesOptimalSolution):
        agent = OracleAgent(agent)
    rng = np.random.default_rng(seed)
    returns = np.zeros((len(tasks), n_meta_episodes, n_episodes))
    success = np.zeros_like(returns, dtype=bool)
    for i, task in enumerate(tasks):
        for m in range(n_meta_episodes):
            if hasattr(agent, "reset"):
                agent.reset()
            h = run_meta_episode(task, agent, n_episodes, pipeline, rng)
            r = h.rewards.reshape(n_episodes, task.horizon)
            returns[i, m] = r.sum(axis=1)
            success[i, m] = (r > 0).any(axis=1)
    return EvalTable(returns, success, [t.id for t in tasks], seed)


def ood_tasks(family: TaskFamily, ring_radius_frac: float) -> list:
    """The family's tasks regenerated at another goal-ring radius."""
    if family.kind != "semicircle_grid":
        raise PreconditionError("ring-radius shifts apply to semicircle grids only")
    cfg = dict(family.config, ring_radius_frac=ring_radius_frac)
    shifted = generate_family(family.kind, cfg, family.seed)
    return [shifted.tasks[i] for i in family.train_ids]
