"""Tabular task families and the meta-episode simulator.

Three generators mirror the sparse-reward benchmarks at desk scale:

``semicircle_grid``
    A point robot on a square grid. Goals sit on a discretised half ring
    around the start cell; reward is 1 inside an L1 ball around the goal.
``velocity_band``
    A 1-D velocity chain. Actions decrement/keep/increment the velocity bin
    and reward fires while the velocity lies inside a band around a
    per-task target.
``param_walk``
    The same chain with a shared target and a per-task action-slip
    probability, so tasks differ only in their dynamics.

A meta-episode runs ``n_episodes`` episodes of one task. The environment
state resets to ``rho0`` at every episode break; the belief does not.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, PreconditionError, ProtocolError

KINDS = ("semicircle_grid", "velocity_band", "param_walk")

# Grid action order: up, down, left, right, stay.
GRID_MOVES = ((0, 1), (0, -1), (-1, 0), (1, 0), (0, 0))
# Chain action order: decrement, stay, increment.
CHAIN_MOVES = (-1, 0, 1)

_STOCHASTIC_TOL = 1e-12


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class TabularTask:
    """A finite MDP standing for one draw from the task distribution."""

    id: int
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    rho0: np.ndarray  # (S,)
    gamma: float
    horizon: int
    r_max: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "rho0", _frozen(self.rho0))
        validate_task(self)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @cached_property
    def _cdf(self) -> np.ndarray:
        return np.cumsum(self.transition, axis=2)

    @cached_property
    def _rho0_cdf(self) -> np.ndarray:
        return np.cumsum(self.rho0)

    def sample_initial(self, rng: np.random.Generator) -> int:
        return _draw(self._rho0_cdf, rng)


def validate_task(task: TabularTask) -> None:
    T, R, rho0 = task.transition, task.reward, task.rho0
    if T.ndim != 3 or T.shape[0] != T.shape[2]:
        raise PreconditionError(f"transition must be (S, A, S), got {T.shape}")
    if R.shape != T.shape[:2]:
        raise PreconditionError(f"reward shape {R.shape} does not match {T.shape[:2]}")
    if rho0.shape != (T.shape[0],):
        raise PreconditionError("rho0 length must equal n_states")
    if np.any(T < 0) or np.max(np.abs(T.sum(axis=2) - 1.0)) > _STOCHASTIC_TOL:
        raise PreconditionError("transition rows must be stochastic")
    if np.any(R < 0) or np.any(R > task.r_max):
        raise PreconditionError("rewards must lie in [0, r_max]")
    if np.any(rho0 < 0) or abs(rho0.sum() - 1.0) > _STOCHASTIC_TOL:
        raise PreconditionError("rho0 must be a distribution")
    if not 0.0 < task.gamma < 1.0:
        raise PreconditionError("gamma must lie in (0, 1)")
    if task.horizon < 1:
        raise PreconditionError("horizon must be positive")


@dataclass(frozen=True, eq=False)
class TaskFamily:
    tasks: tuple
    kind: str
    train_ids: tuple
    eval_ids: tuple
    config: dict
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        first = self.tasks[0]
        for t in self.tasks:
            if (t.n_states, t.n_actions, t.gamma, t.horizon) != (
                first.n_states, first.n_actions, first.gamma, first.horizon
            ):
                raise PreconditionError("tasks in a family must share S, A, gamma and horizon")
        ids = set(self.train_ids) | set(self.eval_ids)
        if set(self.train_ids) & set(self.eval_ids) or ids != set(range(len(self.tasks))):
            raise PreconditionError("train_ids and eval_ids must partition the task ids")

    def __len__(self):
        return len(self.tasks)

    @property
    def train_tasks(self) -> list:
        return [self.tasks[i] for i in self.train_ids]

    @property
    def eval_tasks(self) -> list:
        return [self.tasks[i] for i in self.eval_ids]

    @property
    def gamma(self) -> float:
        return self.tasks[0].gamma

    @property
    def horizon(self) -> int:
        return self.tasks[0].horizon


# --------------------------------------------------------------------------
# generators

GRID_DEFAULTS = dict(
    grid=11,
    ring_radius_frac=1.0,
    goal_radius_frac=0.3,
    K=8,
    unit_cells=None,
    placement="uniform",
    horizon=60,
    gamma=0.9,
    n_eval=0,
)

VELOCITY_DEFAULTS = dict(
    v_bins=16,
    v_range=(0.0, 3.0),
    band=0.5,
    K=6,
    horizon=20,
    gamma=0.9,
    n_eval=0,
)

WALK_DEFAULTS = dict(
    v_bins=12,
    v_range=(0.0, 3.0),
    target=1.5,
    band=0.5,
    slip_range=(0.0, 0.5),
    K=6,
    horizon=20,
    gamma=0.9,
    n_eval=0,
)

_DEFAULTS = {
    "semicircle_grid": GRID_DEFAULTS,
    "velocity_band": VELOCITY_DEFAULTS,
    "param_walk": WALK_DEFAULTS,
}


def resolve_config(kind: str, config: Optional[dict]) -> dict:
    if kind not in _DEFAULTS:
        raise ConfigurationError("kind", f"unknown family kind {kind!r}; expected one of {KINDS}")
    defaults = _DEFAULTS[kind]
    config = dict(config or {})
    unknown = set(config) - set(defaults)
    if unknown:
        raise ConfigurationError(sorted(unknown)[0], f"not a {kind} parameter")
    out = dict(defaults)
    out.update(config)
    for key in ("v_range", "slip_range"):
        if key in out:
            out[key] = tuple(float(v) for v in out[key])
    return out


def generate_family(kind: str, config: Optional[dict] = None, seed: int = 0) -> TaskFamily:
    """Build a seeded task family of the given kind.

    Identical ``(kind, config, seed)`` always yields bit-identical arrays.
    """
    cfg = resolve_config(kind, config)
    K = int(cfg["K"])
    if K < 1:
        raise ConfigurationError("K", "need at least one task")
    n_eval = int(cfg["n_eval"])
    if not 0 <= n_eval < K:
        raise ConfigurationError("n_eval", "must leave at least one training task")
    if int(cfg["horizon"]) < 1:
        raise ConfigurationError("horizon", "must be positive")
    if not 0.0 < float(cfg["gamma"]) < 1.0:
        raise ConfigurationError("gamma", "must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    builder = {
        "semicircle_grid": _semicircle_tasks,
        "velocity_band": _velocity_tasks,
        "param_walk": _walk_tasks,
    }[kind]
    tasks, meta = builder(cfg, rng)
    train_ids = tuple(range(K - n_eval))
    eval_ids = tuple(range(K - n_eval, K))
    return TaskFamily(
        tasks=tuple(tasks),
        kind=kind,
        train_ids=train_ids,
        eval_ids=eval_ids,
        config=cfg,
        seed=int(seed),
        meta=meta,
    )


def grid_geometry(cfg: dict) -> dict:
    """Cell geometry shared by every task of a semicircle grid."""
    G = int(cfg["grid"])
    if G < 5:
        raise ConfigurationError("grid", "grid side must be at least 5")
    cx = (G - 1) // 2
    unit = cfg.get("unit_cells")
    # leave room for a 1.25x ring plus the goal zone
    unit = (G - 1) / 2 / (1.25 + float(cfg["goal_radius_frac"])) if unit is None else float(unit)
    if unit <= 0:
        raise ConfigurationError("unit_cells", "must be positive")
    zone = float(cfg["goal_radius_frac"]) * unit
    if zone < 0:
        raise ConfigurationError("goal_radius_frac", "must be non-negative")
    ring = float(cfg["ring_radius_frac"]) * unit
    if ring <= 0:
        raise ConfigurationError("ring_radius_frac", "must be positive")
    margin = int(math.floor(zone + 1e-9))
    return dict(G=G, cx=cx, cy=margin, unit=unit, ring=ring, zone=zone, margin=margin)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def goal_cell(geom: dict, angle: float) -> tuple:
    gx = geom["cx"] + _round_half_up(geom["ring"] * math.cos(angle))
    gy = geom["cy"] + _round_half_up(geom["ring"] * math.sin(angle))
    return gx, gy


def grid_dynamics(G: int) -> np.ndarray:
    S = G * G
    T = np.zeros((S, len(GRID_MOVES), S))
    for y in range(G):
        for x in range(G):
            s = y * G + x
            for a, (dx, dy) in enumerate(GRID_MOVES):
                nx, ny = x + dx, y + dy
                if not (0 <= nx < G and 0 <= ny < G):
                    nx, ny = x, y
                T[s, a, ny * G + nx] = 1.0
    return T


def grid_task(geom: dict, goal: tuple, task_id: int, cfg: dict, T=None, angle=None) -> TabularTask:
    G, m = geom["G"], geom["margin"]
    gx, gy = goal
    if gx - m < 0 or gx + m > G - 1 or gy - m < 0 or gy + m > G - 1:
        raise ConfigurationError(
            "ring_radius_frac", f"goal zone around {goal} leaves the {G}x{G} grid"
        )
    if T is None:
        T = grid_dynamics(G)
    S = G * G
    R = np.zeros((S, len(GRID_MOVES)))
    cells = []
    for y in range(G):
        for x in range(G):
            if abs(x - gx) + abs(y - gy) <= geom["zone"] + 1e-9:
                R[y * G + x, :] = 1.0
                cells.append(y * G + x)
    rho0 = np.zeros(S)
    rho0[geom["cy"] * G + geom["cx"]] = 1.0
    meta = dict(goal=[gx, gy], goal_cells=cells)
    if angle is not None:
        meta["angle"] = float(angle)
    return TabularTask(
        id=task_id,
        transition=T,
        reward=R,
        rho0=rho0,
        gamma=float(cfg["gamma"]),
        horizon=int(cfg["horizon"]),
        r_max=1.0,
        meta=meta,
    )


def _semicircle_tasks(cfg: dict, rng: np.random.Generator):
    geom = grid_geometry(cfg)
    K = int(cfg["K"])
    placement = cfg["placement"]
    if placement == "uniform":
        angles = rng.uniform(0.0, math.pi, size=K)
    elif placement == "even":
        angles = np.linspace(0.0, math.pi, K) if K > 1 else np.array([math.pi / 2])
    else:
        raise ConfigurationError("placement", f"unknown placement {placement!r}")
    T = grid_dynamics(geom["G"])
    tasks = [
        grid_task(geom, goal_cell(geom, a), k, cfg, T=T, angle=a) for k, a in enumerate(angles)
    ]
    meta = {k: v for k, v in geom.items()}
    return tasks, meta


def _chain_velocities(cfg: dict) -> np.ndarray:
    n = int(cfg["v_bins"])
    if n < 8:
        raise ConfigurationError("v_bins", "need at least 8 velocity bins")
    lo, hi = cfg["v_range"]
    if not hi > lo:
        raise ConfigurationError("v_range", "upper bound must exceed lower bound")
    return np.linspace(lo, hi, n)


def chain_dynamics(n: int, slip: float = 0.0) -> np.ndarray:
    A = len(CHAIN_MOVES)
    base = np.zeros((n, A, n))
    for s in range(n):
        for a, d in enumerate(CHAIN_MOVES):
            base[s, a, min(max(s + d, 0), n - 1)] = 1.0
    if slip == 0.0:
        return base
    mixed = base.mean(axis=1, keepdims=True)
    return (1.0 - slip) * base + slip * mixed


def _band_reward(v: np.ndarray, target: float, band: float) -> np.ndarray:
    hit = np.abs(v - target) <= band + 1e-12
    if not hit.any():
        raise ConfigurationError("band", f"no velocity bin within {band} of target {target:.4g}")
    return np.repeat(hit.astype(float)[:, None], len(CHAIN_MOVES), axis=1)


def _chain_task(k, T, R, cfg, meta) -> TabularTask:
    rho0 = np.zeros(T.shape[0])
    rho0[0] = 1.0
    return TabularTask(
        id=k,
        transition=T,
        reward=R,
        rho0=rho0,
        gamma=float(cfg["gamma"]),
        horizon=int(cfg["horizon"]),
        r_max=1.0,
        meta=meta,
    )


def _velocity_tasks(cfg: dict, rng: np.random.Generator):
    v = _chain_velocities(cfg)
    lo, hi = cfg["v_range"]
    targets = rng.uniform(lo, hi, size=int(cfg["K"]))
    T = chain_dynamics(len(v))
    tasks = []
    for k, tgt in enumerate(targets):
        R = _band_reward(v, float(tgt), float(cfg["band"]))
        tasks.append(_chain_task(k, T, R, cfg, dict(target=float(tgt))))
    return tasks, dict(velocities=v.tolist())


def _walk_tasks(cfg: dict, rng: np.random.Generator):
    v = _chain_velocities(cfg)
    lo, hi = cfg["slip_range"]
    if not 0.0 <= lo <= hi <= 1.0:
        raise ConfigurationError("slip_range", "must satisfy 0 <= lo <= hi <= 1")
    slips = rng.uniform(lo, hi, size=int(cfg["K"]))
    R = _band_reward(v, float(cfg["target"]), float(cfg["band"]))
    tasks = [
        _chain_task(k, chain_dynamics(len(v), float(p)), R, cfg, dict(slip=float(p)))
        for k, p in enumerate(slips)
    ]
    return tasks, dict(velocities=v.tolist())


# --------------------------------------------------------------------------
# simulation


def _draw(cdf: np.ndarray, rng: np.random.Generator) -> int:
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, len(cdf) - 1)


def step(task: TabularTask, state: int, action: int, rng: np.random.Generator):
    """Sample ``s' ~ T[s, a]``; the reward is ``R[s, a]`` exactly."""
    if not 0 <= state < task.n_states:
        raise PreconditionError(f"state {state} out of range [0, {task.n_states})")
    if not 0 <= action < task.n_actions:
        raise PreconditionError(f"action {action} out of range [0, {task.n_actions})")
    nxt = _draw(task._cdf[state, action], rng)
    return nxt, float(task.reward[state, action])


@dataclass
class History:
    """Ordered record of one meta-episode.

    ``beliefs`` holds the posterior before each step plus the final one
    (length ``len(steps) + 1``) when a belief pipeline was attached.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    episode_breaks: tuple
    task_id: int
    n_episodes: int
    horizon: int
    beliefs: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.states)

    @property
    def steps(self) -> list:
        return list(
            zip(
                self.states.tolist(),
                self.actions.tolist(),
                self.rewards.tolist(),
                self.next_states.tolist(),
            )
        )

    def episode_returns(self) -> np.ndarray:
        """Undiscounted return of every episode in the meta-episode."""
        bounds = (0,) + tuple(self.episode_breaks) + (len(self),)
        return np.array([self.rewards[a:b].sum() for a, b in zip(bounds[:-1], bounds[1:])])

    @staticmethod
    def concatenate(histories: Sequence["History"]) -> "History":
        """Join histories of the same task into one (for estimation)."""
        breaks, offset = [], 0
        for h in histories:
            if offset:
                breaks.append(offset)
            breaks.extend(offset + b for b in h.episode_breaks)
            offset += len(h)
        first = histories[0]
        return History(
            states=np.concatenate([h.states for h in histories]),
            actions=np.concatenate([h.actions for h in histories]),
            rewards=np.concatenate([h.rewards for h in histories]),
            next_states=np.concatenate([h.next_states for h in histories]),
            episode_breaks=tuple(breaks),
            task_id=first.task_id,
            n_episodes=sum(h.n_episodes for h in histories),
            horizon=first.horizon,
        )


def uniform_random_policy(n_actions: int) -> Callable:
    def act(state, belief, rng):
        return int(rng.integers(n_actions))

    return act


def run_meta_episode(
    task: TabularTask,
    policy: Callable,
    n_episodes: int,
    belief_pipeline=None,
    rng: Optional[np.random.Generator] = None,
) -> History:
    """Roll out ``n_episodes`` episodes of ``task`` with a persistent belief.

    ``policy(state, belief, rng)`` returns an action index, where ``belief``
    is ``belief_pipeline.current()`` (``None`` without a pipeline). The
    pipeline is reset to its prior once, at the start of the meta-episode.
    """
    if n_episodes < 1:
        raise PreconditionError("n_episodes must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    H = task.horizon
    n = n_episodes * H
    states = np.empty(n, dtype=np.int64)
    actions = np.empty(n, dtype=np.int64)
    rewards = np.empty(n)
    nexts = np.empty(n, dtype=np.int64)
    beliefs = None
    if belief_pipeline is not None:
        belief_pipeline.reset()
        beliefs = [belief_pipeline.posterior.copy()]
    breaks = []
    t = 0
    for ep in range(n_episodes):
        if ep:
            breaks.append(t)
        s = task.sample_initial(rng)
        for _ in range(H):
            belief = belief_pipeline.current() if belief_pipeline is not None else None
            a = policy(s, belief, rng)
            if not isinstance(a, (int, np.integer)) or not 0 <= a < task.n_actions:
                raise ProtocolError(t, f"policy returned invalid action {a!r}")
            s2, r = step(task, s, int(a), rng)
            states[t], actions[t], rewards[t], nexts[t] = s, a, r, s2
            if belief_pipeline is not None:
                belief_pipeline.update(s, int(a), r, s2, step=t)
                beliefs.append(belief_pipeline.posterior.copy())
            s = s2
            t += 1
    return History(
        states=states,
        actions=actions,
        rewards=rewards,
        next_states=nexts,
        episode_breaks=tuple(breaks),
        task_id=task.id,
        n_episodes=n_episodes,
        horizon=H,
        beliefs=None if beliefs is None else np.array(beliefs),
    )


# --------------------------------------------------------------------------
# serialization


def _jsonable(obj: Any):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def family_to_dict(family: TaskFamily) -> dict:
    return {
        "kind": family.kind,
        "config": _jsonable(family.config),
        "seed": family.seed,
        "train_ids": list(family.train_ids),
        "eval_ids": list(family.eval_ids),
        "meta": _jsonable(family.meta),
        "tasks": [
            {
                "id": t.id,
                "gamma": t.gamma,
                "horizon": t.horizon,
                "r_max": t.r_max,
                "rho0": t.rho0.tolist(),
                "reward": t.reward.tolist(),
                "transition": t.transition.tolist(),
                "meta": _jsonable(t.meta),
            }
            for t in family.tasks
        ],
    }


def family_from_dict(doc: dict) -> TaskFamily:
    tasks = tuple(
        TabularTask(
            id=int(t["id"]),
            transition=np.array(t["transition"], dtype=float),
            reward=np.array(t["reward"], dtype=float),
            rho0=np.array(t["rho0"], dtype=float),
            gamma=float(t["gamma"]),
            horizon=int(t["horizon"]),
            r_max=float(t["r_max"]),
            meta=t.get("meta", {}),
        )
        for t in doc["tasks"]
    )
    config = dict(doc["config"])
    for key in ("v_range", "slip_range"):
        if key in config:
            config[key] = tuple(config[key])
    return TaskFamily(
        tasks=tasks,
        kind=doc["kind"],
        train_ids=tuple(doc["train_ids"]),
        eval_ids=tuple(doc["eval_ids"]),
        config=config,
        seed=int(doc["seed"]),
        meta=doc.get("meta", {}),
    )


def save_family(family: TaskFamily, path) -> None:
    with open(path, "w") as fh:
        json.dump(family_to_dict(family), fh)


def load_family(path) -> TaskFamily:
    with open(path) as fh:
        return family_from_dict(json.load(fh))
