"""Count-based dynamics models, inverse dynamics and abstraction errors."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import EstimationError, PreconditionError
from .tasks import History, TabularTask

DEFAULT_SMOOTHING = 0.05


def uniform_policy(n_states: int, n_actions: int) -> np.ndarray:
    return np.full((n_states, n_actions), 1.0 / n_actions)


def validate_policy(policy: np.ndarray, n_states: int, n_actions: int) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (n_states, n_actions):
        raise PreconditionError(f"policy must have shape {(n_states, n_actions)}, got {policy.shape}")
    if np.any(policy < 0) or np.max(np.abs(policy.sum(axis=1) - 1.0)) > 1e-12:
        raise PreconditionError("policy rows must be distributions")
    return policy


def array_hash(*arrays) -> str:
    h = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr, dtype=float)
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


def policy_hash(policy: np.ndarray) -> str:
    return array_hash(policy)


@dataclass(frozen=True, eq=False)
class TabularModelSet:
    """Estimated reward, transition and inverse-dynamics tables of one task."""

    r_hat: np.ndarray  # (S, A)
    t_hat: np.ndarray  # (S, A, S)
    i_hat: np.ndarray  # (S, S', A)
    visit_counts: np.ndarray  # (S, A)
    policy: np.ndarray  # (S, A)
    r_max: float = 1.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("r_hat", "t_hat", "i_hat", "visit_counts", "policy"):
            arr = np.array(getattr(self, name), dtype=float, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.t_hat.shape[0]

    @property
    def n_actions(self) -> int:
        return self.t_hat.shape[1]

    @property
    def policy_ref(self) -> str:
        return policy_hash(self.policy)

    def digest(self) -> str:
        return array_hash(self.r_hat, self.t_hat, self.i_hat, self.policy)

    def policy_transition(self) -> np.ndarray:
        """State-to-state kernel ``T^pi[s, s']`` under the stored policy."""
        return np.einsum("sa,sax->sx", self.policy, self.t_hat)

    def to_dict(self) -> dict:
        return {
            "r_max": self.r_max,
            "provenance": dict(self.provenance, digest=self.digest()),
            "policy": self.policy.tolist(),
            "visit_counts": self.visit_counts.tolist(),
            "reward": self.r_hat.tolist(),
            "transition": self.t_hat.tolist(),
            "inverse": self.i_hat.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularModelSet":
        return cls(
            r_hat=np.array(doc["reward"]),
            t_hat=np.array(doc["transition"]),
            i_hat=np.array(doc["inverse"]),
            visit_counts=np.array(doc["visit_counts"]),
            policy=np.array(doc["policy"]),
            r_max=float(doc["r_max"]),
            provenance={k: v for k, v in doc["provenance"].items() if k != "digest"},
        )


def compose_inverse(t_hat: np.ndarray, policy: np.ndarray) -> np.ndarray:
    """Inverse dynamics ``I[s, s', a] = P(a | s, s')`` by Bayes rule.

    Pairs ``(s, s')`` unreachable under the policy get the uniform action
    distribution.
    """
    t_hat = np.asarray(t_hat, dtype=float)
    S, A, _ = t_hat.shape
    policy = validate_policy(policy, S, A)
    joint = policy[:, :, None] * t_hat  # (S, A, S')
    denom = joint.sum(axis=1)  # (S, S')
    inv = np.full((S, S, A), 1.0 / A)
    ok = denom > 0
    inv[ok] = (joint.transpose(0, 2, 1)[ok]) / denom[ok][:, None]
    return inv


def models_from_task(task: TabularTask, policy: Optional[np.ndarray] = None) -> TabularModelSet:
    """Exact model set of a known task (no estimation error)."""
    policy = uniform_policy(task.n_states, task.n_actions) if policy is None else policy
    policy = validate_policy(policy, task.n_states, task.n_actions)
    return TabularModelSet(
        r_hat=task.reward,
        t_hat=task.transition,
        i_hat=compose_inverse(task.transition, policy),
        visit_counts=np.zeros((task.n_states, task.n_actions)),
        policy=policy,
        r_max=task.r_max,
        provenance={"source": "exact", "task_id": task.id},
    )


def estimate_models(
    history: Union[History, Sequence[History]],
    task_shape: tuple,
    smoothing: float = DEFAULT_SMOOTHING,
    policy: Optional[np.ndarray] = None,
    r_max: float = 1.0,
) -> TabularModelSet:
    """Maximum-likelihood tables from observed transitions.

    With Laplace pseudo-count ``alpha = smoothing``::

        T[s, a, s'] = (n(s, a, s') + alpha) / (n(s, a) + alpha * S)
        R[s, a]     = (sum of rewards + alpha * r_max / 2) / (n(s, a) + alpha)

    Unvisited rows with ``alpha == 0`` fall back to a uniform transition
    row and zero reward.
    """
    if smoothing < 0:
        raise PreconditionError("smoothing must be non-negative")
    histories = [history] if isinstance(history, History) else list(history)
    S, A = task_shape
    policy = uniform_policy(S, A) if policy is None else validate_policy(policy, S, A)
    n_steps = sum(len(h) for h in histories)
    if n_steps == 0 and smoothing == 0:
        raise EstimationError("empty history and zero smoothing: no data and no prior")

    counts = np.zeros((S, A, S))
    reward_sum = np.zeros((S, A))
    for h in histories:
        np.add.at(counts, (h.states, h.actions, h.next_states), 1.0)
        np.add.at(reward_sum, (h.states, h.actions), h.rewards)
    n_sa = counts.sum(axis=2)

    if smoothing > 0:
        t_hat = (counts + smoothing) / (n_sa + smoothing * S)[:, :, None]
        r_hat = (reward_sum + smoothing * r_max / 2.0) / (n_sa + smoothing)
    else:
        t_hat = np.full((S, A, S), 1.0 / S)
        seen = n_sa > 0
        t_hat[seen] = counts[seen] / n_sa[seen][:, None]
        r_hat = np.zeros((S, A))
        r_hat[seen] = reward_sum[seen] / n_sa[seen]
    r_hat = np.clip(r_hat, 0.0, r_max)

    return TabularModelSet(
        r_hat=r_hat,
        t_hat=t_hat,
        i_hat=compose_inverse(t_hat, policy),
        visit_counts=n_sa,
        policy=policy,
        r_max=r_max,
        provenance={
            "source": "estimated",
            "history_length": int(n_steps),
            "alpha": float(smoothing),
            "policy_hash": policy_hash(policy),
            "task_id": int(histories[0].task_id) if histories else None,
        },
    )


def save_models(models: Iterable[TabularModelSet], path) -> None:
    with open(path, "w") as fh:
        json.dump({"models": [m.to_dict() for m in models]}, fh)


def load_models(path) -> list:
    with open(path) as fh:
        return [TabularModelSet.from_dict(d) for d in json.load(fh)["models"]]


# --------------------------------------------------------------------------
# state abstractions


@dataclass(frozen=True, eq=False)
class StateAbstraction:
    g: np.ndarray
    n_abstract: int

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.int64)
        if g.ndim != 1:
            raise PreconditionError("abstraction map must be one-dimensional")
        if np.any(g < 0) or np.any(g >= self.n_abstract):
            raise PreconditionError("abstraction map must be total onto [0, n_abstract)")
        if self.n_abstract > len(g):
            raise PreconditionError("n_abstract cannot exceed n_states")
        g = g.copy()
        g.setflags(write=False)
        object.__setattr__(self, "g", g)

    @classmethod
    def identity(cls, n_states: int) -> "StateAbstraction":
        return cls(np.arange(n_states), n_states)

    @classmethod
    def from_labels(cls, labels) -> "StateAbstraction":
        _, g = np.unique(np.asarray(labels), return_inverse=True)
        return cls(g, int(g.max()) + 1)

    @property
    def is_identity(self) -> bool:
        return self.n_abstract == len(self.g)

    def cells(self) -> list:
        return [np.flatnonzero(self.g == c) for c in range(self.n_abstract)]


@dataclass(frozen=True)
class AbstractionErrors:
    eps_r: float
    eps_t: float
    eps_i: float


def abstraction_errors(
    task: TabularTask, g: StateAbstraction, policy: Optional[np.ndarray] = None
) -> AbstractionErrors:
    """Tightest ``(eps_R, eps_T, eps_I)`` for which ``g`` is an approximate abstraction.

    Suprema run over state pairs sharing an abstract cell and all actions.
    The inverse-dynamics gap compares ``I(s1, s1')`` with ``I(s2, s2')``
    for successor pairs that also share a cell.
    """
    S, A = task.n_states, task.n_actions
    if len(g.g) != S:
        raise PreconditionError("abstraction must cover every task state")
    policy = uniform_policy(S, A) if policy is None else validate_policy(policy, S, A)
    inv = compose_inverse(task.transition, policy)
    R, T = task.reward, task.transition
    eps_r = eps_t = eps_i = 0.0
    cells = [c for c in g.cells() if len(c) > 1]
    for members in cells:
        for x, s1 in enumerate(members):
            for s2 in members[x + 1:]:
                eps_r = max(eps_r, float(np.max(np.abs(R[s1] - R[s2]))))
                eps_t = max(eps_t, float(np.max(np.abs(T[s1] - T[s2]).sum(axis=1))))
    if cells:
        # successor pairs (s1', s2') sharing a cell, including s1' == s2'
        same_next = g.g[:, None] == g.g[None, :]
        for members in cells:
            for x, s1 in enumerate(members):
                for s2 in members[x + 1:]:
                    gap = np.abs(inv[s1][:, None, :] - inv[s2][None, :, :]).sum(axis=2)
                    eps_i = max(eps_i, float(gap[same_next].max()))
    return AbstractionErrors(eps_r, eps_t, eps_i)
