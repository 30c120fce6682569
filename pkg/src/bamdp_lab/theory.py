"""Exact checks of the value-difference and latent-transfer bounds.

Everything here is computed by linear solves on small tabular tasks, so the
left-hand sides are exact up to floating point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .embedding import EmbeddingTable
from .emit import write_rows
from .errors import PreconditionError, VerificationError
from .metric import JointMetric, MetricMatrix
from .models import (
    StateAbstraction,
    TabularModelSet,
    abstraction_errors,
    policy_hash,
    uniform_policy,
    validate_policy,
)
from .tasks import TabularTask, TaskFamily

BOUND_TOL = 1e-9
OUTER_FACTORS = ("as_stated", "with_horizon_factor")


# --------------------------------------------------------------------------
# exact evaluation


def policy_value(
    task: TabularTask,
    policy: np.ndarray,
    gamma: Optional[float] = None,
    horizon: Optional[int] = None,
) -> np.ndarray:
    """``V^pi`` by linear solve of ``V = R^pi + gamma T^pi V``, or ``horizon`` backups."""
    gamma = task.gamma if gamma is None else float(gamma)
    policy = validate_policy(policy, task.n_states, task.n_actions)
    r_pi = np.sum(policy * task.reward, axis=1)
    T_pi = np.einsum("sa,sax->sx", policy, task.transition)
    if horizon is not None:
        V = np.zeros(task.n_states)
        for _ in range(horizon):
            V = r_pi + gamma * T_pi @ V
        return V
    if gamma >= 1.0:
        raise PreconditionError("gamma = 1 needs a finite horizon")
    return np.linalg.solve(np.eye(task.n_states) - gamma * T_pi, r_pi)


def q_from_values(task: TabularTask, V: np.ndarray, gamma: Optional[float] = None) -> np.ndarray:
    gamma = task.gamma if gamma is None else float(gamma)
    return task.reward + gamma * task.transition @ V


def deterministic_policy(actions: np.ndarray, n_actions: int) -> np.ndarray:
    pi = np.zeros((len(actions), n_actions))
    pi[np.arange(len(actions)), actions] = 1.0
    return pi


def policy_q(task: TabularTask, policy: np.ndarray, gamma: Optional[float] = None) -> np.ndarray:
    return q_from_values(task, policy_value(task, policy, gamma), gamma)


def optimal_q(task: TabularTask, gamma: Optional[float] = None, max_iter: int = 1000):
    """``(Q*, greedy policy)`` by policy iteration.

    ``Q*`` is the exact evaluation of the returned policy, so evaluating that
    policy again reproduces it bit for bit.
    """
    S, A = task.n_states, task.n_actions
    actions = np.zeros(S, dtype=np.int64)
    for _ in range(max_iter):
        pi = deterministic_policy(actions, A)
        Q = policy_q(task, pi, gamma)
        best = np.argmax(Q, axis=1)
        improve = Q[np.arange(S), best] > Q[np.arange(S), actions] + 1e-12
        if not improve.any():
            return Q, pi
        actions = np.where(improve, best, actions)
    raise VerificationError("policy iteration did not stabilise")


# --------------------------------------------------------------------------
# reports


@dataclass
class BoundReport:
    name: str
    rows: list
    flags: dict = field(default_factory=dict)
    tiers: dict = field(default_factory=dict)

    @property
    def violations(self) -> int:
        return sum(1 for r in self.rows if r["margin"] < -BOUND_TOL)

    def worst_margin(self) -> float:
        return min((r["margin"] for r in self.rows), default=float("inf"))

    @property
    def passed(self) -> bool:
        return all(v is not False for v in self.tiers.values())

    def summary(self) -> dict:
        by_variant = {}
        for r in self.rows:
            v = by_variant.setdefault(r.get("variant", "-"), {"rows": 0, "violations": 0, "worst_margin": float("inf")})
            v["rows"] += 1
            v["violations"] += int(r["margin"] < -BOUND_TOL)
            v["worst_margin"] = min(v["worst_margin"], r["margin"])
        return {"name": self.name, "flags": self.flags, "tiers": self.tiers, "variants": by_variant}

    def to_csv(self, path) -> None:
        if not self.rows:
            write_rows(path, ["variant"], [])
            return
        header = list(self.rows[0])
        write_rows(path, header, ([r[h] for h in header] for r in self.rows))

    def save(self, csv_path) -> None:
        self.to_csv(csv_path)
        with open(str(csv_path) + ".json", "w") as fh:
            json.dump(self.summary(), fh, sort_keys=True, indent=1)


# --------------------------------------------------------------------------
# value-difference bound


def check_value_bound(
    family: TaskFamily,
    policy: Optional[np.ndarray],
    joint: JointMetric,
    one_step: Optional[MetricMatrix] = None,
) -> BoundReport:
    """``|V_i(s) - V_j(s)| <= D((s, i), (s, j))`` for every state and task pair.

    Tier A binds to the fixed-point rows; one-step rows are reported only.
    """
    tasks = family.train_tasks
    S, A = tasks[0].n_states, tasks[0].n_actions
    policy = uniform_policy(S, A) if policy is None else validate_policy(policy, S, A)
    prov = joint.provenance
    if abs(joint.gamma - family.gamma) > 0:
        raise VerificationError(f"metric gamma {joint.gamma} differs from family gamma {family.gamma}")
    if prov.get("policy_hash") not in (None, policy_hash(policy)):
        raise VerificationError("metric was computed under a different policy")
    if joint.n_tasks != len(tasks) or joint.n_states != S:
        raise VerificationError("metric shape does not match the family")

    V = np.stack([policy_value(t, policy, family.gamma) for t in tasks])  # (K, S)
    block = joint.same_state_block()  # (S, K, K)
    parts = {k: v.reshape(joint.n_tasks, S, joint.n_tasks, S) for k, v in joint.components.items()}
    K = len(tasks)
    rows = []
    for i in range(K):
        for j in range(i + 1, K):
            for s in range(S):
                lhs = abs(V[i, s] - V[j, s])
                rhs = float(block[s, i, j])
                row = dict(variant="fixed_point", task_i=i, task_j=j, state=s, lhs=lhs, rhs=rhs, margin=rhs - lhs)
                for name in ("reward", "transport", "inverse"):
                    row[name] = float(parts[name][i, s, j, s]) if name in parts else float("nan")
                rows.append(row)
    tier_a = all(r["margin"] >= -BOUND_TOL for r in rows)
    if one_step is not None:
        for i in range(K):
            for j in range(i + 1, K):
                lhs = float(np.max(np.abs(V[i] - V[j])))
                rhs = float(one_step.d[i, j])
                rows.append(
                    dict(variant="one_step", task_i=i, task_j=j, state=-1, lhs=lhs, rhs=rhs, margin=rhs - lhs,
                         reward=float(one_step.components["reward"][i, j]),
                         transport=float(one_step.components["transport"][i, j]),
                         inverse=float(one_step.components["inverse"][i, j]))
                )
    return BoundReport("value_bound", rows, {"gamma": family.gamma, "policy_hash": policy_hash(policy)}, {"A": tier_a})


# --------------------------------------------------------------------------
# latent transfer bound


def deviation_matrix(models: Sequence[TabularModelSet]) -> np.ndarray:
    """``Dev[i, j] = max_s [ ||dR(s, .)||_1 + max_a ||dT(.|s, a)||_1 + max_s' ||dI(.|s, s')||_1 ]``."""
    K = len(models)
    dev = np.zeros((K, K))
    for i in range(K):
        for j in range(i + 1, K):
            mi, mj = models[i], models[j]
            rew = np.abs(mi.r_hat - mj.r_hat).sum(axis=1)
            trans = np.abs(mi.t_hat - mj.t_hat).sum(axis=2).max(axis=1)
            inv = np.abs(mi.i_hat - mj.i_hat).sum(axis=2).max(axis=1)
            dev[i, j] = dev[j, i] = float(np.max(rew + trans + inv))
    return dev


def oracle_embeddings(models: Sequence[TabularModelSet]) -> EmbeddingTable:
    """``z_i = (M / 2) e_i`` so every off-diagonal L1 distance equals ``M = max Dev``."""
    K = len(models)
    if K < 2:
        raise PreconditionError("oracle embeddings need at least two tasks")
    M = float(deviation_matrix(models).max())
    mu = (M / 2.0) * np.eye(K)
    return EmbeddingTable(mu, np.zeros((K, K)), "oracle", {"M": M})


def _transfer_rhs(eps, dz, gamma, r_max, outer_factor):
    c = r_max / (2.0 * (1.0 - gamma))
    scale = 1.0 / (1.0 - gamma) if outer_factor == "with_horizon_factor" else 1.0
    terms = dict(
        term_r=scale * eps[0],
        term_t=scale * gamma * eps[1] * c,
        term_i=scale * gamma * eps[2] * c,
        term_z=scale * gamma * dz * c,
    )
    return terms, scale


def check_transfer_bound(
    family: TaskFamily,
    embeddings: EmbeddingTable,
    g: Optional[StateAbstraction] = None,
    gamma: Optional[float] = None,
    outer_factor: Sequence[str] = OUTER_FACTORS,
    policy: Optional[np.ndarray] = None,
) -> BoundReport:
    """Rows for both right-hand-side readings and both left-hand-side readings.

    ``lhs_on_j``: the greedy optimal policy of task ``i`` evaluated on task
    ``j``, against ``Q*_j``. ``lhs_on_i``: ``Q^pi`` of that policy on task
    ``i`` itself, against ``Q*_j``. Tier A: ``i == j`` rows are exactly zero
    on both sides. Tier B: with oracle embeddings, identity ``g`` and the
    horizon factor, no violations under either reading.
    """
    tasks = family.train_tasks
    gamma = family.gamma if gamma is None else float(gamma)
    if abs(gamma - family.gamma) > 0:
        raise VerificationError(f"gamma {gamma} differs from the family's {family.gamma}")
    if embeddings.role not in ("latent", "oracle"):
        raise PreconditionError("embeddings must be latent or oracle")
    if embeddings.n_tasks != len(tasks):
        raise PreconditionError("one embedding per training task is required")
    outer_factor = (outer_factor,) if isinstance(outer_factor, str) else tuple(outer_factor)
    for f in outer_factor:
        if f not in OUTER_FACTORS:
            raise PreconditionError(f"outer_factor must be in {OUTER_FACTORS}")
    S, A = tasks[0].n_states, tasks[0].n_actions
    g = StateAbstraction.identity(S) if g is None else g
    policy = uniform_policy(S, A) if policy is None else validate_policy(policy, S, A)
    r_max = max(t.r_max for t in tasks)

    opt = [optimal_q(t, gamma) for t in tasks]
    errs = [abstraction_errors(t, g, policy) for t in tasks]
    dz = embeddings.pairwise_l1()
    K = len(tasks)
    rows = []
    for i in range(K):
        q_i, pi_i = opt[i]
        for j in range(K):
            q_star_j = opt[j][0]
            lhs_on_j = float(np.max(np.abs(q_star_j - policy_q(tasks[j], pi_i, gamma))))
            lhs_on_i = float(np.max(np.abs(q_star_j - q_i)))
            e = errs[i], errs[j]
            eps = (max(x.eps_r for x in e), max(x.eps_t for x in e), max(x.eps_i for x in e))
            for f in outer_factor:
                terms, scale = _transfer_rhs(eps, float(dz[i, j]), gamma, r_max, f)
                rhs = float(sum(terms.values()))
                for reading, lhs in (("on_j", lhs_on_j), ("on_i", lhs_on_i)):
                    rows.append(dict(
                        variant=f, lhs_reading=reading, task_i=i, task_j=j, lhs=lhs, rhs=rhs,
                        margin=rhs - lhs, eps_r=eps[0], eps_t=eps[1], eps_i=eps[2],
                        embedding_distance=float(dz[i, j]), outer_scale=scale, **terms,
                    ))
    diag = [r for r in rows if r["task_i"] == r["task_j"]]
    tier_a = all(r["lhs"] == 0.0 and r["rhs"] == 0.0 for r in diag) if g.is_identity else None
    tiers = {"A": tier_a}
    if embeddings.role == "oracle" and g.is_identity and "with_horizon_factor" in outer_factor:
        tiers["B"] = all(r["margin"] >= -BOUND_TOL for r in rows if r["variant"] == "with_horizon_factor")
    flags = dict(gamma=gamma, role=embeddings.role, identity_g=g.is_identity, outer_factor=list(outer_factor))
    return BoundReport("transfer_bound", rows, flags, tiers)


def lemma_monotone(family: TaskFamily, embeddings: EmbeddingTable, g: StateAbstraction) -> bool:
    """A merging abstraction never lowers any right-hand side below the identity's."""
    base = check_transfer_bound(family, embeddings, None)
    merged = check_transfer_bound(family, embeddings, g)
    return all(m["rhs"] >= b["rhs"] for b, m in zip(base.rows, merged.rows))


__all__ = [
    "policy_value", "optimal_q", "policy_q", "check_value_bound", "oracle_embeddings",
    "check_transfer_bound", "deviation_matrix", "BoundReport", "lemma_monotone",
]
