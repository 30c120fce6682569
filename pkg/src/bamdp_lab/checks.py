"""Cross-module property suites shared by ``selfcheck``.

Each suite returns a ``SuiteResult``; a suite passes only when every one of
its assertions holds.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .belief import GaussianBeliefSummary, bayes_update, mix_beliefs
from .embedding import EmbeddingTable, all_pairs, loss_and_grad
from .metric import (
    JointOperator,
    check_metric_axioms,
    fixed_point_task_metric,
    one_step_task_metric,
)
from .models import models_from_task
from .tasks import TaskFamily, generate_family
from .theory import check_transfer_bound, check_value_bound, oracle_embeddings
from .transport import wasserstein_1d, wasserstein_discrete

SWEEP_TOL = 1e-8
BOUND_SOLVE_TOL = 1e-11


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: " + ", ".join(
            f"{k}={v}" for k, v in self.detail.items()
        )


def sweep_family(index: int) -> TaskFamily:
    """Small seeded family number ``index`` of the property sweeps (K <= 8)."""
    kind = ("semicircle_grid", "velocity_band", "param_walk")[index % 3]
    r = index // 3
    if kind == "semicircle_grid":
        cfg = {"grid": 5, "K": 2 + r % 3, "horizon": 10}
    elif kind == "velocity_band":
        cfg = {"K": 2 + r % 7, "v_bins": 8 + r % 5, "horizon": 10}
    else:
        cfg = {"K": 2 + r % 7, "v_bins": 8 + r % 3, "horizon": 10}
    return generate_family(kind, cfg, seed=1000 + index)


class SweepCache:
    """Memoizes exact models and metrics per sweep family.

    One tight solve serves every suite: iterating from zero is deterministic,
    so the residual history also shows when the looser tolerance was met.
    """

    def __init__(self):
        self._store = {}

    def get(self, index: int, tol: float = BOUND_SOLVE_TOL):
        key = (index, tol)
        if key not in self._store:
            fam = sweep_family(index)
            models = [models_from_task(t) for t in fam.train_tasks]
            op = JointOperator(models, None, fam.gamma)
            joint, fixed = fixed_point_task_metric(models, gamma=fam.gamma, tol=tol, operator=op)
            self._store[key] = dict(family=fam, models=models, operator=op, joint=joint, fixed=fixed)
        return self._store[key]


def _timed(fn: Callable) -> Callable:
    def run(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    run.__name__ = fn.__name__
    return run


@_timed
def suite_metric_axioms(n_families: int, cache: Optional[SweepCache] = None, fault: Optional[str] = None) -> SuiteResult:
    cache = cache or SweepCache()
    worst = 0.0
    failed = []
    for idx in range(n_families):
        entry = cache.get(idx)
        for name, m in (("one_step", one_step_task_metric(entry["models"])), ("fixed_point", entry["fixed"])):
            d = np.array(m.d)
            if fault == "asymmetric_cost" and d.shape[0] > 1:
                d[0, 1] += 0.1
            rep = check_metric_axioms(d, tol=1e-9)
            worst = max(worst, rep.negativity, rep.asymmetry, rep.diagonal, rep.triangle)
            if not rep.passed:
                failed.append((idx, name))
    return SuiteResult("metric_axioms", not failed, {"families": n_families, "worst": f"{worst:.2e}", "failed": len(failed)})


@_timed
def suite_ot(n_1d: int, n_perm: int, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst_1d = 0.0
    for _ in range(n_1d):
        m, n = rng.integers(1, 9, size=2)
        x, y = rng.normal(size=m), rng.normal(size=n)
        wx, wy = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(n))
        order = int(rng.integers(1, 3))
        C = np.abs(x[:, None] - y[None, :])
        got = wasserstein_discrete(wx, wy, C, order=order)
        worst_1d = max(worst_1d, abs(got - wasserstein_1d(x, y, wx, wy, order=order)))
    worst_perm = 0.0
    for _ in range(n_perm):
        n = int(rng.integers(1, 6))
        C = rng.uniform(0, 1, size=(n, n))
        best = min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n
        got = wasserstein_discrete(np.full(n, 1 / n), np.full(n, 1 / n), C, order=1)
        worst_perm = max(worst_perm, abs(got - best))
    ok = worst_1d <= 1e-9 and worst_perm <= 1e-9
    return SuiteResult("ot_cross_checks", ok, {"worst_1d": f"{worst_1d:.2e}", "worst_perm": f"{worst_perm:.2e}"})


@_timed
def suite_fixed_point(n_families: int, n_pairs: int = 100, cache: Optional[SweepCache] = None, seed: int = 0) -> SuiteResult:
    cache = cache or SweepCache()
    rng = np.random.default_rng(seed)
    bad_residual = 0
    for idx in range(n_families):
        e = cache.get(idx)
        hits = [n for n, r in enumerate(e["joint"].residuals, 1) if r <= SWEEP_TOL]
        if not hits or hits[0] > e["operator"].iteration_bound(SWEEP_TOL):
            bad_residual += 1
    worst = 0.0
    for k in range(n_pairs):
        op = cache.get(k % max(n_families, 1))["operator"]
        N = op.N
        D = rng.uniform(0, 2, size=(N, N))
        D = 0.5 * (D + D.T)
        np.fill_diagonal(D, 0.0)
        bump = rng.uniform(0, 0.5, size=(N, N))
        D2 = D + 0.5 * (bump + bump.T)
        np.fill_diagonal(D2, 0.0)
        worst = max(worst, float(np.max(op.apply(D) - op.apply(D2))))
    ok = bad_residual == 0 and worst <= 1e-12
    return SuiteResult("fixed_point", ok, {"families": n_families, "residual_failures": bad_residual, "monotone_worst": f"{worst:.2e}"})


@_timed
def suite_gradients(n_instances: int, seed: int = 0, h: float = 1e-5) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    while checked < n_instances:
        K, d = int(rng.integers(2, 7)), int(rng.integers(1, 4))
        mu, ls = rng.normal(size=(K, d)), rng.normal(scale=0.3, size=(K, d))
        pairs = all_pairs(K)
        diffs = np.abs(mu[pairs[:, 0]] - mu[pairs[:, 1]])
        if diffs.min() < 10 * h:
            continue
        target = np.abs(rng.normal(size=(K, K)))
        target = 0.5 * (target + target.T)
        anchors = EmbeddingTable(rng.normal(size=(K, d)), rng.normal(scale=0.3, size=(K, d)), "specific_anchor")
        kw = float(rng.choice([0.0, 0.1, 1.0]))
        anc = anchors if kw > 0 else None
        table = EmbeddingTable(mu, ls)
        _, (g_mu, g_ls) = loss_and_grad(table, target, pairs, kw, anc)
        num = np.concatenate([g_mu.ravel(), g_ls.ravel()])
        fd = np.zeros_like(num)
        flat = np.concatenate([mu.ravel(), ls.ravel()])
        for p in range(len(flat)):
            up, dn = flat.copy(), flat.copy()
            up[p] += h
            dn[p] -= h
            f = [
                loss_and_grad(EmbeddingTable(v[: K * d].reshape(K, d), v[K * d:].reshape(K, d)), target, pairs, kw, anc)[0]
                for v in (up, dn)
            ]
            fd[p] = (f[0] - f[1]) / (2 * h)
        worst = max(worst, float(np.linalg.norm(num - fd) / max(np.linalg.norm(fd), 1e-8)))
        checked += 1
    return SuiteResult("gradient_check", worst <= 1e-5, {"instances": checked, "worst_rel": f"{worst:.2e}"})


@_timed
def suite_value_bound(n_families: int, cache: Optional[SweepCache] = None) -> SuiteResult:
    cache = cache or SweepCache()
    violations, one_step_viol, one_step_rows = 0, 0, 0
    for idx in range(n_families):
        e = cache.get(idx)
        rep = check_value_bound(e["family"], None, e["joint"], one_step_task_metric(e["models"]))
        violations += sum(1 for r in rep.rows if r["variant"] == "fixed_point" and r["margin"] < -1e-9)
        os_rows = [r for r in rep.rows if r["variant"] == "one_step"]
        one_step_rows += len(os_rows)
        one_step_viol += sum(1 for r in os_rows if r["margin"] < -1e-9)
    rate = one_step_viol / one_step_rows if one_step_rows else 0.0
    return SuiteResult(
        "value_bound_tier_A", violations == 0,
        {"families": n_families, "violations": violations, "one_step_violation_rate": f"{rate:.3f}"},
    )


def constructed_families() -> list:
    """Families on which the transfer bound is asserted with oracle embeddings."""
    return [
        generate_family("semicircle_grid", {"grid": 5, "K": 3, "placement": "even"}, 0),
        generate_family("semicircle_grid", {"grid": 7, "K": 4}, 1),
        generate_family("velocity_band", {"K": 4, "v_bins": 10}, 2),
        generate_family("param_walk", {"K": 4, "v_bins": 10}, 3),
    ]


@_timed
def suite_transfer_bound(families: Optional[list] = None) -> SuiteResult:
    families = constructed_families() if families is None else families
    tier_a = tier_b = True
    worst = float("inf")
    for fam in families:
        models = [models_from_task(t) for t in fam.train_tasks]
        rep = check_transfer_bound(fam, oracle_embeddings(models))
        tier_a &= rep.tiers.get("A") is True
        tier_b &= rep.tiers.get("B") is True
        worst = min(worst, min(r["margin"] for r in rep.rows if r["variant"] == "with_horizon_factor"))
    return SuiteResult(
        "transfer_bound_tier_AB", tier_a and tier_b,
        {"families": len(families), "tier_A": tier_a, "tier_B": tier_b, "worst_margin": f"{worst:.3g}"},
    )


@_timed
def suite_filter(n_traj: int, n_samples: int, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    fam = generate_family("param_walk", {"K": 4, "v_bins": 8, "horizon": 6}, seed)
    tasks = fam.train_tasks
    worst = 0.0
    for _ in range(n_traj):
        truth = tasks[int(rng.integers(len(tasks)))]
        prior = rng.dirichlet(np.ones(len(tasks)))
        s = truth.sample_initial(rng)
        post = prior
        lik = np.ones(len(tasks))
        for t in range(int(rng.integers(1, 12))):
            a = int(rng.integers(truth.n_actions))
            s2 = int(rng.choice(truth.n_states, p=truth.transition[s, a]))
            r = float(truth.reward[s, a])
            post = bayes_update(post, tasks, (s, a, r, s2), step=t).probs
            lik *= np.array([k.transition[s, a, s2] * (k.reward[s, a] == r) for k in tasks])
            s = s2
        brute = prior * lik / np.sum(prior * lik)
        worst = max(worst, float(np.max(np.abs(post - brute))))
    d = 3
    b_r = GaussianBeliefSummary(rng.normal(size=d), rng.uniform(0.2, 1.0, d))
    b_l = GaussianBeliefSummary(rng.normal(size=d), rng.uniform(0.2, 1.0, d))
    m = mix_beliefs(b_r, b_l, 0.5, 0.5)
    pick = rng.random(n_samples) < 0.5
    z = np.where(pick[:, None], rng.normal(b_r.mu, b_r.sigma, (n_samples, d)), rng.normal(b_l.mu, b_l.sigma, (n_samples, d)))
    mc_err = max(float(np.max(np.abs(z.mean(0) - m.mu))), float(np.max(np.abs(z.std(0) - m.sigma))))
    ok = worst <= 1e-12 and mc_err <= 1e-2
    return SuiteResult("bayes_filter", ok, {"trajectories": n_traj, "worst": f"{worst:.2e}", "mixture_mc": f"{mc_err:.2e}"})


BUDGETS = {
    "quick": dict(families=12, ot_1d=100, ot_perm=40, pairs=30, grads=20, traj=200, samples=200_000),
    "full": dict(families=100, ot_1d=500, ot_perm=200, pairs=100, grads=100, traj=1000, samples=1_000_000),
}


def run_suites(budget: str = "quick", fault: Optional[str] = None) -> list:
    if budget not in BUDGETS:
        raise ValueError(f"budget must be one of {sorted(BUDGETS)}")
    b = BUDGETS[budget]
    cache = SweepCache()
    return [
        suite_ot(b["ot_1d"], b["ot_perm"]),
        suite_metric_axioms(b["families"], cache, fault=fault),
        suite_fixed_point(b["families"], b["pairs"], cache),
        suite_gradients(b["grads"]),
        suite_value_bound(b["families"], cache),
        suite_transfer_bound(),
        suite_filter(b["traj"], b["samples"]),
    ]


__all__ = ["SuiteResult", "sweep_family", "SweepCache", "run_suites", "constructed_families", "BUDGETS"]
