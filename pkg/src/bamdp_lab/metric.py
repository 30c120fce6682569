"""Task-pair belief metrics built from reward, transport and inverse-dynamics gaps.

Two variants share the same three ingredients:

* ``one_step``: per state ``s`` the gap between tasks ``i`` and ``j`` is
  ``E_a|R_i - R_j| + W(ground)(T_i^pi(.|s), T_j^pi(.|s)) + inverse gap``,
  with a fixed ground metric on states; the task distance is the max over
  states.
* ``fixed_point``: the same recursion lifted to joint ``(state, task)``
  points, with the transport term discounted by ``gamma`` and measured
  under the metric being computed. Iterated from zero until the sup
  residual drops below ``tol``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConvergenceError, PreconditionError
from .models import TabularModelSet, array_hash, policy_hash, validate_policy
from .transport import _batch_wasserstein


@dataclass
class MetricMatrix:
    d: np.ndarray
    variant: str
    provenance: dict = field(default_factory=dict)
    components: dict = field(default_factory=dict)
    ids: Optional[list] = None

    def __post_init__(self):
        if self.ids is None:
            self.ids = list(range(self.d.shape[0]))

    def to_csv(self, path) -> None:
        from .emit import write_matrix_csv

        write_matrix_csv(path, self.d, self.ids)

    def sidecar(self) -> dict:
        return dict(variant=self.variant, **self.provenance)


@dataclass
class JointMetric:
    D: np.ndarray  # (K*S, K*S); index x = task * S + state
    gamma: float
    residual: float
    n_states: int
    n_tasks: int
    iterations: int
    tol: float
    residuals: list = field(default_factory=list)
    components: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def index(self, state: int, task: int) -> int:
        return task * self.n_states + state

    def pair(self, state_i: int, task_i: int, state_j: int, task_j: int) -> float:
        return float(self.D[self.index(state_i, task_i), self.index(state_j, task_j)])

    def same_state_block(self) -> np.ndarray:
        """``B[s, i, j] = D((s, i), (s, j))``."""
        S, K = self.n_states, self.n_tasks
        blocks = self.D.reshape(K, S, K, S)
        s = np.arange(S)
        return blocks[:, s, :, s]  # advanced indices first: (S, K, K)

    def sidecar(self) -> dict:
        return dict(
            variant="fixed_point",
            gamma=self.gamma,
            tol=self.tol,
            residual=self.residual,
            iterations=self.iterations,
            **self.provenance,
        )


@dataclass
class AxiomReport:
    negativity: float
    asymmetry: float
    diagonal: float
    triangle: float
    triangle_triple: Optional[tuple]
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.negativity, self.asymmetry, self.diagonal, self.triangle) <= self.tol

    def as_dict(self) -> dict:
        return dict(
            negativity=self.negativity,
            asymmetry=self.asymmetry,
            diagonal=self.diagonal,
            triangle=self.triangle,
            triangle_triple=self.triangle_triple,
            tol=self.tol,
            passed=self.passed,
        )


# --------------------------------------------------------------------------
# ground metrics


def discrete_metric(n: int) -> np.ndarray:
    return 1.0 - np.eye(n)


def grid_l1_metric(G: int) -> np.ndarray:
    """L1 cell distance on a ``G x G`` grid, scaled to a maximum of 1."""
    ys, xs = np.divmod(np.arange(G * G), G)
    d = np.abs(xs[:, None] - xs[None, :]) + np.abs(ys[:, None] - ys[None, :])
    return d / (2.0 * (G - 1))


# --------------------------------------------------------------------------
# shared ingredients


def _check_models(models: Sequence[TabularModelSet], policy):
    if len(models) < 1:
        raise PreconditionError("need at least one model set")
    S, A = models[0].n_states, models[0].n_actions
    for m in models:
        if (m.n_states, m.n_actions) != (S, A):
            raise PreconditionError("model sets must share state and action spaces")
    policy = models[0].policy if policy is None else validate_policy(policy, S, A)
    return S, A, policy


def _policy_kernels(models, policy) -> np.ndarray:
    """``P[k, s, s'] = sum_a pi(a|s) T_k(s'|s, a)``."""
    return np.stack([np.einsum("sa,sax->sx", policy, m.t_hat) for m in models])


def _inverse_gap(P_x, P_y, I_x, I_y) -> np.ndarray:
    """``sum_{s'} 1/2 (P_x + P_y)(s') ||I_x(s') - I_y(s')||_1`` batched over rows."""
    weights = 0.5 * (P_x + P_y)
    return np.sum(weights * np.abs(I_x - I_y).sum(axis=-1), axis=-1)


def _supports(P: np.ndarray, offset_stride: int):
    """Pack the rows of ``P[k, s, :]`` as sparse supports over joint indices."""
    K, S, _ = P.shape
    lens = (P > 0).sum(axis=2).reshape(-1)
    width = int(lens.max())
    idx = np.zeros((K * S, width), dtype=np.int64)
    w = np.zeros((K * S, width))
    for k in range(K):
        for s in range(S):
            nz = np.flatnonzero(P[k, s] > 0)
            x = k * S + s
            idx[x, : len(nz)] = nz + k * offset_stride
            w[x, : len(nz)] = P[k, s, nz]
    return idx, w, lens.astype(np.int64)


def _provenance(models, policy, ground_id: str, order: int) -> dict:
    return dict(
        models_hash=array_hash(*[m.r_hat for m in models], *[m.t_hat for m in models]),
        policy_hash=policy_hash(policy),
        ground_metric=ground_id,
        order=order,
    )


# --------------------------------------------------------------------------
# one-step metric


def one_step_task_metric(
    models: Sequence[TabularModelSet],
    policy: Optional[np.ndarray] = None,
    ground_state_metric: Optional[np.ndarray] = None,
    order: int = 2,
    aggregation: str = "max",
    state_weights: Optional[np.ndarray] = None,
) -> MetricMatrix:
    """Non-recursive task metric with a fixed ground metric on states.

    ``aggregation="max"`` takes the sup over states; ``"mean"`` weights the
    per-state gaps by ``state_weights`` (uniform by default). The returned
    ``components`` hold the reward, transport and inverse terms at the
    aggregating state(s), so they sum to ``d``.
    """
    S, A, policy = _check_models(models, policy)
    if order not in (1, 2):
        raise PreconditionError("order must be 1 or 2")
    ground_id = "discrete" if ground_state_metric is None else "custom:" + array_hash(ground_state_metric)
    ground = discrete_metric(S) if ground_state_metric is None else np.asarray(ground_state_metric, float)
    if ground.shape != (S, S):
        raise PreconditionError("ground metric must be S x S")
    if aggregation not in ("max", "mean"):
        raise PreconditionError("aggregation must be 'max' or 'mean'")
    if aggregation == "mean":
        weights = np.full(S, 1.0 / S) if state_weights is None else np.asarray(state_weights, float)
        if weights.shape != (S,) or abs(weights.sum() - 1.0) > 1e-12 or np.any(weights < 0):
            raise PreconditionError("state_weights must be a distribution over states")

    K = len(models)
    P = _policy_kernels(models, policy)
    if ground_state_metric is not None:
        idx, w, lens = _supports(P, offset_stride=0)
    ground = np.ascontiguousarray(ground)

    pairs = [(i, j) for i in range(K) for j in range(i + 1, K)]
    d = np.zeros((K, K))
    parts = {name: np.zeros((K, K)) for name in ("reward", "transport", "inverse")}
    if pairs:
        rows = np.array([i * S + s for i, j in pairs for s in range(S)], dtype=np.int64)
        cols = np.array([j * S + s for i, j in pairs for s in range(S)], dtype=np.int64)
        if ground_state_metric is None:
            # under the 0/1 cost, W_p = TV^(1/p)
            flat = P.reshape(K * S, S)
            tv = 0.5 * np.abs(flat[rows] - flat[cols]).sum(axis=1)
            W = tv if order == 1 else np.sqrt(tv)
        else:
            W = np.empty(len(rows))
            failures = _batch_wasserstein(ground, rows, cols, idx, w, lens, order, W)
            if failures:
                raise ConvergenceError(f"{failures} transport solves failed")
        W = W.reshape(len(pairs), S)
        for p, (i, j) in enumerate(pairs):
            mi, mj = models[i], models[j]
            rew = np.sum(policy * np.abs(mi.r_hat - mj.r_hat), axis=1)
            inv = _inverse_gap(P[i], P[j], mi.i_hat, mj.i_hat)
            terms = np.stack([rew, W[p], inv])
            total = terms.sum(axis=0)
            if aggregation == "max":
                s_star = int(np.argmax(total))
                vals = terms[:, s_star]
                d[i, j] = total[s_star]
            else:
                vals = terms @ weights
                d[i, j] = float(total @ weights)
            for name, v in zip(("reward", "transport", "inverse"), vals):
                parts[name][i, j] = parts[name][j, i] = v
            d[j, i] = d[i, j]
    prov = _provenance(models, policy, ground_id, order)
    prov["aggregation"] = aggregation
    return MetricMatrix(d=d, variant="one_step", provenance=prov, components=parts)


# --------------------------------------------------------------------------
# fixed-point metric on joint (state, task) points


class JointOperator:
    """The operator ``F`` on joint ``(state, task)`` distance matrices.

    ``F(D)(x, y) = |R^pi(x) - R^pi(y)| + gamma * W(D)(T^pi(.|x), T^pi(.|y)) + inverse gap``

    Precomputes the static reward and inverse terms and the sparse
    successor supports; ``apply`` then only solves transport problems.
    """

    def __init__(self, models, policy=None, gamma: float = 0.9, order: int = 2):
        S, A, policy = _check_models(models, policy)
        if not 0.0 < gamma < 1.0:
            raise PreconditionError("gamma must lie in (0, 1)")
        if order not in (1, 2):
            raise PreconditionError("order must be 1 or 2")
        self.models = list(models)
        self.policy = policy
        self.gamma = float(gamma)
        self.order = order
        self.S = S
        self.K = len(models)
        self.N = S * self.K
        self.r_max = max(m.r_max for m in models)
        P = _policy_kernels(models, policy)
        self.idx, self.w, self.lens = _supports(P, offset_stride=S)

        r_pi = np.concatenate([np.sum(policy * m.r_hat, axis=1) for m in models])
        self.reward = np.abs(r_pi[:, None] - r_pi[None, :])

        P_flat = P.reshape(self.N, S)
        I_flat = np.concatenate([m.i_hat for m in models])  # (N, S', A)
        inv = np.zeros((self.N, self.N))
        for x in range(self.N):
            inv[x] = _inverse_gap(P_flat[x][None], P_flat, I_flat[x][None], I_flat)
        inv = 0.5 * (inv + inv.T)
        np.fill_diagonal(inv, 0.0)
        self.inverse = inv

        iu = np.triu_indices(self.N, k=1)
        self.rows = iu[0].astype(np.int64)
        self.cols = iu[1].astype(np.int64)

    @property
    def bound_constant(self) -> float:
        return self.r_max + 2.0

    def iteration_bound(self, tol: float) -> int:
        g = self.gamma
        return int(math.ceil(math.log(tol * (1.0 - g) / self.bound_constant) / math.log(g)))

    def transport(self, D: np.ndarray) -> np.ndarray:
        out = np.empty(len(self.rows))
        failures = _batch_wasserstein(
            np.ascontiguousarray(D, dtype=float),
            self.rows, self.cols, self.idx, self.w, self.lens, self.order, out,
        )
        if failures:
            raise ConvergenceError(f"{failures} transport solves failed")
        W = np.zeros((self.N, self.N))
        W[self.rows, self.cols] = out
        W[self.cols, self.rows] = out
        return W

    def apply(self, D: np.ndarray, with_parts: bool = False):
        transport = self.gamma * self.transport(D)
        F = self.reward + transport + self.inverse
        np.fill_diagonal(F, 0.0)
        if with_parts:
            return F, dict(reward=self.reward, transport=transport, inverse=self.inverse)
        return F


def fixed_point_task_metric(
    models: Sequence[TabularModelSet],
    policy: Optional[np.ndarray] = None,
    gamma: float = 0.9,
    tol: float = 1e-8,
    order: int = 2,
    operator: Optional[JointOperator] = None,
):
    """Iterate ``F`` from zero to its fixed point; return ``(JointMetric, MetricMatrix)``.

    The task distance is ``d[i, j] = max_s D((s, i), (s, j))``.
    """
    if tol <= 0:
        raise PreconditionError("tol must be positive")
    op = operator or JointOperator(models, policy, gamma, order)
    bound = op.iteration_bound(tol)
    D = np.zeros((op.N, op.N))
    residuals = []
    parts = {}
    it = 0
    while True:
        it += 1
        D_new, parts = op.apply(D, with_parts=True)
        residual = float(np.max(np.abs(D_new - D)))
        residuals.append(residual)
        D = D_new
        if residual <= tol:
            break
        if it >= bound:
            raise ConvergenceError(
                f"residual {residual:.3e} > {tol:.1e} after the certified bound of {bound} iterations"
            )
    prov = _provenance(op.models, op.policy, "self", op.order)
    joint = JointMetric(
        D=D,
        gamma=op.gamma,
        residual=residuals[-1],
        n_states=op.S,
        n_tasks=op.K,
        iterations=it,
        tol=tol,
        residuals=residuals,
        components=parts,
        provenance=dict(prov, iteration_bound=bound),
    )
    block = joint.same_state_block()  # (S, K, K)
    s_star = np.argmax(block, axis=0)
    d = np.max(block, axis=0)
    np.fill_diagonal(d, 0.0)
    comp = {}
    for name, mat in parts.items():
        mb = mat.reshape(op.K, op.S, op.K, op.S)
        c = np.zeros((op.K, op.K))
        for i in range(op.K):
            for j in range(op.K):
                if i != j:
                    s = s_star[i, j]
                    c[i, j] = mb[i, s, j, s]
        comp[name] = c
    matrix = MetricMatrix(d=d, variant="fixed_point", provenance=dict(prov, gamma=op.gamma), components=comp)
    return joint, matrix


# --------------------------------------------------------------------------
# axioms


def check_metric_axioms(m, tol: float = 1e-9) -> AxiomReport:
    """Worst violations of non-negativity, symmetry, zero diagonal and triangle."""
    d = np.asarray(m.d if hasattr(m, "d") else m, dtype=float)
    n = d.shape[0]
    negativity = float(max(0.0, -d.min())) if d.size else 0.0
    asymmetry = float(np.max(np.abs(d - d.T))) if d.size else 0.0
    diagonal = float(np.max(np.abs(np.diag(d)))) if d.size else 0.0
    triangle, triple = 0.0, None
    if n >= 3:
        via = d[:, :, None] + d[None, :, :]  # via[i, j, k] = d[i, j] + d[j, k]
        viol = d[:, None, :] - via  # [i, j, k]
        flat = int(np.argmax(viol))
        worst = float(viol.reshape(-1)[flat])
        if worst > 0:
            triangle = worst
            triple = tuple(int(v) for v in np.unravel_index(flat, viol.shape))
    return AxiomReport(negativity, asymmetry, diagonal, triangle, triple, tol)


def save_metric(matrix: MetricMatrix, csv_path, extra: Optional[dict] = None) -> None:
    matrix.to_csv(csv_path)
    side = matrix.sidecar()
    side.update(extra or {})
    with open(str(csv_path) + ".json", "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True, default=str)


def save_joint(joint: JointMetric, csv_path) -> None:
    from .emit import write_matrix_csv

    S = joint.n_states
    labels = [f"{x // S}:{x % S}" for x in range(joint.D.shape[0])]
    write_matrix_csv(csv_path, joint.D, labels)
    with open(str(csv_path) + ".json", "w") as fh:
        json.dump(joint.sidecar(), fh, indent=2, sort_keys=True, default=str)
