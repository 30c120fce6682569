"""Exact optimal transport between discrete distributions.

The discrete solver is a transportation simplex (MODI method): a
north-west-corner basis, potentials from the basis tree, Dantzig pricing
and cycle pivots. It switches to Bland's rule after a bounded number of
pivots so degenerate problems cannot cycle. The kernel is jitted because
the fixed-point metric calls it hundreds of thousands of times.

``wasserstein_1d`` is the independent quantile-coupling closed form used
to cross-check the simplex on the real line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConvergenceError, PreconditionError

MAX_SUPPORT = 256
_MASS_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteDistribution:
    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > _MASS_TOL:
            raise PreconditionError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "support", np.asarray(self.support, dtype=np.int64))

    @classmethod
    def from_dense(cls, probs) -> "DiscreteDistribution":
        probs = np.asarray(probs, dtype=float)
        idx = np.flatnonzero(probs > 0)
        return cls(idx, probs[idx])


@dataclass(frozen=True)
class GaussianEmbedding:
    """Diagonal Gaussian ``N(mu, diag(sigma^2))``."""

    mu: np.ndarray
    sigma: np.ndarray


# --------------------------------------------------------------------------
# transportation simplex kernel


@njit(cache=True)
def _tree_potentials(bi, bj, C, m, n, u, v):
    B = bi.shape[0]
    u_set = np.zeros(m, dtype=np.bool_)
    v_set = np.zeros(n, dtype=np.bool_)
    u[0] = 0.0
    u_set[0] = True
    stack = np.empty(m + n, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if node < m:
            for k in range(B):
                if bi[k] == node and not v_set[bj[k]]:
                    v[bj[k]] = C[node, bj[k]] - u[node]
                    v_set[bj[k]] = True
                    stack[top] = m + bj[k]
                    top += 1
        else:
            col = node - m
            for k in range(B):
                if bj[k] == col and not u_set[bi[k]]:
                    u[bi[k]] = C[bi[k], col] - v[col]
                    u_set[bi[k]] = True
                    stack[top] = bi[k]
                    top += 1


@njit(cache=True)
def _tree_path(bi, bj, m, n, start_col, end_row, path):
    """Basis edges on the tree path from column ``start_col`` to row ``end_row``.

    Writes edge indices into ``path`` ordered from the column end and
    returns their count.
    """
    B = bi.shape[0]
    N = m + n
    parent_edge = np.full(N, -1, dtype=np.int64)
    seen = np.zeros(N, dtype=np.bool_)
    queue = np.empty(N, dtype=np.int64)
    head = 0
    tail = 0
    src = m + start_col
    queue[tail] = src
    tail += 1
    seen[src] = True
    while head < tail:
        node = queue[head]
        head += 1
        if node == end_row:
            break
        for k in range(B):
            if node < m:
                if bi[k] != node:
                    continue
                other = m + bj[k]
            else:
                if bj[k] != node - m:
                    continue
                other = bi[k]
            if not seen[other]:
                seen[other] = True
                parent_edge[other] = k
                queue[tail] = other
                tail += 1
    count = 0
    node = end_row
    while node != src:
        k = parent_edge[node]
        path[count] = k
        count += 1
        node = (m + bj[k]) if node < m else bi[k]
    # reverse so the edge touching the start column comes first
    for x in range(count // 2):
        tmp = path[x]
        path[x] = path[count - 1 - x]
        path[count - 1 - x] = tmp
    return count


@njit(cache=True)
def _transport_simplex(a, b, C):
    """Return ``(cost, plan, status)``; status 0 means optimal."""
    m = a.shape[0]
    n = b.shape[0]
    flow = np.zeros((m, n))
    if m == 1 or n == 1:
        cost = 0.0
        for i in range(m):
            for j in range(n):
                f = b[j] if m == 1 else a[i]
                flow[i, j] = f
                cost += f * C[i, j]
        return cost, flow, 0

    B = m + n - 1
    bi = np.empty(B, dtype=np.int64)
    bj = np.empty(B, dtype=np.int64)
    basic = np.zeros((m, n), dtype=np.bool_)
    ar = a.copy()
    br = b.copy()
    i = 0
    j = 0
    for k in range(B):
        x = min(ar[i], br[j])
        flow[i, j] = x
        basic[i, j] = True
        bi[k] = i
        bj[k] = j
        ar[i] -= x
        br[j] -= x
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif ar[i] <= br[j]:
            i += 1
        else:
            j += 1

    scale = 1.0
    for i in range(m):
        for j in range(n):
            if abs(C[i, j]) > scale:
                scale = abs(C[i, j])
    tol = 1e-13 * scale
    u = np.zeros(m)
    v = np.zeros(n)
    path = np.empty(B, dtype=np.int64)
    bland_after = 20 * (m + n) + 50
    max_iter = 5000 * (m + n) + 10000
    status = 1
    for it in range(max_iter):
        _tree_potentials(bi, bj, C, m, n, u, v)
        ei = -1
        ej = -1
        best = -tol
        for i in range(m):
            for j in range(n):
                if basic[i, j]:
                    continue
                r = C[i, j] - u[i] - v[j]
                if r < best:
                    best = r
                    ei = i
                    ej = j
                    if it >= bland_after:
                        break
            if ei >= 0 and it >= bland_after:
                break
        if ei < 0:
            status = 0
            break
        count = _tree_path(bi, bj, m, n, ej, ei, path)
        theta = np.inf
        leave = -1
        for x in range(0, count, 2):
            k = path[x]
            f = flow[bi[k], bj[k]]
            if f < theta or (
                it >= bland_after
                and f == theta
                and (bi[k] * n + bj[k]) < (bi[leave] * n + bj[leave])
            ):
                theta = f
                leave = k
        for x in range(count):
            k = path[x]
            if x % 2 == 0:
                flow[bi[k], bj[k]] -= theta
            else:
                flow[bi[k], bj[k]] += theta
        flow[ei, ej] = theta
        flow[bi[leave], bj[leave]] = 0.0
        basic[bi[leave], bj[leave]] = False
        basic[ei, ej] = True
        bi[leave] = ei
        bj[leave] = ej

    cost = 0.0
    for i in range(m):
        for j in range(n):
            if flow[i, j] < 0.0:
                flow[i, j] = 0.0
            cost += flow[i, j] * C[i, j]
    return cost, flow, status


@njit(cache=True)
def _batch_wasserstein(D, rows, cols, supp_idx, supp_w, supp_len, order, out):
    """``out[p] = W_order(D)(mu_rows[p], mu_cols[p])`` for every pair ``p``.

    Each distribution ``x`` is stored as ``supp_len[x]`` support indices into
    the ground-cost matrix ``D`` with matching weights. Returns the number
    of solves that failed to reach optimality.
    """
    failures = 0
    for p in range(rows.shape[0]):
        x = rows[p]
        y = cols[p]
        la = supp_len[x]
        lb = supp_len[y]
        C = np.empty((la, lb))
        for r in range(la):
            for c in range(lb):
                d = D[supp_idx[x, r], supp_idx[y, c]]
                C[r, c] = d * d if order == 2 else d
        cost, _, status = _transport_simplex(supp_w[x, :la].copy(), supp_w[y, :lb].copy(), C)
        failures += status
        if order == 2:
            out[p] = math.sqrt(cost) if cost > 0.0 else 0.0
        else:
            out[p] = cost
    return failures


# --------------------------------------------------------------------------
# public API


def _as_weights(p, name):
    if isinstance(p, DiscreteDistribution):
        return p.weights
    w = np.asarray(p, dtype=float)
    if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1.0) > _MASS_TOL:
        raise PreconditionError(f"{name} must be a probability vector summing to 1")
    return w


def wasserstein_discrete(p, q, cost, order: int = 2, return_plan: bool = False):
    """Exact ``W_order`` between discrete distributions under ``cost``.

    For ``order=2`` the transport runs on squared costs and the root of the
    optimum is returned, so a metric cost yields the usual ``W_2``.
    """
    if order not in (1, 2):
        raise PreconditionError("order must be 1 or 2")
    a = _as_weights(p, "p")
    b = _as_weights(q, "q")
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (len(a), len(b)):
        raise PreconditionError(f"cost shape {cost.shape} does not match supports {(len(a), len(b))}")
    if len(a) > MAX_SUPPORT or len(b) > MAX_SUPPORT:
        raise PreconditionError(f"supports are limited to {MAX_SUPPORT} points")
    if np.any(cost < 0) or not np.all(np.isfinite(cost)):
        raise PreconditionError("cost must be finite and non-negative")
    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    sub = cost[np.ix_(ia, ib)]
    if order == 2:
        sub = sub * sub
    value, plan_sub, status = _transport_simplex(a[ia].copy(), b[ib].copy(), np.ascontiguousarray(sub))
    if status != 0:
        raise ConvergenceError("transportation simplex hit its pivot limit")
    value = max(value, 0.0)
    value = math.sqrt(value) if order == 2 else value
    if not return_plan:
        return value
    plan = np.zeros((len(a), len(b)))
    plan[np.ix_(ia, ib)] = plan_sub
    return value, plan


def wasserstein_1d(x, y, wx=None, wy=None, order: int = 1) -> float:
    """``W_order`` between weighted point sets on the real line.

    Integrates ``|F^-1(t) - G^-1(t)|^order`` over the merged quantile
    breakpoints; no optimisation involved.
    """
    if order not in (1, 2):
        raise PreconditionError("order must be 1 or 2")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    wx = np.full(len(x), 1.0 / len(x)) if wx is None else np.asarray(wx, dtype=float)
    wy = np.full(len(y), 1.0 / len(y)) if wy is None else np.asarray(wy, dtype=float)
    ox, oy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    x, wx, y, wy = x[ox], wx[ox], y[oy], wy[oy]
    cx = np.cumsum(wx)
    cy = np.cumsum(wy)
    cx /= cx[-1]
    cy /= cy[-1]
    knots = np.unique(np.concatenate(([0.0], cx, cy)))
    knots = knots[(knots >= 0.0) & (knots <= 1.0)]
    widths = np.diff(knots)
    mids = knots[:-1] + widths / 2
    qx = x[np.minimum(np.searchsorted(cx, mids, side="left"), len(x) - 1)]
    qy = y[np.minimum(np.searchsorted(cy, mids, side="left"), len(y) - 1)]
    total = float(np.sum(widths * np.abs(qx - qy) ** order))
    return math.sqrt(total) if order == 2 else total


def gaussian_w2(e_i, e_j) -> float:
    """Closed-form ``W_2`` between diagonal Gaussians.

    ``W_2^2 = ||mu_i - mu_j||^2 + ||sigma_i - sigma_j||^2``.
    """
    mu_i, s_i = np.asarray(e_i.mu, dtype=float), np.asarray(e_i.sigma, dtype=float)
    mu_j, s_j = np.asarray(e_j.mu, dtype=float), np.asarray(e_j.sigma, dtype=float)
    if np.any(s_i <= 0) or np.any(s_j <= 0):
        raise PreconditionError("sigma must be strictly positive")
    if mu_i.shape != mu_j.shape or s_i.shape != s_j.shape:
        raise PreconditionError("embeddings must share their dimension")
    return float(math.sqrt(np.sum((mu_i - mu_j) ** 2) + np.sum((s_i - s_j) ** 2)))
