"""Exact task posterior, Gaussian belief summaries and their mixture.

The posterior over the training tasks is maintained by an exact Bayes
filter; the Gaussian summaries the policy consumes are obtained by moment
matching that posterior against per-task embedding tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InferenceError, PreconditionError
from .tasks import TabularTask

SIGMA2_FLOOR = 1e-8
DEFAULT_TEMPERING = 1e-6
DEFAULT_WEIGHTS = (0.5, 0.5)


@dataclass(frozen=True)
class DiscretePosterior:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise PreconditionError("posterior must be a probability vector")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, K: int) -> "DiscretePosterior":
        return cls(np.full(K, 1.0 / K))

    @classmethod
    def point(cls, K: int, k: int) -> "DiscretePosterior":
        p = np.zeros(K)
        p[k] = 1.0
        return cls(p)

    def __len__(self):
        return len(self.probs)

    def entropy(self) -> float:
        p = self.probs[self.probs > 0]
        return float(-(p * np.log(p)).sum())


@dataclass(frozen=True)
class GaussianBeliefSummary:
    mu: np.ndarray
    sigma: np.ndarray
    source: str = "mixed"

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        if mu.shape != sigma.shape:
            raise PreconditionError("mu and sigma must share their shape")
        if np.any(sigma <= 0):
            raise PreconditionError("sigma must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True)
class MixedBelief:
    b_r: GaussianBeliefSummary
    b_l: GaussianBeliefSummary
    w_r: float
    w_l: float
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def moments(self) -> GaussianBeliefSummary:
        return GaussianBeliefSummary(self.mu, self.sigma, "mixed")


def _likelihood(tasks: Sequence[TabularTask], obs) -> np.ndarray:
    s, a, r, s2 = obs
    return np.array([t.transition[s, a, s2] * (t.reward[s, a] == r) for t in tasks])


def _as_probs(prior) -> np.ndarray:
    return prior.probs if isinstance(prior, DiscretePosterior) else np.asarray(prior, dtype=float)


def bayes_update(
    prior,
    tasks: Sequence[TabularTask],
    obs: tuple,
    tempering: float = 0.0,
    step: Optional[int] = None,
) -> DiscretePosterior:
    """One filter step: ``post_k ∝ prior_k * T_k(s'|s,a) * [R_k(s,a) == r]``.

    With ``tempering = lam > 0`` each likelihood becomes
    ``(1 - lam) * L + lam`` so out-of-distribution evidence cannot zero the
    posterior.
    """
    p = _as_probs(prior)
    if len(p) != len(tasks):
        raise PreconditionError("prior length must equal the number of tasks")
    s, a, _, s2 = obs
    S, A = tasks[0].n_states, tasks[0].n_actions
    if not (0 <= s < S and 0 <= s2 < S and 0 <= a < A):
        raise PreconditionError(f"observation {obs} out of range")
    lik = _likelihood(tasks, obs)
    if tempering > 0:
        lik = (1.0 - tempering) * lik + tempering
    post = p * lik
    z = post.sum()
    if z <= 0:
        raise InferenceError(step if step is not None else -1, f"observation {obs} impossible under every task")
    return DiscretePosterior(post / z)


def fold_posterior(prior, tasks, trajectory, tempering: float = 0.0) -> DiscretePosterior:
    post = DiscretePosterior(_as_probs(prior))
    for t, obs in enumerate(trajectory):
        post = bayes_update(post, tasks, obs, tempering, step=t)
    return post


def moment_match(posterior, table) -> GaussianBeliefSummary:
    """Single diagonal Gaussian with the first two moments of ``sum_k p_k N(mu_k, sigma_k^2)``."""
    p = _as_probs(posterior)
    mu_k, sigma_k = table.mu, table.sigma
    if len(p) != mu_k.shape[0]:
        raise PreconditionError("posterior length must match the embedding table")
    nz = np.flatnonzero(p)
    source = "specific" if getattr(table, "role", "") == "specific_anchor" else "latent"
    if len(nz) == 1:
        k = nz[0]
        return GaussianBeliefSummary(mu_k[k].copy(), sigma_k[k].copy(), source)
    mu = p @ mu_k
    var = p @ (sigma_k**2 + mu_k**2) - mu**2
    return GaussianBeliefSummary(mu, np.sqrt(np.maximum(var, SIGMA2_FLOOR)), source)


def mix_beliefs(b_r, b_l, w_r: float = DEFAULT_WEIGHTS[0], w_l: float = DEFAULT_WEIGHTS[1]) -> MixedBelief:
    """Two-component Gaussian mixture and its moment-matched summary."""
    if w_r < 0 or w_l < 0 or abs(w_r + w_l - 1.0) > 1e-12:
        raise PreconditionError("mixture weights must be non-negative and sum to 1")
    if w_l == 0:
        mu, sigma = b_r.mu.copy(), b_r.sigma.copy()
    elif w_r == 0:
        mu, sigma = b_l.mu.copy(), b_l.sigma.copy()
    else:
        mu = w_r * b_r.mu + w_l * b_l.mu
        var = w_r * b_r.sigma**2 + w_l * b_l.sigma**2 + (w_r * w_l) * (b_r.mu - b_l.mu) ** 2
        sigma = np.sqrt(np.maximum(var, SIGMA2_FLOOR))
    return MixedBelief(b_r, b_l, float(w_r), float(w_l), mu, sigma)


def gaussian_kl(a, b) -> float:
    """``KL(a || b)`` between diagonal Gaussians."""
    sa, sb = np.asarray(a.sigma, float), np.asarray(b.sigma, float)
    if np.any(sa <= 0) or np.any(sb <= 0):
        raise PreconditionError("sigma must be strictly positive")
    dmu = np.asarray(a.mu, float) - np.asarray(b.mu, float)
    return float(np.sum(np.log(sb / sa) + (sa**2 + dmu**2) / (2 * sb**2) - 0.5))


# --------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class BeliefState:
    posterior: np.ndarray
    mixed: Optional[MixedBelief]
    features: Optional[tuple]


class BeliefPipeline:
    """Filter -> Gaussian summaries -> mixture -> featurizer.

    Holds the training tasks the filter reasons about and persists across
    episodes until ``reset``. Without embedding tables the pipeline only
    tracks the posterior.
    """

    def __init__(
        self,
        tasks: Sequence[TabularTask],
        prior=None,
        specific=None,
        latent=None,
        weights: tuple = DEFAULT_WEIGHTS,
        featurizer: Optional[Callable] = None,
        tempering: float = DEFAULT_TEMPERING,
    ):
        self.tasks = list(tasks)
        K = len(self.tasks)
        self.prior = np.full(K, 1.0 / K) if prior is None else _as_probs(prior).copy()
        self.specific = specific
        self.latent = latent
        self.w_r, self.w_l = (float(w) for w in weights)
        if self.w_r < 0 or self.w_l < 0 or abs(self.w_r + self.w_l - 1.0) > 1e-12:
            raise PreconditionError("mixture weights must be non-negative and sum to 1")
        self.featurizer = featurizer
        self.tempering = tempering
        self._T = np.stack([t.transition for t in self.tasks])
        self._R = np.stack([t.reward for t in self.tasks])
        self.reset()

    def reset(self) -> None:
        self.posterior = self.prior.copy()
        self._state = None

    def update(self, s: int, a: int, r: float, s2: int, step: Optional[int] = None) -> None:
        lik = self._T[:, s, a, s2] * (self._R[:, s, a] == r)
        if self.tempering > 0:
            lik = (1.0 - self.tempering) * lik + self.tempering
        post = self.posterior * lik
        z = post.sum()
        if z <= 0:
            raise InferenceError(step if step is not None else -1, "observation impossible under every task")
        self.posterior = post / z
        self._state = None

    def mixed(self) -> Optional[MixedBelief]:
        if self.specific is None and self.latent is None:
            return None
        b_r = moment_match(self.posterior, self.specific) if self.specific is not None else None
        b_l = moment_match(self.posterior, self.latent) if self.latent is not None else None
        if b_r is None:
            return mix_beliefs(b_l, b_l, 0.0, 1.0)
        if b_l is None:
            return mix_beliefs(b_r, b_r, 1.0, 0.0)
        return mix_beliefs(b_r, b_l, self.w_r, self.w_l)

    def current(self) -> BeliefState:
        if self._state is None:
            mixed = self.mixed()
            feats = None
            if self.featurizer is not None:
                feats = self.featurizer(self.posterior, mixed)
            self._state = BeliefState(self.posterior.copy(), mixed, feats)
        return self._state

    def trace_row(self) -> list:
        """Posterior plus (mu, sigma) of the specific, latent and mixed summaries."""
        row = list(self.posterior)
        m = self.mixed()
        if m is not None:
            for g in (m.b_r, m.b_l):
                row.extend(g.mu)
                row.extend(g.sigma)
            row.extend(m.mu)
            row.extend(m.sigma)
        return row
