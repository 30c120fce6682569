"""Per-task Gaussian embeddings fitted to bisimulation targets.

Only the means enter the distance residual; the scales are shaped by a KL
pull toward a fixed anchor table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .emit import read_matrix_csv, write_rows
from .errors import PreconditionError, TrainingError
from .metric import one_step_task_metric
from .models import TabularModelSet, validate_policy
from .transport import GaussianEmbedding

ROLES = ("latent", "specific_anchor", "oracle")
ANCHOR_SIGMA = 0.1
FULL_BATCH_MAX_K = 16


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    mu: np.ndarray  # (K, d_z)
    log_sigma: np.ndarray  # (K, d_z)
    role: str = "latent"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float, ndmin=2)
        ls = np.array(self.log_sigma, dtype=float, ndmin=2)
        if mu.shape != ls.shape:
            raise PreconditionError("mu and log_sigma must share their shape")
        if self.role not in ROLES:
            raise PreconditionError(f"role must be one of {ROLES}")
        for arr in (mu, ls):
            arr.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_sigma", ls)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def d_z(self) -> int:
        return self.mu.shape[1]

    @property
    def n_tasks(self) -> int:
        return self.mu.shape[0]

    def row(self, k: int) -> GaussianEmbedding:
        return GaussianEmbedding(self.mu[k], self.sigma[k])

    def pairwise_l1(self) -> np.ndarray:
        return np.abs(self.mu[:, None, :] - self.mu[None, :, :]).sum(axis=2)

    def to_csv(self, path, ids: Optional[Sequence] = None) -> None:
        ids = range(self.n_tasks) if ids is None else ids
        header = ["task_id"] + [f"mu_{d}" for d in range(self.d_z)] + [f"sigma_{d}" for d in range(self.d_z)]
        sig = self.sigma
        write_rows(path, header, ([k] + list(self.mu[n]) + list(sig[n]) for n, k in enumerate(ids)))

    def sidecar(self) -> dict:
        meta = {k: v for k, v in self.meta.items() if k != "curve"}
        return {"role": self.role, "d_z": self.d_z, "n_tasks": self.n_tasks, **meta}

    def save(self, csv_path) -> None:
        self.to_csv(csv_path)
        with open(str(csv_path) + ".json", "w") as fh:
            json.dump(self.sidecar(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, csv_path) -> "EmbeddingTable":
        data, labels = read_matrix_csv(csv_path)
        d_z = len(labels) // 2
        with open(str(csv_path) + ".json") as fh:
            side = json.load(fh)
        role = side.pop("role")
        for key in ("d_z", "n_tasks"):
            side.pop(key, None)
        return cls(data[:, :d_z], np.log(data[:, d_z:]), role, side)


def init_table(n_tasks: int, d_z: int, seed: int, scale: float = 0.1, role: str = "latent") -> EmbeddingTable:
    rng = np.random.default_rng(seed)
    mu = scale * rng.standard_normal((n_tasks, d_z))
    return EmbeddingTable(mu, np.full((n_tasks, d_z), np.log(ANCHOR_SIGMA)), role, {"init_seed": seed})


# --------------------------------------------------------------------------
# targets


@dataclass(frozen=True, eq=False)
class BisimTargets:
    reward_gap: np.ndarray
    w2_gap: np.ndarray
    inverse_gap: np.ndarray
    total: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("reward_gap", "w2_gap", "inverse_gap", "total"):
            arr = np.array(getattr(self, name), dtype=float, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_tasks(self) -> int:
        return self.total.shape[0]


def bisim_targets(
    models: Sequence[TabularModelSet],
    policy: Optional[np.ndarray] = None,
    aggregation: str = "max",
    order: int = 2,
) -> BisimTargets:
    """Target distances from the one-step metric, with its per-term breakdown."""
    m = one_step_task_metric(models, policy, order=order, aggregation=aggregation)
    c = m.components
    return BisimTargets(c["reward"], c["transport"], c["inverse"], m.d, dict(m.provenance))


# --------------------------------------------------------------------------
# loss


def all_pairs(K: int) -> np.ndarray:
    i, j = np.triu_indices(K, k=1)
    return np.stack([i, j], axis=1)


def permutation_pairs(K: int, rng: np.random.Generator) -> np.ndarray:
    """Pairs ``(i, perm[i])`` with fixed points dropped."""
    perm = rng.permutation(K)
    keep = perm != np.arange(K)
    return np.stack([np.arange(K)[keep], perm[keep]], axis=1)


def _kl_to_table(anchors: EmbeddingTable, mu, log_sigma):
    """Per-task ``KL(anchor_k || N(mu_k, sigma_k^2))`` and its gradients."""
    sa2 = anchors.sigma**2
    s2 = np.exp(2 * log_sigma)
    dmu = mu - anchors.mu
    kl = np.sum(log_sigma - anchors.log_sigma + (sa2 + dmu**2) / (2 * s2) - 0.5, axis=1)
    g_mu = dmu / s2
    g_ls = 1.0 - (sa2 + dmu**2) / s2
    return kl, g_mu, g_ls


def loss_and_grad(
    table: EmbeddingTable,
    targets,
    pairs,
    kl_weight: float = 0.1,
    anchors: Optional[EmbeddingTable] = None,
):
    """Squared L1 residual over ``pairs`` plus the weighted anchor KL.

    Returns ``(loss, (grad_mu, grad_log_sigma))``; the L1 subgradient at a
    tie is 0.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise PreconditionError("pairs must be non-empty")
    if (anchors is None) != (kl_weight == 0):
        raise PreconditionError("anchors must be given exactly when kl_weight > 0")
    total = targets.total if hasattr(targets, "total") else np.asarray(targets, float)
    mu, ls = table.mu, table.log_sigma
    i, j = pairs[:, 0], pairs[:, 1]
    diff = mu[i] - mu[j]
    resid = np.abs(diff).sum(axis=1) - total[i, j]
    P = len(pairs)
    loss = float(np.mean(resid**2))
    g_mu = np.zeros_like(mu)
    g_ls = np.zeros_like(ls)
    step = (2.0 / P) * resid[:, None] * np.sign(diff)
    np.add.at(g_mu, i, step)
    np.add.at(g_mu, j, -step)
    if kl_weight > 0:
        if anchors.mu.shape != mu.shape:
            raise PreconditionError("anchor table shape must match the embedding table")
        kl, k_mu, k_ls = _kl_to_table(anchors, mu, ls)
        K = mu.shape[0]
        loss += kl_weight * float(np.mean(kl))
        g_mu += (kl_weight / K) * k_mu
        g_ls += (kl_weight / K) * k_ls
    return loss, (g_mu, g_ls)


# --------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class FitConfig:
    step_size: float = 1e-2
    steps: int = 5000
    batch: Optional[int] = None  # None: all pairs when K <= 16, else permutation pairs
    kl_weight: float = 0.1
    seed: int = 0


def fit_embeddings(
    init: EmbeddingTable,
    targets,
    config: FitConfig = FitConfig(),
    anchors: Optional[EmbeddingTable] = None,
) -> EmbeddingTable:
    """Plain gradient descent; the loss curve lands in ``meta['curve']``."""
    if config.steps < 1:
        raise PreconditionError("steps must be >= 1")
    K = init.n_tasks
    if K < 2:
        raise PreconditionError("need at least two tasks to fit distances")
    rng = np.random.default_rng(config.seed)
    full = all_pairs(K)

    def draw_pairs():
        if config.batch is None:
            return full if K <= FULL_BATCH_MAX_K else permutation_pairs(K, rng)
        return full[rng.choice(len(full), size=min(config.batch, len(full)), replace=False)]

    # fixed reference loss on all pairs so the curve is comparable across batches
    def full_loss(t):
        return loss_and_grad(t, targets, full, config.kl_weight, anchors)[0]

    table = init
    initial = full_loss(table)
    curve = [initial]
    mu, ls = table.mu.copy(), table.log_sigma.copy()
    for t in range(config.steps):
        _, (g_mu, g_ls) = loss_and_grad(table, targets, draw_pairs(), config.kl_weight, anchors)
        mu -= config.step_size * g_mu
        ls -= config.step_size * g_ls
        table = EmbeddingTable(mu, ls, init.role)
        cur = full_loss(table)
        if not np.isfinite(cur) or cur > 10.0 * max(initial, 1e-12):
            raise TrainingError(
                f"loss diverged at step {t} ({cur:.3g} > 10x initial {initial:.3g}); reduce step_size"
            )
        curve.append(cur)
    meta = dict(init.meta)
    meta.update(
        seed=config.seed,
        config={k: getattr(config, k) for k in ("step_size", "steps", "batch", "kl_weight", "seed")},
        initial_loss=initial,
        final_loss=curve[-1],
        curve=curve,
    )
    return replace(table, meta=meta)


def write_curve(path, curve: Sequence[float], seed: int = 0) -> None:
    write_rows(path, ["seed", "step", "loss"], ([seed, t, v] for t, v in enumerate(curve)))


# --------------------------------------------------------------------------
# specific anchors


def anchor_features(models: TabularModelSet, policy: Optional[np.ndarray] = None) -> np.ndarray:
    """Expected reward per state under ``policy`` followed by goal indicators."""
    policy = models.policy if policy is None else validate_policy(policy, models.n_states, models.n_actions)
    r_pi = np.sum(policy * models.r_hat, axis=1)
    goal = (models.r_hat.max(axis=1) > models.r_max / 2).astype(float)
    return np.concatenate([r_pi, goal])


def seeded_projection(n_features: int, d_z: int, seed: int) -> np.ndarray:
    """``n_features x d_z`` matrix with orthonormal columns."""
    if d_z > n_features:
        raise PreconditionError("d_z cannot exceed the feature length")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((n_features, d_z)))
    return q * np.sign(np.diag(r))


def specific_anchor_table(
    models: Sequence[TabularModelSet], d_z: int, seed: int, policy: Optional[np.ndarray] = None
) -> EmbeddingTable:
    feats = np.stack([anchor_features(m, policy) for m in models])
    proj = seeded_projection(feats.shape[1], d_z, seed)
    mu = feats @ proj
    return EmbeddingTable(mu, np.full_like(mu, np.log(ANCHOR_SIGMA)), "specific_anchor", {"seed": seed})


def pearson_fidelity(table: EmbeddingTable, targets) -> float:
    total = targets.total if hasattr(targets, "total") else np.asarray(targets, float)
    i, j = np.triu_indices(table.n_tasks, k=1)
    x, y = table.pairwise_l1()[i, j], total[i, j]
    if np.std(x) == 0 or np.std(y) == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


__all__ = [
    "EmbeddingTable", "BisimTargets", "FitConfig", "bisim_targets", "loss_and_grad",
    "fit_embeddings", "specific_anchor_table", "init_table", "pearson_fidelity",
]
