"""Seeded experiment phases, run manifests and plot-ready tables.

Phases read their inputs from the run directory, so a full run and a
sequence of single-phase CLI calls produce the same files.
"""

from __future__ import annotations

import json
import platform
import time
import traceback
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .belief import BeliefPipeline
from .config import PHASES, ExperimentConfig, dump_config, load_config
from .embedding import (
    EmbeddingTable,
    FitConfig,
    bisim_targets,
    fit_embeddings,
    init_table,
    pearson_fidelity,
    specific_anchor_table,
    write_curve,
)
from .emit import file_digest, read_rows, write_json, write_rows
from .errors import LabError, MissingArtifactError, ResourceError
from .metric import fixed_point_task_metric, one_step_task_metric, save_joint, save_metric
from .models import estimate_models, load_models, models_from_task, save_models
from .policy import (
    BeliefFeaturizer,
    SoftQConfig,
    SoftQTable,
    bayes_optimal_value,
    evaluate,
    ood_tasks,
    soft_q_learn,
    write_learning_curve,
)
from .tasks import History, generate_family, load_family, run_meta_episode, save_family, uniform_random_policy
from .theory import check_transfer_bound, check_value_bound, oracle_embeddings

SCHEMA_VERSION = 1
PLOT_KINDS = ("adaptation_curve", "ood_sweep", "metric_heatmap", "bound_margins", "embedding_scatter")
ORACLE_LIMITS = dict(max_tasks=6, max_horizon=24)

# artifact -> producing phase
ARTIFACTS = {
    "config.toml": "gen",
    "family.json": "gen",
    "histories.csv": "collect",
    "models.json": "estimate",
    "targets.csv": "fit",
    "anchors.csv": "fit",
    "embeddings.csv": "fit",
    "fit_curve.csv": "fit",
    "metric_one_step.csv": "metric",
    "metric_fixed_point.csv": "metric",
    "joint_fixed_point.csv": "metric",
    "qtable.json": "train",
    "learning_curve.csv": "train",
    "adaptation.csv": "eval",
    "ood_sweep.csv": "eval",
    "ood_beliefs.csv": "eval",
    "oracle.json": "eval",
    "bound_value.csv": "verify",
    "bound_transfer.csv": "verify",
}


@dataclass
class RunManifest:
    config_hash: str
    seeds: dict
    versions: dict
    files: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    tiers: dict = field(default_factory=dict)
    status: str = "running"
    failed_phase: Optional[str] = None
    error: Optional[str] = None
    notes: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    @property
    def passed(self) -> bool:
        return self.status == "ok" and all(v is not False for v in self.tiers.values())


def _versions() -> dict:
    import numba

    return {"bamdp_lab": __version__, "numpy": np.__version__, "numba": numba.__version__, "python": platform.python_version()}


class Run:
    """One experiment directory and the phases that fill it."""

    def __init__(self, config: ExperimentConfig, out: Optional[Path] = None):
        self.config = config
        self.out = Path(out if out is not None else config.out)
        self.notes: dict = {}
        self.tiers: dict = {}

    def path(self, name: str) -> Path:
        return self.out / name

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(ARTIFACTS.get(name, "?"), str(p))
        return p

    # ------------------------------------------------------------- loaders

    def family(self):
        return load_family(self.need("family.json"))

    def histories(self) -> list:
        rows = read_rows(self.need("histories.csv"))
        fam = self.family()
        H = fam.horizon
        N = self.config.collect.n_episodes
        grouped = defaultdict(list)
        for r in rows:
            grouped[(int(r["task_id"]), int(r["meta_episode"]))].append(r)
        out = []
        for (task_id, _), steps in sorted(grouped.items()):
            out.append(History(
                states=np.array([int(r["state"]) for r in steps]),
                actions=np.array([int(r["action"]) for r in steps]),
                rewards=np.array([float(r["reward"]) for r in steps]),
                next_states=np.array([int(r["next_state"]) for r in steps]),
                episode_breaks=tuple(range(H, N * H, H)),
                task_id=task_id,
                n_episodes=N,
                horizon=H,
                beliefs=None,
            ))
        return out

    def pipeline(self, weights=None) -> BeliefPipeline:
        p = self.config.pipeline
        fam = self.family()
        anchors = EmbeddingTable.load(self.need("anchors.csv"))
        latent = EmbeddingTable.load(self.need("embeddings.csv"))
        return BeliefPipeline(
            fam.train_tasks,
            specific=anchors,
            latent=latent,
            weights=tuple(p.weights if weights is None else weights),
            featurizer=BeliefFeaturizer(p.featurizer),
            tempering=p.tempering,
        )

    def qtable(self) -> SoftQTable:
        with open(self.need("qtable.json")) as fh:
            doc = json.load(fh)
        table = SoftQTable(n_actions=doc["n_actions"], alpha=doc["alpha"], seed=doc["seed"])
        for entry in doc["entries"]:
            table.q[(entry["state"], tuple(entry["feature"]))] = np.array(entry["q"])
        return table

    # -------------------------------------------------------------- phases

    def gen(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self.path("config.toml").write_text(dump_config(self.config))
        fam = generate_family(self.config.family.kind, dict(self.config.family.params), self.config.seed("gen"))
        save_family(fam, self.path("family.json"))

    def collect(self):
        fam = self.family()
        c = self.config.collect
        rng = np.random.default_rng(self.config.seed("collect"))
        act = uniform_random_policy(fam.tasks[0].n_actions)
        rows = []
        for task in fam.train_tasks:
            for m in range(c.meta_episodes):
                h = run_meta_episode(task, act, c.n_episodes, None, rng)
                for t, (s, a, r, s2) in enumerate(h.steps):
                    rows.append([task.id, m, t, s, a, r, s2])
        write_rows(self.path("histories.csv"), ["task_id", "meta_episode", "step", "state", "action", "reward", "next_state"], rows)

    def estimate(self):
        fam = self.family()
        hist = self.histories()
        by_task = defaultdict(list)
        for h in hist:
            by_task[h.task_id].append(h)
        S, A = fam.tasks[0].n_states, fam.tasks[0].n_actions
        models = [
            estimate_models(by_task[t.id], (S, A), smoothing=self.config.pipeline.smoothing, r_max=t.r_max)
            for t in fam.train_tasks
        ]
        save_models(models, self.path("models.json"))

    def fit(self):
        p = self.config.pipeline
        models = load_models(self.need("models.json"))
        seed = self.config.seed("fit")
        targets = bisim_targets(models, aggregation=p.aggregation, order=p.order)
        K = len(models)
        i, j = np.triu_indices(K, k=1)
        write_rows(
            self.path("targets.csv"),
            ["task_i", "task_j", "reward_gap", "w2_gap", "inverse_gap", "total"],
            zip(i, j, targets.reward_gap[i, j], targets.w2_gap[i, j], targets.inverse_gap[i, j], targets.total[i, j]),
        )
        anchors = specific_anchor_table(models, p.d_z, seed)
        anchors.save(self.path("anchors.csv"))
        if K < 2:
            latent = EmbeddingTable(anchors.mu, anchors.log_sigma, "latent", {"note": "single task: anchors copied"})
            curve = [0.0]
        else:
            cfg = FitConfig(step_size=p.step_size, steps=p.fit_steps, kl_weight=p.kl_weight, seed=seed)
            latent = fit_embeddings(init_table(K, p.d_z, seed), targets, cfg, anchors if p.kl_weight > 0 else None)
            curve = latent.meta["curve"]
            if K >= 3:
                self.notes["embedding_pearson"] = pearson_fidelity(latent, targets)
        latent.save(self.path("embeddings.csv"))
        write_curve(self.path("fit_curve.csv"), curve, seed)

    def metric(self):
        p = self.config.pipeline
        models = load_models(self.need("models.json"))
        one = one_step_task_metric(models, order=p.order, aggregation=p.aggregation)
        save_metric(one, self.path("metric_one_step.csv"), {"source": "estimated"})
        fam = self.family()
        exact = [models_from_task(t) for t in fam.train_tasks]
        if len(exact) * exact[0].n_states <= p.max_joint_points:
            joint, fixed = fixed_point_task_metric(exact, gamma=fam.gamma, tol=p.metric_tol, order=p.order)
            save_metric(fixed, self.path("metric_fixed_point.csv"), {"source": "exact"})
            save_joint(joint, self.path("joint_fixed_point.csv"))
        else:
            self.notes["fixed_point"] = "skipped: joint space exceeds max_joint_points"

    def train(self, weights=None):
        fam = self.family()
        lr = self.config.learner
        cfg = SoftQConfig(
            alpha=lr.alpha, learning_rate=lr.learning_rate, meta_episodes=lr.meta_episodes,
            n_episodes=self.config.evaluation.n_episodes, eps_start=lr.eps_start, eps_end=lr.eps_end,
            seed=self.config.seed("train"),
        )
        table = soft_q_learn(fam, self.pipeline(weights), cfg)
        keys = sorted(table.q, key=repr)
        doc = {
            "n_actions": table.n_actions, "alpha": table.alpha, "seed": table.seed,
            "entries": [{"state": s, "feature": list(f), "q": table.q[(s, f)].tolist()} for s, f in keys],
        }
        write_json(self.path("qtable.json"), doc)
        write_learning_curve(self.path("learning_curve.csv"), table)

    def eval(self):
        fam = self.family()
        ev = self.config.evaluation
        seed = self.config.seed("eval")
        table = self.qtable()
        pipe = self.pipeline()
        res = evaluate(table, fam.train_tasks, ev.n_meta_episodes, pipe, seed, ev.n_episodes)
        res.to_csv(self.path("adaptation.csv"))
        self.notes["mean_return"] = res.mean_return()

        rows, belief_rows = [], []
        for radius in ev.ood_radii:
            tasks = ood_tasks(fam, radius)
            r = evaluate(table, tasks, ev.n_meta_episodes, pipe, seed, ev.n_episodes)
            for row in r.rows():
                rows.append([radius] + row)
            self.notes[f"ood_mean_return_{radius:g}"] = r.mean_return()
        write_rows(self.path("ood_sweep.csv"), ["radius", "seed", "task_id", "meta_episode", "episode", "return", "success"], rows)
        if ev.ood_radii:
            radius = max(ev.ood_radii)
            rng = np.random.default_rng(seed)
            agent = table.as_policy()
            for task in ood_tasks(fam, radius):
                run_meta_episode(task, agent, ev.n_episodes, pipe, rng)
                b_l = pipe.mixed().b_l
                belief_rows.append([task.id, radius] + list(b_l.mu))
        d_z = self.config.pipeline.d_z
        write_rows(self.path("ood_beliefs.csv"), ["task_id", "radius"] + [f"mu_{k}" for k in range(d_z)], belief_rows)

        oracle = {"computed": False}
        K, T = len(fam.train_ids), ev.n_episodes * fam.horizon
        if ev.oracle and K <= ORACLE_LIMITS["max_tasks"] and T <= ORACLE_LIMITS["max_horizon"]:
            try:
                sol = bayes_optimal_value(fam, None, ev.n_episodes)
                oracle = dict(computed=True, **sol.summary())
                self.notes["oracle_ratio"] = res.mean_return() / sol.value if sol.value > 0 else None
            except ResourceError as exc:
                oracle = {"computed": False, "reason": str(exc)}
        else:
            oracle["reason"] = "outside the exact-expansion limits"
        write_json(self.path("oracle.json"), oracle)

    def verify(self):
        if not self.config.verify.enabled:
            self.notes["verify"] = "disabled"
            return
        fam = self.family()
        exact = [models_from_task(t) for t in fam.train_tasks]
        p = self.config.pipeline
        if len(exact) >= 2 and len(exact) * exact[0].n_states <= p.max_joint_points:
            joint, _ = fixed_point_task_metric(exact, gamma=fam.gamma, tol=self.config.verify.tol, order=p.order)
            rep = check_value_bound(fam, None, joint, one_step_task_metric(exact))
            rep.save(self.path("bound_value.csv"))
            self.tiers["value_bound_A"] = rep.tiers["A"]
        else:
            self.notes["value_bound"] = "skipped: joint space exceeds max_joint_points"
        if len(exact) >= 2:
            rep = check_transfer_bound(fam, oracle_embeddings(exact))
            learned = check_transfer_bound(fam, EmbeddingTable.load(self.need("embeddings.csv")))
            rep.rows.extend(dict(r, variant=r["variant"] + ":learned") for r in learned.rows)
            rep.save(self.path("bound_transfer.csv"))
            self.tiers["transfer_bound_A"] = rep.tiers["A"]
            self.tiers["transfer_bound_B"] = rep.tiers.get("B")


def run_phase(config: ExperimentConfig, phase: str, out: Optional[Path] = None) -> dict:
    """Run one phase against an existing run directory; returns notes and tiers."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    run = Run(config, out)
    getattr(run, phase)()
    return {"notes": run.notes, "tiers": run.tiers}


def run_experiment(config: ExperimentConfig, out: Optional[Path] = None, phases=PHASES) -> RunManifest:
    """All phases in order, then the manifest; a failing phase is recorded, not raised."""
    run = Run(config, out)
    run.out.mkdir(parents=True, exist_ok=True)
    marker = run.path("FAILED")
    if marker.exists():
        marker.unlink()
    manifest = RunManifest(
        config_hash=config.digest(),
        seeds={ph: config.seed(ph) for ph in PHASES} | {"root": config.root_seed},
        versions=_versions(),
    )
    for phase in phases:
        t0 = time.perf_counter()
        try:
            getattr(run, phase)()
        except LabError as exc:
            manifest.status = "failed"
            manifest.failed_phase = phase
            manifest.error = f"{type(exc).__name__}: {exc}"
            manifest.notes["traceback"] = traceback.format_exc(limit=3)
            marker.write_text(f"{phase}\n{manifest.error}\n")
            break
        finally:
            manifest.timings[phase] = round(time.perf_counter() - t0, 3)
    else:
        manifest.status = "ok"
    manifest.tiers = dict(run.tiers)
    manifest.notes.update(run.notes)
    manifest.files = {
        name: file_digest(run.path(name))
        for name in sorted(p.name for p in run.out.iterdir() if p.is_file() and p.name != "manifest.json")
    }
    write_json(run.path("manifest.json"), manifest.as_dict())
    return manifest


def rerun_manifest(run_dir, out) -> tuple:
    """Re-execute the config stored in ``run_dir`` into ``out``; returns (manifest, mismatched CSVs)."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.toml")
    with open(run_dir / "manifest.json") as fh:
        old = json.load(fh)
    new = run_experiment(cfg, out)
    diff = sorted(
        name for name, digest in old["files"].items()
        if name.endswith(".csv") and new.files.get(name) != digest
    )
    return new, diff


# --------------------------------------------------------------------------
# plot data


def _curve(rows, keys):
    acc = defaultdict(lambda: [0.0, 0.0, 0])
    for r in rows:
        k = tuple(r[x] for x in keys)
        a = acc[k]
        a[0] += float(r["return"])
        a[1] += float(r["success"])
        a[2] += 1
    return [(k, a[0] / a[2], a[1] / a[2]) for k, a in sorted(acc.items(), key=lambda kv: tuple(float(x) for x in kv[0]))]


def emit_plot_data(run_dir, kind: str) -> Path:
    """Tidy plot-ready CSV ``plot_<kind>.csv`` inside ``run_dir``."""
    run_dir = Path(run_dir)
    if kind not in PLOT_KINDS:
        raise ValueError(f"kind must be one of {PLOT_KINDS}")

    def need(name):
        p = run_dir / name
        if not p.exists():
            raise MissingArtifactError(ARTIFACTS[name], str(p))
        return p

    target = run_dir / f"plot_{kind}.csv"
    if kind == "adaptation_curve":
        rows = read_rows(need("adaptation.csv"))
        data = _curve(rows, ("seed", "episode"))
        write_rows(target, ["seed", "episode_index", "mean_return", "success_rate"], ([*k, m, s] for k, m, s in data))
    elif kind == "ood_sweep":
        rows = read_rows(need("ood_sweep.csv"))
        data = _curve(rows, ("radius", "episode"))
        write_rows(target, ["radius", "episode_index", "mean_return", "success_rate"], ([*k, m, s] for k, m, s in data))
    elif kind == "metric_heatmap":
        out = []
        for variant, name in (("one_step", "metric_one_step.csv"), ("fixed_point", "metric_fixed_point.csv")):
            p = run_dir / name
            if variant == "one_step":
                p = need(name)
            elif not p.exists():
                continue
            rows = read_rows(p)
            for r in rows:
                i = r["id"]
                for j, v in r.items():
                    if j != "id":
                        out.append([variant, i, j, float(v)])
        write_rows(target, ["variant", "task_i", "task_j", "distance"], out)
    elif kind == "bound_margins":
        out = []
        for bound, name in (("value", "bound_value.csv"), ("transfer", "bound_transfer.csv")):
            p = run_dir / name
            if not p.exists():
                continue
            for r in read_rows(p):
                out.append([bound, r["variant"], r.get("lhs_reading", ""), r["task_i"], r["task_j"],
                            r.get("state", ""), float(r["lhs"]), float(r["rhs"]), float(r["margin"])])
        if not out:
            raise MissingArtifactError("verify", str(run_dir / "bound_*.csv"))
        write_rows(target, ["bound", "variant", "lhs_reading", "task_i", "task_j", "state", "lhs", "rhs", "margin"], out)
    else:
        table = EmbeddingTable.load(need("embeddings.csv"))
        ood = read_rows(need("ood_beliefs.csv"))
        header = ["task_id", "ood"] + [f"mu_{k}" for k in range(table.d_z)]
        rows = [[k, 0] + list(table.mu[k]) for k in range(table.n_tasks)]
        rows += [[r["task_id"], 1] + [float(r[f"mu_{k}"]) for k in range(table.d_z)] for r in ood]
        write_rows(target, header, rows)
    return target


# --------------------------------------------------------------------------
# self-check


@dataclass
class SelfcheckReport:
    budget: str
    suites: list

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def failed(self) -> list:
        return [s.name for s in self.suites if not s.passed]

    def lines(self) -> list:
        return [s.line() for s in self.suites]


def selfcheck(budget: str = "quick", fault: Optional[str] = None) -> SelfcheckReport:
    """Cross-module property suites; ``fault`` plants a known defect to prove detection."""
    from .checks import run_suites

    return SelfcheckReport(budget, run_suites(budget, fault))
