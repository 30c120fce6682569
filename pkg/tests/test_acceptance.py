"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed even when output capture is on.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from bamdp_lab.checks import (
    SweepCache,
    constructed_families,
    suite_filter,
    suite_fixed_point,
    suite_gradients,
    suite_metric_axioms,
    suite_ot,
    suite_transfer_bound,
    suite_value_bound,
)
from bamdp_lab.config import ExperimentConfig, load_config
from bamdp_lab.embedding import FitConfig, bisim_targets, fit_embeddings, init_table, specific_anchor_table
from bamdp_lab.emit import write_rows
from bamdp_lab.harness import rerun_manifest, run_experiment
from bamdp_lab.models import models_from_task
from bamdp_lab.theory import check_transfer_bound

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
N_FAMILIES = 100
# exact Bayes-optimal value of the two-goal grid (K=2, H=6, N=2), frozen from the oracle
TWO_GOAL_VALUE = 6.0
UP_TO_EVAL = ("gen", "collect", "estimate", "fit", "train", "eval")


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, tag="CRITERION"):
        with capsys.disabled():
            print(f"\n{tag} {n:>2} {'PASS' if ok else 'FAIL'}: {detail}")

    return emit


@pytest.fixture(scope="module")
def sweep():
    return SweepCache()


def test_criterion_01_metric_axioms(report, sweep):
    t0 = time.perf_counter()
    res = suite_metric_axioms(N_FAMILIES, sweep)
    seconds = time.perf_counter() - t0
    ok = res.passed and seconds <= 300
    report(1, ok, f"{res.detail}, {seconds:.0f}s for both variants")
    assert ok


def test_criterion_02_ot_correctness(report):
    res = suite_ot(500, 200)
    report(2, res.passed, res.detail)
    assert res.passed


def test_criterion_03_fixed_point(report, sweep):
    res = suite_fixed_point(N_FAMILIES, 100, sweep)
    report(3, res.passed, res.detail)
    assert res.passed


def test_criterion_04_value_bound(report, sweep):
    res = suite_value_bound(N_FAMILIES, sweep)
    report(4, res.passed, res.detail)
    assert res.passed


def test_criterion_05_transfer_bound(report):
    res = suite_transfer_bound()
    # learned-embedding margins are reported only
    worst, violations, rows = float("inf"), 0, 0
    for fam in constructed_families():
        models = [models_from_task(t) for t in fam.train_tasks]
        targets = bisim_targets(models)
        anchors = specific_anchor_table(models, 10, 0)
        learned = fit_embeddings(init_table(len(models), 10, 0), targets, FitConfig(), anchors)
        rep = check_transfer_bound(fam, learned, outer_factor="with_horizon_factor")
        margins = [r["margin"] for r in rep.rows]
        worst = min(worst, min(margins))
        violations += sum(m < -1e-9 for m in margins)
        rows += len(margins)
    report(5, res.passed, f"{res.detail}; learned embeddings: {violations}/{rows} violations, worst margin {worst:.3g}")
    assert res.passed


def test_criterion_06_gradients(report):
    res = suite_gradients(100)
    report(6, res.passed, res.detail)
    assert res.passed


def _fidelity(kl_weight, tmp_path):
    values = []
    for seed in range(5):
        cfg = ExperimentConfig().replace(**{"family.params": {"K": 8}, "pipeline.kl_weight": kl_weight, "root_seed": seed})
        manifest = run_experiment(cfg, tmp_path / f"kl{kl_weight}_{seed}", phases=("gen", "collect", "estimate", "fit"))
        assert manifest.status == "ok", manifest.error
        values.append(manifest.notes["embedding_pearson"])
    return values


def test_criterion_07_embedding_fidelity(report, tmp_path):
    shipped = _fidelity(ExperimentConfig().pipeline.kl_weight, tmp_path)
    bisim_only = _fidelity(0.0, tmp_path)
    ok = min(shipped) >= 0.8
    report(7, ok, "pearson at kl_weight 0.1: " + ", ".join(f"{v:.3f}" for v in shipped))
    report(7, min(bisim_only) >= 0.8, "diagnostic, kl_weight 0: " + ", ".join(f"{v:.4f}" for v in bisim_only), tag="REPORTED ")
    assert ok


def test_criterion_08_bayes_filter(report):
    res = suite_filter(1000, 1_000_000)
    report(8, res.passed, res.detail)
    assert res.passed


def test_criterion_09_policy_quality(report, tmp_path):
    base = load_config(CONFIGS / "minimal.toml")
    lines, ok = [], True
    for seed in range(3):
        t0 = time.perf_counter()
        manifest = run_experiment(base.replace(root_seed=seed), tmp_path / str(seed), phases=UP_TO_EVAL)
        seconds = time.perf_counter() - t0
        oracle = json.loads((tmp_path / str(seed) / "oracle.json").read_text())
        ratio = manifest.notes["mean_return"] / TWO_GOAL_VALUE
        ok &= manifest.status == "ok" and ratio >= 0.9 and seconds <= 60 and oracle["value"] == TWO_GOAL_VALUE
        lines.append(f"seed {seed}: {manifest.notes['mean_return']:.3f}/{TWO_GOAL_VALUE} = {ratio:.3f} in {seconds:.0f}s")
    report(9, ok, "; ".join(lines))
    assert ok


def test_criterion_10_ablation_direction(report, tmp_path):
    base = load_config(CONFIGS / "ablation.toml")
    arms = {"mixture": (0.5, 0.5), "specific_only": (1.0, 0.0)}
    rows, at_far = [], {a: [] for a in arms}
    for seed in range(5):
        for arm, w in arms.items():
            cfg = base.replace(root_seed=seed, **{"pipeline.weights": w})
            manifest = run_experiment(cfg, tmp_path / f"{arm}_{seed}", phases=UP_TO_EVAL)
            assert manifest.status == "ok", manifest.error
            for radius in base.evaluation.ood_radii:
                value = manifest.notes[f"ood_mean_return_{radius:g}"]
                rows.append([arm, seed, radius, value])
                if radius == 1.2:
                    at_far[arm].append(value)
    out = write_rows(tmp_path / "ablation_comparison.csv", ["arm", "seed", "radius", "mean_return"], rows)
    mix, specific = np.mean(at_far["mixture"]), np.mean(at_far["specific_only"])
    ok = mix >= specific - 0.05
    report(10, ok, f"radius 1.2 mean return mixture {mix:.3f} vs specific-only {specific:.3f} (gap {mix - specific:+.3f}); table {out}")
    assert ok


def test_criterion_11_determinism(report, tmp_path):
    first = run_experiment(load_config(CONFIGS / "minimal.toml"), tmp_path / "a")
    _, diff = rerun_manifest(tmp_path / "a", tmp_path / "b")
    csvs = [n for n in first.files if n.endswith(".csv")]
    ok = first.status == "ok" and not diff
    report(11, ok, f"{len(csvs)} CSVs compared, {len(diff)} differ {diff}")
    assert ok
