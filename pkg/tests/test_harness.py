import json
from pathlib import Path

import pytest

from bamdp_lab.config import load_config
from bamdp_lab.emit import file_digest, read_rows
from bamdp_lab.errors import MissingArtifactError
from bamdp_lab.harness import PLOT_KINDS, emit_plot_data, run_experiment, run_phase

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="module")
def minimal_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("minimal")
    cfg = load_config(CONFIGS / "minimal.toml")
    return cfg, out, run_experiment(cfg, out)


def test_manifest_lists_every_file_with_its_digest(minimal_run):
    _, out, manifest = minimal_run
    assert manifest.status == "ok" and manifest.passed
    on_disk = {p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json" and not p.name.startswith("plot_")}
    assert on_disk <= set(manifest.files)
    for name, digest in manifest.files.items():
        assert file_digest(out / name) == digest
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["schema_version"] == 1 and set(doc["timings"]) >= {"gen", "verify"}
    assert doc["tiers"] == {"value_bound_A": True, "transfer_bound_A": True, "transfer_bound_B": True}


def test_minimal_run_meets_the_time_budget(minimal_run):
    assert sum(minimal_run[2].timings.values()) <= 120


def test_every_csv_has_a_header(minimal_run):
    _, out, _ = minimal_run
    for p in out.glob("*.csv"):
        first = p.read_text().splitlines()[0]
        assert first and not first[0].isdigit(), p.name


@pytest.mark.parametrize("kind", PLOT_KINDS)
def test_plot_data_columns(minimal_run, kind):
    _, out, _ = minimal_run
    path = emit_plot_data(out, kind)
    header = path.read_text().splitlines()[0].split(",")
    expected = {
        "adaptation_curve": ["seed", "episode_index", "mean_return", "success_rate"],
        "ood_sweep": ["radius", "episode_index", "mean_return", "success_rate"],
        "metric_heatmap": ["variant", "task_i", "task_j", "distance"],
        "bound_margins": ["bound", "variant", "lhs_reading", "task_i", "task_j", "state", "lhs", "rhs", "margin"],
        "embedding_scatter": ["task_id", "ood"],
    }[kind]
    assert header[: len(expected)] == expected


def test_ood_sweep_has_a_row_per_radius_and_episode(minimal_run):
    _, out, _ = minimal_run
    rows = read_rows(emit_plot_data(out, "ood_sweep"))
    assert [(r["radius"], r["episode_index"]) for r in rows] == [
        (r, e) for r in ("1", "1.1", "1.2") for e in ("0", "1")
    ]


def test_missing_artifacts_name_the_phase(tmp_path, minimal_run):
    cfg = minimal_run[0]
    with pytest.raises(MissingArtifactError) as exc:
        run_phase(cfg, "estimate", tmp_path)
    assert exc.value.phase == "gen"
    with pytest.raises(MissingArtifactError):
        emit_plot_data(tmp_path, "adaptation_curve")


def test_failing_phase_is_recorded(tmp_path, minimal_run):
    manifest = run_experiment(minimal_run[0], tmp_path, phases=("collect",))
    assert manifest.status == "failed" and manifest.failed_phase == "collect"
    assert (tmp_path / "FAILED").exists()
    assert json.loads((tmp_path / "manifest.json").read_text())["failed_phase"] == "collect"


def test_specific_only_arm_runs(tmp_path, minimal_run):
    cfg = minimal_run[0].replace(**{"pipeline.weights": (1.0, 0.0), "learner.meta_episodes": 50})
    manifest = run_experiment(cfg, tmp_path, phases=("gen", "collect", "estimate", "fit", "train", "eval"))
    assert manifest.status == "ok"


def test_root_seed_changes_results(tmp_path, minimal_run):
    cfg = minimal_run[0].replace(root_seed=1)
    manifest = run_experiment(cfg, tmp_path, phases=("gen", "collect"))
    assert manifest.files["histories.csv"] != minimal_run[2].files["histories.csv"]
