import pytest

from bamdp_lab.config import ExperimentConfig, config_from_dict, dump_config, load_config, phase_seed
from bamdp_lab.errors import ConfigurationError


def test_defaults_follow_the_reference_hyperparameters():
    cfg = ExperimentConfig()
    assert cfg.pipeline.kl_weight == 0.1 and cfg.pipeline.d_z == 10
    assert cfg.pipeline.weights == (0.5, 0.5)


def test_dump_and_load_roundtrip(tmp_path):
    cfg = ExperimentConfig().replace(**{
        "family.params": {"grid": 7, "K": 2, "placement": "even"},
        "evaluation.ood_radii": (1.0, 1.2),
        "pipeline.metric_tol": 1e-8,
        "root_seed": 11,
    })
    path = tmp_path / "c.toml"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back == cfg and back.digest() == cfg.digest()


def test_phase_seeds_are_stable_and_distinct():
    seeds = [phase_seed(0, p) for p in ("gen", "collect", "train")]
    assert len(set(seeds)) == 3
    assert phase_seed(0, "gen") == phase_seed(0, "gen")
    assert phase_seed(1, "gen") != phase_seed(0, "gen")
    assert ExperimentConfig(root_seed=3).seed("train") == phase_seed(3, "train")


@pytest.mark.parametrize("doc", [
    {"pipeline": {"kl_weight": -1.0}},
    {"pipeline": {"weights": [0.7, 0.7]}},
    {"pipeline": {"unknown": 1}},
    {"learner": {"learning_rate": 0.0}},
    {"family": {"kind": "maze"}},
    {"family": {"params": {"radius": 2}}},
    {"family": {"kind": "velocity_band"}, "evaluation": {"ood_radii": [1.2]}},
    {"extra": {}},
])
def test_invalid_configs_are_rejected(doc):
    with pytest.raises(ConfigurationError):
        config_from_dict(doc)


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "absent.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("root_seed = = 1\n")
    with pytest.raises(ConfigurationError):
        load_config(bad)
