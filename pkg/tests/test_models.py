"""
Tests for Pydantic models and configuration resolution
"""

import json

import pytest
from pydantic import ValidationError

from continual_lora.core.config import (
    Settings,
    build_experiment_config,
    dump_experiment_config,
    flatten_experiment_config,
    resolve_experiment_config,
)
from continual_lora.core.exceptions import ConfigError
from continual_lora.models.schemas import (
    CLReport,
    ExperimentConfig,
    InputMode,
    OrthMode,
    RunRecord,
    SimConfig,
    StrategyKind,
)


@pytest.mark.unit
class TestSimConfig:
    """Test simulator knobs"""

    def test_defaults(self):
        cfg = SimConfig()
        assert (cfg.m, cfg.n, cfg.r, cfg.r_task) == (64, 64, 4, 2)
        assert (cfg.delta, cfg.rho, cfg.T, cfg.lr, cfg.steps, cfg.batch, cfg.P) == (1.0, 0.6, 10, 0.05, 500, 1, 16)
        assert (cfg.inputs, cfg.background, cfg.base_norm, cfg.std_a) == (InputMode.TASK, 0.15, 4.0, 0.02)
        assert cfg.layer_names == ("layer0",)
        assert cfg.orth_mode is OrthMode.PROJECT

    def test_init_std_default_is_fan_in(self):
        assert SimConfig(n=16, m=16, std_a=None).init_std == pytest.approx(0.25)
        assert SimConfig(std_a=0.3).init_std == 0.3

    def test_rank_above_dimensions(self):
        with pytest.raises(ValidationError):
            SimConfig(m=4, n=8, r=5)

    def test_rho_range(self):
        with pytest.raises(ValidationError):
            SimConfig(rho=1.5)

    def test_task_directions_must_fit(self):
        with pytest.raises(ValidationError):
            SimConfig(m=8, n=8, r=2, r_task=5, rho=0.5)
        SimConfig(m=8, n=8, r=2, r_task=5, rho=1.0)

    def test_layers_one_or_four(self):
        assert SimConfig(layers=4).layer_names == ("q", "k", "v", "o")
        with pytest.raises(ValidationError):
            SimConfig(layers=2)

    def test_unknown_field(self):
        with pytest.raises(ValidationError):
            SimConfig(width=3)

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            SimConfig(scale=float("nan"))

    def test_evaluation_input_count(self):
        assert SimConfig(P=4, N_eval=3).probe_count == 12

    def test_input_mode(self):
        assert SimConfig(inputs="isotropic").inputs is InputMode.ISOTROPIC
        with pytest.raises(ValidationError):
            SimConfig(inputs="uniform")
        with pytest.raises(ValidationError):
            SimConfig(background=-0.1)


@pytest.mark.unit
class TestExperimentConfig:
    """Test sweep configuration"""

    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.strategies == list(StrategyKind)
        assert cfg.ordering_seeds == [0, 5, 10, 42]
        assert cfg.run_seeds == [0, 5]

    def test_duplicate_strategies_collapsed(self):
        cfg = ExperimentConfig(strategies=["naive", "naive", "magmax"])
        assert cfg.strategies == [StrategyKind.NAIVE, StrategyKind.MAGMAX]

    def test_empty_lists_rejected(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(strategies=[])
        with pytest.raises(ValidationError):
            ExperimentConfig(run_seeds=[])

    def test_negative_seed(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(ordering_seeds=[-1])

    def test_unknown_strategy(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(strategies=["ties"])


@pytest.mark.unit
class TestReports:
    """Test report and record models"""

    def test_negative_forgetting_rejected(self):
        with pytest.raises(ValidationError):
            CLReport(avg_score=0.5, avg_forgetting=-0.1, plasticity=0.5, per_task_final=[], first_task_curve=[])

    def test_record_key(self):
        record = RunRecord(strategy="magmax", ordering_seed=5, run_seed=0)
        assert record.key == ("magmax", 5, 0)


@pytest.mark.unit
class TestConfigResolution:
    """Test flat config files, presets and overrides"""

    def test_flat_keys(self):
        cfg = build_experiment_config({"rho": 0.3, "T": 4, "strategies": ["naive"]})
        assert cfg.sim.rho == 0.3
        assert cfg.sim.T == 4
        assert cfg.strategies == [StrategyKind.NAIVE]

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            build_experiment_config({"rho": 0.3, "colour": "red"})
        assert "colour" in str(exc.value)

    def test_invalid_value_becomes_config_error(self):
        with pytest.raises(ConfigError):
            build_experiment_config({"r": 0})

    def test_precedence(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"rho": 0.4, "T": 6}))
        cfg = resolve_experiment_config(path, overrides={"T": 3, "rho": None}, preset="style")
        assert cfg.sim.rho == 0.4
        assert cfg.sim.T == 3

    def test_preset_alone(self):
        assert resolve_experiment_config(preset="object").sim.rho == 0.2

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            resolve_experiment_config(preset="music")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            resolve_experiment_config(tmp_path / "absent.json")

    def test_bad_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{rho: 1")
        with pytest.raises(ConfigError):
            resolve_experiment_config(path)

    def test_non_object_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            resolve_experiment_config(path)

    def test_dump_round_trips(self):
        cfg = build_experiment_config({"rho": 0.3, "strategies": ["magmax"], "orth_mode": "svd_min"})
        again = build_experiment_config(json.loads(dump_experiment_config(cfg)))
        assert again == cfg
        assert flatten_experiment_config(again)["orth_mode"] == "svd_min"


@pytest.mark.unit
class TestSettings:
    """Test environment-driven settings"""

    def test_env_prefix(self, monkeypatch):
        monkeypatch.setenv("CLORA_LOG_LEVEL", "DEBUG")
        monkeypatch.setenv("CLORA_DEFAULT_JOBS", "3")
        settings = Settings()
        assert settings.log_level == "DEBUG"
        assert settings.default_jobs == 3
