"""
Tests for sweep orchestration and result files
"""

import json

import numpy as np
import pytest

from continual_lora.main import main
from continual_lora.models.schemas import CLReport, ExperimentConfig, RunRecord, RunStatus, StrategyKind
from continual_lora.services import experiment_runner
from continual_lora.services.experiment_runner import (
    execute_run,
    qualitative_summary,
    resolve_jobs,
    run_alignment_sweep,
    run_experiment,
    run_sequence,
)
from continual_lora.services.export_service import export_service
from continual_lora.services.numkit import RNG_ALGORITHM
from continual_lora.services.simulator import score_with_flags


@pytest.mark.unit
class TestRunSequence:
    """Test one strategy over one task ordering"""

    @pytest.mark.parametrize("kind", list(StrategyKind))
    def test_full_matrix_evaluated(self, kind, small_sim_config):
        result = run_sequence(small_sim_config, kind, ordering_seed=0, run_seed=0)
        assert result.scores.T == small_sim_config.T
        assert result.scores.filled_mask.all()
        assert sorted(result.order) == list(range(small_sim_config.T))
        assert len(result.base_scores) == small_sim_config.T

    def test_deterministic(self, small_sim_config):
        first = run_sequence(small_sim_config, StrategyKind.MAGMAX, 5, 0)
        second = run_sequence(small_sim_config, StrategyKind.MAGMAX, 5, 0)
        assert np.array_equal(first.scores.values, second.scores.values)

    def test_strategies_share_the_first_task(self, small_sim_config):
        """Before any merge the first adapter is trained identically everywhere"""
        naive = run_sequence(small_sim_config, StrategyKind.NAIVE, 0, 0)
        merge_init = run_sequence(small_sim_config, StrategyKind.MERGE_INIT, 0, 0)
        assert np.array_equal(naive.scores.values[:, 0], merge_init.scores.values[:, 0])


@pytest.mark.unit
class TestExecuteRun:
    """Test per-run files"""

    def test_writes_scores_and_record(self, small_sim_config, tmp_path):
        record = execute_run(small_sim_config, StrategyKind.NAIVE, 0, 0, tmp_path)
        assert record.status is RunStatus.OK
        run_path = tmp_path / "naive" / "run_0_0"
        assert (run_path / "scores.csv").exists()
        saved = json.loads((run_path / "record.json").read_text())
        assert saved["strategy"] == "naive"
        assert record.scores_path == "run_0_0/scores.csv"
        assert len(record.diagonal) == small_sim_config.T

    def test_divergence_becomes_failed_record(self, small_sim_config, tmp_path):
        cfg = small_sim_config.model_copy(update={"lr": 50.0, "steps": 200})
        record = execute_run(cfg, StrategyKind.NAIVE, 0, 0, tmp_path)
        assert record.status is RunStatus.FAILED
        assert "DivergenceError" in record.error
        assert (tmp_path / "naive" / "run_0_0" / "record.json").exists()

    def test_degenerate_outputs_are_counted(self, small_sim_config, tmp_path, monkeypatch):
        def flag_everything(weights, task):
            value, _ = score_with_flags(weights, task)
            return value, 1

        monkeypatch.setattr(experiment_runner, "score_with_flags", flag_everything)
        record = execute_run(small_sim_config, StrategyKind.NAIVE, 0, 0, tmp_path)
        assert record.degenerate_probes == small_sim_config.T**2
        saved = json.loads((tmp_path / "naive" / "run_0_0" / "record.json").read_text())
        assert saved["degenerate_probes"] == small_sim_config.T**2

    def test_no_degenerate_outputs_on_a_normal_run(self, small_sim_config, tmp_path):
        record = execute_run(small_sim_config, StrategyKind.MERGE_INIT, 0, 0, tmp_path)
        assert record.degenerate_probes == 0


@pytest.mark.unit
class TestResolveJobs:
    def test_zero_means_all_processors(self):
        assert resolve_jobs(0) >= 1
        assert resolve_jobs(None) >= 1
        assert resolve_jobs(3) == 3


@pytest.mark.integration
@pytest.mark.slow
class TestRunExperiment:
    """Test the full protocol on a tiny world"""

    def test_output_tree(self, tiny_experiment):
        out = tiny_experiment.output_dir
        result = run_experiment(tiny_experiment, out, jobs=1, progress=False)
        assert len(result.records) == len(StrategyKind) * 2
        assert not result.failed
        for kind in StrategyKind:
            assert (out / kind.value / "aggregate.json").exists()
            assert (out / kind.value / "heatmap.html").exists()
            assert (out / kind.value / "run_5_0" / "scores.csv").exists()
        assert (out / "first_task.html").exists()

        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["failed"] == 0
        assert manifest["rng"] == RNG_ALGORITHM
        assert all(run["degenerate_probes"] == 0 for run in manifest["runs"])
        assert [run["scores_path"] for run in manifest["runs"]][0] == "magmax/run_0_0/scores.csv"

        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["checks"]) >= {"forgetting_order", "plasticity_sanity"}
        assert set(summary["strategies"]) == {kind.value for kind in StrategyKind}

    def test_rerun_is_byte_identical(self, tiny_experiment, tmp_path):
        first = tmp_path / "first"
        second = tmp_path / "second"
        run_experiment(tiny_experiment, first, jobs=1, progress=False, figures=False)
        run_experiment(tiny_experiment, second, jobs=1, progress=False, figures=False)
        for kind in StrategyKind:
            for name in ("aggregate.json", "run_0_0/scores.csv", "run_5_0/scores.csv"):
                assert (first / kind.value / name).read_bytes() == (second / kind.value / name).read_bytes()
        assert (first / "summary.json").read_bytes() == (second / "summary.json").read_bytes()

    def test_strategy_filter(self, tiny_experiment):
        config = tiny_experiment.model_copy(update={"strategies": [StrategyKind.MERGE_INIT]})
        out = tiny_experiment.output_dir
        result = run_experiment(config, out, jobs=1, progress=False, figures=False)
        assert {r.strategy for r in result.records} == {StrategyKind.MERGE_INIT}
        assert not (out / "naive").exists()
        assert result.summary["checks"]["forgetting_order"] is None

    def test_aggregate_matches_saved_scores(self, tiny_experiment):
        out = tiny_experiment.output_dir
        result = run_experiment(tiny_experiment, out, jobs=1, progress=False, figures=False)
        mean, _ = result.aggregates[StrategyKind.NAIVE]
        finals = [
            export_service.load_heatmap(out / "naive" / run / "scores.csv").values[:, -1].mean()
            for run in ("run_0_0", "run_5_0")
        ]
        assert mean.avg_score == pytest.approx(np.mean(finals), abs=1e-12)

    def test_alignment_sweep(self, tiny_experiment):
        config = tiny_experiment.model_copy(
            update={"strategies": [StrategyKind.MERGE_INIT, StrategyKind.MERGE_ORTH], "ordering_seeds": [0]}
        )
        out = tiny_experiment.output_dir
        payload = run_alignment_sweep(config, rhos=(0.0, 0.9), out_dir=out, jobs=1, progress=False)
        assert [point["rho"] for point in payload["points"]] == [0.0, 0.9]
        assert all(isinstance(point["gap"], float) for point in payload["points"])
        assert isinstance(payload["gap_non_decreasing"], bool)
        assert (out / "rho_0" / "merge_orth" / "aggregate.json").exists()
        assert (out / "rho_0.9" / "manifest.json").exists()
        assert json.loads((out / "alignment.json").read_text()) == payload

    def test_parallel_jobs_match_serial(self, tiny_experiment, tmp_path):
        serial = tmp_path / "serial"
        parallel = tmp_path / "parallel"
        run_experiment(tiny_experiment, serial, jobs=1, progress=False, figures=False)
        run_experiment(tiny_experiment, parallel, jobs=2, progress=False, figures=False)
        for kind in StrategyKind:
            for name in ("aggregate.json", "run_0_0/scores.csv", "run_5_0/scores.csv"):
                assert (serial / kind.value / name).read_bytes() == (parallel / kind.value / name).read_bytes()
        for name in ("summary.json", "manifest.json"):
            assert (serial / name).read_bytes() == (parallel / name).read_bytes()

    def test_default_protocol(self, tmp_path):
        """Default world: every run completes and the merge, score and retention checks hold"""
        config = ExperimentConfig(output_dir=tmp_path / "results")
        result = run_experiment(config, jobs=2, progress=False, figures=False)
        assert len(result.records) == 32
        assert not result.failed
        checks = result.summary["checks"]
        assert checks["score_merge_init_above_naive"] is True
        assert checks["score_naive_not_below_magmax"] is True
        assert checks["naive_first_task_returns_to_base"] is True
        assert checks["merge_init_first_task_above_naive"] is True
        fractions = result.summary["details"]["plasticity_sanity_fraction"]
        for kind in ("naive", "merge_init", "merge_orth"):
            assert fractions[kind] >= 0.95
        mean = {kind: result.aggregates[kind][0] for kind in StrategyKind}
        assert mean[StrategyKind.MERGE_INIT].avg_forgetting < mean[StrategyKind.NAIVE].avg_forgetting


def _report(avg_score, avg_forgetting, curve):
    return CLReport(
        avg_score=avg_score,
        avg_forgetting=avg_forgetting,
        plasticity=avg_score,
        base_score=0.5,
        per_task_final=list(curve),
        first_task_curve=list(curve),
    )


def _record(kind, diagonal, base_scores):
    return RunRecord(strategy=kind, ordering_seed=0, run_seed=0, diagonal=diagonal, base_scores=base_scores)


@pytest.mark.unit
class TestQualitativeSummary:
    """Test the ordering and retention checks on hand-built aggregates"""

    def test_plasticity_reported_per_strategy(self):
        records = [
            _record(StrategyKind.NAIVE, [0.9, 0.9, 0.9, 0.9], [0.5, 0.5, 0.5, 0.5]),
            _record(StrategyKind.MAGMAX, [0.9, 0.4, 0.4, 0.9], [0.5, 0.5, 0.5, 0.5]),
        ]
        report = _report(0.6, 0.1, [0.6, 0.6])
        aggregates = {kind: (report, report) for kind in (StrategyKind.NAIVE, StrategyKind.MAGMAX)}
        summary = qualitative_summary(records, aggregates)
        assert summary["details"]["plasticity_sanity_fraction"] == {"naive": 1.0, "magmax": 0.5}
        assert summary["checks"]["plasticity_sanity"] is False

    def test_plasticity_passes_when_every_strategy_passes(self):
        records = [
            _record(StrategyKind.NAIVE, [0.9] * 20, [0.5] * 20),
            _record(StrategyKind.MERGE_INIT, [0.9] * 19 + [0.1], [0.5] * 20),
        ]
        report = _report(0.6, 0.1, [0.6, 0.6])
        aggregates = {kind: (report, report) for kind in (StrategyKind.NAIVE, StrategyKind.MERGE_INIT)}
        summary = qualitative_summary(records, aggregates)
        assert summary["details"]["plasticity_sanity_fraction"]["merge_init"] == pytest.approx(0.95)
        assert summary["checks"]["plasticity_sanity"] is True

    def test_orderings_and_retention(self):
        records = [_record(kind, [0.9], [0.5]) for kind in StrategyKind]
        zero = _report(0.0, 0.0, [0.0, 0.0])
        aggregates = {
            StrategyKind.NAIVE: (_report(0.6, 0.3, [0.9, 0.55]), zero),
            StrategyKind.MERGE_INIT: (_report(0.8, 0.2, [0.9, 0.8]), zero),
            StrategyKind.MAGMAX: (_report(0.5, 0.1, [0.9, 0.7]), zero),
        }
        checks = qualitative_summary(records, aggregates)["checks"]
        assert checks["forgetting_order"] is True
        assert checks["score_merge_init_above_naive"] is True
        assert checks["score_naive_not_below_magmax"] is True
        assert checks["naive_first_task_returns_to_base"] is True
        assert checks["merge_init_first_task_above_naive"] is True


@pytest.mark.integration
@pytest.mark.slow
class TestRunCommandCounts:
    """Test how many runs and aggregates the run command writes"""

    def _run(self, tmp_path, small_sim_config, *extra):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(small_sim_config.model_dump(mode="json")))
        out = tmp_path / "results"
        argv = ["--log-level", "WARNING", "run", "--config", str(path), "--quiet", "--no-figures"]
        code = main([*argv, "--jobs", "2", "--out", str(out), *extra])
        return code, out

    def test_default_sweep(self, tmp_path, small_sim_config):
        code, out = self._run(tmp_path, small_sim_config)
        assert code == 0
        defaults = ExperimentConfig()
        expected = len(defaults.strategies) * len(defaults.ordering_seeds) * len(defaults.run_seeds)
        assert expected == 32
        assert len(list(out.glob("*/run_*/record.json"))) == expected
        assert len(list(out.glob("*/aggregate.json"))) == 4
        assert len(json.loads((out / "manifest.json").read_text())["runs"]) == expected

    def test_single_strategy(self, tmp_path, small_sim_config):
        code, out = self._run(tmp_path, small_sim_config, "--strategies", "naive")
        assert code == 0
        assert len(list(out.glob("*/run_*/record.json"))) == 8
        assert [p.parent.name for p in out.glob("*/aggregate.json")] == ["naive"]
