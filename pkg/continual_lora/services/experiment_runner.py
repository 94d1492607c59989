"""
Sweep orchestration: strategies x task orderings x run seeds.

Every run is an isolated deterministic computation keyed by
(strategy, ordering_seed, run_seed). Runs may execute in a process pool;
results are gathered behind a full barrier and aggregated in sorted key order,
so nothing written to disk depends on scheduling.
"""

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from tqdm import tqdm

from continual_lora.core.config import flatten_experiment_config
from continual_lora.core.exceptions import ContinualLoraError
from continual_lora.core.logging import configure_logging
from continual_lora.models.schemas import CLReport, ExperimentConfig, RunRecord, RunStatus, SimConfig, StrategyKind
from continual_lora.services.adapter import BaseWeights
from continual_lora.services.export_service import config_digest, export_service
from continual_lora.services.metrics import ScoreMatrix, aggregate_runs, build_report
from continual_lora.services.numkit import RNG_ALGORITHM
from continual_lora.services.simulator import (
    TaskSpec,
    build_world,
    init_rng,
    score,
    score_with_flags,
    task_order,
    train_adapter,
    train_rng,
)
from continual_lora.services.strategies import create_strategy

logger = structlog.get_logger()

RETENTION_MARGIN = 0.1
PLASTICITY_SANITY_FRACTION = 0.95
DEFAULT_ALIGNMENT_RHOS = (0.0, 0.5, 0.9)


@dataclass
class SequenceResult:
    scores: ScoreMatrix
    base_scores: List[float]
    order: List[int]
    degenerate_probes: int = 0


@dataclass
class ExperimentResult:
    records: List[RunRecord]
    aggregates: Dict[StrategyKind, Tuple[Optional[CLReport], Optional[CLReport]]] = field(default_factory=dict)
    summary: Dict = field(default_factory=dict)

    @property
    def failed(self) -> List[RunRecord]:
        return [r for r in self.records if r.status is RunStatus.FAILED]


def resolve_jobs(jobs: Optional[int]) -> int:
    if jobs is None or jobs <= 0:
        return os.cpu_count() or 1
    return jobs


def run_sequence(
    cfg: SimConfig,
    kind: StrategyKind,
    ordering_seed: int,
    run_seed: int,
    world: Optional[Tuple[BaseWeights, List[TaskSpec]]] = None,
) -> SequenceResult:
    """Drive one strategy through all T tasks, scoring every task after every step"""
    base, tasks = world if world is not None else build_world(cfg)
    order = task_order(cfg, ordering_seed)
    strategy = create_strategy(kind, base, cfg.r, std_a=cfg.init_std, scale=cfg.scale, orth_mode=cfg.orth_mode)
    sequence = [tasks[i] for i in order]

    sm = ScoreMatrix.empty(cfg.T)
    degenerate = 0
    for position, task in enumerate(sequence):
        ctx = strategy.begin_task(init_rng(cfg, ordering_seed, run_seed, position))
        trained = train_adapter(ctx, task, cfg, train_rng(cfg, ordering_seed, run_seed, position))
        strategy.end_task(trained)
        weights = strategy.final_weights()
        column = [score_with_flags(weights, scored) for scored in sequence]
        sm.set_column(position, [value for value, _ in column])
        degenerate += sum(flags for _, flags in column)

    sm.check_protocol()
    base_scores = [score(base, task) for task in sequence]
    if degenerate:
        logger.warning("Zero-vector outputs scored as 0", strategy=StrategyKind(kind).value, count=degenerate)
    return SequenceResult(scores=sm, base_scores=base_scores, order=order, degenerate_probes=degenerate)


def run_dir(out_dir: Path, kind: StrategyKind, ordering_seed: int, run_seed: int) -> Path:
    return Path(out_dir) / StrategyKind(kind).value / f"run_{ordering_seed}_{run_seed}"


def execute_run(cfg: SimConfig, kind: StrategyKind, ordering_seed: int, run_seed: int, out_dir: Path) -> RunRecord:
    """Run, write scores.csv and record.json, and return the record; toolkit errors become failed records"""
    kind = StrategyKind(kind)
    log = logger.bind(strategy=kind.value, ordering_seed=ordering_seed, run_seed=run_seed)
    started = time.perf_counter()
    target = run_dir(out_dir, kind, ordering_seed, run_seed)
    try:
        result = run_sequence(cfg, kind, ordering_seed, run_seed)
        export_service.export_heatmap(result.scores, target / "scores.csv")
        record = RunRecord(
            strategy=kind,
            ordering_seed=ordering_seed,
            run_seed=run_seed,
            order=result.order,
            base_scores=result.base_scores,
            diagonal=[float(v) for v in np.diag(result.scores.values)],
            report=build_report(result.scores, result.base_scores),
            scores_path=f"{target.name}/scores.csv",
            degenerate_probes=result.degenerate_probes,
        )
        log.info("Run finished", avg_score=record.report.avg_score, avg_forgetting=record.report.avg_forgetting)
    except ContinualLoraError as e:
        log.error("Run failed", error=str(e), error_type=type(e).__name__)
        record = RunRecord(
            strategy=kind,
            ordering_seed=ordering_seed,
            run_seed=run_seed,
            status=RunStatus.FAILED,
            error=f"{type(e).__name__}: {e}",
        )
    record.wall_time = time.perf_counter() - started
    export_service.export_json(record.model_dump(mode="json"), target / "record.json")
    return record


def _run_keys(config: ExperimentConfig) -> List[Tuple[StrategyKind, int, int]]:
    return [(kind, o, s) for kind in config.strategies for o in config.ordering_seeds for s in config.run_seeds]


def _worker_init(log_level: str, json_logs: bool) -> None:
    configure_logging(log_level, json_logs)


def execute_runs(
    config: ExperimentConfig,
    out_dir: Path,
    jobs: int = 1,
    progress: bool = True,
    log_level: str = "INFO",
    json_logs: bool = False,
) -> List[RunRecord]:
    keys = _run_keys(config)
    bar = tqdm(total=len(keys), desc="Runs", disable=not progress, unit="run")
    records: List[RunRecord] = []
    if jobs == 1:
        for kind, o, s in keys:
            records.append(execute_run(config.sim, kind, o, s, out_dir))
            bar.update(1)
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init, initargs=(log_level, json_logs)) as pool:
            futures = {pool.submit(execute_run, config.sim, kind, o, s, out_dir): (kind, o, s) for kind, o, s in keys}
            for future in as_completed(futures):
                kind, o, s = futures[future]
                try:
                    records.append(future.result())
                except Exception as e:
                    logger.error("Worker crashed", strategy=kind.value, ordering_seed=o, run_seed=s, error=str(e))
                    records.append(
                        RunRecord(
                            strategy=kind,
                            ordering_seed=o,
                            run_seed=s,
                            status=RunStatus.FAILED,
                            error=f"{type(e).__name__}: {e}",
                        )
                    )
                bar.update(1)
    bar.close()
    return sorted(records, key=lambda r: r.key)


def aggregate_strategy(records: Sequence[RunRecord]) -> Tuple[Optional[CLReport], Optional[CLReport]]:
    reports = [r.report for r in records if r.status is RunStatus.OK and r.report is not None]
    if not reports:
        return None, None
    return aggregate_runs(reports)


def _mean_matrix(out_dir: Path, kind: StrategyKind, records: Sequence[RunRecord]) -> Optional[np.ndarray]:
    matrices = [
        export_service.load_heatmap(Path(out_dir) / kind.value / r.scores_path).values
        for r in records
        if r.status is RunStatus.OK and r.scores_path
    ]
    if not matrices:
        return None
    return np.mean(np.stack(matrices), axis=0)


def _pooled_std(a: float, b: float) -> float:
    return math.sqrt((a * a + b * b) / 2.0)


def qualitative_summary(
    records: Sequence[RunRecord],
    aggregates: Dict[StrategyKind, Tuple[Optional[CLReport], Optional[CLReport]]],
) -> Dict:
    """Strategy orderings and retention checks; each is None when a strategy it needs did not run"""
    strategies = {}
    for kind, (mean, std) in aggregates.items():
        if mean is None:
            continue
        strategies[kind.value] = {
            "avg_score": [mean.avg_score, std.avg_score],
            "avg_forgetting": [mean.avg_forgetting, std.avg_forgetting],
            "plasticity": [mean.plasticity, std.plasticity],
            "base_score": [mean.base_score, std.base_score],
            "first_task_curve": mean.first_task_curve,
        }

    def get(kind: StrategyKind) -> Tuple[Optional[CLReport], Optional[CLReport]]:
        return aggregates.get(kind, (None, None))

    naive, naive_std = get(StrategyKind.NAIVE)
    merge_init, _ = get(StrategyKind.MERGE_INIT)
    magmax, magmax_std = get(StrategyKind.MAGMAX)

    checks: Dict[str, Optional[bool]] = {
        "forgetting_order": None,
        "score_merge_init_above_naive": None,
        "score_naive_not_below_magmax": None,
        "naive_first_task_returns_to_base": None,
        "merge_init_first_task_above_naive": None,
        "plasticity_sanity": None,
    }
    details: Dict[str, Any] = {}

    if naive and merge_init and magmax and None not in (
        naive.avg_forgetting,
        merge_init.avg_forgetting,
        magmax.avg_forgetting,
    ):
        checks["forgetting_order"] = magmax.avg_forgetting < merge_init.avg_forgetting < naive.avg_forgetting
    if naive and merge_init:
        checks["score_merge_init_above_naive"] = merge_init.avg_score > naive.avg_score
    if naive and magmax:
        allowance = _pooled_std(naive_std.avg_score, magmax_std.avg_score)
        details["score_magmax_allowance"] = allowance
        checks["score_naive_not_below_magmax"] = naive.avg_score >= magmax.avg_score - allowance

    ok = [r for r in records if r.status is RunStatus.OK]
    naive_runs = [r for r in ok if r.strategy is StrategyKind.NAIVE]
    if naive and naive_runs:
        base_first = float(np.mean([r.base_scores[0] for r in naive_runs]))
        details["base_first_task_score"] = base_first
        details["naive_first_task_end"] = naive.first_task_curve[-1]
        checks["naive_first_task_returns_to_base"] = abs(naive.first_task_curve[-1] - base_first) <= RETENTION_MARGIN
        if merge_init:
            details["merge_init_first_task_end"] = merge_init.first_task_curve[-1]
            checks["merge_init_first_task_above_naive"] = (
                merge_init.first_task_curve[-1] >= naive.first_task_curve[-1] + RETENTION_MARGIN
            )

    # every strategy must clear the threshold on its own
    fractions: Dict[str, float] = {}
    for kind in aggregates:
        cells = [(d, b) for r in ok if r.strategy is kind for d, b in zip(r.diagonal, r.base_scores)]
        if cells:
            fractions[kind.value] = sum(d >= b for d, b in cells) / len(cells)
    if fractions:
        details["plasticity_sanity_fraction"] = fractions
        checks["plasticity_sanity"] = min(fractions.values()) >= PLASTICITY_SANITY_FRACTION

    return {"strategies": strategies, "checks": checks, "details": details}


def run_experiment(
    config: ExperimentConfig,
    out_dir: Optional[Path] = None,
    jobs: Optional[int] = 1,
    progress: bool = True,
    figures: bool = True,
    log_level: str = "INFO",
    json_logs: bool = False,
) -> ExperimentResult:
    """Full protocol: all runs, per-strategy aggregate.json, manifest.json and summary.json"""
    out_dir = Path(out_dir if out_dir is not None else config.output_dir)
    jobs = resolve_jobs(jobs)
    logger.info(
        "Experiment started",
        strategies=[k.value for k in config.strategies],
        orderings=len(config.ordering_seeds),
        seeds=len(config.run_seeds),
        jobs=jobs,
        out=str(out_dir),
    )
    records = execute_runs(config, out_dir, jobs=jobs, progress=progress, log_level=log_level, json_logs=json_logs)

    result = ExperimentResult(records=records)
    grouped: Dict[StrategyKind, List[RunRecord]] = {kind: [] for kind in config.strategies}
    for record in records:
        grouped[record.strategy].append(record)

    for kind in config.strategies:
        mean, std = aggregate_strategy(grouped[kind])
        result.aggregates[kind] = (mean, std)
        export_service.export_report(
            kind, config.sim, grouped[kind], mean, std, out_dir / kind.value / "aggregate.json"
        )
        if figures:
            matrix = _mean_matrix(out_dir, kind, grouped[kind])
            if matrix is not None:
                export_service.export_heatmap_figure(
                    matrix, out_dir / kind.value / "heatmap.html", title=f"Mean score matrix: {kind.value}"
                )

    if figures:
        curves = {kind.value: mean.first_task_curve for kind, (mean, _) in result.aggregates.items() if mean}
        base_means = [mean.base_score for mean, _ in result.aggregates.values() if mean and mean.base_score is not None]
        if curves:
            export_service.export_first_task_figure(
                curves, out_dir / "first_task.html", base_score=float(np.mean(base_means)) if base_means else None
            )

    manifest = {
        "config": flatten_experiment_config(config),
        "config_digest": config_digest(config.sim),
        "rng": RNG_ALGORITHM,
        "runs": [
            {
                "strategy": r.strategy.value,
                "ordering_seed": r.ordering_seed,
                "run_seed": r.run_seed,
                "status": r.status.value,
                "error": r.error,
                "scores_path": f"{r.strategy.value}/{r.scores_path}" if r.scores_path else None,
                "degenerate_probes": r.degenerate_probes,
            }
            for r in records
        ],
        "failed": len(result.failed),
    }
    export_service.export_json(manifest, out_dir / "manifest.json")

    result.summary = qualitative_summary(records, result.aggregates)
    export_service.export_json(result.summary, out_dir / "summary.json")
    logger.info("Experiment finished", runs=len(records), failed=len(result.failed), out=str(out_dir))
    return result


def forgetting_gap(result: ExperimentResult) -> Optional[float]:
    """Mean forgetting of merge_orth minus merge_init"""
    orth, _ = result.aggregates.get(StrategyKind.MERGE_ORTH, (None, None))
    init, _ = result.aggregates.get(StrategyKind.MERGE_INIT, (None, None))
    if orth is None or init is None or orth.avg_forgetting is None or init.avg_forgetting is None:
        return None
    return orth.avg_forgetting - init.avg_forgetting


def run_alignment_sweep(
    config: ExperimentConfig,
    rhos: Sequence[float] = DEFAULT_ALIGNMENT_RHOS,
    out_dir: Optional[Path] = None,
    jobs: Optional[int] = 1,
    progress: bool = True,
    log_level: str = "INFO",
    json_logs: bool = False,
) -> Dict:
    """Repeat the protocol for each alignment rho and track the merge_orth - merge_init forgetting gap"""
    out_dir = Path(out_dir if out_dir is not None else config.output_dir)
    points = []
    failed = 0
    for rho in rhos:
        sim = SimConfig(**{**config.sim.model_dump(), "rho": rho})
        swept = config.model_copy(update={"sim": sim})
        result = run_experiment(
            swept,
            out_dir / f"rho_{rho:g}",
            jobs=jobs,
            progress=progress,
            figures=False,
            log_level=log_level,
            json_logs=json_logs,
        )
        failed += len(result.failed)
        points.append(
            {
                "rho": rho,
                "avg_forgetting": {
                    kind.value: mean.avg_forgetting for kind, (mean, _) in result.aggregates.items() if mean
                },
                "avg_score": {kind.value: mean.avg_score for kind, (mean, _) in result.aggregates.items() if mean},
                "gap": forgetting_gap(result),
            }
        )

    gaps = [p["gap"] for p in points]
    non_decreasing = None
    if gaps and None not in gaps:
        non_decreasing = all(later >= earlier for earlier, later in zip(gaps, gaps[1:]))
    payload = {"points": points, "gap_non_decreasing": non_decreasing, "failed": failed}
    export_service.export_json(payload, out_dir / "alignment.json")
    logger.info("Alignment sweep finished", rhos=list(rhos), gaps=gaps, non_decreasing=non_decreasing)
    return payload
