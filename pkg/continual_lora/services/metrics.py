"""
Continual-learning metrics over a score matrix.

s[j][k] is the score on task j of the model trained through task k (both
1-based in files and reports, 0-based in arrays). Unevaluated cells are NaN
and are never imputed.

    average score      S_T = 1/T * sum_j s[j][T]
    average forgetting F_T = 1/(T-1) * sum_{j<T} max_{1<=k<=T} (s[j][k] - s[j][T])
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from continual_lora.core.exceptions import IncompleteDataError, ShapeError, UndefinedMetricError
from continual_lora.models.schemas import CLReport


@dataclass(eq=False)
class ScoreMatrix:
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 2 or values.shape[0] != values.shape[1] or values.shape[0] < 1:
            raise ShapeError(f"Score matrix must be square T x T with T >= 1, got shape {values.shape}")
        evaluated = values[~np.isnan(values)]
        if np.any(~np.isfinite(evaluated)) or np.any(np.abs(evaluated) > 1.0):
            raise ValueError("Evaluated scores must be finite and within [-1, 1]")
        self.values = values

    @classmethod
    def empty(cls, T: int) -> "ScoreMatrix":
        return cls(np.full((T, T), np.nan))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def filled_mask(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def set(self, j: int, k: int, value: float) -> None:
        """Record the score on task j after training through task k (0-based)"""
        if not (np.isfinite(value) and -1.0 <= value <= 1.0):
            raise ValueError(f"Score {value} outside [-1, 1]")
        self.values[j, k] = value

    def set_column(self, k: int, column: Sequence[float]) -> None:
        for j, value in enumerate(column):
            self.set(j, k, value)

    def missing(
        self, rows: Optional[Sequence[int]] = None, cols: Optional[Sequence[int]] = None
    ) -> List[Tuple[int, int]]:
        """Unevaluated (j, k) cells, 1-based, within the given 0-based rows/cols"""
        rows = range(self.T) if rows is None else rows
        cols = range(self.T) if cols is None else cols
        return [(j + 1, k + 1) for j in rows for k in cols if np.isnan(self.values[j, k])]

    def check_protocol(self) -> None:
        """Diagonal and final column must always be evaluated"""
        diagonal = {(j + 1, j + 1) for j in range(self.T) if np.isnan(self.values[j, j])}
        missing = sorted(set(self.missing(cols=[self.T - 1])) | diagonal)
        if missing:
            raise IncompleteDataError("Score matrix lacks protocol cells", missing)


def avg_score(sm: ScoreMatrix) -> float:
    missing = sm.missing(cols=[sm.T - 1])
    if missing:
        raise IncompleteDataError("Average score needs the full final column", missing)
    return float(np.mean(sm.values[:, -1]))


def avg_forgetting(sm: ScoreMatrix) -> float:
    T = sm.T
    if T < 2:
        raise UndefinedMetricError(f"Average forgetting needs T >= 2, got T={T}")
    missing = sm.missing(rows=range(T - 1))
    if missing:
        raise IncompleteDataError("Average forgetting needs every cell of rows 1..T-1", missing)
    rows = sm.values[: T - 1]
    gaps = np.max(rows - rows[:, -1:], axis=1)
    return float(np.sum(gaps) / (T - 1))


def plasticity(sm: ScoreMatrix) -> float:
    """Mean score on each task right after training it"""
    diagonal = np.diag(sm.values)
    missing = [(j + 1, j + 1) for j in range(sm.T) if np.isnan(diagonal[j])]
    if missing:
        raise IncompleteDataError("Plasticity needs the diagonal", missing)
    return float(np.mean(diagonal))


def first_task_curve(sm: ScoreMatrix) -> List[float]:
    missing = sm.missing(rows=[0])
    if missing:
        raise IncompleteDataError("First-task curve needs the whole first row", missing)
    return [float(v) for v in sm.values[0]]


def build_report(sm: ScoreMatrix, base_scores: Optional[Sequence[float]] = None) -> CLReport:
    return CLReport(
        avg_score=avg_score(sm),
        avg_forgetting=avg_forgetting(sm) if sm.T >= 2 else None,
        plasticity=plasticity(sm),
        base_score=float(np.mean(base_scores)) if base_scores is not None and len(base_scores) else None,
        per_task_final=[float(v) for v in sm.values[:, -1]],
        first_task_curve=first_task_curve(sm),
    )


def _report_key(report: CLReport) -> tuple:
    return (
        report.avg_score,
        -1.0 if report.avg_forgetting is None else report.avg_forgetting,
        report.plasticity,
        tuple(report.per_task_final),
        tuple(report.first_task_curve),
    )


def _mean_std(values: List[float]) -> Tuple[float, float]:
    arr = np.array(values, dtype=np.float64)
    return float(np.mean(arr)), float(np.std(arr))


def _optional_mean_std(values: List[Optional[float]]) -> Tuple[Optional[float], Optional[float]]:
    present = [v for v in values if v is not None]
    if not present:
        return None, None
    return _mean_std(present)


def aggregate_runs(reports: Sequence[CLReport]) -> Tuple[CLReport, CLReport]:
    """Elementwise mean and population std across runs; input order does not matter"""
    if not reports:
        raise ValueError("aggregate_runs needs at least one report")
    T = len(reports[0].per_task_final)
    if any(len(r.per_task_final) != T or len(r.first_task_curve) != T for r in reports):
        raise ShapeError("Cannot aggregate reports with different task counts")

    ordered = sorted(reports, key=_report_key)
    score_m, score_s = _mean_std([r.avg_score for r in ordered])
    forget_m, forget_s = _optional_mean_std([r.avg_forgetting for r in ordered])
    plast_m, plast_s = _mean_std([r.plasticity for r in ordered])
    base_m, base_s = _optional_mean_std([r.base_score for r in ordered])
    final = np.array([r.per_task_final for r in ordered], dtype=np.float64)
    curve = np.array([r.first_task_curve for r in ordered], dtype=np.float64)

    mean = CLReport(
        avg_score=score_m,
        avg_forgetting=forget_m,
        plasticity=plast_m,
        base_score=base_m,
        per_task_final=[float(v) for v in final.mean(axis=0)],
        first_task_curve=[float(v) for v in curve.mean(axis=0)],
    )
    std = CLReport(
        avg_score=score_s,
        avg_forgetting=forget_s,
        plasticity=plast_s,
        base_score=base_s,
        per_task_final=[float(v) for v in final.std(axis=0)],
        first_task_curve=[float(v) for v in curve.std(axis=0)],
    )
    return mean, std
