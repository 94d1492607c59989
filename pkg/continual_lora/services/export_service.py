import hashlib
import io
import json
import re
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd
import plotly.graph_objects as go
import structlog

from continual_lora.core.exceptions import ScoreFileError
from continual_lora.models.schemas import CLReport, RunRecord, SimConfig, StrategyKind
from continual_lora.services.metrics import ScoreMatrix

logger = structlog.get_logger()

HEATMAP_COLUMNS = ["task_j", "after_k", "score"]
PathLike = Union[str, Path]


def config_digest(sim: SimConfig) -> str:
    """sha256 of the canonical JSON form of the simulator config"""
    canonical = json.dumps(sim.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise OSError(f"Cannot write {path}: {e}") from e


def _score_field(value: float) -> str:
    return "" if np.isnan(value) else repr(float(value))


class ExportService:
    """Serialization of score matrices, per-strategy reports and figures"""

    def heatmap_frame(self, sm: ScoreMatrix) -> pd.DataFrame:
        rows = [
            {"task_j": j + 1, "after_k": k + 1, "score": _score_field(sm.values[j, k])}
            for j in range(sm.T)
            for k in range(sm.T)
        ]
        return pd.DataFrame(rows, columns=HEATMAP_COLUMNS)

    def heatmap_csv(self, sm: ScoreMatrix) -> str:
        buffer = io.StringIO()
        self.heatmap_frame(sm).to_csv(buffer, index=False, lineterminator="\n")
        return buffer.getvalue()

    def export_heatmap(self, sm: ScoreMatrix, path: PathLike) -> Path:
        """One row per (task_j, after_k) cell; unevaluated cells have an empty score"""
        path = Path(path)
        _write_text(path, self.heatmap_csv(sm))
        logger.debug("Heatmap written", path=str(path), T=sm.T)
        return path

    def parse_heatmap(self, text: str, T: Optional[int] = None, source: str = "<string>") -> ScoreMatrix:
        try:
            frame = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False, skip_blank_lines=False)
        except pd.errors.EmptyDataError as e:
            raise ScoreFileError(f"{source} is empty", line=1) from e
        except pd.errors.ParserError as e:
            match = re.search(r"line (\d+)", str(e))
            raise ScoreFileError(f"{source}: {e}", line=int(match.group(1)) if match else None) from e

        if list(frame.columns) != HEATMAP_COLUMNS:
            raise ScoreFileError(f"{source}: header must be {','.join(HEATMAP_COLUMNS)}", line=1)

        # blank lines are kept as rows so offset + 2 is always the physical line
        cells: Dict[tuple, float] = {}
        for offset, row in enumerate(frame.itertuples(index=False)):
            line = offset + 2
            fields = (row.task_j, row.after_k, row.score)
            if not any(isinstance(value, str) for value in fields):
                raise ScoreFileError(f"{source}: blank line", line=line)
            if not all(isinstance(value, str) for value in fields):
                raise ScoreFileError(f"{source}: expected {len(HEATMAP_COLUMNS)} fields", line=line)
            try:
                j, k = int(row.task_j), int(row.after_k)
            except (TypeError, ValueError) as e:
                raise ScoreFileError(f"{source}: task_j and after_k must be integers", line=line) from e
            if j < 1 or k < 1:
                raise ScoreFileError(f"{source}: task indices are 1-based", line=line)
            if (j, k) in cells:
                raise ScoreFileError(f"{source}: duplicate cell ({j},{k})", line=line)
            raw = row.score
            if raw.strip() == "":
                value = float("nan")
            else:
                try:
                    value = float(raw)
                except ValueError as e:
                    raise ScoreFileError(f"{source}: score {raw!r} is not a number", line=line) from e
                if not np.isfinite(value) or abs(value) > 1.0:
                    raise ScoreFileError(f"{source}: score {raw} outside [-1, 1]", line=line)
            cells[(j, k)] = value

        size = T if T is not None else max((max(j, k) for j, k in cells), default=0)
        if size < 1:
            raise ScoreFileError(f"{source}: no score rows")
        sm = ScoreMatrix.empty(size)
        for (j, k), value in cells.items():
            if j > size or k > size:
                raise ScoreFileError(f"{source}: cell ({j},{k}) outside a {size}x{size} matrix")
            sm.values[j - 1, k - 1] = value
        return sm

    def load_heatmap(self, path: PathLike, T: Optional[int] = None) -> ScoreMatrix:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise OSError(f"Cannot read {path}: {e}") from e
        return self.parse_heatmap(text, T=T, source=str(path))

    def report_payload(
        self,
        strategy: StrategyKind,
        sim: SimConfig,
        records: Iterable[RunRecord],
        mean: Optional[CLReport],
        std: Optional[CLReport],
    ) -> Dict[str, Any]:
        runs = [
            record.model_dump(mode="json", exclude={"wall_time", "strategy"})
            for record in sorted(records, key=lambda r: r.key)
        ]
        return {
            "strategy": StrategyKind(strategy).value,
            "config_digest": config_digest(sim),
            "runs": runs,
            "mean": mean.model_dump(mode="json") if mean is not None else None,
            "std": std.model_dump(mode="json") if std is not None else None,
        }

    def export_report(
        self,
        strategy: StrategyKind,
        sim: SimConfig,
        records: Iterable[RunRecord],
        mean: Optional[CLReport],
        std: Optional[CLReport],
        path: PathLike,
    ) -> Path:
        """Aggregate JSON with stable key order; wall times are left out so reruns compare byte-equal"""
        path = Path(path)
        payload = self.report_payload(strategy, sim, records, mean, std)
        _write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")
        logger.debug("Report written", path=str(path), strategy=payload["strategy"], runs=len(payload["runs"]))
        return path

    def export_json(self, payload: Dict[str, Any], path: PathLike) -> Path:
        path = Path(path)
        _write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")
        return path

    def export_heatmap_figure(self, values: np.ndarray, path: PathLike, title: str = "Score matrix") -> Path:
        """Plotly heatmap of s[j][k]; rows are tasks, columns the training step"""
        path = Path(path)
        values = np.asarray(values, dtype=np.float64)
        labels = [str(i + 1) for i in range(values.shape[0])]
        figure = go.Figure(
            data=go.Heatmap(
                z=np.where(np.isnan(values), None, values).tolist(),
                x=labels,
                y=labels,
                colorscale="Viridis",
                zmin=-1.0,
                zmax=1.0,
                colorbar={"title": "score"},
            )
        )
        figure.update_layout(title=title, xaxis_title="after task k", yaxis_title="task j", yaxis_autorange="reversed")
        path.parent.mkdir(parents=True, exist_ok=True)
        figure.write_html(str(path), include_plotlyjs="cdn")
        return path

    def export_first_task_figure(
        self,
        curves: Dict[str, Sequence[float]],
        path: PathLike,
        base_score: Optional[float] = None,
        title: str = "Score on the first task during continual fine-tuning",
    ) -> Path:
        path = Path(path)
        figure = go.Figure()
        for name, curve in curves.items():
            figure.add_trace(
                go.Scatter(x=list(range(1, len(curve) + 1)), y=list(curve), mode="lines+markers", name=name)
            )
        if base_score is not None:
            figure.add_hline(y=base_score, line_dash="dash", annotation_text="base model")
        figure.update_layout(title=title, xaxis_title="after task k", yaxis_title="score")
        path.parent.mkdir(parents=True, exist_ok=True)
        figure.write_html(str(path), include_plotlyjs="cdn")
        return path


export_service = ExportService()
