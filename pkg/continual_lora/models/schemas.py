from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StrategyKind(str, Enum):
    NAIVE = "naive"
    MERGE_INIT = "merge_init"
    MERGE_ORTH = "merge_orth"
    MAGMAX = "magmax"


class OrthMode(str, Enum):
    PROJECT = "project"
    SVD_MIN = "svd_min"


class InputMode(str, Enum):
    TASK = "task"
    ISOTROPIC = "isotropic"


class RunStatus(str, Enum):
    OK = "ok"
    FAILED = "failed"


ALL_STRATEGIES: List[StrategyKind] = list(StrategyKind)

# Task-family presets: object tasks are nearly orthogonal, style tasks share directions
PRESETS: Dict[str, Dict[str, float]] = {
    "object": {"rho": 0.2},
    "style": {"rho": 0.8},
}

LAYER_NAMES_SINGLE = ("layer0",)
LAYER_NAMES_ATTENTION = ("q", "k", "v", "o")


class SimConfig(BaseModel):
    """Knobs of the desk-scale continual personalization simulator"""

    model_config = ConfigDict(extra="forbid", populate_by_name=True, allow_inf_nan=False)

    m: int = Field(64, ge=1)
    n: int = Field(64, ge=1)
    r: int = Field(4, ge=1)
    r_task: int = Field(2, ge=1)
    delta: float = Field(1.0, gt=0.0)
    rho: float = Field(0.6, ge=0.0, le=1.0)
    T: int = Field(10, ge=1)
    lr: float = Field(0.05, gt=0.0)
    steps: int = Field(500, ge=1)
    batch: int = Field(1, ge=1)
    P: int = Field(16, ge=1)
    N_eval: int = Field(1, ge=1)
    master_seed: int = Field(0, ge=0)
    layers: int = 1
    std_a: Optional[float] = Field(0.02, ge=0.0)
    scale: float = 1.0
    orth_mode: OrthMode = OrthMode.PROJECT
    base_norm: float = Field(4.0, gt=0.0)
    # task: x = z A*_t + background * noise over the task directions; isotropic: x ~ N(0, I)
    inputs: InputMode = InputMode.TASK
    background: float = Field(0.15, ge=0.0)
    divergence_factor: float = Field(1e6, gt=1.0)

    @field_validator("layers")
    @classmethod
    def check_layers(cls, v):
        if v not in (1, 4):
            raise ValueError("layers must be 1 or 4")
        return v

    @model_validator(mode="after")
    def check_ranks(self):
        if self.r > min(self.m, self.n):
            raise ValueError(f"r={self.r} must not exceed min(m, n)={min(self.m, self.n)}")
        if self.r_task > min(self.m, self.n):
            raise ValueError(f"r_task={self.r_task} must not exceed min(m, n)={min(self.m, self.n)}")
        # shared directions plus per-task directions must fit in the input space
        if self.r_task * 2 > self.n and self.rho < 1.0:
            raise ValueError(f"2*r_task={2 * self.r_task} must not exceed n={self.n} unless rho == 1")
        return self

    @property
    def layer_names(self) -> tuple:
        return LAYER_NAMES_SINGLE if self.layers == 1 else LAYER_NAMES_ATTENTION

    @property
    def init_std(self) -> float:
        """A init std used by the simulator: explicit value or 1/sqrt(n) fan-in default"""
        if self.std_a is not None:
            return self.std_a
        return 1.0 / self.n**0.5

    @property
    def probe_count(self) -> int:
        return self.P * self.N_eval


class ExperimentConfig(BaseModel):
    """Full sweep: strategies x task orderings x run seeds"""

    model_config = ConfigDict(extra="forbid")

    sim: SimConfig = Field(default_factory=SimConfig)
    strategies: List[StrategyKind] = Field(default_factory=lambda: list(ALL_STRATEGIES), min_length=1)
    ordering_seeds: List[int] = Field(default_factory=lambda: [0, 5, 10, 42], min_length=1)
    run_seeds: List[int] = Field(default_factory=lambda: [0, 5], min_length=1)
    output_dir: Path = Path("results")

    @field_validator("strategies")
    @classmethod
    def unique_strategies(cls, v):
        seen = []
        for kind in v:
            if kind not in seen:
                seen.append(kind)
        return seen

    @field_validator("ordering_seeds", "run_seeds")
    @classmethod
    def non_negative_seeds(cls, v):
        if any(seed < 0 for seed in v):
            raise ValueError("seeds must be non-negative")
        return v


class CLReport(BaseModel):
    """Continual-learning summary of one score matrix"""

    avg_score: float
    avg_forgetting: Optional[float] = None
    plasticity: float
    base_score: Optional[float] = None
    per_task_final: List[float]
    first_task_curve: List[float]

    @field_validator("avg_forgetting")
    @classmethod
    def forgetting_non_negative(cls, v):
        if v is not None and v < 0:
            raise ValueError("avg_forgetting must be >= 0")
        return v


class RunRecord(BaseModel):
    strategy: StrategyKind
    ordering_seed: int
    run_seed: int
    order: List[int] = []
    # score of W0 and of the just-trained model on each task, in training order
    base_scores: List[float] = []
    diagonal: List[float] = []
    # zero-vector outputs scored as cosine 0 across the whole score matrix
    degenerate_probes: int = 0
    status: RunStatus = RunStatus.OK
    report: Optional[CLReport] = None
    scores_path: Optional[str] = None
    error: Optional[str] = None
    wall_time: float = 0.0

    @property
    def key(self) -> tuple:
        return (self.strategy.value, self.ordering_seed, self.run_seed)
