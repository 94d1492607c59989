"""
Desk-scale continual personalization testbed.

A frozen linear base model W0 maps inputs x in R^n to outputs in R^m. Each
task is a teacher W0 + D_t where D_t is a rank-r_task perturbation with
Frobenius norm delta; rows of its right factor mix a shared direction set
(weight rho) with fresh task-specific directions, so rho controls how aligned
the tasks are. A strategy's adapter is fitted to the teacher by plain SGD on
the squared output error, and models are scored by the mean cosine similarity
of their outputs to the teacher's outputs on frozen probe inputs.

With inputs="task" (the default) a task's inputs are x = z A*_t + b * xi with
z ~ N(0, I_r_task), xi ~ N(0, I_n) and b = cfg.background, and its probes are
z A*_t. Every layer of a task shares the same A*_t, so the inputs fed to all
layers stay common. With inputs="isotropic" both are plain N(0, I_n) draws.

Random streams are derived from SeedSequence([master_seed, stream, ...]):
tasks and W0 from (master_seed, STREAM_TASKS), the task ordering from
(master_seed, STREAM_ORDER, ordering_seed), and per-task adapter init and SGD
sampling from (master_seed, STREAM_INIT | STREAM_TRAIN, ordering_seed,
run_seed, task_position).
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import structlog

from continual_lora.core.exceptions import DivergenceError, ShapeError
from continual_lora.models.schemas import InputMode, SimConfig
from continual_lora.services.adapter import AdapterSet, BaseWeights, LoraAdapter
from continual_lora.services.numkit import cosine_with_flag, derive_rng, derive_seed_sequence, randn_matrix
from continual_lora.services.strategies import TrainContext

logger = structlog.get_logger()

STREAM_TASKS = 0
STREAM_ORDER = 1
STREAM_INIT = 2
STREAM_TRAIN = 3


@dataclass(frozen=True, eq=False)
class TaskSpec:
    index: int
    teacher_deltas: Dict[str, np.ndarray]
    targets: Dict[str, np.ndarray]
    probes: np.ndarray
    train_seed: int
    # r_task x n rows of A*_t
    directions: Optional[np.ndarray] = None

    @property
    def teacher_delta(self) -> np.ndarray:
        """Teacher perturbation of the first (single) layer"""
        return next(iter(self.teacher_deltas.values()))


@dataclass
class TrainResult:
    adapters: AdapterSet
    initial_loss: float
    final_loss: float
    steps: int
    loss_history: List[float] = field(default_factory=list)


def make_base_weights(cfg: SimConfig, rng: np.random.Generator) -> BaseWeights:
    """Gaussian W0 per layer, rescaled to Frobenius norm cfg.base_norm"""
    layers = []
    for name in cfg.layer_names:
        w = randn_matrix(rng, cfg.m, cfg.n, 1.0)
        layers.append((name, w * (cfg.base_norm / np.linalg.norm(w))))
    return BaseWeights(tuple(layers))


def _shared_directions(rng: np.random.Generator, r_task: int, n: int) -> np.ndarray:
    q, _ = np.linalg.qr(randn_matrix(rng, n, r_task, 1.0))
    return q.T.copy()


def _task_directions(rng: np.random.Generator, cfg: SimConfig, shared: np.ndarray) -> np.ndarray:
    g = randn_matrix(rng, cfg.r_task, cfg.n, 1.0)
    g = g - (g @ shared.T) @ shared
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return cfg.rho * shared + np.sqrt(max(0.0, 1.0 - cfg.rho**2)) * g


def _teacher_delta(rng: np.random.Generator, cfg: SimConfig, a_star: np.ndarray) -> np.ndarray:
    b_star = randn_matrix(rng, cfg.m, cfg.r_task, 1.0)
    d = b_star @ a_star
    return d * (cfg.delta / np.linalg.norm(d))


def generate_tasks(cfg: SimConfig, rng: np.random.Generator, base: BaseWeights) -> List[TaskSpec]:
    """T tasks sharing one direction set; alignment set by cfg.rho"""
    shared = _shared_directions(rng, cfg.r_task, cfg.n)
    tasks = []
    for index in range(cfg.T):
        a_star = _task_directions(rng, cfg, shared)
        deltas = {name: _teacher_delta(rng, cfg, a_star) for name in cfg.layer_names}
        if cfg.inputs is InputMode.TASK:
            probes = randn_matrix(rng, cfg.probe_count, cfg.r_task, 1.0) @ a_star
        else:
            probes = randn_matrix(rng, cfg.probe_count, cfg.n, 1.0)
        train_seed = int(derive_seed_sequence(cfg.master_seed, STREAM_TRAIN, index).generate_state(1)[0])
        tasks.append(
            TaskSpec(
                index=index,
                teacher_deltas=deltas,
                targets={name: base[name] + d for name, d in deltas.items()},
                probes=probes,
                train_seed=train_seed,
                directions=a_star,
            )
        )
    logger.debug("Tasks generated", count=len(tasks), rho=cfg.rho, delta=cfg.delta)
    return tasks


def build_world(cfg: SimConfig) -> Tuple[BaseWeights, List[TaskSpec]]:
    """W0 and the task set, both fixed by master_seed alone"""
    rng = derive_rng(cfg.master_seed, STREAM_TASKS)
    base = make_base_weights(cfg, rng)
    return base, generate_tasks(cfg, rng, base)


def task_order(cfg: SimConfig, ordering_seed: int) -> List[int]:
    """Fisher-Yates permutation of the fixed task set"""
    rng = derive_rng(cfg.master_seed, STREAM_ORDER, ordering_seed)
    return [int(i) for i in rng.permutation(cfg.T)]


def init_rng(cfg: SimConfig, ordering_seed: int, run_seed: int, position: int) -> np.random.Generator:
    return derive_rng(cfg.master_seed, STREAM_INIT, ordering_seed, run_seed, position)


def train_rng(cfg: SimConfig, ordering_seed: int, run_seed: int, position: int) -> np.random.Generator:
    return derive_rng(cfg.master_seed, STREAM_TRAIN, ordering_seed, run_seed, position)


def lora_loss_and_grads(
    residual: np.ndarray, a: np.ndarray, b: np.ndarray, scale: float, x: np.ndarray
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Batch-mean squared error of (residual + s*B*A) x over the rows of x, with analytic gradients.

    residual = W_eff - W_target. Per example: dL/dB = 2s e (Ax)^T, dL/dA = 2s B^T e x^T.
    """
    batch = x.shape[0]
    ax = x @ a.T
    e = x @ residual.T + scale * (ax @ b.T)
    loss = float(np.sum(e * e)) / batch
    grad_b = (2.0 * scale / batch) * (e.T @ ax)
    grad_a = (2.0 * scale / batch) * (b.T @ (e.T @ x))
    return loss, grad_a, grad_b


def sample_inputs(rng: np.random.Generator, task: TaskSpec, cfg: SimConfig, count: int) -> np.ndarray:
    """count training inputs, one per row"""
    if cfg.inputs is InputMode.ISOTROPIC or task.directions is None:
        return rng.standard_normal((count, cfg.n))
    z = rng.standard_normal((count, task.directions.shape[0]))
    return z @ task.directions + cfg.background * rng.standard_normal((count, cfg.n))


def input_covariance(task: TaskSpec, cfg: SimConfig) -> Optional[np.ndarray]:
    """E[x x^T] of sample_inputs, or None for the identity"""
    if cfg.inputs is InputMode.ISOTROPIC or task.directions is None:
        return None
    return task.directions.T @ task.directions + cfg.background**2 * np.eye(cfg.n)


def population_loss(residual: np.ndarray, adapter: LoraAdapter, covariance: Optional[np.ndarray] = None) -> float:
    """Expected loss tr(E C E^T) of the output error map E; C = I gives its squared Frobenius norm"""
    err = residual + adapter.scale * (adapter.b @ adapter.a)
    if covariance is None:
        return float(np.sum(err * err))
    return float(np.sum((err @ covariance) * err))


def train_adapter_with_stats(
    ctx: TrainContext,
    task: TaskSpec,
    cfg: SimConfig,
    rng: Optional[np.random.Generator] = None,
    record_every: int = 0,
) -> TrainResult:
    """cfg.steps SGD steps on every layer of ctx.trainable; inputs shared across layers"""
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(task.train_seed))
    names = list(ctx.trainable)
    residuals = {}
    for name in names:
        w_eff = ctx.effective_base[name]
        target = task.targets[name]
        if w_eff.shape != target.shape or ctx.trainable[name].shape != w_eff.shape:
            raise ShapeError(
                f"Layer {name}: base {w_eff.shape}, target {target.shape}, adapter {ctx.trainable[name].shape}"
            )
        residuals[name] = w_eff - target

    factors = {name: (ctx.trainable[name].a.copy(), ctx.trainable[name].b.copy()) for name in names}
    scales = {name: ctx.trainable[name].scale for name in names}

    covariance = input_covariance(task, cfg)
    initial_loss = sum(population_loss(residuals[name], ctx.trainable[name], covariance) for name in names)
    ceiling = cfg.divergence_factor * max(initial_loss, 1e-12)
    history: List[float] = []

    for step in range(1, cfg.steps + 1):
        x = sample_inputs(rng, task, cfg, cfg.batch)
        step_loss = 0.0
        for name in names:
            a, b = factors[name]
            loss, grad_a, grad_b = lora_loss_and_grads(residuals[name], a, b, scales[name], x)
            factors[name] = (a - cfg.lr * grad_a, b - cfg.lr * grad_b)
            step_loss += loss
        if not np.isfinite(step_loss) or step_loss > ceiling:
            logger.error(
                "Training diverged", task=task.index, step=step, loss=step_loss, initial_loss=initial_loss, lr=cfg.lr
            )
            raise DivergenceError(
                f"Loss {step_loss:.3e} at step {step} exceeds "
                f"{cfg.divergence_factor:g}x initial loss {initial_loss:.3e}",
                step=step,
                loss=step_loss,
                initial_loss=initial_loss,
            )
        if record_every and step % record_every == 0:
            history.append(step_loss)

    trained = {
        name: LoraAdapter(a=factors[name][0], b=factors[name][1], scale=scales[name], name=name) for name in names
    }
    final_loss = sum(population_loss(residuals[name], trained[name], covariance) for name in names)
    logger.debug("Adapter trained", task=task.index, initial_loss=initial_loss, final_loss=final_loss)
    return TrainResult(
        adapters=trained, initial_loss=initial_loss, final_loss=final_loss, steps=cfg.steps, loss_history=history
    )


def train_adapter(
    ctx: TrainContext, task: TaskSpec, cfg: SimConfig, rng: Optional[np.random.Generator] = None
) -> AdapterSet:
    return train_adapter_with_stats(ctx, task, cfg, rng).adapters


def score_with_flags(weights: BaseWeights, task: TaskSpec) -> Tuple[float, int]:
    """Mean output cosine to the teacher over probes and layers, plus the count of zero-vector probes"""
    if task.probes.shape[0] == 0:
        raise ShapeError("Task has no probes")
    layer_scores = []
    degenerate = 0
    for name, target in task.targets.items():
        w = weights[name]
        student_out = task.probes @ w.T
        teacher_out = task.probes @ target.T
        values = []
        for ys, yt in zip(student_out, teacher_out):
            value, flagged = cosine_with_flag(ys, yt)
            values.append(value)
            degenerate += int(flagged)
        layer_scores.append(float(np.mean(values)))
    return float(np.mean(layer_scores)), degenerate


def score(weights: BaseWeights, task: TaskSpec) -> float:
    return score_with_flags(weights, task)[0]
