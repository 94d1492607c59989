from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import ClassVar, Dict, Mapping, Optional, Sequence, Tuple, Type, Union

import numpy as np
import structlog

from continual_lora.core.exceptions import ConfigError, ContractError, ShapeError
from continual_lora.models.schemas import OrthMode, StrategyKind
from continual_lora.services.adapter import (
    AdapterSet,
    BaseWeights,
    LoraAdapter,
    init_orthogonal,
    init_standard,
    merge_weights,
    zero_adapter,
)

logger = structlog.get_logger()


def magmax_select(prev: np.ndarray, new: np.ndarray) -> np.ndarray:
    """Elementwise pick of the larger-magnitude entry, sign kept; ties keep prev"""
    prev = np.asarray(prev, dtype=np.float64)
    new = np.asarray(new, dtype=np.float64)
    if prev.shape != new.shape:
        raise ShapeError(f"MagMax selection needs equal shapes, got {prev.shape} and {new.shape}")
    return np.where(np.abs(new) > np.abs(prev), new, prev)


@dataclass(frozen=True, eq=False)
class StrategyState:
    """Everything carried between tasks. Never holds more than W0, one merged copy and one adapter set"""

    kind: StrategyKind
    base: BaseWeights
    carried_merged: Optional[BaseWeights] = None
    live_adapter: Optional[AdapterSet] = None
    acc_adapter: Optional[AdapterSet] = None
    task_index: int = 0
    in_task: bool = False


@dataclass(frozen=True)
class TrainContext:
    """The student during one task is effective_base + delta(trainable)"""

    effective_base: BaseWeights
    trainable: AdapterSet


TrainedAdapters = Union[LoraAdapter, Mapping[str, LoraAdapter]]


class ContinualStrategy(ABC):
    """One continual personalization method: begin_task -> (external training) -> end_task, repeated"""

    kind: ClassVar[StrategyKind]
    # which optional StrategyState fields this kind carries
    carries: ClassVar[Tuple[str, ...]] = ()

    def __init__(
        self,
        base: BaseWeights,
        rank: int,
        std_a: Optional[float] = None,
        scale: float = 1.0,
        orth_mode: Union[OrthMode, str] = OrthMode.PROJECT,
    ):
        self.rank = rank
        self.std_a = std_a
        self.scale = scale
        self.orth_mode = OrthMode(orth_mode)
        self.state = self.initial_state(base)
        self._check_state()

    @abstractmethod
    def initial_state(self, base: BaseWeights) -> StrategyState:
        pass

    @abstractmethod
    def _context(self, rng: np.random.Generator) -> TrainContext:
        pass

    @abstractmethod
    def _absorb(self, trained: AdapterSet) -> StrategyState:
        pass

    @abstractmethod
    def _final(self) -> BaseWeights:
        pass

    @property
    def base(self) -> BaseWeights:
        return self.state.base

    def _fresh_adapters(self, rng: np.random.Generator) -> AdapterSet:
        return {
            name: init_standard(rng, w.shape[0], w.shape[1], self.rank, std_a=self.std_a, scale=self.scale, name=name)
            for name, w in self.base
        }

    def _zero_adapters_for(self, base: BaseWeights) -> AdapterSet:
        return {name: zero_adapter(w.shape[0], w.shape[1], self.rank, scale=self.scale, name=name) for name, w in base}

    def _check_state(self) -> None:
        state = self.state
        if state.kind is not self.kind:
            raise ContractError(f"State of kind {state.kind.value} driven by {self.kind.value} strategy")
        for field_name in ("carried_merged", "live_adapter", "acc_adapter"):
            present = getattr(state, field_name) is not None
            required = field_name in self.carries
            if field_name == "live_adapter" and required:
                # the live adapter exists only once a task has completed
                required = state.task_index > 0
            if present != required:
                raise ContractError(
                    f"{self.kind.value} state after {state.task_index} tasks "
                    f"{'must not carry' if present else 'is missing'} {field_name}"
                )

    def _normalize_trained(self, trained: TrainedAdapters) -> AdapterSet:
        adapters = {trained.name: trained} if isinstance(trained, LoraAdapter) else dict(trained)
        if set(adapters) != set(self.base.names):
            raise ShapeError(f"Trained adapters cover {sorted(adapters)}, expected {sorted(self.base.names)}")
        for name, w in self.base:
            adapter = adapters[name]
            if adapter.shape != w.shape or adapter.rank != self.rank:
                raise ShapeError(
                    f"Trained adapter {name}: shape {adapter.shape} rank {adapter.rank}, "
                    f"expected shape {w.shape} rank {self.rank}"
                )
        return {name: adapters[name] for name in self.base.names}

    def begin_task(self, rng: np.random.Generator) -> TrainContext:
        self._check_state()
        if self.state.in_task:
            raise ContractError(f"begin_task called twice without end_task (task {self.state.task_index + 1})")
        context = self._context(rng)
        self.state = replace(self.state, in_task=True)
        logger.debug("Task started", strategy=self.kind.value, task=self.state.task_index + 1)
        return context

    def end_task(self, trained: TrainedAdapters) -> StrategyState:
        self._check_state()
        if not self.state.in_task:
            raise ContractError(f"end_task called without begin_task (after task {self.state.task_index})")
        adapters = self._normalize_trained(trained)
        absorbed = self._absorb(adapters)
        self.state = replace(absorbed, task_index=self.state.task_index + 1, in_task=False)
        self._check_state()
        logger.debug("Task finished", strategy=self.kind.value, task=self.state.task_index)
        return self.state

    def final_weights(self) -> BaseWeights:
        """Model after the completed tasks; never mutates state"""
        self._check_state()
        if self.state.task_index == 0:
            raise ContractError("final_weights needs at least one completed task")
        return self._final()


class NaiveStrategy(ContinualStrategy):
    """One adapter trained continually against W0, merged only at the end"""

    kind = StrategyKind.NAIVE
    carries = ("live_adapter",)

    def initial_state(self, base: BaseWeights) -> StrategyState:
        return StrategyState(kind=self.kind, base=base)

    def _context(self, rng: np.random.Generator) -> TrainContext:
        live = self.state.live_adapter
        trainable = self._fresh_adapters(rng) if live is None else dict(live)
        return TrainContext(effective_base=self.base, trainable=trainable)

    def _absorb(self, trained: AdapterSet) -> StrategyState:
        return replace(self.state, live_adapter=trained)

    def _final(self) -> BaseWeights:
        return merge_weights(self.base, self.state.live_adapter)


class MergeInitStrategy(ContinualStrategy):
    """Merge every trained adapter into the carried weights, then reinitialize"""

    kind = StrategyKind.MERGE_INIT
    carries = ("carried_merged",)

    def initial_state(self, base: BaseWeights) -> StrategyState:
        return StrategyState(kind=self.kind, base=base, carried_merged=base)

    def _context(self, rng: np.random.Generator) -> TrainContext:
        return TrainContext(effective_base=self.state.carried_merged, trainable=self._fresh_adapters(rng))

    def _absorb(self, trained: AdapterSet) -> StrategyState:
        return replace(self.state, carried_merged=merge_weights(self.state.carried_merged, trained))

    def _final(self) -> BaseWeights:
        return self.state.carried_merged


class MergeOrthStrategy(ContinualStrategy):
    """Merge and reinitialize A orthogonal to the running sum of previous A factors"""

    kind = StrategyKind.MERGE_ORTH
    carries = ("carried_merged", "acc_adapter")

    def initial_state(self, base: BaseWeights) -> StrategyState:
        return StrategyState(kind=self.kind, base=base, carried_merged=base, acc_adapter=self._zero_adapters_for(base))

    def _context(self, rng: np.random.Generator) -> TrainContext:
        if self.state.task_index == 0:
            trainable = self._fresh_adapters(rng)
        else:
            trainable = {
                name: init_orthogonal(
                    rng,
                    self.state.acc_adapter[name].a,
                    w.shape[0],
                    w.shape[1],
                    self.rank,
                    std_a=self.std_a,
                    mode=self.orth_mode,
                    scale=self.scale,
                    name=name,
                )
                for name, w in self.base
            }
        return TrainContext(effective_base=self.state.carried_merged, trainable=trainable)

    def _absorb(self, trained: AdapterSet) -> StrategyState:
        acc = {
            name: self.state.acc_adapter[name].replace(a=self.state.acc_adapter[name].a + trained[name].a)
            for name in self.base.names
        }
        return replace(
            self.state,
            carried_merged=merge_weights(self.state.carried_merged, trained),
            acc_adapter=acc,
        )

    def _final(self) -> BaseWeights:
        return self.state.carried_merged


class MagMaxStrategy(ContinualStrategy):
    """Keep a single selected adapter; after each task pick max-magnitude entries of A and B"""

    kind = StrategyKind.MAGMAX
    carries = ("acc_adapter",)

    def initial_state(self, base: BaseWeights) -> StrategyState:
        return StrategyState(kind=self.kind, base=base, acc_adapter=self._zero_adapters_for(base))

    def _context(self, rng: np.random.Generator) -> TrainContext:
        # selected adapters are merged into the frozen base only for the duration of the task
        effective = merge_weights(self.base, self.state.acc_adapter)
        return TrainContext(effective_base=effective, trainable=self._fresh_adapters(rng))

    def _absorb(self, trained: AdapterSet) -> StrategyState:
        acc = {}
        for name in self.base.names:
            prev, new = self.state.acc_adapter[name], trained[name]
            acc[name] = LoraAdapter(
                a=magmax_select(prev.a, new.a),
                b=magmax_select(prev.b, new.b),
                scale=new.scale,
                name=name,
            )
        return replace(self.state, acc_adapter=acc)

    def _final(self) -> BaseWeights:
        return merge_weights(self.base, self.state.acc_adapter)


STRATEGIES: Dict[StrategyKind, Type[ContinualStrategy]] = {
    StrategyKind.NAIVE: NaiveStrategy,
    StrategyKind.MERGE_INIT: MergeInitStrategy,
    StrategyKind.MERGE_ORTH: MergeOrthStrategy,
    StrategyKind.MAGMAX: MagMaxStrategy,
}


def create_strategy(
    kind: Union[StrategyKind, str],
    base: BaseWeights,
    rank: int,
    std_a: Optional[float] = None,
    scale: float = 1.0,
    orth_mode: Union[OrthMode, str] = OrthMode.PROJECT,
) -> ContinualStrategy:
    return STRATEGIES[StrategyKind(kind)](base, rank, std_a=std_a, scale=scale, orth_mode=orth_mode)


def merge_adapter_sets(
    base: BaseWeights,
    adapter_sets: Sequence[AdapterSet],
    kind: Union[StrategyKind, str] = StrategyKind.MERGE_INIT,
    labels: Optional[Sequence[str]] = None,
) -> BaseWeights:
    """Offline merge of independently saved adapters.

    magmax selects A and B elementwise across all adapters (in order) and merges
    the selection once; every other kind adds the deltas one after another.
    """
    if not adapter_sets:
        raise ConfigError("At least one adapter is needed to merge")
    kind = StrategyKind(kind)
    labels = list(labels) if labels is not None else [f"adapter {i + 1}" for i in range(len(adapter_sets))]

    for label, adapters in zip(labels, adapter_sets):
        unknown = sorted(set(adapters) - set(base.names))
        if unknown:
            raise ShapeError(f"{label}: no base weight for layers {unknown} (have {list(base.names)})")
        for name, adapter in adapters.items():
            if adapter.shape != base[name].shape:
                raise ShapeError(
                    f"{label}: {name}.lora_B @ {name}.lora_A has shape {adapter.shape}, "
                    f"but {name}.weight is {base[name].shape}"
                )

    if kind is not StrategyKind.MAGMAX:
        merged = base
        for adapters in adapter_sets:
            merged = merge_weights(merged, adapters)
        return merged

    selected: Dict[str, LoraAdapter] = {}
    for label, adapters in zip(labels, adapter_sets):
        for name, new in adapters.items():
            prev = selected.get(name)
            if prev is None:
                selected[name] = new
                continue
            for suffix, p, q in ((".lora_A", prev.a, new.a), (".lora_B", prev.b, new.b)):
                if p.shape != q.shape:
                    raise ShapeError(f"{label}: tensor {name}{suffix} has shape {q.shape}, expected {p.shape}")
            selected[name] = LoraAdapter(
                a=magmax_select(prev.a, new.a), b=magmax_select(prev.b, new.b), scale=new.scale, name=name
            )
    return merge_weights(base, selected)
