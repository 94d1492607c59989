"""
LoRA adapter values, initialization schemes and merge arithmetic.

An adapter holds factors A (r x n) and B (m x r) and a scale s; its weight
delta is s * B @ A. Orthogonal initialization has two modes:

* ``project`` draws a gaussian A and projects out the row space of the
  accumulated A (the sum of all previous tasks' A factors).
* ``svd_min`` follows the literal recipe: take the right singular vector of
  the smallest singular value of the accumulated A and place a gaussian
  multiple of it in every row, giving a rank-1 A.

Both are approximations of the per-column procedure described for the
orthogonalized-reinitialization method, whose indexing cannot be
reconstructed unambiguously.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, Mapping, Optional, Tuple, Union

import numpy as np

from continual_lora.core.exceptions import ComplementEmptyError, ConfigError, ShapeError
from continual_lora.models.schemas import OrthMode
from continual_lora.services.numkit import as_matrix, orthonormal_rowspace_basis, randn_matrix, rank_threshold, svd


def _frozen(m: np.ndarray) -> np.ndarray:
    out = np.array(m, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    a: np.ndarray
    b: np.ndarray
    scale: float = 1.0
    name: str = "layer0"

    def __post_init__(self):
        a = as_matrix(self.a, f"{self.name}.lora_A")
        b = as_matrix(self.b, f"{self.name}.lora_B")
        if a.shape[0] != b.shape[1]:
            raise ShapeError(f"Adapter {self.name}: A has {a.shape[0]} rows but B has {b.shape[1]} columns")
        if a.shape[0] < 1:
            raise ShapeError(f"Adapter {self.name}: rank must be >= 1")
        object.__setattr__(self, "a", _frozen(a))
        object.__setattr__(self, "b", _frozen(b))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        """Shape of the weight the adapter perturbs"""
        return (self.b.shape[0], self.a.shape[1])

    def replace(self, **changes) -> "LoraAdapter":
        return replace(self, **changes)

    def same_values(self, other: "LoraAdapter") -> bool:
        return (
            self.name == other.name
            and self.scale == other.scale
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.b, other.b)
        )


AdapterSet = Dict[str, LoraAdapter]


@dataclass(frozen=True, eq=False)
class BaseWeights:
    """Ordered, read-only collection of named layer weights"""

    layers: Tuple[Tuple[str, np.ndarray], ...] = field(default=())

    def __post_init__(self):
        names = [name for name, _ in self.layers]
        if len(set(names)) != len(names):
            raise ShapeError(f"Duplicate layer names: {names}")
        object.__setattr__(self, "layers", tuple((name, _frozen(as_matrix(w, name))) for name, w in self.layers))

    @classmethod
    def from_mapping(cls, weights: Mapping[str, np.ndarray]) -> "BaseWeights":
        return cls(tuple(weights.items()))

    @classmethod
    def single(cls, weight: np.ndarray, name: str = "layer0") -> "BaseWeights":
        return cls(((name, weight),))

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(name for name, _ in self.layers)

    def __getitem__(self, name: str) -> np.ndarray:
        for layer_name, w in self.layers:
            if layer_name == name:
                return w
        raise KeyError(name)

    def __iter__(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def shapes(self) -> Dict[str, Tuple[int, int]]:
        return {name: w.shape for name, w in self.layers}

    def allclose(self, other: "BaseWeights", atol: float = 0.0) -> bool:
        if self.names != other.names:
            return False
        return all(np.allclose(w, other[name], rtol=0.0, atol=atol) for name, w in self.layers)

    def equals(self, other: "BaseWeights") -> bool:
        return self.names == other.names and all(np.array_equal(w, other[name]) for name, w in self.layers)


def default_std_a(r: int) -> float:
    return 1.0 / np.sqrt(r)


def _check_rank(m: int, n: int, r: int) -> None:
    if not 1 <= r <= min(m, n):
        raise ConfigError(f"Adapter rank r={r} out of range [1, {min(m, n)}] for a {m}x{n} weight")


def init_standard(
    rng: np.random.Generator,
    m: int,
    n: int,
    r: int,
    std_a: Optional[float] = None,
    scale: float = 1.0,
    name: str = "layer0",
) -> LoraAdapter:
    """A ~ N(0, std_a^2), B = 0, so the initial delta is exactly zero"""
    _check_rank(m, n, r)
    std = default_std_a(r) if std_a is None else std_a
    a = randn_matrix(rng, r, n, std)
    return LoraAdapter(a=a, b=np.zeros((m, r)), scale=scale, name=name)


def init_orthogonal(
    rng: np.random.Generator,
    acc_a: np.ndarray,
    m: int,
    n: int,
    r: int,
    std_a: Optional[float] = None,
    mode: Union[OrthMode, str] = OrthMode.PROJECT,
    scale: float = 1.0,
    name: str = "layer0",
) -> LoraAdapter:
    """B = 0 and every row of A orthogonal to every row of acc_a"""
    _check_rank(m, n, r)
    acc_a = as_matrix(acc_a, "accumulated A")
    if acc_a.shape != (r, n):
        raise ShapeError(f"Accumulated A has shape {acc_a.shape}, expected {(r, n)}")
    mode = OrthMode(mode)
    std = default_std_a(r) if std_a is None else std_a

    if mode is OrthMode.PROJECT:
        q = orthonormal_rowspace_basis(acc_a)
        if q.shape[0] >= n:
            raise ComplementEmptyError(f"Accumulated A spans all of R^{n}; no orthogonal directions left")
        g = randn_matrix(rng, r, n, std)
        a = g - (g @ q.T) @ q
    else:
        decomposition = svd(acc_a, full_matrices=True)
        sigma = decomposition.sigma
        if sigma.size and sigma[0] > 0.0:
            rank = int(np.count_nonzero(sigma > rank_threshold(acc_a.shape, float(sigma[0]))))
            if rank >= n:
                raise ComplementEmptyError(f"Accumulated A spans all of R^{n}; no orthogonal directions left")
        # last row of V^T: direction of the smallest singular value
        v_min = decomposition.v[:, -1]
        g = randn_matrix(rng, r, 1, std)
        a = g @ v_min[np.newaxis, :]

    return LoraAdapter(a=a, b=np.zeros((m, r)), scale=scale, name=name)


def zero_adapter(m: int, n: int, r: int, scale: float = 1.0, name: str = "layer0") -> LoraAdapter:
    return LoraAdapter(a=np.zeros((r, n)), b=np.zeros((m, r)), scale=scale, name=name)


def delta(adapter: LoraAdapter) -> np.ndarray:
    return adapter.scale * (adapter.b @ adapter.a)


def merge(base: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    base = as_matrix(base, "base weight")
    if base.shape != adapter.shape:
        raise ShapeError(f"Cannot merge adapter {adapter.name} of shape {adapter.shape} into weight {base.shape}")
    if adapter.scale == 0.0 or not adapter.b.any():
        return np.array(base, copy=True)
    return base + delta(adapter)


def merge_weights(weights: BaseWeights, adapters: Mapping[str, LoraAdapter]) -> BaseWeights:
    """Apply one adapter per named layer; layers without an adapter pass through"""
    missing = set(adapters) - set(weights.names)
    if missing:
        raise ShapeError(f"Adapters for unknown layers: {sorted(missing)}")
    return BaseWeights(tuple((name, merge(w, adapters[name]) if name in adapters else w) for name, w in weights.layers))
