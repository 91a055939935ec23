"""Random CVRP instance generation.

Coordinates and demands are uniform. Capacity is either fixed or derived
from an expected route size ``r`` drawn from a triangular distribution,
``capacity = ceil(r * mean_demand)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .vrp import Instance

# conventional capacities per problem size
STANDARD_CAPACITY = {10: 20, 20: 30, 50: 40, 100: 50, 200: 80, 500: 100, 1000: 250}


@dataclass(frozen=True)
class FixedCapacity:
    value: int

    def __post_init__(self):
        if self.value < 1:
            raise ConfigurationError("fixed capacity must be positive")


@dataclass(frozen=True)
class TriangularRoute:
    low: float = 3.0
    mode: float = 6.0
    high: float = 25.0

    def __post_init__(self):
        if not self.low <= self.mode <= self.high:
            raise ConfigurationError(
                f"triangular parameters need low <= mode <= high, got "
                f"({self.low}, {self.mode}, {self.high})"
            )


@dataclass(frozen=True)
class GenConfig:
    size_range: tuple[int, int] = (10, 20)
    demand_range: tuple[int, int] = (1, 9)
    capacity_mode: FixedCapacity | TriangularRoute = TriangularRoute()
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.size_range
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"invalid size_range {self.size_range}")
        dlo, dhi = self.demand_range
        if dlo < 1 or dhi < dlo:
            raise ConfigurationError(f"invalid demand_range {self.demand_range}")
        if isinstance(self.capacity_mode, FixedCapacity) and self.capacity_mode.value < dhi:
            raise ConfigurationError(
                f"fixed capacity {self.capacity_mode.value} below max demand {dhi}"
            )

    @classmethod
    def fixed(cls, n: int, capacity: int | None = None, **kw) -> "GenConfig":
        capacity = capacity if capacity is not None else STANDARD_CAPACITY[n]
        return cls(size_range=(n, n), capacity_mode=FixedCapacity(capacity), **kw)


def keyed_rng(*key: int) -> np.random.Generator:
    """Counter-based generator determined only by the integer ``key`` tuple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def triangular_inverse_cdf(u, low: float, mode: float, high: float):
    if not low <= mode <= high:
        raise ConfigurationError(f"triangular needs low <= mode <= high, got ({low}, {mode}, {high})")
    u = np.asarray(u, dtype=np.float64)
    span = high - low
    if span == 0:
        return np.full_like(u, low)[()]
    split = (mode - low) / span
    left = low + np.sqrt(u * span * (mode - low))
    right = high - np.sqrt((1 - u) * span * (high - mode))
    return np.where(u < split, left, right)[()]


def sample_triangular(low: float, mode: float, high: float, rng: np.random.Generator, size=None):
    return triangular_inverse_cdf(rng.random(size), low, mode, high)


def _capacity(mode, demands: np.ndarray, rng: np.random.Generator) -> int:
    if isinstance(mode, FixedCapacity):
        cap = mode.value
    else:
        r = sample_triangular(mode.low, mode.mode, mode.high, rng)
        cap = math.ceil(r * demands.mean())
    return max(int(cap), int(demands.max()))


def sample_instance(cfg: GenConfig, rng: np.random.Generator, n: int | None = None) -> Instance:
    """Draw one instance; ``n`` overrides the size draw."""
    if n is None:
        n = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
    depot = rng.random(2)
    customers = rng.random((n, 2))
    demands = rng.integers(cfg.demand_range[0], cfg.demand_range[1] + 1, size=n)
    return Instance(depot, customers, demands, _capacity(cfg.capacity_mode, demands, rng))


def sample_instances(cfg: GenConfig, count: int, start: int = 0) -> list[Instance]:
    """Instances ``start .. start+count-1`` of the stream keyed by ``cfg.seed``."""
    return [sample_instance(cfg, keyed_rng(cfg.seed, i)) for i in range(start, start + count)]


def sample_batch(cfg: GenConfig, batch_size: int, *key: int) -> list[Instance]:
    """A batch of instances sharing one size, for rectangular training batches."""
    rng = keyed_rng(cfg.seed, *key)
    n = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
    return [sample_instance(cfg, keyed_rng(cfg.seed, *key, i), n=n) for i in range(batch_size)]


def extension_count(n: int, delta: float) -> int:
    # round first so 0.1 * 30 does not ceil to 4
    return math.ceil(round(delta * n, 9))


def extend_instance(
    instance: Instance, delta: float, rng: np.random.Generator, demand_range=(1, 9)
) -> tuple[Instance, np.ndarray]:
    """Append ``ceil(delta * n)`` random customers.

    Returns the extended instance and the node indices (1-based) of the
    original customers.
    """
    if delta < 0:
        raise ConfigurationError(f"extension rate must be >= 0, got {delta}")
    original = np.arange(1, instance.n + 1)
    m = extension_count(instance.n, delta)
    if m == 0:
        return instance, original
    coords = rng.random((m, 2))
    hi = min(demand_range[1], instance.capacity)
    demands = rng.integers(min(demand_range[0], hi), hi + 1, size=m)
    ext = Instance(
        instance.depot,
        np.vstack([instance.customers, coords]),
        np.concatenate([instance.demands, demands]),
        instance.capacity,
        instance.name,
    )
    return ext, original
