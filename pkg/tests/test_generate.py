import math

import numpy as np
import pytest

from reld.errors import ConfigurationError
from reld.generate import (
    FixedCapacity,
    GenConfig,
    TriangularRoute,
    extend_instance,
    keyed_rng,
    sample_batch,
    sample_instance,
    sample_instances,
    sample_triangular,
    triangular_inverse_cdf,
)
from reld.vrp import Instance


def test_standard_cvrp100_regime():
    inst = sample_instance(GenConfig.fixed(100), keyed_rng(0))
    assert inst.n == 100 and inst.capacity == 50
    assert inst.demands.min() >= 1 and inst.demands.max() <= 9


def test_constant_demand_capacity_formula():
    cfg = GenConfig(size_range=(12, 12), demand_range=(4, 4))
    inst = sample_instance(cfg, keyed_rng(5))
    # replay the draw order to recover r
    rng = keyed_rng(5)
    rng.integers(12, 13)
    rng.random(2)
    rng.random((12, 2))
    rng.integers(4, 5, size=12)
    r = sample_triangular(3, 6, 25, rng)
    assert inst.capacity == max(math.ceil(r * 4), 4)


def test_same_seed_same_bytes():
    a = sample_instances(GenConfig(seed=11), 5)
    b = sample_instances(GenConfig(seed=11), 5)
    for x, y in zip(a, b):
        assert x.customers.tobytes() == y.customers.tobytes() and x == y


def test_stream_is_index_addressable():
    cfg = GenConfig(seed=3)
    assert sample_instances(cfg, 3, start=7)[1] == sample_instances(cfg, 10)[8]


def test_sampled_instances_respect_ranges():
    cfg = GenConfig(size_range=(5, 9), demand_range=(2, 7), seed=2)
    for inst in sample_instances(cfg, 200):
        assert 5 <= inst.n <= 9
        assert inst.coords.min() >= 0 and inst.coords.max() <= 1
        assert 2 <= inst.demands.min() and inst.demands.max() <= 7
        assert inst.capacity >= inst.demands.max()


def test_batch_shares_size():
    batch = sample_batch(GenConfig(size_range=(10, 20)), 16, 3, 4)
    assert len({i.n for i in batch}) == 1


def test_triangular_degenerate_and_endpoints():
    assert sample_triangular(5, 5, 5, keyed_rng(1)) == 5
    assert triangular_inverse_cdf(0.0, 3, 6, 25) == 3
    assert triangular_inverse_cdf(1.0, 3, 6, 25) == 25
    assert triangular_inverse_cdf(3 / 22, 3, 6, 25) == pytest.approx(6)


def test_triangular_mean():
    draws = sample_triangular(3, 6, 25, keyed_rng(42), size=100_000)
    assert abs(draws.mean() - 34 / 3) < 0.1
    assert draws.min() >= 3 and draws.max() <= 25


def test_triangular_parameter_order():
    with pytest.raises(ConfigurationError):
        TriangularRoute(6, 3, 25)
    with pytest.raises(ConfigurationError):
        triangular_inverse_cdf(0.5, 1, 9, 5)


def test_invalid_configs():
    with pytest.raises(ConfigurationError):
        GenConfig(size_range=(0, 5))
    with pytest.raises(ConfigurationError):
        GenConfig(demand_range=(1, 9), capacity_mode=FixedCapacity(5))


class TestExtension:
    def base(self, n):
        return sample_instance(GenConfig(size_range=(n, n)), keyed_rng(n))

    def test_zero_rate_is_identity(self):
        inst = self.base(7)
        ext, idx = extend_instance(inst, 0.0, keyed_rng(0))
        assert ext == inst and idx.tolist() == list(range(1, 8))

    def test_half_of_hundred(self):
        ext, idx = extend_instance(self.base(100), 0.5, keyed_rng(0))
        assert ext.n == 150 and len(idx) == 100

    def test_ceiling(self):
        inst = self.base(3)
        ext, idx = extend_instance(inst, 0.4, keyed_rng(0))
        assert ext.n == 5
        np.testing.assert_array_equal(ext.customers[:3], inst.customers)
        assert idx.tolist() == [1, 2, 3]

    def test_no_float_overshoot(self):
        ext, _ = extend_instance(self.base(30), 0.1, keyed_rng(0))
        assert ext.n == 33

    def test_negative_rate(self):
        with pytest.raises(ConfigurationError):
            extend_instance(self.base(3), -0.1, keyed_rng(0))

    def test_added_demands_fit(self):
        inst = Instance([0, 0], [[0.1, 0.1]], [2], 3)
        ext, _ = extend_instance(inst, 5.0, keyed_rng(1))
        assert ext.demands.max() <= 3
