import numpy as np
import pytest

from reld.errors import ConfigurationError
from reld.generate import keyed_rng
from reld.model import decode_step, encode, encode_counter, init_params
from reld.rollout import (
    RolloutBatch,
    augment8,
    best_of,
    rollout,
    rollout_batch,
    score_trajectory,
    solve,
    transform_coords,
)
from reld.vrp import Instance, RolloutState, apply_move, tour_cost, validate_solution
from tests.conftest import make_instance, tiny_model


@pytest.fixture(scope="module")
def model():
    cfg = tiny_model()
    return cfg, init_params(cfg, keyed_rng(11, 0))


def test_single_customer(model):
    cfg, p = model
    inst = Instance([0, 0], [[0.3, 0.4]], [2], 5)
    b = rollout(inst, p, cfg, k=1)
    t = b.trajectory(0, 0)
    assert t.nodes == [0, 1, 0] and t.cost == pytest.approx(1.0)


def test_greedy_is_deterministic(model):
    cfg, p = model
    inst = make_instance(12, seed=4)
    a, b = rollout(inst, p, cfg, k=6), rollout(inst, p, cfg, k=6)
    assert np.array_equal(a.nodes, b.nodes) and np.array_equal(a.costs, b.costs)


def test_first_moves_are_top_k_distinct(model):
    cfg, p = model
    inst = make_instance(10, seed=2)
    probs = decode_step(encode(inst, p, cfg), RolloutState.initial(inst), inst, p, cfg)
    b = rollout(inst, p, cfg, k=4)
    expected = np.argsort(-probs, kind="stable")[:4]
    assert b.nodes[0, :, 1].tolist() == expected.tolist()


def test_sample_trajectories_valid_and_costed(model):
    cfg, p = model
    inst = make_instance(15, seed=5)
    b = rollout(inst, p, cfg, k=15, mode="sample", rng=keyed_rng(1))
    for t in b.trajectories():
        assert validate_solution(inst, t.nodes) == []
        assert abs(t.cost - tour_cost(inst, t.nodes)) < 1e-9
        assert len(t.nodes) <= 2 * inst.n + 2


def test_step_log_probs_match_replayed_probabilities(model):
    cfg, p = model
    inst = make_instance(9, seed=8)
    b = rollout(inst, p, cfg, k=3, mode="sample", rng=keyed_rng(2))
    emb = encode(inst, p, cfg)
    for t in b.trajectories():
        state = apply_move(inst, RolloutState.initial(inst), t.nodes[1])
        chosen = []
        for nxt in t.nodes[2:]:
            chosen.append(decode_step(emb, state, inst, p, cfg)[nxt])
            state = apply_move(inst, state, nxt)
        assert abs(t.log_prob - np.log(np.prod(chosen))) < 1e-9
        assert abs(score_trajectory(inst, t.nodes, p, cfg).data - t.log_prob) < 1e-9


def test_encodes_once_per_copy(model):
    cfg, p = model
    inst = make_instance(10, seed=1)
    encode_counter.reset()
    solve(inst, p, cfg, k=10, augment=True)
    assert encode_counter.instances == 8 and encode_counter.calls == 1
    encode_counter.reset()
    rollout(inst, p, cfg, k=10, mode="sample", rng=keyed_rng(0))
    assert encode_counter.instances == 1


def test_k_bounds(model):
    cfg, p = model
    inst = make_instance(5)
    with pytest.raises(ConfigurationError):
        rollout(inst, p, cfg, k=6)
    with pytest.raises(ConfigurationError):
        rollout(inst, p, cfg, k=0)
    with pytest.raises(ConfigurationError):
        rollout(inst, p, cfg, k=2, mode="sample")
    with pytest.raises(ConfigurationError):
        rollout(inst, p, cfg, k=2, mode="beam")


def test_default_k_is_min_100_n(model):
    cfg, p = model
    assert rollout(make_instance(7), p, cfg).k == 7


def test_allowed_mask_hides_nodes(model):
    cfg, p = model
    inst = make_instance(8, seed=3)
    allowed = np.ones((1, 8), dtype=bool)
    allowed[0, [2, 5]] = False
    b = rollout_batch([inst], p, cfg, 4, allowed=allowed)
    for t in b.trajectories():
        assert 3 not in t.nodes and 6 not in t.nodes
        assert sorted(set(t.nodes) - {0}) == [1, 2, 4, 5, 7, 8]


class TestAugment:
    def test_identity_first_and_attributes_kept(self):
        inst = make_instance(6)
        copies = augment8(inst)
        assert len(copies) == 8 and copies[0] == inst
        assert all(np.array_equal(c.demands, inst.demands) and c.capacity == inst.capacity for c in copies)

    def test_transform_table(self):
        pt = np.array([0.2, 0.7])
        got = [tuple(np.round(transform_coords(pt, t), 12)) for t in range(8)]
        assert got == [(0.2, 0.7), (0.7, 0.2), (0.8, 0.7), (0.2, 0.3), (0.8, 0.3), (0.7, 0.8), (0.3, 0.2), (0.3, 0.8)]

    def test_distances_and_tour_cost_preserved(self):
        inst = make_instance(9, seed=6)
        d0 = inst.distance_matrix()
        tour = [0, 3, 1, 0, 9, 2, 4, 0, 5, 6, 7, 8]
        for c in augment8(inst):
            assert np.abs(c.distance_matrix() - d0).max() < 1e-12
            assert abs(tour_cost(c, tour) - tour_cost(inst, tour)) < 1e-12


class TestBestOf:
    def batch(self, costs):
        costs = np.array([costs], dtype=float)
        k = costs.shape[1]
        nodes = np.zeros((1, k, 3), dtype=np.int64)
        nodes[0, :, 1] = np.arange(1, k + 1)
        return RolloutBatch([make_instance(k)], nodes, np.zeros((1, k, 2)), costs, "greedy")

    def test_single(self):
        assert best_of(self.batch([3.0])).cost == 3.0

    def test_first_occurrence_wins(self):
        t = best_of([self.batch([5.0, 2.0, 2.0]), self.batch([2.0, 9.0, 9.0])])
        assert t.cost == 2.0 and t.nodes[1] == 2

    def test_empty(self):
        with pytest.raises(ValueError):
            best_of([])

    def test_min_over_concatenation(self):
        bs = [self.batch(list(np.random.default_rng(i).random(4))) for i in range(5)]
        assert best_of(bs).cost == min(b.costs.min() for b in bs)
