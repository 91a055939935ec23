"""Multi-trajectory solution construction and instance augmentation.

Every trajectory of an instance starts from a distinct customer: one decoder
step from the full-capacity depot state ranks the customers, and the top K
become the first moves. From there each trajectory is decoded greedily or by
sampling. All trajectories of an instance share a single set of embeddings.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError
from .model import ModelConfig, ParamStore, decode_log_probs, encode_batch
from .numerics import Tensor
from .vrp import CAPACITY_TOL, DEPOT, Instance, Trajectory

MODES = ("greedy", "sample")


def default_k(n: int) -> int:
    return min(100, n)


@dataclass
class RolloutBatch:
    """K trajectories for each of B instances.

    ``nodes`` is (B, K, T) with the leading depot and trailing depot padding;
    ``step_log_probs`` (B, K, T - 1) holds the log-probability of every
    decided move (0 for the forced first move and for padding). ``log_prob``
    is the differentiable per-trajectory sum when built with gradients.
    """

    instances: list[Instance]
    nodes: np.ndarray
    step_log_probs: np.ndarray
    costs: np.ndarray
    mode: str
    log_prob: Tensor | None = None

    @property
    def batch(self) -> int:
        return len(self.instances)

    @property
    def k(self) -> int:
        return self.nodes.shape[1]

    def trajectory(self, b: int, k: int) -> Trajectory:
        seq = self.nodes[b, k]
        # drop trailing depot padding after the closing depot visit
        last = len(seq) - 1
        while last > 0 and seq[last] == DEPOT and seq[last - 1] == DEPOT:
            last -= 1
        nodes = [int(v) for v in seq[: last + 1]]
        decided = self.step_log_probs[b, k, 1:last]
        return Trajectory(nodes, [float(x) for x in decided], float(self.costs[b, k]))

    def trajectories(self, b: int = 0) -> list[Trajectory]:
        return [self.trajectory(b, k) for k in range(self.k)]

    def best(self, b: int = 0) -> Trajectory:
        return self.trajectory(b, int(np.argmin(self.costs[b])))


def _costs(coords: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    b = np.arange(coords.shape[0])[:, None, None]
    pts = coords[b, nodes]  # (B, K, T, 2)
    legs = np.sqrt(((pts[:, :, 1:] - pts[:, :, :-1]) ** 2).sum(-1))
    return legs.sum(-1)


def _sample(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row; zero-probability entries are never chosen."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf <= (u * cdf[..., -1])[..., None]).sum(-1)
    m = probs.shape[-1]
    overflow = idx >= m
    if overflow.any():
        last_pos = m - 1 - np.argmax((probs > 0)[..., ::-1], axis=-1)
        idx = np.where(overflow, last_pos, idx)
    return idx


def rollout_batch(
    instances: Sequence[Instance],
    params: ParamStore,
    cfg: ModelConfig,
    k: int,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
    *,
    allowed: np.ndarray | None = None,
    grad: bool = False,
) -> RolloutBatch:
    """Decode K trajectories for each instance of a same-size batch.

    ``allowed`` (B, N) marks customers that belong to the problem; the rest
    are encoded but never selectable. With ``grad`` the per-trajectory
    log-probability is kept on the tape.
    """
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    instances = list(instances)
    n = instances[0].n
    b_size = len(instances)
    if allowed is None:
        allowed = np.ones((b_size, n), dtype=bool)
    n_allowed = int(allowed.sum(1).min())
    if not 1 <= k <= n_allowed:
        raise ConfigurationError(f"K={k} must lie in [1, N={n_allowed}]")
    if mode == "sample" and rng is None:
        raise ConfigurationError("sample mode needs an rng")

    ctx = nx.no_grad() if not grad else contextlib.nullcontext()
    with ctx:
        emb = encode_batch(instances, params, cfg)
        demands = emb.demands  # (B, M)
        m = n + 1
        bidx = np.arange(b_size)[:, None]

        # first move: rank customers from the fresh depot state
        visited = np.zeros((b_size, 1, m), dtype=bool)
        visited[:, 0, 1:] = ~allowed
        first_mask = ~visited.copy()
        first_mask[..., 0] = False
        first_mask &= demands[:, None, :] <= 1.0 + CAPACITY_TOL
        logp0 = decode_log_probs(
            emb, np.zeros((b_size, 1), dtype=np.int64), np.ones((b_size, 1)), first_mask, params, cfg
        )
        ranked = np.argsort(-logp0.data[:, 0, :], axis=-1, kind="stable")
        first = ranked[:, :k]

        visited = np.repeat(visited, k, axis=1)
        visited[bidx, np.arange(k)[None], first] = True
        remaining = 1.0 - demands[bidx, first]
        last = first.copy()
        done = np.zeros((b_size, k), dtype=bool)

        steps = [np.zeros((b_size, k), dtype=np.int64), first]
        step_lp = [np.zeros((b_size, k))]
        total: Tensor | None = None
        while not done.all():
            fits = demands[:, None, :] <= remaining[..., None] + CAPACITY_TOL
            mask = ~visited & fits
            mask[..., 0] = last != DEPOT
            mask[done] = False
            mask[done, 0] = True
            logp = decode_log_probs(emb, last, remaining, mask, params, cfg)
            if mode == "greedy":
                choice = np.argmax(logp.data, axis=-1)
            else:
                choice = _sample(np.exp(logp.data), rng.random((b_size, k)))
            chosen = nx.pick(logp, choice)
            live = ~done
            step_lp.append(np.where(live, chosen.data, 0.0))
            if grad:
                term = chosen * live.astype(np.float64)
                total = term if total is None else total + term

            choice = np.where(done, DEPOT, choice)
            at_depot = choice == DEPOT
            visited[bidx, np.arange(k)[None], choice] |= ~at_depot
            remaining = np.where(at_depot, 1.0, np.clip(remaining - demands[bidx, choice], 0.0, 1.0))
            last = choice
            done = at_depot & visited[..., 1:].all(-1)
            steps.append(choice)

    nodes = np.stack(steps, axis=-1)
    costs = _costs(emb.coords, nodes)
    return RolloutBatch(
        instances=instances,
        nodes=nodes,
        step_log_probs=np.stack(step_lp, axis=-1),
        costs=costs,
        mode=mode,
        log_prob=total,
    )


def rollout(
    instance: Instance,
    params: ParamStore,
    cfg: ModelConfig,
    k: int | None = None,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
) -> RolloutBatch:
    """K trajectories for one instance (K defaults to min(100, N))."""
    k = default_k(instance.n) if k is None else k
    if k > instance.n:
        raise ConfigurationError(f"K={k} exceeds the number of customers N={instance.n}")
    return rollout_batch([instance], params, cfg, k, mode, rng)


# -- augmentation ----------------------------------------------------------------

_TRANSFORMS = (
    lambda x, y: (x, y),
    lambda x, y: (y, x),
    lambda x, y: (1 - x, y),
    lambda x, y: (x, 1 - y),
    lambda x, y: (1 - x, 1 - y),
    lambda x, y: (y, 1 - x),
    lambda x, y: (1 - y, x),
    lambda x, y: (1 - y, 1 - x),
)


def transform_coords(coords: np.ndarray, t: int) -> np.ndarray:
    x, y = _TRANSFORMS[t](coords[..., 0], coords[..., 1])
    return np.stack([x, y], axis=-1)


def augment8(instance: Instance) -> list[Instance]:
    """The eight symmetries of the unit square applied to every node; identity first."""
    return [
        Instance(
            transform_coords(instance.depot, t),
            transform_coords(instance.customers, t),
            instance.demands,
            instance.capacity,
            instance.name,
        )
        for t in range(8)
    ]


def best_of(batches: Iterable[RolloutBatch] | RolloutBatch) -> Trajectory:
    """Cheapest trajectory over every row of every batch; first occurrence wins ties."""
    if isinstance(batches, RolloutBatch):
        batches = [batches]
    best, best_cost = None, np.inf
    for batch in batches:
        for b in range(batch.batch):
            k = int(np.argmin(batch.costs[b]))
            if batch.costs[b, k] < best_cost:
                best, best_cost = (batch, b, k), batch.costs[b, k]
    if best is None:
        raise ValueError("best_of needs at least one trajectory")
    batch, b, k = best
    return batch.trajectory(b, k)


def solve(
    instance: Instance,
    params: ParamStore,
    cfg: ModelConfig,
    k: int | None = None,
    augment: bool = False,
) -> Trajectory:
    """Greedy multi-trajectory solution, optionally over the 8 augmented copies."""
    k = default_k(instance.n) if k is None else min(k, instance.n)
    copies = augment8(instance) if augment else [instance]
    return best_of(rollout_batch(copies, params, cfg, k, "greedy"))


def score_trajectory(
    instance: Instance,
    nodes: Sequence[int],
    params: ParamStore,
    cfg: ModelConfig,
    include_first: bool = False,
) -> Tensor:
    """Differentiable log-probability of a given node sequence under the policy.

    The first customer move is a forced start in multi-trajectory decoding, so
    it is only scored with ``include_first``.
    """
    from .vrp import RolloutState, apply_move, feasible_mask

    nodes = [int(v) for v in nodes]
    if nodes[0] != DEPOT:
        raise ConfigurationError("trajectory must start at the depot")
    emb = encode_batch([instance], params, cfg)
    state = RolloutState.initial(instance)
    total = None
    for t, nxt in enumerate(nodes[1:]):
        if state.done:
            break
        mask = feasible_mask(instance, state)
        if t > 0 or include_first:
            logp = decode_log_probs(
                emb,
                np.array([[state.last_node]]),
                np.array([[state.remaining_capacity]], dtype=np.float64),
                mask[None, None],
                params,
                cfg,
            )
            term = logp[0, 0, nxt]
            total = term if total is None else total + term
        state = apply_move(instance, state, nxt)
    return total if total is not None else Tensor(0.0)
