"""CVRP instances, rollout state transitions, feasibility and tour cost."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FeasibilityError, InfeasibleError

CAPACITY_TOL = 1e-12
DEPOT = 0


@dataclass(frozen=True, eq=False)
class Instance:
    """A depot, ``N`` customers with integer demands, and one vehicle capacity.

    Node 0 is the depot; customer ``i`` (0-based in ``customers``) is node ``i + 1``.
    """

    depot: np.ndarray
    customers: np.ndarray
    demands: np.ndarray
    capacity: int
    name: str | None = None

    def __post_init__(self):
        depot = np.asarray(self.depot, dtype=np.float64).reshape(2)
        customers = np.asarray(self.customers, dtype=np.float64).reshape(-1, 2)
        demands = np.asarray(self.demands)
        if demands.size and not np.all(demands == np.round(demands)):
            raise ValueError("demands must be integers")
        demands = demands.astype(np.int64).reshape(-1)
        capacity = int(self.capacity)
        if len(demands) != len(customers):
            raise ValueError(f"{len(customers)} customers but {len(demands)} demands")
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        if len(demands) and (demands.min() < 1 or demands.max() > capacity):
            raise ValueError(f"every demand must lie in [1, capacity={capacity}]")
        for arr in (depot, customers, demands):
            arr.setflags(write=False)
        object.__setattr__(self, "depot", depot)
        object.__setattr__(self, "customers", customers)
        object.__setattr__(self, "demands", demands)
        object.__setattr__(self, "capacity", capacity)

    @property
    def n(self) -> int:
        return len(self.customers)

    @property
    def coords(self) -> np.ndarray:
        """All node coordinates, depot first: shape (N + 1, 2)."""
        return np.vstack([self.depot[None], self.customers])

    @property
    def node_demands(self) -> np.ndarray:
        """Normalized demand per node; 0 for the depot."""
        return np.concatenate([[0.0], self.demands / self.capacity])

    def distance_matrix(self, round_distances: bool = False) -> np.ndarray:
        c = self.coords
        d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
        return np.floor(d + 0.5) if round_distances else d

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.capacity == other.capacity
            and self.name == other.name
            and np.array_equal(self.depot, other.depot)
            and np.array_equal(self.customers, other.customers)
            and np.array_equal(self.demands, other.demands)
        )

    __hash__ = None


def node_features(instance: Instance) -> np.ndarray:
    """(N + 1, 3) array of (x, y, normalized demand); depot demand is 0."""
    return np.column_stack([instance.coords, instance.node_demands])


@dataclass(frozen=True)
class RolloutState:
    visited: np.ndarray
    remaining_capacity: float = 1.0
    last_node: int = DEPOT
    done: bool = False

    @classmethod
    def initial(cls, instance: Instance, visited=None) -> "RolloutState":
        if visited is None:
            visited = np.zeros(instance.n, dtype=bool)
        visited = np.asarray(visited, dtype=bool).copy()
        return cls(visited=visited, done=bool(visited.all()))


def feasible_mask(instance: Instance, state: RolloutState) -> np.ndarray:
    """Boolean mask over nodes (depot first) of the moves allowed in ``state``."""
    if state.done:
        raise FeasibilityError("rollout already finished")
    fits = instance.demands / instance.capacity <= state.remaining_capacity + CAPACITY_TOL
    mask = np.concatenate([[state.last_node != DEPOT], ~state.visited & fits])
    if not mask.any():
        raise InfeasibleError(
            f"no feasible node at last_node={state.last_node} "
            f"with remaining capacity {state.remaining_capacity:.6g}"
        )
    return mask


def apply_move(instance: Instance, state: RolloutState, node: int) -> RolloutState:
    node = int(node)
    if not 0 <= node <= instance.n:
        raise FeasibilityError(f"node {node} out of range for N={instance.n}")
    if state.done:
        raise FeasibilityError(f"node {node}: rollout already finished")
    if node == DEPOT:
        if state.last_node == DEPOT:
            raise FeasibilityError("node 0: consecutive depot visits are not allowed")
        return replace(
            state, remaining_capacity=1.0, last_node=DEPOT, done=bool(state.visited.all())
        )
    if state.visited[node - 1]:
        raise FeasibilityError(f"node {node}: customer already visited")
    need = instance.demands[node - 1] / instance.capacity
    if need > state.remaining_capacity + CAPACITY_TOL:
        raise FeasibilityError(
            f"node {node}: demand {need:.6g} exceeds remaining capacity "
            f"{state.remaining_capacity:.6g}"
        )
    visited = state.visited.copy()
    visited[node - 1] = True
    remaining = min(1.0, max(0.0, state.remaining_capacity - need))
    return RolloutState(visited=visited, remaining_capacity=remaining, last_node=node)


def tour_cost(instance: Instance, nodes, round_distances: bool = False) -> float:
    """Length of the closed tour through ``nodes`` (returns to the depot at the end)."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0 or nodes[0] != DEPOT:
        raise ValueError("tour must start at the depot (node 0)")
    if nodes.min() < 0 or nodes.max() > instance.n:
        raise IndexError(f"node index out of range [0, {instance.n}]")
    c = instance.coords[np.append(nodes, DEPOT)]
    legs = np.sqrt(((c[1:] - c[:-1]) ** 2).sum(-1))
    if round_distances:
        legs = np.floor(legs + 0.5)
    return float(legs.sum())


def split_routes(nodes) -> list[list[int]]:
    """Split a depot-delimited node sequence into customer-only routes."""
    routes, cur = [], []
    for v in nodes:
        if v == DEPOT:
            if cur:
                routes.append(cur)
            cur = []
        else:
            cur.append(int(v))
    if cur:
        routes.append(cur)
    return routes


def validate_solution(instance: Instance, nodes) -> list[str]:
    """Return a list of constraint violations; an empty list means feasible."""
    violations = []
    nodes = [int(v) for v in nodes]
    bad = [v for v in nodes if not 0 <= v <= instance.n]
    if bad:
        violations.append(f"node indices out of range: {bad}")
        nodes = [v for v in nodes if 0 <= v <= instance.n]
    counts = np.bincount([v for v in nodes if v != DEPOT], minlength=instance.n + 1)[1:]
    missing = [i + 1 for i in np.flatnonzero(counts == 0)]
    dup = [i + 1 for i in np.flatnonzero(counts > 1)]
    if missing:
        violations.append(f"customers never visited: {missing}")
    if dup:
        violations.append(f"customers visited more than once: {dup}")
    for r, route in enumerate(split_routes(nodes)):
        load = int(sum(instance.demands[v - 1] for v in route))
        if load > instance.capacity:
            violations.append(f"route {r} load {load} exceeds capacity {instance.capacity}")
    return violations


@dataclass
class Trajectory:
    nodes: list[int]
    step_log_probs: list[float] = field(default_factory=list)
    cost: float = float("nan")

    @property
    def log_prob(self) -> float:
        return float(np.sum(self.step_log_probs))

    @property
    def routes(self) -> list[list[int]]:
        return split_routes(self.nodes)
