"""Exact small-instance solving, gap reporting and the diagnostic experiments."""

from __future__ import annotations

import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, SizeError
from .generate import extend_instance, keyed_rng
from .model import ModelConfig, ParamStore, init_params
from .rollout import augment8, best_of, default_k, rollout_batch
from .vrp import Instance, Trajectory, tour_cost

EXACT_LIMIT = 12
BRUTE_LIMIT = 7


# -- exact oracle -----------------------------------------------------------------


def _route_table(instance: Instance):
    """Optimal closed-route cost for every capacity-feasible customer subset.

    Held-Karp from the depot over bitmasks of customers. Returns
    (route_cost, parent, last) arrays indexed by mask; infeasible masks hold inf.
    """
    n = instance.n
    full = 1 << n
    d = instance.distance_matrix()
    dem = instance.demands
    load = np.zeros(full, dtype=np.int64)
    for j in range(n):
        load[1 << j : 1 << (j + 1)] = load[: 1 << j] + dem[j]
    feasible = load <= instance.capacity

    dp = np.full((full, n), np.inf)
    parent = np.full((full, n), -1, dtype=np.int64)
    for j in range(n):
        dp[1 << j, j] = d[0, j + 1]
    cust = d[1:, 1:]
    for mask in range(1, full):
        if not feasible[mask]:
            continue
        row = dp[mask]
        if not np.isfinite(row).any():
            continue
        # extend to every customer outside mask
        cand = row[:, None] + cust  # (last, next)
        best_prev = np.argmin(cand, axis=0)
        best = cand[best_prev, np.arange(n)]
        for nxt in range(n):
            if mask >> nxt & 1:
                continue
            m2 = mask | (1 << nxt)
            if feasible[m2] and best[nxt] < dp[m2, nxt]:
                dp[m2, nxt] = best[nxt]
                parent[m2, nxt] = best_prev[nxt]
    closing = dp + d[1:, 0][None, :]
    last = np.argmin(closing, axis=1)
    route = closing[np.arange(full), last]
    route[0] = 0.0
    route[~feasible] = np.inf
    return route, parent, last


def _route_nodes(mask: int, parent: np.ndarray, last: int) -> list[int]:
    seq = []
    j = last
    while mask:
        seq.append(int(j) + 1)
        prev = int(parent[mask, j])
        mask &= ~(1 << j)
        j = prev
    return seq[::-1]


def exact_solve(instance: Instance, limit: int = EXACT_LIMIT) -> Trajectory:
    """Provably optimal CVRP solution for N <= ``limit``.

    Optimal TSP cost for each capacity-feasible subset, then a minimum-cost
    partition of all customers into such subsets by DP over the subset lattice.
    """
    n = instance.n
    if n > limit:
        raise SizeError(
            f"exact_solve supports N <= {limit}, got N={n}; use the model's greedy rollout instead"
        )
    if n == 0:
        return Trajectory([0], [], 0.0)
    route, parent, last = _route_table(instance)
    full = 1 << n
    best = np.full(full, np.inf)
    choice = np.zeros(full, dtype=np.int64)
    best[0] = 0.0
    route_l = route.tolist()
    best_l = best.tolist()
    choice_l = choice.tolist()
    for mask in range(1, full):
        low = mask & -mask
        rest = mask ^ low
        # submasks of mask that contain its lowest customer
        sub = rest
        b, c = float("inf"), 0
        while True:
            s = sub | low
            v = route_l[s] + best_l[mask ^ s]
            if v < b:
                b, c = v, s
            if sub == 0:
                break
            sub = (sub - 1) & rest
        best_l[mask], choice_l[mask] = b, c
    nodes = [0]
    mask = full - 1
    while mask:
        s = choice_l[mask]
        nodes += _route_nodes(s, parent, int(last[s])) + [0]
        mask ^= s
    return Trajectory(nodes, [], tour_cost(instance, nodes))


def brute_force_solve(instance: Instance, limit: int = BRUTE_LIMIT) -> Trajectory:
    """Enumerate every customer permutation with every set of route breaks."""
    n = instance.n
    if n > limit:
        raise SizeError(f"brute force supports N <= {limit}, got N={n}")
    d = instance.distance_matrix()
    perms = np.array(list(itertools.permutations(range(1, n + 1))), dtype=np.int64)
    splits = np.array(list(itertools.product([False, True], repeat=n - 1)), dtype=bool)
    splits = splits.reshape(1 << (n - 1), n - 1)
    # base tour depot -> p1 -> ... -> pn -> depot, then a break between
    # p_i and p_{i+1} swaps leg (p_i, p_{i+1}) for (p_i, 0) + (0, p_{i+1})
    base = d[0, perms[:, 0]] + d[perms[:, -1], 0] + d[perms[:, :-1], perms[:, 1:]].sum(1)
    delta = d[perms[:, :-1], 0] + d[0, perms[:, 1:]] - d[perms[:, :-1], perms[:, 1:]]
    cost = base[:, None] + delta @ splits.T.astype(np.float64)  # (perms, splits)

    dem = instance.demands[perms - 1]  # (P, n)
    cap = instance.capacity
    # segment loads: running load resets after each break
    ok = np.ones(cost.shape, dtype=bool)
    running = np.broadcast_to(dem[:, None, 0], cost.shape).copy()
    for i in range(1, n):
        brk = splits[None, :, i - 1]
        running = np.where(brk, dem[:, None, i], running + dem[:, None, i])
        ok &= running <= cap
    cost = np.where(ok, cost, np.inf)
    p, s = np.unravel_index(np.argmin(cost), cost.shape)
    nodes = [0]
    for i, v in enumerate(perms[p]):
        nodes.append(int(v))
        if i < n - 1 and splits[s, i]:
            nodes.append(0)
    nodes.append(0)
    return Trajectory(nodes, [], tour_cost(instance, nodes))


def route_partition(nodes) -> frozenset[frozenset[int]]:
    """Customer sets served by each route, ignoring order and direction."""
    from .vrp import split_routes

    return frozenset(frozenset(r) for r in split_routes(nodes))


# -- reports ----------------------------------------------------------------------


def gap_pct(cost: float, reference: float | None) -> float | None:
    if reference is None or not reference > 0:
        return None
    return (cost - reference) / reference * 100.0


@dataclass
class InstanceResult:
    instance: str
    cost: float
    ref: float | None
    gap_pct: float | None
    time_ms: float
    nodes: list[int] = field(default_factory=list, repr=False)

    def record(self) -> dict:
        return {
            "instance": self.instance,
            "cost": self.cost,
            "ref": self.ref,
            "gap_pct": self.gap_pct,
            "time_ms": self.time_ms,
        }


@dataclass
class EvalReport:
    results: list[InstanceResult]
    meta: dict = field(default_factory=dict)

    @property
    def costs(self) -> np.ndarray:
        return np.array([r.cost for r in self.results])

    @property
    def mean_cost(self) -> float:
        return float(self.costs.mean())

    @property
    def mean_gap(self) -> float | None:
        gaps = [r.gap_pct for r in self.results if r.gap_pct is not None]
        return float(np.mean(gaps)) if gaps else None

    def summary(self) -> str:
        gap = "n/a" if self.mean_gap is None else f"{self.mean_gap:.3f}%"
        tags = " ".join(f"{k}={v}" for k, v in self.meta.items())
        return f"instances={len(self.results)} mean_cost={self.mean_cost:.6f} mean_gap={gap} {tags}".rstrip()

    def table(self) -> str:
        lines = [f"{'instance':<20} {'cost':>12} {'ref':>12} {'gap%':>9} {'ms':>9}"]
        for r in self.results:
            ref = "-" if r.ref is None else f"{r.ref:.4f}"
            gap = "-" if r.gap_pct is None else f"{r.gap_pct:.3f}"
            lines.append(f"{r.instance:<20} {r.cost:>12.4f} {ref:>12} {gap:>9} {r.time_ms:>9.1f}")
        lines.append(self.summary())
        return "\n".join(lines)


def _name(inst: Instance, i: int) -> str:
    return inst.name or f"inst{i}"


def _map(fn, items, threads: int | None):
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def oracle_costs(instances: Sequence[Instance], threads: int | None = None) -> list[float]:
    return _map(lambda inst: exact_solve(inst).cost, instances, threads)


def evaluate(
    params: ParamStore,
    cfg: ModelConfig,
    dataset: Sequence[Instance],
    k: int | None = None,
    augment: bool = False,
    references: Sequence[float] | None = None,
    round_distances: bool = False,
    threads: int | None = None,
) -> EvalReport:
    """Greedy multi-trajectory evaluation, one instance at a time, in dataset order.

    Instances outside the unit square are rescaled for the model; costs are
    always measured on the instance as given.
    """
    from .io import scale_instance

    dataset = list(dataset)
    if not dataset:
        raise ConfigurationError("evaluate needs a non-empty dataset")
    if references is not None and len(references) != len(dataset):
        raise ConfigurationError(
            f"{len(references)} references for {len(dataset)} instances"
        )

    def one(i):
        inst = dataset[i]
        t0 = time.perf_counter()
        kk = default_k(inst.n) if k is None else min(k, inst.n)
        scaled, factor = scale_instance(inst)
        copies = augment8(scaled) if augment else [scaled]
        traj = best_of(rollout_batch(copies, params, cfg, kk, "greedy"))
        exact_copy = factor == 1.0 and not round_distances
        cost = traj.cost if exact_copy else tour_cost(inst, traj.nodes, round_distances)
        ms = (time.perf_counter() - t0) * 1e3
        ref = None if references is None else float(references[i])
        return InstanceResult(_name(inst, i), cost, ref, gap_pct(cost, ref), ms, traj.nodes)

    results = _map(one, range(len(dataset)), threads)
    meta = {"k": "min(100,N)" if k is None else k, "augment": augment}
    return EvalReport(results, meta)


def extension_probe(
    params: ParamStore,
    cfg: ModelConfig,
    dataset: Sequence[Instance],
    deltas: Sequence[float],
    seed: int = 0,
    k: int | None = None,
    references: Sequence[float] | None = None,
) -> dict[float, EvalReport]:
    """Solve each instance with embeddings computed on an extended graph.

    ``ceil(delta * n)`` extra random customers are encoded together with the
    instance but are never selectable, so only the original nodes' embeddings
    drive decoding. ``delta = 0`` is the plain pipeline.
    """
    reports = {}
    for delta in deltas:
        if delta < 0:
            raise ConfigurationError(f"extension rate must be >= 0, got {delta}")
        results = []
        for i, inst in enumerate(dataset):
            t0 = time.perf_counter()
            ext, original = extend_instance(inst, delta, keyed_rng(seed, i))
            allowed = np.zeros((1, ext.n), dtype=bool)
            allowed[0, original - 1] = True
            kk = default_k(inst.n) if k is None else min(k, inst.n)
            traj = best_of(rollout_batch([ext], params, cfg, kk, "greedy", allowed=allowed))
            ms = (time.perf_counter() - t0) * 1e3
            ref = None if references is None else float(references[i])
            results.append(InstanceResult(_name(inst, i), traj.cost, ref, gap_pct(traj.cost, ref), ms, traj.nodes))
        reports[float(delta)] = EvalReport(results, {"delta": delta, "k": k or "min(100,N)"})
    return reports


# -- ablations --------------------------------------------------------------------


@dataclass
class AblationRow:
    label: str
    config: dict
    gaps: dict[int, float | None]
    costs: dict[int, float]


def ablation_suite(
    variants: dict[str, ModelConfig],
    train_cfg,
    eval_sets: dict[int, tuple[list[Instance], list[float] | None]],
    augment: bool = False,
    include_untrained: bool = True,
    stream=False,
) -> list[AblationRow]:
    """Train each variant on the same data stream and evaluate on shared sets.

    ``eval_sets`` maps a problem size to (instances, references or None).
    """
    from .training import train

    rows = []
    items = list(variants.items())
    if include_untrained and items:
        first_label, first_cfg = items[0]
        rows.append(_ablation_row(f"untrained[{first_label}]", first_cfg,
                                  init_params(first_cfg, keyed_rng(train_cfg.seed, 0)), eval_sets, augment))
    for label, mcfg in items:
        report = train(train_cfg, mcfg, stream=stream)
        rows.append(_ablation_row(label, mcfg, report.params, eval_sets, augment))
    return rows


def _ablation_row(label, mcfg, params, eval_sets, augment) -> AblationRow:
    gaps, costs = {}, {}
    for size, (insts, refs) in eval_sets.items():
        rep = evaluate(params, mcfg, insts, augment=augment, references=refs)
        gaps[size], costs[size] = rep.mean_gap, rep.mean_cost
    return AblationRow(label, mcfg.to_dict(), gaps, costs)


def ablation_table(rows: list[AblationRow]) -> str:
    sizes = sorted({s for r in rows for s in r.costs})
    head = f"{'variant':<24}" + "".join(f"{'N=' + str(s):>14}" for s in sizes)
    out = [head]
    for r in rows:
        cells = []
        for s in sizes:
            g = r.gaps.get(s)
            cells.append(f"{g:>13.3f}%" if g is not None else f"{r.costs[s]:>14.4f}")
        out.append(f"{r.label:<24}" + "".join(cells))
    flags = ("norm", "use_idt", "use_ff_query", "use_dist_heuristic", "qkv_ff", "extra_mha")
    for r in rows:
        out.append(f"  {r.label}: " + " ".join(f"{f}={r.config[f]}" for f in flags))
    return "\n".join(out)
