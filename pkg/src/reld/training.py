"""REINFORCE training with the shared multi-trajectory baseline.

For each instance the baseline is the mean cost of its K trajectories, so the
advantage of trajectory k is ``cost_k - mean(cost)``. Gradients flow only
through the log-probabilities; costs are constants.
"""

from __future__ import annotations

import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, NumericError
from .generate import GenConfig, keyed_rng, sample_batch
from .model import ModelConfig, ParamStore, init_params
from .numerics import Tensor
from .rollout import RolloutBatch, rollout_batch
from .vrp import Instance

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
FREEZE = ("none", "encoder", "decoder", "all")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    instances_per_epoch: int = 3200
    batch_size: int = 32
    k_policy: str = "full"  # "full" (K = N) or "min100" (K = min(100, N))
    learning_rate: float = 1e-3
    lr_decay_epochs: tuple[int, ...] = (25,)
    lr_decay_factor: float = 0.1
    weight_decay: float = 0.0
    max_grad_norm: float | None = None
    gen: GenConfig = GenConfig()
    seed: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("epochs", "instances_per_epoch", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.k_policy not in ("full", "min100"):
            raise ConfigurationError(f"k_policy must be 'full' or 'min100', got {self.k_policy!r}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError("lr_decay_factor must lie in (0, 1]")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigurationError("learning_rate must be positive and weight_decay >= 0")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0")

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.instances_per_epoch / self.batch_size)

    def k_for(self, n: int) -> int:
        return n if self.k_policy == "full" else min(100, n)

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 0-based ``epoch``."""
        drops = sum(1 for e in self.lr_decay_epochs if epoch + 1 > e)
        return self.learning_rate * self.lr_decay_factor**drops


DESK_PRESET = TrainConfig()


# -- loss -------------------------------------------------------------------------


def advantages(costs: np.ndarray) -> np.ndarray:
    """Per-trajectory advantage against the per-instance mean cost (last axis)."""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.shape[-1] < 2:
        raise ConfigurationError("the shared baseline needs K >= 2 trajectories per instance")
    return costs - costs.mean(axis=-1, keepdims=True)


def reinforce_loss(batch: RolloutBatch | None = None, *, costs=None, log_prob: Tensor | None = None) -> Tensor:
    """``mean_b (1/K) sum_k (cost_bk - mean_k cost_bk) * log p_bk``.

    Pass a :class:`RolloutBatch` built with gradients, or ``costs`` and
    ``log_prob`` directly (both shaped (B, K) or (K,)).
    """
    if batch is not None:
        costs, log_prob = batch.costs, batch.log_prob
    if log_prob is None:
        raise ConfigurationError("reinforce_loss needs differentiable log-probabilities")
    adv = advantages(costs)
    return (log_prob * adv).mean()


# -- optimizer --------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ParamStore,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    grads: dict[str, np.ndarray] | None = None,
    frozen: frozenset[str] | set[str] = frozenset(),
) -> AdamState:
    """One bias-corrected Adam update in place; frozen names are skipped entirely."""
    b1, b2 = BETAS
    if grads is None:
        grads = {n: t.grad for n, t in params.items()}
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return state


def grad_norm(params: ParamStore) -> float:
    return float(np.sqrt(sum(float((t.grad**2).sum()) for _, t in params.items() if t.grad is not None)))


def frozen_names(params: ParamStore, freeze: str) -> frozenset[str]:
    if freeze not in FREEZE:
        raise ConfigurationError(f"freeze must be one of {FREEZE}, got {freeze!r}")
    if freeze == "none":
        return frozenset()
    if freeze == "all":
        return frozenset(params.names())
    return frozenset(params.names(freeze))


def round_to_stored(params: ParamStore, state: AdamState):
    """Round live values to float32, the checkpoint precision, so resumed runs match."""
    for t in params.tensors.values():
        t.data[...] = t.data.astype(np.float32)
    for d in (state.m, state.v):
        for k in d:
            d[k] = d[k].astype(np.float32).astype(np.float64)


# -- loop -------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    mean_cost: float
    mean_loss: float
    grad_norm: float
    lr: float
    wall_time: float

    def line(self) -> str:
        return (
            f"epoch={self.epoch} mean_cost={self.mean_cost:.6f} mean_loss={self.mean_loss:.6f} "
            f"grad_norm={self.grad_norm:.6f} lr={self.lr:.3g} time_s={self.wall_time:.2f}"
        )


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    params: ParamStore
    adam: AdamState
    checkpoint: Path | None = None


BatchHook = Callable[[int, int, RolloutBatch, np.ndarray, float], None]
InstanceSource = Callable[[int, int, int], "list[Instance]"]


def train(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    *,
    params: ParamStore | None = None,
    adam: AdamState | None = None,
    start_epoch: int = 0,
    freeze: str = "none",
    out_dir: str | Path | None = None,
    on_batch: BatchHook | None = None,
    stream=None,
    source: InstanceSource | None = None,
) -> TrainReport:
    """Train from ``start_epoch`` to ``cfg.epochs``.

    Instance batches and sampling streams are keyed by (seed, epoch, batch),
    so a run resumed from an epoch-boundary checkpoint continues identically.
    Progress lines go to ``stream`` (stdout by default, ``False`` to silence).
    ``source(epoch, batch, size)`` replaces the generator as instance supplier.
    """
    from .io import save_checkpoint

    if params is None:
        params = init_params(model_cfg, rng if rng is not None else keyed_rng(cfg.seed, 0))
    adam = adam if adam is not None else AdamState()
    frozen = frozen_names(params, freeze)
    stream = sys.stdout if stream is None else stream
    out_dir = Path(out_dir) if out_dir is not None else None
    records: list[EpochRecord] = []
    ckpt_path = None

    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        t0 = time.perf_counter()
        costs, losses, norms = [], [], []
        for bi in range(cfg.batches_per_epoch):
            size = min(cfg.batch_size, cfg.instances_per_epoch - bi * cfg.batch_size)
            if source is None:
                instances = sample_batch(cfg.gen, size, epoch, bi)
            else:
                instances = source(epoch, bi, size)
            k = cfg.k_for(instances[0].n)
            batch = rollout_batch(
                instances, params, model_cfg, k, "sample", keyed_rng(cfg.seed, 1, epoch, bi), grad=True
            )
            adv = advantages(batch.costs)
            loss = reinforce_loss(batch)
            params.zero_grad()
            nx.backward(loss)
            gn = grad_norm(params)
            if cfg.max_grad_norm is not None and gn > cfg.max_grad_norm:
                scale = cfg.max_grad_norm / gn
                for t in params.tensors.values():
                    if t.grad is not None:
                        t.grad = t.grad * scale
            adam_step(params, adam, lr, cfg.weight_decay, frozen=frozen)
            if on_batch is not None:
                on_batch(epoch, bi, batch, adv, float(loss.data))
            costs.append(batch.costs.mean())
            losses.append(float(loss.data))
            norms.append(gn)
        round_to_stored(params, adam)
        rec = EpochRecord(
            epoch + 1,
            float(np.mean(costs)),
            float(np.mean(losses)),
            float(np.mean(norms)),
            lr,
            time.perf_counter() - t0,
        )
        records.append(rec)
        if stream:
            print(rec.line(), file=stream, flush=True)
        log.info(rec.line())
        last_epoch = epoch + 1 == cfg.epochs
        due = cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0
        if out_dir is not None and (due or last_epoch):
            out_dir.mkdir(parents=True, exist_ok=True)
            ckpt_path = out_dir / f"epoch{epoch + 1:03d}.ckpt"
            try:
                save_checkpoint(ckpt_path, params, adam=adam, meta={"epoch": epoch + 1})
            except OSError as exc:
                raise OSError(f"checkpoint write failed after epoch {epoch + 1}: {exc}") from exc
    return TrainReport(records, params, adam, ckpt_path)


def resume(path: str | Path, cfg: TrainConfig, **kw) -> TrainReport:
    """Continue a run from an epoch-boundary checkpoint, optimizer state included."""
    from .io import load_checkpoint

    ck = load_checkpoint(path)
    return train(
        cfg, ck.cfg, params=ck.params, adam=ck.adam, start_epoch=int(ck.meta.get("epoch", 0)), **kw
    )


def fine_tune(
    checkpoint: str | Path,
    cfg: TrainConfig,
    freeze: str = "none",
    model_cfg: ModelConfig | None = None,
    **kw,
) -> TrainReport:
    """Continue training a checkpoint on ``cfg.gen`` data.

    The learning-rate schedule and the optimizer state restart from zero.
    ``freeze`` names the part that receives no updates: "encoder" fine-tunes
    the decoder only, "decoder" the encoder only.
    """
    from .io import load_checkpoint

    ck = load_checkpoint(checkpoint, expect=model_cfg)
    log.info("fine-tuning %s: schedule restarts at epoch 0, freeze=%s", checkpoint, freeze)
    return train(cfg, ck.cfg, params=ck.params, adam=AdamState(), freeze=freeze, **kw)
