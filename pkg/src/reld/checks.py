"""Finite-difference verification of the full policy gradient."""

from __future__ import annotations

from .generate import GenConfig, keyed_rng, sample_instance
from .model import ModelConfig, init_params
from .numerics import GradCheckReport, grad_check
from .rollout import rollout_batch, score_trajectory

GRAD_TOL = 1e-4
GRAD_STEP = 1e-4
# absolute scale below which a gradient entry counts as zero; central
# differences at GRAD_STEP carry roughly 1e-11 of roundoff
GRAD_FLOOR = 1e-6


def policy_grad_check(
    d_h: int = 16,
    n: int = 8,
    heads: int = 4,
    layers: int = 2,
    d_ff: int = 32,
    seed: int = 0,
    h: float = GRAD_STEP,
    tol: float = GRAD_TOL,
    max_entries: int | None = 6,
    floor: float = GRAD_FLOOR,
    **flags,
) -> GradCheckReport:
    """Gradient of log p(trajectory) vs central differences on a tiny model.

    The trajectory is sampled once from the freshly initialized policy and
    then held fixed while parameters are perturbed.
    """
    cfg = ModelConfig(d_h=d_h, heads=heads, layers=layers, d_ff=d_ff, **flags)
    params = init_params(cfg, keyed_rng(seed, 0))
    inst = sample_instance(GenConfig(size_range=(n, n), seed=seed), keyed_rng(seed, 1))
    batch = rollout_batch([inst], params, cfg, 1, "sample", keyed_rng(seed, 2))
    nodes = batch.trajectory(0, 0).nodes

    def f():
        return score_trajectory(inst, nodes, params, cfg, include_first=True)

    return grad_check(
        f, params.tensors, h=h, tol=tol, max_entries=max_entries, rng=keyed_rng(seed, 3), floor=floor
    )
