"""End-to-end simulated training step: scatter, forward, backward, gradient sync."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fixtures import SplitMix64
from .linalg import Matrix
from .runtime import (
    LOCKSTEP,
    CommTrace,
    DistributionPlan,
    ProjectionWeights,
    World,
    allreduce_mean_gradients,
    gather_heads,
    plan_distribution,
    project_qkv,
    run_backward,
    run_forward,
    scatter_heads,
    scatter_sequence,
)

GRAD_NAMES = ("dQ", "dK", "dV")


@dataclass
class SimulationInputs:
    x: np.ndarray  # (B, N, d)
    weights: ProjectionWeights
    d_out: np.ndarray  # (B, N, d)


@dataclass
class SimulationResult:
    plan: DistributionPlan
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    out: np.ndarray
    grads: dict[str, np.ndarray]
    group_grads: list[dict[str, Matrix]]
    synced_grads: list[dict[str, Matrix]]
    trace: CommTrace


def make_inputs(seed: int, batch: int, n: int, d: int) -> SimulationInputs:
    """Embeddings and upstream gradients in [-1, 1); weights scaled by 1/sqrt(d)."""
    rng = SplitMix64(seed)
    x = rng.uniform((batch, n, d))
    scale = 1.0 / np.sqrt(d)
    w = ProjectionWeights(*(scale * rng.uniform((d, d)) for _ in range(3)))
    d_out = rng.uniform((batch, n, d))
    return SimulationInputs(x, w, d_out)


def simulate(inputs: SimulationInputs, heads: int, world_size: int, sp_size: int, lams, mode: str = LOCKSTEP) -> SimulationResult:
    x = np.asarray(inputs.x, dtype=np.float64)
    batch, n, d = x.shape
    plan = plan_distribution(n, world_size, sp_size, batch)
    trace = CommTrace()
    q, k, v, out = (np.empty_like(x) for _ in range(4))
    grads = {name: np.empty_like(x) for name in GRAD_NAMES}

    for rnd in range(plan.round_count):
        world = World(plan.topology, mode=mode, trace=trace)
        members = plan.batches_in_round(rnd)
        for b in members:
            chunks = scatter_sequence(x[b], plan, b)
            for t, r in enumerate(plan.ranks_of_batch(b), start=1):
                world.workers[r].load(project_qkv(chunks[r], inputs.weights, heads, t))
        outs = run_forward(world, lams)
        d_out = {}
        for b in members:
            d_out.update(scatter_heads(inputs.d_out[b], plan, b, heads))
        g = run_backward(world, d_out, lams)
        for b in members:
            ranks = plan.ranks_of_batch(b)
            for name, store in (("q", q), ("k", k), ("v", v)):
                parts = {r: {h: getattr(world.workers[r].chunks[(0, h)], name) for h in range(heads)} for r in ranks}
                store[b] = gather_heads(parts, plan, b, heads)
            out[b] = gather_heads(outs, plan, b, heads)
            for i, name in enumerate(GRAD_NAMES):
                grads[name][b] = gather_heads({r: {h: g[r][h][i] for h in range(heads)} for r in ranks}, plan, b, heads)

    group_grads = []
    for grp in range(plan.topology.group_count):
        mine = [b for b in range(batch) if plan.group_of_batch(b) == grp]
        group_grads.append({name: np.mean(grads[name][mine], axis=0) for name in GRAD_NAMES})
    synced = allreduce_mean_gradients(group_grads)
    return SimulationResult(plan, q, k, v, out, grads, group_grads, synced, trace)
