"""Property suites shared by the ``verify`` and ``gradcheck`` commands."""

from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import kernels
from .fixtures import SplitMix64
from .linalg import relative_error
from .oracle import AttnProblem, dense_masked_forward, finite_difference_grads, linear_loss, serial_backward, serial_forward
from .runtime import LOCKSTEP, CommTrace, World, allreduce_mean_gradients, gather_heads, load_qkv, multihead_run, plan_distribution, run_backward, run_forward, scatter_heads, split_heads

ORACLE_TOL = 1e-12
CHUNK_TOL = 1e-10
PARALLEL_TOL = 1e-10
FD_TOL = 1e-5
HYBRID_TOL = 1e-12


@dataclass
class PropertyResult:
    name: str
    max_error: float
    tolerance: float
    passed: bool
    detail: str = ""

    @classmethod
    def check(cls, name: str, error: float, tolerance: float, detail: str = "") -> "PropertyResult":
        return cls(name, float(error), tolerance, bool(error <= tolerance), detail)

    def to_dict(self) -> dict:
        return asdict(self)


def divisors(n: int) -> list[int]:
    return [c for c in range(1, n + 1) if n % c == 0]


def random_heads(seed: int, n: int, d: int, heads: int, lam: float):
    """Full-width Q, K, V, dO plus one AttnProblem per head."""
    rng = SplitMix64(seed)
    q, k, v, do = (rng.uniform((n, d)) for _ in range(4))
    problems = [
        AttnProblem(qh, kh, vh, lam)
        for qh, kh, vh in zip(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads))
    ]
    return q, k, v, do, problems


def oracle_equivalence(problems) -> PropertyResult:
    err = max(relative_error(serial_forward(p)[0], dense_masked_forward(p)) for p in problems)
    return PropertyResult.check("oracle_equivalence", err, ORACLE_TOL)


def chunk_invariance(problems, d_out_heads) -> list[PropertyResult]:
    fwd = bwd = cache_err = 0.0
    for p, do in zip(problems, d_out_heads):
        ref_out, _ = serial_forward(p)
        ref_grads = serial_backward(p, do)
        for c in divisors(p.n):
            out, cache = kernels.chunked_forward_serial(p.q, p.k, p.v, p.lam, c)
            fwd = max(fwd, relative_error(out, ref_out))
            grads = kernels.chunked_backward_serial(p.q, p.k, p.v, do, p.lam, c, cache)
            bwd = max(bwd, *(relative_error(g, r) for g, r in zip(grads, ref_grads)))
            _, trace = serial_forward(p, record_every=c)
            cache_err = max(cache_err, *(relative_error(a, b) for a, b in zip(cache, trace)))
    return [
        PropertyResult.check("chunk_invariance_forward", fwd, CHUNK_TOL, f"C in divisors of {problems[0].n}"),
        PropertyResult.check("chunk_invariance_backward", bwd, CHUNK_TOL),
        PropertyResult.check("kv_cache_consistency", cache_err, ORACLE_TOL),
    ]


def parallel_equivalence(q, k, v, do, problems, heads: int, sp_size: int, lam: float, mode: str) -> list[PropertyResult]:
    run = multihead_run(q, k, v, heads, sp_size, lam, d_out=do, mode=mode)
    do_heads = split_heads(do, heads)
    fwd = bwd = 0.0
    bit_fwd = bit_bwd = 0.0
    out_heads = split_heads(run.out, heads)
    grad_heads = [split_heads(g, heads) for g in run.grads]
    c = q.shape[0] // sp_size
    for h, p in enumerate(problems):
        fwd = max(fwd, relative_error(out_heads[h], serial_forward(p)[0]))
        ref = serial_backward(p, do_heads[h])
        bwd = max(bwd, *(relative_error(grad_heads[i][h], ref[i]) for i in range(3)))
        ch_out, cache = kernels.chunked_forward_serial(p.q, p.k, p.v, lam, c)
        ch_grads = kernels.chunked_backward_serial(p.q, p.k, p.v, do_heads[h], lam, c, cache)
        bit_fwd = max(bit_fwd, float(np.max(np.abs(out_heads[h] - ch_out))))
        bit_bwd = max(bit_bwd, *(float(np.max(np.abs(grad_heads[i][h] - ch_grads[i]))) for i in range(3)))
    results = [
        PropertyResult.check("parallel_forward", fwd, PARALLEL_TOL, f"T={sp_size}, mode={mode}"),
        PropertyResult.check("parallel_backward", bwd, PARALLEL_TOL, f"T={sp_size}, mode={mode}"),
    ]
    if mode == LOCKSTEP:
        results.append(PropertyResult.check("lockstep_bit_exact", max(bit_fwd, bit_bwd), 0.0, "vs chunked serial"))
    results.append(protocol_shape(run.trace, sp_size, heads, q.shape[1] // heads, groups=1))
    return results


def protocol_shape(trace: CommTrace, sp_size: int, heads: int, head_dim: int, groups: int, layers: int = 1) -> PropertyResult:
    counts = Counter((r.tag, r.layer, r.src // sp_size, r.head) for r in trace)
    bad = 0
    for tag in ("KV_FWD", "DKV_BWD"):
        for layer in range(layers):
            for g in range(groups):
                for h in range(heads):
                    bad += abs(counts.get((tag, layer, g, h), 0) - (sp_size - 1))
    bad += sum(1 for r in trace if r.elements != head_dim**2)
    bad += sum(1 for r in trace if r.src // sp_size != r.dst // sp_size)
    bad += sum(1 for r in trace if (r.tag == "KV_FWD" and r.dst != r.src + 1) or (r.tag == "DKV_BWD" and r.dst != r.src - 1))
    return PropertyResult.check(
        "protocol_shape", bad, 0, f"{sp_size - 1} messages of {head_dim ** 2} elements per group/layer/head/direction"
    )


def hybrid_allreduce(seed: int, n: int, d: int, heads: int, world: int, sp_size: int, lam: float, mode: str) -> PropertyResult:
    """G groups each process one batch; the synced gradient equals the serial batch mean."""
    plan = plan_distribution(n, world, sp_size, world // sp_size)
    rng = SplitMix64(seed ^ 0x5EED)
    batches = [[rng.uniform((n, d)) for _ in range(4)] for _ in range(plan.batch_count)]
    w = World(plan.topology, mode=mode)
    for b, (q, k, v, _) in enumerate(batches):
        load_qkv(w, plan, b, q, k, v, heads)
    run_forward(w, lam)
    d_out = {}
    for b, (_, _, _, do) in enumerate(batches):
        d_out.update(scatter_heads(do, plan, b, heads))
    g = run_backward(w, d_out, lam)
    group_sets = []
    for b in range(plan.batch_count):
        ranks = plan.ranks_of_batch(b)
        group_sets.append(
            {name: gather_heads({r: {h: g[r][h][i] for h in range(heads)} for r in ranks}, plan, b, heads) for i, name in enumerate(("dQ", "dK", "dV"))}
        )
    synced = allreduce_mean_gradients(group_sets)

    expected = {name: np.zeros((n, d)) for name in ("dQ", "dK", "dV")}
    for q, k, v, do in batches:
        for h, (qh, kh, vh, doh) in enumerate(zip(*(split_heads(m, heads) for m in (q, k, v, do)))):
            ref = serial_backward(AttnProblem(qh, kh, vh, lam), doh)
            dh = d // heads
            for i, name in enumerate(("dQ", "dK", "dV")):
                expected[name][:, h * dh : (h + 1) * dh] += ref[i] / plan.batch_count
    err = max(relative_error(s[name], expected[name]) for s in synced for name in expected)
    return PropertyResult.check("hybrid_allreduce_mean", err, HYBRID_TOL, f"G={plan.topology.group_count}")


def verify_suite(*, n: int, d: int, heads: int, world: int, sp_size: int, lam: float, seed: int, mode: str) -> list[PropertyResult]:
    q, k, v, do, problems = random_heads(seed, n, d, heads, lam)
    results = [oracle_equivalence(problems)]
    results += chunk_invariance(problems, split_heads(do, heads))
    results += parallel_equivalence(q, k, v, do, problems, heads, sp_size, lam, mode)
    if world // sp_size > 1:
        results.append(hybrid_allreduce(seed, n, d, heads, world, sp_size, lam, mode))
    return results


def gradcheck_suite(*, n: int, d: int, heads: int, sp_size: int, lam: float, seed: int, mode: str, epsilons=(1e-5, 1e-6)) -> list[PropertyResult]:
    """Runtime gradients vs central differences of the dense oracle, per head.

    The configured decay and the undecayed edge case are both swept.
    """
    results = []
    for lam_case in dict.fromkeys((lam, 1.0)):
        q, k, v, do, problems = random_heads(seed, n, d, heads, lam_case)
        run = multihead_run(q, k, v, heads, sp_size, lam_case, d_out=do, mode=mode)
        grad_heads = [split_heads(g, heads) for g in run.grads]
        do_heads = split_heads(do, heads)
        for eps in epsilons:
            err = 0.0
            for h, p in enumerate(problems):
                fd = finite_difference_grads(linear_loss(dense_masked_forward, do_heads[h]), p, eps)
                err = max(err, *(relative_error(grad_heads[i][h], fd[i]) for i in range(3)))
            results.append(PropertyResult.check(f"gradcheck[lambda={lam_case:g},eps={eps:g}]", err, FD_TOL))
    return results


@contextlib.contextmanager
def tampered_kernels() -> Iterator[None]:
    """Flip the sign of the inter-chunk forward term; used to self-test the harness."""
    original = kernels.inter_forward
    kernels.inter_forward = lambda *a, **kw: -original(*a, **kw)
    try:
        yield
    finally:
        kernels.inter_forward = original
