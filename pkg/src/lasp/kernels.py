"""Chunk-level kernels for causal linear attention with decay.

A sequence of length ``N`` is cut into ``T`` chunks of ``C = N / T`` rows.
Within a chunk the output is the masked left product; contributions from
earlier chunks arrive through a ``d x d`` state that is decayed by
``lam ** C`` per chunk. The backward pass mirrors this with a state that
flows from later chunks to earlier ones.

Indexing used throughout (0-based chunk ``t``):

* ``kv_cache[t]`` is the state *entering* chunk ``t`` (zero for ``t = 0``).
* ``dkv_next`` for chunk ``t`` is the state produced by chunk ``t + 1``
  (zero for the last chunk); it summarises every position after chunk ``t``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, PartitionError, ShapeError, StateError, UnderflowWarning
from .linalg import Matrix, as_matrix, hadamard, matmul, row_scale, transpose
from .oracle import validate_decay

UNDERFLOW_THRESHOLD = 1e-300


@dataclass(frozen=True)
class DecayStructures:
    chunk_size: int
    lam: float
    mask: Matrix
    lambda_fwd: np.ndarray
    lambda_rev: np.ndarray
    lambda_c: float


@dataclass(frozen=True)
class ChunkInputs:
    q: Matrix
    k: Matrix
    v: Matrix
    index: int = 1  # 1-based chunk position in its sequence

    def __post_init__(self):
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise ShapeError(f"chunk shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")
        if self.index < 1:
            raise DomainError(f"chunk index is 1-based, got {self.index}")

    @property
    def rows(self) -> int:
        return self.q.shape[0]


def build_decay(chunk_size: int, lam: float) -> DecayStructures:
    if chunk_size < 1:
        raise DomainError(f"chunk size must be >= 1, got {chunk_size}")
    lam = validate_decay(lam)

    # powers[j] = lam**j by repeated multiplication
    powers = np.empty(chunk_size + 1)
    powers[0] = 1.0
    for j in range(1, chunk_size + 1):
        powers[j] = powers[j - 1] * lam

    idx = np.arange(chunk_size)
    gap = idx[:, None] - idx[None, :]
    mask = np.where(gap >= 0, powers[np.clip(gap, 0, None)], 0.0)
    lambda_c = float(powers[chunk_size])
    if lambda_c < UNDERFLOW_THRESHOLD:
        warnings.warn(
            f"lam**C = {lambda_c:.3g} for lam={lam}, C={chunk_size}; carried state is fully decayed",
            UnderflowWarning,
            stacklevel=2,
        )
    return DecayStructures(
        chunk_size=chunk_size,
        lam=lam,
        mask=mask,
        lambda_fwd=powers[1:].copy(),
        lambda_rev=powers[chunk_size - 1 :: -1].copy(),
        lambda_c=lambda_c,
    )


def _check_chunk(rows: int, d: DecayStructures) -> None:
    if rows != d.chunk_size:
        raise ShapeError(f"chunk has {rows} rows but decay structures were built for C={d.chunk_size}")


def _check_state(state: Matrix, width: int, name: str) -> None:
    if state is None:
        raise StateError(f"{name} is missing")
    if state.shape != (width, width):
        raise ShapeError(f"{name} must be {width}x{width}, got {state.shape}")


def intra_forward(ci: ChunkInputs, d: DecayStructures) -> Matrix:
    _check_chunk(ci.rows, d)
    return matmul(hadamard(matmul(ci.q, transpose(ci.k)), d.mask), ci.v)


def inter_forward(q: Matrix, kv_prev: Matrix, d: DecayStructures) -> Matrix:
    _check_chunk(q.shape[0], d)
    _check_state(kv_prev, q.shape[1], "kv_prev")
    return matmul(row_scale(q, d.lambda_fwd), kv_prev)


def kv_update(kv_prev: Matrix, k: Matrix, v: Matrix, d: DecayStructures) -> Matrix:
    _check_chunk(k.shape[0], d)
    if k.shape != v.shape:
        raise ShapeError(f"K {k.shape} and V {v.shape} differ")
    _check_state(kv_prev, k.shape[1], "kv_prev")
    return d.lambda_c * kv_prev + matmul(transpose(row_scale(k, d.lambda_rev)), v)


def intra_backward(ci: ChunkInputs, d_out: Matrix, d: DecayStructures) -> tuple[Matrix, Matrix, Matrix]:
    _check_chunk(ci.rows, d)
    if d_out.shape != ci.q.shape:
        raise ShapeError(f"dO {d_out.shape} does not match chunk {ci.q.shape}")
    dov = hadamard(matmul(d_out, transpose(ci.v)), d.mask)
    qk = hadamard(matmul(ci.q, transpose(ci.k)), d.mask)
    dq = matmul(dov, ci.k)
    dk = matmul(transpose(dov), ci.q)
    dv = matmul(transpose(qk), d_out)
    return dq, dk, dv


def inter_backward_q(d_out: Matrix, kv_prev: Matrix | None, d: DecayStructures) -> Matrix:
    _check_chunk(d_out.shape[0], d)
    _check_state(kv_prev, d_out.shape[1], "cached kv state")
    return matmul(row_scale(d_out, d.lambda_fwd), transpose(kv_prev))


def inter_backward_k(v: Matrix, dkv_next: Matrix, d: DecayStructures) -> Matrix:
    _check_chunk(v.shape[0], d)
    _check_state(dkv_next, v.shape[1], "dkv_next")
    return matmul(row_scale(v, d.lambda_rev), transpose(dkv_next))


def inter_backward_v(k: Matrix, dkv_next: Matrix, d: DecayStructures) -> Matrix:
    _check_chunk(k.shape[0], d)
    _check_state(dkv_next, k.shape[1], "dkv_next")
    return matmul(row_scale(k, d.lambda_rev), dkv_next)


def dkv_update(dkv_next: Matrix, q: Matrix, d_out: Matrix, d: DecayStructures) -> Matrix:
    _check_chunk(q.shape[0], d)
    if d_out.shape != q.shape:
        raise ShapeError(f"dO {d_out.shape} does not match Q {q.shape}")
    _check_state(dkv_next, q.shape[1], "dkv_next")
    return d.lambda_c * dkv_next + matmul(transpose(row_scale(q, d.lambda_fwd)), d_out)


def chunk_forward(ci: ChunkInputs, kv_prev: Matrix, d: DecayStructures) -> tuple[Matrix, Matrix]:
    """Output of one chunk given the incoming state, and the outgoing state."""
    out = intra_forward(ci, d) + inter_forward(ci.q, kv_prev, d)
    return out, kv_update(kv_prev, ci.k, ci.v, d)


def chunk_backward(
    ci: ChunkInputs, d_out: Matrix, kv_prev: Matrix, dkv_next: Matrix, d: DecayStructures
) -> tuple[Matrix, Matrix, Matrix, Matrix]:
    """Gradients of one chunk and the state to hand to the previous chunk."""
    dq_i, dk_i, dv_i = intra_backward(ci, d_out, d)
    dq = dq_i + inter_backward_q(d_out, kv_prev, d)
    dk = dk_i + inter_backward_k(ci.v, dkv_next, d)
    dv = dv_i + inter_backward_v(ci.k, dkv_next, d)
    return dq, dk, dv, dkv_update(dkv_next, ci.q, d_out, d)


def split_rows(x, chunk_size: int) -> list[Matrix]:
    """Contiguous copies of consecutive ``chunk_size``-row blocks."""
    x = as_matrix(x)
    n = x.shape[0]
    if chunk_size < 1 or n % chunk_size:
        raise PartitionError(f"chunk size {chunk_size} does not divide sequence length {n}")
    return [x[s : s + chunk_size].copy() for s in range(0, n, chunk_size)]


def chunked_forward_serial(q, k, v, lam: float, chunk_size: int) -> tuple[Matrix, list[Matrix]]:
    qs, ks, vs = (split_rows(m, chunk_size) for m in (q, k, v))
    d = build_decay(chunk_size, lam)
    width = qs[0].shape[1]
    kv = np.zeros((width, width))
    outs, cache = [], []
    for t, (qt, kt, vt) in enumerate(zip(qs, ks, vs)):
        cache.append(kv)
        out, kv = chunk_forward(ChunkInputs(qt, kt, vt, t + 1), kv, d)
        outs.append(out)
    return np.concatenate(outs, axis=0), cache


def chunked_backward_serial(
    q, k, v, d_out, lam: float, chunk_size: int, kv_cache: list[Matrix]
) -> tuple[Matrix, Matrix, Matrix]:
    qs, ks, vs, dos = (split_rows(m, chunk_size) for m in (q, k, v, d_out))
    if len(kv_cache) != len(qs):
        raise StateError(f"kv cache holds {len(kv_cache)} states for {len(qs)} chunks")
    d = build_decay(chunk_size, lam)
    width = qs[0].shape[1]
    dkv = np.zeros((width, width))
    dq, dk, dv = [None] * len(qs), [None] * len(qs), [None] * len(qs)
    for t in range(len(qs) - 1, -1, -1):
        ci = ChunkInputs(qs[t], ks[t], vs[t], t + 1)
        dq[t], dk[t], dv[t], dkv = chunk_backward(ci, dos[t], kv_cache[t], dkv, d)
    return np.concatenate(dq), np.concatenate(dk), np.concatenate(dv)
