"""Serial reference implementations of causal linear attention with decay.

Two forward routes are kept deliberately independent: one builds the full
``N x N`` decay mask and uses the left product, the other walks the
``kv`` recurrence one token at a time. The backward pass follows the
per-token recurrences, and a central-difference checker provides a third,
derivative-free opinion on the gradients.

Loss convention for gradients: ``L = sum(O * dO)``, so ``dO`` is exactly the
upstream gradient of ``O``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, NumericError, ShapeError
from .linalg import Matrix, as_matrix


def validate_decay(lam: float) -> float:
    lam = float(lam)
    if not (0.0 < lam <= 1.0):
        raise DomainError(f"decay rate must lie in (0, 1], got {lam}")
    return lam


@dataclass(frozen=True)
class AttnProblem:
    q: Matrix
    k: Matrix
    v: Matrix
    lam: float = 1.0

    def __post_init__(self):
        q = as_matrix(self.q, name="Q")
        k = as_matrix(self.k, name="K")
        v = as_matrix(self.v, name="V")
        if not (q.shape == k.shape == v.shape):
            raise ShapeError(f"Q, K, V shapes differ: {q.shape}, {k.shape}, {v.shape}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "lam", validate_decay(self.lam))

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.q.shape[1]

    def replace(self, **changes) -> "AttnProblem":
        fields = {"q": self.q, "k": self.k, "v": self.v, "lam": self.lam}
        fields.update(changes)
        return AttnProblem(**fields)


def _require_finite(p: AttnProblem) -> None:
    for name, m in (("Q", p.q), ("K", p.k), ("V", p.v)):
        if not np.all(np.isfinite(m)):
            raise NumericError(f"{name} contains NaN or Inf")


def decay_mask(n: int, lam: float) -> Matrix:
    """Full causal mask with ``lam ** (i - j)`` on and below the diagonal."""
    idx = np.arange(n)
    gap = idx[:, None] - idx[None, :]
    return np.where(gap >= 0, np.power(lam, np.maximum(gap, 0).astype(np.float64)), 0.0)


def dense_masked_forward(p: AttnProblem) -> Matrix:
    _require_finite(p)
    scores = (p.q @ p.k.T) * decay_mask(p.n, p.lam)
    return scores @ p.v


def serial_forward(p: AttnProblem, record_every: int | None = None) -> tuple[Matrix, list[Matrix]]:
    """Token-by-token recurrence ``kv_s = lam * kv_{s-1} + k_s v_s^T``, ``o_s = kv_s^T q_s``.

    With ``record_every = C`` the returned trace holds ``kv`` after
    ``0, C, 2C, ...`` tokens (entry 0 is the zero state). Otherwise the trace
    is empty.
    """
    _require_finite(p)
    n, d = p.q.shape
    kv = np.zeros((d, d))
    out = np.empty((n, d))
    trace: list[Matrix] = []
    if record_every:
        trace.append(kv.copy())
    for s in range(n):
        kv = p.lam * kv + np.outer(p.k[s], p.v[s])
        out[s] = p.q[s] @ kv
        if record_every and (s + 1) % record_every == 0:
            trace.append(kv.copy())
    return out, trace


def serial_backward(p: AttnProblem, d_out) -> tuple[Matrix, Matrix, Matrix]:
    d_out = as_matrix(d_out, name="dO")
    if d_out.shape != p.q.shape:
        raise ShapeError(f"dO shape {d_out.shape} does not match {p.q.shape}")
    n, d = p.q.shape
    dq = np.empty((n, d))
    dk = np.empty((n, d))
    dv = np.empty((n, d))

    kv = np.zeros((d, d))
    for s in range(n):
        kv = p.lam * kv + np.outer(p.k[s], p.v[s])
        dq[s] = kv @ d_out[s]

    dkv = np.zeros((d, d))
    for s in range(n - 1, -1, -1):
        dkv = p.lam * dkv + np.outer(p.q[s], d_out[s])
        dk[s] = dkv @ p.v[s]
        dv[s] = dkv.T @ p.k[s]
    return dq, dk, dv


def linear_loss(forward: Callable[[AttnProblem], Matrix], d_out) -> Callable[[AttnProblem], float]:
    """Scalar loss ``sum(forward(p) * d_out)`` for use with the difference checker."""
    d_out = np.asarray(d_out, dtype=np.float64)
    return lambda p: float(np.sum(forward(p) * d_out))


def finite_difference_grads(
    loss: Callable[[AttnProblem], float],
    p: AttnProblem,
    epsilon: float = 1e-6,
) -> tuple[Matrix, Matrix, Matrix]:
    """Central differences of ``loss`` with respect to every entry of Q, K and V."""
    if not (1e-7 <= epsilon <= 1e-4):
        raise DomainError(f"epsilon must lie in [1e-7, 1e-4], got {epsilon}")
    grads = []
    for field in ("q", "k", "v"):
        base = getattr(p, field)
        grad = np.empty_like(base)
        work = base.copy()
        for idx in np.ndindex(*base.shape):
            orig = work[idx]
            work[idx] = orig + epsilon
            plus = loss(p.replace(**{field: work}))
            work[idx] = orig - epsilon
            minus = loss(p.replace(**{field: work}))
            work[idx] = orig
            grad[idx] = (plus - minus) / (2.0 * epsilon)
        grads.append(grad)
    return grads[0], grads[1], grads[2]


def central_difference(f: Callable[[float], float], x: float, epsilon: float = 1e-6) -> float:
    """Scalar central difference, mostly for sanity-checking the step rule."""
    return (f(x + epsilon) - f(x - epsilon)) / (2.0 * epsilon)
