"""Generalised linear recurrence ``m_t = o_t (.) m_{t-1} + e_t i_t^T``.

Many linear-complexity sequence models fit this template with a ``k x d``
memory and a readout ``y_t = m_t^T s_t``. They differ in what plays the
roles of the input ``i_t``, expand ``e_t``, oscillation ``o_t`` and shrink
``s_t`` states. Three models are executable here; the rest of the family
is listed as metadata only.

Oscillation kinds:

``scalar``
    ``o_t`` is a number multiplying the whole memory.
``row``
    ``o_t`` has length ``k`` and scales memory rows.
``full``
    ``o_t`` is ``k x d`` and applied elementwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import kernels
from .errors import ShapeError
from .linalg import Matrix, relative_error
from .oracle import validate_decay

SCALAR = "scalar"
ROW = "row"
FULL = "full"
OSCILLATION_KINDS = (SCALAR, ROW, FULL)

NOT_CHUNKABLE = "not chunkable by this artifact"


def general_step(m_prev: Matrix, o_t, e_t, i_t, kind: str = SCALAR) -> Matrix:
    m_prev = np.asarray(m_prev, dtype=np.float64)
    e_t = np.asarray(e_t, dtype=np.float64).reshape(-1)
    i_t = np.asarray(i_t, dtype=np.float64).reshape(-1)
    k, d = m_prev.shape
    if e_t.shape != (k,) or i_t.shape != (d,):
        raise ShapeError(f"expand {e_t.shape} / input {i_t.shape} do not fit a {k}x{d} memory")
    if kind == SCALAR:
        if np.ndim(o_t) != 0:
            raise ShapeError("scalar oscillation must be a number")
        decayed = float(o_t) * m_prev
    elif kind == ROW:
        o_t = np.asarray(o_t, dtype=np.float64)
        if o_t.shape != (k,):
            raise ShapeError(f"row oscillation must have shape ({k},), got {o_t.shape}")
        decayed = o_t[:, None] * m_prev
    elif kind == FULL:
        o_t = np.asarray(o_t, dtype=np.float64)
        if o_t.shape != (k, d):
            raise ShapeError(f"full oscillation must have shape ({k}, {d}), got {o_t.shape}")
        decayed = o_t * m_prev
    else:
        raise ShapeError(f"unknown oscillation kind {kind!r}")
    return decayed + np.outer(e_t, i_t)


@dataclass(frozen=True)
class RecurrenceSpec:
    """Memory shape, oscillation kind and per-step state providers.

    Each provider maps ``(inputs, t)`` to the state at step ``t`` (0-based).
    ``decay`` is set when the oscillation is one constant scalar for every
    step; that is the case the chunk kernels can reproduce.
    """

    k: int
    d: int
    kind: str
    input_state: Callable[[Mapping, int], np.ndarray]
    expand: Callable[[Mapping, int], np.ndarray]
    oscillation: Callable[[Mapping, int], object]
    shrink: Callable[[Mapping, int], np.ndarray]
    decay: float | None = None


@dataclass(frozen=True)
class ModelInstance:
    name: str
    spec: RecurrenceSpec
    # maps the instance's inputs onto (Q, K, V) for the chunked path
    as_qkv: Callable[[Mapping], tuple[Matrix, Matrix, Matrix]] | None = None

    def length(self, inputs: Mapping) -> int:
        return len(next(iter(inputs.values())))


def run_model(inst: ModelInstance, inputs: Mapping) -> np.ndarray:
    """Iterate the recurrence and return the readouts ``y_1 .. y_N`` as rows."""
    spec = inst.spec
    n = inst.length(inputs)
    m = np.zeros((spec.k, spec.d))
    ys = np.empty((n, spec.d))
    for t in range(n):
        m = general_step(m, spec.oscillation(inputs, t), spec.expand(inputs, t), spec.input_state(inputs, t), spec.kind)
        if m.shape != (spec.k, spec.d):
            raise ShapeError(f"memory drifted to {m.shape} at step {t}")
        ys[t] = m.T @ np.asarray(spec.shrink(inputs, t), dtype=np.float64).reshape(-1)
    return ys


def _qkv(inputs: Mapping) -> tuple[Matrix, Matrix, Matrix]:
    return tuple(np.asarray(inputs[n], dtype=np.float64) for n in ("q", "k", "v"))


def linear_attention(k_dim: int, v_dim: int) -> ModelInstance:
    """``kv_t = kv_{t-1} + k_t v_t^T``, ``y_t = kv_t^T q_t``; inputs ``q, k, v``.

    The all-ones elementwise oscillation is the scalar 1.
    """
    spec = RecurrenceSpec(
        k=k_dim,
        d=v_dim,
        kind=SCALAR,
        input_state=lambda x, t: x["v"][t],
        expand=lambda x, t: x["k"][t],
        oscillation=lambda x, t: 1.0,
        shrink=lambda x, t: x["q"][t],
        decay=1.0,
    )
    return ModelInstance("linear_attention", spec, _qkv)


def tnl_retnet(k_dim: int, v_dim: int, lam: float) -> ModelInstance:
    lam = validate_decay(lam)
    spec = RecurrenceSpec(
        k=k_dim,
        d=v_dim,
        kind=SCALAR,
        input_state=lambda x, t: x["v"][t],
        expand=lambda x, t: x["k"][t],
        oscillation=lambda x, t: lam,
        shrink=lambda x, t: x["q"][t],
        decay=lam,
    )
    return ModelInstance("tnl_retnet", spec, _qkv)


def hgrn() -> ModelInstance:
    """Scalar gated recurrence ``h_t = f_t h_{t-1} + (1 - f_t) x_t``, ``y_t = h_t c_t``.

    Inputs are 1-D sequences ``x`` (input), ``f`` (forget gate) and ``c``
    (output gate). The gate changes every step, so no constant decay exists.
    """
    spec = RecurrenceSpec(
        k=1,
        d=1,
        kind=SCALAR,
        input_state=lambda x, t: [x["x"][t]],
        expand=lambda x, t: [1.0 - x["f"][t]],
        oscillation=lambda x, t: float(x["f"][t]),
        shrink=lambda x, t: [x["c"][t]],
        decay=None,
    )
    return ModelInstance("hgrn_lrn", spec)


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    input_state: str
    expand: str
    oscillation: str
    shrink: str
    memory: str
    kind: str
    executable: bool
    notes: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


REGISTRY: dict[str, RegistryEntry] = {
    e.name: e
    for e in [
        RegistryEntry("s4", "x_t", "B", "A", "C", "k x 1", FULL, False, "parameterised SSM; dynamics by reference"),
        RegistryEntry("s5", "x_t", "B", "A", "C", "k x d", FULL, False, "parameterised SSM; dynamics by reference"),
        RegistryEntry("dss", "x_t", "B", "a 1_k^T", "C", "k x d", ROW, False, "diagonal SSM; dynamics by reference"),
        RegistryEntry("tnn", "x_t", "B", "A", "C", "k x d", FULL, False, "Toeplitz network via SSM conversion"),
        RegistryEntry("linear_attention", "x_t", "B_t", "J^(kd)", "C_t", "k x d", SCALAR, True, "oscillation is the constant 1"),
        RegistryEntry("tnl_retnet", "x_t", "B_t", "lambda J^(k)", "C_t", "k x d", SCALAR, True, "constant decay lambda"),
        RegistryEntry("mamba", "x_t", "B_t", "A_t", "C_t", "k x d", FULL, False, "data-dependent elementwise decay"),
        RegistryEntry("rwkv4", "x_t", "exp(k_t)", "exp(-w)", "C_t", "1 x 1", SCALAR, False, "channel-wise; denominator dropped"),
        RegistryEntry("cosformer", "x_t", "B_t", "exp(i theta) J^(kd)", "C_t", "k x d", SCALAR, False, "complex-valued oscillation"),
        RegistryEntry("lrpe", "x_t", "B_t", "exp(i Theta) 1^(d)^T", "C_t", "k x d", ROW, False, "complex-valued oscillation"),
        RegistryEntry("gla_gateloop", "x_t", "B_t", "g_t 1_d^T", "C_t", "k x d", ROW, False, "data-dependent decay; chunking refused"),
        RegistryEntry("dur_gfw", "x_t", "B_t", "g_t gbar_t^T", "C_t", "k x d", FULL, False, "data-dependent outer-product decay"),
        RegistryEntry("hgrn_lrn", "x_t", "1 - A_t", "A_t", "C_t", "1 x 1", SCALAR, True, "data-dependent scalar gate"),
    ]
}


def registry_json() -> str:
    return json.dumps([e.to_dict() for e in REGISTRY.values()], indent=2)


@dataclass
class EquivalenceReport:
    name: str
    chunkable: bool
    chunk_size: int | None = None
    max_error: float | None = None
    tolerance: float = 1e-10
    message: str = ""
    passed: bool = field(default=False)


def chunked_scalar_equivalence(inst: ModelInstance, inputs: Mapping, chunk_size: int, tolerance: float = 1e-10) -> EquivalenceReport:
    """Compare the stepwise recurrence with the chunk kernels.

    Only instances with one constant scalar decay qualify; anything else is
    reported as not chunkable instead of being approximated.
    """
    spec = inst.spec
    if spec.kind != SCALAR or spec.decay is None or inst.as_qkv is None:
        return EquivalenceReport(inst.name, chunkable=False, message=NOT_CHUNKABLE)
    q, k, v = inst.as_qkv(inputs)
    stepwise = run_model(inst, inputs)
    chunked, _ = kernels.chunked_forward_serial(q, k, v, spec.decay, chunk_size)
    err = relative_error(chunked, stepwise)
    return EquivalenceReport(
        inst.name,
        chunkable=True,
        chunk_size=chunk_size,
        max_error=err,
        tolerance=tolerance,
        message="ok" if err <= tolerance else "mismatch",
        passed=err <= tolerance,
    )
