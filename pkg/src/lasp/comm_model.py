"""Communication volume of sequence-parallel attention schemes.

Analytic per-layer element counts for four schemes, evaluated with exact
rational arithmetic, plus measurement of the simulated LASP traces.

Measured convention for LASP: per group, per layer, per direction the ring
carries ``(T - 1) * h * (d / h) ** 2`` elements, independent of ``N``.
"""

from __future__ import annotations

import csv
import io
import json
from collections import Counter, defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

from .errors import ProtocolError, ShapeError
from .runtime import BYTES_PER_ELEMENT, CommTrace

LASP = "lasp"
RING_ATTENTION = "ring_attention"
ULYSSES = "deepspeed_ulysses"
MEGATRON_SP = "megatron_sp"
METHODS = (LASP, RING_ATTENTION, ULYSSES, MEGATRON_SP)

LABELS = {
    LASP: "LASP",
    RING_ATTENTION: "Ring Attention",
    ULYSSES: "DeepSpeed-Ulysses",
    MEGATRON_SP: "Megatron-SP",
}

FULL_FORMULAS = {
    LASP: "B*d**2/h",
    RING_ATTENTION: "2*B*N*d/h",
    ULYSSES: "4*B*N*d/T",
    MEGATRON_SP: "2*B*N*d + 4*B*N*d/T",
}

SIMPLIFIED_FORMULAS = {
    LASP: "d/h",
    RING_ATTENTION: "2*N/h",
    ULYSSES: "4*N/T",
    MEGATRON_SP: "2*N + 4*N/T",
}


@dataclass(frozen=True)
class CommParams:
    batch: int
    seq_len: int
    dim: int
    heads: int
    sp_size: int

    def __post_init__(self):
        for name in ("batch", "seq_len", "dim", "heads", "sp_size"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dim % self.heads:
            raise ShapeError(f"head count {self.heads} does not divide dimension {self.dim}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def _check_method(method: str) -> str:
    if method not in METHODS:
        raise KeyError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    return method


def analytic_volume(method: str, p: CommParams) -> Fraction:
    B, N, d, h, T = (Fraction(x) for x in (p.batch, p.seq_len, p.dim, p.heads, p.sp_size))
    method = _check_method(method)
    if method == LASP:
        return B * d * d / h
    if method == RING_ATTENTION:
        return 2 * B * N * d / h
    if method == ULYSSES:
        return 4 * B * N * d / T
    return 2 * B * N * d + 4 * B * N * d / T


def simplified_volume(method: str, p: CommParams) -> Fraction:
    """Full volume with the common factor ``B * d`` divided out."""
    return analytic_volume(method, p) / (p.batch * p.dim)


@dataclass(frozen=True)
class Crossover:
    ordering: list[str]
    volumes: dict[str, Fraction]
    lasp_lowest: bool  # strictly below every other method
    lasp_tied: bool  # equal to the lowest other method


def crossover_check(p: CommParams) -> Crossover:
    vols = {m: simplified_volume(m, p) for m in METHODS}
    ordering = sorted(METHODS, key=lambda m: (vols[m], METHODS.index(m)))
    best_other = min(v for m, v in vols.items() if m != LASP)
    return Crossover(
        ordering=ordering,
        volumes=vols,
        lasp_lowest=vols[LASP] < best_other,
        lasp_tied=vols[LASP] == best_other,
    )


@dataclass
class VolumeReport:
    params: CommParams
    full: dict[str, Fraction]
    simplified: dict[str, Fraction]
    crossover: Crossover
    measured: dict | None = None

    def to_dict(self) -> dict:
        def num(x: Fraction):
            return int(x) if x.denominator == 1 else float(x)

        rows = []
        for m in METHODS:
            rows.append(
                {
                    "method": m,
                    "label": LABELS[m],
                    "full_formula": FULL_FORMULAS[m],
                    "full_elements": num(self.full[m]),
                    "full_bytes": num(self.full[m] * BYTES_PER_ELEMENT),
                    "simplified_formula": SIMPLIFIED_FORMULAS[m],
                    "simplified": num(self.simplified[m]),
                }
            )
        return {
            "params": {
                "B": self.params.batch,
                "N": self.params.seq_len,
                "d": self.params.dim,
                "h": self.params.heads,
                "T": self.params.sp_size,
            },
            "methods": rows,
            "ordering": self.crossover.ordering,
            "lasp_lowest": self.crossover.lasp_lowest,
            "lasp_tied": self.crossover.lasp_tied,
            "measured": self.measured,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self, methods=METHODS) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "full_formula", "full_elements", "full_bytes", "simplified_formula", "simplified"])
        for row in self.to_dict()["methods"]:
            if row["method"] not in methods:
                continue
            writer.writerow(
                [row["label"], row["full_formula"], row["full_elements"], row["full_bytes"], row["simplified_formula"], row["simplified"]]
            )
        if self.measured is not None:
            per = self.measured["per_group_layer_direction"]
            writer.writerow(["LASP (measured)", "(T-1)*h*(d/h)**2", per, per * BYTES_PER_ELEMENT, "", ""])
        return buf.getvalue()

    def to_text(self, methods=METHODS) -> str:
        d = self.to_dict()
        header = ("Method", "Full", "Elements", "Simplified", "Value")
        body = [
            (r["label"], r["full_formula"], str(r["full_elements"]), r["simplified_formula"], str(r["simplified"]))
            for r in d["methods"]
            if r["method"] in methods
        ]
        if self.measured is not None:
            per = self.measured["per_group_layer_direction"]
            body.append(("LASP (measured)", "(T-1)*h*(d/h)**2", str(per), "", ""))
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header, *body]]
        verdict = "lowest" if d["lasp_lowest"] else ("tied for lowest" if d["lasp_tied"] else "not lowest")
        lines.append(f"LASP is {verdict}; ordering: {', '.join(LABELS[m] for m in d['ordering'])}")
        return "\n".join(lines) + "\n"


def volume_report(p: CommParams, trace: CommTrace | None = None, passes: int = 1) -> VolumeReport:
    full = {m: analytic_volume(m, p) for m in METHODS}
    simple = {m: simplified_volume(m, p) for m in METHODS}
    measured = measure_trace(trace, p, passes=passes) if trace is not None else None
    return VolumeReport(p, full, simple, crossover_check(p), measured)


def expected_lasp_elements(p: CommParams) -> int:
    return (p.sp_size - 1) * p.heads * p.head_dim**2


def measure_trace(trace: CommTrace | Iterable, p: CommParams, passes: int = 1) -> dict:
    """Aggregate payload elements per (direction, layer, group).

    ``passes`` is the number of forward/backward rounds the trace contains
    (several batches per group run as successive rounds); per-group figures
    are divided by it. Raises ``ProtocolError`` on malformed records or when groups disagree,
    since the measured figure is only meaningful when they agree.
    """
    sums: dict[tuple[str, int, int], int] = defaultdict(int)
    counts: dict[tuple[str, int, int], int] = defaultdict(int)
    total = 0
    for rec in trace:
        try:
            tag, layer, src, dst, elements = rec.tag, int(rec.layer), int(rec.src), int(rec.dst), int(rec.elements)
        except (AttributeError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed trace record {rec!r}: {exc}") from None
        if tag not in ("KV_FWD", "DKV_BWD") or elements < 0:
            raise ProtocolError(f"malformed trace record {rec!r}")
        group = src // p.sp_size
        if dst // p.sp_size != group:
            raise ProtocolError(f"record {rec!r} crosses a group boundary")
        sums[(tag, layer, group)] += elements
        counts[(tag, layer, group)] += 1
        total += elements

    if passes < 1:
        raise ShapeError(f"passes must be positive, got {passes}")
    for key in sums:
        if sums[key] % passes or counts[key] % passes:
            raise ProtocolError(f"volume for {key} is not a whole multiple of {passes} passes")
        sums[key] //= passes
        counts[key] //= passes
    per_key = sorted(sums.items())
    values = {v for _, v in per_key}
    if len(values) > 1:
        raise ProtocolError(f"groups/directions disagree on volume: {sorted(values)}")
    per = values.pop() if values else 0
    return {
        "total_elements": total,
        "total_bytes": total * BYTES_PER_ELEMENT,
        "per_group_layer_direction": per,
        "per_group_layer_direction_bytes": per * BYTES_PER_ELEMENT,
        "messages_per_group_layer_direction": sorted(set(counts.values())),
        "expected_per_group_layer_direction": expected_lasp_elements(p),
        "matches_expected": per == expected_lasp_elements(p),
        "breakdown": [
            {"tag": tag, "layer": layer, "group": group, "elements": v, "messages": counts[(tag, layer, group)]}
            for (tag, layer, group), v in per_key
        ],
    }


def size_signature(trace: CommTrace) -> Counter:
    """Multiset of (tag, layer, head, src, dst, elements); payload values excluded."""
    return Counter((r.tag, r.layer, r.head, r.src, r.dst, r.elements) for r in trace)


def traces_length_independent(traces: Iterable[CommTrace]) -> bool:
    sigs = [size_signature(t) for t in traces]
    return all(s == sigs[0] for s in sigs[1:])
