import itertools
import json
from types import SimpleNamespace

import pytest
import sympy

from lasp.comm_model import (
    FULL_FORMULAS,
    LASP,
    MEGATRON_SP,
    METHODS,
    RING_ATTENTION,
    SIMPLIFIED_FORMULAS,
    ULYSSES,
    CommParams,
    analytic_volume,
    crossover_check,
    measure_trace,
    simplified_volume,
    traces_length_independent,
    volume_report,
)
from lasp.errors import ProtocolError, ShapeError
from lasp.fixtures import SplitMix64
from lasp.runtime import multihead_run

B, N, d, h, T = sympy.symbols("B N d h T", positive=True, integer=True)
SYMS = {"B": B, "N": N, "d": d, "h": h, "T": T}
SYMBOLIC = {
    LASP: B * d**2 / h,
    RING_ATTENTION: 2 * B * N * d / h,
    ULYSSES: 4 * B * N * d / T,
    MEGATRON_SP: 2 * B * N * d + 4 * B * N * d / T,
}


def test_worked_values():
    p = CommParams(1, 65536, 2048, 16, 64)
    assert analytic_volume(LASP, p) == 262144
    assert analytic_volume(ULYSSES, p) == 8388608
    assert simplified_volume(LASP, p) == 128
    assert simplified_volume(RING_ATTENTION, p) == 8192


def test_formula_strings_match_symbolic():
    for m in METHODS:
        assert sympy.simplify(sympy.sympify(FULL_FORMULAS[m], locals=SYMS) - SYMBOLIC[m]) == 0
        simple = sympy.sympify(SIMPLIFIED_FORMULAS[m], locals=SYMS)
        assert sympy.simplify(simple * B * d - SYMBOLIC[m]) == 0


def test_grid_against_sympy():
    grid = itertools.product((1, 2, 3), (64, 4096, 65536), (256, 2048), (1, 8, 16), (1, 4, 64))
    for b, n, dim, heads, t in grid:
        p = CommParams(b, n, dim, heads, t)
        subs = {B: b, N: n, d: dim, h: heads, T: t}
        for m in METHODS:
            expected = SYMBOLIC[m].subs(subs)
            assert analytic_volume(m, p) == expected
            assert simplified_volume(m, p) == expected / (b * dim)


def test_lasp_independent_of_length_and_sp_size():
    vols = {analytic_volume(LASP, CommParams(2, n, 512, 8, t)) for n in (64, 1024, 65536) for t in (1, 8, 32)}
    assert vols == {2 * 512 * 512 // 8}


def test_crossover_tie_and_strict_regimes():
    tie = crossover_check(CommParams(1, 2048, 2048, 16, 64))  # N/T = 32
    assert tie.lasp_tied and not tie.lasp_lowest
    below = crossover_check(CommParams(1, 1024, 2048, 16, 64))  # N/T = 16
    assert not below.lasp_lowest and not below.lasp_tied
    assert below.ordering[0] == ULYSSES
    above = crossover_check(CommParams(1, 65536, 2048, 16, 64))
    assert above.lasp_lowest and above.ordering[0] == LASP


def test_crossover_grid_with_long_sequences():
    for n, t in itertools.product((2048, 8192, 65536), (8, 16, 32)):
        p = CommParams(1, n, 2048, 16, t)
        assert crossover_check(p).lasp_lowest == (n // t > 32), (n, t)


def test_short_sequences_favour_ring():
    # when 2N < d ring attention is cheaper than the state exchange
    c = crossover_check(CommParams(1, 512, 2048, 16, 2))
    assert not c.lasp_lowest and c.ordering[0] == RING_ATTENTION


def test_megatron_always_above_ring_and_ulysses():
    for n, heads, t in itertools.product((64, 4096), (1, 16), (1, 8)):
        p = CommParams(1, n, 256, heads, t)
        assert analytic_volume(MEGATRON_SP, p) > analytic_volume(RING_ATTENTION, p)
        assert analytic_volume(MEGATRON_SP, p) > analytic_volume(ULYSSES, p)


def test_param_validation():
    with pytest.raises(ShapeError):
        CommParams(1, 16, 10, 3, 2)
    with pytest.raises(ShapeError):
        CommParams(0, 16, 8, 2, 2)
    with pytest.raises(KeyError):
        analytic_volume("bogus", CommParams(1, 16, 8, 2, 2))


def _trace(n, dim, heads, t, seed=0):
    gen = SplitMix64(seed)
    q, k, v, do = (gen.uniform((n, dim)) for _ in range(4))
    return multihead_run(q, k, v, heads, t, 0.9, d_out=do).trace


def test_measure_single_rank_is_zero():
    m = measure_trace(_trace(16, 16, 2, 1), CommParams(1, 16, 16, 2, 1))
    assert m["total_elements"] == 0 and m["per_group_layer_direction"] == 0
    assert m["matches_expected"]


def test_measure_worked_value():
    p = CommParams(1, 64, 16, 2, 4)
    m = measure_trace(_trace(64, 16, 2, 4), p)
    assert m["per_group_layer_direction"] == 384
    assert m["per_group_layer_direction_bytes"] == 3072
    assert m["total_elements"] == 768
    assert m["messages_per_group_layer_direction"] == [6]
    assert m["matches_expected"]


def test_trace_volume_independent_of_length():
    traces = [_trace(n, 16, 2, 4, seed=n) for n in (64, 256, 1024)]
    assert traces_length_independent(traces)
    assert not traces_length_independent([traces[0], _trace(64, 16, 2, 2)])


def test_measure_passes_divisor():
    t = _trace(32, 8, 1, 4)
    doubled = SimpleNamespace(records=t.records + t.records)
    m = measure_trace(doubled.records, CommParams(1, 32, 8, 1, 4), passes=2)
    assert m["per_group_layer_direction"] == 3 * 64
    with pytest.raises(ProtocolError):
        measure_trace(t.records, CommParams(1, 32, 8, 1, 4), passes=2)


@pytest.mark.parametrize(
    "rec",
    [
        SimpleNamespace(tag="KV_FWD", layer=0, src=0, dst=1),
        SimpleNamespace(tag="OTHER", layer=0, src=0, dst=1, elements=4),
        SimpleNamespace(tag="KV_FWD", layer=0, src=0, dst=1, elements="x"),
        SimpleNamespace(tag="KV_FWD", layer=0, src=1, dst=2, elements=4),
    ],
)
def test_measure_rejects_malformed(rec):
    with pytest.raises(ProtocolError):
        measure_trace([rec], CommParams(1, 8, 4, 1, 2))


def test_report_formats():
    p = CommParams(1, 64, 16, 2, 4)
    report = volume_report(p, _trace(64, 16, 2, 4))
    data = json.loads(report.to_json())
    assert [r["method"] for r in data["methods"]] == list(METHODS)
    assert data["methods"][0]["full_elements"] == 128
    assert data["measured"]["per_group_layer_direction"] == 384
    rows = report.to_csv(methods=(LASP, ULYSSES)).strip().splitlines()
    assert rows[0].startswith("method,")
    assert len(rows) == 4 and rows[-1].startswith("LASP (measured),")
    text = report.to_text()
    assert "DeepSpeed-Ulysses" in text and text.rstrip().splitlines()[-1].startswith("LASP is")
