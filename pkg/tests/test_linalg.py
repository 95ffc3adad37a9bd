import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lasp.errors import FixtureFormatError, NumericError, ShapeError
from lasp.fixtures import MAGIC, SplitMix64, decode_tensor, read_tensor, write_tensor
from lasp.linalg import hadamard, matmul, relative_error, row_scale, transpose


def test_matmul_identity_and_hand_value():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), a), a)
    np.testing.assert_array_equal(matmul(a, np.ones((2, 1))), [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_transpose():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(transpose(a), [[1.0, 3.0], [2.0, 4.0]])
    np.testing.assert_array_equal(transpose(transpose(a)), a)
    np.testing.assert_array_equal(transpose(np.array([[5.0]])), [[5.0]])


def test_hadamard():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(hadamard(a, np.ones((2, 2))), a)
    np.testing.assert_array_equal(hadamard(a, np.zeros((2, 2))), np.zeros((2, 2)))
    np.testing.assert_array_equal(hadamard(a, np.array([[2.0, 0.0], [0.0, 2.0]])), [[2.0, 0.0], [0.0, 8.0]])
    with pytest.raises(ShapeError):
        hadamard(a, np.ones((2, 3)))


def test_row_scale():
    a = np.ones((2, 2))
    np.testing.assert_array_equal(row_scale(a, [0.5, 0.25]), [[0.5, 0.5], [0.25, 0.25]])
    np.testing.assert_array_equal(row_scale(a, [1.0, 1.0]), a)
    with pytest.raises(ShapeError):
        row_scale(a, [1.0, 2.0, 3.0])
    with pytest.raises(NumericError):
        row_scale(a, [1.0, np.inf])


small = st.integers(min_value=1, max_value=8)
entries = st.floats(min_value=-1, max_value=1, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(st.tuples(small, small, small, small).flatmap(
    lambda s: st.tuples(
        arrays(np.float64, (s[0], s[1]), elements=entries),
        arrays(np.float64, (s[1], s[2]), elements=entries),
        arrays(np.float64, (s[2], s[3]), elements=entries),
    )
))
def test_matmul_associativity(mats):
    a, b, c = mats
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert np.max(np.abs(left - right)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.tuples(small, small, small).flatmap(
    lambda s: st.tuples(
        arrays(np.float64, (s[0], s[1]), elements=entries),
        arrays(np.float64, (s[1], s[2]), elements=entries),
        arrays(np.float64, (s[0],), elements=entries),
    )
))
def test_transpose_of_product_and_row_scale_as_diag(mats):
    a, b, w = mats
    lhs = transpose(matmul(a, b))
    rhs = matmul(transpose(b), transpose(a))
    assert np.max(np.abs(lhs - rhs)) <= 1e-12
    assert np.max(np.abs(row_scale(a, w) - matmul(np.diag(w), a))) <= 1e-15


def test_relative_error_zero_reference_is_absolute():
    assert relative_error(np.array([1e-3]), np.array([0.0])) == pytest.approx(1e-3)
    assert relative_error(np.array([2.0, 4.0]), np.array([2.0, 2.0])) == pytest.approx(1.0)


@pytest.mark.parametrize("shape", [(3,), (2, 5), (2, 3, 4), (1, 1)])
def test_tensor_round_trip(tmp_path, shape):
    data = SplitMix64(3).uniform(shape)
    path = tmp_path / "t.laspt"
    write_tensor(path, data)
    blob = path.read_bytes()
    assert blob.startswith(MAGIC)
    assert int.from_bytes(blob[6:10], "little") == len(shape)
    np.testing.assert_array_equal(read_tensor(path), data)


def test_tensor_rejects_bad_files():
    with pytest.raises(FixtureFormatError):
        decode_tensor(b"NOPE00" + bytes(12))
    good = MAGIC + (1).to_bytes(4, "little") + (2).to_bytes(8, "little") + bytes(16)
    assert decode_tensor(good).shape == (2,)
    with pytest.raises(FixtureFormatError):
        decode_tensor(good[:-8])


def _splitmix_reference(seed, count):
    mask = (1 << 64) - 1
    state, out = seed, []
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def test_splitmix_matches_scalar_reference():
    gen = SplitMix64(0)
    first = [int(x) for x in gen.next_u64(3)] + [int(x) for x in gen.next_u64(2)]
    assert first == _splitmix_reference(0, 5)
    assert first[0] == 0xE220A8397B1DCDAF
    assert [int(x) for x in SplitMix64(2**63 + 5).next_u64(4)] == _splitmix_reference(2**63 + 5, 4)


def test_uniform_range_and_determinism():
    a = SplitMix64(42).uniform((100, 3))
    b = SplitMix64(42).uniform((100, 3))
    np.testing.assert_array_equal(a, b)
    assert a.min() >= -1.0 and a.max() < 1.0
