import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from semgap.errors import NumericError, SerializationError, ShapeError
from semgap.tensor import (as_tensor, bits, check_finite, dot_blocked, dot_sequential, from_hex,
                           to_hex, ulp_distance)

f32 = np.float32
CANCEL = np.array([1e8, 1, -1e8, 1], dtype=f32)
ONES = np.ones(4, dtype=f32)


def finite_f32(**kw):
    return st.floats(width=32, allow_nan=False, allow_infinity=False, **kw)


def vec_pair(max_len=40, elements=None):
    if elements is None:
        elements = finite_f32(min_value=-1e6, max_value=1e6)
    return st.integers(0, max_len).flatmap(
        lambda n: st.tuples(hnp.arrays(f32, n, elements=elements), hnp.arrays(f32, n, elements=elements)))


# --------------------------------------------------------------------------- oracle self-checks

def test_oracle_rounding_matches_hardware_float32():
    rng = np.random.default_rng(0)
    a = (rng.standard_normal(500) * np.exp2(rng.integers(-30, 30, 500))).astype(f32)
    b = (rng.standard_normal(500) * np.exp2(rng.integers(-30, 30, 500))).astype(f32)
    for x, y in zip(a, b):
        assert bits(oracles.add(x, y)) == bits(x + y)
        assert bits(oracles.mul(x, y)) == bits(x * y)
        assert bits(oracles.div(x, y)) == bits(x / y)


def test_oracle_ties_go_to_even():
    # 1 + 2^-24 is exactly halfway between 1 and the next float32
    assert oracles.round32(oracles.exact(1.0) + oracles.exact(2.0 ** -24)) == f32(1.0)
    up = oracles.exact(1.0 + 2.0 ** -23) + oracles.exact(2.0 ** -24)
    assert oracles.round32(up) == f32(1.0 + 2.0 ** -22)


# --------------------------------------------------------------------------- dot products

def test_dot_sequential_small_integers_fp64():
    assert dot_sequential(np.array([1.0, 2.0]), np.array([3.0, 4.0])) == 11.0


def test_dot_sequential_cancellation_against_hand_evaluation():
    got = dot_sequential(CANCEL, ONES)
    # 1e8 + 1 rounds back to 1e8 (spacing 8), then -1e8 cancels, then + 1
    assert f32(1e8) + f32(1) == f32(1e8)
    assert got == f32(1.0) and got.dtype == f32
    assert bits(got) == bits(oracles.dot_sequential(CANCEL, ONES))


def test_dot_blocked_cancellation_against_hand_evaluation():
    got = dot_blocked(CANCEL, ONES, 2)
    assert got == f32(0.0)
    assert bits(got) == bits(oracles.dot_blocked(CANCEL, ONES, 2))


def test_empty_dot_is_positive_zero():
    z = dot_sequential(np.array([], dtype=f32), np.array([], dtype=f32))
    assert z == 0 and not np.signbit(z)
    assert not np.signbit(dot_blocked(np.array([], dtype=f32), np.array([], dtype=f32), 3))


@pytest.mark.parametrize("a,b", [(np.ones(3, f32), np.ones(4, f32)), (np.ones(3, f32), np.ones(3, np.float64)),
                                 (np.ones((2, 2), f32), np.ones((2, 2), f32))])
def test_dot_rejects_mismatch(a, b):
    with pytest.raises(ShapeError):
        dot_sequential(a, b)
    with pytest.raises(ShapeError):
        dot_blocked(a, b, 2)


def test_dot_blocked_rejects_bad_block():
    with pytest.raises(ShapeError):
        dot_blocked(ONES, ONES, 0)


@settings(max_examples=200, deadline=None)
@given(vec_pair())
def test_sequential_matches_exact_oracle(ab):
    a, b = ab
    assert bits(dot_sequential(a, b)) == bits(oracles.dot_sequential(a, b))


@settings(max_examples=200, deadline=None)
@given(vec_pair(), st.integers(1, 9))
def test_blocked_matches_exact_oracle(ab, block):
    a, b = ab
    assert bits(dot_blocked(a, b, block)) == bits(oracles.dot_blocked(a, b, block))


@settings(max_examples=300, deadline=None)
@given(vec_pair())
def test_block_one_equals_sequential(ab):
    a, b = ab
    assert bits(dot_blocked(a, b, 1)) == bits(dot_sequential(a, b))


@settings(max_examples=300, deadline=None)
@given(vec_pair(), st.integers(0, 10))
def test_block_at_least_length_equals_sequential(ab, extra):
    a, b = ab
    assert bits(dot_blocked(a, b, max(1, len(a) + extra))) == bits(dot_sequential(a, b))


@settings(max_examples=300, deadline=None)
@given(vec_pair(elements=st.integers(-64, 64).map(float)), st.integers(1, 8))
def test_exact_integer_arithmetic_is_order_free(ab, block):
    a, b = ab  # |products| <= 4096, >= 40 terms stays far below 2^24
    assert bits(dot_blocked(a, b, block)) == bits(dot_sequential(a, b))


def test_block_equal_length_on_10000_random_vectors():
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        n = int(rng.integers(1, 65))
        a = (rng.standard_normal(n) * np.exp2(rng.integers(-10, 10, n))).astype(f32)
        b = rng.standard_normal(n).astype(f32)
        assert bits(dot_blocked(a, b, n + int(rng.integers(0, 3)))) == bits(dot_sequential(a, b))


def mixed_magnitude(rng, n):
    # log-uniform exponents spanning 2^-12 .. 2^12, random signs
    return (rng.choice([-1, 1], n) * np.exp2(rng.uniform(-12, 12, n))).astype(f32)


def test_blocking_changes_bits_on_most_mixed_magnitude_vectors():
    rng = np.random.default_rng(2)
    trials = 1000
    differ = 0
    for _ in range(trials):
        n = int(rng.integers(64, 129))
        a, b = mixed_magnitude(rng, n), mixed_magnitude(rng, n)
        differ += bits(dot_blocked(a, b, 4)) != bits(dot_sequential(a, b))
    assert differ / trials >= 0.5


def test_dot_is_deterministic():
    rng = np.random.default_rng(3)
    a, b = mixed_magnitude(rng, 200), mixed_magnitude(rng, 200)
    r = {bits(dot_blocked(a, b, 4)).item() for _ in range(20)}
    assert len(r) == 1


# --------------------------------------------------------------------------- hex encoding

def test_one_encodes_to_known_hex():
    assert to_hex(np.array([1.0], dtype=f32)) == "0000803f"
    assert to_hex(np.array(1.0)) == "000000000000f03f"


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(max_dims=3, max_side=5)))
def test_hex_round_trip_is_bitwise(arr):
    back = from_hex(to_hex(arr), arr.shape, arr.dtype)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()  # includes NaN payloads and signed zeros


def test_hex_errors():
    with pytest.raises(SerializationError, match="holds 3 bytes"):
        from_hex("000080", (1,), "fp32")
    with pytest.raises(SerializationError, match="needs 8"):
        from_hex("0000803f", (2,), "fp32")
    with pytest.raises(SerializationError, match="not valid hex"):
        from_hex("zz00803f", (1,), "fp32")
    with pytest.raises(SerializationError, match="unsupported"):
        from_hex("0000803f", (1,), "fp16")


def test_misc_helpers():
    assert as_tensor([1, 2]).dtype == f32
    with pytest.raises(ShapeError):
        as_tensor([1, 2], dtype=np.float16)
    with pytest.raises(NumericError, match="NaN"):
        check_finite(np.array([1.0, np.nan]), "x")
    with pytest.raises(NumericError, match="inf"):
        check_finite(np.array([np.inf]), "x")
    one = np.array(1.0, f32)
    assert ulp_distance(one, np.nextafter(one, f32(2))) == 1
    assert ulp_distance(f32(-0.0), f32(0.0)) == 0
    assert ulp_distance(np.nextafter(f32(0), f32(-1)), np.nextafter(f32(0), f32(1))) == 2
