import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neuralbcjr.codes import (
    DegenerateInputError,
    Interleaver,
    InvalidInputError,
    MultiStreamEncoder,
    PolynomialEncoder,
    TableEncoder,
    bipolar_to_bits,
    bits_to_bipolar,
    deinterleave,
    interleave,
    load_code_spec,
    normalize_power,
    normalize_power_backward,
    polynomial_encode,
    random_bipolar,
    rate_shift_db,
    save_code_spec,
    spc_correct,
    spc_encode,
)

bipolar_lists = st.lists(st.sampled_from([-1.0, 1.0]), min_size=8, max_size=24)


def test_bit_mapping_round_trip():
    bits = np.array([0, 1, 1, 0])
    assert np.array_equal(bits_to_bipolar(bits), [1, -1, -1, 1])
    assert np.array_equal(bipolar_to_bits(bits_to_bipolar(bits)), bits)


class TestPolynomial:
    def test_all_ones_is_fixed_point(self):
        enc = PolynomialEncoder((-2, 0, 1))
        assert np.array_equal(polynomial_encode(enc, np.ones(8)), np.ones(8))

    def test_single_flip_lands_on_solutions_of_i_plus_e(self):
        u = np.ones(8)
        u[4] = -1
        out = polynomial_encode(PolynomialEncoder((-2, 0, 1)), u)
        assert sorted(np.flatnonzero(out < 0)) == [3, 4, 6]

    def test_identity_tap(self, rng):
        u = random_bipolar(rng, 11)
        assert np.array_equal(polynomial_encode(PolynomialEncoder((0,)), u), u)

    def test_short_block_rejected(self):
        with pytest.raises(InvalidInputError):
            polynomial_encode(PolynomialEncoder((-2, 0, 3)), np.ones(5))

    def test_multi_depth_rejected(self):
        with pytest.raises(InvalidInputError):
            polynomial_encode(PolynomialEncoder((0, 1)), np.ones((4, 2)))

    @given(bipolar_lists, st.integers(0, 2 ** 16))
    def test_linear_in_product_domain(self, u, seed):
        u = np.array(u)
        v = random_bipolar(np.random.default_rng(seed), u.size)
        enc = PolynomialEncoder((-1, 0, 3))
        assert np.array_equal(enc.encode(u * v), enc.encode(u) * enc.encode(v))

    def test_multistream_stacks_depths(self, rng):
        a, b = PolynomialEncoder((-2, 0, 1)), PolynomialEncoder((-1, 0, 3))
        enc = MultiStreamEncoder([a, b])
        u = random_bipolar(rng, (3, 16, 1))
        out = enc(u)
        assert out.shape == (3, 16, 2)
        assert np.array_equal(out[:, :, 1], b.encode(u[:, :, 0]))


class TestTable:
    def test_table_matches_polynomial(self, rng):
        # window (-1, 1): bit q of the index is set when offset -1+q is -1
        idx = np.arange(8)
        table = 1.0 - 2.0 * (((idx >> 0) ^ (idx >> 2)) & 1)
        enc = TableEncoder((-1, 0, 1), table)
        u = random_bipolar(rng, (4, 12, 1))
        ref = PolynomialEncoder((-1, 1))(u)
        assert np.array_equal(enc(u), ref)

    def test_wrong_table_length(self):
        with pytest.raises(InvalidInputError):
            TableEncoder((0, 1), np.ones(3))

    def test_offsets_must_increase(self):
        with pytest.raises(InvalidInputError):
            TableEncoder((1, 0), np.ones(4))


class TestInterleaver:
    @given(st.integers(2, 64), st.integers(0, 1000))
    def test_round_trip_random(self, n, seed):
        iv = Interleaver.random(n, seed)
        x = np.random.default_rng(seed).standard_normal((n, 3))
        assert np.array_equal(deinterleave(iv, interleave(iv, x)), x)

    @given(st.integers(3, 64))
    def test_round_trip_linear(self, n):
        iv = Interleaver.linear(n)
        x = np.arange(2 * n, dtype=float).reshape(2, n)
        assert np.array_equal(iv.deinterleave(iv.interleave(x, axis=1), axis=1), x)

    def test_identity(self, rng):
        x = rng.standard_normal(9)
        assert np.array_equal(interleave(Interleaver.identity(9), x), x)

    def test_linear_position_map(self):
        iv = Interleaver.linear(8, a=3, b=0)
        x = np.zeros(8)
        x[1] = 1.0
        assert np.flatnonzero(iv.interleave(x)) == [3]

    def test_default_multiplier(self):
        assert Interleaver.linear(32).params["a"] == 15
        assert Interleaver.linear(64).params["a"] == 31

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            Interleaver.identity(4).interleave(np.zeros(5))

    def test_not_a_bijection(self):
        with pytest.raises(InvalidInputError):
            Interleaver(np.array([0, 0, 1]))

    def test_non_coprime_multiplier(self):
        with pytest.raises(InvalidInputError):
            Interleaver.linear(8, a=2)

    def test_depth_preserved(self, rng):
        iv = Interleaver.random(10, 3)
        x = rng.standard_normal((10, 2))
        y = iv.interleave(x)
        assert np.array_equal(y[iv.permutation], x)


class TestPower:
    def test_unit_power_unchanged(self):
        x = np.array([1.0, -1.0, 1.0, 1.0])
        assert np.allclose(normalize_power(x), x)

    def test_constant_two(self):
        assert np.allclose(normalize_power(np.full(6, 2.0)), 1.0)

    def test_three_four(self):
        out = normalize_power(np.array([[3.0], [4.0]]))
        assert np.allclose(out[:, 0], np.array([3.0, 4.0]) / math.sqrt(12.5))

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            normalize_power(np.zeros(4))

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30).filter(
        lambda v: any(abs(a) > 1e-3 for a in v)))
    def test_mean_square_one(self, v):
        out = normalize_power(np.array(v))
        assert abs(np.mean(out ** 2) - 1.0) <= 1e-12

    def test_batched_axes(self, rng):
        x = rng.standard_normal((5, 7, 2)) * np.arange(1, 6)[:, None, None]
        out = normalize_power(x, axes=(1, 2))
        assert np.allclose(np.mean(out ** 2, axis=(1, 2)), 1.0)

    def test_backward_matches_finite_differences(self, rng):
        x = rng.standard_normal((2, 4, 2))
        g = rng.standard_normal(x.shape)
        analytic = normalize_power_backward(x, g, axes=(1, 2))
        h = 1e-6
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            fd[idx] = np.sum(g * (normalize_power(xp, (1, 2)) - normalize_power(xm, (1, 2)))) / (2 * h)
        assert np.allclose(analytic, fd, rtol=1e-6, atol=1e-9)


class TestParity:
    def test_all_plus(self):
        assert spc_encode(np.ones(5))[-1] == 1.0

    def test_odd_minus_count(self):
        assert spc_encode(np.array([1.0, -1.0, -1.0, -1.0]))[-1] == -1.0

    def test_rate_shift_k64(self):
        assert rate_shift_db(64) == pytest.approx(-0.0683, abs=1e-4)
        assert rate_shift_db(64) == pytest.approx(-0.06839424530305466, rel=1e-12)

    def test_flip_least_reliable(self):
        assert np.array_equal(spc_correct([5.0, -3.0, 0.2]), [1.0, -1.0, -1.0])

    def test_satisfied_parity_untouched(self):
        assert np.array_equal(spc_correct([1.0, 1.0, -1.0, -1.0]), [1, 1, -1, -1])

    def test_tie_goes_to_lowest_index(self):
        assert np.array_equal(spc_correct([-0.5, 0.5, 2.0]), [1.0, 1.0, 1.0])

    def test_needs_two_bits(self):
        with pytest.raises(InvalidInputError):
            spc_correct([1.0])

    @given(st.lists(st.floats(-20, 20), min_size=2, max_size=40))
    def test_output_parity_always_even(self, llrs):
        assert np.prod(spc_correct(llrs)) == 1.0

    def test_batched(self, rng):
        llr = rng.standard_normal((50, 9))
        out = spc_correct(llr)
        assert np.all(np.prod(out, axis=1) == 1.0)
        for row, ref in zip(llr, out):
            assert np.array_equal(spc_correct(row), ref)


def test_code_spec_round_trip(tmp_path, rng):
    enc = MultiStreamEncoder([PolynomialEncoder((-2, 0, 1)), PolynomialEncoder((-1, 0, 3))])
    iv = Interleaver.linear(16, a=5, b=2)
    save_code_spec(tmp_path / "c.json", enc, iv)
    enc2, iv2 = load_code_spec(tmp_path / "c.json")
    u = random_bipolar(rng, (2, 16, 1))
    assert np.array_equal(enc(u), enc2(u))
    assert np.array_equal(iv.permutation, iv2.permutation)


def test_code_spec_bad_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"format": ')
    with pytest.raises(InvalidInputError, match="line 1"):
        load_code_spec(p)
