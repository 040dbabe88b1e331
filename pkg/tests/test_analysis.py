import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neuralbcjr.analysis import (
    EnergyProfile,
    active_streams,
    detect_frozen_outputs,
    estimate_memory,
    flip_energy,
    grad_energy,
    profile_to_csv,
    select_window,
    split_discrepancy,
    split_inner_streams,
)
from neuralbcjr.cnn import CnnEncoder, CnnModel, Layer, random_model
from neuralbcjr.codes import MultiStreamEncoder, PolynomialEncoder, TableEncoder

G0 = PolynomialEncoder((-2, 0, 1))
G1 = PolynomialEncoder((-1, 0, 3))


def linear_cnn(taps, width=9):
    """Linear single-layer CNN whose kernel is one at the tap offsets."""
    k = np.zeros(width)
    for t in taps:
        k[t + width // 2] = 1.0
    return CnnEncoder(CnnModel((Layer(k.reshape(1, 1, -1), np.zeros(1), "linear"),)))


def profile(values, offsets=None):
    values = np.asarray(values, dtype=float)
    if offsets is None:
        offsets = np.arange(values.size) - values.size // 2
    return EnergyProfile(np.asarray(offsets), values, "flip")


class TestFlipEnergy:
    @pytest.mark.parametrize("enc", [G0, G1])
    def test_polynomial_energies_are_indicators(self, enc):
        e = flip_energy(enc)
        assert set(np.unique(e.raw)) <= {0.0, 1.0}
        assert list(e.offsets[e.raw == 1.0]) == list(enc.taps)

    def test_constant_encoder(self):
        enc = TableEncoder((-1, 0, 1), np.full(8, 0.7))
        assert np.all(flip_energy(enc).raw == 0.0)

    def test_exact_vs_sampled(self):
        for seed in range(5):
            enc = CnnEncoder(random_model([1, 4, 4, 1], (5, 5, 3), seed))
            exact = flip_energy(enc).normalized
            sampled = flip_energy(enc, mode="sampled", count=4096, seed=seed)
            peak = np.max(flip_energy(enc).raw)
            assert np.max(np.abs(exact - sampled.raw / peak)) < 0.02

    def test_sampled_within_three_sigma(self):
        enc = CnnEncoder(random_model([1, 3, 1], (5, 5), 3))
        exact = flip_energy(enc).raw
        s = flip_energy(enc, mode="sampled", count=20000, seed=7)
        z = np.abs(s.raw - exact) / np.maximum(s.stderr, 1e-15)
        assert np.all(z[s.stderr > 0] < 3.5)

    def test_exact_cap_refusal(self):
        enc = CnnEncoder(random_model([1, 2, 1], (11, 13), 0))
        with pytest.raises(ValueError, match="sampled"):
            flip_energy(enc)

    def test_joint_code_profile(self):
        e = flip_energy(MultiStreamEncoder([G0, G1]), out_depth=None)
        assert e.raw.shape == (2, 6)
        assert estimate_memory(e).memory == 5


class TestGradEnergy:
    def test_identity(self):
        e = grad_energy(linear_cnn([0], width=1))
        assert e.raw[list(e.offsets).index(0)] == 1.0
        assert np.count_nonzero(e.raw) == 1

    def test_deterministic(self):
        enc = CnnEncoder(random_model([1, 3, 1], 3, 1))
        assert np.array_equal(grad_energy(enc, seed=4).raw, grad_energy(enc, seed=4).raw)

    @pytest.mark.parametrize("taps", [(-2, 0, 1), (-1, 0, 3)])
    def test_linear_cnn_support(self, taps):
        e = grad_energy(linear_cnn(taps))
        assert list(e.offsets[e.raw > 0]) == list(taps)


class TestEstimateMemory:
    def test_g0(self):
        assert estimate_memory(flip_energy(G0)).memory == 3

    def test_g1(self):
        assert estimate_memory(flip_energy(G1)).memory == 4

    def test_eight_contributing_offsets(self):
        e = np.array([0.001, 0.03, 0.2, 0.6, 1.0, 0.5, 0.1, 0.05, 0.025, 0.01])
        prof = estimate_memory(profile(e), 2e-2)
        assert prof.memory == 7 and prof.n_states == 128

    def test_memoryless(self):
        prof = estimate_memory(profile([0.0, 0.0, 0.0]), 2e-2)
        assert prof.memoryless and prof.memory == 0 and prof.contributing == (0, 0)

    def test_single_offset_is_bpsk_like(self):
        prof = estimate_memory(profile([0.001, 1.0, 0.004]))
        assert prof.bpsk_like and not prof.memoryless

    def test_gap_inside_window_is_filled(self):
        prof = estimate_memory(profile([1.0, 0.0, 0.0, 1.0]))
        assert prof.memory == 3 and prof.complement == []

    @given(st.lists(st.floats(0, 1), min_size=3, max_size=15), st.floats(1e-3, 0.5),
           st.floats(1e-3, 0.5))
    def test_monotone_in_threshold(self, vals, t1, t2):
        lo_t, hi_t = sorted((t1, t2))
        p = profile(vals)
        a, b = estimate_memory(p, lo_t), estimate_memory(p, hi_t)
        if not b.memoryless:
            assert a.contributing[0] <= b.contributing[0]
            assert a.contributing[1] >= b.contributing[1]

    def test_select_window(self):
        p = profile([0.1, 0.9, 1.0, 0.2, 0.8], offsets=[-2, -1, 0, 1, 2])
        assert select_window(p, 1) == (-1, 0)
        assert select_window(p, 4) == (-2, 2)
        with pytest.raises(ValueError):
            select_window(p, 5)

    def test_csv(self, tmp_path):
        enc = linear_cnn((-1, 0))
        prof = estimate_memory(flip_energy(enc), grad=grad_energy(enc))
        profile_to_csv(prof, tmp_path / "p.csv")
        rows = (tmp_path / "p.csv").read_text().splitlines()
        assert rows[0] == "offset,grad_energy,flip_energy,above_threshold,in_window"
        assert len(rows) == 1 + prof.offsets.size


class TestFrozen:
    def test_bias_only_depth(self):
        k = np.zeros((1, 2, 1))
        k[0, 0, 0] = 1.0
        model = CnnModel((Layer(k, np.array([0.0, 3.0])),))
        status = detect_frozen_outputs(CnnEncoder(model, binarize_output=True))
        assert status == ["active", "frozen@+1"]

    def test_polynomial_active(self):
        assert detect_frozen_outputs(G0) == ["active"]

    def test_ten_depths_two_active(self):
        k = np.zeros((1, 10, 3))
        k[0, 3, :] = [1.0, 0.0, 1.0]
        k[0, 7, 1] = 1.0
        bias = np.array([2, -2, 2, 0, -2, 2, 2, 0, -2, 2], dtype=float)
        enc = CnnEncoder(CnnModel((Layer(k, bias),)), binarize_output=True)
        status = detect_frozen_outputs(enc)
        assert active_streams(status) == [3, 7]
        assert status[1] == "frozen@-1" and status[0] == "frozen@+1"


class TestSplit:
    def test_separable_is_exact(self):
        k = np.zeros((2, 2, 3))
        k[0, 0] = [0.3, 1.0, -0.2]
        k[1, 1] = [0.0, 1.0, 0.5]
        enc = CnnEncoder(CnnModel((Layer(k, np.zeros(2)),)))
        assert split_discrepancy(enc) == 0.0

    def test_non_separable_reports_gap(self):
        enc = CnnEncoder(random_model([2, 3, 2], (3, 3), 0))
        assert split_discrepancy(enc) > 0.0

    def test_stream_definition(self, rng):
        enc = CnnEncoder(random_model([2, 3, 2], (3, 3), 1))
        s0, s1 = split_inner_streams(enc)
        c = 1.0 - 2.0 * rng.integers(0, 2, (3, 10, 1))
        ones = np.ones_like(c)
        assert np.array_equal(s0(c)[:, :, 0], enc(np.concatenate([c, ones], 2))[:, :, 0])
        assert np.array_equal(s1(c)[:, :, 0], enc(np.concatenate([ones, c], 2))[:, :, 1])

    def test_bpsk_like_stream_flagged(self):
        k = np.zeros((2, 2, 3))
        k[0, 0] = [0.5, 1.0, 0.5]
        k[1, 1] = [0.001, 1.0, 0.0]
        enc = CnnEncoder(CnnModel((Layer(k, np.zeros(2)),)))
        s0, s1 = split_inner_streams(enc)
        assert not estimate_memory(flip_energy(s0)).bpsk_like
        assert estimate_memory(flip_energy(s1)).bpsk_like

    def test_needs_two_streams(self):
        with pytest.raises(ValueError):
            split_inner_streams(G0)


def test_grad_and_flip_agree_on_smooth_cnns():
    for seed in range(10):
        enc = CnnEncoder(random_model([1, 8, 8, 1], (5, 5, 3), seed))
        r = np.corrcoef(grad_energy(enc, seed=seed).raw, flip_energy(enc).raw)[0, 1]
        assert r >= 0.9
