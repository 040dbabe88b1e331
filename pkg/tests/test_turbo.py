import numpy as np
import pytest
from oracles import central_difference, rel_error

from neuralbcjr.bcjr import BcjrConfig, decode
from neuralbcjr.codes import Interleaver, MultiStreamEncoder, PolynomialEncoder, random_bipolar
from neuralbcjr.trellis import Trellis, build_from_polynomial
from neuralbcjr.turbo import (
    TurboConfig,
    TurboTrellises,
    trace_to_csv,
    turbo_backward,
    turbo_decode,
    turbo_decode_backward,
    turbo_forward,
)

OUTER = MultiStreamEncoder([PolynomialEncoder((-2, 0, 1)), PolynomialEncoder((-1, 0, 3))])
BPSK = Trellis(0, 0, np.array([1.0, -1.0]))


def small_system(rng, k=8, tb="wrap", mode="joint"):
    if mode == "joint":
        outer = build_from_polynomial(
            MultiStreamEncoder([PolynomialEncoder((0, 1)), PolynomialEncoder((-1, 0, 1))]))
    else:
        outer = [build_from_polynomial(PolynomialEncoder((-1, 0, 1))),
                 build_from_polynomial(PolynomialEncoder((0, 1, 2)))]
    inner = [Trellis(2, -1, rng.standard_normal((8, 1))),
             Trellis(1, 0, rng.standard_normal((4, 1)))]
    cfg = TurboConfig(
        Interleaver.random(k, 3), iterations=2,
        inner=BcjrConfig(wrap=4, sigma2=0.7, tailbiting=tb),
        outer=BcjrConfig(wrap=4, tailbiting=tb, damping=0.9), outer_mode=mode)
    return cfg, TurboTrellises(outer, inner)


def transmit(u, iv):
    c = OUTER(u[:, :, None])
    return iv.interleave(c, axis=1)


class TestDecode:
    def test_noiseless_bpsk_inner_decodes_after_one_iteration(self, rng):
        k = 32
        iv = Interleaver.linear(k)
        u = random_bipolar(rng, (20, k))
        y = transmit(u, iv)
        cfg = TurboConfig(iv, 1, BcjrConfig(sigma2=1e-3), BcjrConfig())
        tr = TurboTrellises(build_from_polynomial(OUTER), [BPSK, BPSK])
        llr, trace = turbo_decode(cfg, tr, y, u)
        assert np.array_equal(np.where(llr >= 0, 1.0, -1.0), u)
        assert trace[0]["bit_errors"] == 0 and trace[0]["block_errors"] == 0

    def test_trace_is_deterministic(self, rng):
        cfg, tr = small_system(rng)
        y = rng.standard_normal((3, 8, 2))
        a = turbo_decode(cfg, tr, y)
        b = turbo_decode(cfg, tr, y)
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]
        assert [t["iteration"] for t in a[1]] == [1, 2]

    def test_single_iteration_is_composition(self, rng):
        k = 16
        iv = Interleaver.identity(k)
        inner_cfg, outer_cfg = BcjrConfig(sigma2=0.5, wrap=6), BcjrConfig(wrap=6)
        inner = [Trellis(1, 0, rng.standard_normal((4, 1))), BPSK]
        outer = build_from_polynomial(OUTER)
        y = rng.standard_normal((k, 2))
        llr, _ = turbo_decode(TurboConfig(iv, 1, inner_cfg, outer_cfg),
                              TurboTrellises(outer, inner), y)
        ext = np.stack([decode(t, inner_cfg, y=y[:, f])[1] for f, t in enumerate(inner)], 1)
        ref, _ = decode(outer, outer_cfg, apriori_output=ext, target="uncoded")
        assert np.array_equal(llr, ref)

    def test_two_iterations_exchange_extrinsic_through_interleaver(self, rng):
        k = 16
        iv = Interleaver.random(k, 5)
        inner_cfg, outer_cfg = BcjrConfig(sigma2=0.5, wrap=6), BcjrConfig(wrap=6, damping=0.8)
        inner = [Trellis(1, 0, rng.standard_normal((4, 1))), Trellis(1, -1, rng.standard_normal((4, 1)))]
        outer = build_from_polynomial(OUTER)
        y = rng.standard_normal((k, 2))
        llr, _ = turbo_decode(TurboConfig(iv, 2, inner_cfg, outer_cfg),
                              TurboTrellises(outer, inner), y)
        prior = np.zeros((k, 2))
        for _ in range(2):
            prior_pi = iv.interleave(prior, axis=0)
            ext_pi = np.stack([decode(t, inner_cfg, y=y[:, f], apriori_input=prior_pi[:, f])[1]
                               for f, t in enumerate(inner)], 1)
            ext = iv.deinterleave(ext_pi, axis=0)
            ref, _ = decode(outer, outer_cfg, apriori_output=ext, target="uncoded")
            _, prior = decode(outer, outer_cfg, apriori_output=ext, target="coded")
        assert np.allclose(llr, ref, atol=1e-12)

    def test_no_channel_information_gives_zero_output(self, rng):
        # antipodal inner symbols: y = 0 is equally far from both hypotheses
        cfg, tr = small_system(rng)
        tr = TurboTrellises(tr.outer, [BPSK, BPSK])
        llr, trace = turbo_decode(cfg, tr, np.zeros((8, 2)))
        assert np.all(llr == 0.0)
        assert all(t["mean_abs_llr"] == 0.0 for t in trace)

    def test_component_without_observations_has_zero_extrinsic(self, rng):
        outer = build_from_polynomial(OUTER)
        _, ext = decode(outer, BcjrConfig(wrap=6), apriori_output=np.zeros((16, 2)),
                        target="coded")
        assert np.all(ext == 0.0)

    def test_single_block_matches_batch(self, rng):
        cfg, tr = small_system(rng)
        y = rng.standard_normal((2, 8, 2))
        batch, _ = turbo_decode(cfg, tr, y)
        assert np.allclose(turbo_decode(cfg, tr, y[1])[0], batch[1])

    def test_per_stream_sums_outer_llrs(self, rng):
        cfg, tr = small_system(rng, tb="exact", mode="per-stream")
        llr, _ = turbo_decode(cfg, tr, rng.standard_normal((8, 2)))
        assert llr.shape == (8,) and np.all(np.isfinite(llr))

    def test_shape_errors(self, rng):
        cfg, tr = small_system(rng)
        with pytest.raises(ValueError):
            turbo_decode(cfg, tr, np.zeros((9, 2)))
        with pytest.raises(ValueError):
            turbo_decode(cfg, tr, np.zeros((8, 3)))
        with pytest.raises(ValueError):
            TurboConfig(Interleaver.identity(4), iterations=0)

    def test_trace_csv(self, rng, tmp_path):
        cfg, tr = small_system(rng)
        u = random_bipolar(rng, (2, 8))
        _, trace = turbo_decode(cfg, tr, rng.standard_normal((2, 8, 2)), u)
        trace_to_csv(trace, tmp_path / "t.csv")
        header = (tmp_path / "t.csv").read_text().splitlines()[0].split(",")
        assert {"iteration", "mean_abs_llr", "sign_flips", "ber", "bler"} <= set(header)


class TestAdjoint:
    @pytest.mark.parametrize("tb", ["wrap", "exact"])
    def test_finite_differences_joint(self, tb, rng):
        cfg, tr = small_system(rng, tb=tb)
        y = rng.standard_normal((2, 8, 2))
        up = rng.standard_normal((2, 8))
        g = turbo_decode_backward(cfg, tr, y, up)["y"]
        fd = central_difference(lambda v: np.sum(turbo_decode(cfg, tr, v)[0] * up), y)
        assert rel_error(g, fd) < 1e-4

    def test_finite_differences_per_stream_exact(self, rng):
        cfg, tr = small_system(rng, tb="exact", mode="per-stream")
        y = rng.standard_normal((1, 8, 2))
        up = rng.standard_normal((1, 8))
        g = turbo_decode_backward(cfg, tr, y, up)["y"]
        fd = central_difference(lambda v: np.sum(turbo_decode(cfg, tr, v)[0] * up), y)
        assert rel_error(g, fd) < 1e-4

    def test_symbol_gradients(self, rng):
        cfg, tr = small_system(rng)
        y = rng.standard_normal((2, 8, 2))
        up = rng.standard_normal((2, 8))
        _, _, saved = turbo_forward(cfg, tr, y)
        gs = turbo_backward(cfg, tr, saved, up)["symbols"]
        for f in range(2):
            def loss(table, f=f):
                inner = list(tr.inner)
                inner[f] = inner[f].with_outputs(table)
                return np.sum(turbo_decode(cfg, TurboTrellises(tr.outer, inner), y)[0] * up)

            assert rel_error(gs[f], central_difference(loss, tr.inner[f].outputs)) < 1e-4

    def test_zero_upstream(self, rng):
        cfg, tr = small_system(rng)
        g = turbo_decode_backward(cfg, tr, rng.standard_normal((8, 2)), np.zeros(8))
        assert np.all(g["y"] == 0.0)

    def test_one_iteration_chains_component_adjoints(self, rng):
        from neuralbcjr.bcjr import decode_backward

        k = 8
        iv = Interleaver.identity(k)
        inner_cfg, outer_cfg = BcjrConfig(sigma2=0.5, wrap=3), BcjrConfig(wrap=3)
        inner = [Trellis(1, 0, rng.standard_normal((4, 1))), BPSK]
        outer = build_from_polynomial(
            MultiStreamEncoder([PolynomialEncoder((0, 1)), PolynomialEncoder((-1, 0, 1))]))
        y = rng.standard_normal((k, 2))
        up = rng.standard_normal(k)
        g = turbo_decode_backward(TurboConfig(iv, 1, inner_cfg, outer_cfg),
                                  TurboTrellises(outer, inner), y, up)["y"]
        ext = np.stack([decode(t, inner_cfg, y=y[:, f])[1] for f, t in enumerate(inner)], 1)
        g_ext = decode_backward(outer, outer_cfg, apriori_output=ext, target="uncoded",
                                grad_posterior=up)["apriori_output"]
        ref = np.stack([decode_backward(t, inner_cfg, y=y[:, f], grad_extrinsic=g_ext[:, f])["y"]
                        for f, t in enumerate(inner)], 1)
        assert np.allclose(g, ref, atol=1e-12)
