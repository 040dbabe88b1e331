import numpy as np
import pytest

from neuralbcjr.cnn import CnnModel, Layer, random_model
from neuralbcjr.codes import Interleaver, random_bipolar
from neuralbcjr.system import (
    Receiver,
    ReceiverConfig,
    SerialCode,
    inner_windows,
    outer_code,
    outer_trellis,
)


def separable(taps0=(0.5, 1.0, -0.3), taps1=(0.2, 1.0, 0.4)):
    kernel = np.zeros((2, 2, len(taps0)))
    kernel[0, 0], kernel[1, 1] = taps0, taps1
    return CnnModel((Layer(kernel, np.zeros(2)),))


class TestSerialCode:
    def test_shapes_and_rate(self, rng):
        code = SerialCode(outer_code(), Interleaver.linear(32), random_model((2, 16, 2), (3, 3), 0))
        u = random_bipolar(rng, (5, 32))
        x = code.encode(u)
        assert x.shape == (5, 32, 2) and code.rate == 0.5 and code.streams == 2
        assert np.allclose(np.mean(x ** 2, axis=(1, 2)), 1.0)

    def test_coded_is_interleaved_outer_codeword(self, rng):
        iv = Interleaver.random(16, 1)
        code = SerialCode(outer_code(), iv, separable())
        u = random_bipolar(rng, (2, 16))
        c = outer_code()(u[:, :, None])
        assert np.array_equal(iv.deinterleave(code.coded(u), axis=1), c)

    def test_depth_mismatch(self):
        with pytest.raises(ValueError):
            SerialCode(outer_code(), Interleaver.linear(8), random_model((1, 2), (3,), 0))

    def test_symbol_scale(self):
        code = SerialCode(outer_code(), Interleaver.linear(16), separable())
        power = 0.5 * (0.25 + 1 + 0.09) + 0.5 * (0.04 + 1 + 0.16)
        assert code.symbol_scale() == pytest.approx(power ** -0.5, rel=0.02)


class TestReceiver:
    def test_windows_from_analysis(self):
        code = SerialCode(outer_code(), Interleaver.linear(16), separable((0.0, 1.0, 0.7)))
        assert inner_windows(code) == ((0, 1), (-1, 1))
        assert inner_windows(code, memory=1) == ((0, 1), (0, 1))

    def test_outer_trellis_is_joint(self):
        code = SerialCode(outer_code(), Interleaver.linear(8), separable())
        assert outer_trellis(code).n_states == 32

    def test_receiver_decodes_noiseless(self, rng):
        code = SerialCode(outer_code(), Interleaver.linear(32), separable())
        rx = Receiver(code, ReceiverConfig(iterations=3))
        assert rx.windows == ((-1, 1), (-1, 1))
        assert [t.n_states for t in rx.trellises.inner] == [4, 4]
        from neuralbcjr.turbo import turbo_decode

        u = random_bipolar(rng, (10, 32))
        llr, _ = turbo_decode(rx.turbo_config(0.05), rx.trellises, code.encode(u))
        assert np.array_equal(np.sign(llr), u)

    def test_fixed_windows_override(self):
        code = SerialCode(outer_code(), Interleaver.linear(8), separable())
        rx = Receiver(code, ReceiverConfig(windows=((0, 0), (0, 1))))
        assert [t.n_states for t in rx.trellises.inner] == [1, 2]


def test_shipped_desk_fixture():
    from neuralbcjr.system import DESK_DEPTHS, DESK_K, desk_code

    code = desk_code()
    assert code.k == DESK_K and code.rate == 0.5
    layers = code.inner_model.layers
    assert [layers[0].in_depth] + [l.out_depth for l in layers] == list(DESK_DEPTHS)
    x = code.encode(random_bipolar(np.random.default_rng(0), (3, DESK_K)))
    assert np.all(np.isfinite(x))
