import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from oracles import central_difference, rel_error

from neuralbcjr.cnn import random_model
from neuralbcjr.codes import Interleaver, random_bipolar
from neuralbcjr.sim import snr_to_sigma2
from neuralbcjr.system import SerialCode, outer_code
from neuralbcjr.tune import (
    Adam,
    Sgd,
    TrainConfig,
    TrainingDiverged,
    bce_grad,
    bce_loss,
    loss_and_grad,
    train_encoder,
    validate,
)

WINDOWS = ((-1, 1), (-1, 1))


def tiny_code(k=8, seed=0):
    return SerialCode(outer_code(), Interleaver.linear(k), random_model((2, 3, 2), (3, 1), seed))


def tiny_config(**kw):
    base = dict(batch_size=4, lr=1e-2, updates=3, iterations=1, wrap=4, snr_db=2.0)
    return TrainConfig(**{**base, **kw})


class TestLoss:
    def test_zero_llr_gives_ln2(self):
        assert bce_loss(np.zeros((3, 5)), np.ones((3, 5))) == pytest.approx(math.log(2))

    def test_confident_limit(self):
        u = np.array([1.0, -1.0])
        assert bce_loss(60 * u, u) < 1e-20
        assert bce_loss(-60 * u, u) == pytest.approx(60.0)

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
    def test_gradient_matches_fd(self, values):
        llr = np.array(values)
        u = np.where(np.arange(llr.size) % 2 == 0, 1.0, -1.0)
        fd = central_difference(lambda v: bce_loss(v, u), llr, h=1e-6)
        assert np.allclose(bce_grad(llr, u), fd, atol=1e-8)

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            bce_grad(np.zeros(3), np.zeros(4))
        with pytest.raises(ValueError):
            bce_loss(np.zeros(0), np.zeros(0))


class TestOptimizers:
    def test_sgd_first_order_decrease(self, rng):
        # one small step along -grad lowers a smooth loss
        code = tiny_code()
        u = random_bipolar(rng, (6, 8))
        s2 = float(snr_to_sigma2(2.0, code.rate))
        noise = math.sqrt(s2) * rng.standard_normal((6, 8, 2))
        cfg = tiny_config()
        loss0, grads, _, tr = loss_and_grad(code, WINDOWS, u, noise, s2, cfg)
        params = Sgd(1e-3).step(code.inner_model.params(), grads)
        moved = code.with_model(code.inner_model.with_params(params))
        loss1 = loss_and_grad(moved, WINDOWS, u, noise, s2, cfg, tr)[0]
        gnorm2 = sum(float(np.sum(g * g)) for g in grads)
        assert loss1 < loss0
        assert loss0 - loss1 == pytest.approx(1e-3 * gnorm2, rel=0.05)

    def test_adam_first_step_is_lr_times_sign(self):
        p = [np.array([1.0, -2.0, 3.0])]
        g = [np.array([0.5, -4.0, 1e-3])]
        out = Adam(0.1).step(p, g)[0]
        assert np.allclose(out, p[0] - 0.1 * np.sign(g[0]), atol=1e-4)

    def test_momentum(self):
        opt = Sgd(1.0, momentum=0.5)
        p = [np.zeros(1)]
        p = opt.step(p, [np.ones(1)])
        p = opt.step(p, [np.ones(1)])
        assert p[0][0] == pytest.approx(-2.5)


class TestChainGradient:
    def test_weight_gradient_matches_fd(self, rng):
        code = tiny_code()
        u = random_bipolar(rng, (3, 8))
        s2 = float(snr_to_sigma2(1.0, code.rate))
        noise = math.sqrt(s2) * rng.standard_normal((3, 8, 2))
        cfg = tiny_config()
        _, grads, _, tr = loss_and_grad(code, WINDOWS, u, noise, s2, cfg)
        params = code.inner_model.params()
        for i, p in enumerate(params):
            def loss(value, i=i):
                ps = list(params)
                ps[i] = value
                moved = code.with_model(code.inner_model.with_params(ps))
                return loss_and_grad(moved, WINDOWS, u, noise, s2, cfg, tr)[0]

            assert rel_error(grads[i], central_difference(loss, p)) < 1e-3

    def test_two_iterations(self, rng):
        code = tiny_code(seed=4)
        u = random_bipolar(rng, (2, 8))
        s2 = 0.8
        noise = math.sqrt(s2) * rng.standard_normal((2, 8, 2))
        cfg = tiny_config(iterations=2)
        _, grads, _, tr = loss_and_grad(code, WINDOWS, u, noise, s2, cfg)
        params = code.inner_model.params()

        def loss(value):
            moved = code.with_model(code.inner_model.with_params([value] + params[1:]))
            return loss_and_grad(moved, WINDOWS, u, noise, s2, cfg, tr)[0]

        assert rel_error(grads[0], central_difference(loss, params[0])) < 1e-3


class TestTraining:
    def test_zero_lr_keeps_weights(self):
        code = tiny_code()
        res = train_encoder(code, WINDOWS, tiny_config(lr=0.0, optimizer="sgd"))
        for a, b in zip(res.model.params(), code.inner_model.params()):
            assert np.array_equal(a, b)

    def test_history_is_deterministic(self, tmp_path):
        a = train_encoder(tiny_code(), WINDOWS, tiny_config())
        b = train_encoder(tiny_code(), WINDOWS, tiny_config())
        assert a.history == b.history
        a.history_to_csv(tmp_path / "a.csv")
        b.history_to_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_refresh_period_counters(self):
        res = train_encoder(tiny_code(), WINDOWS, tiny_config(updates=5, refresh_period=2))
        assert [h["table_version"] for h in res.history] == [1, 1, 2, 2, 3]
        assert [h["table_age"] for h in res.history] == [0, 1, 0, 1, 0]

    def test_divergence_guard(self):
        cfg = tiny_config(lr=5.0, optimizer="sgd", updates=40, divergence_factor=1.0,
                          divergence_patience=2)
        with pytest.raises(TrainingDiverged) as err:
            train_encoder(tiny_code(), WINDOWS, cfg)
        assert len(err.value.history) >= 2

    def test_config_validation(self):
        for kw in (dict(batch_size=0), dict(lr=-1.0), dict(updates=0),
                   dict(refresh_period=0), dict(optimizer="rmsprop"), dict(lr=float("nan"))):
            with pytest.raises(ValueError):
                TrainConfig(**kw)

    def test_validate_is_reproducible(self):
        kw = dict(iterations=1, blocks=50, wrap=4, batch_size=20)
        a = validate(tiny_code(), WINDOWS, 1.0, **kw)
        assert a == validate(tiny_code(), WINDOWS, 1.0, **kw)
        assert a["blocks"] == 50 and 0.0 <= a["bler"] <= 1.0


def test_grouped_training_stays_separable():
    from neuralbcjr.analysis import split_discrepancy
    from neuralbcjr.cnn import CnnEncoder

    code = SerialCode(outer_code(), Interleaver.linear(8),
                      random_model((2, 4, 2), (3, 1), 0, groups=2))
    res = train_encoder(code, WINDOWS, tiny_config(groups=2, updates=4, lr=0.05))
    assert split_discrepancy(CnnEncoder(res.model)) < 1e-12
    moved = [not np.array_equal(a, b) for a, b in zip(res.model.params(), code.inner_model.params())]
    assert all(moved)
