"""Update rules, schedules, and optimizer-state round trips."""
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlstm_lab.errors import ConfigError
from mlstm_lab.numerics import make_rng
from mlstm_lab.optimizers import (AdamState, RmsNormState, Schedule, adam_step,
                                  make_optimizer, optimizer_from_parts,
                                  optimizer_step, rmsprop_normalized_step,
                                  schedule_value)


def _params(rng, sizes=((4, 3), (5,), (2, 2, 2))):
    return {f"p{i}": rng.normal(size=s) for i, s in enumerate(sizes)}


def _flat(d):
    return np.concatenate([d[k].reshape(-1) for k in sorted(d)])


class TestSchedules:
    def test_linear_endpoints_exact(self):
        s = Schedule("linear", 1e-3, 1e-5, 1000)
        assert schedule_value(s, 0) == 1e-3
        assert schedule_value(s, 1000) == 1e-5
        assert schedule_value(s, 5000) == 1e-5

    def test_exponential_endpoints_exact(self):
        s = Schedule("exponential", 1e-3, 1e-5, 100)
        assert schedule_value(s, 0) == 1e-3
        assert schedule_value(s, 100) == 1e-5

    def test_exponential_is_geometric(self):
        s = Schedule("exponential", 1.0, 0.01, 10)
        vals = [schedule_value(s, t) for t in range(11)]
        ratios = [vals[i + 1] / vals[i] for i in range(10)]
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-12)

    def test_linear_midpoint(self):
        s = Schedule("linear", 2.0, 1.0, 4)
        assert schedule_value(s, 2) == pytest.approx(1.5, abs=1e-15)

    def test_negative_step_rejected(self):
        with pytest.raises(ConfigError):
            schedule_value(Schedule("linear", 1.0, 0.1, 10), -1)

    def test_exponential_requires_positive_endpoints(self):
        with pytest.raises(ConfigError):
            Schedule("exponential", 1.0, 0.0, 10)
        with pytest.raises(ConfigError):
            Schedule("exponential", -1.0, 0.1, 10)

    @given(start=st.floats(1e-6, 10.0), end=st.floats(1e-6, 10.0),
           total=st.integers(1, 10_000), t=st.integers(0, 20_000))
    @settings(max_examples=200, deadline=None)
    def test_value_always_between_endpoints(self, start, end, total, t):
        for kind in ("linear", "exponential"):
            v = schedule_value(Schedule(kind, start, end, total), t)
            assert min(start, end) - 1e-12 <= v <= max(start, end) + 1e-12


class TestNormalizedRmsprop:
    def test_update_norm_equals_schedule_exactly(self):
        """The defining property: every step moves the full parameter vector
        by exactly the scheduled step length in 2-norm."""
        rng = make_rng(0)
        params = _params(rng)
        opt = RmsNormState.init(params, Schedule("exponential", 1e-2, 1e-4, 1000))
        for step in range(1000):
            ell = opt.current_ell()
            before = _flat(params)
            grads = {k: rng.normal(size=v.shape) for k, v in params.items()}
            rmsprop_normalized_step(params, grads, opt)
            moved = float(np.linalg.norm(_flat(params) - before))
            assert moved == pytest.approx(ell, rel=1e-12), step

    def test_direction_is_rms_whitened_gradient(self):
        rng = make_rng(1)
        params = {"w": rng.normal(size=(6,))}
        opt = RmsNormState.init(params, Schedule("linear", 0.5, 0.5, 1))
        g = rng.normal(size=(6,))
        before = params["w"].copy()
        rmsprop_normalized_step(params, {"w": g}, opt)
        acc = 0.1 * g * g  # rho=0.9 from zero accumulator
        vstar = g / np.sqrt(acc + opt.eps)
        expect = before - (0.5 / np.linalg.norm(vstar)) * vstar
        np.testing.assert_allclose(params["w"], expect, atol=1e-15)

    def test_zero_gradient_warns_and_skips(self):
        params = {"w": np.ones(4)}
        opt = RmsNormState.init(params, Schedule("linear", 0.1, 0.1, 1))
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            rmsprop_normalized_step(params, {"w": np.zeros(4)}, opt)
        assert len(w) == 1
        assert np.array_equal(params["w"], np.ones(4))
        assert opt.step == 1  # schedule still advances

    def test_key_mismatch_rejected(self):
        params = {"w": np.ones(4)}
        opt = RmsNormState.init(params, Schedule("linear", 0.1, 0.1, 1))
        with pytest.raises(ConfigError):
            rmsprop_normalized_step(params, {"v": np.ones(4)}, opt)


class TestAdam:
    def test_hand_traced_first_steps(self):
        """Three steps on a single scalar against the closed-form recursion."""
        params = {"w": np.array([1.0])}
        opt = AdamState.init(params, Schedule("linear", 0.1, 0.1, 1))
        w, m, v = 1.0, 0.0, 0.0
        for t in range(1, 4):
            g = float(t)  # deterministic gradient stream 1, 2, 3
            adam_step(params, {"w": np.array([g])}, opt)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9 ** t)
            vhat = v / (1 - 0.999 ** t)
            w -= 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
            assert params["w"][0] == pytest.approx(w, rel=1e-12)

    def test_first_step_size_is_lr(self):
        # Bias correction makes the very first update lr * g/|g| (+eps slack).
        params = {"w": np.array([0.0])}
        opt = AdamState.init(params, Schedule("linear", 0.01, 0.01, 1))
        adam_step(params, {"w": np.array([3.7])}, opt)
        assert params["w"][0] == pytest.approx(-0.01, rel=1e-6)

    def test_linear_decay_reaches_floor(self):
        params = {"w": np.zeros(2)}
        opt = AdamState.init(params, Schedule("linear", 1e-3, 1e-4, 10))
        rng = make_rng(2)
        for _ in range(15):
            adam_step(params, {"w": rng.normal(size=2)}, opt)
        assert schedule_value(opt.schedule, opt.step) == 1e-4


class TestFactoryAndSerialization:
    def test_make_optimizer_kinds(self):
        params = {"w": np.zeros(3)}
        a = make_optimizer("adam", params, lr_start=1e-3, lr_min=1e-4,
                           ell_start=1e-3, ell_end=1e-5, total_steps=10)
        r = make_optimizer("rmsprop-normalized", params, lr_start=1e-3,
                           lr_min=1e-4, ell_start=1e-3, ell_end=1e-5,
                           total_steps=10)
        assert isinstance(a, AdamState) and isinstance(r, RmsNormState)
        with pytest.raises(ConfigError):
            make_optimizer("sgd", params, lr_start=1, lr_min=1, ell_start=1,
                           ell_end=1, total_steps=1)

    @pytest.mark.parametrize("name", ["adam", "rmsprop-normalized"])
    def test_state_round_trip_resumes_identically(self, name):
        rng = make_rng(3)
        params = _params(rng)
        opt = make_optimizer(name, params, lr_start=1e-2, lr_min=1e-3,
                             ell_start=1e-2, ell_end=1e-4, total_steps=50)
        grad_stream = [
            {k: rng.normal(size=v.shape) for k, v in params.items()}
            for _ in range(20)
        ]
        for g in grad_stream[:10]:
            optimizer_step(params, g, opt)

        clone_params = {k: v.copy() for k, v in params.items()}
        clone = optimizer_from_parts(
            opt.scalars(),
            {k: v.copy() for k, v in opt.tensors().items()},
        )
        for g in grad_stream[10:]:
            optimizer_step(params, g, opt)
            optimizer_step(clone_params, g, clone)
        for k in params:
            assert np.array_equal(params[k], clone_params[k]), k

    def test_tensor_names_carry_prefixes(self):
        params = {"w": np.zeros(3)}
        a = AdamState.init(params, Schedule("linear", 1, 1, 1))
        r = RmsNormState.init(params, Schedule("linear", 1, 1, 1))
        assert set(a.tensors()) == {"opt.m.w", "opt.v.w"}
        assert set(r.tensors()) == {"opt.acc.w"}
