"""Cell definitions: parameter accounting, initialisation, step semantics.

The tensor-factorization equivalence is checked against an explicitly
materialised per-symbol transition stack, and the fused-architecture collapse
is checked against a plain LSTM wired to the composed matrices.
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlstm_lab.cells import (ARCH_KINDS, Arch, GATE_SLOTS, StepState, init_params,
                             lstm_step, mlstm_step, mrnn_step, param_count,
                             rnn_step, tensor_from_mrnn, tensor_rnn_step,
                             tensor_schema, zero_state)
from mlstm_lab.errors import ConfigError
from mlstm_lab.numerics import make_rng


def _arch(kind, h=11, **kw):
    return Arch(kind=kind, hidden=h, **kw)


class TestArch:
    def test_layers_only_for_stacked(self):
        with pytest.raises(ConfigError):
            Arch(kind="lstm", hidden=4, layers=2)
        assert Arch(kind="stacked-lstm", hidden=4, layers=3).layers == 3

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            Arch(kind="gru", hidden=4)

    def test_input_dim_prefers_embedding(self):
        assert _arch("mlstm", embed=40).input_dim(205) == 40
        assert _arch("mlstm").input_dim(205) == 205


class TestParamCount:
    def test_recurrent_ratio_five_fourths(self):
        for h in (1, 7, 450, 1900):
            m = param_count(_arch("mlstm", h), 205).recurrent
            l = param_count(_arch("lstm", h), 205).recurrent
            assert m * 4 == l * 5          # exactly 1.25, in integers

    def test_reported_totals(self):
        # ~20M: width 1900, 205 one-hot inputs, no embedding
        t1 = param_count(_arch("mlstm", 1900), 205).total
        assert abs(t1 - 20_000_000) / 20_000_000 < 0.02
        # ~22M: embedding 400 plus per-column gains
        t2 = param_count(_arch("mlstm", 1900, embed=400), 205, weight_norm=True).total
        assert abs(t2 - 22_000_000) / 22_000_000 < 0.02
        # ~46M: width 2800
        t3 = param_count(_arch("mlstm", 2800, embed=400), 205, weight_norm=True).total
        assert abs(t3 - 46_000_000) / 46_000_000 < 0.02

    def test_width_tradeoff_at_small_vocab(self):
        assert (param_count(_arch("mlstm", 450), 27).total
                < param_count(_arch("lstm", 512), 27).total)

    def test_counts_match_actual_tensors(self):
        for kind in ARCH_KINDS:
            if kind == "tensor-rnn":
                continue
            arch = _arch(kind, 9, layers=2 if kind == "stacked-lstm" else 1, embed=6)
            for wn in (False, True):
                params = init_params(arch, 13, 1.0, make_rng(0), weight_norm=wn)
                total = sum(v.size for v in params.values())
                assert param_count(arch, 13, weight_norm=wn).total == total, (kind, wn)

    def test_mlstm_recurrent_is_five_squares(self):
        assert param_count(_arch("mlstm", 11), 7).recurrent == 5 * 11 * 11


class TestSchemaAndInit:
    def test_forget_bias_lives_in_last_quarter(self):
        params = init_params(_arch("lstm", 8), 5, 1.0, make_rng(0))
        b = params["gates_b"]
        assert GATE_SLOTS.index("forget") == 3
        assert np.all(b[3 * 8:] == 3.0) and np.all(b[:3 * 8] == 0.0)

    def test_recurrent_blocks_are_orthogonal(self):
        params = init_params(_arch("mlstm", 16), 5, 1.0, make_rng(0), dtype=np.float64)
        for j in range(4):                       # each (h, h) block of gates_wm
            block = params["gates_wm"][:, 16 * j:16 * (j + 1)]
            np.testing.assert_allclose(block.T @ block, np.eye(16), atol=1e-12)
        np.testing.assert_allclose(params["m_wh"].T @ params["m_wh"], np.eye(16),
                                   atol=1e-12)

    def test_init_scale_applied(self):
        params = init_params(_arch("vanilla-rnn", 12), 5, 0.5, make_rng(0),
                             dtype=np.float64)
        np.testing.assert_allclose(params["rnn_wh"].T @ params["rnn_wh"],
                                   0.25 * np.eye(12), atol=1e-12)

    def test_schema_order_is_deterministic(self):
        a = [n for n, _s, _i in tensor_schema(_arch("mlstm", 7, embed=4), 11)]
        b = [n for n, _s, _i in tensor_schema(_arch("mlstm", 7, embed=4), 11)]
        assert a == b and a[0] == "emb_w" and a[-1] == "out_b"

    def test_seed_determinism_and_independence(self):
        p1 = init_params(_arch("mlstm", 9), 7, 1.0, make_rng(3))
        p2 = init_params(_arch("mlstm", 9), 7, 1.0, make_rng(3))
        p3 = init_params(_arch("mlstm", 9), 7, 1.0, make_rng(4))
        assert all(np.array_equal(p1[k], p2[k]) for k in p1)
        assert any(not np.array_equal(p1[k], p3[k]) for k in p1)

    def test_tensor_rnn_cap(self):
        with pytest.raises(ConfigError):
            tensor_schema(_arch("tensor-rnn", 8), 65)

    def test_weight_norm_gains_equal_column_norms(self):
        params = init_params(_arch("mlstm", 10), 6, 1.0, make_rng(1),
                             weight_norm=True, dtype=np.float64)
        for name in ("m_wh", "gates_wm"):
            np.testing.assert_array_equal(
                params[f"{name}_g"], np.linalg.norm(params[name], axis=0))


class TestSteps:
    def test_rnn_step_bounded(self):
        params = init_params(_arch("vanilla-rnn", 16), 9, 1.0, make_rng(0),
                             dtype=np.float64)
        state = StepState(h=make_rng(1).normal(size=16))
        out = rnn_step(params, state.h, 3)
        assert out.h.shape == (16,) and np.all(np.abs(out.h) < 1.0)

    @pytest.mark.parametrize("variant", ["standard", "gate-inside-tanh"])
    def test_lstm_step_ranges(self, variant):
        params = init_params(_arch("lstm", 16), 9, 1.0, make_rng(0), dtype=np.float64)
        rng = make_rng(2)
        state = StepState(h=rng.normal(size=16), c=rng.normal(size=16))
        new = lstm_step(params, state, 5, variant=variant)
        assert np.all(np.abs(new.h) < 1.0)

    def test_variants_differ(self):
        params = init_params(_arch("lstm", 16), 9, 1.0, make_rng(0), dtype=np.float64)
        rng = make_rng(2)
        state = StepState(h=rng.normal(size=16), c=rng.normal(size=16))
        a = lstm_step(params, state, 5, variant="standard")
        b = lstm_step(params, state, 5, variant="gate-inside-tanh")
        assert not np.allclose(a.h, b.h)

    def test_step_replay_is_bitwise(self):
        params = init_params(_arch("mlstm", 16), 9, 1.0, make_rng(0), dtype=np.float64)
        rng = make_rng(3)
        state = StepState(h=rng.normal(size=16), c=rng.normal(size=16))
        m1, s1 = mlstm_step(params, state, 4)
        m2, s2 = mlstm_step(params, state, 4)
        assert np.array_equal(m1, m2) and np.array_equal(s1.h, s2.h)
        assert np.array_equal(s1.c, s2.c)

    def test_zero_state_shapes(self):
        s = zero_state(_arch("stacked-lstm", 8, layers=3), batch=5)
        assert s.h.shape == (3, 5, 8) and s.c.shape == (3, 5, 8)
        s1 = zero_state(_arch("vanilla-rnn", 8))
        assert s1.h.shape == (8,) and s1.c is None


class TestFactorizationEquivalence:
    def test_mrnn_equals_tensor_rnn_100_draws(self):
        """The factorized transition matches the materialised per-symbol
        tensor to 1e-12 over 100 random draws (N, h <= 16)."""
        rng = make_rng(23)
        worst = 0.0
        for trial in range(100):
            n = int(rng.integers(2, 17))
            h = int(rng.integers(2, 17))
            arch = _arch("mrnn", h)
            params = init_params(arch, n, 1.0, rng, dtype=np.float64)
            tensor = tensor_from_mrnn(params, n)
            x = int(rng.integers(0, n))
            h_prev = rng.normal(size=h)
            _m, s_fact = mrnn_step(params, h_prev, x)
            s_tensor = tensor_rnn_step(tensor, params, h_prev, x)
            worst = max(worst, float(np.max(np.abs(s_fact.h - s_tensor.h))))
        assert worst < 1e-12, worst

    def test_embedded_mrnn_also_equivalent(self):
        rng = make_rng(5)
        arch = _arch("mrnn", 12, embed=6)
        params = init_params(arch, 9, 1.0, rng, dtype=np.float64)
        tensor = tensor_from_mrnn(params, 9)
        h_prev = rng.normal(size=12)
        for x in range(9):
            _m, s_fact = mrnn_step(params, h_prev, x)
            s_tensor = tensor_rnn_step(tensor, params, h_prev, x)
            np.testing.assert_allclose(s_fact.h, s_tensor.h, atol=1e-12)


class TestFusedCollapse:
    def test_all_ones_input_factor_reduces_to_composed_lstm(self):
        """With the input side of the multiplicative factor forced to one,
        the fused step equals a plain LSTM whose recurrent matrix is the
        composition m_wh @ gates_wm (1e-12, float64)."""
        rng = make_rng(11)
        h = 13
        arch = _arch("mlstm", h)
        params = init_params(arch, 7, 1.0, rng, dtype=np.float64)
        params["m_wx"] = np.ones_like(params["m_wx"])
        lstm_params = {
            "gates_wx": params["gates_wx"],
            "gates_wh": params["m_wh"] @ params["gates_wm"],
            "gates_b": params["gates_b"],
        }
        state = StepState(h=rng.normal(size=h), c=rng.normal(size=h))
        for x in range(7):
            m, fused = mlstm_step(params, state, x)
            plain = lstm_step(lstm_params, state, x)
            np.testing.assert_allclose(fused.h, plain.h, atol=1e-12)
            np.testing.assert_allclose(fused.c, plain.c, atol=1e-12)


@given(st.integers(1, 64), st.integers(2, 300))
@settings(max_examples=40, deadline=None)
def test_param_total_positive_and_monotone_in_width(h, n):
    small = param_count(Arch(kind="mlstm", hidden=h), n).total
    bigger = param_count(Arch(kind="mlstm", hidden=h + 1), n).total
    assert 0 < small < bigger
