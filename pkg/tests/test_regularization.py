"""Variational dropout masks and weight normalization."""
import numpy as np
import pytest

from mlstm_lab.errors import ConfigError
from mlstm_lab.numerics import make_rng
from mlstm_lab.regularization import (apply_hidden_mask, sample_masks,
                                      weight_norm_backward, weight_norm_effective,
                                      weight_norm_init_gains)


class TestMasks:
    def test_values_are_zero_or_inverse_keep(self):
        masks = sample_masks(0, 64, 0.25, make_rng(0))
        vals = np.unique(masks.hidden_mask)
        assert set(vals.tolist()) <= {0.0, 1.0 / 0.75}

    def test_window_constancy_is_structural(self):
        """One mask array per window: every timestep multiplies by the same
        bits because there is no time axis to vary over."""
        masks = sample_masks(8, 16, 0.5, make_rng(1), batch=3, layers=2)
        assert masks.hidden_mask.shape == (3, 2, 16)
        assert masks.emb_mask.shape == (3, 8)

    def test_masks_differ_across_windows(self):
        rng = make_rng(2)
        draws = [sample_masks(0, 32, 0.2, rng).hidden_mask for _ in range(10)]
        for i in range(len(draws)):
            for j in range(i + 1, len(draws)):
                assert not np.array_equal(draws[i], draws[j])

    def test_p_zero_is_exactly_ones(self):
        masks = sample_masks(4, 8, 0.0, make_rng(3), batch=2)
        assert np.all(masks.hidden_mask == 1.0)
        assert np.all(masks.emb_mask == 1.0)

    def test_p_zero_apply_is_bitwise_identity(self):
        masks = sample_masks(0, 8, 0.0, make_rng(3))
        h = make_rng(4).normal(size=8)
        assert np.array_equal(apply_hidden_mask(h, masks), h)

    def test_empirical_keep_rate(self):
        p = 0.3
        masks = sample_masks(0, 100_000, p, make_rng(5))
        keep = float(np.mean(masks.hidden_mask > 0))
        assert abs(keep - (1 - p)) < 0.01

    def test_separate_embedding_rate(self):
        masks = sample_masks(50_000, 50_000, 0.2, make_rng(6), p_emb=0.5)
        keep_h = float(np.mean(masks.hidden_mask > 0))
        keep_e = float(np.mean(masks.emb_mask > 0))
        assert abs(keep_h - 0.8) < 0.01 and abs(keep_e - 0.5) < 0.01

    def test_scaling_preserves_expectation(self):
        masks = sample_masks(0, 200_000, 0.4, make_rng(7))
        assert abs(float(masks.hidden_mask.mean()) - 1.0) < 0.01

    def test_invalid_rate(self):
        with pytest.raises(ConfigError):
            sample_masks(0, 8, 1.0, make_rng(0))
        with pytest.raises(ConfigError):
            sample_masks(0, 8, -0.1, make_rng(0))


class TestWeightNorm:
    def test_effective_matches_definition(self):
        rng = make_rng(0)
        v = rng.normal(size=(7, 5))
        g = rng.uniform(0.5, 2.0, size=5)
        eff = weight_norm_effective(v, g)
        for j in range(5):
            np.testing.assert_allclose(
                eff[:, j], g[j] * v[:, j] / np.linalg.norm(v[:, j]), atol=1e-14)

    def test_init_gains_reproduce_v_bitwise(self):
        v = make_rng(1).normal(size=(9, 9))
        g = weight_norm_init_gains(v)
        # g_j = ||v_j|| makes the effective matrix equal v up to rounding of
        # the multiply-divide round trip; columns norms themselves match.
        np.testing.assert_array_equal(g, np.linalg.norm(v, axis=0))
        np.testing.assert_allclose(weight_norm_effective(v, g), v, rtol=1e-15)

    def test_column_rescaling_invariance(self):
        """Scaling a column of v leaves the effective weights unchanged."""
        rng = make_rng(2)
        v = rng.normal(size=(6, 4))
        g = rng.uniform(0.5, 2.0, size=4)
        v2 = v.copy()
        v2[:, 1] *= 7.5
        np.testing.assert_allclose(weight_norm_effective(v, g),
                                   weight_norm_effective(v2, g), atol=1e-13)

    def test_degenerate_column_rejected(self):
        v = np.ones((4, 3))
        v[:, 2] = 0.0
        with pytest.raises(ConfigError):
            weight_norm_effective(v, np.ones(3))

    def test_backward_matches_finite_differences(self):
        rng = make_rng(3)
        v = rng.normal(size=(6, 4))
        g = rng.uniform(0.5, 2.0, size=4)
        d_eff = rng.normal(size=(6, 4))

        def scalar(v_, g_):
            return float(np.sum(weight_norm_effective(v_, g_) * d_eff))

        d_v, d_g = weight_norm_backward(v, g, d_eff)
        eps = 1e-6
        for idx in np.ndindex(v.shape):
            vp, vm = v.copy(), v.copy()
            vp[idx] += eps
            vm[idx] -= eps
            fd = (scalar(vp, g) - scalar(vm, g)) / (2 * eps)
            assert abs(fd - d_v[idx]) < 1e-7, idx
        for j in range(g.size):
            gp, gm = g.copy(), g.copy()
            gp[j] += eps
            gm[j] -= eps
            fd = (scalar(v, gp) - scalar(v, gm)) / (2 * eps)
            assert abs(fd - d_g[j]) < 1e-7, j
