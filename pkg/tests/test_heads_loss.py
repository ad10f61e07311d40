import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference_check, np64, pearson_loss_loop, smooth_l1_loop
from vidformer.config import ConfigError
from vidformer.heads_loss import (ConvHead, TokenHead, combined_loss, dual_objective, pearson_loss,
                                  smooth_l1_loss)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
signals = arrays(np.float64, st.integers(3, 40), elements=finite)


class TestConvHead:
    def test_shape(self):
        assert ConvHead(16)(torch.randn(1, 16, 50, 8, 8)).shape == (1, 50)

    def test_matches_loop(self):
        torch.manual_seed(0)
        head = ConvHead(3).double()
        x = torch.randn(2, 3, 4, 2, 3, dtype=torch.float64)
        w, b = np64(head.proj.weight)[0, :, 0, 0, 0], np64(head.proj.bias)[0]
        xn = np64(x)
        ref = [[sum(b + sum(w[c] * xn[n, c, t, h, ww] for c in range(3)) for h in range(2) for ww in range(3)) / 6
                for t in range(4)] for n in range(2)]
        np.testing.assert_allclose(np64(head(x)), ref, atol=1e-6)

    def test_spatially_constant_feature(self):
        head = ConvHead(2)
        x = torch.randn(1, 2, 5, 1, 1).expand(1, 2, 5, 4, 4)
        torch.testing.assert_close(head(x), head.proj(x[..., :1, :1])[:, 0, :, 0, 0])


class TestTokenHead:
    def test_shape(self):
        assert TokenHead(64, 80, 50, 4, 256)(torch.randn(1, 80, 64)).shape == (1, 50)

    def test_zero_weights_give_bias(self):
        head = TokenHead(8, 5, 7, 2, 6)
        for m in (head.reduce, head.fc1, head.fc2):
            torch.nn.init.zeros_(m.weight)
        torch.testing.assert_close(head(torch.randn(3, 5, 8)), head.fc2.bias.expand(3, 7).detach())

    def test_gradients(self):
        torch.manual_seed(0)
        head = TokenHead(6, 4, 5, 2, 7).double()
        x = torch.randn(2, 4, 6, dtype=torch.float64)
        worst, failures, total = central_difference_check(lambda: head(x).sum(), list(head.parameters()))
        assert failures == 0, f"{failures}/{total}, worst {worst:.2e}"


class TestPearson:
    def test_identity_and_negation(self):
        y = torch.tensor([0.3, -1.0, 2.0, 0.5], dtype=torch.float64)
        assert abs(pearson_loss(y, y).item()) < 1e-12
        assert abs(pearson_loss(-y, y).item() - 2) < 1e-12

    def test_small_example(self):
        assert pearson_loss([1.0, 2, 3], [1.0, 2, 4]).item() == pytest.approx(0.01802, abs=1e-4)

    def test_zero_variance_scores_one(self, caplog):
        with caplog.at_level("WARNING"):
            assert pearson_loss([1.0, 1, 1], [1.0, 2, 3]).item() == 1.0
        assert "zero-variance" in caplog.text

    def test_zero_variance_gradient_finite(self):
        y = torch.ones(5, dtype=torch.float64, requires_grad=True)
        pearson_loss(y, torch.arange(5.0, dtype=torch.float64)).backward()
        assert torch.all(torch.isfinite(y.grad))

    @given(signals, st.integers(0, 2 ** 31 - 1))
    def test_matches_loop(self, y, seed):
        Y = np.random.default_rng(seed).normal(size=len(y))
        assert pearson_loss(y, Y).item() == pytest.approx(pearson_loss_loop(y, Y), abs=1e-9)

    @given(signals, st.floats(0.1, 10), st.floats(-5, 5))
    def test_affine_invariance(self, y, a, b):
        assume(np.ptp(y) > 1e-3)
        Y = np.sin(np.arange(len(y)))
        assert pearson_loss(a * y + b, Y).item() == pytest.approx(pearson_loss(y, Y).item(), abs=1e-6)

    @given(signals)
    def test_range(self, y):
        v = pearson_loss(y, np.cos(np.arange(len(y)))).item()
        assert -1e-12 <= v <= 2 + 1e-12

    def test_batched_mean(self):
        y = torch.randn(3, 10, dtype=torch.float64)
        Y = torch.randn(3, 10, dtype=torch.float64)
        expected = np.mean([pearson_loss_loop(np64(y[i]), np64(Y[i])) for i in range(3)])
        assert pearson_loss(y, Y).item() == pytest.approx(expected, abs=1e-12)

    def test_gradient_wrt_prediction(self):
        torch.manual_seed(1)
        y = torch.randn(12, dtype=torch.float64, requires_grad=True)
        Y = torch.randn(12, dtype=torch.float64)
        worst, failures, total = central_difference_check(lambda: combined_loss(y, Y), [y])
        assert failures == 0, f"worst {worst:.2e}"

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pearson_loss([1.0, 2.0], [1.0, 2.0, 3.0])


class TestSmoothL1:
    @pytest.mark.parametrize("diff,value", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5), (1.0, 0.5)])
    def test_point_values(self, diff, value):
        assert smooth_l1_loss([0.0], [diff]).item() == value

    @given(signals, st.integers(0, 10_000))
    def test_matches_loop(self, y, seed):
        Y = np.random.default_rng(seed).normal(scale=2, size=len(y))
        assert smooth_l1_loss(y, Y).item() == pytest.approx(smooth_l1_loop(y, Y), rel=1e-12, abs=1e-12)

    @given(signals)
    def test_non_negative(self, y):
        assert smooth_l1_loss(y, -y).item() >= 0


class TestCombined:
    def test_half_alpha_is_mean(self):
        y = torch.randn(20, dtype=torch.float64)
        Y = torch.randn(20, dtype=torch.float64)
        lp, l1 = pearson_loss(y, Y).item(), smooth_l1_loss(y, Y).item()
        assert combined_loss(y, Y, 0.5).item() == pytest.approx((lp + l1) / 2, abs=1e-15)

    def test_extremes(self):
        y, Y = torch.randn(9, dtype=torch.float64), torch.randn(9, dtype=torch.float64)
        assert combined_loss(y, Y, 1.0).item() == pearson_loss(y, Y).item()
        assert combined_loss(y, Y, 0.0).item() == smooth_l1_loss(y, Y).item()

    @pytest.mark.parametrize("alpha", [-0.1, 1.5, math.nan])
    def test_alpha_range(self, alpha):
        with pytest.raises(ConfigError):
            combined_loss([1.0, 2.0], [2.0, 1.0], alpha)


class TestDualObjective:
    def test_perfect(self):
        Y = torch.randn(2, 10)
        total, parts = dual_objective(Y, Y, Y)
        assert total.item() == pytest.approx(0.0, abs=1e-6)
        assert set(parts) == {"r1", "r2"}

    def test_opposite_heads(self):
        Y = torch.randn(10, dtype=torch.float64)
        total, _ = dual_objective(Y, -Y, Y, 0.5)
        assert total.item() == pytest.approx(0.5 * 2 + 0.5 * smooth_l1_loss(-Y, Y).item(), abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_sum_of_parts(self, seed):
        g = torch.Generator().manual_seed(seed)
        r1, r2, Y = (torch.randn(6, generator=g, dtype=torch.float64) for _ in range(3))
        total, _ = dual_objective(r1, r2, Y, 0.3)
        expected = sum(0.3 * pearson_loss_loop(np64(r), np64(Y)) + 0.7 * smooth_l1_loop(np64(r), np64(Y))
                       for r in (r1, r2))
        assert total.item() == pytest.approx(expected, abs=1e-7)

    def test_missing_head(self):
        Y = torch.randn(10)
        total, parts = dual_objective(Y, None, Y)
        assert set(parts) == {"r1"}
        with pytest.raises(ValueError):
            dual_objective(None, None, Y)
