"""Loss terms against scalar loop oracles, plus composition and invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypersphere_ad.autodiff import ContractError, Rng, ShapeError, Tape
from hypersphere_ad.losses import (
    KL_VAR_EPS,
    HypersphereState,
    LossWeights,
    kl_loss,
    rec_loss,
    svdd_hard,
    svdd_soft,
    total_loss,
    weight_decay,
)


def rec_oracle(x, x_hat):
    n = x.shape[0]
    total = 0.0
    for i in range(n):
        diff = (x[i] - x_hat[i]).reshape(-1)
        total += sum(float(d) * float(d) for d in diff)
    return total / n


def svdd_soft_oracle(z, c, r, nu):
    n = z.shape[0]
    acc = 0.0
    for i in range(n):
        d2 = sum(float(v) ** 2 for v in (z[i] - c))
        acc += max(0.0, d2 - r * r)
    return r * r + acc / (nu * n)


def svdd_hard_oracle(z, c):
    n = z.shape[0]
    return sum(sum(float(v) ** 2 for v in (z[i] - c)) for i in range(n)) / n


def kl_moments_oracle(z):
    total = 0.0
    for d in range(z.shape[1]):
        mu = float(z[:, d].mean())
        v = float(((z[:, d] - mu) ** 2).mean())
        total += 0.5 * (v + mu * mu - 1.0 - np.log(v + KL_VAR_EPS))
    return total


class TestRecLoss:
    def test_zero_when_equal(self):
        t = Tape()
        x = t.leaf(Rng(0).normal(size=(3, 2, 4, 4), dtype=np.float64))
        assert rec_loss(x, x).data == 0.0

    def test_three_four_five(self):
        t = Tape()
        x = t.leaf(np.array([[3.0, 4.0]]))
        zero = t.leaf(np.zeros((1, 2)))
        assert float(rec_loss(x, zero).data) == 25.0

    def test_matches_loop_oracle(self):
        rng = Rng(1)
        x = rng.normal(size=(6, 2, 3, 3), dtype=np.float64)
        xh = rng.normal(size=(6, 2, 3, 3), dtype=np.float64)
        t = Tape()
        got = float(rec_loss(t.leaf(x), t.leaf(xh)).data)
        assert got == pytest.approx(rec_oracle(x, xh), abs=1e-12)

    def test_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ShapeError):
            rec_loss(t.leaf(np.zeros((2, 3))), t.leaf(np.zeros((2, 4))))


class TestSvddSoft:
    def test_all_points_at_center(self):
        c = np.array([0.3, -0.2])
        hs = HypersphereState(center=c, radius=1.0, nu=0.5)
        t = Tape()
        z = t.leaf(np.tile(c, (5, 1)))
        assert float(svdd_soft(z, hs).data) == pytest.approx(1.0)

    def test_single_point_outside(self):
        hs = HypersphereState(center=np.zeros(2), radius=1.0, nu=1.0)
        t = Tape()
        z = t.leaf(np.array([[1.0, 1.0]]))  # dist^2 = 2
        assert float(svdd_soft(z, hs).data) == pytest.approx(2.0)

    def test_matches_loop_oracle(self):
        rng = Rng(2)
        z = rng.normal(size=(16, 5), dtype=np.float64)
        c = rng.normal(size=(5,), dtype=np.float64)
        hs = HypersphereState(center=c, radius=0.8, nu=0.3)
        t = Tape()
        got = float(svdd_soft(t.leaf(z), hs).data)
        assert got == pytest.approx(svdd_soft_oracle(z, c, 0.8, 0.3), abs=1e-12)

    def test_hinge_inactive_inside_radius(self):
        rng = Rng(3)
        c = rng.normal(size=(4,), dtype=np.float64)
        z = c + 0.01 * rng.normal(size=(8, 4), dtype=np.float64)
        hs = HypersphereState(center=c, radius=2.0, nu=0.1)
        t = Tape()
        assert float(svdd_soft(t.leaf(z), hs).data) == 4.0  # exactly R^2


class TestSvddHard:
    def test_zero_at_center(self):
        c = np.ones(3)
        t = Tape()
        hs = HypersphereState(center=c)
        assert float(svdd_hard(t.leaf(np.tile(c, (4, 1))), hs).data) == 0.0

    def test_mean_of_distances(self):
        hs = HypersphereState(center=np.zeros(1))
        t = Tape()
        z = t.leaf(np.array([[1.0], [np.sqrt(3.0)]]))  # dist^2: 1, 3
        assert float(svdd_hard(z, hs).data) == pytest.approx(2.0)

    def test_matches_loop_oracle(self):
        rng = Rng(4)
        z = rng.normal(size=(10, 3), dtype=np.float64)
        c = rng.normal(size=(3,), dtype=np.float64)
        t = Tape()
        got = float(svdd_hard(t.leaf(z), HypersphereState(center=c)).data)
        assert got == pytest.approx(svdd_hard_oracle(z, c), abs=1e-12)

    def test_translation_covariance(self):
        rng = Rng(5)
        z = rng.normal(size=(7, 4), dtype=np.float64)
        c = rng.normal(size=(4,), dtype=np.float64)
        delta = rng.normal(size=(4,), dtype=np.float64)
        t = Tape()
        a = float(svdd_hard(t.leaf(z), HypersphereState(center=c)).data)
        b = float(svdd_hard(t.leaf(z + delta), HypersphereState(center=c + delta)).data)
        assert a == pytest.approx(b, abs=1e-12)


class TestKlLoss:
    def test_per_sample_zero_at_origin(self):
        t = Tape()
        assert float(kl_loss(t.leaf(np.zeros((4, 3))), mode="per_sample").data) == 0.0

    def test_batch_moments_matched_gaussian(self):
        # mean exactly 0, biased variance exactly 1 per dimension
        col = np.array([-1.0, 1.0, -1.0, 1.0])
        z = np.stack([col, -col], axis=1)
        t = Tape()
        got = float(kl_loss(t.leaf(z), mode="batch_moments").data)
        assert abs(got) <= 1e-7 * z.shape[1]

    def test_batch_moments_large_sample(self):
        z = Rng(6).normal(size=(100_000, 8), dtype=np.float64)
        t = Tape()
        assert float(kl_loss(t.leaf(z), mode="batch_moments").data) < 0.01

    def test_matches_moment_oracle(self):
        z = Rng(7).normal(0.3, 1.4, size=(50, 6), dtype=np.float64)
        t = Tape()
        got = float(kl_loss(t.leaf(z), mode="batch_moments").data)
        assert got == pytest.approx(kl_moments_oracle(z), abs=1e-10)

    def test_collapsed_batch_large_but_finite(self):
        z = np.tile(Rng(8).normal(size=(1, 8), dtype=np.float64), (32, 1))
        t = Tape()
        got = float(kl_loss(t.leaf(z), mode="batch_moments").data)
        assert np.isfinite(got) and got > 5.0

    def test_needs_two_samples(self):
        t = Tape()
        with pytest.raises(ContractError):
            kl_loss(t.leaf(np.zeros((1, 3))), mode="batch_moments")

    def test_unknown_mode(self):
        t = Tape()
        with pytest.raises(ContractError):
            kl_loss(t.leaf(np.zeros((4, 3))), mode="pointwise")


class TestWeightDecay:
    def test_zero_weights(self):
        t = Tape()
        assert float(weight_decay([t.leaf(np.zeros((3, 3)))]).data) == 0.0

    def test_ones_two_by_two(self):
        t = Tape()
        assert float(weight_decay([t.leaf(np.ones((2, 2)))]).data) == 2.0

    def test_matches_loop_oracle(self):
        rng = Rng(9)
        ws = [rng.normal(size=(3, 4), dtype=np.float64),
              rng.normal(size=(2, 3, 3, 3), dtype=np.float64)]
        t = Tape()
        got = float(weight_decay([t.leaf(w) for w in ws]).data)
        expect = 0.5 * sum(float(v) ** 2 for w in ws for v in w.reshape(-1))
        assert got == pytest.approx(expect, abs=1e-12)

    def test_gradient_is_lambda_w(self):
        rng = Rng(10)
        wv = rng.normal(size=(4, 4), dtype=np.float64)
        lam = 0.37
        t = Tape()
        w = t.leaf(wv)
        t.backward(weight_decay([w]) * lam)
        np.testing.assert_allclose(t.grad(w), lam * wv, atol=1e-12)


class TestTotalLoss:
    def _parts(self, rng, n=8, d=4):
        z = rng.normal(size=(n, d), dtype=np.float64)
        x = rng.normal(size=(n, 1, 4, 4), dtype=np.float64)
        xh = rng.normal(size=(n, 1, 4, 4), dtype=np.float64)
        ws = [rng.normal(size=(3, 3), dtype=np.float64)]
        c = rng.normal(size=(d,), dtype=np.float64)
        return z, x, xh, ws, HypersphereState(center=c, radius=0.5, nu=0.4)

    def test_degenerate_weights_equal_svdd_alone(self):
        rng = Rng(11)
        z, x, xh, ws, hs = self._parts(rng)
        t = Tape()
        zt = t.leaf(z)
        total, _ = total_loss(
            "iae_lstm_kl", "soft", [t.leaf(w) for w in ws],
            LossWeights(0.0, 0.0, 0.0), hs,
            x=t.leaf(x), x_hat=t.leaf(xh), z_hat=zt,
        )
        assert float(total.data) == pytest.approx(float(svdd_soft(zt, hs).data), abs=1e-12)

    def test_plain_autoencoder_svdd_composition(self):
        # lambda1=0, lambda2=alpha reproduces the weighted rec + soft-SVDD form
        rng = Rng(12)
        z, x, xh, ws, hs = self._parts(rng)
        alpha = 0.7
        t = Tape()
        zt, xt, xht = t.leaf(z), t.leaf(x), t.leaf(xh)
        wleaves = [t.leaf(w) for w in ws]
        total, _ = total_loss(
            "iaead", "soft", wleaves, LossWeights(0.0, alpha, 0.01), hs,
            x=xt, x_hat=xht, z_hat=zt,
        )
        expect = (
            float(svdd_soft(zt, hs).data)
            + alpha * float(rec_loss(xt, xht).data)
            + 0.01 * float(weight_decay(wleaves).data)
        )
        assert float(total.data) == pytest.approx(expect, rel=1e-12)

    def test_full_variant_matches_term_sum_oracle(self):
        rng = Rng(13)
        z, x, xh, ws, hs = self._parts(rng)
        w = LossWeights(0.3, 0.9, 1e-3)
        t = Tape()
        zt, xt, xht = t.leaf(z), t.leaf(x), t.leaf(xh)
        wleaves = [t.leaf(wv) for wv in ws]
        total, parts = total_loss(
            "iae_lstm_kl", "hard", wleaves, w, hs, x=xt, x_hat=xht, z_hat=zt,
            kl_mode="batch_moments",
        )
        expect = (
            svdd_hard_oracle(z, hs.center)
            + w.lambda1 * kl_moments_oracle(z)
            + w.lambda2 * rec_oracle(x, xh)
            + w.lambda3 * 0.5 * sum(float(v) ** 2 for wv in ws for v in wv.reshape(-1))
        )
        assert float(total.data) == pytest.approx(expect, rel=1e-12)
        assert set(parts) == {"svdd", "kl", "rec", "decay"}

    def test_cae_is_reconstruction_only(self):
        rng = Rng(14)
        z, x, xh, ws, hs = self._parts(rng)
        t = Tape()
        xt, xht = t.leaf(x), t.leaf(xh)
        total, parts = total_loss(
            "cae", "hard", [t.leaf(wv) for wv in ws],
            LossWeights(0.5, 0.5, 0.5), hs, x=xt, x_hat=xht,
        )
        assert float(total.data) == pytest.approx(rec_oracle(x, xh), rel=1e-12)
        assert set(parts) == {"rec"}

    def test_no_decoder_variants_drop_rec(self):
        rng = Rng(15)
        z, x, xh, ws, hs = self._parts(rng)
        t = Tape()
        total, parts = total_loss(
            "dlsvdd", "hard", [t.leaf(wv) for wv in ws],
            LossWeights(0.5, 0.5, 0.0), hs, z_hat=t.leaf(z),
        )
        assert set(parts) == {"svdd", "decay"}

    def test_unknown_variant(self):
        with pytest.raises(ContractError):
            total_loss("mystery", "hard", [], LossWeights(), None)


class TestInvariants:
    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_nonnegativity(self, seed):
        rng = Rng(seed)
        n = int(rng.integers(2, 12))
        d = int(rng.integers(1, 6))
        z = rng.normal(0, 2.0, size=(n, d), dtype=np.float64)
        c = rng.normal(size=(d,), dtype=np.float64)
        r = float(np.abs(rng.normal(dtype=np.float64)))
        nu = float(rng.uniform(0.05, 1.0, dtype=np.float64))
        t = Tape()
        zt = t.leaf(z)
        hs = HypersphereState(center=c, radius=r, nu=nu)
        assert float(svdd_soft(zt, hs).data) >= 0.0
        assert float(svdd_hard(zt, hs).data) >= 0.0
        assert float(kl_loss(zt, "per_sample").data) >= 0.0
        assert float(kl_loss(zt, "batch_moments").data) >= -KL_VAR_EPS * d

    def test_nu_one_all_outside_matches_hard_at_zero_radius(self):
        rng = Rng(16)
        c = rng.normal(size=(3,), dtype=np.float64)
        z = c + 2.0 + np.abs(rng.normal(size=(6, 3), dtype=np.float64))
        hs_soft = HypersphereState(center=c, radius=0.0, nu=1.0)
        t = Tape()
        zt = t.leaf(z)
        assert float(svdd_soft(zt, hs_soft).data) == pytest.approx(
            float(svdd_hard(zt, hs_soft).data), rel=1e-12
        )

    def test_invalid_hypersphere_params(self):
        with pytest.raises(ContractError):
            HypersphereState(center=np.zeros(2), radius=-1.0)
        with pytest.raises(ContractError):
            HypersphereState(center=np.zeros(2), nu=0.0)
        with pytest.raises(ContractError):
            LossWeights(lambda1=-0.1)
