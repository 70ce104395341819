import numpy as np
import pytest
from scipy.stats import norm

from vcsplit import (
    CrossedDesign,
    Sigma2Param,
    ThetaParam,
    blup,
    build_crossed_Z,
    center_response,
    gen_data,
    qq_data,
    residual_vs_fitted,
)
from vcsplit.model import KernelSet


class TestCenterResponse:
    def test_constant_becomes_zero(self):
        out = center_response(np.full(6, 3.7))
        np.testing.assert_allclose(out.y, 0.0, atol=1e-15)
        assert out.centered

    def test_two_point(self):
        np.testing.assert_allclose(center_response([1.0, 3.0]).y, [-1.0, 1.0])

    def test_already_centered_unchanged(self, rng):
        y = rng.standard_normal(50)
        y -= y.mean()
        np.testing.assert_allclose(center_response(y).y, y, atol=1e-12)

    def test_mean_zero(self, rng):
        out = center_response(rng.normal(5, 2, size=100))
        assert abs(out.y.mean()) < 1e-12


class TestBlup:
    def _resistor_like(self, sigma2=(0.0, 50.0, 40.3), seed=0):
        design = CrossedDesign((10, 3, 2), n_factors=2)
        Z = build_crossed_Z(design)
        ks = KernelSet.from_crossed((10, 3, 2), n_factors=2)
        y = gen_data(Sigma2Param(np.array([0.0, 50.0, 40.0])), ks, seed=seed)
        return y, Z, Sigma2Param(np.array(sigma2))

    def test_zero_variances_give_zero_predictions(self, rng):
        y, Z, _ = self._resistor_like()
        s = Sigma2Param(np.array([0.0, 0.0, 1.0]))
        res = blup(y, Z, s)
        np.testing.assert_array_equal(res.u_hat, 0.0)
        np.testing.assert_array_equal(res.resid, y)

    def test_zero_factor_and_level_count(self):
        y, Z, s = self._resistor_like()
        res = blup(y, Z, s)
        np.testing.assert_array_equal(res.factor_effects(0), 0.0)  # variance 0
        # fitted values take one level per second-factor group
        assert len(np.unique(np.round(res.fitted, 10))) == 3

    def test_scalar_ridge(self):
        y = np.array([2.0, -4.0, 6.0])
        res = blup(y, [np.eye(3)], Sigma2Param(np.array([1.0, 1.0])))
        np.testing.assert_allclose(res.u_hat, y / 2.0)

    def test_fitted_plus_resid_reconstructs_y(self):
        y, Z, s = self._resistor_like(seed=4)
        res = blup(y, Z, s)
        # resid is defined as y - fitted, so reconstruction is exact to rounding
        # of the largest magnitude involved
        tol = 8 * np.finfo(float).eps * max(np.abs(y).max(), np.abs(res.fitted).max())
        np.testing.assert_allclose(res.fitted + res.resid, y, rtol=0, atol=tol)

    def test_scale_equivariance(self):
        y, Z, s = self._resistor_like(seed=9)
        res1 = blup(y, Z, s)
        c = 3.0
        res2 = blup(c * y, Z, Sigma2Param(c**2 * s.sigma2))
        np.testing.assert_allclose(res2.u_hat, c * res1.u_hat, rtol=1e-10)

    def test_shrinkage_limit(self):
        y, Z, s = self._resistor_like(seed=2)
        huge_err = Sigma2Param(np.array([0.0, 50.0, 1e8]))
        res = blup(y, Z, huge_err)
        assert np.abs(res.u_hat).max() < 1e-4 * np.abs(y).max()


class TestQqData:
    def test_three_point_positions(self):
        out = qq_data([-1.0, 1.0, 0.0])
        np.testing.assert_allclose(out[:, 0], norm.ppf([1 / 6, 3 / 6, 5 / 6]))
        np.testing.assert_allclose(out[:, 1], [-1.0, 0.0, 1.0])

    def test_standard_normal_close_to_diagonal(self):
        r = np.random.default_rng(0).standard_normal(10_000)
        out = qq_data(r, scale=1.0)
        inner = out[50:-50]  # tails are noisy
        assert np.abs(inner[:, 0] - inner[:, 1]).max() < 0.1

    def test_constant_residuals_flat(self):
        out = qq_data([2.0, 2.0, 2.0, 2.0], scale=1.0)
        np.testing.assert_allclose(out[:, 1], 2.0)

    def test_scaling(self):
        out = qq_data([-2.0, 0.0, 2.0], scale=2.0)
        np.testing.assert_allclose(out[:, 1], [-1.0, 0.0, 1.0])


def test_residual_vs_fitted_table():
    y = np.array([1.0, 2.0, 3.0])
    res = blup(y, [np.eye(3)], Sigma2Param(np.array([1.0, 1.0])))
    tab = residual_vs_fitted(res)
    np.testing.assert_allclose(tab[:, 0] + tab[:, 1], y)
