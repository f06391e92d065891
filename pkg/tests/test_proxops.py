"""
Proximity operators — soft threshold, Lambert W, exponential prox, data prox and the frame rule
"""
import numpy as np
import pytest
from scipy import fft, optimize, special

from densitymap.core import RadialBinning
from densitymap.exceptions import DomainError
from densitymap.proxops import (
    ProxParams,
    lambert_w,
    lambert_w_log,
    prox_data,
    prox_scaled_exp,
    prox_tight_frame,
    soft_threshold,
)
from densitymap.randfield import LogNormalParams, StationaryCovariance
from densitymap.transform import DCTDictionary, UnionDictionary


class TestSoftThreshold:
    def test_examples(self):
        np.testing.assert_array_equal(soft_threshold(np.array([3.0, -0.5, -4.0, 0.0]), 1.0), [2.0, 0.0, -3.0, 0.0])
        assert soft_threshold(2.5, 0.0) == 2.5

    def test_negative_threshold(self):
        with pytest.raises(DomainError):
            soft_threshold(1.0, -0.1)

    def test_non_expansive(self, rng):
        a, b = rng.standard_normal((2, 1000)) * 3
        assert np.all(np.abs(soft_threshold(a, 0.7) - soft_threshold(b, 0.7)) <= np.abs(a - b) + 1e-15)


class TestLambertW:
    def test_known_values(self):
        assert lambert_w(0.0) == 0.0
        assert abs(lambert_w(np.e) - 1.0) <= 1e-14
        assert abs(lambert_w(1.0) - 0.567143290409784) <= 1e-12
        assert lambert_w(-np.exp(-1.0)) == -1.0

    def test_residual_over_domain(self):
        x = np.concatenate([
            -np.exp(-1.0) + np.geomspace(1e-9, np.exp(-1.0), 2000),
            np.geomspace(1e-12, 1e6, 8000),
        ])
        w = lambert_w(x)
        residual = np.abs(w * np.exp(w) - x) / np.maximum(np.abs(x), 1.0)
        assert residual.max() <= 1e-12
        np.testing.assert_allclose(w, special.lambertw(x).real, rtol=1e-10, atol=1e-14)

    def test_below_branch_point(self):
        with pytest.raises(DomainError):
            lambert_w(-0.5)

    def test_log_form(self):
        w = lambert_w_log(1000.0)
        assert abs(w + np.log(w) - 1000.0) <= 1e-12 * 1000.0
        assert abs(lambert_w_log(10.0) - lambert_w(np.exp(10.0))) <= 1e-12 * lambert_w(np.exp(10.0))


class TestProxScaledExp:
    def test_examples(self):
        assert abs(prox_scaled_exp(1.0, 1.0)) <= 1e-12
        assert abs(prox_scaled_exp(0.0, 1.0) + 0.567143290409784) <= 1e-12

    def test_small_weight_barely_moves(self):
        a = 1e-12
        assert abs(prox_scaled_exp(3.0, a) - 3.0) <= a * np.exp(3.0) + 1e-15

    def test_optimality_residual(self, rng):
        x = rng.uniform(-20.0, 20.0, 1000)
        a = 10.0 ** rng.uniform(-3.0, 3.0, 1000)
        p = prox_scaled_exp(x, a)
        assert np.max(np.abs(a * np.exp(p) + p - x)) <= 1e-10

    def test_large_argument_is_finite(self):
        x = 1e6
        p = prox_scaled_exp(x, 1.0)
        assert np.isfinite(p)
        assert abs(np.exp(p) + p - x) <= 1e-12 * x

    def test_monotone(self, rng):
        x = np.sort(rng.uniform(-10.0, 10.0, 1000))
        assert np.all(np.diff(prox_scaled_exp(x, 2.0)) > 0)

    def test_stationary_point(self, rng):
        h = 1e-6
        for x, a in zip(rng.uniform(-5.0, 5.0, 50), 10.0 ** rng.uniform(-2.0, 1.0, 50)):
            p = prox_scaled_exp(x, a)

            def g(t):
                return a * np.exp(t) + 0.5 * (t - x) ** 2

            assert abs((g(p + h) - g(p - h)) / (2 * h)) <= 1e-6 * (1.0 + abs(x))

    def test_non_expansive(self, rng):
        x1, x2 = rng.uniform(-8.0, 8.0, (2, 500))
        diff = np.abs(prox_scaled_exp(x1, 0.5) - prox_scaled_exp(x2, 0.5))
        assert np.all(diff <= np.abs(x1 - x2) + 1e-10)

    def test_weight_must_be_positive(self):
        with pytest.raises(DomainError):
            prox_scaled_exp(1.0, 0.0)


def _first_order_root(x, y, beta, gamma, m_bar, sigma2, mu):
    """Root of β m̄ eᵖ + β(γ − y) + 2βγ(p − μ)/σ² + p − x by bracketing."""
    kappa = 1.0 + 2.0 * beta * gamma / sigma2
    r = x + beta * (y - gamma) + 2.0 * beta * gamma * mu / sigma2
    hi = r / kappa
    lo = hi - (beta * m_bar * np.exp(hi) / kappa + 1.0)

    def g(p):
        return kappa * p + beta * m_bar * np.exp(p) - r

    return optimize.brentq(g, lo, hi, xtol=1e-14, maxiter=500)


class TestProxData:
    def _prior(self, shape, sigma2, mu=0.0):
        binning = RadialBinning.linear(shape, 4)
        return LogNormalParams(mu=mu, cov=StationaryCovariance.flat(binning, sigma2))

    def test_fixed_point_at_mean_count(self):
        prior = self._prior((8, 8), 1.0)
        params = ProxParams(beta=1.0, gamma=0.0, lam=0.0, mean_count=3.0)
        p = prox_data(np.zeros((8, 8)), params, prior, np.full((8, 8), 3.0), mode="sandwich")
        assert np.max(np.abs(p)) <= 1e-10

    @pytest.mark.parametrize("mode", ["sandwich", "exact"])
    def test_without_prior_weight_is_pixelwise(self, rng, mode):
        prior = self._prior((8, 8), 0.7)
        params = ProxParams(beta=0.6, gamma=0.0, lam=0.0, mean_count=4.0)
        x = rng.standard_normal((8, 8))
        y = rng.poisson(4.0, (8, 8))
        v = x + 0.6 * y
        expected = v - special.lambertw(0.6 * 4.0 * np.exp(v)).real
        np.testing.assert_allclose(prox_data(x, params, prior, y, mode=mode), expected, atol=1e-10)

    def test_exact_matches_scalar_oracle(self, rng):
        checked = 0
        for _ in range(10):
            beta = rng.uniform(0.2, 1.5)
            gamma = rng.uniform(0.0, 0.5)
            m_bar = rng.uniform(1.0, 10.0)
            sigma2 = rng.uniform(0.1, 2.0)
            mu = rng.uniform(-0.5, 0.5)
            prior = self._prior((10, 10), sigma2, mu)
            params = ProxParams(beta=beta, gamma=gamma, lam=0.0, mean_count=m_bar)
            x = rng.uniform(-2.0, 2.0, (10, 10))
            y = rng.integers(0, 16, (10, 10))
            p = prox_data(x, params, prior, y, mode="exact")
            for (i, j), value in np.ndenumerate(p):
                oracle = _first_order_root(x[i, j], y[i, j], beta, gamma, m_bar, sigma2, mu)
                assert abs(value - oracle) <= 1e-8
                checked += 1
        assert checked == 1000

    def test_exact_agrees_with_golden_section(self):
        prior = self._prior((4, 4), 0.5, 0.2)
        params = ProxParams(beta=0.8, gamma=0.3, lam=0.0, mean_count=5.0)
        x = np.linspace(-1.0, 1.0, 16).reshape(4, 4)
        y = np.arange(16).reshape(4, 4)
        p = prox_data(x, params, prior, y, mode="exact")

        def h(t, xi, yi):
            return 0.8 * (5.0 * np.exp(t) + (0.3 - yi) * t + 0.3 * (t - 0.2) ** 2 / 0.5) + 0.5 * (t - xi) ** 2

        for (i, j), value in np.ndenumerate(p):
            res = optimize.minimize_scalar(h, bracket=(-20.0, 5.0), args=(x[i, j], y[i, j]), method="golden")
            assert abs(value - res.x) <= 1e-6

    def test_sandwich_mode_on_flat_prior(self, rng):
        sigma2, mu, beta, gamma, m_bar = 0.5, 0.3, 0.9, 0.2, 6.0
        prior = self._prior((8, 8), sigma2, mu)
        params = ProxParams(beta=beta, gamma=gamma, lam=0.0, mean_count=m_bar)
        x = rng.standard_normal((8, 8))
        y = rng.poisson(6.0, (8, 8))
        c = 1.0 / (1.0 + gamma * beta / sigma2)
        v = x + beta * (y - gamma + gamma * beta * mu / sigma2)
        expected = c * prox_scaled_exp(c * v, beta * m_bar)
        np.testing.assert_allclose(prox_data(x, params, prior, y, mode="sandwich"), expected, atol=1e-10)

    def test_alias_runs_sandwich(self, powerlaw_prior32, rng):
        params = ProxParams(beta=1.0, gamma=0.1, lam=0.0, mean_count=5.0)
        x = rng.standard_normal((32, 32))
        y = rng.poisson(5.0, (32, 32))
        np.testing.assert_array_equal(
            prox_data(x, params, powerlaw_prior32, y, mode="paper"),
            prox_data(x, params, powerlaw_prior32, y, mode="sandwich"),
        )

    def test_exact_is_non_expansive(self, rng):
        prior = self._prior((8, 8), 0.4)
        params = ProxParams(beta=1.0, gamma=0.1, lam=0.0, mean_count=5.0)
        y = rng.poisson(5.0, (8, 8))
        a, b = rng.standard_normal((2, 8, 8))
        pa = prox_data(a, params, prior, y, mode="exact")
        pb = prox_data(b, params, prior, y, mode="exact")
        assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-12

    def test_exact_needs_flat_prior(self, powerlaw_prior32):
        params = ProxParams(beta=1.0, gamma=0.1, lam=0.0, mean_count=5.0)
        with pytest.raises(DomainError):
            prox_data(np.zeros((32, 32)), params, powerlaw_prior32, np.ones((32, 32)), mode="exact")

    def test_unknown_mode(self, flat_prior32):
        params = ProxParams(beta=1.0, gamma=0.1, lam=0.0, mean_count=5.0)
        with pytest.raises(DomainError):
            prox_data(np.zeros((32, 32)), params, flat_prior32, np.ones((32, 32)), mode="newton")

    def test_params_validated(self):
        with pytest.raises(DomainError):
            ProxParams(beta=0.0, gamma=0.0, lam=0.0, mean_count=1.0)


def _cosine_synthesis_matrix(shape):
    n = shape[0] * shape[1]
    columns = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        columns.append(fft.idctn(e.reshape(shape), type=2, norm="ortho").ravel())
    return np.stack(columns, axis=1)


class TestProxTightFrame:
    def test_identity_inner_prox(self, rng):
        for dictionary in (DCTDictionary((8, 8)), UnionDictionary((8, 8))):
            c = rng.standard_normal(dictionary.coeff_count)
            np.testing.assert_allclose(prox_tight_frame(c, lambda z: z, dictionary), c, atol=1e-12)

    def test_box_projection_on_orthobasis(self, rng):
        dct = DCTDictionary((8, 8))
        c = rng.standard_normal(64)
        out = prox_tight_frame(c, lambda z: np.clip(z, -0.5, 0.5), dct)
        expected = dct.forward(np.clip(dct.synthesize(c), -0.5, 0.5))
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_quadratic_on_orthobasis(self, rng):
        shape = (8, 8)
        dct = DCTDictionary(shape)
        phi = _cosine_synthesis_matrix(shape)
        d = rng.uniform(0.5, 3.0, 64)
        b = rng.standard_normal(64)
        c = rng.standard_normal(64)
        out = prox_tight_frame(c, lambda z: ((z.ravel() + b) / (1.0 + d)).reshape(shape), dct)
        expected = np.linalg.solve(phi.T @ np.diag(d) @ phi + np.eye(64), c + phi.T @ b)
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_quadratic_on_union_frame(self, rng):
        shape = (4, 4)
        union = UnionDictionary(shape)
        nu = union.frame_constant
        phi = np.hstack([_cosine_synthesis_matrix(shape), np.eye(16)])
        d = rng.uniform(0.5, 3.0, 16)
        b = rng.standard_normal(16)
        c = rng.standard_normal(32)
        # the inner prox is that of ν·f for f(x) = ½ xᵀDx − bᵀx
        out = prox_tight_frame(c, lambda z: ((z.ravel() + nu * b) / (1.0 + nu * d)).reshape(shape), union)
        expected = np.linalg.solve(phi.T @ np.diag(d) @ phi + np.eye(32), c + phi.T @ b)
        np.testing.assert_allclose(out, expected, atol=1e-6)
