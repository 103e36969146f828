import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate

from quashphylo.quash import QuashBounds
from quashphylo.site_effects import (
    QuadDistribution,
    build_effect_grid,
    gamma_rate_quantiles,
    quad_density,
    quad_moments,
    quad_quantiles,
)


def dist(beta, lower, upper=math.inf):
    return QuadDistribution(beta, QuashBounds(lower, upper))


def test_gamma_quantiles_exponential_case(frozen):
    assert_allclose(gamma_rate_quantiles(1.0, 2), frozen["exp1_quantiles_k2"], rtol=1e-12)


@pytest.mark.parametrize("alpha", ["0.5", "2.0"])
def test_gamma_quantiles_against_extended_precision(frozen, alpha):
    expected = frozen["gamma_quantiles"][alpha]
    assert_allclose(gamma_rate_quantiles(float(alpha), 4), expected, rtol=1e-12)


def test_gamma_quantiles_concentrate_for_large_shape():
    assert np.abs(gamma_rate_quantiles(10000.0, 4) - 1.0).max() < 0.05


def test_gamma_quantiles_are_not_renormalised():
    q = gamma_rate_quantiles(0.5, 4)
    assert abs(q.mean() - 1.0) > 0.1


def test_exponential_special_case_density(frozen):
    assert quad_density(0.5, dist(2.0, 0.0)) == pytest.approx(frozen["exp2_density_at_half"], rel=1e-12)
    x = np.linspace(0.01, 5.0, 50)
    assert_allclose(quad_density(x, dist(2.0, 0.0)), 2.0 * np.exp(-2.0 * x), rtol=1e-9)


def test_exponential_special_case_quantiles_and_moments(frozen):
    assert_allclose(quad_quantiles(dist(1.0, 0.0), 2), frozen["exp1_quantiles_k2"], rtol=1e-9)
    for beta in [0.1, 1.0, 10.0]:
        mean, var = quad_moments(dist(beta, 0.0))
        assert mean == pytest.approx(1.0 / beta, rel=1e-9)
        assert var == pytest.approx(1.0 / beta**2, rel=1e-9)


@pytest.mark.parametrize(
    "d", [dist(0.5, -0.3, 2.0), dist(1.0, -1.0, 0.5), dist(3.0, -0.25), dist(0.2, -2.0, 0.1)]
)
def test_density_mode_is_zero(d):
    hi = d.upper if math.isfinite(d.upper) else 5.0
    x = np.linspace(d.lower, hi, 20001)[1:-1]
    mode = x[np.argmax(quad_density(x, d))]
    assert abs(mode) <= 2 * (x[1] - x[0])


def test_finite_density_integrates_to_one():
    d = dist(1.0, -0.5, 1.5)
    total, _ = integrate.quad(lambda x: quad_density(x, d), -0.5, 1.5, points=[0.0], limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("case", ["finite", "semi_infinite"])
def test_quad_quantiles_against_extended_precision(frozen, case):
    q = frozen["quad_quantiles"][case]
    upper = math.inf if q["upper"] is None else q["upper"]
    got = quad_quantiles(dist(q["beta"], q["lower"], upper), q["kd"])
    assert_allclose(got, q["values"], rtol=1e-9, atol=1e-12)


def test_quad_moments_against_quadrature(frozen):
    for m in frozen["quad_moments"]:
        upper = math.inf if m["upper"] is None else m["upper"]
        assert_allclose(quad_moments(dist(m["beta"], m["lower"], upper)), m["moments"], rtol=1e-9)


def test_quantiles_match_monte_carlo_cdf():
    d = dist(0.7, -0.4, 1.2)
    locs = quad_quantiles(d, 8)
    draws = np.sort(d.sample(np.random.default_rng(3), 1_000_000))
    ecdf = np.searchsorted(draws, locs) / draws.size
    assert_allclose(ecdf, (np.arange(1, 9) - 0.5) / 8, atol=0.002)


@pytest.mark.parametrize("lower,upper", [(-1.0, math.inf), (-1.0, 3.0), (-0.5, 0.5)])
def test_large_beta_shrinks_to_zero(lower, upper):
    d = dist(1e4, lower, upper)
    scale = min(abs(lower), upper if math.isfinite(upper) else 1.0)
    assert np.abs(quad_quantiles(d, 4)).max() < 0.01 * scale


def test_mean_decays_with_beta():
    means = [quad_moments(dist(b, -0.3, 2.0))[0] for b in [1.0, 10.0, 100.0, 1000.0]]
    assert all(abs(a) > abs(b) for a, b in zip(means, means[1:]))


def test_large_beta_spread_scales_as_inverse_root():
    # the spread is of order sqrt(|lower| / beta), so narrow intervals shrink
    # more slowly relative to their width
    sds = [math.sqrt(quad_moments(dist(b, -0.3, 2.0))[1]) for b in [1e4, 1e6]]
    assert sds[0] / sds[1] == pytest.approx(10.0, rel=0.01)
    assert np.abs(quad_quantiles(dist(1e6, -0.3, 2.0), 4)).max() < 0.003


def test_small_beta_shape_quantiles_finite():
    # Beta shape near zero used to lose the complementary tail
    locs = quad_quantiles(dist(1e-3, -0.5, 3.0), 4)
    assert np.all(np.isfinite(locs))
    assert np.all(np.diff(locs) > 0)


def test_grid_shape_and_weights():
    g = build_effect_grid(0.5, dist(1.0, -0.3, 2.0), 4, 4)
    c, d = g.pairs()
    assert g.n_categories == 16 and len(c) == len(d) == 16
    assert g.weight == 1.0 / 16
    assert_allclose(c[:4], c[0])


def test_degenerate_grids():
    g = build_effect_grid(None, None, 1, 1)
    c, d = g.pairs()
    assert c.tolist() == [1.0] and d.tolist() == [0.0]
    with pytest.raises(ValueError):
        build_effect_grid(None, None, 4, 1)
