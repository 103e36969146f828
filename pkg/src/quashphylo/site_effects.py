"""Random-effect laws for the site coefficients and their discretisation.

Linear coefficients follow a unit-mean ``Gamma(alpha, alpha)`` law.  The
quadratic coefficient is a shifted power transform of a Beta variable
``b`` whose parameters are chosen so that the density of ``d`` has its
mode at zero inside the validity interval ``(lower, upper)``:

* finite ``upper``:   ``d = lower + w (1 - b**(1/w))`` with ``w = upper - lower``
* infinite ``upper``: ``d = lower - log(b)``

Both maps are decreasing in ``b``.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from .quash import QuashBounds

CDF_CHECK_TOL = 1e-8
TINY_B = 1e-250


class QuantileError(RuntimeError):
    """Raised when a CDF inversion does not reproduce its target probability."""


def _midpoint_probs(k):
    if k < 1:
        raise ValueError(f"number of categories must be >= 1, got {k}")
    return (np.arange(1, k + 1) - 0.5) / k


@lru_cache(maxsize=1024)
def _gamma_quantiles(alpha, kc):
    p = _midpoint_probs(kc)
    x = special.gammaincinv(alpha, p)
    resid = np.abs(special.gammainc(alpha, x) - p)
    if not np.all(np.isfinite(x)) or np.any(resid > CDF_CHECK_TOL):
        raise QuantileError(f"gamma quantile inversion failed for alpha={alpha}")
    return x / alpha


def gamma_rate_quantiles(alpha, kc):
    """Category locations ``(a - 0.5)/kc`` quantiles of ``Gamma(alpha, alpha)``.

    No rescaling to unit mean is applied.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return _gamma_quantiles(float(alpha), int(kc)).copy()


@dataclass(frozen=True)
class QuadDistribution:
    """Law of the quadratic coefficient given ``beta`` and the bounds."""

    beta: float
    bounds: QuashBounds

    def __post_init__(self):
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be positive and finite, got {self.beta}")

    @property
    def lower(self):
        return self.bounds.lower

    @property
    def upper(self):
        return self.bounds.upper

    @property
    def width(self):
        return self.bounds.width

    @property
    def log_b_param(self):
        """Log of the ``b(Q)`` constant."""
        if self.bounds.finite:
            if self.upper == 0:
                return math.inf
            return self.width * math.log(self.width / self.upper)
        return -self.lower

    @property
    def beta_params(self):
        """Shape parameters ``(p, q)`` of the underlying Beta variable."""
        if self.bounds.finite:
            p = self.beta + 1.0 / self.width
        else:
            p = self.beta
        q = self.beta * math.expm1(self.log_b_param) + 1.0
        return p, q

    def from_log_b(self, log_b):
        """Map ``log(b)`` to ``d``."""
        log_b = np.asarray(log_b, dtype=float)
        if self.bounds.finite:
            return self.lower - self.width * np.expm1(log_b / self.width)
        return self.lower - log_b

    def sample(self, rng, size):
        p, q = self.beta_params
        return self.from_log_b(np.log(rng.beta(p, q, size)))


def quad_density(d, dist):
    """Density of the quadratic coefficient at ``d`` (zero outside the support)."""
    d = np.asarray(d, dtype=float)
    p, q = dist.beta_params
    out = np.zeros(d.shape)
    inside = (d > dist.lower) & (d < dist.upper)
    x = d[inside]
    if dist.bounds.finite:
        log_t = np.log((dist.upper - x) / dist.width)
        log_b = dist.width * log_t
        log_jac = (dist.width - 1.0) * log_t
    else:
        log_b = dist.lower - x
        log_jac = log_b
    log_f = (
        (p - 1.0) * log_b
        + special.xlogy(q - 1.0, -np.expm1(log_b))
        - special.betaln(p, q)
        + log_jac
    )
    out[inside] = np.exp(log_f)
    return out if out.ndim else float(out)


@lru_cache(maxsize=4096)
def _quad_quantiles(beta, lower, upper, kd):
    dist = QuadDistribution(beta, QuashBounds(lower, upper))
    p_d = _midpoint_probs(kd)
    a, b = dist.beta_params
    if not math.isfinite(b):
        # b(Q) overflowed: the law collapses onto the upper end point.
        return np.full(kd, dist.bounds.clamp(dist.upper))
    # decreasing map: the p-quantile of d is the (1-p)-quantile of b
    # b is taken from whichever tail is better conditioned: b itself when
    # small, 1 - b otherwise
    xb = special.betaincinv(a, b, 1.0 - p_d)
    x1mb = special.betaincinv(b, a, p_d)
    use_b = xb < 0.5
    # below this b underflows; invert the leading term x**a / (a B(a, b))
    tiny = use_b & (xb < TINY_B)
    resid = np.where(
        use_b,
        np.abs(special.betainc(a, b, xb) - (1.0 - p_d)),
        np.abs(special.betainc(b, a, x1mb) - p_d),
    )
    resid[tiny] = 0.0
    ok = np.isfinite(np.where(use_b, xb, x1mb))
    if not np.all(ok) or np.any(resid > CDF_CHECK_TOL):
        raise QuantileError(f"Beta({a}, {b}) quantile inversion failed")
    with np.errstate(divide="ignore"):
        log_b = np.where(use_b, np.log(xb), np.log1p(-x1mb))
    log_b[tiny] = (np.log1p(-p_d[tiny]) + math.log(a) + special.betaln(a, b)) / a
    d = dist.from_log_b(log_b)
    return np.array([dist.bounds.clamp(v) for v in d])


def quad_quantiles(dist, kd):
    """Category locations ``(a' - 0.5)/kd`` quantiles of the quadratic law."""
    return _quad_quantiles(float(dist.beta), float(dist.lower), float(dist.upper), int(kd)).copy()


def quad_moments(dist):
    """Conditional mean and variance of the quadratic coefficient.

    Finite ``upper`` uses Beta moments of ``b**(1/w)`` via log-beta ratios;
    infinite ``upper`` uses digamma/trigamma differences.
    """
    p, q = dist.beta_params
    if dist.bounds.finite:
        w = dist.width

        # log E[b**s] as a difference of log-beta functions; betaln keeps
        # its accuracy when one argument is large, which a difference of
        # four gammaln terms does not
        def log_moment(s):
            return special.betaln(p + q, s) - special.betaln(p, s)

        lm1 = log_moment(1.0 / w)
        lm2 = log_moment(2.0 / w)
        m1 = math.exp(lm1)
        mean = dist.lower + w * (1.0 - m1)
        var = w * w * m1 * m1 * math.expm1(lm2 - 2.0 * lm1)
        return float(mean), float(max(var, 0.0))
    s = p + q
    mean = dist.lower - (special.digamma(p) - special.digamma(s))
    var = special.polygamma(1, p) - special.polygamma(1, s)
    return float(mean), float(var)


@dataclass(frozen=True)
class EffectGrid:
    """Cartesian (c, d) category grid with equal weights."""

    c_locations: np.ndarray
    d_locations: np.ndarray

    @property
    def kc(self):
        return len(self.c_locations)

    @property
    def kd(self):
        return len(self.d_locations)

    @property
    def n_categories(self):
        return self.kc * self.kd

    @property
    def weight(self):
        return 1.0 / self.n_categories

    def pairs(self):
        """Flattened ``(c, d)`` arrays, c-major."""
        if "_pairs" not in self.__dict__:
            c = np.repeat(self.c_locations, self.kd)
            d = np.tile(self.d_locations, self.kc)
            object.__setattr__(self, "_pairs", (c, d))
        return self.__dict__["_pairs"]


def build_effect_grid(alpha, dist, kc, kd):
    """Grid of category locations.

    ``alpha=None`` gives the single location ``c = 1`` and ``dist=None`` the
    single location ``d = 0``; these encode site-homogeneous and linear-only
    models respectively.
    """
    if alpha is None:
        if kc != 1:
            raise ValueError("kc must be 1 when there is no rate distribution")
        c = np.ones(1)
    else:
        c = gamma_rate_quantiles(alpha, kc)
    if dist is None:
        if kd != 1:
            raise ValueError("kd must be 1 when there is no quadratic distribution")
        d = np.zeros(1)
    else:
        d = quad_quantiles(dist, kd)
    return EffectGrid(c, d)
