"""Quadratic across-site transformation of a baseline rate matrix.

At a site with linear coefficient ``c > 0`` and quadratic coefficient
``d`` the rate matrix is ``c Q - c d Q^2``.  Row sums stay zero for any
``d``; positivity of the off-diagonals restricts ``d`` to an open interval
``(lower, upper)`` determined by ``Q`` alone.
"""

import math
from dataclasses import dataclass

import numpy as np

from .ratemat import ROW_SUM_TOL, build_tn93, check_composition, check_rate_matrix

# Relative threshold below which an entry of Q^2 imposes no constraint.
DENOM_TOL = 1e-14
CLAMP_EPS = 1e-9


@dataclass(frozen=True)
class QuashBounds:
    lower: float
    upper: float = math.inf

    def __post_init__(self):
        if not (self.lower <= 0 and math.isfinite(self.lower)):
            raise ValueError(f"lower bound must be finite and non-positive, got {self.lower}")
        if not self.upper >= 0:
            raise ValueError(f"upper bound must be non-negative, got {self.upper}")

    @property
    def finite(self):
        return math.isfinite(self.upper)

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, d):
        return self.lower < d < self.upper

    def clamp(self, d, eps=CLAMP_EPS):
        """Pull ``d`` strictly inside the interval by ``eps`` times a capped width."""
        w = self.width if self.finite else max(abs(self.lower), 1.0)
        lo = self.lower + eps * w
        hi = self.upper - eps * w
        return float(np.clip(d, lo, hi))


def _ratio_bounds(Qs):
    """Per-matrix (lower, upper) arrays for a stack of rate matrices."""
    k = Qs.shape[-1]
    off = ~np.eye(k, dtype=bool)
    q = Qs[:, off]
    if np.any(q <= 0):
        raise ValueError("bounds require strictly positive off-diagonal rates")
    denom = np.matmul(Qs, Qs)[:, off]
    tol = DENOM_TOL * np.max(np.abs(Qs), axis=(1, 2))[:, None] ** 2
    neg = denom < -tol
    pos = denom > tol
    if not np.all(np.any(neg, axis=1)):
        raise ValueError("no negative entry in Q^2 off-diagonal; Q is not a valid generator")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = q / denom
    lower = np.max(np.where(neg, ratio, -np.inf), axis=1)
    upper = np.min(np.where(pos, ratio, np.inf), axis=1)
    return lower, upper


def bounds(Q):
    """Open interval of quadratic coefficients keeping ``c(Q - dQ^2)`` valid.

    ``lower`` is the largest ratio ``q_uv / (Q^2)_uv`` over negative
    denominators and ``upper`` the smallest over positive ones (infinite if
    there are none).  A negative denominator always exists when every
    off-diagonal of ``Q`` is positive, so ``lower`` is finite.
    """
    Q = check_rate_matrix(Q)
    lower, upper = _ratio_bounds(Q[None])
    return QuashBounds(float(lower[0]), float(upper[0]))


def joint_bounds(Qs):
    """Intersection of the per-matrix intervals, valid for every matrix in ``Qs``."""
    Qs = np.asarray(list(Qs) if not isinstance(Qs, np.ndarray) else Qs, dtype=float)
    if Qs.ndim != 3 or Qs.shape[0] == 0:
        raise ValueError("joint_bounds needs a non-empty stack of rate matrices")
    scale = np.maximum(1.0, np.max(np.abs(Qs), axis=(1, 2)))
    if np.any(np.max(np.abs(Qs.sum(axis=2)), axis=1) > ROW_SUM_TOL * scale):
        raise ValueError("rate matrix rows do not sum to zero")
    lower, upper = _ratio_bounds(Qs)
    return QuashBounds(float(lower.max()), float(upper.min()))


def quadratic_transform(Q, c, d, validate=True):
    """Site rate matrix ``c Q - c d Q^2``.

    With ``validate`` the coefficients are checked against ``bounds(Q)``;
    pass ``validate=False`` to evaluate the polynomial for any real ``d``.
    """
    Q = np.asarray(Q, dtype=float)
    if validate:
        Q = check_rate_matrix(Q)
        if not c > 0:
            raise ValueError(f"linear coefficient must be positive, got {c}")
        if d != 0:
            b = bounds(Q)
            if not b.contains(d):
                raise ValueError(f"quadratic coefficient {d} outside ({b.lower}, {b.upper})")
    return c * (Q - d * (Q @ Q))


def tn93_transformed_rates(rho1, rho2, pi, c, d):
    """Site-level TN93 rates ``(beta_j, rho1_j, rho2_j)`` in closed form.

    The baseline transversion rate is one.  Transitions between
    pyrimidines (``rho1``) pick up a purine-frequency term and transitions
    between purines (``rho2``) a pyrimidine-frequency term.
    """
    pi = check_composition(pi)
    if not c > 0:
        raise ValueError(f"linear coefficient must be positive, got {c}")
    b = bounds(build_tn93(rho1, rho2, pi))
    if not b.contains(d):
        raise ValueError(f"quadratic coefficient {d} outside ({b.lower}, {b.upper})")
    beta = 1.0
    pi_r = pi[0] + pi[1]
    pi_y = pi[2] + pi[3]
    beta_j = c * beta * (1 + d * beta)
    rho1_j = c * (rho1 + d * (rho1**2 - (rho1 - beta) ** 2 * pi_r))
    rho2_j = c * (rho2 + d * (rho2**2 - (rho2 - beta) ** 2 * pi_y))
    return beta_j, rho1_j, rho2_j


def eigenvalue_map(lam, c, d):
    """Image of an eigenvalue of ``Q`` under the site transform."""
    return c * lam - c * d * lam * lam
