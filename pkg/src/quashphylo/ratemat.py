"""Rate-matrix algebra for continuous-time Markov substitution models.

Rate matrices, compositions and transition matrices are plain ``numpy``
arrays.  The nucleotide alphabet is ordered ``A, G, C, T`` throughout, so
purines occupy the first two states and pyrimidines the last two.
"""

from typing import NamedTuple

import numpy as np
import scipy.linalg

ALPHABET = "AGCT"
K_DNA = 4

# Upper-triangle order used for GTR exchangeability vectors.
GTR_PAIRS = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]

ROW_SUM_TOL = 1e-10
SIMPLEX_TOL = 1e-12
DETAILED_BALANCE_TOL = 1e-9


def _scale(Q):
    return max(1.0, float(np.max(np.abs(Q))))


def check_rate_matrix(Q, tol=ROW_SUM_TOL):
    """Validate a rate matrix and return it as a float array.

    Off-diagonals must be non-negative and every row must sum to zero.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError(f"rate matrix must be square, got shape {Q.shape}")
    off = Q[~np.eye(Q.shape[0], dtype=bool)]
    if np.any(off < 0):
        raise ValueError("rate matrix has a negative off-diagonal entry")
    if np.max(np.abs(Q.sum(axis=1))) > tol * _scale(Q):
        raise ValueError("rate matrix rows do not sum to zero")
    return Q


def check_composition(pi, tol=SIMPLEX_TOL):
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 1:
        raise ValueError("composition must be a vector")
    if np.any(pi < 0) or not np.all(np.isfinite(pi)):
        raise ValueError("composition has a negative or non-finite entry")
    if abs(pi.sum() - 1.0) > tol:
        raise ValueError(f"composition sums to {pi.sum()!r}, not 1")
    return pi


def _fill_diagonal(Q):
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


def exchangeability_matrix(rho, k=K_DNA):
    """Symmetric exchangeability matrix (zero diagonal) from a GTR vector.

    ``rho`` is either a full ``k x k`` symmetric matrix or a vector of the
    ``k(k-1)/2`` upper-triangle entries in row-major order.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.ndim == 2:
        if rho.shape != (k, k) or not np.allclose(rho, rho.T, rtol=0, atol=1e-14):
            raise ValueError("exchangeability matrix must be square and symmetric")
        S = rho.copy()
    else:
        if rho.shape != (k * (k - 1) // 2,):
            raise ValueError(f"expected {k * (k - 1) // 2} exchangeabilities, got {rho.shape}")
        S = np.zeros((k, k))
        iu = np.triu_indices(k, 1)
        S[iu] = rho
        S = S + S.T
    np.fill_diagonal(S, 0.0)
    if np.any(S[~np.eye(k, dtype=bool)] <= 0):
        raise ValueError("exchangeabilities must be strictly positive")
    return S


def build_gtr(rho, pi):
    """GTR rate matrix ``Q = S Pi`` with the diagonal completing zero row sums."""
    pi = check_composition(pi)
    S = exchangeability_matrix(rho, k=pi.size)
    return _fill_diagonal(S * pi[None, :])


def tn93_exchangeabilities(rho1, rho2, beta_tn=1.0):
    """GTR vector for TN93: C<->T is ``rho1``, A<->G is ``rho2``, transversions ``beta_tn``."""
    if rho1 <= 0 or rho2 <= 0 or beta_tn <= 0:
        raise ValueError("TN93 rates must be strictly positive")
    rho = np.full(6, float(beta_tn))
    rho[GTR_PAIRS.index((0, 1))] = rho2
    rho[GTR_PAIRS.index((2, 3))] = rho1
    return rho


def build_tn93(rho1, rho2, pi):
    """TN93 rate matrix with the transversion rate fixed to one."""
    return build_gtr(tn93_exchangeabilities(rho1, rho2), pi)


def stationary_distribution(Q):
    """Solve ``pi Q = 0`` with ``sum(pi) = 1``.

    The last equation of ``Q^T pi = 0`` is replaced by the normalisation
    row; a singular system means the chain has no unique stationary law.
    """
    Q = check_rate_matrix(Q)
    k = Q.shape[0]
    A = Q.T.copy()
    A[-1, :] = 1.0
    b = np.zeros(k)
    b[-1] = 1.0
    if np.linalg.matrix_rank(A) < k:
        raise ValueError("rate matrix is reducible: stationary distribution is not unique")
    pi = np.linalg.solve(A, b)
    if np.any(pi < -1e-12):
        raise ValueError("rate matrix is reducible: stationary solve gave negative mass")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def is_reversible(Q, pi=None, tol=DETAILED_BALANCE_TOL):
    Q = np.asarray(Q, dtype=float)
    if pi is None:
        pi = stationary_distribution(Q)
    flux = pi[:, None] * Q
    return bool(np.max(np.abs(flux - flux.T)) <= tol * _scale(Q))


def reversible_factorization(Q, pi):
    """Return the symmetric ``S`` with ``Q = S diag(pi)``.

    The diagonal of ``S`` is ``q_uu / pi_u`` so that ``S Pi`` reproduces the
    whole of ``Q``, not only its off-diagonal part.
    """
    Q = check_rate_matrix(Q)
    pi = check_composition(pi)
    if np.any(pi <= 0):
        raise ValueError("composition must be strictly positive to factorise Q")
    if not is_reversible(Q, pi):
        raise ValueError("rate matrix violates detailed balance with respect to pi")
    S = Q / pi[None, :]
    return 0.5 * (S + S.T)


class ReversibleEigen(NamedTuple):
    """Spectral form of a reversible rate matrix.

    ``Q = D^-1 U diag(evals) U^T D`` with ``D = diag(sqrt_pi)`` and ``U``
    orthogonal.
    """

    evals: np.ndarray
    U: np.ndarray
    sqrt_pi: np.ndarray

    def transition(self, exponents):
        """Transition matrices for eigenvalue exponents of shape ``(..., K)``.

        Row ``(..., u)`` of the result is ``exp(t Q')`` for the matrix ``Q'``
        sharing these eigenvectors whose eigenvalues, scaled by ``t``, are
        ``exponents``.
        """
        E = np.exp(exponents)
        left = self.U / self.sqrt_pi[:, None]
        right = self.U.T * self.sqrt_pi[None, :]
        P = (left * E[..., None, :]) @ right
        return np.clip(P, 0.0, None)


def reversible_eigen(Q, pi=None):
    """Symmetric eigendecomposition of ``Pi^1/2 Q Pi^-1/2``."""
    Q = np.asarray(Q, dtype=float)
    if pi is None:
        pi = stationary_distribution(Q)
    sq = np.sqrt(pi)
    A = sq[:, None] * Q / sq[None, :]
    evals, U = np.linalg.eigh(0.5 * (A + A.T))
    return ReversibleEigen(evals, U, sq)


def transition_matrix(Q, ell):
    """``P(ell) = expm(ell Q)``.

    Reversible matrices go through the symmetric eigendecomposition;
    anything else falls back to scipy's Pade scaling-and-squaring.
    """
    if ell < 0:
        raise ValueError(f"branch length must be non-negative, got {ell}")
    Q = check_rate_matrix(Q)
    if ell == 0:
        return np.eye(Q.shape[0])
    try:
        pi = stationary_distribution(Q)
    except ValueError:
        pi = None
    if pi is not None and np.all(pi > 0) and is_reversible(Q, pi):
        eig = reversible_eigen(Q, pi)
        P = eig.transition(ell * eig.evals)
    else:
        P = np.clip(scipy.linalg.expm(ell * Q), 0.0, None)
    return P / P.sum(axis=1, keepdims=True)


def spectral_info(Q):
    """Eigenvalues sorted by decreasing real part, and the spectral gap.

    Returns ``(evals, nu)`` with ``nu = -Re(evals[1])``, the geometric rate
    at which ``P(ell)`` approaches ``1 pi``.
    """
    Q = check_rate_matrix(Q)
    evals = np.linalg.eigvals(Q)
    if not np.all(np.isfinite(evals)):
        raise np.linalg.LinAlgError("eigensolver returned non-finite eigenvalues")
    evals = evals[np.argsort(-evals.real, kind="stable")]
    if abs(evals[0]) > 1e-10 * _scale(Q):
        raise ValueError("leading eigenvalue is not zero; Q is not a valid generator")
    if np.allclose(evals.imag, 0.0, atol=1e-12 * _scale(Q)):
        evals = evals.real.copy()
    evals[0] = 0.0
    return evals, float(-np.real(evals[1]))
