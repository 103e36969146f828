"""The six model families: stationary TN93 (S1-S3) and branch-heterogeneous
HB (NS1-NS3), each site-homogeneous, linear (LASH) or quadratic (QuASH).

Every family is evaluated by the same likelihood engine; the family only
decides which parameters exist and the shape of the (c, d) grid.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .likelihood import compress_patterns, grid_log_likelihood, simulate_alignment
from .likelihood import branch_transition_matrices
from .quash import QuashBounds, joint_bounds
from .ratemat import ReversibleEigen, exchangeability_matrix, tn93_exchangeabilities
from .site_effects import QuadDistribution, build_effect_grid
from .tree import Tree, random_tree, yule_log_prior

K = 4


@dataclass(frozen=True)
class Family:
    name: str
    stationary: bool
    rates: bool
    quadratic: bool


FAMILIES = {
    "S1": Family("S1", True, False, False),
    "S2": Family("S2", True, True, False),
    "S3": Family("S3", True, True, True),
    "NS1": Family("NS1", False, False, False),
    "NS2": Family("NS2", False, True, False),
    "NS3": Family("NS3", False, True, True),
}


def get_family(name):
    try:
        return FAMILIES[name.upper()]
    except KeyError:
        raise ValueError(f"unknown model family {name!r}; choose from {sorted(FAMILIES)}") from None


@dataclass
class ModelState:
    """Full parameter vector plus tree.

    Stationary families carry one composition ``pi`` and an unrooted tree.
    HB families carry a rooted tree and ``comps`` with one row per node:
    row ``v`` is the composition of the branch above ``v`` and the root row
    is the root distribution, which the two root branches share (their own
    rows are ignored).
    """

    family: str
    tree: Tree
    rho1: float = 1.0
    rho2: float = 1.0
    pi: np.ndarray = None
    comps: np.ndarray = None
    alpha: float = None
    beta_d: float = None

    def __post_init__(self):
        fam = get_family(self.family)
        self.family = fam.name
        if fam.stationary:
            if self.pi is None:
                self.pi = np.full(K, 1.0 / K)
            self.pi = np.asarray(self.pi, dtype=float)
        else:
            if not self.tree.rooted:
                raise ValueError("HB families need a rooted tree")
            if self.comps is None:
                self.comps = np.full((self.tree.n_nodes, K), 1.0 / K)
            self.comps = np.asarray(self.comps, dtype=float)
            if self.comps.shape != (self.tree.n_nodes, K):
                raise ValueError("comps must have one row per tree node")
        if fam.rates and self.alpha is None:
            self.alpha = 1.0
        if fam.quadratic and self.beta_d is None:
            self.beta_d = 1.0
        if not fam.rates:
            self.alpha = None
        if not fam.quadratic:
            self.beta_d = None

    @property
    def spec(self):
        return FAMILIES[self.family]

    def copy(self):
        return ModelState(
            self.family,
            self.tree.copy(),
            self.rho1,
            self.rho2,
            None if self.pi is None else self.pi.copy(),
            None if self.comps is None else self.comps.copy(),
            self.alpha,
            self.beta_d,
        )

    def root_distribution(self):
        return self.pi if self.spec.stationary else self.comps[self.tree.root]


def branch_compositions(state):
    """Composition governing the branch above each node, shape ``(n_nodes, K)``."""
    tree = state.tree
    if state.spec.stationary:
        return np.tile(state.pi, (tree.n_nodes, 1))
    comps = state.comps.copy()
    for c in tree.children[tree.root]:
        comps[c] = comps[tree.root]
    return comps


def tn93_exchangeability_matrix(rho1, rho2):
    """Symmetric TN93 exchangeabilities (transversions 1) in A, G, C, T order."""
    if not (rho1 > 0 and rho2 > 0):
        raise ValueError("TN93 rates must be strictly positive")
    S = _TRANSVERSIONS.copy()
    S[0, 1] = S[1, 0] = rho2
    S[2, 3] = S[3, 2] = rho1
    return S


_TRANSVERSIONS = exchangeability_matrix(tn93_exchangeabilities(1.0, 1.0))


def branch_matrices(state):
    """Baseline TN93 rate matrix for the branch above each node.

    Exchangeabilities are shared across the tree; compositions are not for
    HB families.  The root slot holds the root-distribution matrix.
    """
    S = tn93_exchangeability_matrix(state.rho1, state.rho2)
    comps = branch_compositions(state)
    Q = S[None, :, :] * comps[:, None, :]
    idx = np.arange(K)
    Q[:, idx, idx] = 0.0
    Q[:, idx, idx] = -Q.sum(axis=2)
    return Q


def _symmetric_eigens(S, comps):
    if np.any(comps <= 0):
        raise ValueError("compositions must be strictly positive")
    sq = np.sqrt(comps)
    A = sq[:, :, None] * S[None] * sq[:, None, :]
    idx = np.arange(K)
    A[:, idx, idx] = -(S[None] * comps[:, None, :]).sum(axis=2)
    evals, U = np.linalg.eigh(A)
    return evals, U, sq


def branch_eigens(state):
    """Stacked reversible eigensystems, one per node.

    Stationary families decompose a single matrix and broadcast it.
    """
    S = tn93_exchangeability_matrix(state.rho1, state.rho2)
    n = state.tree.n_nodes
    if state.spec.stationary:
        evals, U, sq = _symmetric_eigens(S, state.pi[None])
        return ReversibleEigen(
            np.broadcast_to(evals[0], (n, K)),
            np.broadcast_to(U[0], (n, K, K)),
            np.broadcast_to(sq[0], (n, K)),
        )
    return ReversibleEigen(*_symmetric_eigens(S, branch_compositions(state)))


def quash_bounds(state):
    Q = branch_matrices(state)
    if state.spec.stationary:
        return joint_bounds(Q[:1])
    return joint_bounds(Q[state.tree.branch_nodes()])


def effect_grid(state, kc=4, kd=4):
    fam = state.spec
    dist = QuadDistribution(state.beta_d, quash_bounds(state)) if fam.quadratic else None
    return build_effect_grid(
        state.alpha if fam.rates else None,
        dist,
        kc if fam.rates else 1,
        kd if fam.quadratic else 1,
    )


def log_likelihood(state, patterns, kc=4, kd=4, grid=None):
    if grid is None:
        grid = effect_grid(state, kc, kd)
    return grid_log_likelihood(
        patterns, state.tree, branch_eigens(state), state.root_distribution(), grid
    )


def transition_set(state, kc=4, kd=4):
    """Per-branch, per-category transition matrices for the state."""
    return branch_transition_matrices(state.tree, branch_eigens(state), effect_grid(state, kc, kd))


def simulate(state, n_sites, seed, kc=4, kd=4):
    return simulate_alignment(
        state.tree, transition_set(state, kc, kd), state.root_distribution(), n_sites, seed
    )


# priors -------------------------------------------------------------------


@dataclass
class GammaPrior:
    shape: float
    rate: float

    def __post_init__(self):
        self._const = self.shape * math.log(self.rate) - math.lgamma(self.shape)

    def logpdf(self, x):
        if x is None or not 0 < x < math.inf:
            return -math.inf
        return self._const + (self.shape - 1) * math.log(x) - self.rate * x

    def sample(self, rng):
        return float(rng.gamma(self.shape, 1.0 / self.rate))


@dataclass
class PriorConfig:
    """Prior settings; defaults are those used for the rRNA analyses."""

    rho: GammaPrior = field(default_factory=lambda: GammaPrior(1.0, 1.0))
    pi_concentration: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])
    branch_rate: float = 10.0
    alpha: GammaPrior = field(default_factory=lambda: GammaPrior(10.0, 10.0))
    beta_d: GammaPrior = field(default_factory=lambda: GammaPrior(1.0, 1.0))
    topology: str = "auto"
    ar_coefficient: float = 0.94
    ar_variance: float = 0.31

    def __post_init__(self):
        for name in ("rho", "alpha", "beta_d"):
            val = getattr(self, name)
            if isinstance(val, dict):
                setattr(self, name, GammaPrior(**val))
        for g in (self.rho, self.alpha, self.beta_d):
            if not (g.shape > 0 and g.rate > 0):
                raise ValueError("gamma prior shape and rate must be positive")
        if not all(a > 0 for a in self.pi_concentration) or len(self.pi_concentration) != K:
            raise ValueError("Dirichlet concentration must be 4 positive values")
        if not self.branch_rate > 0:
            raise ValueError("branch-length rate must be positive")
        if self.topology not in ("auto", "uniform", "yule"):
            raise ValueError("topology prior must be 'auto', 'uniform' or 'yule'")
        if not 0 < self.ar_coefficient < 1 or not self.ar_variance > 0:
            raise ValueError("AR coefficient must lie in (0, 1) and variance be positive")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown prior settings: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    def topology_prior(self, family):
        if self.topology != "auto":
            return self.topology
        return "uniform" if get_family(family).stationary else "yule"


def alr(pi):
    pi = np.asarray(pi, dtype=float)
    return np.log(pi[..., :-1]) - np.log(pi[..., -1:])


def alr_inverse(x):
    x = np.asarray(x, dtype=float)
    z = np.concatenate([x, np.zeros(x.shape[:-1] + (1,))], axis=-1)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dirichlet_logpdf(pi, conc):
    pi = np.asarray(pi, dtype=float)
    if pi.min() <= 0 or abs(pi.sum() - 1) > 1e-9:
        return -math.inf
    const = math.lgamma(sum(conc)) - sum(math.lgamma(a) for a in conc)
    return const + sum((a - 1) * math.log(p) for a, p in zip(conc, pi.tolist()))


def _normal_logpdf(x, mean, var):
    x = np.asarray(x) - mean
    return float(-0.5 * x.size * math.log(2 * math.pi * var) - 0.5 * (x @ x) / var)


def composition_parent(tree, v):
    """Node whose composition is the AR parent of branch ``v`` (the root for
    branches hanging from the root edge)."""
    p = tree.parent[v]
    return tree.root if tree.parent[p] == tree.root else p


def free_composition_nodes(tree):
    """Nodes carrying a free HB composition: the root and every branch off the root edge."""
    skip = set(tree.children[tree.root])
    return [v for v in range(tree.n_nodes) if v not in skip]


def composition_parents(tree):
    """Free composition nodes other than the root and their AR parents."""
    r = tree.root
    nodes = [v for v in free_composition_nodes(tree) if v != r]
    return nodes, [composition_parent(tree, v) for v in nodes]


def prior_b_log_density(tree, comps, a, b):
    """Autoregressive logistic-normal prior on HB compositions.

    In additive log-ratio coordinates the root composition is
    ``N(0, b / (1 - a^2))`` and each other free branch composition is
    ``N(x_root + a (x_parent - x_root), b)``.  The log-ratio Jacobian turns
    this into a density on the simplex.
    """
    comps = np.asarray(comps, dtype=float)
    if comps.min() <= 0:
        return -math.inf
    x = alr(comps)
    r = tree.root
    nodes, parents = composition_parents(tree)
    resid = x[nodes] - (x[r] + a * (x[parents] - x[r]))
    logc = np.log(comps[nodes]).sum() + np.log(comps[r]).sum()
    lp = _normal_logpdf(x[r], 0.0, b / (1 - a * a)) + _normal_logpdf(resid.ravel(), 0.0, b)
    return lp - logc


def _double_factorial_log(n):
    return sum(math.log(k) for k in range(n, 0, -2))


def topology_log_prior(tree, kind):
    n = tree.n_leaves
    if kind == "yule":
        return yule_log_prior(tree)
    if tree.rooted:
        return -_double_factorial_log(2 * n - 3)
    return -_double_factorial_log(2 * n - 5)


def branch_length_log_prior(tree, rate):
    # the root slot holds a zero length, so sums run over every node
    ell = tree.length
    if ell.min() < 0 or not math.isfinite(ell.sum()):
        return -math.inf
    return (tree.n_nodes - 1) * math.log(rate) - rate * float(ell.sum())


def log_prior(state, config):
    """Sum of the component log prior densities; ``-inf`` outside the support."""
    fam = state.spec
    lp = config.rho.logpdf(state.rho1) + config.rho.logpdf(state.rho2)
    lp += branch_length_log_prior(state.tree, config.branch_rate)
    if fam.rates:
        lp += config.alpha.logpdf(state.alpha)
    if fam.quadratic:
        lp += config.beta_d.logpdf(state.beta_d)
    if fam.stationary:
        lp += dirichlet_logpdf(state.pi, config.pi_concentration)
    else:
        lp += prior_b_log_density(state.tree, state.comps, config.ar_coefficient, config.ar_variance)
    if not math.isfinite(lp):
        return -math.inf
    return lp + topology_log_prior(state.tree, config.topology_prior(state.family))


def sample_prior_b(tree, a, b, rng):
    comps = np.full((tree.n_nodes, K), 1.0 / K)
    x = np.zeros((tree.n_nodes, K - 1))
    r = tree.root
    x[r] = rng.normal(0.0, math.sqrt(b / (1 - a * a)), K - 1)
    for v in tree.preorder():
        if v == r or tree.parent[v] == r:
            continue
        xp = x[composition_parent(tree, v)]
        x[v] = x[r] + a * (xp - x[r]) + rng.normal(0.0, math.sqrt(b), K - 1)
    comps = alr_inverse(x)
    for c in tree.children[r]:
        comps[c] = comps[r]
    return comps


def sample_prior_state(family, names, config, rng):
    """Independent draw from the prior (used to start chains far apart)."""
    fam = get_family(family)
    tree = random_tree(names, rng, rooted=not fam.stationary, mean_length=1.0 / config.branch_rate)
    kw = dict(rho1=config.rho.sample(rng), rho2=config.rho.sample(rng))
    if fam.stationary:
        kw["pi"] = rng.dirichlet(config.pi_concentration)
    else:
        kw["comps"] = sample_prior_b(tree, config.ar_coefficient, config.ar_variance, rng)
    if fam.rates:
        kw["alpha"] = config.alpha.sample(rng)
    if fam.quadratic:
        kw["beta_d"] = config.beta_d.sample(rng)
    return ModelState(fam.name, tree, **kw)


def posterior_predictive_draw(state, n_sites, seed, kc=4, kd=4):
    """Distinct-character statistics of one alignment simulated from ``state``."""
    from .diagnostics import distinct_char_stats

    return distinct_char_stats(simulate(state, n_sites, seed, kc, kd))


__all__ = [
    "FAMILIES",
    "Family",
    "ModelState",
    "PriorConfig",
    "GammaPrior",
    "QuashBounds",
    "branch_compositions",
    "branch_eigens",
    "branch_matrices",
    "compress_patterns",
    "effect_grid",
    "log_likelihood",
    "log_prior",
    "posterior_predictive_draw",
    "prior_b_log_density",
    "quash_bounds",
    "sample_prior_state",
    "simulate",
]
