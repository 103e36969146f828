"""Metropolis-within-Gibbs sampling over model parameters and trees.

One sweep visits, in a fixed order: the two transition-rate parameters,
the composition vector(s), ``alpha``, ``beta_d``, every branch length, and
finally one topology move.  Positive scalars use log-scale Gaussian random
walks; compositions use a Gaussian random walk in additive log-ratio
coordinates.  Step sizes adapt during burn-in and are frozen afterwards.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from . import models
from .likelihood import (
    eigen_factors,
    message_operators,
    node_partial,
    root_site_log_likelihood,
    transition_from_factors,
)
from .models import (
    alr,
    alr_inverse,
    branch_eigens,
    dirichlet_logpdf,
    effect_grid,
    free_composition_nodes,
    log_prior,
    prior_b_log_density,
    sample_prior_state,
)
from .site_effects import QuantileError
from .tree import Tree, _adjacency, _suppress, from_adjacency, parse_newick, serialize_newick

INTERIOR_EPS = 1e-8
ADAPT_BATCH = 50
MOVES = ("NNI", "SPR", "root")


@dataclass
class ProposalConfig:
    """Random-walk scales and topology-move mix.

    ``sigma_comp`` is the step size of the log-ratio random walk on
    compositions (smaller means more concentrated proposals).
    """

    sigma_rho: float = 0.5
    sigma_alpha: float = 0.5
    sigma_beta: float = 0.7
    sigma_length: float = 0.6
    sigma_comp: float = 0.15
    move_probs: dict = field(default_factory=lambda: {"NNI": 0.5, "SPR": 0.3, "root": 0.2})
    adapt: bool = True
    target_accept: float = 0.3

    def __post_init__(self):
        for name in ("sigma_rho", "sigma_alpha", "sigma_beta", "sigma_length", "sigma_comp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if set(self.move_probs) - set(MOVES):
            raise ValueError(f"unknown topology moves: {set(self.move_probs) - set(MOVES)}")
        probs = list(self.move_probs.values())
        if any(p < 0 for p in probs) or abs(sum(probs) - 1) > 1e-9:
            raise ValueError("topology move probabilities must be non-negative and sum to 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target acceptance must lie in (0, 1)")


@lru_cache(maxsize=None)
def _reference_orders(k):
    """Component orders putting each possible reference component last."""
    return [np.r_[np.delete(np.arange(k), r), r] for r in range(k)]


class LikelihoodSnapshot(NamedTuple):
    factors: tuple
    grid: object
    P: np.ndarray
    ops: dict
    partials: list
    scales: list
    log_lik: float


class LikelihoodEngine:
    """Pruning with retained partials so branch-local changes are cheap.

    A snapshot is never modified; updates return a new snapshot sharing the
    untouched arrays.
    """

    def __init__(self, patterns, kc, kd):
        self.patterns = patterns
        self.kc = kc
        self.kd = kd

    def _prune(self, state, ops, partials, scales, nodes):
        tree = state.tree
        lp = self.patterns.leaf_columns(tree.names)
        n_leaves = tree.n_leaves
        for v in nodes:
            kids = tree.children[v]
            partials[v], ls = node_partial(kids, ops, lp, partials, n_leaves)
            for c in kids:
                if c >= n_leaves:
                    ls += scales[c]
            scales[v] = ls
        r = tree.root
        site = root_site_log_likelihood(partials[r], scales[r], state.root_distribution())
        with np.errstate(invalid="ignore"):
            total = float(site @ self.patterns.weights)
        return total if not math.isnan(total) else -math.inf

    def evaluate(self, state):
        tree = state.tree
        factors = eigen_factors(branch_eigens(state))
        grid = effect_grid(state, self.kc, self.kd)
        P = transition_from_factors(tree.length, factors, grid)
        ops = message_operators(tree, P)
        partials, scales = [None] * tree.n_nodes, [None] * tree.n_nodes
        internal = [v for v in tree.postorder() if not tree.is_leaf(v)]
        ll = self._prune(state, ops, partials, scales, internal)
        return LikelihoodSnapshot(factors, grid, P, ops, partials, scales, ll)

    def update_branches(self, state, snap, nodes, eig=None):
        """Snapshot after the branches above ``nodes`` changed (length or
        composition).  ``eig`` replaces the eigensystems if given."""
        tree = state.tree
        factors = snap.factors if eig is None else eigen_factors(eig)
        P = snap.P.copy()
        sub = tuple(a[nodes] for a in factors)
        P[nodes] = transition_from_factors(tree.length[nodes], sub, snap.grid)
        ops = dict(snap.ops)
        ops.update(message_operators(tree, P, nodes))
        dirty = set()
        for v in nodes:
            u = tree.parent[v]
            while u >= 0 and u not in dirty:
                dirty.add(u)
                u = tree.parent[u]
        order = [v for v in tree.postorder() if v in dirty]
        partials, scales = list(snap.partials), list(snap.scales)
        ll = self._prune(state, ops, partials, scales, order)
        return LikelihoodSnapshot(factors, snap.grid, P, ops, partials, scales, ll)


class _ConstantEngine:
    """Stand-in likelihood for sampling from the prior."""

    def evaluate(self, state):
        return LikelihoodSnapshot(None, None, None, None, None, None, 0.0)

    def update_branches(self, state, snap, nodes, eig=None):
        return snap


@dataclass
class ChainTrace:
    """Thinned output of one chain."""

    family: str
    names: list
    seed: int
    iterations: int
    burn_in: int
    thin: int
    columns: dict = field(default_factory=dict)
    trees: list = field(default_factory=list)
    lengths: list = field(default_factory=list)
    acceptance: dict = field(default_factory=dict)
    sigmas: dict = field(default_factory=dict)
    final_state: object = None

    def __len__(self):
        return len(self.trees)

    def column(self, name):
        return np.asarray(self.columns[name], dtype=float)

    def acceptance_rates(self):
        return {k: (a / n if n else float("nan")) for k, (a, n) in self.acceptance.items()}

    def header(self):
        return list(self.columns)

    def row(self, i):
        return [self.columns[k][i] for k in self.columns]


def trace_columns(family):
    fam = models.get_family(family)
    cols = ["iteration", "logL", "logPrior", "rho1", "rho2", "alpha", "beta_d", "tree_length"]
    prefix = "pi" if fam.stationary else "pi_root"
    return cols + [f"{prefix}_{ch}" for ch in "AGCT"]


def _format_value(x):
    if x is None:
        return "NA"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def tree_to_newick(state):
    """Newick for a sampled tree; HB compositions go in ``[&pi=...]`` comments."""
    comments = {}
    if not state.spec.stationary:
        comps = models.branch_compositions(state)
        comments = {
            v: "&pi=" + ",".join(repr(float(x)) for x in comps[v]) for v in range(state.tree.n_nodes)
        }
    return serialize_newick(state.tree, support={}, comments=comments)


class Sampler:
    """One chain: mutable state plus cached likelihood and prior values."""

    def __init__(self, state, patterns, priors, proposals, rng, kc=4, kd=4, prior_only=False):
        if patterns is None and not prior_only:
            raise ValueError("data are required unless sampling from the prior")
        self.state = state.copy()
        self.priors = priors
        self.proposals = proposals
        self.rng = rng
        self.kc, self.kd = kc, kd
        self.engine = _ConstantEngine() if prior_only else LikelihoodEngine(patterns, kc, kd)
        self.snap = self.engine.evaluate(self.state)
        self.log_prior = log_prior(self.state, priors)
        if not math.isfinite(self.log_prior):
            raise ValueError("initial state lies outside the prior support")
        if not math.isfinite(self.snap.log_lik):
            raise ValueError("initial state has zero likelihood")
        self.sigmas = {
            "rho1": proposals.sigma_rho,
            "rho2": proposals.sigma_rho,
            "alpha": proposals.sigma_alpha,
            "beta_d": proposals.sigma_beta,
            "length": proposals.sigma_length,
            "comp": proposals.sigma_comp,
            "comp_shift": proposals.sigma_comp,
        }
        self.counts = {}
        fam = self.state.spec
        probs = {k: v for k, v in proposals.move_probs.items() if v > 0}
        if fam.stationary:
            probs.pop("root", None)
        if self.state.tree.n_leaves < 4:
            probs.pop("SPR", None)
            if fam.stationary or self.state.tree.n_leaves < 3:
                probs.pop("NNI", None)
        if self.state.tree.n_leaves < 3:
            probs.pop("root", None)
        total = sum(probs.values())
        self.moves = [(k, v / total) for k, v in sorted(probs.items())] if total > 0 else []

    @property
    def log_lik(self):
        return self.snap.log_lik

    def _record(self, block, accepted):
        a, n = self.counts.get(block, (0, 0))
        self.counts[block] = (a + int(accepted), n + 1)

    def _accept(self, log_ratio):
        if not log_ratio > -math.inf:
            return False
        return log_ratio >= 0 or math.log(self.rng.random()) < log_ratio

    # continuous parameters -------------------------------------------------

    def mh_update_scalar(self, name):
        """Log-scale random walk on ``rho1``, ``rho2``, ``alpha`` or ``beta_d``."""
        state = self.state
        old = getattr(state, name)
        new = old * math.exp(self.sigmas[name] * self.rng.standard_normal())
        prior = {"rho1": self.priors.rho, "rho2": self.priors.rho,
                 "alpha": self.priors.alpha, "beta_d": self.priors.beta_d}[name]
        d_prior = prior.logpdf(new) - prior.logpdf(old)
        accepted = False
        if math.isfinite(d_prior):
            setattr(state, name, new)
            try:
                snap = self.engine.evaluate(state)
            except (ValueError, FloatingPointError, QuantileError):
                snap = None
            if snap is not None:
                log_ratio = snap.log_lik - self.log_lik + d_prior + math.log(new / old)
                accepted = self._accept(log_ratio)
            if accepted:
                self.snap = snap
                self.log_prior += d_prior
            else:
                setattr(state, name, old)
        self._record(name, accepted)
        return accepted

    def mh_update_length(self, v):
        tree = self.state.tree
        old = tree.length[v]
        new = old * math.exp(self.sigmas["length"] * self.rng.standard_normal())
        if not new > 0:
            self._record("length", False)
            return False
        d_prior = self.priors.branch_rate * (old - new)
        tree.length[v] = new
        snap = self.engine.update_branches(self.state, self.snap, [v])
        log_ratio = snap.log_lik - self.log_lik + d_prior + math.log(new / old)
        accepted = self._accept(log_ratio)
        if accepted:
            self.snap = snap
            self.log_prior += d_prior
        else:
            tree.length[v] = old
        self._record("length", accepted)
        return accepted

    def _propose_simplex(self, pi):
        """Gaussian step in log-ratio coordinates against a randomly chosen
        reference component, so that no component mixes worse than the rest."""
        k = len(pi)
        order = _reference_orders(k)[self.rng.integers(k)]
        x = alr(pi[order]) + self.sigmas["comp"] * self.rng.standard_normal(k - 1)
        new = np.empty(k)
        new[order] = alr_inverse(x)
        return new if np.all(new > INTERIOR_EPS) else None

    def mh_update_composition(self, node=None):
        """Random walk in log-ratio space on ``pi`` (stationary) or on the
        HB composition of ``node``.  The Jacobian of the log-ratio map (the
        same for every reference component) enters as the product of the
        composition entries."""
        state = self.state
        if state.spec.stationary:
            old = state.pi
            new = self._propose_simplex(old)
            accepted = False
            if new is not None:
                conc = self.priors.pi_concentration
                d_prior = dirichlet_logpdf(new, conc) - dirichlet_logpdf(old, conc)
                state.pi = new
                snap = self.engine.evaluate(state)
                log_ratio = (
                    snap.log_lik - self.log_lik + d_prior
                    + np.log(new).sum() - np.log(old).sum()
                )
                accepted = self._accept(log_ratio)
                if accepted:
                    self.snap = snap
                    self.log_prior += d_prior
                else:
                    state.pi = old
            self._record("comp", accepted)
            return accepted

        tree = state.tree
        old_row = state.comps[node].copy()
        new_row = self._propose_simplex(old_row)
        accepted = False
        if new_row is not None:
            a, b = self.priors.ar_coefficient, self.priors.ar_variance
            old_b = prior_b_log_density(tree, state.comps, a, b)
            touched = [node] + (list(tree.children[tree.root]) if node == tree.root else [])
            comps = state.comps.copy()
            comps[touched] = new_row
            d_prior = prior_b_log_density(tree, comps, a, b) - old_b
            old_comps = state.comps
            state.comps = comps
            snap = self._composition_snapshot(touched)
            log_ratio = (
                snap.log_lik - self.log_lik + d_prior
                + np.log(new_row).sum() - np.log(old_row).sum()
            )
            accepted = self._accept(log_ratio)
            if accepted:
                self.snap = snap
                self.log_prior += d_prior
            else:
                state.comps = old_comps
        self._record("comp", accepted)
        return accepted

    def mh_shift_compositions(self):
        """Add one common log-ratio offset to every HB composition.

        The autoregressive increments between branches are unchanged, so
        the move explores the overall composition level that single-branch
        updates can only reach slowly.
        """
        state = self.state
        tree = state.tree
        free = free_composition_nodes(tree)
        old_comps = state.comps
        x = alr(old_comps[free]) + self.sigmas["comp_shift"] * self.rng.standard_normal(old_comps.shape[1] - 1)
        new_free = alr_inverse(x)
        accepted = False
        if np.all(new_free > INTERIOR_EPS):
            comps = old_comps.copy()
            comps[free] = new_free
            for c in tree.children[tree.root]:
                comps[c] = comps[tree.root]
            a, b = self.priors.ar_coefficient, self.priors.ar_variance
            d_prior = (
                prior_b_log_density(tree, comps, a, b)
                - prior_b_log_density(tree, old_comps, a, b)
            )
            state.comps = comps
            snap = self.engine.evaluate(state)
            log_ratio = (
                snap.log_lik - self.log_lik + d_prior
                + np.log(new_free).sum() - np.log(old_comps[free]).sum()
            )
            accepted = self._accept(log_ratio)
            if accepted:
                self.snap = snap
                self.log_prior += d_prior
            else:
                state.comps = old_comps
        self._record("comp_shift", accepted)
        return accepted

    def _composition_snapshot(self, touched):
        state = self.state
        if state.spec.quadratic or isinstance(self.engine, _ConstantEngine):
            # joint bounds, hence the d grid, depend on every composition
            return self.engine.evaluate(state)
        eig = branch_eigens(state)
        nodes = [v for v in touched if v != state.tree.root]
        return self.engine.update_branches(state, self.snap, nodes, eig=eig)

    # topology ----------------------------------------------------------------

    def topology_move(self, kind):
        """Propose ``kind`` in {"NNI", "SPR", "root"} and accept or reject."""
        state = self.state
        rooted = not state.spec.stationary
        if kind == "NNI":
            proposal = _rooted_nni(state, self.rng) if rooted else _unrooted_nni(state, self.rng)
        elif kind == "SPR":
            proposal = _rooted_spr(state, self.rng) if rooted else _unrooted_spr(state, self.rng)
        elif kind == "root":
            if state.spec.stationary:
                raise ValueError("root moves are not used for stationary families")
            proposal = _root_move(state, self.rng)
        else:
            raise ValueError(f"unknown topology move {kind!r}")
        new_state, log_hastings = proposal
        new_prior = log_prior(new_state, self.priors)
        accepted = False
        if math.isfinite(new_prior):
            snap = self.engine.evaluate(new_state)
            log_ratio = snap.log_lik - self.log_lik + new_prior - self.log_prior + log_hastings
            accepted = self._accept(log_ratio)
            if accepted:
                self.state, self.snap, self.log_prior = new_state, snap, new_prior
        self._record(kind, accepted)
        return accepted

    # schedule -----------------------------------------------------------------

    def sweep(self):
        state = self.state
        self.mh_update_scalar("rho1")
        self.mh_update_scalar("rho2")
        if state.spec.stationary:
            self.mh_update_composition()
        else:
            for v in free_composition_nodes(state.tree):
                self.mh_update_composition(v)
            self.mh_shift_compositions()
        if state.spec.rates:
            self.mh_update_scalar("alpha")
        if state.spec.quadratic:
            self.mh_update_scalar("beta_d")
        for v in self.state.tree.branch_nodes():
            self.mh_update_length(v)
        if self.moves:
            u = self.rng.random()
            acc = 0.0
            for kind, p in self.moves:
                acc += p
                if u < acc:
                    break
            self.topology_move(kind)

    def adapt(self, batch_counts, batch_index):
        """Nudge every log step size toward the target acceptance rate."""
        gamma = 1.0 / math.sqrt(batch_index + 1)
        for key in self.sigmas:
            a, n = self.counts.get(key, (0, 0))
            a0, n0 = batch_counts.get(key, (0, 0))
            if n - n0 == 0:
                continue
            rate = (a - a0) / (n - n0)
            s = math.log(self.sigmas[key]) + gamma * (rate - self.proposals.target_accept)
            self.sigmas[key] = float(np.clip(math.exp(s), 1e-4, 10.0))

    def recomputed(self):
        """Log-likelihood and log-prior recomputed from scratch."""
        return self.engine.evaluate(self.state).log_lik, log_prior(self.state, self.priors)

    def sample_row(self, iteration):
        s = self.state
        comp = s.root_distribution()
        return [
            iteration, self.log_lik, self.log_prior, s.rho1, s.rho2, s.alpha, s.beta_d,
            s.tree.tree_length(), *comp,
        ]


def _open_streams(trace_path, tree_path, columns):
    out_trace = open(trace_path, "w") if trace_path else None
    out_trees = open(tree_path, "w") if tree_path else None
    if out_trace:
        out_trace.write("\t".join(columns) + "\n")
        out_trace.flush()
    return out_trace, out_trees


def run_chain(
    family,
    patterns,
    priors=None,
    proposals=None,
    iterations=1000,
    burn_in=500,
    thin=10,
    seed=0,
    kc=4,
    kd=4,
    init=None,
    names=None,
    prior_only=False,
    trace_path=None,
    tree_path=None,
    check_every=0,
):
    """Run one chain and return its :class:`ChainTrace`.

    ``iterations`` counts sweeps including burn-in; samples are taken at
    sweeps ``burn_in + thin, burn_in + 2 thin, ...``.  Without ``init`` the
    chain starts from a prior draw made with the chain's own generator.
    ``check_every`` > 0 recomputes the cached log densities from scratch at
    that sample interval and raises if they drift by more than 1e-8.
    """
    family = models.get_family(family).name
    priors = priors or models.PriorConfig()
    proposals = proposals or ProposalConfig()
    if iterations < 1 or burn_in < 0 or thin < 1:
        raise ValueError("iterations and thin must be positive and burn-in non-negative")
    if burn_in >= iterations:
        raise ValueError("burn-in must be shorter than the run")
    if thin > iterations - burn_in:
        raise ValueError("thinning interval exceeds the post-burn-in length")
    if names is None:
        if patterns is None:
            raise ValueError("taxon names are required without data")
        names = list(patterns.names)
    rng = np.random.default_rng(seed)
    if init is None:
        init = sample_prior_state(family, names, priors, rng)
        if not prior_only:
            init = _feasible_start(init, patterns, priors, rng, kc, kd)
    elif init.family != family:
        raise ValueError("initial state belongs to a different model family")
    sampler = Sampler(init, patterns, priors, proposals, rng, kc, kd, prior_only)

    columns = trace_columns(family)
    trace = ChainTrace(family, list(names), seed, iterations, burn_in, thin,
                       {c: [] for c in columns})
    out_trace, out_trees = _open_streams(trace_path, tree_path, columns)
    try:
        batch_start, batch_index = dict(sampler.counts), 0
        for it in range(1, iterations + 1):
            sampler.sweep()
            if it <= burn_in:
                if proposals.adapt and it % ADAPT_BATCH == 0:
                    sampler.adapt(batch_start, batch_index)
                    batch_start, batch_index = dict(sampler.counts), batch_index + 1
                if it == burn_in:
                    sampler.counts = {}
                continue
            if (it - burn_in) % thin:
                continue
            row = sampler.sample_row(it)
            for c, x in zip(columns, row):
                trace.columns[c].append(x)
            newick = tree_to_newick(sampler.state)
            trace.trees.append(newick)
            trace.lengths.append(sampler.state.tree.length.copy())
            if out_trace:
                out_trace.write("\t".join(_format_value(x) for x in row) + "\n")
                out_trace.flush()
            if out_trees:
                out_trees.write(newick + "\n")
                out_trees.flush()
            if check_every and len(trace) % check_every == 0:
                check_cache(sampler)
    finally:
        for fh in (out_trace, out_trees):
            if fh:
                fh.close()
    trace.acceptance = dict(sampler.counts)
    trace.sigmas = dict(sampler.sigmas)
    trace.final_state = sampler.state
    return trace


def check_cache(sampler, tol=1e-8):
    ll, lp = sampler.recomputed()
    if abs(ll - sampler.log_lik) > tol * max(1.0, abs(ll)) or abs(lp - sampler.log_prior) > tol * max(1.0, abs(lp)):
        raise RuntimeError(
            f"cached log densities drifted: logL {sampler.log_lik} vs {ll}, "
            f"logPrior {sampler.log_prior} vs {lp}"
        )


def _feasible_start(state, patterns, priors, rng, kc, kd, attempts=100):
    """Redraw prior starting points until the data have positive likelihood."""
    engine = LikelihoodEngine(patterns, kc, kd)
    for _ in range(attempts):
        try:
            if math.isfinite(engine.evaluate(state).log_lik):
                return state
        except (ValueError, FloatingPointError):
            pass
        state = sample_prior_state(state.family, state.tree.names, priors, rng)
    raise RuntimeError("could not find a starting state with positive likelihood")


def multi_chain(family, patterns, seeds, **kwargs):
    """Independent chains, one per seed, each started from its own prior draw."""
    seeds = list(seeds)
    if len(seeds) < 1:
        raise ValueError("at least one seed is required")
    return [run_chain(family, patterns, seed=s, **kwargs) for s in seeds]


# topology proposals ----------------------------------------------------------
# Each returns (new_state, log Hastings ratio).


def _with_tree(state, tree, comps=None):
    return models.ModelState(
        state.family, tree, state.rho1, state.rho2,
        None if state.pi is None else state.pi.copy(),
        state.comps.copy() if comps is None and state.comps is not None else comps,
        state.alpha, state.beta_d,
    )


def _unrooted_nni(state, rng):
    """Swap one subtree on each side of a uniformly chosen internal edge."""
    tree = state.tree
    edges = [v for v in tree.branch_nodes() if not tree.is_leaf(v)]
    a = edges[rng.integers(len(edges))]
    b = tree.parent[a]
    adj = _adjacency(tree)
    xs = sorted(w for w in adj[a] if w != b)
    ys = sorted(w for w in adj[b] if w != a)
    x = xs[rng.integers(len(xs))]
    y = ys[rng.integers(len(ys))]
    lx, ly = adj[a].pop(x), adj[b].pop(y)
    del adj[x][a], adj[y][b]
    adj[a][y] = adj[y][a] = ly
    adj[b][x] = adj[x][b] = lx
    new = from_adjacency(adj, tree.root, tree.names, tree.n_nodes)
    return _with_tree(state, new), 0.0


def _component(adj, start):
    seen, stack = {start}, [start]
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return seen


def _unrooted_spr(state, rng):
    """Prune the subtree behind a directed edge ``x -> p`` and regraft it,
    with ``p``, onto a uniformly chosen edge of the remaining tree."""
    tree = state.tree
    adj = _adjacency(tree)
    pairs = [(x, p) for p in range(tree.n_leaves, tree.n_nodes) for x in sorted(adj[p])]
    x, p = pairs[rng.integers(len(pairs))]
    lx = adj[p].pop(x)
    del adj[x][p]
    la, lb = adj[p].values()
    merged = la + lb
    a, _ = _suppress(adj, p)
    comp = _component(adj, a)
    edges = sorted((u, w) for u in comp for w in adj[u] if u < w)
    c, e = edges[rng.integers(len(edges))]
    lt = adj[c].pop(e)
    del adj[e][c]
    u = rng.random()
    adj[p] = {c: u * lt, e: (1 - u) * lt, x: lx}
    adj[c][p], adj[e][p], adj[x][p] = u * lt, (1 - u) * lt, lx
    new = from_adjacency(adj, tree.root, tree.names, tree.n_nodes)
    return _with_tree(state, new), math.log(lt / merged)


def _transfer_root_child_comps(state, old_tree, parent, length):
    """Build the rooted proposal tree and keep HB compositions consistent.

    A node that stops being a child of the root takes over the free
    composition of the node that becomes one, so the move is a bijection
    on free compositions.
    """
    new = Tree(parent, length, old_tree.names)
    if state.spec.stationary:
        return _with_tree(state, new)
    comps = state.comps.copy()
    old_rc = set(old_tree.children[old_tree.root])
    new_rc = set(new.children[new.root])
    entering = sorted(new_rc - old_rc)
    leaving = sorted(old_rc - new_rc)
    for e, lv in zip(entering, leaving):
        comps[lv] = state.comps[e]
    for c in new_rc:
        comps[c] = comps[new.root]
    return _with_tree(state, new, comps)


def _sibling(tree, v):
    (s,) = [c for c in tree.children[tree.parent[v]] if c != v]
    return s


def _rooted_nni(state, rng):
    """Swap a child of a non-root internal node with that node's sibling."""
    tree = state.tree
    cands = [v for v in range(tree.n_leaves, tree.n_nodes) if v != tree.root]
    v = cands[rng.integers(len(cands))]
    s = _sibling(tree, v)
    kids = tree.children[v]
    c = kids[rng.integers(len(kids))]
    parent = list(tree.parent)
    parent[c], parent[s] = tree.parent[v], v
    return _transfer_root_child_comps(state, tree, parent, tree.length.copy()), 0.0


def _descendants(tree, v):
    out, stack = set(), [v]
    while stack:
        u = stack.pop()
        out.add(u)
        stack.extend(tree.children[u])
    return out


def _rooted_spr(state, rng):
    """Prune the subtree below ``x`` together with its parent and reinsert
    that parent on the branch above a uniformly chosen non-root node.

    Only subtrees whose parent is not the root are pruned, which keeps the
    number of choices the same in both directions.
    """
    tree = state.tree
    cands = [v for v in tree.branch_nodes() if tree.parent[v] != tree.root]
    x = cands[rng.integers(len(cands))]
    p = tree.parent[x]
    s = _sibling(tree, x)
    parent = list(tree.parent)
    length = tree.length.copy()
    merged = length[s] + length[p]
    parent[s] = parent[p]
    length[s] = merged
    gone = _descendants(tree, x) | {p}
    targets = [v for v in range(tree.n_nodes) if v not in gone and v != tree.root]
    t = targets[rng.integers(len(targets))]
    lt = length[t]
    u = rng.random()
    parent[p] = parent[t]
    length[p] = (1 - u) * lt
    parent[t] = p
    length[t] = u * lt
    return _transfer_root_child_comps(state, tree, parent, length), math.log(lt / merged)


def _root_move(state, rng):
    """Move the root onto a branch adjacent to the root edge.

    With root children ``L`` (internal) and ``R``, and ``L1`` a child of
    ``L``, the root is re-hung on the branch ``L - L1``; the old root edge
    becomes the single branch ``L - R``.
    """
    tree = state.tree
    r = tree.root
    inner = [c for c in tree.children[r] if not tree.is_leaf(c)]
    L = inner[rng.integers(len(inner))]
    R = _sibling(tree, L)
    kids = tree.children[L]
    L1 = kids[rng.integers(len(kids))]
    parent = list(tree.parent)
    length = tree.length.copy()
    merged = length[L] + length[R]
    lt = length[L1]
    u = rng.random()
    parent[R] = L
    length[R] = merged
    parent[L1] = r
    length[L1] = u * lt
    length[L] = (1 - u) * lt
    n_rev = 1 + (not tree.is_leaf(L1))
    log_h = math.log(len(inner) / n_rev) + math.log(lt / merged)
    return _transfer_root_child_comps(state, tree, parent, length), log_h


def write_trace(trace, trace_path, tree_path):
    """Write a trace in the streaming formats used by :func:`run_chain`."""
    with open(trace_path, "w") as fh:
        fh.write("\t".join(trace.header()) + "\n")
        for i in range(len(trace)):
            fh.write("\t".join(_format_value(x) for x in trace.row(i)) + "\n")
    with open(tree_path, "w") as fh:
        fh.writelines(t + "\n" for t in trace.trees)


def read_trace(trace_path, tree_path):
    """Load a trace written by :func:`run_chain`.

    The model family is recovered from the columns: ``pi_root_*`` marks an
    HB family, and ``NA`` in ``alpha`` / ``beta_d`` marks absent effects.
    """
    with open(trace_path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        rows = [ln.rstrip("\n").split("\t") for ln in fh if ln.strip()]
    with open(tree_path) as fh:
        trees = [ln.strip() for ln in fh if ln.strip()]
    if len(rows) != len(trees):
        raise ValueError(f"{trace_path} has {len(rows)} rows but {tree_path} has {len(trees)} trees")
    if not rows:
        raise ValueError(f"{trace_path} holds no samples")
    cols = {h: [] for h in header}
    for r in rows:
        if len(r) != len(header):
            raise ValueError(f"{trace_path}: ragged row")
        for h, x in zip(header, r):
            cols[h].append(None if x == "NA" else float(x))
    cols["iteration"] = [int(x) for x in cols["iteration"]]
    stationary = "pi_A" in cols
    rates = cols["alpha"][0] is not None
    quadratic = cols["beta_d"][0] is not None
    family = ("S" if stationary else "NS") + str(1 + rates + quadratic)
    if quadratic and not rates:
        raise ValueError("trace has beta_d values but no alpha values")
    names = parse_newick(trees[0], rooted=not stationary).names
    its = cols["iteration"]
    thin = its[1] - its[0] if len(its) > 1 else 1
    trace = ChainTrace(family, names, None, its[-1], its[0] - thin, thin, cols, trees)
    return trace
