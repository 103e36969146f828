"""Convergence and model-checking summaries of chain output.

All tables are plain data; ``write_*`` helpers emit CSV with fixed headers:

* split frequencies: ``chain,sample,iteration,split,frequency``
* predictive statistics: ``draw,mean_distinct,sd_distinct``
* densities: ``x,posterior,prior``
"""

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from . import models
from .ratemat import ALPHABET
from .tree import parse_newick, splits_of

MIN_DENSITY_SAMPLES = 100


@dataclass(frozen=True)
class PredictiveStats:
    """Across-site mean and sample SD of the number of distinct bases per column."""

    mean_distinct: float
    sd_distinct: float


def distinct_char_stats(alignment):
    """Distinct unambiguous bases per column, summarised across columns.

    Gap, unknown and ambiguity codes are not counted.  Columns with no
    unambiguous base are dropped with a warning.  The SD uses divisor
    ``M - 1`` (zero for a single column).
    """
    mat = alignment.matrix()
    if mat.size == 0:
        raise ValueError("empty alignment")
    counts = np.zeros(mat.shape[1], dtype=int)
    for ch in ALPHABET:
        counts += np.any(mat == ord(ch), axis=0)
    empty = counts == 0
    if empty.any():
        warnings.warn(
            f"{int(empty.sum())} column(s) without an unambiguous base excluded",
            RuntimeWarning,
            stacklevel=2,
        )
        counts = counts[~empty]
    if counts.size == 0:
        raise ValueError("no column contains an unambiguous base")
    sd = float(np.std(counts, ddof=1)) if counts.size > 1 else 0.0
    return PredictiveStats(float(np.mean(counts)), sd)


# split frequencies -------------------------------------------------------------


@dataclass
class SplitFrequencySeries:
    """Running relative frequency of every observed split, per chain.

    ``freqs[c]`` has shape ``(n_samples_c, n_splits)`` with columns in the
    order of ``splits``; ``iterations[c]`` labels its rows.
    """

    splits: list
    iterations: list
    freqs: list

    def terminal(self):
        """Final frequency of each split, shape ``(n_chains, n_splits)``."""
        return np.array([f[-1] for f in self.freqs])

    def max_terminal_difference(self):
        t = self.terminal()
        return float((t.max(axis=0) - t.min(axis=0)).max()) if len(t) else 0.0


def split_label(split):
    return "|".join(sorted(split))


def _as_trees(samples, rooted):
    out = []
    for t in samples:
        out.append(parse_newick(t, rooted=rooted) if isinstance(t, str) else t)
    return out


def cumulative_split_frequencies(chains, rooted=False, iterations=None):
    """Cumulative relative split (or, with ``rooted``, clade) frequencies.

    ``chains`` is a list of tree samples per chain (Tree objects or Newick
    strings).  ``iterations`` optionally gives the iteration of each
    sample per chain; sample indices 1, 2, ... are used otherwise.
    """
    if not chains:
        raise ValueError("at least one chain is required")
    per_chain = [[splits_of(t, rooted=rooted) for t in _as_trees(c, rooted)] for c in chains]
    labels = sorted({split_label(s) for chain in per_chain for sp in chain for s in sp})
    col = {lab: j for j, lab in enumerate(labels)}
    freqs, its = [], []
    for c, chain in enumerate(per_chain):
        hits = np.zeros((len(chain), len(labels)))
        for i, sp in enumerate(chain):
            for s in sp:
                hits[i, col[split_label(s)]] = 1.0
        n = np.arange(1, len(chain) + 1)[:, None]
        freqs.append(np.cumsum(hits, axis=0) / n)
        its.append(
            np.asarray(iterations[c]) if iterations is not None else np.arange(1, len(chain) + 1)
        )
    return SplitFrequencySeries(labels, its, freqs)


def write_split_frequencies(series, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chain", "sample", "iteration", "split", "frequency"])
        for c, (its, f) in enumerate(zip(series.iterations, series.freqs)):
            for i in range(f.shape[0]):
                for j, lab in enumerate(series.splits):
                    w.writerow([c, i + 1, int(its[i]), lab, repr(float(f[i, j]))])


# posterior predictive --------------------------------------------------------------


def _parse_pi_comment(text):
    body = text[len("&pi="):] if text.startswith("&pi=") else None
    if body is None:
        raise ValueError(f"unrecognised tree annotation {text!r}")
    return np.array([float(x) for x in body.split(",")])


def state_from_sample(trace, i):
    """Rebuild the :class:`~quashphylo.models.ModelState` of trace sample ``i``."""
    fam = models.get_family(trace.family)
    tree = parse_newick(trace.trees[i], rooted=not fam.stationary, taxa=trace.names)
    cols = trace.columns

    def opt(name):
        x = cols[name][i]
        return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)

    kw = dict(rho1=float(cols["rho1"][i]), rho2=float(cols["rho2"][i]),
              alpha=opt("alpha"), beta_d=opt("beta_d"))
    if fam.stationary:
        kw["pi"] = np.array([cols[f"pi_{ch}"][i] for ch in ALPHABET], dtype=float)
    else:
        comps = np.empty((tree.n_nodes, len(ALPHABET)))
        for v in range(tree.n_nodes):
            comps[v] = _parse_pi_comment(tree.comments[v])
        kw["comps"] = comps / comps.sum(axis=1, keepdims=True)
    return models.ModelState(fam.name, tree, **kw)


@dataclass
class PredictiveSample:
    means: np.ndarray
    sds: np.ndarray
    observed: PredictiveStats = None
    draws: np.ndarray = field(default=None)

    def tail_fraction(self):
        """Fraction of predictive means at least as large as the observed one."""
        if self.observed is None:
            raise ValueError("no observed statistics attached")
        return float(np.mean(self.means >= self.observed.mean_distinct))


def posterior_predictive_distribution(trace, n_sites, n_draws, seed, kc=4, kd=4, observed=None):
    """Distinct-base statistics of alignments simulated from posterior draws.

    ``n_draws`` trace samples are picked with replacement; each drives one
    simulated alignment of ``n_sites`` columns.  ``observed`` (an
    :class:`~quashphylo.likelihood.Alignment` or :class:`PredictiveStats`)
    is attached for comparison.
    """
    if len(trace) == 0:
        raise ValueError("trace is empty")
    rng = np.random.default_rng(seed)
    picks = rng.integers(len(trace), size=n_draws)
    sim_seeds = rng.integers(2**63, size=n_draws)
    means, sds = np.empty(n_draws), np.empty(n_draws)
    cache = {}
    for k, (i, s) in enumerate(zip(picks, sim_seeds)):
        if i not in cache:
            cache[i] = state_from_sample(trace, i)
        st = models.posterior_predictive_draw(cache[i], n_sites, int(s), kc, kd)
        means[k], sds[k] = st.mean_distinct, st.sd_distinct
    if observed is not None and not isinstance(observed, PredictiveStats):
        observed = distinct_char_stats(observed)
    return PredictiveSample(means, sds, observed, picks)


def write_predictive(sample, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["draw", "mean_distinct", "sd_distinct"])
        if sample.observed is not None:
            w.writerow(["observed", repr(sample.observed.mean_distinct),
                        repr(sample.observed.sd_distinct)])
        for k, (m, s) in enumerate(zip(sample.means, sample.sds)):
            w.writerow([k, repr(float(m)), repr(float(s))])


# densities --------------------------------------------------------------------


@dataclass
class DensityTable:
    x: np.ndarray
    posterior: np.ndarray
    prior: np.ndarray
    degenerate: bool = False


def density_summary(samples, prior_pdf=None, grid=None, n_grid=256):
    """Gaussian KDE (Silverman bandwidth) of ``samples`` on a grid, next to
    the prior density.

    Without ``grid`` the grid spans the sample range padded by three
    bandwidths (clipped at zero for positive samples).  A constant sample
    gives ``degenerate=True`` and a NaN posterior column.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < MIN_DENSITY_SAMPLES:
        raise ValueError(f"need at least {MIN_DENSITY_SAMPLES} samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    degenerate = bool(np.ptp(x) == 0)
    if grid is None:
        if degenerate:
            half = max(abs(x[0]), 1.0) * 0.5
            lo, hi = x[0] - half, x[0] + half
        else:
            bw = 1.06 * x.std(ddof=1) * x.size ** -0.2
            lo, hi = x.min() - 3 * bw, x.max() + 3 * bw
        if x.min() >= 0:
            lo = max(lo, 0.0)
        grid = np.linspace(lo, hi, n_grid)
    grid = np.asarray(grid, dtype=float)
    if degenerate:
        post = np.full(grid.shape, np.nan)
    else:
        post = stats.gaussian_kde(x, bw_method="silverman")(grid)
    prior = np.asarray(prior_pdf(grid), dtype=float) if prior_pdf is not None else np.full(grid.shape, np.nan)
    return DensityTable(grid, post, prior, degenerate)


def l1_distance(table):
    """Trapezoid L1 distance between the posterior and prior columns."""
    return float(integrate.trapezoid(np.abs(table.posterior - table.prior), table.x))


def write_density(table, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "posterior", "prior"])
        for row in zip(table.x, table.posterior, table.prior):
            w.writerow([repr(float(v)) for v in row])
