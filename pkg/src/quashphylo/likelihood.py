"""Alignments, pattern compression and Felsenstein pruning.

Transition matrices for a whole tree are held in one array of shape
``(n_nodes, G, K, K)``: entry ``[v, g]`` is the matrix for the branch above
node ``v`` under rate category ``g`` (the root slot is ignored).  Partial
likelihoods are held as ``(G*K, S)`` arrays and rescaled at every internal
node with one scaler per site shared by all categories, so category sums
stay in linear space.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .ratemat import ALPHABET

# IUPAC codes over the A, G, C, T state order; gaps and unknowns are
# marginalised.
IUPAC = {
    "A": "A", "G": "G", "C": "C", "T": "T", "U": "T",
    "R": "AG", "Y": "CT", "S": "GC", "W": "AT", "K": "GT", "M": "AC",
    "B": "CGT", "D": "AGT", "H": "ACT", "V": "ACG",
    "N": "AGCT", "?": "AGCT", "-": "AGCT", ".": "AGCT",
}
GAP_CHARS = frozenset("-.?N")

_PARTIAL = np.zeros((256, len(ALPHABET)))
for _ch, _states in IUPAC.items():
    for _s in _states:
        _PARTIAL[ord(_ch), ALPHABET.index(_s)] = 1.0
        _PARTIAL[ord(_ch.lower()), ALPHABET.index(_s)] = 1.0


@dataclass(frozen=True)
class Alignment:
    """``N`` named sequences of equal length ``M``, upper-cased, ``U`` read as ``T``."""

    names: tuple
    seqs: tuple

    def __post_init__(self):
        seqs = tuple(s.upper().replace("U", "T") for s in self.seqs)
        object.__setattr__(self, "seqs", seqs)
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) != len(seqs):
            raise ValueError("one name per sequence is required")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate taxon names")
        if not seqs or len({len(s) for s in seqs}) != 1:
            raise ValueError("alignment must be non-empty and rectangular")
        bad = set("".join(seqs)) - set(IUPAC)
        if bad:
            raise ValueError(f"unknown characters in alignment: {sorted(bad)}")

    @property
    def n_taxa(self):
        return len(self.names)

    @property
    def n_sites(self):
        return len(self.seqs[0])

    def matrix(self):
        """Characters as a ``(N, M)`` uint8 array of ASCII codes."""
        return np.frombuffer("".join(self.seqs).encode("ascii"), dtype=np.uint8).reshape(
            self.n_taxa, self.n_sites
        )

    def subset(self, names):
        lookup = dict(zip(self.names, self.seqs))
        return Alignment(tuple(names), tuple(lookup[n] for n in names))


def read_fasta(path):
    names, seqs, cur = [], [], None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith(">"):
                names.append(line[1:].split()[0])
                seqs.append([])
                cur = seqs[-1]
            elif cur is None:
                raise ValueError(f"{path}: sequence data before the first header")
            else:
                cur.append(line.replace(" ", ""))
    return Alignment(tuple(names), tuple("".join(s) for s in seqs))


def read_phylip(path):
    """Sequential PHYLIP with whitespace-separated names."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    n, m = (int(x) for x in lines[0].split()[:2])
    names, seqs, i = [], [], 1
    for _ in range(n):
        name, _, rest = lines[i].strip().partition(" ")
        seq = rest.replace(" ", "")
        i += 1
        while len(seq) < m:
            seq += lines[i].replace(" ", "")
            i += 1
        names.append(name)
        seqs.append(seq)
    aln = Alignment(tuple(names), tuple(seqs))
    if aln.n_sites != m:
        raise ValueError(f"{path}: expected {m} sites, found {aln.n_sites}")
    return aln


def read_alignment(path):
    with open(path) as fh:
        first = fh.read(1)
    return read_fasta(path) if first == ">" else read_phylip(path)


def write_fasta(alignment, path, width=60):
    with open(path, "w") as fh:
        for name, seq in zip(alignment.names, alignment.seqs):
            fh.write(f">{name}\n")
            for i in range(0, len(seq), width):
                fh.write(seq[i:i + width] + "\n")


@dataclass(frozen=True)
class PatternTable:
    """Distinct alignment columns (``patterns[:, j]``) and their counts."""

    names: tuple
    patterns: np.ndarray
    weights: np.ndarray

    @property
    def n_patterns(self):
        return self.patterns.shape[1]

    def leaf_partials(self, names=None):
        """Indicator vectors of shape ``(N, n_patterns, K)`` in ``names`` order.

        Results are cached per name order and must not be modified.
        """
        key = self.names if names is None else tuple(names)
        cache = self.__dict__.setdefault("_partials", {})
        if key not in cache:
            pos = {n: i for i, n in enumerate(self.names)}
            out = _PARTIAL[self.patterns[[pos[n] for n in key]]]
            out.flags.writeable = False
            cache[key] = out
        return cache[key]

    def leaf_columns(self, names=None):
        """Leaf indicators transposed to ``(N, K, n_patterns)``; cached, read-only."""
        key = ("columns", self.names if names is None else tuple(names))
        cache = self.__dict__.setdefault("_partials", {})
        if key not in cache:
            out = np.ascontiguousarray(np.swapaxes(self.leaf_partials(key[1]), 1, 2))
            out.flags.writeable = False
            cache[key] = out
        return cache[key]


def compress_patterns(alignment):
    mat = alignment.matrix()
    if mat.size == 0:
        raise ValueError("empty alignment")
    cols, counts = np.unique(mat.T, axis=0, return_counts=True)
    return PatternTable(alignment.names, np.ascontiguousarray(cols.T), counts.astype(float))


def message_operators(tree, P, nodes=None):
    """Per-node linear maps sending a child's partial to its parent's message.

    Leaves get a ``(G*K, K)`` map from indicator vectors; internal nodes a
    block-diagonal ``(G*K, G*K)`` map on stacked category partials.
    Returns a dict keyed by node id (``nodes`` defaults to every branch).
    """
    nodes = tree.branch_nodes() if nodes is None else list(nodes)
    _, G, K, _ = P.shape
    ops = {}
    leaves = [v for v in nodes if tree.is_leaf(v)]
    inner = [v for v in nodes if not tree.is_leaf(v)]
    if leaves:
        ops.update(zip(leaves, P[leaves].reshape(len(leaves), G * K, K)))
    if inner:
        bd = np.zeros((len(inner), G, K, G, K))
        g = np.arange(G)
        bd[:, g, :, g, :] = P[inner].transpose(1, 0, 2, 3)
        ops.update(zip(inner, bd.reshape(len(inner), G * K, G * K)))
    return ops


def node_partial(children, ops, leaf_columns, partials, n_leaves):
    """Rescaled partial of the node with the given ``children``.

    Partials have shape ``(G*K, S)`` (category-major rows, one column per
    site) and leaf data shape ``(K, S)``.  Returns the partial and the
    per-site log scaler applied at the node.
    """
    acc = None
    for c in children:
        msg = ops[c] @ (leaf_columns[c] if c < n_leaves else partials[c])
        if acc is None:
            acc = msg
        else:
            acc *= msg
    m = _ones(acc.shape[0]) @ acc
    m[m == 0] = 1.0
    acc *= 1.0 / m
    return acc, np.log(m)


_ONES = {}


def _ones(n):
    if n not in _ONES:
        _ONES[n] = np.ones(n)
    return _ONES[n]


def root_mixer(root_dist, n_categories):
    """Vector mixing a root partial over states and equally weighted categories."""
    return np.tile(np.asarray(root_dist, dtype=float), n_categories) / n_categories


def root_site_log_likelihood(partial, log_scale, root_dist):
    """Mix a rescaled root partial over equally weighted categories."""
    mix = root_mixer(root_dist, partial.shape[0] // len(root_dist))
    with np.errstate(divide="ignore"):
        return np.log(mix @ partial) + log_scale


def prune(tree, leaf_partials, P, root_dist):
    """Per-site log-likelihoods for the equally weighted category mixture.

    ``leaf_partials`` has shape ``(N, S, K)``, ``P`` shape ``(n_nodes, G, K, K)``
    and ``root_dist`` shape ``(K,)``.  Every internal node is rescaled by its
    per-site total over categories and states; the log scalers are summed.
    """
    leaf_columns = np.ascontiguousarray(np.swapaxes(leaf_partials, 1, 2))
    ops = message_operators(tree, P)
    partials = [None] * tree.n_nodes
    log_scale = np.zeros(leaf_partials.shape[1])
    for v in tree.postorder():
        if tree.is_leaf(v):
            continue
        kids = tree.children[v]
        partials[v], ls = node_partial(kids, ops, leaf_columns, partials, tree.n_leaves)
        log_scale += ls
        for c in kids:
            partials[c] = None
    return root_site_log_likelihood(partials[tree.root], log_scale, root_dist)


def brute_force_site_likelihood(tree, P, root_dist, pattern):
    """Site probability by explicit summation over every internal-state assignment.

    Exponential in the number of internal nodes; meant as a check on
    :func:`prune` for small trees.  ``P`` has shape ``(n_nodes, K, K)``.
    """
    K = len(root_dist)
    codes = np.frombuffer("".join(pattern).upper().encode("ascii"), dtype=np.uint8)
    leaf = _PARTIAL[codes]
    internal = [v for v in range(tree.n_leaves, tree.n_nodes)]
    total = 0.0
    for assignment in itertools.product(range(K), repeat=len(internal)):
        state = dict(zip(internal, assignment))
        prob = root_dist[state[tree.root]]
        for v in internal:
            if v != tree.root:
                prob *= P[v][state[tree.parent[v]], state[v]]
        for i in range(tree.n_leaves):
            prob *= P[i][state[tree.parent[i]]] @ leaf[i]
        total += prob
    return float(total)


def site_likelihood(tree, P, root_dist, pattern):
    """Probability of one column under a single set of branch matrices.

    ``P`` has shape ``(n_nodes, K, K)``; ``pattern`` is a string or sequence
    of characters in leaf-id order.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 3 or P.shape[0] != tree.n_nodes:
        raise ValueError(f"expected transition matrices of shape (n_nodes, K, K), got {P.shape}")
    if len(pattern) != tree.n_leaves:
        raise ValueError("pattern length does not match the number of leaves")
    codes = np.frombuffer("".join(pattern).upper().encode("ascii"), dtype=np.uint8)
    leaves = _PARTIAL[codes][:, None, :]
    return float(np.exp(prune(tree, leaves, P[:, None], root_dist)[0]))


def branch_exponents(tree_lengths, evals, c, d):
    """Eigenvalue exponents ``ell_b * (c lam - c d lam^2)`` of shape ``(n_nodes, G, K)``.

    ``evals`` has shape ``(n_nodes, K)`` (one baseline spectrum per branch).
    """
    site_evals = c[None, :, None] * evals[:, None, :] - (c * d)[None, :, None] * evals[:, None, :] ** 2
    return np.asarray(tree_lengths)[:, None, None] * site_evals


def eigen_factors(eigens):
    """``(evals, left, right)`` with ``P = left diag(exp(.)) right`` per branch."""
    evals, U, sqrt_pi = eigens
    left = U / sqrt_pi[:, :, None]
    right = np.swapaxes(U, -1, -2) * sqrt_pi[:, None, :]
    return evals, left, right


def transition_from_factors(lengths, factors, grid):
    evals, left, right = factors
    c, d = grid.pairs()
    E = np.exp(branch_exponents(lengths, evals, c, d))
    P = (left[:, None] * E[:, :, None, :]) @ right[:, None]
    return np.clip(P, 0.0, None, out=P)


def transition_stack(lengths, eigens, grid):
    """Transition matrices ``(B, G, K, K)`` for branch ``lengths`` and every category.

    ``eigens`` is a stacked reversible eigensystem ``(evals, U, sqrt_pi)``
    with a leading axis matching ``lengths``.
    """
    return transition_from_factors(lengths, eigen_factors(eigens), grid)


def branch_transition_matrices(tree, eigens, grid):
    """Transition matrices ``(n_nodes, G, K, K)`` for every branch and category."""
    return transition_stack(tree.length, eigens, grid)


def grid_log_likelihood(patterns, tree, eigens, root_dist, grid, return_sites=False):
    """Mixture log-likelihood summed over weighted patterns."""
    P = branch_transition_matrices(tree, eigens, grid)
    site = prune(tree, patterns.leaf_partials(tree.names), P, root_dist)
    total = float(site @ patterns.weights)
    if np.isneginf(total):
        bad = np.flatnonzero(np.isneginf(site))
        total = -np.inf
        if return_sites:
            return total, site
        raise FloatingPointError(f"zero probability for pattern(s) {bad.tolist()}")
    return (total, site) if return_sites else total


def simulate_sites(tree, P, root_dist, n_sites, rng):
    """Draw ``n_sites`` columns: category uniform, root state from ``root_dist``,
    then down the tree.  Returns state indices of shape ``(N, n_sites)``."""
    G = P.shape[1]
    K = P.shape[-1]
    cat = rng.integers(G, size=n_sites)
    states = np.empty((tree.n_nodes, n_sites), dtype=np.int64)
    cum_root = np.cumsum(root_dist)
    states[tree.root] = np.minimum(np.searchsorted(cum_root, rng.random(n_sites), side="right"), K - 1)
    for v in tree.preorder():
        if v == tree.root:
            continue
        rows = P[v][cat, states[tree.parent[v]]]
        u = rng.random(n_sites)
        states[v] = np.minimum((u[:, None] >= np.cumsum(rows, axis=1)).sum(axis=1), K - 1)
    return states[: tree.n_leaves]


def simulate_alignment(tree, P, root_dist, n_sites, seed):
    """Simulated :class:`Alignment` in leaf-id order; deterministic given ``seed``."""
    if n_sites < 1:
        raise ValueError("number of sites must be at least 1")
    rng = np.random.default_rng(seed)
    states = simulate_sites(tree, P, root_dist, n_sites, rng)
    letters = np.frombuffer(ALPHABET.encode("ascii"), dtype=np.uint8)[states]
    seqs = tuple(row.tobytes().decode("ascii") for row in letters)
    return Alignment(tuple(tree.names), seqs)
