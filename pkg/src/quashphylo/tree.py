"""Phylogenies: representation, Newick I/O, splits, consensus and Yule prior.

A :class:`Tree` stores nodes by integer id.  Leaves are ``0 .. N-1`` (in
the order of :attr:`Tree.names`) and internal nodes follow.  Every node
except the root owns the branch to its parent, so branch-indexed
quantities (lengths, compositions) are stored per node.  A rooted binary
tree has a root of degree two; an unrooted binary tree is stored with a
root of degree three.
"""

import math
import re
from collections import Counter, defaultdict

import numpy as np


class NewickError(ValueError):
    pass


class Tree:
    def __init__(self, parent, length, names, labels=None, comments=None):
        self.parent = [int(p) for p in parent]
        self.length = np.asarray(length, dtype=float).copy()
        self.names = list(names)
        self.labels = dict(labels or {})
        self.comments = dict(comments or {})
        n = len(self.parent)
        if self.length.shape != (n,):
            raise ValueError("one branch length per node is required")
        roots = [v for v, p in enumerate(self.parent) if p < 0]
        if len(roots) != 1:
            raise ValueError(f"tree must have exactly one root, found {len(roots)}")
        self.root = roots[0]
        self.children = [[] for _ in range(n)]
        for v, p in enumerate(self.parent):
            if p >= 0:
                self.children[p].append(v)
        n_leaves = len(self.names)
        for v in range(n):
            if (v < n_leaves) != (not self.children[v]):
                raise ValueError(f"node {v}: leaves must be exactly the first {n_leaves} ids")
        self.length[self.root] = 0.0
        self._post = None
        self._masks = None

    # structure ---------------------------------------------------------
    @property
    def n_leaves(self):
        return len(self.names)

    @property
    def n_nodes(self):
        return len(self.parent)

    @property
    def rooted(self):
        return len(self.children[self.root]) == 2

    def is_leaf(self, v):
        return v < self.n_leaves

    def branch_nodes(self):
        """Ids of the nodes owning a branch (all but the root)."""
        return [v for v in range(self.n_nodes) if v != self.root]

    def postorder(self):
        if self._post is None:
            order, stack = [], [(self.root, False)]
            while stack:
                v, done = stack.pop()
                if done:
                    order.append(v)
                else:
                    stack.append((v, True))
                    stack.extend((c, False) for c in reversed(self.children[v]))
            self._post = order
        return self._post

    def preorder(self):
        order, stack = [], [self.root]
        while stack:
            v = stack.pop()
            order.append(v)
            stack.extend(reversed(self.children[v]))
        return order

    def leaf_masks(self):
        """Bit mask of the leaves below each node."""
        if self._masks is None:
            masks = [0] * self.n_nodes
            for v in self.postorder():
                if self.is_leaf(v):
                    masks[v] = 1 << v
                else:
                    m = 0
                    for c in self.children[v]:
                        m |= masks[c]
                    masks[v] = m
            self._masks = masks
        return self._masks

    def leaf_set(self, v):
        m = self.leaf_masks()[v]
        return frozenset(self.names[i] for i in range(self.n_leaves) if m >> i & 1)

    def is_binary(self):
        for v in range(self.n_leaves, self.n_nodes):
            k = len(self.children[v])
            if k != 2 and not (v == self.root and k == 3):
                return False
        return True

    def depth(self, v):
        d = 0
        while self.parent[v] >= 0:
            v = self.parent[v]
            d += 1
        return d

    def tree_length(self):
        return float(self.length.sum())

    def copy(self):
        return Tree(self.parent, self.length, self.names, self.labels, self.comments)

    def with_lengths(self, length):
        t = Tree(self.parent, length, self.names)
        return t

    def reorder_leaves(self, names):
        """Same tree with leaf ids following ``names``."""
        if sorted(names) != sorted(self.names):
            raise ValueError("leaf name sets differ")
        pos = {n: i for i, n in enumerate(names)}
        perm = list(range(self.n_nodes))
        for i, n in enumerate(self.names):
            perm[i] = pos[n]
        parent = [0] * self.n_nodes
        length = np.zeros(self.n_nodes)
        for v in range(self.n_nodes):
            p = self.parent[v]
            parent[perm[v]] = perm[p] if p >= 0 else -1
            length[perm[v]] = self.length[v]
        labels = {perm[v]: s for v, s in self.labels.items()}
        comments = {perm[v]: s for v, s in self.comments.items()}
        return Tree(parent, length, names, labels, comments)

    def __repr__(self):
        return f"Tree({serialize_newick(self)!r})"


def _adjacency(tree):
    adj = defaultdict(dict)
    for v in tree.branch_nodes():
        p = tree.parent[v]
        adj[v][p] = tree.length[v]
        adj[p][v] = tree.length[v]
    return adj


def from_adjacency(adj, root, names, n_nodes=None):
    """Build a :class:`Tree` hanging from ``root`` out of an undirected adjacency map.

    Node ids are kept; ``n_nodes`` defaults to ``max id + 1``.
    """
    n_nodes = n_nodes or max(adj) + 1
    parent = [-2] * n_nodes
    length = np.zeros(n_nodes)
    parent[root] = -1
    stack = [root]
    while stack:
        v = stack.pop()
        for w, ell in adj[v].items():
            if parent[w] == -2:
                parent[w] = v
                length[w] = ell
                stack.append(w)
    if any(p == -2 for p in parent):
        raise ValueError("adjacency is disconnected or node ids are not contiguous")
    return Tree(parent, length, names)


def _suppress(adj, v):
    """Remove a degree-two vertex, joining its neighbours."""
    (a, la), (b, lb) = adj[v].items()
    del adj[a][v], adj[b][v], adj[v]
    adj[a][b] = adj[b][a] = la + lb
    return a, b


def unroot(tree):
    """Unrooted copy: a degree-two root is suppressed and the tree re-hung
    from one of its internal children."""
    if not tree.rooted:
        return tree.copy()
    a, b = tree.children[tree.root]
    if tree.is_leaf(a) and tree.is_leaf(b):
        raise ValueError("cannot unroot a two-leaf tree")
    adj = _adjacency(tree)
    old = tree.root
    _suppress(adj, old)
    new_root = b if tree.is_leaf(a) else a
    # keep ids contiguous: move the highest id into the freed root slot
    last = tree.n_nodes - 1
    if old != last:
        for w, ell in adj.pop(last).items():
            del adj[w][last]
            adj[w][old] = ell
            adj[old][w] = ell
        if new_root == last:
            new_root = old
    return from_adjacency(adj, new_root, tree.names, tree.n_nodes - 1)


def reroot(tree, node, fraction=0.5):
    """Rooted copy with the root on the branch above ``node``.

    ``fraction`` of that branch goes to ``node``'s side.  For an unrooted
    input a new root id is appended; for a rooted one the old root id is
    reused.
    """
    if node == tree.root:
        raise ValueError("the root does not own a branch")
    adj = _adjacency(tree)
    if tree.rooted:
        r = tree.root
        _suppress(adj, r)
        n_nodes = tree.n_nodes
        if node == r:
            raise ValueError("cannot reroot on the old root")
        # branch above node may have changed if node was a root child
        p = tree.parent[node]
        if p == r:
            (p,) = [c for c in tree.children[r] if c != node]
    else:
        r = tree.n_nodes
        n_nodes = tree.n_nodes + 1
        p = tree.parent[node]
    ell = adj[node][p]
    del adj[node][p], adj[p][node]
    adj[r] = {node: fraction * ell, p: (1 - fraction) * ell}
    adj[node][r] = fraction * ell
    adj[p][r] = (1 - fraction) * ell
    return from_adjacency(adj, r, tree.names, n_nodes)


# Newick ------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(\[[^\]]*\]|[(),:;]|[^\s(),:;\[\]]+)")


def _tokens(text):
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise NewickError(f"unexpected character at offset {pos}: {text[pos:pos + 10]!r}")
        out.append(m.group(1))
        pos = m.end()
    return out


def parse_newick(text, rooted=True, taxa=None):
    """Parse a Newick string with branch lengths.

    With ``rooted=True`` a trifurcating root is resolved by placing a root
    at the midpoint of the branch to its last child; with ``rooted=False``
    a bifurcating root is suppressed.  ``taxa`` fixes the leaf id order.
    Internal node labels are kept in ``labels`` and ``[...]`` comments in
    ``comments``.
    """
    toks = _tokens(text)
    if not toks or toks[-1] != ";":
        raise NewickError("Newick string must end with ';'")
    parent, length, kids, leaf_name, labels, comments = [], [], [], {}, {}, {}
    pos = 0

    def new_node(p):
        parent.append(p)
        length.append(None)
        kids.append([])
        if p >= 0:
            kids[p].append(len(parent) - 1)
        return len(parent) - 1

    def annotate(v):
        nonlocal pos
        if toks[pos] not in "(),:;" and not toks[pos].startswith("["):
            if kids[v]:
                labels[v] = toks[pos]
            else:
                leaf_name[v] = toks[pos]
            pos += 1
        if toks[pos].startswith("["):
            comments[v] = toks[pos][1:-1]
            pos += 1
        if toks[pos] == ":":
            try:
                length[v] = float(toks[pos + 1])
            except (ValueError, IndexError):
                raise NewickError(f"bad branch length near token {pos}") from None
            pos += 2
            if toks[pos].startswith("["):
                comments[v] = toks[pos][1:-1]
                pos += 1

    def subtree(p):
        nonlocal pos
        v = new_node(p)
        if toks[pos] == "(":
            pos += 1
            subtree(v)
            while toks[pos] == ",":
                pos += 1
                subtree(v)
            if toks[pos] != ")":
                raise NewickError(f"expected ')' at token {pos}, got {toks[pos]!r}")
            pos += 1
        annotate(v)
        if not kids[v] and v not in leaf_name:
            raise NewickError("unlabelled leaf")
        return v

    try:
        subtree(-1)
    except IndexError:
        raise NewickError("unexpected end of Newick string") from None
    if toks[pos] != ";" or pos != len(toks) - 1:
        raise NewickError("trailing characters after tree")

    for v in range(len(parent)):
        k = len(kids[v])
        if k == 1 or k > 3 or (k == 3 and v != 0):
            raise NewickError(f"non-binary internal node with {k} children")
    names = [leaf_name[v] for v in range(len(parent)) if not kids[v]]
    if len(set(names)) != len(names):
        dup = [n for n, c in Counter(names).items() if c > 1]
        raise NewickError(f"duplicate leaf labels: {dup}")
    if len(names) < 2:
        raise NewickError("tree needs at least two leaves")
    for v in range(1, len(parent)):
        if length[v] is None:
            raise NewickError(f"missing branch length for node {leaf_name.get(v, v)}")
        if length[v] < 0:
            raise NewickError("negative branch length")

    # renumber: leaves first in taxa order, internal nodes after in parse order
    order = list(taxa) if taxa is not None else names
    if taxa is not None and sorted(order) != sorted(names):
        raise NewickError("leaf labels do not match the given taxa")
    idx = {}
    for v in range(len(parent)):
        if not kids[v]:
            idx[v] = order.index(leaf_name[v])
    nxt = len(names)
    for v in range(len(parent)):
        if kids[v]:
            idx[v] = nxt
            nxt += 1
    new_parent = [0] * len(parent)
    new_len = np.zeros(len(parent))
    for v in range(len(parent)):
        new_parent[idx[v]] = idx[parent[v]] if parent[v] >= 0 else -1
        new_len[idx[v]] = length[v] or 0.0
    tree = Tree(
        new_parent,
        new_len,
        order,
        {idx[v]: s for v, s in labels.items()},
        {idx[v]: s for v, s in comments.items()},
    )
    if rooted and len(tree.children[tree.root]) == 3:
        tree = reroot(tree, tree.children[tree.root][-1])
    elif not rooted and tree.rooted:
        tree = unroot(tree)
    return tree


def _fmt(x):
    return repr(float(x))


def serialize_newick(tree, support=None, comments=None, precision=None):
    """Newick text with every branch length written.

    ``support`` maps node id to a label written in the internal-node label
    slot; ``comments`` maps node id to ``[...]`` annotation text.
    """
    labels = tree.labels if support is None else support
    comments = tree.comments if comments is None else comments
    fmt = _fmt if precision is None else (lambda x: f"{x:.{precision}g}")

    def rec(v):
        if tree.is_leaf(v):
            s = tree.names[v]
        else:
            s = "(" + ",".join(rec(c) for c in tree.children[v]) + ")"
            if v in labels:
                lab = labels[v]
                s += f"{lab:.3f}" if isinstance(lab, float) else str(lab)
        if v in comments:
            s += f"[{comments[v]}]"
        if v != tree.root:
            s += ":" + fmt(tree.length[v])
        return s

    return rec(tree.root) + ";"


# splits and clades ---------------------------------------------------------


def _ref_leaf(tree):
    return min(range(tree.n_leaves), key=lambda i: tree.names[i])


def _names_of(tree, mask):
    return frozenset(tree.names[i] for i in range(tree.n_leaves) if mask >> i & 1)


def splits_of(tree, rooted=False, trivial=False):
    """Splits (unrooted) or clades (rooted) as frozensets of leaf names.

    A split is reported by its side not containing the alphabetically first
    leaf.  Trivial splits/clades (single leaves) are included only on
    request.
    """
    return set(_edge_sets(tree, rooted, trivial))


def _edge_sets(tree, rooted, trivial):
    """Map split/clade -> branch length (root edge of an unrooted view merged)."""
    n = tree.n_leaves
    full = (1 << n) - 1
    ref = _ref_leaf(tree)
    masks = tree.leaf_masks()
    out = {}
    for v in tree.branch_nodes():
        m = masks[v]
        if not rooted and m >> ref & 1:
            m = full ^ m
        size = bin(m).count("1")
        if size == n - 1 and not rooted:
            # pendant edge of the reference leaf
            m = full ^ m
            size = 1
        if size == 1 and not trivial:
            continue
        key = _names_of(tree, m)
        out[key] = out.get(key, 0.0) + float(tree.length[v])
    return out


def _check_leaf_sets(trees):
    names = set(trees[0].names)
    for t in trees[1:]:
        if set(t.names) != names:
            raise ValueError("trees have inconsistent leaf sets")
    return sorted(names)


def split_frequencies(trees, rooted=False):
    trees = list(trees)
    _check_leaf_sets(trees)
    counts = Counter()
    for t in trees:
        counts.update(splits_of(t, rooted))
    return {s: c / len(trees) for s, c in counts.items()}


def _tree_from_clades(names, clades, lengths, support):
    """Multifurcating tree from a compatible family of clades.

    ``clades`` excludes the full leaf set and single leaves.
    """
    n = len(names)
    parent = [-1] * (n + 1)
    length = [0.0] * (n + 1)
    members = {n: frozenset(names)}
    labels = {}
    for c in sorted(clades, key=lambda c: (-len(c), sorted(c))):
        host = min((v for v, m in members.items() if c < m), key=lambda v: len(members[v]))
        v = len(parent)
        parent.append(host)
        length.append(lengths.get(c, 0.0))
        members[v] = c
        labels[v] = support[c]
    for i, nm in enumerate(names):
        parent[i] = min((v for v, m in members.items() if nm in m), key=lambda v: len(members[v]))
        length[i] = lengths.get(frozenset([nm]), 0.0)
    return Tree(parent, length, names, labels)


def majority_rule_consensus(trees, rooted=False):
    """Majority-rule consensus of a sample of trees.

    Keeps the splits (clades if ``rooted``) present in more than half the
    sample.  Internal labels hold relative frequencies and branch lengths
    are means over the trees containing each split.
    """
    trees = list(trees)
    if not trees:
        raise ValueError("need at least one tree")
    names = _check_leaf_sets(trees)
    counts = Counter()
    sums = defaultdict(float)
    for t in trees:
        for s, ell in _edge_sets(t, rooted, trivial=True).items():
            counts[s] += 1
            sums[s] += ell
    m = len(trees)
    keep = {s for s, c in counts.items() if c / m > 0.5 and 1 < len(s) < len(names)}
    lengths = {s: sums[s] / counts[s] for s in counts}
    support = {s: counts[s] / m for s in keep}
    return _tree_from_clades(names, keep, lengths, support)


def root_split_frequencies(trees, threshold=0.0):
    """Relative frequency of each root split, keyed by its smaller side.

    Ties in size are broken by the alphabetically smaller side.  Entries
    below ``threshold`` are dropped; the result is sorted by decreasing
    frequency.
    """
    trees = list(trees)
    counts = Counter()
    for t in trees:
        if not t.rooted:
            raise ValueError("root splits need rooted trees")
        a, b = (t.leaf_set(c) for c in t.children[t.root])
        key = min(a, b, key=lambda s: (len(s), sorted(s)))
        counts[key] += 1
    freqs = {s: c / len(trees) for s, c in counts.items()}
    items = sorted(freqs.items(), key=lambda kv: (-kv[1], len(kv[0]), sorted(kv[0])))
    return {s: f for s, f in items if f >= threshold}


# Yule prior ---------------------------------------------------------------


def yule_log_prior(tree):
    """Log probability of a rooted labelled topology under the Yule process.

    Equal to (ranked histories of the topology) / (all ranked histories),
    i.e. ``2^(N-1) / (N! * prod_v h_v)`` with ``h_v`` the number of
    internal nodes in the subtree of internal node ``v``.
    """
    if not tree.rooted or not tree.is_binary():
        raise ValueError("Yule prior needs a rooted binary tree")
    n = tree.n_leaves
    h = [0] * tree.n_nodes
    log_h = 0.0
    for v in tree.postorder():
        if not tree.is_leaf(v):
            h[v] = 1 + sum(h[c] for c in tree.children[v])
            log_h += math.log(h[v])
    return (n - 1) * math.log(2.0) - math.lgamma(n + 1) - log_h


def random_tree(names, rng, rooted=True, mean_length=0.1):
    """Random binary tree: Yule topology, exponential branch lengths."""
    n = len(names)
    if n < 2:
        raise ValueError("need at least two leaves")
    lineages = list(range(n))
    parent = [-1] * (2 * n - 1)
    nxt = n
    while len(lineages) > 1:
        i, j = sorted(rng.choice(len(lineages), size=2, replace=False))
        a, b = lineages[i], lineages[j]
        parent[a] = parent[b] = nxt
        lineages.pop(j)
        lineages[i] = nxt
        nxt += 1
    length = rng.exponential(mean_length, size=2 * n - 1)
    tree = Tree(parent, length, names)
    if not rooted:
        tree = unroot(tree)
        tree.length[tree.branch_nodes()] = rng.exponential(mean_length, size=tree.n_nodes - 1)
    return tree
