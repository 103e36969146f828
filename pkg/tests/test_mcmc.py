import math
from collections import Counter

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from quashphylo import mcmc, models
from quashphylo.likelihood import compress_patterns
from quashphylo.mcmc import LikelihoodEngine, ProposalConfig, Sampler, multi_chain, run_chain
from quashphylo.tree import parse_newick, splits_of, yule_log_prior

PI = np.array([0.1, 0.2, 0.3, 0.4])


@pytest.fixture(scope="module")
def small_data():
    t = parse_newick("((A:0.1,B:0.2):0.1,C:0.3,(D:0.1,E:0.2):0.1);", rooted=False)
    st = models.ModelState("S3", t, rho1=2.0, rho2=3.0, pi=PI, alpha=0.5, beta_d=2.0)
    return compress_patterns(models.simulate(st, 100, 11))


def test_trace_length_follows_thinning(small_data):
    tr = run_chain("S1", small_data, iterations=1000, burn_in=500, thin=10, seed=1)
    assert len(tr) == 50 and len(tr.column("logL")) == 50
    assert tr.column("iteration")[0] == 510 and tr.column("iteration")[-1] == 1000


@pytest.mark.parametrize(
    "kw", [dict(thin=600), dict(burn_in=1000), dict(thin=0), dict(iterations=0)]
)
def test_inconsistent_configuration_rejected(small_data, kw):
    args = dict(iterations=1000, burn_in=500, thin=10)
    args.update(kw)
    with pytest.raises(ValueError):
        run_chain("S1", small_data, **args)


def test_proposal_config_validation():
    with pytest.raises(ValueError):
        ProposalConfig(sigma_rho=0.0)
    with pytest.raises(ValueError):
        ProposalConfig(move_probs={"NNI": 0.5, "SPR": 0.6})
    with pytest.raises(ValueError):
        ProposalConfig(move_probs={"swap": 1.0})


def test_same_seed_gives_identical_trace(small_data):
    a = run_chain("S3", small_data, iterations=200, burn_in=100, thin=5, seed=7)
    b = run_chain("S3", small_data, iterations=200, burn_in=100, thin=5, seed=7)
    c = run_chain("S3", small_data, iterations=200, burn_in=100, thin=5, seed=8)
    assert a.columns == b.columns and a.trees == b.trees
    assert a.columns != c.columns


def test_multi_chain_seeds(small_data):
    kw = dict(iterations=100, burn_in=50, thin=5)
    same = multi_chain("S2", small_data, [3, 3], **kw)
    assert same[0].columns == same[1].columns
    four = multi_chain("S2", small_data, [1, 2, 3, 4], **kw)
    logl = [tuple(t.column("logL")) for t in four]
    assert len(set(logl)) == 4
    with pytest.raises(ValueError):
        multi_chain("S2", small_data, [])


def test_tiny_steps_are_almost_always_accepted(small_data):
    tiny = ProposalConfig(sigma_rho=1e-7, sigma_alpha=1e-7, sigma_beta=1e-7, sigma_length=1e-7,
                          sigma_comp=1e-7, adapt=False)
    tr = run_chain("S3", small_data, proposals=tiny, iterations=60, burn_in=10, thin=10, seed=2)
    rates = tr.acceptance_rates()
    for block in ("rho1", "rho2", "alpha", "beta_d", "length", "comp"):
        assert rates[block] > 0.95


def test_adaptation_freezes_after_burn_in(small_data):
    tr = run_chain("S1", small_data, iterations=400, burn_in=300, thin=10, seed=5)
    assert tr.sigmas["rho1"] != ProposalConfig().sigma_rho
    fixed = run_chain("S1", small_data, proposals=ProposalConfig(adapt=False),
                      iterations=400, burn_in=300, thin=10, seed=5)
    assert fixed.sigmas["rho1"] == ProposalConfig().sigma_rho


def test_cached_densities_match_recomputation(small_data):
    for family in ("S3", "NS3"):
        tr = run_chain(family, small_data, iterations=150, burn_in=50, thin=5, seed=4, check_every=1)
        assert len(tr) == 20


def test_incremental_updates_match_full_evaluation(small_data, monkeypatch):
    kw = dict(iterations=120, burn_in=60, thin=3, seed=9)
    for family in ("S3", "NS2"):
        cached = run_chain(family, small_data, **kw)
        with monkeypatch.context() as m:
            m.setattr(LikelihoodEngine, "update_branches",
                      lambda self, state, snap, nodes, eig=None: self.evaluate(state))
            reference = run_chain(family, small_data, **kw)
        assert cached.trees == reference.trees
        assert cached.columns == reference.columns


def _sampler(family, tree, data=None, **kw):
    st = models.ModelState(family, tree, rho1=2.0, rho2=3.0, pi=PI, alpha=0.5, beta_d=1.0, **kw)
    return Sampler(st, data, models.PriorConfig(), ProposalConfig(), np.random.default_rng(1),
                   prior_only=data is None)


def test_nni_proposes_each_alternative_half_the_time(rng):
    t = parse_newick("((A:0.1,B:0.2):0.3,(C:0.1,D:0.2):0.1);", rooted=False)
    st = models.ModelState("S1", t)
    counts = Counter()
    for _ in range(4000):
        new, log_h = mcmc._unrooted_nni(st, rng)
        assert log_h == 0.0
        (split,) = splits_of(new.tree)
        counts[min(split, frozenset("ABCD") - split, key=sorted)] += 1
    assert frozenset("AB") not in counts
    assert set(counts) == {frozenset("AC"), frozenset("AD")}
    assert stats.binomtest(counts[frozenset("AC")], 4000, 0.5).pvalue > 1e-3


@pytest.mark.parametrize("family", ["S1", "NS1"])
def test_spr_keeps_a_valid_binary_tree(rng, family):
    names = [f"t{i}" for i in range(7)]
    st = models.sample_prior_state(family, names, models.PriorConfig(), rng)
    mover = mcmc._rooted_spr if st.tree.rooted else mcmc._unrooted_spr
    for _ in range(200):
        new, log_h = mover(st, rng)
        assert math.isfinite(log_h)
        tr = new.tree
        assert sorted(tr.names) == sorted(names)
        assert all(len(tr.children[v]) == 2 for v in range(tr.n_leaves, tr.n_nodes) if v != tr.root)
        assert tr.tree_length() == pytest.approx(st.tree.tree_length())
        if new.comps is not None:
            assert_allclose(new.comps.sum(axis=1), 1.0, atol=1e-12)
        st = new


def _topology_counts(trace, rooted):
    counts = Counter()
    for text in trace.trees:
        counts[frozenset(splits_of(parse_newick(text, rooted=rooted), rooted=rooted))] += 1
    return counts


def test_prior_only_unrooted_topologies_uniform():
    tr = run_chain("S3", None, iterations=20000, burn_in=1000, thin=19, seed=3,
                   names=list("ABCDE"), prior_only=True)
    counts = _topology_counts(tr, rooted=False)
    assert len(counts) == 15
    assert stats.chisquare(list(counts.values())).pvalue > 0.01


def test_prior_only_rooted_topologies_follow_yule():
    # topology moves on four leaves mix slowly, so thin hard
    tr = run_chain("NS1", None, iterations=16500, burn_in=500, thin=20, seed=6,
                   names=list("ABCD"), prior_only=True)
    counts = _topology_counts(tr, rooted=True)
    examples = {}
    for text in tr.trees:
        t = parse_newick(text)
        examples.setdefault(frozenset(splits_of(t, rooted=True)), t)
    assert len(counts) == 15
    n = sum(counts.values())
    expected = [n * math.exp(yule_log_prior(examples[k])) for k in counts]
    assert stats.chisquare(list(counts.values()), expected).pvalue > 0.01


def test_prior_only_scalars_match_priors():
    cfg = models.PriorConfig()
    tr = run_chain("S3", None, iterations=20000, burn_in=1000, thin=19, seed=12,
                   names=list("ABCDE"), prior_only=True)
    for name, prior in (("alpha", cfg.alpha), ("beta_d", cfg.beta_d), ("rho1", cfg.rho)):
        x = tr.column(name)
        assert stats.kstest(x, "gamma", args=(prior.shape, 0, 1 / prior.rate)).pvalue > 1e-3
    lengths = np.concatenate(tr.lengths)
    lengths = lengths[lengths > 0]
    assert stats.kstest(lengths[::7], "expon", args=(0, 1 / cfg.branch_rate)).pvalue > 1e-3


def test_composition_proposal_stays_on_simplex(rng):
    t = parse_newick("((A:0.1,B:0.2):0.3,(C:0.1,D:0.2):0.1);", rooted=False)
    s = _sampler("S1", t)
    for pi in (PI, np.array([1 - 3e-9, 1e-9, 1e-9, 1e-9])):
        for _ in range(200):
            new = s._propose_simplex(pi)
            if new is None:
                continue
            assert abs(new.sum() - 1.0) < 1e-12
            assert new.min() >= mcmc.INTERIOR_EPS * 0.999


def test_root_move_only_for_step_change_families(small_data):
    t = parse_newick("((A:0.1,B:0.2):0.1,C:0.3,(D:0.1,E:0.2):0.1);", rooted=False)
    s = _sampler("S1", t, small_data)
    assert "root" not in dict(s.moves)
    with pytest.raises(ValueError):
        s.topology_move("root")
    ns = _sampler("NS1", parse_newick("((A:0.1,B:0.2):0.1,(C:0.3,(D:0.1,E:0.2):0.1):0.1);"), small_data)
    assert "root" in dict(ns.moves)


def test_trace_files_round_trip(small_data, tmp_path):
    tr = run_chain("NS2", small_data, iterations=100, burn_in=50, thin=5, seed=1,
                   trace_path=tmp_path / "c.tsv", tree_path=tmp_path / "c.trees")
    back = mcmc.read_trace(tmp_path / "c.tsv", tmp_path / "c.trees")
    assert back.family == "NS2" and len(back) == len(tr)
    for name in tr.columns:
        assert_allclose(back.column(name), tr.column(name), rtol=1e-12, equal_nan=True)
    mcmc.write_trace(back, tmp_path / "d.tsv", tmp_path / "d.trees")
    assert (tmp_path / "d.tsv").read_text() == (tmp_path / "c.tsv").read_text()
    assert (tmp_path / "d.trees").read_text() == (tmp_path / "c.trees").read_text()
