import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from quashphylo import models
from quashphylo.likelihood import compress_patterns
from quashphylo.quash import bounds
from quashphylo.tree import parse_newick, random_tree, reroot, unroot

PI = np.array([0.1, 0.2, 0.3, 0.4])


def rooted4():
    return parse_newick("((A:0.1,B:0.2):0.05,(C:0.3,D:0.1):0.15);")


def test_family_lookup_is_case_insensitive():
    assert models.get_family("s3").name == "S3"
    with pytest.raises(ValueError):
        models.get_family("S4")


def test_state_defaults_follow_family():
    t = rooted4()
    st = models.ModelState("NS1", t, alpha=2.0, beta_d=3.0)
    assert st.alpha is None and st.beta_d is None
    assert st.comps.shape == (t.n_nodes, 4)
    with pytest.raises(ValueError):
        models.ModelState("NS2", unroot(t))


def test_stationary_branch_matrices_identical(rng):
    t = random_tree(list("ABCDE"), rng, rooted=False)
    Q = models.branch_matrices(models.ModelState("S3", t, rho1=2.0, rho2=3.0, pi=PI))
    assert_allclose(Q, np.broadcast_to(Q[0], Q.shape))


def test_equal_compositions_degenerate_to_stationary(rng):
    t = random_tree(list("ABCDE"), rng, rooted=True)
    comps = np.tile(PI, (t.n_nodes, 1))
    ns = models.ModelState("NS3", t, rho1=2.0, rho2=3.0, comps=comps, alpha=0.5, beta_d=2.0)
    s = models.ModelState("S3", unroot(t), rho1=2.0, rho2=3.0, pi=PI, alpha=0.5, beta_d=2.0)
    Q = models.branch_matrices(ns)
    assert_allclose(Q[t.branch_nodes()], np.broadcast_to(Q[0], (t.n_nodes - 1, 4, 4)))
    data = compress_patterns(models.simulate(ns, 200, 3))
    assert models.log_likelihood(ns, data) == pytest.approx(models.log_likelihood(s, data), rel=1e-12)


def test_distinct_compositions_use_joint_bounds(rng):
    t = rooted4()
    comps = rng.dirichlet(np.ones(4) * 3, t.n_nodes)
    st = models.ModelState("NS3", t, rho1=2.0, rho2=3.0, comps=comps, alpha=0.5, beta_d=2.0)
    Q = models.branch_matrices(st)
    assert not np.allclose(Q[0], Q[1])
    jb = models.quash_bounds(st)
    per = [bounds(Q[v]) for v in t.branch_nodes()]
    assert jb.lower == pytest.approx(max(b.lower for b in per))
    assert jb.upper == pytest.approx(min(b.upper for b in per))


def test_root_branches_share_the_root_composition(rng):
    t = rooted4()
    comps = rng.dirichlet(np.ones(4), t.n_nodes)
    st = models.ModelState("NS1", t, comps=comps)
    bc = models.branch_compositions(st)
    for c in t.children[t.root]:
        assert_allclose(bc[c], comps[t.root])


def test_stationary_likelihood_invariant_to_root(rng):
    t = random_tree(list("ABCDEFG"), rng, rooted=False)
    st = models.ModelState("S3", t, rho1=2.0, rho2=0.5, pi=PI, alpha=0.5, beta_d=1.5)
    data = compress_patterns(models.simulate(st, 200, 4))
    base = models.log_likelihood(st, data)
    for v in t.branch_nodes():
        other = models.ModelState("S3", unroot(reroot(t, v, 0.3)), rho1=2.0, rho2=0.5, pi=PI,
                                  alpha=0.5, beta_d=1.5)
        assert models.log_likelihood(other, data) == pytest.approx(base, abs=1e-9)


def _clade_comps(tree, clade):
    comps = np.tile(0.25, (tree.n_nodes, 4))
    for v in range(tree.n_nodes):
        if tree.leaf_set(v) <= clade:
            comps[v] = [0.45, 0.45, 0.05, 0.05]
    return comps


def test_step_change_likelihood_depends_on_root():
    t = parse_newick("(((A:0.2,B:0.2):0.2,C:0.4):0.1,D:0.5);")
    clade = frozenset("AB")
    st = models.ModelState("NS1", t, rho1=2.0, rho2=3.0, comps=_clade_comps(t, clade))
    data = compress_patterns(models.simulate(st, 300, 5))
    # moving the root into the shifted clade changes which branches carry the shift
    moved = reroot(unroot(t), t.names.index("A"), 0.5)
    st2 = models.ModelState("NS1", moved, rho1=2.0, rho2=3.0, comps=_clade_comps(moved, clade))
    assert abs(models.log_likelihood(st, data) - models.log_likelihood(st2, data)) > 1e-3


def _nested_data(family, tree, **kw):
    st = models.ModelState(family, tree, rho1=2.0, rho2=3.0, pi=PI, **kw)
    return compress_patterns(models.simulate(st, 200, 7))


def test_quadratic_model_nests_linear_model(rng):
    t = random_tree([f"t{i}" for i in range(10)], rng, rooted=False)
    data = _nested_data("S2", t, alpha=0.5)
    s3 = models.ModelState("S3", t, rho1=2.0, rho2=3.0, pi=PI, alpha=0.5, beta_d=1e6)
    s2 = models.ModelState("S2", t, rho1=2.0, rho2=3.0, pi=PI, alpha=0.5)
    assert models.log_likelihood(s3, data) == pytest.approx(models.log_likelihood(s2, data), abs=1e-4)
    # a single d category at beta = 1e6 sits at the median, within 1e-3 of zero
    s3_one = models.log_likelihood(s3, data, kd=1)
    assert s3_one == pytest.approx(models.log_likelihood(s2, data), abs=1e-5)


def test_linear_model_nests_homogeneous_model(rng):
    t = random_tree([f"t{i}" for i in range(10)], rng, rooted=False)
    data = _nested_data("S1", t)
    s2 = models.ModelState("S2", t, rho1=2.0, rho2=3.0, pi=PI, alpha=1e6)
    s1 = models.ModelState("S1", t, rho1=2.0, rho2=3.0, pi=PI)
    assert models.log_likelihood(s2, data) == pytest.approx(models.log_likelihood(s1, data), abs=1e-4)


def test_log_prior_closed_form(frozen):
    t = parse_newick("((A:0.1,B:0.1):0.1,C:0.1,(D:0.1,E:0.1):0.1);", rooted=False)
    st = models.ModelState("S1", t, rho1=1.0, rho2=1.0, pi=np.full(4, 0.25))
    assert models.log_prior(st, models.PriorConfig()) == pytest.approx(
        frozen["s1_log_prior_5_leaves"], rel=1e-12
    )


def test_log_prior_outside_support():
    t = parse_newick("((A:0.1,B:0.1):0.1,C:0.1,(D:0.1,E:0.1):0.1);", rooted=False)
    st = models.ModelState("S3", t, alpha=1.0, beta_d=1.0)
    cfg = models.PriorConfig()
    st.tree.length[0] = -0.1
    assert models.log_prior(st, cfg) == -math.inf
    st.tree.length[0] = 0.1
    st.alpha = -1.0
    assert models.log_prior(st, cfg) == -math.inf
    st.alpha = 1.0
    st.pi = np.array([0.5, 0.5, 0.0, 0.0])
    assert models.log_prior(st, cfg) == -math.inf


def test_prior_b_peaks_at_parent_composition(rng):
    t = rooted4()
    a, b = 0.94, 0.31
    comps = np.tile(PI, (t.n_nodes, 1))
    base = models.prior_b_log_density(t, comps, a, b)
    for v in models.free_composition_nodes(t):
        if v == t.root:
            continue
        for _ in range(20):
            moved = comps.copy()
            moved[v] = models.alr_inverse(models.alr(PI) + rng.normal(0, 0.05, 3))
            # the density on the simplex includes a Jacobian; compare in log-ratio space
            jac = np.log(moved[v]).sum() - np.log(PI).sum()
            assert models.prior_b_log_density(t, moved, a, b) + jac < base


def test_prior_b_sampler_matches_density(rng):
    # the root's log-ratio coordinates are N(0, b / (1 - a^2))
    t = rooted4()
    draws = np.array([models.sample_prior_b(t, 0.94, 0.31, rng)[t.root] for _ in range(4000)])
    x = models.alr(draws)
    sd = math.sqrt(0.31 / (1 - 0.94**2))
    for j in range(3):
        assert stats.kstest(x[:, j], "norm", args=(0, sd)).pvalue > 1e-3


def test_prior_config_from_json(tmp_path):
    p = tmp_path / "p.json"
    p.write_text('{"alpha": {"shape": 2, "rate": 3}, "branch_rate": 5}')
    cfg = models.PriorConfig.from_json(p)
    assert cfg.alpha.shape == 2 and cfg.branch_rate == 5
    assert cfg.beta_d.shape == 1.0 and cfg.ar_coefficient == 0.94
    p.write_text('{"bogus": 1}')
    with pytest.raises(ValueError):
        models.PriorConfig.from_json(p)
    with pytest.raises(ValueError):
        models.PriorConfig(ar_coefficient=1.5)


def test_topology_prior_choice():
    cfg = models.PriorConfig()
    assert cfg.topology_prior("S2") == "uniform"
    assert cfg.topology_prior("NS2") == "yule"


def test_predictive_draw_zero_length_tree():
    t = parse_newick("((A:0,B:0):0,(C:0,D:0):0);", rooted=False)
    st = models.ModelState("S3", t, alpha=0.5, beta_d=1.0)
    stats_ = models.posterior_predictive_draw(st, 300, 1)
    assert stats_.mean_distinct == 1.0 and stats_.sd_distinct == 0.0
    assert models.posterior_predictive_draw(st, 300, 1) == stats_


def test_homogeneous_state_predicts_more_distinct_bases(rng):
    t = random_tree([f"t{i}" for i in range(8)], rng, rooted=False, mean_length=0.6)
    s1 = models.ModelState("S1", t, rho1=2.0, rho2=3.0, pi=PI)
    s3 = models.ModelState("S3", t, rho1=2.0, rho2=3.0, pi=PI, alpha=0.2, beta_d=1.0)
    m1 = [models.posterior_predictive_draw(s1, 500, k).mean_distinct for k in range(10)]
    m3 = [models.posterior_predictive_draw(s3, 500, k).mean_distinct for k in range(10)]
    assert min(m1) > max(m3)
