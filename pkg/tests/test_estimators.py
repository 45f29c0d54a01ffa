import itertools

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from doorcrt import estimators as est
from doorcrt.estimators import MethodUnavailable
from doorcrt.kernel import Cluster, ClusterSummary, TrialData, door_wmw, summarize_trial
from doorcrt.simulation import SimScenario, generate_trial, make_model

from _oracles import brute_between, brute_within_ssw, cluster_contents


def summ(cid, m1, m2, d, var):
    return ClusterSummary(cid, m1, m2, d, None, None, var)


def trials(max_n=5, max_m=4, k=3):
    cluster = st.tuples(st.lists(st.integers(1, k), max_size=max_m),
                        st.lists(st.integers(1, k), max_size=max_m)).filter(lambda tc: tc[0] or tc[1])

    def build(parts):
        cl = tuple(Cluster(f"c{i}", tuple(t), tuple(c)) for i, (t, c) in enumerate(parts))
        return TrialData(cl, k)

    return st.lists(cluster, min_size=2, max_size=max_n).map(build).filter(
        lambda tr: tr.n_treatment > 0 and tr.n_control > 0)


# --- within, inverse variance ---

def test_ivw_examples():
    e = est.within_ivw([summ("a", 3, 3, 0.6, 0.01), summ("b", 3, 3, 0.6, 0.01)])
    assert e.estimate == pytest.approx(0.6)
    e = est.within_ivw([summ("a", 3, 3, 0.6, 0.01), summ("b", 3, 3, 0.5, 0.04)])
    assert e.estimate == pytest.approx(0.58)
    assert e.variance == pytest.approx(0.008)
    assert e.weights.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(e.influence, 2 * e.weights * (np.array([0.6, 0.5]) - 0.58))


def test_ivw_unavailable_on_zero_variance():
    trial = TrialData((Cluster("a", (1, 2), (2, 3)), Cluster("b", (2, 2), (2, 2))), 3)
    with pytest.raises(MethodUnavailable) as info:
        est.within_ivw(summarize_trial(trial))
    assert info.value.code == "ivw-unavailable"
    assert "sample-size weighted" in str(info.value)


def test_ivw_skips_one_group_clusters():
    s = [summ("a", 2, 2, 0.7, 0.02), ClusterSummary("b", 3, 0), summ("c", 1, 4, 0.4, 0.02)]
    e = est.within_ivw(s)
    assert e.n_contributing == 2
    assert e.influence[1] == 0.0 and e.weights[1] == 0.0
    assert e.estimate == pytest.approx(0.55)


# --- within, sample-size weighted ---

def test_ssw_examples():
    e = est.within_ssw([summ("a", 2, 2, 0.5, 0.01)] * 3, "type1")
    assert (e.estimate, e.variance) == (0.5, 0.0)
    e = est.within_ssw([summ("a", 2, 2, 0.75, 0.01), summ("b", 2, 2, 0.25, 0.01)], "type1")
    assert e.estimate == 0.5
    assert e.variance == pytest.approx(0.03125)
    assert e.df is None


def test_ssw_variance_methods():
    s = [summ("a", 2, 3, 0.7, 0.02), summ("b", 4, 1, 0.4, 0.05), summ("c", 3, 3, 0.55, 0.01),
         ClusterSummary("d", 0, 5)]
    w = np.array([6, 4, 9, 0]) / 19
    d = np.array([0.7, 0.4, 0.55, 0.0])
    mean = float(w @ d)
    t1 = est.within_ssw(s, "type1")
    assert t1.estimate == pytest.approx(mean)
    assert t1.variance == pytest.approx(float(np.sum((w[:3] * (d[:3] - mean)) ** 2)))
    t2 = est.within_ssw(s, "type2")
    assert t2.variance == pytest.approx(float(np.sum(w[:3] ** 2 * [0.02, 0.05, 0.01])))
    assert t2.df is None
    t3 = est.within_ssw(s, "type3")
    assert t3.variance == pytest.approx(t1.variance * 3 / 1)  # n' = 3 two-arm clusters
    assert t3.df == 2 and t3.label == "ssw_type3"
    ss = est.within_ssw(s, "type2", small_sample=True)
    assert ss.df == 2 and ss.label == "ssw_type2/ss"
    assert t1.n_contributing == 3 and t1.influence[3] == 0.0


def test_ssw_errors():
    with pytest.raises(ValueError):
        est.within_ssw([summ("a", 2, 2, 0.5, 0.01)], "type4")
    with pytest.raises(MethodUnavailable):
        est.within_ssw([ClusterSummary("a", 2, 0), ClusterSummary("b", 0, 2)])
    with pytest.raises(MethodUnavailable) as info:
        est.within_ssw([summ("a", 2, 2, 0.5, 0.01), summ("b", 2, 2, 0.6, 0.01)], "type3")
    assert info.value.code == "type3-unavailable"


def test_ssw_equal_pairs_is_plain_mean():
    s = [summ(str(i), m1, m2, d, 0.01) for i, (m1, m2, d) in
         enumerate([(2, 6, 0.3), (3, 4, 0.9), (4, 3, 0.55), (6, 2, 0.61)])]
    assert est.within_ssw(s).estimate == pytest.approx(np.mean([0.3, 0.9, 0.55, 0.61]))


# --- between ---

@pytest.mark.parametrize("t, c, expected", [((1,), (2,), 1.0), ((3,), (3,), 0.5), ((1, 2), (1, 3), 2.5)])
def test_pairwise_phi_examples(t, c, expected):
    assert est.pairwise_phi(Cluster("i", t, ()), Cluster("k", (), c)) == expected


def test_between_examples():
    one = TrialData((Cluster("1", (1, 1), ()), Cluster("2", (), (2, 2))), 2)
    assert est.between(one).estimate == 1.0
    two = TrialData((Cluster("1", (1,), (2,)), Cluster("2", (3,), (1,))), 3)
    assert est.between(two).estimate == 0.25


def test_between_errors():
    with pytest.raises(MethodUnavailable):
        est.between(TrialData((Cluster("a", (1,), (2,)),), 2))
    with pytest.raises(MethodUnavailable):
        est.between(TrialData((Cluster("a", (1,), ()), Cluster("b", (), (2,))), 2), small_sample=True)


def test_between_small_sample():
    trial = generate_trial(SimScenario(8, 10, "two_group", make_model(0.2, 0.1), replicates=1), 0)
    plain = est.between(trial)
    corr = est.between(trial, small_sample=True)
    assert corr.variance == pytest.approx(plain.variance * 8 / 6)
    assert corr.df == 7 and corr.label == "between/ss" and plain.label == "between"


def test_ratio_adjustment_matches_plain_kernel_when_balanced():
    trial = generate_trial(SimScenario(12, 8, "two_group", make_model(0.2, 0.1), replicates=1), 1)
    a = est.between(trial)
    b = est.between(trial, ratio_adjusted=False)
    assert a.estimate == b.estimate
    np.testing.assert_allclose(a.influence, b.influence, atol=1e-12)


def test_between_singletons_is_classical_wmw():
    # clusters of size one: D_b is the ordinary two-sample statistic
    t = [1, 3, 2, 2, 4]
    c = [2, 4, 4, 1]
    cl = [Cluster(f"t{i}", (r,), ()) for i, r in enumerate(t)] + [Cluster(f"c{i}", (), (r,)) for i, r in enumerate(c)]
    assert est.between(TrialData(tuple(cl), 4)).estimate == door_wmw(t, c)


# --- exhaustive brute-force grid ---

def _check_against_brute(trial):
    if trial.n_treatment == 0 or trial.n_control == 0:
        return
    s = summarize_trial(trial)
    for cl, sm in zip(trial.clusters, s):
        if cl.two_arm:
            assert sm.d_wi == brute_within_ssw(TrialData((cl,), trial.k_levels))
    w_ref = brute_within_ssw(trial)
    if w_ref is None:
        with pytest.raises(MethodUnavailable):
            est.within_ssw(s)
    else:
        assert est.within_ssw(s).estimate == pytest.approx(w_ref, abs=1e-14)
    b_ref = brute_between(trial)
    if b_ref is None:
        with pytest.raises(MethodUnavailable):
            est.between(trial)
    else:
        assert est.between(trial).estimate == b_ref


@pytest.mark.parametrize("k", [2, 3])
def test_exhaustive_two_clusters(k):
    contents = list(cluster_contents(4, k))
    for a, b in itertools.combinations_with_replacement(contents, 2):
        _check_against_brute(TrialData((Cluster("a", *a), Cluster("b", *b)), k))


def test_exhaustive_three_small_clusters():
    contents = list(cluster_contents(2, 3))
    for combo in itertools.combinations_with_replacement(contents, 3):
        _check_against_brute(TrialData(tuple(Cluster(str(i), *c) for i, c in enumerate(combo)), 3))


def test_fallacy_panels():
    # better outcomes in cluster 2 whatever the arm; clear effect inside each cluster
    tl = TrialData((Cluster("1", (3, 3), (4, 4)), Cluster("2", (1, 1), (2, 2))), 4)
    assert est.within_ssw(summarize_trial(tl)).estimate == 1.0
    assert est.between(tl).estimate == 0.5
    # no effect inside clusters, treated subjects concentrated in the better cluster
    tr = TrialData((Cluster("1", (4,), (4, 4, 4)), Cluster("2", (1, 1, 1), (1,))), 4)
    assert est.within_ssw(summarize_trial(tr)).estimate == 0.5
    assert est.between(tr).estimate == pytest.approx(0.9)
    # parallel designs: the better cluster happens to be treated (spurious) or control (masked)
    spurious = TrialData((Cluster("1", (1, 2), ()), Cluster("2", (), (3, 4))), 4)
    assert est.between(spurious).estimate == 1.0
    masked = TrialData((Cluster("1", (3, 4), ()), Cluster("2", (), (1, 2))), 4)
    assert est.between(masked).estimate == 0.0
    for t in (spurious, masked):
        with pytest.raises(MethodUnavailable):
            est.within_ssw(summarize_trial(t))


@settings(max_examples=300, deadline=None)
@given(trials(max_n=3, max_m=4, k=3))
def test_random_grid_against_brute(trial):
    _check_against_brute(trial)


# --- invariants ---

@settings(max_examples=150, deadline=None)
@given(trials())
def test_arm_swap_antisymmetry(trial):
    sw = trial.swap_arms()
    fits = []
    for fn in (lambda t: est.between(t),
               lambda t: est.within_ssw(summarize_trial(t), "type1"),
               lambda t: est.within_ssw(summarize_trial(t), "type2"),
               lambda t: est.within_ivw(summarize_trial(t))):
        try:
            fits.append((fn(trial), fn(sw)))
        except MethodUnavailable:
            continue
    for a, b in fits:
        assert a.estimate + b.estimate == pytest.approx(1.0, abs=1e-12)
        assert b.variance == pytest.approx(a.variance, rel=1e-9, abs=1e-15)


@settings(max_examples=150, deadline=None)
@given(trials())
def test_between_influence_centred(trial):
    try:
        b = est.between(trial)
    except MethodUnavailable:
        assume(False)
    assert abs(b.influence.sum()) <= 1e-8 * trial.n
    assert 0.0 <= b.estimate <= 1.0 and b.variance >= 0.0
    assert b.variance == pytest.approx(np.sum(b.influence ** 2) / trial.n ** 2)


# --- joint covariance ---

def _fake(kind, e, var, infl):
    return est.DoorEstimate(kind, e, var, np.asarray(infl, float), "type1", len(infl))


def test_joint_covariance_conventions():
    b = _fake("between", 0.55, 0.001, [0.1, -0.2, 0.1, 0.0])
    w0 = _fake("within_ssw", 0.5, 0.0, [0.0, 0.0, 0.0, 0.0])
    cov = est.joint_covariance(b, w0)
    assert cov.rho == 0.0 and cov.sigma[1, 1] == 0.0
    same = est.joint_covariance(b, _fake("within_ssw", 0.6, 0.001, b.influence))
    assert same.rho == pytest.approx(1.0)
    np.testing.assert_allclose(same.sigma, [[0.004, 0.004], [0.004, 0.004]])
    with pytest.raises(ValueError):
        est.joint_covariance(b, _fake("within_ssw", 0.5, 0.01, [0.1, 0.2]))


@settings(max_examples=100, deadline=None)
@given(trials())
def test_joint_covariance_psd(trial):
    try:
        b = est.between(trial)
        w = est.within_ssw(summarize_trial(trial))
    except MethodUnavailable:
        assume(False)
    cov = est.joint_covariance(b, w)
    assert -1.0 <= cov.rho <= 1.0
    assert np.linalg.eigvalsh(cov.sigma).min() >= -1e-10
    assert cov.sigma[0, 0] == pytest.approx(trial.n * b.variance)


# --- Monte Carlo calibration ---

def _replicates(scenario, reps):
    return [generate_trial(scenario, i) for i in range(reps)]


def test_between_unbiased_without_clustering():
    sc = SimScenario(30, 4, "two_group", make_model(0.0, 0.0), replicates=1, seed=3)
    vals = [est.between(t).estimate for t in _replicates(sc, 2000)]
    assert abs(np.mean(vals) - 0.5) < 0.005


def test_type2_se_matches_sd():
    sc = SimScenario(100, 8, "two_group", make_model(0.1, 0.1), replicates=1, seed=4)
    fits = [est.within_ssw(summarize_trial(t), "type2") for t in _replicates(sc, 600)]
    sd = np.std([f.estimate for f in fits], ddof=1)
    mean_se = np.mean([f.se for f in fits])
    assert mean_se == pytest.approx(sd, rel=0.1)


def test_rho_estimate_stable():
    sc = SimScenario(100, 8, "two_group", make_model(0.1, 0.1), replicates=1, seed=5)
    rhos = []
    for t in _replicates(sc, 300):
        rhos.append(est.joint_covariance(est.between(t), est.within_ssw(summarize_trial(t))).rho)
    assert np.std(rhos, ddof=1) < 0.15
