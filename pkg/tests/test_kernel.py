import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doorcrt.kernel import (
    Cluster, RankDistribution, TrialData, TrialValidationError, cluster_rank_dist, door_wmw,
    sigma_components, summarize_cluster, summarize_trial, validate_trial,
)
from doorcrt.simulation import SimScenario, generate_trial, make_model

from _oracles import enum_wmw


def enum_sigmas(p1, p2):
    # sigma10 = Cov(phi(Y, Z), phi(Y, Z')) with Y ~ p1 and Z, Z' iid p2, enumerated over triples.
    k = len(p1)
    phi = lambda a, b: 1.0 if a < b else 0.5 if a == b else 0.0  # noqa: E731
    d = sum(p1[a] * p2[b] * phi(a, b) for a in range(k) for b in range(k))
    s10 = sum(p1[a] * p2[b] * p2[c] * phi(a, b) * phi(a, c)
              for a in range(k) for b in range(k) for c in range(k)) - d * d
    s01 = sum(p2[b] * p1[a] * p1[c] * phi(a, b) * phi(c, b)
              for a in range(k) for b in range(k) for c in range(k)) - d * d
    return d, s10, s01


ranks = st.lists(st.integers(1, 5), min_size=1, max_size=12)
dists = st.integers(2, 4).flatmap(lambda k: st.tuples(
    st.lists(st.integers(0, 6), min_size=k, max_size=k).filter(any),
    st.lists(st.integers(0, 6), min_size=k, max_size=k).filter(any),
))


# --- validate_trial ---

def test_minimal_trial():
    trial = validate_trial([("A", 1, 1), ("A", 0, 2)])
    assert trial.n == 1 and trial.k_levels == 2
    assert trial.clusters[0] == Cluster("A", (1,), (2,))


def test_first_appearance_order():
    trial = validate_trial([("b", 1, 1), ("a", 0, 2), ("b", 0, 3), ("a", 1, 1)])
    assert [c.id for c in trial.clusters] == ["b", "a"]
    assert trial.clusters[0].ranks_control == (3,)


@pytest.mark.parametrize("records, fragment, index", [
    ([("A", 1, 0)], "rank below 1", 0),
    ([("A", 1, 1), ("A", 2, 1)], "arm", 1),
    ([("A", 1, 1), ("A", 0, 1.5)], "rank", 1),
    ([("A", 1, 1), ("B", 1, 2)], "control arm is empty", None),
    ([], "empty", None),
])
def test_validation_errors(records, fragment, index):
    with pytest.raises(TrialValidationError, match=fragment) as info:
        validate_trial(records)
    if index is not None:
        assert info.value.index == index
        assert str(info.value).startswith(f"record {index}")


def test_k_override_and_too_small():
    assert validate_trial([("A", 1, 1), ("A", 0, 2)], k_levels=5).k_levels == 5
    with pytest.raises(TrialValidationError):
        validate_trial([("A", 1, 1), ("A", 0, 3)], k_levels=2)


def test_generator_round_trip():
    sc = SimScenario(10, 60, "two_group", make_model(0.1, 0.1), replicates=1)
    trial = generate_trial(sc, 0)
    again = validate_trial(trial.records(), trial.k_levels)
    assert again == trial
    assert again.n == 10 and all(s == 60 for s in again.sizes)


# --- door_wmw ---

@pytest.mark.parametrize("t, c, expected", [([1], [2], 1.0), ([3], [3], 0.5), ([1, 3], [2, 3], 0.625)])
def test_wmw_examples(t, c, expected):
    assert door_wmw(t, c) == expected


def test_wmw_empty_arm():
    with pytest.raises(ValueError):
        door_wmw([], [1])


def _multisets(k, max_size):
    for m in range(1, max_size + 1):
        yield from itertools.combinations_with_replacement(range(1, k + 1), m)


@pytest.mark.parametrize("k", [2, 3, 4])
def test_wmw_exhaustive_grid(k):
    # every pair of rank multisets with m1 + m2 <= 8
    sets = list(_multisets(k, 7))
    for t in sets:
        for c in sets:
            if len(t) + len(c) <= 8:
                assert door_wmw(t, c) == enum_wmw(t, c)


@given(ranks, ranks)
def test_complement_symmetry(t, c):
    assert door_wmw(t, c) + door_wmw(c, t) == pytest.approx(1.0, abs=1e-15)


@given(ranks, ranks, st.randoms())
def test_permutation_invariance(t, c, rnd):
    t2, c2 = list(t), list(c)
    rnd.shuffle(t2)
    rnd.shuffle(c2)
    assert door_wmw(t2, c2) == door_wmw(t, c)


# --- rank distributions and variance components ---

def test_rank_dist_examples():
    d = cluster_rank_dist(Cluster("x", (1, 1, 2), ()), 3)
    np.testing.assert_allclose(d.p1, [2 / 3, 1 / 3, 0])
    assert d.p2 is None
    u = cluster_rank_dist(Cluster("u", (1, 2, 3, 4, 5), (5, 4, 3, 2, 1)), 5)
    np.testing.assert_allclose(u.p1, [0.2] * 5)
    np.testing.assert_allclose(u.p2, [0.2] * 5)


def test_sigma_degenerate_cases():
    assert sigma_components(RankDistribution(np.array([1.0, 0]), np.array([1.0, 0])), 0.5) == (0.0, 0.0)
    assert sigma_components(RankDistribution(np.array([1.0, 0]), np.array([0, 1.0])), 1.0) == (0.0, 0.0)


def test_sigma_half_half_by_enumeration():
    p = np.array([0.5, 0.5])
    d, e10, e01 = enum_sigmas(p, p)
    assert d == 0.5
    s10, s01 = sigma_components(RankDistribution(p, p), d)
    # E[phi | Y=1] = 3/4, E[phi | Y=2] = 1/4, so each component is 1/16
    assert (s10, s01) == pytest.approx((0.0625, 0.0625), abs=1e-15)
    assert (s10, s01) == pytest.approx((e10, e01), abs=1e-15)


@given(dists)
def test_sigma_matches_enumeration(counts):
    p1 = np.array(counts[0], float) / sum(counts[0])
    p2 = np.array(counts[1], float) / sum(counts[1])
    d, e10, e01 = enum_sigmas(p1, p2)
    s10, s01 = sigma_components(RankDistribution(p1, p2), d)
    assert s10 == pytest.approx(max(e10, 0.0), abs=1e-12)
    assert s01 == pytest.approx(max(e01, 0.0), abs=1e-12)


def test_sigma_missing_arm():
    with pytest.raises(ValueError):
        sigma_components(RankDistribution(np.array([1.0, 0]), None), 0.5)


@given(ranks, ranks, st.data())
def test_relabel_invariance(t, c, data):
    k = max(t + c)
    new = sorted(data.draw(st.lists(st.integers(1, 12), min_size=k, max_size=k, unique=True)))
    relabel = lambda xs: tuple(new[x - 1] for x in xs)  # noqa: E731
    a = summarize_cluster(Cluster("a", tuple(t), tuple(c)), k)
    b = summarize_cluster(Cluster("b", relabel(t), relabel(c)), max(new))
    assert b.d_wi == pytest.approx(a.d_wi, abs=1e-14)
    assert b.sigma10_sq == pytest.approx(a.sigma10_sq, abs=1e-14)
    assert b.sigma01_sq == pytest.approx(a.sigma01_sq, abs=1e-14)


# --- summaries ---

def test_summary_examples():
    one = summarize_cluster(Cluster("g", (1, 2), ()), 2)
    assert one.d_wi is None and one.var_dwi is None and not one.two_arm
    s = summarize_cluster(Cluster("h", (1, 3), (2, 3)), 3)
    assert s.d_wi == 0.625
    assert s.var_dwi == pytest.approx(s.sigma10_sq / 2 + s.sigma01_sq / 2)
    tied = summarize_cluster(Cluster("t", (2, 2, 2), (2, 2)), 3)
    assert tied.d_wi == 0.5 and tied.var_dwi == 0.0


@given(ranks, ranks)
def test_var_nonnegative(t, c):
    s = summarize_cluster(Cluster("a", tuple(t), tuple(c)), 5)
    assert s.var_dwi >= 0.0


def test_summarize_trial_matches_per_cluster():
    sc = SimScenario(6, 9, "mixture", make_model(0.3, 0.2), replicates=1)
    trial = generate_trial(sc, 3)
    for cl, s in zip(trial.clusters, summarize_trial(trial)):
        ref = summarize_cluster(cl, trial.k_levels)
        assert s == ref
        if cl.two_arm:
            assert s.d_wi == pytest.approx(enum_wmw(cl.ranks_treatment, cl.ranks_control), abs=1e-15)


def test_summary_rejects_ranks_above_k():
    with pytest.raises(ValueError):
        summarize_cluster(Cluster("a", (4,), (1,)), 3)


def test_variance_monte_carlo():
    # sqrt(m) (D_hat - D) at m = 400, r = 1/2, against sigma10 / r + sigma01 / (1 - r)
    rng = np.random.default_rng(7)
    p1 = np.array([0.1, 0.3, 0.4, 0.2])
    p2 = np.array([0.25, 0.25, 0.3, 0.2])
    d, s10, s01 = enum_sigmas(p1, p2)
    reps, m1, m2 = 10_000, 200, 200
    t = rng.multinomial(m1, p1, size=reps).astype(float)
    c = rng.multinomial(m2, p2, size=reps).astype(float)
    k = len(p1)
    idx = np.arange(k)
    phi = (idx[:, None] < idx[None, :]) + 0.5 * (idx[:, None] == idx[None, :])
    est = ((t @ phi) * c).sum(axis=1) / (m1 * m2)
    emp = np.var(np.sqrt(m1 + m2) * (est - d), ddof=1)
    theory = s10 / 0.5 + s01 / 0.5
    assert abs(emp / theory - 1.0) < 0.05
    # the plug-in agrees on one large draw as well
    s = summarize_cluster(Cluster("x", tuple(np.repeat(idx + 1, t[0].astype(int))),
                                  tuple(np.repeat(idx + 1, c[0].astype(int)))), k)
    assert s.var_dwi * (m1 + m2) == pytest.approx(theory, rel=0.25)


def test_counts_and_swap():
    trial = TrialData((Cluster("a", (1, 2), (2,)), Cluster("b", (), (3, 3))), 3)
    t, c = trial.counts
    np.testing.assert_array_equal(t, [[1, 1, 0], [0, 0, 0]])
    np.testing.assert_array_equal(c, [[0, 1, 0], [0, 0, 2]])
    sw = trial.swap_arms()
    assert sw.clusters[1].ranks_treatment == (3, 3)
    assert sw.swap_arms() == trial
