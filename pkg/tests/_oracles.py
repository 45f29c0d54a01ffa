"""Brute-force reference computations shared by the test modules."""
import itertools

from doorcrt.kernel import TrialData


def phi(a, b):
    return 1.0 if a < b else 0.5 if a == b else 0.0


def enum_wmw(t, c):
    return sum(phi(a, b) for a in t for b in c) / (len(t) * len(c))


def brute_between(trial):
    num, den = 0.0, 0
    for i, ci in enumerate(trial.clusters):
        for k, ck in enumerate(trial.clusters):
            if i != k:
                for a in ci.ranks_treatment:
                    for b in ck.ranks_control:
                        num += phi(a, b)
                        den += 1
    return num / den if den else None


def brute_within_ssw(trial):
    # pairs-weighted pooling equals the mean over all within-cluster treated/control pairs
    num, den = 0.0, 0
    for c in trial.clusters:
        for a in c.ranks_treatment:
            for b in c.ranks_control:
                num += phi(a, b)
                den += 1
    return num / den if den else None


def cluster_contents(max_m, k):
    """Every (treatment ranks, control ranks) multiset pair with 1..max_m subjects."""
    kinds = [(a, r) for a in (1, 0) for r in range(1, k + 1)]
    for m in range(1, max_m + 1):
        for combo in itertools.combinations_with_replacement(kinds, m):
            yield (tuple(r for a, r in combo if a == 1), tuple(r for a, r in combo if a == 0))
