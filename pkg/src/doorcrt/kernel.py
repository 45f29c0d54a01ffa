"""Trial data model and per-cluster DOOR statistics.

A DOOR rank is an integer in ``1..K`` with 1 the most desirable outcome.  The
per-cluster DOOR probability is the tie-corrected Wilcoxon-Mann-Whitney
statistic comparing treated against control subjects of the same cluster,
and its large-sample variance is built from the two U-statistic variance
components evaluated at the observed rank frequencies.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np

TREATMENT = 1
CONTROL = 0

# Components this close to zero are floating-point residue of exact zeros.
NEG_CLAMP = 1e-12


class TrialValidationError(ValueError):
    """Raised for malformed trial input; carries the offending record index."""

    def __init__(self, message: str, index: Optional[int] = None):
        self.index = index
        if index is not None:
            message = f"record {index}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Cluster:
    id: object
    ranks_treatment: tuple
    ranks_control: tuple

    @property
    def m1(self) -> int:
        return len(self.ranks_treatment)

    @property
    def m2(self) -> int:
        return len(self.ranks_control)

    @property
    def size(self) -> int:
        return self.m1 + self.m2

    @property
    def two_arm(self) -> bool:
        return self.m1 > 0 and self.m2 > 0

    def swapped(self) -> "Cluster":
        return Cluster(self.id, self.ranks_control, self.ranks_treatment)


@dataclass(frozen=True)
class TrialData:
    """Subject-level DOOR ranks grouped into clusters, in input order."""

    clusters: tuple
    k_levels: int

    @property
    def n(self) -> int:
        return len(self.clusters)

    @property
    def n_treatment(self) -> int:
        return sum(c.m1 for c in self.clusters)

    @property
    def n_control(self) -> int:
        return sum(c.m2 for c in self.clusters)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([c.size for c in self.clusters])

    @cached_property
    def counts(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-cluster rank counts ``(treatment, control)``, each ``n x K``."""
        k = self.k_levels
        t = np.zeros((self.n, k))
        c = np.zeros((self.n, k))
        for i, cl in enumerate(self.clusters):
            if cl.m1:
                t[i] = np.bincount(np.asarray(cl.ranks_treatment) - 1, minlength=k)
            if cl.m2:
                c[i] = np.bincount(np.asarray(cl.ranks_control) - 1, minlength=k)
        return t, c

    def swap_arms(self) -> "TrialData":
        return TrialData(tuple(c.swapped() for c in self.clusters), self.k_levels)

    def records(self) -> list[tuple]:
        """Flatten back to ``(cluster_id, arm, rank)`` triples."""
        out = []
        for c in self.clusters:
            out.extend((c.id, TREATMENT, r) for r in c.ranks_treatment)
            out.extend((c.id, CONTROL, r) for r in c.ranks_control)
        return out


@dataclass(frozen=True)
class RankDistribution:
    p1: Optional[np.ndarray]
    p2: Optional[np.ndarray]


@dataclass(frozen=True)
class ClusterSummary:
    cluster_id: object
    m1: int
    m2: int
    d_wi: Optional[float] = None
    sigma10_sq: Optional[float] = None
    sigma01_sq: Optional[float] = None
    var_dwi: Optional[float] = None

    @property
    def two_arm(self) -> bool:
        return self.d_wi is not None


def _as_rank(value, index: int) -> int:
    if isinstance(value, (bool, np.bool_)):
        raise TrialValidationError(f"rank must be an integer, got {value!r}", index)
    try:
        as_int = int(value)
    except (TypeError, ValueError):
        raise TrialValidationError(f"rank must be an integer, got {value!r}", index) from None
    if as_int != value:
        raise TrialValidationError(f"rank must be an integer, got {value!r}", index)
    if as_int < 1:
        raise TrialValidationError(f"rank below 1 ({as_int})", index)
    return as_int


def _as_arm(value, index: int) -> int:
    if isinstance(value, str):
        value = value.strip()
        if value in ("0", "1"):
            return int(value)
    elif not isinstance(value, (bool, np.bool_)) and value in (0, 1):
        return int(value)
    raise TrialValidationError(f"arm label must be 0 or 1, got {value!r}", index)


def validate_trial(records: Iterable[Sequence], k_levels: Optional[int] = None) -> TrialData:
    """Group ``(cluster_id, arm, rank)`` records into a validated :class:`TrialData`.

    Clusters keep first-appearance order.  ``k_levels`` defaults to the largest
    observed rank.
    """
    records = list(records)
    if not records:
        raise TrialValidationError("empty input: no records")
    groups: dict = {}
    for idx, rec in enumerate(records):
        if len(rec) != 3:
            raise TrialValidationError("expected (cluster_id, arm, rank)", idx)
        cid, arm, rank = rec
        arm = _as_arm(arm, idx)
        rank = _as_rank(rank, idx)
        t, c = groups.setdefault(cid, ([], []))
        (t if arm == TREATMENT else c).append(rank)

    max_rank = max(max(t + c) for t, c in groups.values())
    if k_levels is None:
        k_levels = max(max_rank, 2)
    elif k_levels < 2:
        raise TrialValidationError(f"k_levels must be at least 2, got {k_levels}")
    elif max_rank > k_levels:
        bad = next(i for i, r in enumerate(records) if int(r[2]) > k_levels)
        raise TrialValidationError(f"rank {max_rank} exceeds k_levels={k_levels}", bad)

    clusters = tuple(Cluster(cid, tuple(t), tuple(c)) for cid, (t, c) in groups.items())
    trial = TrialData(clusters, int(k_levels))
    if trial.n_treatment == 0:
        raise TrialValidationError("treatment arm is empty trial-wide", len(records) - 1)
    if trial.n_control == 0:
        raise TrialValidationError("control arm is empty trial-wide", len(records) - 1)
    return trial


def phi_matrix(k: int) -> np.ndarray:
    """Tie kernel on rank levels: 1 if the row rank wins, 1/2 on ties."""
    idx = np.arange(k)
    return (idx[:, None] < idx[None, :]) + 0.5 * (idx[:, None] == idx[None, :])


def door_wmw(ranks_t: Sequence[int], ranks_c: Sequence[int]) -> float:
    """Tie-corrected WMW estimate of P(treated better) + P(tie)/2."""
    t = np.asarray(ranks_t)
    c = np.sort(np.asarray(ranks_c))
    if t.size == 0 or c.size == 0:
        raise ValueError("both arms must be nonempty")
    below = np.searchsorted(c, t, side="left")
    above = c.size - np.searchsorted(c, t, side="right")
    ties = c.size - below - above
    return float((above.sum() + 0.5 * ties.sum()) / (t.size * c.size))


def cluster_rank_dist(cluster: Cluster, k: int) -> RankDistribution:
    def freq(ranks):
        if not ranks:
            return None
        return np.bincount(np.asarray(ranks) - 1, minlength=k)[:k] / len(ranks)

    if max(cluster.ranks_treatment + cluster.ranks_control, default=0) > k:
        raise ValueError(f"cluster {cluster.id!r} has ranks above K={k}")
    return RankDistribution(freq(cluster.ranks_treatment), freq(cluster.ranks_control))


def _sigma_rows(p1: np.ndarray, p2: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Rows are clusters; columns are DOOR levels.
    # tail_ge[:, a] = sum_{l >= a} p[:, l]; tail_gt[:, a] = sum_{l > a} p[:, l]
    def tails(p):
        ge = np.cumsum(p[:, ::-1], axis=1)[:, ::-1]
        return ge, ge - p

    ge2, gt2 = tails(p2)
    ge1, gt1 = tails(p1)
    s10 = (p1 * ge2 * gt2).sum(axis=1) + 0.25 * (p1 * p2**2).sum(axis=1) - d**2
    s01 = (p2 * ge1 * gt1).sum(axis=1) + 0.25 * (p2 * p1**2).sum(axis=1) - (1.0 - d) ** 2
    for s in (s10, s01):
        s[(s < 0) & (s > -NEG_CLAMP)] = 0.0
    if (s10 < 0).any() or (s01 < 0).any():
        raise ValueError("variance component negative beyond rounding; inconsistent d_wi?")
    return s10, s01


def sigma_components(dist: RankDistribution, d_wi: float) -> tuple[float, float]:
    """Plug-in ``(sigma10^2, sigma01^2)`` for one cluster.

    ``sigma10^2`` is the variance of P(control worse | treated rank) and
    ``sigma01^2`` the variance of P(treated better | control rank), both
    written as sums over DOOR levels.
    """
    if dist.p1 is None or dist.p2 is None:
        raise ValueError("rank distribution missing for one arm")
    s10, s01 = _sigma_rows(dist.p1[None, :], dist.p2[None, :], np.array([d_wi], dtype=float))
    return float(s10[0]), float(s01[0])


def summarize_counts(cluster_ids: Sequence, t_counts: np.ndarray, c_counts: np.ndarray) -> list[ClusterSummary]:
    """Vectorised :func:`summarize_cluster` over count matrices (``n x K``)."""
    m1 = t_counts.sum(axis=1)
    m2 = c_counts.sum(axis=1)
    two = (m1 > 0) & (m2 > 0)
    out = [None] * len(m1)
    if two.any():
        t = t_counts[two]
        c = c_counts[two]
        a1 = m1[two]
        a2 = m2[two]
        d = ((t @ phi_matrix(t.shape[1])) * c).sum(axis=1) / (a1 * a2)
        s10, s01 = _sigma_rows(t / a1[:, None], c / a2[:, None], d)
        var = s10 / a1 + s01 / a2
        for j, i in enumerate(np.flatnonzero(two)):
            out[i] = ClusterSummary(cluster_ids[i], int(m1[i]), int(m2[i]), float(d[j]),
                                    float(s10[j]), float(s01[j]), float(var[j]))
    for i in np.flatnonzero(~two):
        out[i] = ClusterSummary(cluster_ids[i], int(m1[i]), int(m2[i]))
    return out


def summarize_cluster(cluster: Cluster, k: int) -> ClusterSummary:
    if max(cluster.ranks_treatment + cluster.ranks_control, default=0) > k:
        raise ValueError(f"cluster {cluster.id!r} has ranks above K={k}")
    t, c = TrialData((cluster,), k).counts
    return summarize_counts([cluster.id], t, c)[0]


def summarize_trial(trial: TrialData) -> list[ClusterSummary]:
    t, c = trial.counts
    return summarize_counts([cl.id for cl in trial.clusters], t, c)
