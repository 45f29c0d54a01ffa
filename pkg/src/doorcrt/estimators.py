"""Trial-level within-cluster and between-cluster DOOR estimators.

Every estimator returns a :class:`DoorEstimate` carrying per-cluster
influence values aligned with the trial's cluster order, so that any
within/between pair can be combined through :func:`joint_covariance`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .kernel import ClusterSummary, Cluster, TrialData, phi_matrix

WITHIN_METHODS = ("type1", "type2", "type3")


class MethodUnavailable(RuntimeError):
    """An estimator or test cannot be computed on this data.

    ``code`` is a short machine-readable tag such as ``"ivw-unavailable"``.
    """

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


@dataclass(frozen=True)
class DoorEstimate:
    kind: str  # within_ivw | within_ssw | between | hybrid
    estimate: float
    variance: float
    influence: np.ndarray = field(repr=False)
    variance_method: str
    n_contributing: int
    df: Optional[int] = None  # None -> normal calibration, else t(df)
    weights: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.influence)

    @property
    def se(self) -> float:
        return math.sqrt(self.variance)

    @property
    def df_mode(self) -> str:
        return "normal" if self.df is None else f"t({self.df})"

    @property
    def label(self) -> str:
        if self.kind == "within_ivw":
            return "within_ivw"
        if self.kind == "within_ssw":
            tag = f"ssw_{self.variance_method}"
            return tag + ("/ss" if self.df is not None and self.variance_method != "type3" else "")
        if self.kind == "between":
            return "between/ss" if self.variance_method == "influence_corrected" else "between"
        return self.kind


@dataclass(frozen=True)
class JointCovariance:
    """Asymptotic covariance of sqrt(n) * (between, within) estimates."""

    sigma: np.ndarray
    rho: float
    n: int


def _two_arm(summaries: Sequence[ClusterSummary]) -> np.ndarray:
    return np.array([s.two_arm for s in summaries], dtype=bool)


def within_ivw(summaries: Sequence[ClusterSummary]) -> DoorEstimate:
    """Inverse-variance (fixed-effects meta-analysis) pooling of the cluster estimates."""
    n = len(summaries)
    mask = _two_arm(summaries)
    if not mask.any():
        raise MethodUnavailable("ivw-unavailable", "no cluster contains both arms")
    var = np.array([s.var_dwi if s.two_arm else np.nan for s in summaries])
    d = np.array([s.d_wi if s.two_arm else np.nan for s in summaries])
    if np.any(var[mask] <= 0):
        bad = [str(s.cluster_id) for s, ok in zip(summaries, mask) if ok and s.var_dwi <= 0]
        raise MethodUnavailable(
            "ivw-unavailable",
            f"zero estimated variance in cluster(s) {', '.join(bad[:5])}; "
            "use the sample-size weighted estimator instead",
        )
    prec = np.where(mask, 1.0 / np.where(mask, var, 1.0), 0.0)
    total = prec.sum()
    w = prec / total
    est = float(np.dot(w[mask], d[mask]))
    influence = np.where(mask, n * w * (np.where(mask, d, 0.0) - est), 0.0)
    return DoorEstimate("within_ivw", est, float(1.0 / total), influence, "ivw",
                        int(mask.sum()), None, w)


def within_ssw(summaries: Sequence[ClusterSummary], method: str = "type1",
               small_sample: bool = False) -> DoorEstimate:
    """Pooling with weights proportional to the number of treated/control pairs.

    ``type1``: empirical influence variance, normal calibration.
    ``type2``: sum of squared weights times plug-in cluster variances.
    ``type3``: ``type1`` inflated by n/(n-2), calibrated with t(n-1).

    ``n`` counts the two-arm clusters.  ``small_sample`` switches ``type1`` and
    ``type2`` to t(n-1) calibration as well.
    """
    if method not in WITHIN_METHODS:
        raise ValueError(f"unknown within method {method!r}; expected one of {WITHIN_METHODS}")
    n = len(summaries)
    mask = _two_arm(summaries)
    n_two = int(mask.sum())
    if n_two == 0:
        raise MethodUnavailable("within-inestimable", "no cluster contains both arms")
    pairs = np.array([s.m1 * s.m2 for s in summaries], dtype=float)
    w = pairs / pairs.sum()
    d = np.array([s.d_wi if s.two_arm else 0.0 for s in summaries])
    est = float(np.dot(w, d))
    resid = np.where(mask, d - est, 0.0)
    influence = n * w * resid
    df = None
    if method == "type2":
        var = float(sum(wi**2 * s.var_dwi for wi, s in zip(w, summaries) if s.two_arm))
    else:
        var = float(np.sum((w * resid) ** 2))
    if method == "type3":
        if n_two < 3:
            raise MethodUnavailable("type3-unavailable",
                                    f"small-sample correction needs >= 3 two-arm clusters, got {n_two}")
        var *= n_two / (n_two - 2)
    if method == "type3" or small_sample:
        if n_two < 2:
            raise MethodUnavailable("t-unavailable", "t calibration needs >= 2 two-arm clusters")
        df = n_two - 1
    return DoorEstimate("within_ssw", est, var, influence, method, n_two, df, w)


def pairwise_phi(ci: Cluster, ck: Cluster) -> float:
    """Sum of the tie kernel over treated subjects of ``ci`` x control subjects of ``ck``."""
    if not ci.ranks_treatment or not ck.ranks_control:
        return 0.0
    t = np.asarray(ci.ranks_treatment)[:, None]
    c = np.asarray(ck.ranks_control)[None, :]
    return float(np.sum(t < c) + 0.5 * np.sum(t == c))


def between(trial: TrialData, small_sample: bool = False,
            ratio_adjusted: bool = True) -> DoorEstimate:
    """Between-cluster DOOR probability as a U-statistic over cluster pairs.

    The per-cluster influence values are the empirical first-order projections
    ``2/(n-1) * sum_k h(i, k) - 2 * D_b``.  With ``ratio_adjusted`` the pair
    kernel is linearised about the random denominator,
    ``h(i, k) = C(n,2) * (Phi_ik + Phi_ki - D_b * M_ik) / denom + D_b`` with
    ``M_ik`` the number of cross pairs.  It coincides with the unadjusted
    kernel ``C(n,2) * (Phi_ik + Phi_ki) / denom`` whenever ``M_ik`` is the same
    for every cluster pair, and keeps the variance invariant to swapping arms.

    ``small_sample`` inflates the variance by n/(n-2) and calibrates with t(n-1).
    """
    n = trial.n
    if n < 2:
        raise MethodUnavailable("between-unavailable", "need at least two clusters")
    t, c = trial.counts
    m1 = t.sum(axis=1)
    m2 = c.sum(axis=1)
    denom = m1.sum() * m2.sum() - np.dot(m1, m2)
    if denom <= 0:
        raise MethodUnavailable("between-unavailable",
                                "no treated/control pair spans two different clusters")
    phi = t @ phi_matrix(trial.k_levels) @ c.T
    np.fill_diagonal(phi, 0.0)
    s = phi + phi.T
    est = float(s.sum() / 2.0 / denom)

    npairs = n * (n - 1) / 2.0
    if ratio_adjusted:
        cross = np.outer(m1, m2)
        cross = cross + cross.T
        np.fill_diagonal(cross, 0.0)
        h = npairs * (s - est * cross) / denom + est
    else:
        h = npairs * s / denom
    np.fill_diagonal(h, 0.0)
    influence = 2.0 / (n - 1) * h.sum(axis=1) - 2.0 * est
    var = float(np.sum(influence**2) / n**2)
    method, df = "influence", None
    if small_sample:
        if n < 3:
            raise MethodUnavailable("between-ss-unavailable", "small-sample correction needs n >= 3")
        var *= n / (n - 2)
        method, df = "influence_corrected", n - 1
    return DoorEstimate("between", est, var, influence, method, n, df)


def joint_covariance(between_est: DoorEstimate, within_est: DoorEstimate) -> JointCovariance:
    """Covariance matrix (order: between, within) of the scaled estimators.

    The diagonal is ``n * variance`` of each estimate, which equals the mean
    squared influence for the influence-based variance methods; the
    correlation is the empirical correlation of the centred influence values.
    """
    psi_b = np.asarray(between_est.influence, dtype=float)
    psi_w = np.asarray(within_est.influence, dtype=float)
    if psi_b.shape != psi_w.shape:
        raise ValueError(f"influence vectors differ in length ({psi_b.size} vs {psi_w.size})")
    n = psi_b.size
    psi_b = psi_b - psi_b.mean()
    psi_w = psi_w - psi_w.mean()
    sbb = float(np.dot(psi_b, psi_b))
    sww = float(np.dot(psi_w, psi_w))
    if sbb <= 0 or sww <= 0:
        rho = 0.0
    else:
        rho = float(np.clip(np.dot(psi_b, psi_w) / math.sqrt(sbb * sww), -1.0, 1.0))
    vb = n * between_est.variance
    vw = n * within_est.variance
    off = rho * math.sqrt(vb * vw)
    return JointCovariance(np.array([[vb, off], [off, vw]]), rho, n)
