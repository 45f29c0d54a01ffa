"""Tests and confidence intervals built on :class:`DoorEstimate` objects."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import numerics
from .estimators import DoorEstimate, JointCovariance, MethodUnavailable

TWO_SIDED = "two_sided"
ONE_SIDED = "one_sided_greater"
SIDES = (TWO_SIDED, ONE_SIDED)

# Covariance matrices worse conditioned than this are treated as singular.
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class TestResult:
    name: str
    statistic: float
    critical_value: float
    p_value: Optional[float]
    reject: bool
    alpha: float
    sided: str
    calibration: str

    __test__ = False  # keep pytest from collecting this class


@dataclass(frozen=True)
class SimultaneousCI:
    ci_within: tuple
    ci_between: tuple
    joint_level: float


@dataclass(frozen=True)
class HybridEstimate:
    a1: float  # weight on the within-cluster estimate
    a2: float  # weight on the between-cluster estimate
    estimate: float
    variance: float
    clamped: bool = False


def _check(alpha: float, sided: str) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if sided not in SIDES:
        raise ValueError(f"sided must be one of {SIDES}, got {sided!r}")


def _joint_df(*ests: DoorEstimate) -> Optional[int]:
    dfs = [e.df for e in ests if e.df is not None]
    return min(dfs) if dfs else None


def _calibration(df: Optional[int], bivariate: bool = False) -> str:
    if bivariate:
        return "bvn" if df is None else f"bvt({df})"
    return "normal" if df is None else f"t({df})"


def _clamp(lo: float, hi: float) -> tuple:
    return (min(1.0, max(0.0, lo)), min(1.0, max(0.0, hi)))


def _scalar_test(name: str, z: float, df: Optional[int], alpha: float, sided: str) -> TestResult:
    cdf = lambda x: float(numerics.student_t_cdf(x, df))  # noqa: E731
    if sided == TWO_SIDED:
        crit = numerics.student_t_quantile(1.0 - alpha / 2.0, df)
        p = 2.0 * (1.0 - cdf(abs(z)))
        reject = abs(z) > crit
    else:
        crit = numerics.student_t_quantile(1.0 - alpha, df)
        p = 1.0 - cdf(z)
        reject = z > crit
    return TestResult(name, float(z), float(crit), min(1.0, max(0.0, p)), bool(reject),
                      alpha, sided, _calibration(df))


def wald_ci(est: DoorEstimate, alpha: float = 0.05) -> tuple:
    """Two-sided ``1 - alpha`` interval, clamped to [0, 1]."""
    if est.variance < 0:
        raise ValueError("negative variance")
    q = numerics.student_t_quantile(1.0 - alpha / 2.0, est.df)
    half = q * math.sqrt(est.variance)
    return _clamp(est.estimate - half, est.estimate + half)


def test_marginal(est: DoorEstimate, alpha: float = 0.05, sided: str = TWO_SIDED) -> TestResult:
    """Wald test of DOOR probability = 0.5."""
    _check(alpha, sided)
    if not est.variance > 0:
        raise MethodUnavailable("test-unavailable", f"{est.label}: zero estimated variance")
    z = (est.estimate - 0.5) / math.sqrt(est.variance)
    return _scalar_test(est.label, z, est.df, alpha, sided)


def test_variability(between_est: DoorEstimate, within_est: DoorEstimate,
                     cov: JointCovariance, alpha: float = 0.05) -> TestResult:
    """Two-sided Wald test of D_b - D_w = 0 (between-cluster variability)."""
    _check(alpha, TWO_SIDED)
    c = np.array([1.0, -1.0])
    contrast = float(c @ cov.sigma @ c) / cov.n
    if not contrast > 0:
        raise MethodUnavailable("test-unavailable", "degenerate variance of D_b - D_w")
    z = (between_est.estimate - within_est.estimate) / math.sqrt(contrast)
    df = _joint_df(between_est, within_est)
    return _scalar_test(f"variability[{within_est.label},{between_est.label}]", z, df, alpha, TWO_SIDED)


def max_test(between_est: DoorEstimate, within_est: DoorEstimate, cov: JointCovariance,
             alpha: float = 0.05, sided: str = TWO_SIDED) -> tuple[TestResult, SimultaneousCI]:
    """Familywise max-test of D_b = D_w = 0.5 with simultaneous intervals.

    The critical value solves the bivariate normal (or bivariate t when either
    estimate is small-sample calibrated) rectangle equation at the estimated
    correlation of the two statistics.
    """
    _check(alpha, sided)
    if not (between_est.variance > 0 and within_est.variance > 0):
        raise MethodUnavailable("test-unavailable", "max-test needs both variances positive")
    se_b = math.sqrt(between_est.variance)
    se_w = math.sqrt(within_est.variance)
    zb = (between_est.estimate - 0.5) / se_b
    zw = (within_est.estimate - 0.5) / se_w
    df = _joint_df(between_est, within_est)
    two = sided == TWO_SIDED
    c = numerics.max_critical_value(cov.rho, alpha, two, df)
    stat = max(abs(zb), abs(zw)) if two else max(zb, zw)
    p = 1.0 - numerics.symmetric_prob(stat, cov.rho, df, two) if (stat > 0 or not two) else 1.0
    name = f"max[{within_est.label},{between_est.label}]"
    result = TestResult(name, float(stat), float(c), min(1.0, max(0.0, p)), bool(stat > c),
                        alpha, sided, _calibration(df, bivariate=True))
    if two:
        ci_w = _clamp(within_est.estimate - c * se_w, within_est.estimate + c * se_w)
        ci_b = _clamp(between_est.estimate - c * se_b, between_est.estimate + c * se_b)
    else:
        ci_w = _clamp(within_est.estimate - c * se_w, 1.0)
        ci_b = _clamp(between_est.estimate - c * se_b, 1.0)
    return result, SimultaneousCI(ci_w, ci_b, 1.0 - alpha)


def optimal_weights(cov: JointCovariance) -> HybridEstimate:
    """Minimum-variance convex weights (within, between); estimate left at NaN.

    Raises :class:`MethodUnavailable` when the covariance is singular.
    """
    sigma = cov.sigma
    if np.any(np.diag(sigma) <= 0) or np.linalg.cond(sigma) > MAX_CONDITION:
        raise MethodUnavailable("singular-covariance", "covariance of (D_b, D_w) is singular")
    j = np.ones(2)
    sj = np.linalg.solve(sigma, j)
    total = float(j @ sj)
    if np.all(sj >= 0):
        a_b, a_w = sj / total
        return HybridEstimate(float(a_w), float(a_b), math.nan, 1.0 / (cov.n * total))
    # Unconstrained optimum leaves the simplex: use the lower-variance estimator alone.
    if sigma[1, 1] <= sigma[0, 0]:
        return HybridEstimate(1.0, 0.0, math.nan, sigma[1, 1] / cov.n, clamped=True)
    return HybridEstimate(0.0, 1.0, math.nan, sigma[0, 0] / cov.n, clamped=True)


def weighted_test(between_est: DoorEstimate, within_est: DoorEstimate, cov: JointCovariance,
                  alpha: float = 0.05, sided: str = TWO_SIDED
                  ) -> tuple[Optional[HybridEstimate], TestResult]:
    """Test of D_b = D_w = 0.5 using the optimally weighted average of the two estimates.

    Falls back to :func:`max_test` (with a warning) when the covariance is singular,
    in which case the hybrid estimate is ``None``.
    """
    _check(alpha, sided)
    try:
        hy = optimal_weights(cov)
    except MethodUnavailable:
        warnings.warn("singular covariance for the weighted test; falling back to the max-test",
                      RuntimeWarning, stacklevel=2)
        result, _ = max_test(between_est, within_est, cov, alpha, sided)
        return None, result
    est = hy.a1 * within_est.estimate + hy.a2 * between_est.estimate
    hy = HybridEstimate(hy.a1, hy.a2, float(est), hy.variance, hy.clamped)
    z = (est - 0.5) / math.sqrt(hy.variance)
    df = _joint_df(between_est, within_est)
    name = f"weighted[{within_est.label},{between_est.label}]"
    return hy, _scalar_test(name, z, df, alpha, sided)


@dataclass(frozen=True)
class MethodPlan:
    within: Optional[str]  # ivw | ssw_type1 | ssw_type2 | ssw_type3 | None
    between: str  # influence | corrected
    small_sample: bool
    alternatives: tuple = ()
    notes: tuple = field(default=())


# Median cluster size at or above which the plug-in (type2) variance is preferred
# over the corrected influence variance when clusters are few.
LARGE_CLUSTER = 30
SMALL_N = 15


def select_methods(n: int, cluster_sizes: Union[int, Sequence[int]], design: str,
                   small_sample: Optional[bool] = None) -> MethodPlan:
    """Recommended estimators for a trial with ``n`` clusters.

    ``design`` is one of ``one_group``, ``two_group``, ``mixture``.  Fewer than
    15 clusters counts as small unless ``small_sample`` forces the choice.
    """
    if design not in ("one_group", "two_group", "mixture"):
        raise ValueError(f"unknown design {design!r}")
    m = float(np.median(np.atleast_1d(cluster_sizes)))
    small = n < SMALL_N if small_sample is None else bool(small_sample)
    notes = []
    between_kind = "corrected" if small else "influence"
    if small and n < 6:
        notes.append("fewer than 6 clusters: corrected between-cluster inference is unreliable")
    if design == "one_group":
        notes.append("within-cluster DOOR probability not estimable: every cluster is single-arm")
        return MethodPlan(None, between_kind, small, (), tuple(notes))
    if not small:
        return MethodPlan("ssw_type1", between_kind, False, (), tuple(notes))
    if m >= LARGE_CLUSTER:
        return MethodPlan("ssw_type2", between_kind, True, ("ivw", "ssw_type3"), tuple(notes))
    return MethodPlan("ssw_type3", between_kind, True, ("ivw", "ssw_type2"), tuple(notes))
