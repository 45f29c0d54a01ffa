"""Scalar and bivariate normal / Student-t probabilities.

Scalar CDFs and quantiles delegate to :mod:`scipy.special`.  Bivariate
probabilities use Genz's algorithms: the Drezner-Wesolowsky reduction with
20-point Gauss-Legendre quadrature for the normal (absolute error near
machine precision) and the Dunnett-Sobel finite series for the central
bivariate t with integer degrees of freedom (exact up to rounding).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import optimize, special

_GL_X, _GL_W = np.polynomial.legendre.leggauss(20)
_TWO_PI = 2.0 * math.pi
# |rho| this close to 1 uses the degenerate closed form.
RHO_DEGENERATE = 1e-12


def std_normal_cdf(x):
    return special.ndtr(x)


def std_normal_quantile(p):
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("p must lie in (0, 1)")
    out = special.ndtri(p)
    return float(out) if out.ndim == 0 else out


def _check_df(df):
    if df is None or (isinstance(df, float) and math.isinf(df)):
        return math.inf
    if df < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {df}")
    return df


def student_t_cdf(x, df):
    df = _check_df(df)
    if math.isinf(df):
        return special.ndtr(x)
    return special.stdtr(df, x)


def student_t_quantile(p, df):
    df = _check_df(df)
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("p must lie in (0, 1)")
    out = special.ndtri(p) if math.isinf(df) else special.stdtrit(df, p)
    return float(out) if out.ndim == 0 else out


def _bvn_upper(h: float, k: float, r: float) -> float:
    """P(X > h, Y > k) for standard bivariate normal with correlation r."""
    hk = h * k
    if abs(r) < 0.925:
        hs = (h * h + k * k) / 2.0
        asr = math.asin(r)
        sn = np.sin(asr * (_GL_X + 1.0) / 2.0)
        val = np.dot(_GL_W, np.exp((sn * hk - hs) / (1.0 - sn * sn)))
        return float(val * asr / (2.0 * _TWO_PI) + special.ndtr(-h) * special.ndtr(-k))

    if r < 0:
        k = -k
        hk = -hk
    bvn = 0.0
    if abs(r) < 1:
        a2 = (1.0 - r) * (1.0 + r)
        a = math.sqrt(a2)
        bs = (h - k) ** 2
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 16.0
        bvn = a * math.exp(-(bs / a2 + hk) / 2.0) * (
            1.0 - c * (bs - a2) * (1.0 - d * bs / 5.0) / 3.0 + c * d * a2 * a2 / 5.0
        )
        if hk > -160:
            b = math.sqrt(bs)
            bvn -= (math.exp(-hk / 2.0) * math.sqrt(_TWO_PI) * special.ndtr(-b / a) * b
                    * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0))
        a /= 2.0
        xs = (a * (_GL_X + 1.0)) ** 2
        rs = np.sqrt(1.0 - xs)
        terms = (np.exp(-bs / (2.0 * xs) - hk / (1.0 + rs)) / rs
                 - np.exp(-(bs / xs + hk) / 2.0) * (1.0 + c * xs * (1.0 + d * xs)))
        bvn += a * np.dot(_GL_W, terms)
        bvn = -bvn / _TWO_PI
    if r > 0:
        return float(bvn + special.ndtr(-max(h, k)))
    bvn = -bvn
    if k > h:
        if h < 0:
            bvn += special.ndtr(k) - special.ndtr(h)
        else:
            bvn += special.ndtr(-h) - special.ndtr(-k)
    return float(bvn)


def _bvt_lower(nu: int, dh: float, dk: float, r: float) -> float:
    """P(T1 < dh, T2 < dk) for the central bivariate t with integer ``nu``."""
    ors = 1.0 - r * r
    hrk = dh - r * dk
    krh = dk - r * dh
    if abs(hrk) + ors > 0:
        xnhk = hrk**2 / (hrk**2 + ors * (nu + dk**2))
        xnkh = krh**2 / (krh**2 + ors * (nu + dh**2))
    else:
        xnhk = xnkh = 0.0
    hs = math.copysign(1.0, dh - r * dk)
    ks = math.copysign(1.0, dk - r * dh)
    if nu % 2 == 0:
        bvt = math.atan2(math.sqrt(ors), -r) / _TWO_PI
        gmph = dh / math.sqrt(16.0 * (nu + dh**2))
        gmpk = dk / math.sqrt(16.0 * (nu + dk**2))
        btnckh = 2.0 * math.atan2(math.sqrt(xnkh), math.sqrt(1.0 - xnkh)) / math.pi
        btpdkh = 2.0 * math.sqrt(xnkh * (1.0 - xnkh)) / math.pi
        btnchk = 2.0 * math.atan2(math.sqrt(xnhk), math.sqrt(1.0 - xnhk)) / math.pi
        btpdhk = 2.0 * math.sqrt(xnhk * (1.0 - xnhk)) / math.pi
        for j in range(1, nu // 2 + 1):
            bvt += gmph * (1.0 + ks * btnckh)
            bvt += gmpk * (1.0 + hs * btnchk)
            btnckh += btpdkh
            btpdkh = 2 * j * btpdkh * (1.0 - xnkh) / (2 * j + 1)
            btnchk += btpdhk
            btpdhk = 2 * j * btpdhk * (1.0 - xnhk) / (2 * j + 1)
            gmph = gmph * (2 * j - 1) / (2 * j * (1.0 + dh**2 / nu))
            gmpk = gmpk * (2 * j - 1) / (2 * j * (1.0 + dk**2 / nu))
    else:
        snu = math.sqrt(nu)
        qhrk = math.sqrt(dh**2 + dk**2 - 2.0 * r * dh * dk + nu * ors)
        hkrn = dh * dk + r * nu
        hkn = dh * dk - nu
        hpk = dh + dk
        bvt = math.atan2(-snu * (hkn * qhrk + hpk * hkrn), hkn * hkrn - nu * hpk * qhrk) / _TWO_PI
        if bvt < -1e-15:
            bvt += 1.0
        gmph = dh / (_TWO_PI * snu * (1.0 + dh**2 / nu))
        gmpk = dk / (_TWO_PI * snu * (1.0 + dk**2 / nu))
        btnckh = btpdkh = math.sqrt(xnkh)
        btnchk = btpdhk = math.sqrt(xnhk)
        for j in range(1, (nu - 1) // 2 + 1):
            bvt += gmph * (1.0 + ks * btnckh)
            bvt += gmpk * (1.0 + hs * btnchk)
            btpdkh = (2 * j - 1) * btpdkh * (1.0 - xnkh) / (2 * j)
            btnckh += btpdkh
            btpdhk = (2 * j - 1) * btpdhk * (1.0 - xnhk) / (2 * j)
            btnchk += btpdhk
            gmph = gmph * 2 * j / ((2 * j + 1) * (1.0 + dh**2 / nu))
            gmpk = gmpk * 2 * j / ((2 * j + 1) * (1.0 + dk**2 / nu))
    return bvt


def bivariate_cdf(h: float, k: float, rho: float, df=None) -> float:
    """Lower-orthant probability P(X1 <= h, X2 <= k); ``df=None`` means normal."""
    df = _check_df(df)
    if h == -math.inf or k == -math.inf:
        return 0.0
    if h == math.inf:
        return float(student_t_cdf(k, df))
    if k == math.inf:
        return float(student_t_cdf(h, df))
    if rho >= 1.0 - RHO_DEGENERATE:
        return float(student_t_cdf(min(h, k), df))
    if rho <= -1.0 + RHO_DEGENERATE:
        return float(max(0.0, student_t_cdf(h, df) - student_t_cdf(-k, df)))
    if math.isinf(df):
        p = _bvn_upper(-h, -k, rho)
    else:
        if df != int(df):
            raise ValueError("bivariate t requires integer degrees of freedom")
        p = _bvt_lower(int(df), h, k, rho)
    return min(1.0, max(0.0, p))


@dataclass(frozen=True)
class Rectangle:
    lower: tuple = (-math.inf, -math.inf)
    upper: tuple = (math.inf, math.inf)
    rho: float = 0.0
    df: Optional[float] = None  # None / inf -> bivariate normal

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [-1, 1], got {self.rho}")
        if self.lower[0] > self.upper[0] or self.lower[1] > self.upper[1]:
            raise ValueError("rectangle lower bound exceeds upper bound")


def rect_prob(r: Rectangle) -> float:
    (l1, l2), (u1, u2) = r.lower, r.upper
    f = lambda a, b: bivariate_cdf(a, b, r.rho, r.df)  # noqa: E731
    p = f(u1, u2) - f(l1, u2) - f(u1, l2) + f(l1, l2)
    return min(1.0, max(0.0, p))


def bvn_rect(r: Rectangle) -> float:
    if r.df is not None and not math.isinf(r.df):
        raise ValueError("bvn_rect needs an infinite-df rectangle")
    return rect_prob(r)


def bvt_rect(r: Rectangle) -> float:
    if r.df is None or math.isinf(r.df):
        raise ValueError("bvt_rect needs finite df")
    return rect_prob(r)


def symmetric_prob(c: float, rho: float, df=None, two_sided: bool = True) -> float:
    """P(max statistic <= c): the square [-c, c]^2, or the orthant (-inf, c]^2."""
    lo = -c if two_sided else -math.inf
    return rect_prob(Rectangle((lo, lo), (c, c), rho, df))


def solve_symmetric_critical(prob_fn: Callable[[float], float], target: float,
                             tol: float = 1e-8) -> float:
    """Smallest-bracket root of ``prob_fn(c) = target`` on ``[0, 10]`` (then ``[0, 100]``)."""
    if not 0.0 < target < 1.0:
        raise ValueError("target must lie in (0, 1)")
    g = lambda c: prob_fn(c) - target  # noqa: E731
    lo = 0.0
    for hi in (10.0, 100.0):
        if g(lo) <= 0.0 <= g(hi):
            c = optimize.brentq(g, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)
            if abs(g(c)) > tol:
                c = optimize.bisect(g, lo, hi, xtol=1e-15)
            return float(c)
    raise ValueError(f"target probability {target} not bracketed on [0, 100]")


def max_critical_value(rho: float, alpha: float, two_sided: bool = True, df=None) -> float:
    """Critical value of the two-statistic max test at familywise level ``alpha``."""
    return solve_symmetric_critical(lambda c: symmetric_prob(c, rho, df, two_sided), 1.0 - alpha)
