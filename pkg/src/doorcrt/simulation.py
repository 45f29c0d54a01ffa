"""Latent random-effects generator, true-value oracle and replication driver.

Outcomes follow ``X = beta * A + alpha_i + delta_ij`` with cluster intercepts
``alpha_i ~ N(0, rho_c / (1 - rho_c))`` and unit-variance subject errors, so
that the within-cluster latent correlation is ``rho_c``.  Larger ``X`` is a
more desirable outcome: DOOR rank 1 is the top ``control_props[0]`` of the
control latent distribution, rank 2 the next ``control_props[1]``, and so on.
A positive ``beta`` therefore favours treatment.

Every replicate draws from its own generator seeded by ``(seed, replicate)``,
so results do not depend on execution order or worker count.
"""
from __future__ import annotations

import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import special

from . import estimators as est_mod
from . import inference, numerics
from .estimators import DoorEstimate, MethodUnavailable
from .kernel import Cluster, TrialData, summarize_trial

DEFAULT_PROPS = (0.10, 0.20, 0.30, 0.25, 0.15)
DESIGNS = ("one_group", "two_group", "mixture")
ORACLE_DRAWS = 20_000_000


@dataclass(frozen=True)
class LatentModel:
    beta: float
    rho_c: float
    control_props: tuple
    cutpoints: tuple

    @property
    def sigma_alpha_sq(self) -> float:
        return self.rho_c / (1.0 - self.rho_c)

    @property
    def sigma_delta_sq(self) -> float:
        return 1.0

    @property
    def k_levels(self) -> int:
        return len(self.control_props)

    def ranks(self, latent: np.ndarray) -> np.ndarray:
        # rank = 1 + #{cutpoints below -X}
        return 1 + np.searchsorted(self.cutpoints, -latent, side="left")


def make_model(beta: float = 0.1, rho_c: float = 0.1,
               control_props: Sequence[float] = DEFAULT_PROPS) -> LatentModel:
    if not 0.0 <= rho_c < 1.0:
        raise ValueError(f"rho_c must lie in [0, 1), got {rho_c}")
    props = np.asarray(control_props, dtype=float)
    if props.ndim != 1 or props.size < 2 or np.any(props <= 0) or abs(props.sum() - 1.0) > 1e-9:
        raise ValueError("control_props must be >= 2 positive proportions summing to 1")
    scale = math.sqrt(rho_c / (1.0 - rho_c) + 1.0)
    cuts = special.ndtri(np.cumsum(props)[:-1]) * scale
    return LatentModel(float(beta), float(rho_c), tuple(float(p) for p in props),
                       tuple(float(c) for c in cuts))


def assign_arms(design: str, n: int, m, rng: np.random.Generator) -> list[np.ndarray]:
    """Per-cluster arm labels (1 treatment, 0 control).

    ``m`` is a common cluster size or a sequence of ``n`` sizes.
    """
    sizes = [int(m)] * n if np.isscalar(m) else [int(x) for x in m]
    if len(sizes) != n:
        raise ValueError(f"got {len(sizes)} cluster sizes for {n} clusters")
    if design == "one_group":
        kinds = np.array([1] * (n // 2) + [0] * (n // 2) + list(rng.integers(0, 2, n % 2)))
        rng.shuffle(kinds)
        kinds = ["T" if k else "C" for k in kinds]
    elif design == "two_group":
        kinds = ["S"] * n
    elif design == "mixture":
        q = n // 4
        kinds = np.array(["T"] * q + ["C"] * q + ["S"] * (n - 2 * q))
        rng.shuffle(kinds)
    else:
        raise ValueError(f"unknown design {design!r}; expected one of {DESIGNS}")
    arms = []
    for kind, size in zip(kinds, sizes):
        if kind == "T":
            arms.append(np.ones(size, dtype=int))
        elif kind == "C":
            arms.append(np.zeros(size, dtype=int))
        else:
            a = np.zeros(size, dtype=int)
            a[: size // 2] = 1
            rng.shuffle(a)
            arms.append(a)
    return arms


@dataclass(frozen=True)
class SimScenario:
    n_clusters: int
    cluster_size: int
    design: str
    model: LatentModel
    replicates: int = 1000
    seed: int = 20240101
    methods: tuple = ()
    alpha: float = 0.05
    sided: str = inference.TWO_SIDED
    cluster_sizes: Optional[tuple] = None
    oracle_draws: int = ORACLE_DRAWS

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be >= 2")
        if self.cluster_size < 1:
            raise ValueError("cluster_size must be >= 1")
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        for m in self.methods:
            parse_method(m)

    @property
    def sizes(self):
        return self.cluster_sizes if self.cluster_sizes is not None else self.cluster_size

    def resolved_methods(self) -> tuple:
        return self.methods or default_methods(self.design, self.n_clusters, self.cluster_size)


def replicate_rng(seed: int, replicate_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate_index)]))


def generate_trial(scenario: SimScenario, replicate_index: int) -> TrialData:
    rng = replicate_rng(scenario.seed, replicate_index)
    model = scenario.model
    arms = assign_arms(scenario.design, scenario.n_clusters, scenario.sizes, rng)
    intercepts = rng.normal(0.0, math.sqrt(model.sigma_alpha_sq), scenario.n_clusters)
    clusters = []
    for i, (a, icpt) in enumerate(zip(arms, intercepts)):
        x = model.beta * a + icpt + rng.standard_normal(a.size)
        r = model.ranks(x)
        clusters.append(Cluster(f"c{i + 1}", tuple(r[a == 1].tolist()), tuple(r[a == 0].tolist())))
    return TrialData(tuple(clusters), model.k_levels)


@dataclass(frozen=True)
class OracleValue:
    value: float
    mcse: float
    draws: int


def true_door_oracle(model: LatentModel, context: str = "within", draws: int = ORACLE_DRAWS,
                     seed: int = 0, chunk: int = 2_000_000) -> OracleValue:
    """Monte Carlo DOOR probability for a treated/control pair.

    ``within``: the pair shares a cluster intercept.  ``between``: intercepts
    are independent.
    """
    if context not in ("within", "between"):
        raise ValueError("context must be 'within' or 'between'")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0 if context == "within" else 1]))
    sa = math.sqrt(model.sigma_alpha_sq)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < draws:
        size = min(chunk, draws - done)
        a_t = rng.standard_normal(size) * sa
        a_c = a_t if context == "within" else rng.standard_normal(size) * sa
        y_t = model.ranks(model.beta + a_t + rng.standard_normal(size))
        y_c = model.ranks(a_c + rng.standard_normal(size))
        phi = (y_t < y_c) + 0.5 * (y_t == y_c)
        total += phi.sum()
        total_sq += np.dot(phi, phi)
        done += size
    mean = total / draws
    var = max(total_sq / draws - mean**2, 0.0)
    return OracleValue(float(mean), float(math.sqrt(var / draws)), int(draws))


@lru_cache(maxsize=64)
def _cached_truth(model: LatentModel, draws: int) -> tuple[float, float]:
    return (true_door_oracle(model, "within", draws).value,
            true_door_oracle(model, "between", draws).value)


# --- method specifications -------------------------------------------------

ESTIMATORS = ("ivw", "ssw_type1", "ssw_type2", "ssw_type3", "between")
TESTS = ("max", "weighted", "variability")
_METHOD_RE = re.compile(r"^(\w+)\(\s*([\w/]+)\s*,\s*([\w/]+)\s*\)$")


@dataclass(frozen=True)
class MethodSpec:
    text: str
    kind: str  # estimator name or test name
    within: Optional[str] = None
    between: Optional[str] = None


def _check_estimator(name: str, text: str) -> None:
    base, _, flag = name.partition("/")
    if base not in ESTIMATORS or flag not in ("", "ss") or (base == "ivw" and flag):
        raise ValueError(f"unknown estimator {name!r} in method {text!r}")


def parse_method(text: str) -> MethodSpec:
    """Parse ``ssw_type2/ss`` or ``max(ssw_type1, between)`` style method strings.

    A ``/ss`` suffix requests small-sample calibration.
    """
    text = text.strip()
    m = _METHOD_RE.match(text)
    if m:
        kind, w, b = m.groups()
        if kind not in TESTS:
            raise ValueError(f"unknown test {kind!r} in method {text!r}")
        _check_estimator(w, text)
        _check_estimator(b, text)
        if w.startswith("between") or not b.startswith("between"):
            raise ValueError(f"{text!r}: expected (within estimator, between estimator)")
        return MethodSpec(text, kind, w, b)
    _check_estimator(text, text)
    return MethodSpec(text, text)


def default_methods(design: str, n: int, m, small_sample_mode: str = "auto") -> tuple:
    flag = {"auto": None, "on": True, "off": False}[small_sample_mode]
    plan = inference.select_methods(n, m, design, flag)
    b = "between/ss" if plan.between == "corrected" else "between"
    if plan.within is None:
        return (b,)
    w = plan.within
    return (w, b, f"max({w},{b})", f"weighted({w},{b})")


def compute_estimator(name: str, trial: TrialData, summaries=None) -> DoorEstimate:
    base, _, flag = name.partition("/")
    ss = flag == "ss"
    if base == "between":
        return est_mod.between(trial, small_sample=ss)
    summaries = summaries if summaries is not None else summarize_trial(trial)
    if base == "ivw":
        return est_mod.within_ivw(summaries)
    return est_mod.within_ssw(summaries, base.split("_")[1], small_sample=ss)


# Per-replicate record layout.
_FIELDS = ("available", "estimate", "se", "covered", "reject")


def _evaluate(specs: Sequence[MethodSpec], trial: TrialData, truth: tuple,
              alpha: float, sided: str) -> np.ndarray:
    d_w, d_b = truth
    out = np.full((len(specs), len(_FIELDS)), np.nan)
    out[:, 0] = 0.0
    summaries = summarize_trial(trial)
    cache: dict = {}

    def get(name):
        if name not in cache:
            try:
                cache[name] = compute_estimator(name, trial, summaries)
            except MethodUnavailable as exc:
                cache[name] = exc
        if isinstance(cache[name], Exception):
            raise cache[name]
        return cache[name]

    for row, spec in enumerate(specs):
        try:
            if spec.within is None:
                e = get(spec.kind)
                target = d_b if spec.kind.startswith("between") else d_w
                lo, hi = inference.wald_ci(e, 0.05)
                res = inference.test_marginal(e, alpha, sided)
                out[row] = (1.0, e.estimate, e.se, lo <= target <= hi, res.reject)
                continue
            w, b = get(spec.within), get(spec.between)
            cov = est_mod.joint_covariance(b, w)
            if spec.kind == "max":
                res, sci = inference.max_test(b, w, cov, alpha, sided)
                covered = (sci.ci_within[0] <= d_w <= sci.ci_within[1]
                           and sci.ci_between[0] <= d_b <= sci.ci_between[1])
                out[row] = (1.0, res.statistic, np.nan, covered, res.reject)
            elif spec.kind == "weighted":
                hy, res = inference.weighted_test(b, w, cov, alpha, sided)
                if hy is None:
                    out[row] = (1.0, np.nan, np.nan, np.nan, res.reject)
                else:
                    out[row] = (1.0, hy.estimate, math.sqrt(hy.variance), np.nan, res.reject)
            else:
                res = inference.test_variability(b, w, cov, alpha)
                diff = b.estimate - w.estimate
                se = math.sqrt(cov.sigma[0, 0] + cov.sigma[1, 1] - 2 * cov.sigma[0, 1]) / math.sqrt(cov.n)
                df = min((e.df for e in (b, w) if e.df is not None), default=None)
                q = float(numerics.student_t_quantile(0.975, df))
                out[row] = (1.0, diff, se, abs(diff - (d_b - d_w)) <= q * se, res.reject)
        except MethodUnavailable:
            pass
    return out


def _run_chunk(args) -> np.ndarray:
    scenario, indices, truth = args
    specs = [parse_method(m) for m in scenario.resolved_methods()]
    return np.stack([
        _evaluate(specs, generate_trial(scenario, i), truth, scenario.alpha, scenario.sided)
        for i in indices
    ])


@dataclass(frozen=True)
class MethodOC:
    method: str
    truth: float
    replicates: int
    availability: float
    mean_estimate: float
    bias: float
    bias_mcse: float
    sd: float
    mean_se: float
    mean_se_mcse: float
    coverage_95: float
    coverage_mcse: float
    rejection_rate: float
    rejection_mcse: float


@dataclass(frozen=True)
class OperatingCharacteristics:
    scenario: SimScenario
    truth_within: float
    truth_between: float
    methods: tuple = field(default=())

    def by_method(self) -> dict:
        return {m.method: m for m in self.methods}


def _summarise(spec: MethodSpec, rec: np.ndarray, truth: tuple) -> MethodOC:
    d_w, d_b = truth
    reps = rec.shape[0]
    ok = rec[:, 0] == 1.0
    n_ok = int(ok.sum())
    nan = math.nan
    if spec.within is None:
        target = d_b if spec.kind.startswith("between") else d_w
    elif spec.kind == "variability":
        target = d_b - d_w
    else:
        target = nan

    def mean_mcse(x):
        x = x[~np.isnan(x)]
        if x.size == 0:
            return nan, nan, nan
        sd = float(x.std(ddof=1)) if x.size > 1 else nan
        return float(x.mean()), sd / math.sqrt(x.size) if x.size > 1 else nan, sd

    def rate(x):
        x = x[~np.isnan(x)]
        if x.size == 0:
            return nan, nan
        p = float(x.mean())
        return p, math.sqrt(p * (1 - p) / x.size)

    sub = rec[ok]
    est_mean, est_mcse, est_sd = mean_mcse(sub[:, 1])
    se_mean, se_mcse, _ = mean_mcse(sub[:, 2])
    cov, cov_se = rate(sub[:, 3])
    rej, rej_se = rate(sub[:, 4])
    is_stat = spec.kind == "max"
    return MethodOC(
        method=spec.text, truth=target, replicates=reps, availability=n_ok / reps,
        mean_estimate=nan if is_stat else est_mean,
        bias=est_mean - target if not math.isnan(target) else nan,
        bias_mcse=nan if is_stat else est_mcse, sd=nan if is_stat else est_sd,
        mean_se=se_mean, mean_se_mcse=se_mcse,
        coverage_95=cov, coverage_mcse=cov_se, rejection_rate=rej, rejection_mcse=rej_se,
    )


def scenario_truth(scenario: SimScenario) -> tuple[float, float]:
    return _cached_truth(scenario.model, int(scenario.oracle_draws))


def run_scenario(scenario: SimScenario, workers: int = 1, chunk_size: int = 250,
                 return_records: bool = False):
    """Replicate ``scenario`` and aggregate operating characteristics per method."""
    specs = [parse_method(m) for m in scenario.resolved_methods()]
    if scenario.design == "one_group" and any(not s.kind.startswith("between") for s in specs):
        raise ValueError("within-cluster methods are not estimable under one_group randomisation")
    truth = scenario_truth(scenario)
    idx = np.arange(scenario.replicates)
    chunks = [(scenario, idx[i:i + chunk_size], truth) for i in range(0, idx.size, chunk_size)]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, chunks))
    else:
        parts = [_run_chunk(c) for c in chunks]
    records = np.concatenate(parts, axis=0)
    oc = OperatingCharacteristics(
        scenario, truth[0], truth[1],
        tuple(_summarise(s, records[:, j], truth) for j, s in enumerate(specs)),
    )
    return (oc, records) if return_records else oc


def with_model(scenario: SimScenario, **model_kwargs) -> SimScenario:
    m = scenario.model
    kw = dict(beta=m.beta, rho_c=m.rho_c, control_props=m.control_props)
    kw.update(model_kwargs)
    return replace(scenario, model=make_model(**kw))
