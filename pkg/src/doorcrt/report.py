"""End-to-end analysis of one trial: estimators, tests and a serialisable report."""
from __future__ import annotations

import csv
import io as _io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence, Union

from . import __version__, inference
from .estimators import DoorEstimate, MethodUnavailable, joint_covariance
from .io import file_digest, read_trial_csv
from .kernel import TrialData, summarize_trial
from .simulation import ESTIMATORS, compute_estimator, parse_method

REPORT_FORMAT = "doorcrt-report/1"
SMALL_SAMPLE_MODES = ("auto", "on", "off")

HINTS = {
    "ivw-unavailable": "some two-arm cluster has zero estimated variance; "
                       "use the sample-size weighted estimator (ssw_type1/2/3)",
    "within-inestimable": "no cluster contains both arms; only the between-cluster "
                          "probability is estimable",
    "type3-unavailable": "too few two-arm clusters for the corrected variance; use ssw_type1 or ssw_type2",
    "t-unavailable": "too few two-arm clusters for t calibration; drop the /ss suffix",
    "between-unavailable": "needs at least two clusters and a treated/control pair across clusters",
    "between-ss-unavailable": "the small-sample correction needs at least three clusters; use 'between'",
    "test-unavailable": "an estimate has zero estimated variance, so its Wald statistic is undefined",
}


@dataclass(frozen=True)
class AnalysisConfig:
    alpha: float = 0.05
    sided: str = inference.TWO_SIDED
    small_sample_mode: str = "auto"
    methods: Union[str, tuple] = "auto"
    k_levels: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.sided not in inference.SIDES:
            raise ValueError(f"sided must be one of {inference.SIDES}")
        if self.small_sample_mode not in SMALL_SAMPLE_MODES:
            raise ValueError(f"small_sample_mode must be one of {SMALL_SAMPLE_MODES}")
        if self.methods != "auto":
            names = tuple(self.methods)
            if not names:
                raise ValueError("methods list is empty")
            for m in names:
                if parse_method(m).within is not None:
                    raise ValueError(f"{m!r}: list estimators only; tests are formed automatically")
            object.__setattr__(self, "methods", names)
        if self.k_levels is not None and self.k_levels < 2:
            raise ValueError("k_levels must be >= 2")


@dataclass(frozen=True)
class EstimateRow:
    method: str
    estimate: float
    se: float
    ci_lower: float
    ci_upper: float
    calibration: str
    n_contributing: int


@dataclass(frozen=True)
class TestRow:
    test: str
    hypothesis: str
    statistic: float
    critical_value: float
    p_value: Optional[float]
    reject: bool
    calibration: str

    __test__ = False


@dataclass(frozen=True)
class SimultaneousRow:
    within: str
    between: str
    within_lower: float
    within_upper: float
    between_lower: float
    between_upper: float
    critical_value: float
    rho: float
    level: float


@dataclass(frozen=True)
class HybridRow:
    within: str
    between: str
    weight_within: float
    weight_between: float
    estimate: float
    se: float
    clamped: bool


@dataclass(frozen=True)
class UnavailableRow:
    method: str
    code: str
    message: str
    hint: str


_ROW_TYPES = {"estimates": EstimateRow, "tests": TestRow, "simultaneous": SimultaneousRow,
              "hybrids": HybridRow, "unavailable": UnavailableRow}


@dataclass(frozen=True)
class AnalysisReport:
    format: str
    provenance: dict
    design: str
    n_clusters: int
    n_subjects: int
    k_levels: int
    estimates: tuple = ()
    tests: tuple = ()
    simultaneous: tuple = ()
    hybrids: tuple = ()
    unavailable: tuple = ()
    notes: tuple = ()

    @property
    def partial(self) -> bool:
        return bool(self.unavailable)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisReport":
        kw = dict(d)
        for key, row in _ROW_TYPES.items():
            kw[key] = tuple(row(**r) for r in d.get(key, ()))
        kw["notes"] = tuple(d.get("notes", ()))
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(json_safe(self.to_dict()), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AnalysisReport":
        return cls.from_dict(_fromjson_safe(json.loads(text)))

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("section", "name", "value", "se", "lower", "upper", "statistic",
                    "critical_value", "p_value", "reject", "calibration"))
        for e in self.estimates:
            w.writerow(("estimate", e.method, _fmt(e.estimate), _fmt(e.se), _fmt(e.ci_lower),
                        _fmt(e.ci_upper), "", "", "", "", e.calibration))
        for s in self.simultaneous:
            tag = f"max[{s.within},{s.between}]"
            w.writerow(("simultaneous", f"{tag}:{s.within}", "", "", _fmt(s.within_lower),
                        _fmt(s.within_upper), "", _fmt(s.critical_value), "", "", ""))
            w.writerow(("simultaneous", f"{tag}:{s.between}", "", "", _fmt(s.between_lower),
                        _fmt(s.between_upper), "", _fmt(s.critical_value), "", "", ""))
        for h in self.hybrids:
            w.writerow(("hybrid", f"weighted[{h.within},{h.between}]", _fmt(h.estimate), _fmt(h.se),
                        "", "", "", "", "", "", ""))
        for t in self.tests:
            w.writerow(("test", t.test, "", "", "", "", _fmt(t.statistic), _fmt(t.critical_value),
                        _fmt(t.p_value), int(t.reject), t.calibration))
        for u in self.unavailable:
            w.writerow(("unavailable", u.method, "", "", "", "", "", "", "", "", u.code))
        return buf.getvalue()

    @property
    def _level(self) -> str:
        alpha = self.provenance.get("config", {}).get("alpha", 0.05)
        return f"{1 - alpha:.0%}"

    def to_table(self) -> str:
        out = [f"DOOR analysis: {self.n_clusters} clusters, {self.n_subjects} subjects, "
               f"{self.k_levels} levels, design {self.design}", ""]
        if self.estimates:
            out.append(f"{'estimator':<16}{'estimate':>10}{'SE':>10}  {self._level + ' CI':<18}{'calibration':>12}")
            for e in self.estimates:
                ci = f"({e.ci_lower:.4f}, {e.ci_upper:.4f})"
                out.append(f"{e.method:<16}{e.estimate:>10.4f}{e.se:>10.4f}  {ci:<18}{e.calibration:>12}")
            out.append("")
        if self.tests:
            out.append(f"{'test':<40}{'H0':<17}{'stat':>8}{'crit':>8}{'p':>8}  decision")
            for t in self.tests:
                p = "" if t.p_value is None else f"{t.p_value:.4f}"
                out.append(f"{t.test:<40}{t.hypothesis:<17}{t.statistic:>8.3f}{t.critical_value:>8.3f}"
                           f"{p:>8}  {'reject' if t.reject else 'retain'}")
            out.append("")
        for s in self.simultaneous:
            out.append(f"simultaneous {s.level:.0%} CIs, max[{s.within},{s.between}] "
                       f"(c = {s.critical_value:.4f}, rho = {s.rho:.3f}):")
            out.append(f"  {s.within:<14}({s.within_lower:.4f}, {s.within_upper:.4f})")
            out.append(f"  {s.between:<14}({s.between_lower:.4f}, {s.between_upper:.4f})")
        for h in self.hybrids:
            out.append(f"weighted[{h.within},{h.between}]: {h.estimate:.4f} (SE {h.se:.4f}), "
                       f"weights {h.weight_within:.3f}/{h.weight_between:.3f}"
                       + (" [clamped]" if h.clamped else ""))
        if self.simultaneous or self.hybrids:
            out.append("")
        for u in self.unavailable:
            out.append(f"unavailable: {u.method} ({u.code}) {u.hint}")
        for n in self.notes:
            out.append(f"note: {n}")
        return "\n".join(out).rstrip() + "\n"

    def render(self, fmt: str) -> str:
        if fmt == "json":
            return self.to_json()
        if fmt == "csv":
            return self.to_csv()
        if fmt == "table":
            return self.to_table()
        raise ValueError(f"unknown format {fmt!r}")


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def json_safe(obj):
    # NaN/inf are not valid JSON; encode them as strings.
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    return obj


def _fromjson_safe(obj):
    if obj in ("nan", "inf", "-inf"):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _fromjson_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_fromjson_safe(v) for v in obj]
    return obj


def classify_design(trial: TrialData) -> str:
    two = sum(c.two_arm for c in trial.clusters)
    if two == 0:
        return "one_group"
    return "two_group" if two == trial.n else "mixture"


def plan_methods(trial: TrialData, config: AnalysisConfig) -> tuple[tuple, tuple, tuple]:
    """Return (within names, between names, notes) for ``config``."""
    if config.methods != "auto":
        names = config.methods
        return (tuple(m for m in names if not m.startswith("between")),
                tuple(m for m in names if m.startswith("between")), ())
    design = classify_design(trial)
    flag = {"auto": None, "on": True, "off": False}[config.small_sample_mode]
    plan = inference.select_methods(trial.n, trial.sizes, design, flag)
    b = "between/ss" if plan.between == "corrected" else "between"
    if plan.within is None:
        within = ()
    elif plan.small_sample:
        chosen = {plan.within, *plan.alternatives}
        within = tuple(m for m in ESTIMATORS if m in chosen)
    else:
        within = (plan.within,)
    return within, (b,), plan.notes


def _unavailable(method: str, exc: MethodUnavailable) -> UnavailableRow:
    msg = str(exc).split(": ", 1)[-1]
    return UnavailableRow(method, exc.code, msg, HINTS.get(exc.code, ""))


def _estimate_row(e: DoorEstimate, alpha: float) -> EstimateRow:
    lo, hi = inference.wald_ci(e, alpha)
    return EstimateRow(e.label, e.estimate, e.se, lo, hi, e.df_mode, e.n_contributing)


def _test_row(r: inference.TestResult, hypothesis: str) -> TestRow:
    return TestRow(r.name, hypothesis, r.statistic, r.critical_value, r.p_value, r.reject, r.calibration)


def analyze(trial: TrialData, config: AnalysisConfig = AnalysisConfig(),
            provenance: Optional[dict] = None) -> AnalysisReport:
    """Run the configured estimators and every within x between test on ``trial``."""
    design = classify_design(trial)
    within_names, between_names, plan_notes = plan_methods(trial, config)
    notes = list(plan_notes)
    unavailable = []
    summaries = summarize_trial(trial)
    fitted: dict = {}
    if design == "one_group" and config.methods == "auto":
        unavailable.append(UnavailableRow(
            "within", "within-inestimable", "every cluster is single-arm", HINTS["within-inestimable"]))

    for name in within_names + between_names:
        try:
            fitted[name] = compute_estimator(name, trial, summaries)
        except MethodUnavailable as exc:
            unavailable.append(_unavailable(name, exc))

    rows, tests = [], []
    for name, e in fitted.items():
        rows.append(_estimate_row(e, config.alpha))
        try:
            tests.append(_test_row(inference.test_marginal(e, config.alpha, config.sided), "D = 0.5"))
        except MethodUnavailable as exc:
            unavailable.append(_unavailable(f"test[{e.label}]", exc))

    sims, hybrids = [], []
    for wn in within_names:
        for bn in between_names:
            if wn not in fitted or bn not in fitted:
                continue
            w, b = fitted[wn], fitted[bn]
            cov = joint_covariance(b, w)
            pair = f"[{w.label},{b.label}]"
            try:
                tests.append(_test_row(inference.test_variability(b, w, cov, config.alpha), "D_b - D_w = 0"))
            except MethodUnavailable as exc:
                unavailable.append(_unavailable(f"variability{pair}", exc))
            try:
                res, sci = inference.max_test(b, w, cov, config.alpha, config.sided)
            except MethodUnavailable as exc:
                unavailable.append(_unavailable(f"max{pair}", exc))
                continue
            tests.append(_test_row(res, "D_w = D_b = 0.5"))
            sims.append(SimultaneousRow(w.label, b.label, *sci.ci_within, *sci.ci_between,
                                        res.critical_value, cov.rho, sci.joint_level))
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                hy, res = inference.weighted_test(b, w, cov, config.alpha, config.sided)
            if hy is None:
                notes.append(f"weighted{pair}: singular covariance, max-test decision reported instead")
            else:
                hybrids.append(HybridRow(w.label, b.label, hy.a1, hy.a2, hy.estimate,
                                         math.sqrt(hy.variance), hy.clamped))
                if hy.clamped:
                    notes.append(f"weighted{pair}: optimal weights left [0, 1]; "
                                 "using the lower-variance estimator alone")
            notes.extend(f"weighted{pair}: {w_.message}" for w_ in caught
                         if "falling back" not in str(w_.message))
            tests.append(_test_row(res, "D_w = D_b = 0.5"))

    prov = {"software": f"doorcrt {__version__}", "config": _config_dict(config)}
    prov.update(provenance or {})
    return AnalysisReport(
        REPORT_FORMAT, prov, design, trial.n, int(sum(trial.sizes)), trial.k_levels,
        tuple(rows), tuple(tests), tuple(sims), tuple(hybrids), tuple(unavailable), tuple(notes),
    )


def _config_dict(config: AnalysisConfig) -> dict:
    d = {f.name: getattr(config, f.name) for f in fields(config)}
    if d["methods"] != "auto":
        d["methods"] = list(d["methods"])
    return d


def analyze_file(path, config: AnalysisConfig = AnalysisConfig()) -> AnalysisReport:
    trial = read_trial_csv(path, config.k_levels)
    return analyze(trial, config, {"input_digest": file_digest(path)})
