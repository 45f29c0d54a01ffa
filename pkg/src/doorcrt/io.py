"""CSV trial ingestion/emission and scenario-file loading."""
from __future__ import annotations

import csv
import hashlib
import itertools
from pathlib import Path
from typing import Optional

import yaml

from .kernel import CONTROL, TREATMENT, TrialData, TrialValidationError, validate_trial
from .simulation import (DEFAULT_PROPS, DESIGNS, ORACLE_DRAWS, SimScenario, default_methods,
                         make_model)

CSV_COLUMNS = ("cluster_id", "subject_id", "arm", "door_rank")


class CsvFormatError(TrialValidationError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        ValueError.__init__(self, f"line {line}: {message}" if line is not None else message)
        self.index = None


class ScenarioError(ValueError):
    pass


def file_digest(path) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_trial_csv(path, k_levels: Optional[int] = None) -> TrialData:
    """Read a ``cluster_id,subject_id,arm,door_rank`` CSV into :class:`TrialData`."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise CsvFormatError(f"missing column(s): {', '.join(missing)}", 1)
        records, lines, seen = [], [], {}
        for row in reader:
            line = reader.line_num
            if None in row or any(row[c] is None for c in CSV_COLUMNS):
                raise CsvFormatError("wrong number of fields", line)
            cid, sid = row["cluster_id"].strip(), row["subject_id"].strip()
            if not cid:
                raise CsvFormatError("empty cluster_id", line)
            key = (cid, sid)
            if key in seen:
                raise CsvFormatError(f"duplicate subject {sid!r} in cluster {cid!r} "
                                     f"(first seen on line {seen[key]})", line)
            seen[key] = line
            arm = row["arm"].strip()
            if arm not in ("0", "1"):
                raise CsvFormatError(f"arm must be 0 or 1, got {row['arm']!r}", line)
            rank_text = row["door_rank"].strip()
            try:
                rank = int(rank_text)
            except ValueError:
                raise CsvFormatError(f"door_rank must be a positive integer, got {rank_text!r}",
                                     line) from None
            records.append((cid, int(arm), rank))
            lines.append(line)
    if not records:
        raise CsvFormatError("no data rows")
    try:
        return validate_trial(records, k_levels)
    except TrialValidationError as exc:
        line = lines[exc.index] if exc.index is not None else None
        msg = str(exc).split(": ", 1)[-1] if exc.index is not None else str(exc)
        raise CsvFormatError(msg, line) from None


def write_trial_csv(trial: TrialData, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for c in trial.clusters:
            j = 0
            for arm, ranks in ((TREATMENT, c.ranks_treatment), (CONTROL, c.ranks_control)):
                for r in ranks:
                    j += 1
                    w.writerow((c.id, f"{c.id}-{j}", arm, r))


_GRID_KEYS = ("design", "beta", "rho_c", "sizes")
_KNOWN = {"n", "m", "sizes", "design", "beta", "rho_c", "control_props", "replicates", "seed",
          "alpha", "sided", "methods", "small_sample_mode", "oracle_draws", "name"}


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def scenarios_from_config(cfg: dict, replicates: Optional[int] = None,
                          seed: Optional[int] = None) -> list[SimScenario]:
    """Expand a scenario mapping into the cartesian grid of cells.

    ``design``, ``beta`` and ``rho_c`` may be lists.  Cluster counts and sizes
    are given either as ``n`` and ``m`` (each scalar or list, crossed) or as
    ``sizes: [[n, m], ...]`` pairs.
    """
    if not isinstance(cfg, dict):
        raise ScenarioError("scenario file must contain a mapping")
    unknown = set(cfg) - _KNOWN
    if unknown:
        raise ScenarioError(f"unknown scenario key(s): {', '.join(sorted(unknown))}")
    if "sizes" in cfg:
        sizes = [tuple(int(x) for x in pair) for pair in cfg["sizes"]]
        if any(len(p) != 2 for p in sizes):
            raise ScenarioError("sizes must be a list of [n, m] pairs")
    else:
        if "n" not in cfg or "m" not in cfg:
            raise ScenarioError("scenario needs n and m (or sizes)")
        sizes = [(int(n), int(m)) for n in _as_list(cfg["n"]) for m in _as_list(cfg["m"])]
    designs = _as_list(cfg.get("design", "two_group"))
    for d in designs:
        if d not in DESIGNS:
            raise ScenarioError(f"unknown design {d!r}")
    reps = int(replicates if replicates is not None else cfg.get("replicates", 1000))
    if reps < 1:
        raise ScenarioError("replicates must be >= 1")
    mode = cfg.get("small_sample_mode", "auto")
    if mode not in ("auto", "on", "off"):
        raise ScenarioError("small_sample_mode must be auto, on or off")
    methods = cfg.get("methods", "auto")
    props = tuple(cfg.get("control_props", DEFAULT_PROPS))
    out = []
    for design, beta, rho_c, (n, m) in itertools.product(
        designs, _as_list(cfg.get("beta", 0.1)), _as_list(cfg.get("rho_c", 0.1)), sizes
    ):
        try:
            model = make_model(float(beta), float(rho_c), props)
            meths = (default_methods(design, n, m, mode) if methods == "auto"
                     else tuple(_as_list(methods)))
            out.append(SimScenario(
                n_clusters=n, cluster_size=m, design=design, model=model, replicates=reps,
                seed=int(seed if seed is not None else cfg.get("seed", 20240101)),
                methods=meths, alpha=float(cfg.get("alpha", 0.05)),
                sided=cfg.get("sided", "two_sided"),
                oracle_draws=int(cfg.get("oracle_draws", ORACLE_DRAWS)),
            ))
        except ValueError as exc:
            raise ScenarioError(str(exc)) from None
    return out


def load_scenarios(path, replicates: Optional[int] = None, seed: Optional[int] = None) -> list[SimScenario]:
    """Read a YAML (or JSON) scenario file."""
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ScenarioError(f"cannot parse scenario file: {exc}") from None
    return scenarios_from_config(cfg, replicates, seed)


# Synthetic ten-site example dataset: sites of 34 to 289 subjects
# (1524 total), a six-level DOOR endpoint, both arms at every site.
MINVI_SIZES = (34, 289, 120, 95, 210, 150, 180, 76, 160, 210)
MINVI_PROPS = (0.05, 0.15, 0.25, 0.25, 0.20, 0.10)
MINVI_SEED = 5
MINVI_FILE = "minvi_synthetic.csv"


def make_minvi_synthetic() -> TrialData:
    """Regenerate the shipped synthetic dataset from the latent model."""
    from .simulation import generate_trial

    scenario = SimScenario(
        n_clusters=len(MINVI_SIZES), cluster_size=max(MINVI_SIZES), design="two_group",
        model=make_model(0.2, 0.05, MINVI_PROPS), replicates=1, seed=MINVI_SEED,
        cluster_sizes=MINVI_SIZES,
    )
    return generate_trial(scenario, 0)


def example_path(name: str = MINVI_FILE) -> Path:
    """Filesystem path of a file shipped in the package ``data`` directory."""
    return Path(__file__).resolve().parent / "data" / name
