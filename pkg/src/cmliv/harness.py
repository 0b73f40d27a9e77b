"""Monte Carlo experiments: MSE decomposition tables and CI coverage.

Every replication draws one sample and runs all requested estimators on it,
so comparisons across estimators are paired. Seeds are derived from
``(master_seed, dgp, n, rep)`` alone, which makes each replication
reproducible on its own and independent of scheduling.
"""

from __future__ import annotations

import csv
import io
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from cmliv.core import make_fold_plan
from cmliv.dgp import PRESETS, DgpConfig, draw_sample, estimands, preset
from cmliv.errors import InvalidConfigurationError, WeakIdentificationError
from cmliv.estimators import (
    ESTIMATORS,
    VarianceOptions,
    estimate,
    fit_nuisances,
    ratio_estimate,
)
from cmliv.learners import RegressorSpec, derive_seed

TARGET_KINDS = ("own", "late")
ESTIMAND_SOURCES = ("closed-form", "appendix", "exact")

LearnerLike = Union[str, RegressorSpec]


def _resolve_dgp(d) -> DgpConfig:
    return d if isinstance(d, DgpConfig) else preset(d)


def _dgp_key(cfg: DgpConfig) -> int:
    return zlib.crc32(cfg.name.encode())


def learner_for(learner: LearnerLike, dgp: DgpConfig) -> RegressorSpec:
    """Concrete spec for one DGP; oracle learners are bound to that DGP's truth."""
    if isinstance(learner, RegressorSpec):
        return replace(learner, dgp=dgp) if learner.kind == "oracle" else learner
    if learner == "oracle":
        return RegressorSpec(kind="oracle", dgp=dgp)
    return RegressorSpec(kind=learner)


def learner_label(learner: LearnerLike) -> str:
    if isinstance(learner, RegressorSpec):
        return learner.label
    return RegressorSpec(kind=learner).label if learner != "oracle" else "oracle"


@dataclass(frozen=True)
class ExperimentConfig:
    """A grid of (DGP, sample size) cells, each replicated ``reps`` times.

    ``dgps`` holds preset names or :class:`DgpConfig` objects and ``learners``
    holds learner kinds or :class:`RegressorSpec` objects. ``trim`` drops
    weakly identified replications from the summaries (and counts them);
    with ``trim=False`` the bare ratio is kept whenever it is finite.
    ``estimand_source`` picks which estimand evaluation supplies the targets.
    """

    dgps: tuple = ("dgp1",)
    sample_sizes: tuple = (500,)
    reps: int = 100
    folds: int = 4
    learners: tuple = ("random-forest",)
    estimators: tuple = ESTIMATORS
    master_seed: int = 0
    targets: tuple = TARGET_KINDS
    trim: bool = True
    estimand_source: str = "closed-form"
    workers: int = 1
    variance: VarianceOptions = field(default_factory=VarianceOptions)

    def __post_init__(self):
        for name in ("dgps", "sample_sizes", "learners", "estimators", "targets"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.reps < 2:
            raise InvalidConfigurationError("reps must be at least 2")
        if self.folds < 2:
            raise InvalidConfigurationError("folds must be at least 2")
        if self.workers < 1:
            raise InvalidConfigurationError("workers must be at least 1")
        if not (self.dgps and self.sample_sizes and self.learners and self.estimators
                and self.targets):
            raise InvalidConfigurationError("dgps, sample sizes, learners, estimators and "
                                            "targets must all be non-empty")
        for d in self.dgps:
            if not isinstance(d, DgpConfig) and d not in PRESETS:
                raise InvalidConfigurationError(f"unknown DGP preset {d!r}")
        for n in self.sample_sizes:
            if int(n) < self.folds:
                raise InvalidConfigurationError(f"sample size {n} is smaller than the fold count")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise InvalidConfigurationError(f"unknown estimator {e!r}")
        for t in self.targets:
            if t not in TARGET_KINDS:
                raise InvalidConfigurationError(f"unknown target kind {t!r}")
        for lr in self.learners:
            if not isinstance(lr, RegressorSpec):
                learner_label(lr)
        if self.estimand_source not in ESTIMAND_SOURCES:
            raise InvalidConfigurationError(f"unknown estimand source {self.estimand_source!r}")

    def dgp_configs(self) -> list[DgpConfig]:
        return [_resolve_dgp(d) for d in self.dgps]


@dataclass(frozen=True)
class RepRecord:
    """One estimator on one replication. ``theta`` is NaN when ``failed``."""

    dgp: str
    n: int
    rep: int
    learner: str
    estimator: str
    theta: float
    std_error: float
    denominator: float
    theta_raw: float
    failed: bool


@dataclass(frozen=True)
class McRow:
    dgp: str
    n: int
    estimator: str
    learner: str
    target: str
    target_value: float
    mse: float
    bias_sq: float
    variance: float
    rep_count: int
    failure_count: int


@dataclass
class McResultTable:
    rows: list
    records: list = field(default_factory=list)

    def row(self, dgp, n, estimator, learner, target="own") -> McRow:
        for r in self.rows:
            if (r.dgp, r.n, r.estimator, r.learner, r.target) == (dgp, n, estimator, learner, target):
                return r
        raise KeyError((dgp, n, estimator, learner, target))


# ---------------------------------------------------------------------------
# replication engine

def _one_rep(task):
    cfg, dgp, n, r = task

    base = (cfg.master_seed, _dgp_key(dgp), n, r)
    ds = draw_sample(dgp, n, derive_seed(*base, 0))
    plan = make_fold_plan(n, cfg.folds, derive_seed(*base, 1))
    out = []
    for li, lr in enumerate(cfg.learners):
        spec = learner_for(lr, dgp).with_seed(derive_seed(*base, 2, li))
        nf = fit_nuisances(ds, plan, spec, cfg.estimators)
        for e in cfg.estimators:
            raw = ratio_estimate(ds, nf, e)
            try:
                rep = estimate(ds, nf, e, cfg.variance)
                out.append(RepRecord(dgp.name, n, r, spec.label, e, rep.theta, rep.std_error,
                                     rep.denominator, raw, False))
            except WeakIdentificationError as err:
                out.append(RepRecord(dgp.name, n, r, spec.label, e, math.nan, math.nan,
                                     float(err.denominator), raw, True))
    return out


def simulate_records(cfg: ExperimentConfig) -> list[RepRecord]:
    """Run every replication of every cell and return the raw records."""
    tasks = [(cfg, dgp, int(n), r) for dgp in cfg.dgp_configs()
             for n in cfg.sample_sizes for r in range(cfg.reps)]
    if cfg.workers == 1:
        chunks = [_one_rep(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(_one_rep, tasks, chunksize=max(1, len(tasks) // (8 * cfg.workers))))
    return [rec for chunk in chunks for rec in chunk]


def decompose(estimates, target: float):
    """Population-style ``(mse, bias_sq, variance)`` of estimates around ``target``."""
    x = np.asarray(estimates, dtype=float)
    if x.size == 0 or target is None or not math.isfinite(target):
        return math.nan, math.nan, math.nan
    mean = x.mean()
    return float(np.mean((x - target) ** 2)), float((mean - target) ** 2), float(np.mean((x - mean) ** 2))


def _targets(cfg: ExperimentConfig) -> dict:
    out = {}
    for dgp in cfg.dgp_configs():
        est = estimands(dgp, cfg.estimand_source)
        for e in cfg.estimators:
            for t in cfg.targets:
                v = est.target(e, t)
                out[(dgp.name, e, t)] = math.nan if v is None else float(v)
    return out


def _sort_key(row: McRow):
    return (row.dgp, row.n, ESTIMATORS.index(row.estimator) if row.estimator in ESTIMATORS else 99,
            row.estimator, row.learner, row.target)


def table_from_records(cfg: ExperimentConfig, records: Sequence[RepRecord]) -> McResultTable:
    targets = _targets(cfg)
    groups: dict = {}
    for rec in records:
        groups.setdefault((rec.dgp, rec.n, rec.estimator, rec.learner), []).append(rec)
    rows = []
    for (dgp, n, e, lr), recs in groups.items():
        if cfg.trim:
            values = [r.theta for r in recs if not r.failed]
        else:
            values = [r.theta_raw for r in recs if math.isfinite(r.theta_raw)]
        for t in cfg.targets:
            tv = targets[(dgp, e, t)]
            mse, b2, var = decompose(values, tv)
            rows.append(McRow(dgp, n, e, lr, t, tv, mse, b2, var, len(values),
                              len(recs) - len(values)))
    rows.sort(key=_sort_key)
    return McResultTable(rows=rows, records=list(records))


def run_experiment(cfg: ExperimentConfig) -> McResultTable:
    """MSE, squared bias and variance for every (dgp, n, estimator, learner, target)."""
    return table_from_records(cfg, simulate_records(cfg))


# ---------------------------------------------------------------------------
# coverage

@dataclass(frozen=True)
class CoverageRow:
    dgp: str
    n: int
    estimator: str
    learner: str
    target_value: float
    nominal: float
    coverage: float
    rep_count: int
    failure_count: int


def _critical(nominal: float) -> float:
    if not 0.0 <= nominal < 1.0:
        raise InvalidConfigurationError("nominal level must lie in [0, 1)")
    return VarianceOptions(level=nominal).critical_value


def coverage_from_records(cfg: ExperimentConfig, records: Sequence[RepRecord],
                          nominal: float = 0.95) -> list[CoverageRow]:
    """Share of non-failed replications whose interval contains the own target."""
    z = _critical(nominal)
    targets = _targets(replace(cfg, targets=("own",)))
    groups: dict = {}
    for rec in records:
        groups.setdefault((rec.dgp, rec.n, rec.estimator, rec.learner), []).append(rec)
    rows = []
    for (dgp, n, e, lr), recs in sorted(groups.items()):
        tv = targets[(dgp, e, "own")]
        ok = [r for r in recs if not r.failed]
        if ok and math.isfinite(tv):
            hits = sum(abs(r.theta - tv) <= z * r.std_error for r in ok)
            cov = hits / len(ok)
        else:
            cov = math.nan
        rows.append(CoverageRow(dgp, n, e, lr, tv, nominal, cov, len(ok), len(recs) - len(ok)))
    return rows


def coverage_experiment(cfg: ExperimentConfig, nominal: float = 0.95) -> list[CoverageRow]:
    _critical(nominal)
    return coverage_from_records(cfg, simulate_records(cfg), nominal)


# ---------------------------------------------------------------------------
# table output

COLUMNS = ("dgp", "n", "estimator", "learner", "target", "target_value", "mse", "bias_sq",
           "variance", "rep_count", "failure_count")
_FLOATS = ("target_value", "mse", "bias_sq", "variance")
_INTS = ("n", "rep_count", "failure_count")


def _fmt(value, digits: Optional[int]) -> str:
    if isinstance(value, float):
        return repr(value) if digits is None else f"{value:.{digits}g}"
    return str(value)


def emit_table(tbl: McResultTable, fmt: str = "csv") -> str:
    """Render as ``csv`` (lossless floats) or ``markdown`` (6 significant digits)."""
    rows = sorted(tbl.rows, key=_sort_key)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(getattr(r, c), None) for c in COLUMNS])
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
        for r in rows:
            lines.append("| " + " | ".join(_fmt(getattr(r, c), 6) for c in COLUMNS) + " |")
        return "\n".join(lines) + "\n"
    raise InvalidConfigurationError(f"unknown table format {fmt!r}")


def _row_from_strings(cells) -> McRow:
    vals = dict(zip(COLUMNS, cells))
    for c in _FLOATS:
        vals[c] = float(vals[c])
    for c in _INTS:
        vals[c] = int(vals[c])
    return McRow(**vals)


def read_table(text: str) -> McResultTable:
    """Parse output of :func:`emit_table` in either format."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        return McResultTable(rows=[])
    if lines[0].startswith("|"):
        rows = [_row_from_strings([c.strip() for c in ln.strip().strip("|").split("|")])
                for ln in lines[2:]]
    else:
        reader = csv.reader(lines)
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise InvalidConfigurationError("unexpected table header")
        rows = [_row_from_strings(cells) for cells in reader]
    return McResultTable(rows=rows)


def format_coverage(rows: Sequence[CoverageRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("dgp", "n", "estimator", "learner", "target_value", "nominal", "coverage",
                "rep_count", "failure_count"))
    for r in rows:
        w.writerow([r.dgp, r.n, r.estimator, r.learner, repr(r.target_value), r.nominal,
                    repr(r.coverage), r.rep_count, r.failure_count])
    return buf.getvalue()


def lag1_autocorrelation(values) -> float:
    x = np.asarray(values, dtype=float)
    x = x - x.mean()
    den = float(np.sum(x * x))
    return float(np.sum(x[1:] * x[:-1]) / den) if den > 0 else 0.0

