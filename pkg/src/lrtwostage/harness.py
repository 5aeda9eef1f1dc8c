"""Simulation study and Monte Carlo cross-validation drivers.

Every replication (or MCCV repetition) derives its random streams from the
base seed and its own index, so results do not depend on how work is spread
over worker processes. Aggregation always runs in index order.
"""
from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .bart import BartHyper, fit_bart, predict_posterior
from .data import Outcome, TrialDataset
from .dgp import DgpScenario, gen_trial, oracle_estimand
from .gbm import Loss, fit_gbm, predict_gbm, tune_cv
from .glm import Link
from .twostage import (
    SplitSpec,
    SubgroupingRule,
    classify_posterior_mean,
    corrected_estimate,
    naive_estimate,
    split_indices,
    subgroup_from_scores,
)

EXCLUSION_FLAG = 0.20
MCCV_FAILURE_LIMIT = 0.50


class Method(str, enum.Enum):
    NAIVE_GBM = "naive_gbm"
    NAIVE_BART = "naive_bart"
    CORRECTED_BART = "corrected_bart"


def derive_seed(*keys: int) -> int:
    """A 32-bit seed determined by ``keys`` alone."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def link_for(outcome: Outcome) -> Link:
    return Link.LOGIT if Outcome(outcome) is Outcome.BINARY else Link.IDENTITY


def mcse_coverage(p_hat: float, R: int) -> float:
    """Monte Carlo standard error of a coverage proportion."""
    if not 0.0 <= p_hat <= 1.0:
        raise ValueError("p_hat must lie in [0, 1]")
    if R < 1:
        raise ValueError("R must be >= 1")
    return math.sqrt(p_hat * (1.0 - p_hat) / R)


# ---------------------------------------------------------------- Stage 1


def stage1_scores(method: Method, design: TrialDataset, X_eval: np.ndarray,
                  bart_hyper: BartHyper, seed: int, gbm_folds: int = 5):
    """Prognostic scores for the evaluation rows.

    Returns a point vector for GBM and a K x n draw matrix for BART.
    """
    if method is Method.NAIVE_GBM:
        loss = Loss.LOGISTIC if design.outcome is Outcome.BINARY else Loss.SQUARED
        hyper = tune_cv(design.X, design.y, loss, folds=gbm_folds, seed=seed)
        return predict_gbm(fit_gbm(design.X, design.y, hyper, seed=seed), X_eval)
    chain = fit_bart(design.X, design.y, design.outcome, bart_hyper, seed=seed)
    return predict_posterior(chain, X_eval).values


def _estimate(method: Method, scores, rule, eval_data, link, Z=None):
    """``({label: (delta, se, ci_low, ci_high)}, {label: error})`` for one method."""
    if method is Method.CORRECTED_BART:
        try:
            res = corrected_estimate(scores, rule, eval_data, link, Z)
        except ValueError as exc:
            return {}, {lb: str(exc) for lb in rule.labels}
    else:
        point = scores if scores.ndim == 1 else scores.mean(axis=0)
        res = naive_estimate(point, rule, eval_data, link, Z, errors="skip")
    est = {lb: (e.delta, e.se, e.ci_low, e.ci_high) for lb, e in res.items()}
    return est, dict(res.failures)


# ---------------------------------------------------------------- simulation


@dataclass(frozen=True)
class SimConfig:
    scenario: DgpScenario
    n_total: int = 500
    R: int = 100
    methods: tuple = (Method.NAIVE_BART, Method.CORRECTED_BART)
    rule: Optional[SubgroupingRule] = None
    design_fraction: float = 0.5
    base_seed: int = 0
    bart: BartHyper = BartHyper()
    n_mc: int = 1_000_000
    oracle_seed: int = 0
    gbm_folds: int = 5

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        if self.rule is None:
            object.__setattr__(self, "rule", self.scenario.default_rule())
        if self.R < 2:
            raise ValueError("R must be >= 2")
        if self.n_total < 100:
            raise ValueError("n_total must be >= 100")
        if not self.methods:
            raise ValueError("no methods selected")
        SplitSpec(self.design_fraction)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario.to_dict(), "n_total": self.n_total, "R": self.R,
                "methods": [m.value for m in self.methods], "rule": self.rule.to_dict(),
                "design_fraction": self.design_fraction, "base_seed": self.base_seed,
                "bart": asdict(self.bart), "n_mc": self.n_mc, "oracle_seed": self.oracle_seed,
                "gbm_folds": self.gbm_folds}


@dataclass
class Replicate:
    r: int
    seed: int
    n_design: int
    n_eval: int
    estimates: dict  # method -> {label: (delta, se, lo, hi)}
    failures: dict  # method -> {label: message}


def run_replication(config: SimConfig, r: int) -> Replicate:
    seed = config.base_seed + r
    data = gen_trial(config.scenario, config.n_total, seed)
    design_idx, eval_idx = split_indices(
        data.t, SplitSpec(config.design_fraction, derive_seed(seed, 1)))
    design, evaluation = data.subset(design_idx), data.subset(eval_idx)
    link = link_for(config.scenario.outcome)
    est, fails = {}, {}
    bart_scores = None
    for method in config.methods:
        if method is Method.NAIVE_GBM:
            scores = stage1_scores(method, design, evaluation.X, config.bart,
                                   derive_seed(seed, 3), config.gbm_folds)
        else:
            if bart_scores is None:
                bart_scores = stage1_scores(method, design, evaluation.X, config.bart,
                                            derive_seed(seed, 2))
            scores = bart_scores
        est[method.value], fails[method.value] = _estimate(method, scores, config.rule,
                                                           evaluation, link)
    return Replicate(r, seed, design.n, evaluation.n, est, fails)


@dataclass
class MetricsRow:
    method: str
    label: str
    truth: float
    bias: float
    var: float
    mse: float
    mean_se: float
    coverage: float
    mcse_coverage: float
    mcse_bias: float
    n_used: int
    n_excluded: int

    @property
    def flagged(self) -> bool:
        return self.n_excluded > EXCLUSION_FLAG * (self.n_used + self.n_excluded)


def summarize(method: str, label: str, truth: float, deltas, ses, n_excluded: int) -> MetricsRow:
    d = np.asarray(deltas, dtype=float)
    s = np.asarray(ses, dtype=float)
    R = d.size
    if R == 0:
        nan = float("nan")
        return MetricsRow(method, label, truth, nan, nan, nan, nan, nan, nan, nan, 0, n_excluded)
    b = d - truth
    bias = float(b.mean())
    var = float(np.mean((d - d.mean()) ** 2))
    cover = float(np.mean((d - 1.96 * s <= truth) & (truth <= d + 1.96 * s)))
    mcse_b = float(np.std(b, ddof=1) / math.sqrt(R)) if R > 1 else float("nan")
    return MetricsRow(method, label, truth, bias, var, bias * bias + var, float(s.mean()), cover,
                      mcse_coverage(cover, R), mcse_b, R, n_excluded)


@dataclass
class MetricsTable:
    rows: list
    config: dict
    truth: dict
    replicates: list = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return any(r.flagged for r in self.rows)

    def get(self, method, label) -> MetricsRow:
        method = Method(method).value
        for r in self.rows:
            if r.method == method and r.label == label:
                return r
        raise KeyError((method, label))

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame([asdict(r) for r in self.rows])
        df["flagged"] = [r.flagged for r in self.rows]
        return df

    def provenance(self) -> dict:
        return {"config": self.config, "truth": self.truth,
                "seeds": [rep.seed for rep in self.replicates]}

    def to_csv(self, path) -> None:
        write_csv(self.to_frame(), path, self.provenance())

    def to_json(self, path) -> None:
        doc = self.provenance()
        doc["flagged"] = self.flagged
        doc["metrics"] = [dict(asdict(r), flagged=r.flagged) for r in self.rows]
        doc["exclusions"] = {
            f"{rep.r}": {m: f for m, f in rep.failures.items() if f} for rep in self.replicates
            if any(rep.failures.values())
        }
        write_json(doc, path)


def _run_one(args):
    config, r = args
    return run_replication(config, r)


def run_simulation(config: SimConfig, workers: int = 1, truth: Optional[dict] = None,
                   progress=None) -> MetricsTable:
    """Run all replications and aggregate the per-(method, label) metrics.

    ``truth`` maps labels to true effects; by default it comes from the
    scenario's oracle.
    """
    if truth is None:
        oracle = oracle_estimand(config.scenario, config.rule, config.n_mc, config.oracle_seed)
        truth = oracle.delta
    jobs = [(config, r) for r in range(config.R)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reps = []
            for rep in pool.map(_run_one, jobs):
                reps.append(rep)
                if progress:
                    progress(rep)
    else:
        reps = []
        for job in jobs:
            reps.append(_run_one(job))
            if progress:
                progress(reps[-1])
    rows = []
    for method in config.methods:
        for lb in config.rule.labels:
            d, s, excl = [], [], 0
            for rep in reps:
                e = rep.estimates[method.value].get(lb)
                if e is None:
                    excl += 1
                else:
                    d.append(e[0])
                    s.append(e[1])
            rows.append(summarize(method.value, lb, float(truth[lb]), d, s, excl))
    return MetricsTable(rows, config.to_dict(), {k: float(v) for k, v in truth.items()}, reps)


# ---------------------------------------------------------------- MCCV


@dataclass(frozen=True)
class MccvConfig:
    rule: SubgroupingRule
    link: Link = Link.LOGIT
    repetitions: int = 100
    design_fraction: float = 0.5
    adjust: tuple = ()
    standardize_at: dict = field(default_factory=dict)
    base_seed: int = 0
    bart: BartHyper = BartHyper()
    methods: tuple = (Method.NAIVE_BART, Method.CORRECTED_BART)
    confidence_rep: int = 0
    rep_seeds: Optional[tuple] = None
    gbm_folds: int = 5

    def __post_init__(self):
        object.__setattr__(self, "link", Link(self.link))
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        object.__setattr__(self, "adjust", tuple(self.adjust))
        if self.repetitions < 2:
            raise ValueError("repetitions must be >= 2")
        if self.rep_seeds is not None and len(self.rep_seeds) != self.repetitions:
            raise ValueError("rep_seeds must have one seed per repetition")
        if not 0 <= self.confidence_rep < self.repetitions:
            raise ValueError("confidence_rep out of range")
        SplitSpec(self.design_fraction)

    def rep_seed(self, r: int) -> int:
        return int(self.rep_seeds[r]) if self.rep_seeds is not None else self.base_seed + r

    def to_dict(self) -> dict:
        return {"rule": self.rule.to_dict(), "link": self.link.value,
                "repetitions": self.repetitions, "design_fraction": self.design_fraction,
                "adjust": list(self.adjust), "standardize_at": dict(self.standardize_at),
                "base_seed": self.base_seed, "bart": asdict(self.bart),
                "methods": [m.value for m in self.methods], "confidence_rep": self.confidence_rep,
                "rep_seeds": None if self.rep_seeds is None else list(self.rep_seeds),
                "gbm_folds": self.gbm_folds}


@dataclass
class MccvRow:
    method: str
    label: str
    delta: float
    se: float
    ci_low: float
    ci_high: float
    or_: Optional[float]
    or_low: Optional[float]
    or_high: Optional[float]
    size_median: float
    size_sd: float
    n_valid: int


@dataclass
class MccvResult:
    rows: list
    config: dict
    confidence: dict  # label -> mean pi_LR among subjects classified into it
    n_failed: int
    failures: dict = field(default_factory=dict)
    per_rep: list = field(default_factory=list)

    def get(self, method, label) -> MccvRow:
        method = Method(method).value
        for r in self.rows:
            if r.method == method and r.label == label:
                return r
        raise KeyError((method, label))

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame([asdict(r) for r in self.rows])
        return df.rename(columns={"or_": "or"})

    def to_csv(self, path) -> None:
        write_csv(self.to_frame(), path, {"config": self.config})

    def to_json(self, path) -> None:
        write_json({"config": self.config, "confidence": self.confidence,
                    "n_failed": self.n_failed, "failures": self.failures,
                    "rows": self.to_frame().to_dict(orient="records")}, path)


def _score_matrix(X: np.ndarray, names: Sequence[str], standardize_at: dict) -> np.ndarray:
    """Copy of ``X`` with standardized columns held at their configured values."""
    Xs = X.copy()
    for nm, v in standardize_at.items():
        if nm not in names:
            raise ValueError(f"standardize_at names unknown column {nm!r}")
        Xs[:, list(names).index(nm)] = v
    return Xs


def run_mccv_repetition(data: TrialDataset, config: MccvConfig, r: int) -> dict:
    seed = config.rep_seed(r)
    design_idx, eval_idx = split_indices(
        data.t, SplitSpec(config.design_fraction, derive_seed(seed, 1)))
    design, evaluation = data.subset(design_idx), data.subset(eval_idx)
    Z = evaluation.columns(config.adjust) if config.adjust else None
    X_score = _score_matrix(evaluation.X, data.feature_names, config.standardize_at)
    out = {"estimates": {}, "failures": {}, "sizes": {}, "confidence": None}
    bart_scores = None
    for method in config.methods:
        if method is Method.NAIVE_GBM:
            scores = stage1_scores(method, design, X_score, config.bart, derive_seed(seed, 3),
                                   config.gbm_folds)
        else:
            if bart_scores is None:
                bart_scores = stage1_scores(method, design, X_score, config.bart,
                                            derive_seed(seed, 2))
            scores = bart_scores
        est, fails = _estimate(method, scores, config.rule, evaluation, config.link, Z)
        out["estimates"][method.value] = est
        out["failures"][method.value] = fails
        if scores.ndim == 1 or method is not Method.CORRECTED_BART:
            point = scores if scores.ndim == 1 else scores.mean(axis=0)
            sizes = subgroup_from_scores(point, config.rule).sizes(config.rule.labels)
        else:
            per_draw = [subgroup_from_scores(s, config.rule).sizes(config.rule.labels)
                        for s in scores]
            sizes = {lb: float(np.mean([s[lb] for s in per_draw])) for lb in config.rule.labels}
        out["sizes"][method.value] = sizes
    if r == config.confidence_rep and bart_scores is not None:
        labels, conf = classify_posterior_mean(bart_scores, config.rule)
        out["confidence"] = {lb: float(conf[labels == lb].mean()) if np.any(labels == lb)
                             else float("nan") for lb in config.rule.labels}
    return out


def _mccv_one(args):
    data, config, r = args
    try:
        return run_mccv_repetition(data, config, r)
    except (ValueError, np.linalg.LinAlgError) as exc:
        return {"error": str(exc)}


def run_mccv(data: TrialDataset, config: MccvConfig, workers: int = 1) -> MccvResult:
    """Repeated design/evaluation splits with coordinate-wise median pooling.

    Medians are taken separately for the estimate, SE and each CI bound. For
    the logit link the odds-ratio columns are the exponentiated medians.
    """
    if not (np.any(data.t == 1) and np.any(data.t == 0)):
        raise ValueError("data must contain both arms")
    if config.link is Link.LOGIT and data.outcome is not Outcome.BINARY:
        raise ValueError("logit link needs a binary outcome")
    unknown = [nm for nm in (*config.adjust, *config.standardize_at)
               if nm not in data.feature_names]
    if unknown:
        raise ValueError(f"unknown covariate column(s) {unknown}")
    jobs = [(data, config, r) for r in range(config.repetitions)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reps = list(pool.map(_mccv_one, jobs))
    else:
        reps = [_mccv_one(j) for j in jobs]
    failures = {str(r): rep["error"] for r, rep in enumerate(reps) if "error" in rep}
    if len(failures) > MCCV_FAILURE_LIMIT * config.repetitions:
        raise RuntimeError(f"{len(failures)} of {config.repetitions} MCCV repetitions failed: "
                           + next(iter(failures.values())))
    ok = [rep for rep in reps if "error" not in rep]
    rows = []
    for method in config.methods:
        for lb in config.rule.labels:
            vals = np.array([rep["estimates"][method.value][lb] for rep in ok
                             if lb in rep["estimates"][method.value]])
            sizes = np.array([rep["sizes"][method.value][lb] for rep in ok], dtype=float)
            if vals.size == 0:
                med = [float("nan")] * 4
            else:
                med = [float(v) for v in np.median(vals, axis=0)]
            ors = [math.exp(v) for v in (med[0], med[2], med[3])] \
                if config.link is Link.LOGIT and vals.size else [None, None, None]
            rows.append(MccvRow(method.value, lb, *med, *ors, float(np.median(sizes)),
                                float(np.std(sizes, ddof=1)) if sizes.size > 1 else 0.0,
                                int(vals.shape[0])))
    conf_rep = reps[config.confidence_rep]
    confidence = conf_rep.get("confidence") or {}
    return MccvResult(rows, config.to_dict(), confidence, len(failures), failures, reps)


# ---------------------------------------------------------------- overlap export


@dataclass
class OverlapData:
    samples: pd.DataFrame  # columns: arm, score
    ecdf: pd.DataFrame  # columns: score, ecdf_treated, ecdf_control

    @property
    def ks_statistic(self) -> float:
        return float(np.max(np.abs(self.ecdf["ecdf_treated"] - self.ecdf["ecdf_control"])))

    def to_csv(self, samples_path, ecdf_path, provenance: Optional[dict] = None) -> None:
        write_csv(self.samples, samples_path, provenance or {})
        write_csv(self.ecdf, ecdf_path, provenance or {})


def export_overlap_data(scores, t, grid: Optional[int] = None) -> OverlapData:
    """Per-arm score samples and ECDFs for external plotting.

    A K x n draw matrix is reduced to posterior means. By default the ECDFs
    are evaluated at every distinct score, which makes the reported KS
    statistic exact; an integer ``grid`` gives that many evenly spaced points.
    """
    s = np.asarray(scores, dtype=float)
    if s.ndim == 2:
        s = s.mean(axis=0)
    t = np.asarray(t)
    if s.shape != t.shape:
        raise ValueError("scores and arms differ in length")
    s1, s0 = np.sort(s[t == 1]), np.sort(s[t == 0])
    if s1.size == 0 or s0.size == 0:
        raise ValueError("both arms need at least one subject")
    pts = np.unique(s) if grid is None else np.linspace(s.min(), s.max(), grid)
    e1 = np.searchsorted(s1, pts, side="right") / s1.size
    e0 = np.searchsorted(s0, pts, side="right") / s0.size
    samples = pd.DataFrame({"arm": np.where(t == 1, "treated", "control"), "score": s})
    ecdf = pd.DataFrame({"score": pts, "ecdf_treated": e1, "ecdf_control": e0})
    return OverlapData(samples, ecdf)


# ---------------------------------------------------------------- output


def write_csv(df: pd.DataFrame, path, provenance: dict) -> None:
    """CSV whose first line is ``# provenance: <json>``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# provenance: " + json.dumps(provenance, sort_keys=True) + "\n")
        df.to_csv(fh, index=False, float_format="%.17g")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, enum.Enum):
        return o.value
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(doc: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2, default=_jsonable) + "\n")
