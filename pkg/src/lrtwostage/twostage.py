"""Posterior-induced subgroup designs, per-design GLMs and Rubin's-rules pooling.

Stage 1 produces either one point score vector (naive) or a K x n matrix of
posterior score draws (corrected). Each score vector is cut into subgroups by
a :class:`SubgroupingRule`; Stage 2 fits one GLM per subgroup and, for the
corrected method, pools the K per-design estimates.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import TrialDataset
from .glm import Z975, DegenerateArmError, EffectEstimate, GlmError, Link, fit_effect


class Direction(str, enum.Enum):
    HIGHER_IS_LAST = "higher_is_last"
    HIGHER_IS_FIRST = "higher_is_first"


@dataclass(frozen=True)
class SubgroupingRule:
    """Cut a score axis into ``len(cutpoints) + 1`` labelled intervals.

    ``labels`` are listed from the lowest to the highest score interval when
    ``direction`` is ``higher_is_last`` and in the reverse order otherwise.
    A score equal to a cutpoint belongs to the lower interval.
    """

    cutpoints: tuple[float, ...]
    labels: tuple[str, ...]
    direction: Direction = Direction.HIGHER_IS_LAST

    def __post_init__(self):
        object.__setattr__(self, "cutpoints", tuple(float(c) for c in self.cutpoints))
        object.__setattr__(self, "labels", tuple(str(lb) for lb in self.labels))
        object.__setattr__(self, "direction", Direction(self.direction))
        if len(self.labels) < 2:
            raise ValueError("a rule needs at least two labels")
        if len(self.labels) != len(self.cutpoints) + 1:
            raise ValueError("need exactly one more label than cutpoints")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("labels must be distinct")
        if np.any(np.diff(self.cutpoints) <= 0):
            raise ValueError("cutpoints must be strictly increasing")

    @classmethod
    def threshold(cls, min_cond: float, low: str = "UR", high: str = "LR") -> "SubgroupingRule":
        """Two strata: ``high`` when the score exceeds ``min_cond``."""
        return cls((min_cond,), (low, high))

    @property
    def ascending_labels(self) -> tuple[str, ...]:
        if self.direction is Direction.HIGHER_IS_LAST:
            return self.labels
        return self.labels[::-1]

    def codes(self, scores) -> np.ndarray:
        """Interval index along the ascending label order."""
        scores = np.asarray(scores, dtype=float)
        if not np.isfinite(scores).all():
            raise ValueError("scores must be finite")
        return np.searchsorted(np.asarray(self.cutpoints), scores, side="left")

    def to_dict(self) -> dict:
        return {"cutpoints": list(self.cutpoints), "labels": list(self.labels),
                "direction": self.direction.value}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SubgroupingRule":
        unknown = set(d) - {"cutpoints", "labels", "direction"}
        if unknown:
            raise ValueError(f"unknown rule keys: {sorted(unknown)}")
        return cls(tuple(d["cutpoints"]), tuple(d["labels"]),
                   d.get("direction", Direction.HIGHER_IS_LAST))


@dataclass(frozen=True)
class SubgroupDesign:
    labels: np.ndarray
    source: str = "point"  # "point" or "draw:<k>"

    def members(self, label: str) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def sizes(self, order: Sequence[str]) -> dict[str, int]:
        return {lb: int(np.sum(self.labels == lb)) for lb in order}


def subgroup_from_scores(scores, rule: SubgroupingRule, source: str = "point") -> SubgroupDesign:
    codes = rule.codes(scores)
    lab = np.asarray(rule.ascending_labels, dtype=object)[codes]
    return SubgroupDesign(lab, source)


@dataclass(frozen=True)
class SplitSpec:
    design_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.design_fraction < 1:
            raise ValueError("design_fraction must lie in (0, 1)")


MIN_TREATED = 20


def split_indices(t, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``floor(fraction * n_treated)`` treated rows into the design set."""
    t = np.asarray(t)
    treated = np.flatnonzero(t == 1)
    if treated.size < MIN_TREATED:
        raise ValueError(f"too few treated subjects for a design split ({treated.size} < {MIN_TREATED})")
    n_design = int(np.floor(spec.design_fraction * treated.size))
    rng = np.random.default_rng(spec.seed)
    design = np.sort(rng.choice(treated, size=n_design, replace=False))
    mask = np.ones(t.shape[0], dtype=bool)
    mask[design] = False
    return design, np.flatnonzero(mask)


def split_design_eval(data: TrialDataset, spec: SplitSpec) -> tuple[TrialDataset, TrialDataset]:
    design, evaluation = split_indices(data.t, spec)
    return data.subset(design), data.subset(evaluation)


@dataclass(frozen=True)
class PooledEstimate:
    label: str
    delta_bar: float
    within_var: float
    between_var: float
    total_var: float
    K_valid: int
    K_total: int

    @property
    def se(self) -> float:
        return float(np.sqrt(self.total_var))

    @property
    def ci_low(self) -> float:
        return self.delta_bar - Z975 * self.se

    @property
    def ci_high(self) -> float:
        return self.delta_bar + Z975 * self.se

    @property
    def delta(self) -> float:
        return self.delta_bar


def rubin_pool(deltas, variances) -> tuple[float, float, float, float]:
    """Combine K per-design estimates.

    Returns ``(delta_bar, total_var, within, between)`` where
    ``total = within + (1 + 1/K) * between`` and ``between`` uses the K-1
    denominator.
    """
    deltas = np.asarray(deltas, dtype=float)
    variances = np.asarray(variances, dtype=float)
    K = deltas.shape[0]
    if K <= 1:
        raise ValueError("between-design variance undefined for K <= 1")
    if variances.shape != deltas.shape:
        raise ValueError("deltas and variances differ in length")
    if np.any(variances < 0):
        raise ValueError("variances must be non-negative")
    # shifting by the first draw keeps identical draws exactly identical
    dev = deltas - deltas[0]
    delta_bar = float(deltas[0] + np.mean(dev))
    within = float(np.mean(variances))
    between = float(np.sum((dev - np.mean(dev)) ** 2) / (K - 1))
    total = within + (1.0 + 1.0 / K) * between
    return delta_bar, total, within, between


@dataclass
class SubgroupEffects:
    """Per-label estimates plus the labels (or draws) that could not be estimated."""

    estimates: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def __getitem__(self, label):
        return self.estimates[label]

    def __contains__(self, label):
        return label in self.estimates

    def __iter__(self):
        return iter(self.estimates)

    def items(self):
        return self.estimates.items()


def _fit_design(design: SubgroupDesign, data: TrialDataset, link, labels, Z):
    out, errs = {}, {}
    for lb in labels:
        idx = design.members(lb)
        zz = None if Z is None else Z[idx]
        try:
            if idx.size == 0:
                raise DegenerateArmError("degenerate arm: empty subgroup")
            out[lb] = fit_effect(data.y[idx], data.t[idx], link, zz, label=lb)
        except GlmError as exc:
            errs[lb] = exc
    return out, errs


def naive_estimate(score_point, rule: SubgroupingRule, eval_data: TrialDataset,
                   link: Link | str, Z=None, errors: str = "raise") -> SubgroupEffects:
    """One design from a point score vector, one GLM per subgroup.

    With ``errors="skip"`` labels whose GLM fails are left out and their
    errors recorded in ``failures``.
    """
    design = subgroup_from_scores(score_point, rule)
    est, errs = _fit_design(design, eval_data, link, rule.labels, Z)
    if errs and errors == "raise":
        lb, exc = next(iter(errs.items()))
        raise type(exc)(f"subgroup {lb!r}: {exc}")
    return SubgroupEffects(est, {lb: str(e) for lb, e in errs.items()})


def corrected_estimate(score_draws, rule: SubgroupingRule, eval_data: TrialDataset,
                       link: Link | str, Z=None, min_valid_fraction: float = 0.5) -> SubgroupEffects:
    """Pool subgroup effects over the K posterior-induced designs.

    Draws whose GLM fails for a label are excluded for that label only; a
    label keeps its pooled estimate when at least ``max(2, 0.5 K)`` draws
    survive.
    """
    draws = np.asarray(score_draws, dtype=float)
    if draws.ndim != 2:
        raise ValueError("score_draws must be K x n")
    K = draws.shape[0]
    if K < 2:
        raise ValueError("corrected estimate needs K >= 2 draws")
    if draws.shape[1] != eval_data.n:
        raise ValueError("score_draws columns do not match the evaluation set")
    per_label = {lb: ([], []) for lb in rule.labels}
    cache = {}
    for k in range(K):
        design = subgroup_from_scores(draws[k], rule, source=f"draw:{k}")
        key = rule.codes(draws[k]).tobytes()
        if key not in cache:
            cache[key] = _fit_design(design, eval_data, link, rule.labels, Z)[0]
        est = cache[key]
        for lb in rule.labels:
            if lb in est:
                per_label[lb][0].append(est[lb].delta)
                per_label[lb][1].append(est[lb].se ** 2)
    floor = max(2, int(np.ceil(min_valid_fraction * K)))
    out, fails = {}, {}
    for lb, (d, v) in per_label.items():
        if len(d) < floor:
            fails[lb] = f"insufficient valid designs: {len(d)} of {K} (need {floor})"
            continue
        dbar, tot, within, between = rubin_pool(d, v)
        out[lb] = PooledEstimate(lb, dbar, within, between, tot, len(d), K)
    if not out:
        raise ValueError("insufficient valid designs for every label: " + "; ".join(fails.values()))
    return SubgroupEffects(out, fails)


def classify_posterior_mean(score_draws, rule: SubgroupingRule, target: Optional[str] = None):
    """Label subjects by their posterior-mean score.

    Returns ``(labels, confidence)`` where confidence is the fraction of draws
    that place each subject in ``target`` (default: ``"LR"`` when present,
    else the first label).
    """
    draws = np.atleast_2d(np.asarray(score_draws, dtype=float))
    if draws.shape[0] < 1:
        raise ValueError("need at least one draw")
    if target is None:
        target = "LR" if "LR" in rule.labels else rule.labels[0]
    pos = rule.ascending_labels.index(target)
    labels = subgroup_from_scores(draws.mean(axis=0), rule).labels
    confidence = (rule.codes(draws) == pos).mean(axis=0)
    return labels, confidence
