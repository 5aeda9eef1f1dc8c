"""Synthetic trial generation and large-sample ground-truth subgroup effects."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .data import Outcome, TrialDataset
from .twostage import SubgroupingRule

MU = (0.5, 1.0, 0.75, 1.0, 0.5, -0.5, -1.0, -0.75, -1.0, -0.5)
P = 10


class CovariateKind(str, enum.Enum):
    GAUSSIAN10 = "gaussian10"
    MIXED10 = "mixed10"


@dataclass(frozen=True)
class DgpScenario:
    outcome: Outcome
    covariates: CovariateKind = CovariateKind.GAUSSIAN10
    mu: tuple = MU
    min_cond: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "outcome", Outcome(self.outcome))
        object.__setattr__(self, "covariates", CovariateKind(self.covariates))
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))
        if len(self.mu) != P:
            raise ValueError("mu must have 10 entries")
        if self.min_cond is None:
            default = 0.5 if self.outcome is Outcome.BINARY else 0.0
            object.__setattr__(self, "min_cond", default)

    @property
    def name(self) -> str:
        return f"{self.outcome.value}/{self.covariates.value}"

    def default_rule(self) -> SubgroupingRule:
        return SubgroupingRule.threshold(self.min_cond)

    def to_dict(self) -> dict:
        return {"outcome": self.outcome.value, "covariates": self.covariates.value,
                "mu": list(self.mu), "min_cond": self.min_cond}


def _as_matrix(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != P:
        raise ValueError(f"expected {P} covariates, got {x.shape[1]}")
    return x, single


def canonical_g(x, outcome: Outcome | str):
    """Treatment-interaction term of the linear predictor.

    Accepts one 10-vector or an (n, 10) matrix.
    """
    x, single = _as_matrix(x)
    x1, x2, x3, x4, x5, x6, x7, x8, x9, x10 = x.T
    if Outcome(outcome) is Outcome.BINARY:
        g = (np.sin(np.pi * x1) / 5 - np.sin(np.pi * x2) / 5 + x3**2 / 5 - x4**2 / 5
             - x5 * x6 / 10 + x7 - x8 + np.exp(x9) / 5 - np.exp(x10) / 5)
    else:
        g = (np.sin(np.pi * x1 * x2) / 2 + (x3 - 0.5) ** 2 / 3 + x4**3 / 4 + x5 / 5
             - np.sin(np.pi * x6 * x7) / 2 - (x8 - 0.5) ** 2 / 3 - x9**3 / 4 - x10 / 5)
    return float(g[0]) if single else g


def sample_covariates(kind: CovariateKind | str, n: int, rng: np.random.Generator) -> np.ndarray:
    kind = CovariateKind(kind)
    if kind is CovariateKind.GAUSSIAN10:
        return rng.standard_normal((n, P))
    return np.column_stack([
        rng.standard_normal((n, 4)),
        rng.binomial(1, 0.5, (n, 2)).astype(float),
        rng.exponential(1.0, (n, 2)),
        rng.chisquare(10, (n, 2)),
    ])


def linear_predictor(scenario: DgpScenario, x, t) -> np.ndarray:
    x, _ = _as_matrix(x)
    return x @ np.asarray(scenario.mu) + canonical_g(x, scenario.outcome) * np.asarray(t)


def gen_trial(scenario: DgpScenario, n: int, seed: int) -> TrialDataset:
    if n < 2:
        raise ValueError("n must be at least 2")
    rng = np.random.default_rng(seed)
    X = sample_covariates(scenario.covariates, n, rng)
    t = rng.binomial(1, 0.5, n)
    f = linear_predictor(scenario, X, t)
    if scenario.outcome is Outcome.CONTINUOUS:
        y = f + rng.standard_normal(n)
    else:
        y = (rng.random(n) < expit(f)).astype(float)
    return TrialDataset(X, t, y, scenario.outcome)


def true_pbs(scenario: DgpScenario, x):
    """E[Y | T=1, x] on the outcome scale (probability for binary outcomes)."""
    x, single = _as_matrix(x)
    f1 = linear_predictor(scenario, x, 1)
    s = expit(f1) if scenario.outcome is Outcome.BINARY else f1
    return float(s[0]) if single else s


@dataclass
class OracleEstimand:
    """Subgroup effects on the link scale, with Monte Carlo standard errors.

    ``delta`` is h(mean E[Y|T=1,x]) - h(mean E[Y|T=0,x]) within each subgroup;
    ``delta_avg_link`` is the subgroup mean of the link-scale difference.
    ``mc_se`` comes from the delta method on the per-arm subgroup means.
    """

    scenario: DgpScenario
    rule: SubgroupingRule
    n_mc: int
    seed: int
    delta: dict = field(default_factory=dict)
    mc_se: dict = field(default_factory=dict)
    delta_avg_link: dict = field(default_factory=dict)
    size: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario.to_dict(), "rule": self.rule.to_dict(),
                "n_mc": self.n_mc, "seed": self.seed, "delta": self.delta,
                "mc_se": self.mc_se, "delta_avg_link": self.delta_avg_link,
                "size": self.size}


ORACLE_CHUNK = 250_000


def oracle_estimand(scenario: DgpScenario, rule: SubgroupingRule | None = None,
                    n_mc: int = 1_000_000, seed: int = 0) -> OracleEstimand:
    """Ground-truth subgroup effects from ``n_mc`` noiseless simulated subjects."""
    if n_mc < 100_000:
        raise ValueError("n_mc must be at least 1e5")
    rule = rule or scenario.default_rule()
    binary = scenario.outcome is Outcome.BINARY
    rng = np.random.default_rng(seed)
    mu = np.asarray(scenario.mu)
    labels = rule.ascending_labels
    S = len(labels)
    # per label: n, sum a, sum b, sum a^2, sum b^2, sum ab, sum d, sum d^2
    acc = np.zeros((S, 8))
    done = 0
    while done < n_mc:
        m = min(ORACLE_CHUNK, n_mc - done)
        X = sample_covariates(scenario.covariates, m, rng)
        f0 = X @ mu
        d = canonical_g(X, scenario.outcome)
        f1 = f0 + d
        a, b = (expit(f1), expit(f0)) if binary else (f1, f0)
        codes = rule.codes(a)
        for s in range(S):
            sel = codes == s
            aa, bb, dd = a[sel], b[sel], d[sel]
            acc[s] += (sel.sum(), aa.sum(), bb.sum(), aa @ aa, bb @ bb, aa @ bb, dd.sum(), dd @ dd)
        done += m
    out = OracleEstimand(scenario, rule, n_mc, seed)
    for s, lb in enumerate(labels):
        n, sa, sb, saa, sbb, sab, sd, sdd = acc[s]
        if n < 2:
            raise ValueError(f"subgroup {lb!r} is empty at n_mc={n_mc}")
        ma, mb = sa / n, sb / n
        va = (saa - n * ma * ma) / (n - 1)
        vb = (sbb - n * mb * mb) / (n - 1)
        cab = (sab - n * ma * mb) / (n - 1)
        if binary:
            delta = logit(ma) - logit(mb)
            ga, gb = 1 / (ma * (1 - ma)), -1 / (mb * (1 - mb))
        else:
            delta = ma - mb
            ga, gb = 1.0, -1.0
        var = (ga * ga * va + gb * gb * vb + 2 * ga * gb * cab) / n
        md = sd / n
        out.delta[lb] = float(delta)
        out.mc_se[lb] = float(np.sqrt(max(var, 0.0)))
        out.delta_avg_link[lb] = float(md)
        out.size[lb] = int(n)
    return out
