"""Stage-2 subgroup GLMs: h(E[Y|T]) = b0 + b*T (+ optional adjustment covariates)."""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

Z975 = 1.96


class Link(str, enum.Enum):
    IDENTITY = "identity"
    LOGIT = "logit"


class GlmError(ValueError):
    pass


class DegenerateArmError(GlmError):
    pass


class SeparationError(GlmError):
    pass


class RankDeficientError(GlmError):
    pass


class ZeroVarianceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GlmFit:
    coef: np.ndarray
    se: np.ndarray
    cov: np.ndarray
    link: Link
    n_used: int
    converged: bool
    n_iter: int = 0


@dataclass(frozen=True)
class EffectEstimate:
    delta: float
    se: float
    n_treated: int
    n_control: int
    label: Optional[str] = None

    @property
    def n_used(self) -> int:
        return self.n_treated + self.n_control

    @property
    def ci_low(self) -> float:
        return self.delta - Z975 * self.se

    @property
    def ci_high(self) -> float:
        return self.delta + Z975 * self.se


def _design(t, Z):
    t = np.asarray(t, dtype=float)
    cols = [np.ones_like(t), t]
    if Z is not None:
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if Z.shape[0] != t.shape[0]:
            raise ValueError("Z rows do not match t")
        if Z.shape[1]:
            cols.append(Z)
    return np.column_stack(cols)


def _check_arms(t):
    t = np.asarray(t)
    if not np.isin(t, (0, 1)).all():
        raise ValueError("t must be binary 0/1")
    n1 = int(t.sum())
    n0 = t.shape[0] - n1
    if n1 == 0 or n0 == 0:
        raise DegenerateArmError(f"degenerate arm: {n1} treated, {n0} control")
    return n1, n0


def fit_ols(X, y) -> GlmFit:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if n <= k:
        raise RankDeficientError(f"n={n} does not exceed the {k} parameters")
    q, r = np.linalg.qr(X)
    d = np.abs(np.diag(r))
    if d.min() <= 1e-10 * max(d.max(), 1.0):
        raise RankDeficientError("rank-deficient design")
    coef = np.linalg.solve(r, q.T @ y)
    resid = y - X @ coef
    s2 = resid @ resid / (n - k)
    rinv = np.linalg.inv(r)
    cov = s2 * (rinv @ rinv.T)
    return GlmFit(coef, np.sqrt(np.diag(cov)), cov, Link.IDENTITY, n, True)


def fit_gaussian_effect(y, t, Z=None, label=None) -> EffectEstimate:
    """OLS of ``y`` on ``[1, t, Z]``; the effect is the coefficient of ``t``."""
    n1, n0 = _check_arms(t)
    fit = fit_ols(_design(t, Z), y)
    if fit.se[1] == 0.0:
        warnings.warn("zero residual variance: standard error is 0", ZeroVarianceWarning,
                      stacklevel=2)
    return EffectEstimate(float(fit.coef[1]), float(fit.se[1]), n1, n0, label)


def logistic_loglik(beta, X, y) -> float:
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logistic(X, y, max_iter=50, tol_score=1e-8, tol_dev=1e-10, max_abs_coef=15.0) -> GlmFit:
    """Logistic regression by IRLS (Newton) with step halving.

    Iteration stops once max |score| < ``tol_score`` or the relative
    log-likelihood change drops below ``tol_dev``; either way one final
    Newton step is taken so the estimate is accurate to machine precision.
    Diverging coefficients or a step that cannot be made to improve the
    likelihood are reported as separation.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if np.linalg.matrix_rank(X) < k:
        raise RankDeficientError("rank-deficient design")
    beta = np.zeros(k)
    ybar = y.mean()
    beta[0] = np.log(ybar / (1 - ybar))
    ll = logistic_loglik(beta, X, y)
    converged = False
    polish = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        score = X.T @ (y - p)
        w = p * (1 - p)
        info = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise SeparationError("separation: singular information matrix") from exc
        if np.max(np.abs(score)) < tol_score:
            # a last full Newton step is already computed and costs nothing
            beta = beta + step
            converged = True
            break
        for _ in range(30):
            cand = beta + step
            ll_new = logistic_loglik(cand, X, y)
            if ll_new >= ll - 1e-12:
                break
            step = step / 2
        else:
            raise SeparationError("separation: step halving failed to improve the likelihood")
        beta = cand
        if np.max(np.abs(beta)) > max_abs_coef:
            raise SeparationError(
                f"separation: |coefficient| exceeded {max_abs_coef} at iteration {it}"
            )
        if polish:
            break
        rel = abs(ll_new - ll) / (abs(ll) + 0.1)
        ll = ll_new
        if rel < tol_dev:
            # the deviance has settled; one more Newton step reaches full precision
            converged = True
            polish = True
    p = expit(X @ beta)
    info = X.T @ (X * (p * (1 - p))[:, None])
    cov = np.linalg.inv(info)
    cov = (cov + cov.T) / 2
    return GlmFit(beta, np.sqrt(np.diag(cov)), cov, Link.LOGIT, n, converged, it)


def fit_logistic_effect(y, t, Z=None, label=None) -> EffectEstimate:
    """Log odds ratio for ``t`` with its Wald standard error."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(t)
    n1, n0 = _check_arms(t)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("y must be binary 0/1")
    if y.min() == y.max():
        raise SeparationError("separation: outcome is constant (zero cell)")
    if Z is None or np.asarray(Z).size == 0:
        cells = [np.sum((t == a) & (y == b)) for a in (0, 1) for b in (0, 1)]
        if min(cells) == 0:
            raise SeparationError(f"separation: zero cell in the 2x2 table {cells}")
    fit = fit_logistic(_design(t, Z), y)
    return EffectEstimate(float(fit.coef[1]), float(fit.se[1]), n1, n0, label)


def fit_effect(y, t, link: Link | str, Z=None, label=None) -> EffectEstimate:
    link = Link(link)
    if link is Link.IDENTITY:
        return fit_gaussian_effect(y, t, Z, label)
    return fit_logistic_effect(y, t, Z, label)
