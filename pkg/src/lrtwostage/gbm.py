"""Second-order gradient boosting with exact greedy splits.

Each round fits one regression tree to the gradients and hessians of the
loss, choosing splits by the regularised gain

    gain = 1/2 [GL^2/(HL+lam) + GR^2/(HR+lam) - G^2/(H+lam)] - gamma

and setting leaf weights to ``-G/(H+lam)``. Predictions add ``eta`` times
the leaf weights to a constant base score.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy.special import expit, logit


class Loss(str, enum.Enum):
    SQUARED = "squared_error"
    LOGISTIC = "logistic"


@dataclass(frozen=True)
class GbmHyper:
    eta: float = 0.3
    max_depth: int = 6
    colsample: float = 1.0
    lam: float = 1.0
    gamma: float = 0.0
    n_rounds: int = 100
    loss: Loss = Loss.SQUARED

    def __post_init__(self):
        object.__setattr__(self, "loss", Loss(self.loss))
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0 < self.colsample <= 1:
            raise ValueError("colsample must lie in (0, 1]")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be >= 0")
        if self.n_rounds < 0:
            raise ValueError("n_rounds must be >= 0")


@dataclass
class GbmTree:
    feat: np.ndarray  # -1 marks a leaf
    thr: np.ndarray
    left: np.ndarray
    right: np.ndarray
    weight: np.ndarray
    gain: np.ndarray


@dataclass
class GbmModel:
    base_score: float  # margin scale
    eta: float
    loss: Loss
    p: int
    trees: list = field(default_factory=list)


@njit(cache=True)
def _build_tree(X, g, h, cols, max_depth, lam, gamma):
    n = X.shape[0]
    cap = 2 ** (max_depth + 1)
    feat = np.full(cap, -1, np.int64)
    thr = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    weight = np.zeros(cap)
    gain_out = np.zeros(cap)
    # rows of each node occupy a contiguous block of ``rows``
    rows = np.arange(n)
    start = np.zeros(cap, np.int64)
    stop = np.zeros(cap, np.int64)
    depth = np.zeros(cap, np.int64)
    stop[0] = n
    n_nodes = 1
    stack = np.zeros(cap, np.int64)
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        a, b = start[node], stop[node]
        G = 0.0
        H = 0.0
        for i in range(a, b):
            G += g[rows[i]]
            H += h[rows[i]]
        weight[node] = -G / (H + lam)
        if depth[node] >= max_depth or b - a < 2:
            continue
        parent_score = G * G / (H + lam)
        best = 0.0
        best_f = -1
        best_t = 0.0
        for f in cols:
            idx = rows[a:b]
            xs = X[idx, f]
            order = np.argsort(xs, kind="mergesort")
            GL = 0.0
            HL = 0.0
            for r in range(b - a - 1):
                i = idx[order[r]]
                GL += g[i]
                HL += h[i]
                x0 = xs[order[r]]
                x1 = xs[order[r + 1]]
                if x1 <= x0:
                    continue
                GR = G - GL
                HR = H - HL
                gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent_score) - gamma
                if gain > best:
                    best = gain
                    best_f = f
                    best_t = 0.5 * (x0 + x1)
        if best_f < 0:
            continue
        # stable partition of the node's rows
        tmp = rows[a:b].copy()
        k = a
        for i in tmp:
            if X[i, best_f] <= best_t:
                rows[k] = i
                k += 1
        mid = k
        for i in tmp:
            if X[i, best_f] > best_t:
                rows[k] = i
                k += 1
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feat[node] = best_f
        thr[node] = best_t
        gain_out[node] = best
        left[node] = lc
        right[node] = rc
        start[lc], stop[lc], depth[lc] = a, mid, depth[node] + 1
        start[rc], stop[rc], depth[rc] = mid, b, depth[node] + 1
        stack[sp] = rc
        stack[sp + 1] = lc
        sp += 2
    return (feat[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes],
            weight[:n_nodes], gain_out[:n_nodes])


@njit(cache=True)
def _predict_tree(feat, thr, left, right, weight, X):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while feat[node] >= 0:
            node = left[node] if X[i, feat[node]] <= thr[node] else right[node]
        out[i] = weight[node]
    return out


def _grad_hess(loss: Loss, margin, y):
    if loss is Loss.SQUARED:
        return margin - y, np.ones_like(y)
    p = expit(margin)
    return p - y, p * (1 - p)


def base_score(loss: Loss, y) -> float:
    ybar = float(np.mean(y))
    if loss is Loss.SQUARED:
        return ybar
    return float(logit(np.clip(ybar, 1e-6, 1 - 1e-6)))


def training_loss(loss: Loss, margin, y) -> float:
    """Mean squared error, or mean negative log-likelihood for logistic loss."""
    if Loss(loss) is Loss.SQUARED:
        return float(np.mean((y - margin) ** 2))
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


def _check_xy(X, y, loss):
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be n x p with n matching y")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("missing or non-finite values are not supported")
    if loss is Loss.LOGISTIC and not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("logistic loss needs y in {0, 1}")
    return X, y


def _boost(X, y, hyper: GbmHyper, seed: int, n_rounds: int, Xval=None):
    """Yield ``(tree, margin, val_margin)`` round by round."""
    rng = np.random.default_rng(seed)
    p = X.shape[1]
    n_cols = max(1, int(round(hyper.colsample * p)))
    margin = np.full(X.shape[0], base_score(hyper.loss, y))
    vm = None if Xval is None else np.full(Xval.shape[0], margin[0])
    for _ in range(n_rounds):
        g, h = _grad_hess(hyper.loss, margin, y)
        cols = np.sort(rng.choice(p, n_cols, replace=False)) if n_cols < p else np.arange(p)
        tree = GbmTree(*_build_tree(X, g, h, cols.astype(np.int64), hyper.max_depth,
                                    hyper.lam, hyper.gamma))
        margin = margin + hyper.eta * _predict_tree(tree.feat, tree.thr, tree.left, tree.right,
                                                    tree.weight, X)
        if vm is not None:
            vm = vm + hyper.eta * _predict_tree(tree.feat, tree.thr, tree.left, tree.right,
                                                tree.weight, Xval)
        yield tree, margin, vm


def fit_gbm(X, y, hyper: GbmHyper | None = None, seed: int = 0) -> GbmModel:
    hyper = hyper or GbmHyper()
    X, y = _check_xy(X, y, hyper.loss)
    if X.shape[0] < 10:
        raise ValueError(f"need at least 10 observations, got {X.shape[0]}")
    model = GbmModel(base_score(hyper.loss, y), hyper.eta, hyper.loss, X.shape[1])
    for tree, _, _ in _boost(X, y, hyper, seed, hyper.n_rounds):
        model.trees.append(tree)
    return model


def predict_margin(model: GbmModel, Xnew) -> np.ndarray:
    Xnew = np.ascontiguousarray(Xnew, dtype=float)
    if Xnew.ndim != 2 or Xnew.shape[1] != model.p:
        raise ValueError(f"expected {model.p} columns, got shape {Xnew.shape}")
    out = np.full(Xnew.shape[0], model.base_score)
    for t in model.trees:
        out += model.eta * _predict_tree(t.feat, t.thr, t.left, t.right, t.weight, Xnew)
    return out


def predict_gbm(model: GbmModel, Xnew) -> np.ndarray:
    """Predictions on the response scale (probabilities for logistic loss)."""
    m = predict_margin(model, Xnew)
    return expit(m) if model.loss is Loss.LOGISTIC else m


ETA_GRID = (0.02, 0.05, 0.1, 0.3)
DEPTH_GRID = (3, 5, 7)
COLSAMPLE_GRID = (0.8, 1.0)


def tuning_grid() -> list[GbmHyper]:
    return [GbmHyper(eta=e, max_depth=d, colsample=c)
            for e, d, c in itertools.product(ETA_GRID, DEPTH_GRID, COLSAMPLE_GRID)]


def cv_metric(loss: Loss, margin, y) -> float:
    """Held-out RMSE for squared loss, deviance (2 x mean NLL) for logistic loss."""
    if loss is Loss.SQUARED:
        return math.sqrt(float(np.mean((y - margin) ** 2)))
    return 2.0 * training_loss(loss, margin, y)


def fold_ids(n: int, folds: int, seed: int) -> np.ndarray:
    perm = np.random.default_rng(seed).permutation(n)
    ids = np.empty(n, np.int64)
    for f, chunk in enumerate(np.array_split(perm, folds)):
        ids[chunk] = f
    return ids


@dataclass
class CvRecord:
    hyper: GbmHyper
    score: float
    best_rounds: float
    n_folds_used: int


def tune_cv(X, y, loss: Loss | str = Loss.SQUARED, folds: int = 5, seed: int = 0,
            max_rounds: int = 500, patience: int = 20, lam: float = 1.0, gamma: float = 0.0,
            return_records: bool = False):
    """Pick (eta, max_depth, colsample) by K-fold CV with early stopping.

    Every configuration sees the same folds. A configuration's score is the
    mean over usable folds of the best held-out metric, and its round count
    is the mean best round. Logistic folds with a single class on either side
    are skipped.
    """
    loss = Loss(loss)
    X, y = _check_xy(X, y, loss)
    n = X.shape[0]
    if not 2 <= folds <= n:
        raise ValueError("need 2 <= folds <= n")
    ids = fold_ids(n, folds, seed)
    records = []
    for h0 in tuning_grid():
        hyper = replace(h0, loss=loss, lam=lam, gamma=gamma)
        scores, rounds = [], []
        for f in range(folds):
            tr, va = ids != f, ids == f
            if loss is Loss.LOGISTIC and (np.unique(y[tr]).size < 2 or np.unique(y[va]).size < 2):
                continue
            best, best_r, since = math.inf, 0, 0
            for r, (_, _, vm) in enumerate(_boost(X[tr], y[tr], hyper, seed + f, max_rounds,
                                                  X[va]), start=1):
                s = cv_metric(loss, vm, y[va])
                if s < best - 1e-12:
                    best, best_r, since = s, r, 0
                else:
                    since += 1
                    if since >= patience:
                        break
            scores.append(best)
            rounds.append(best_r)
        if scores:
            records.append(CvRecord(hyper, float(np.mean(scores)), float(np.mean(rounds)),
                                    len(scores)))
    if not records:
        raise ValueError("no usable cross-validation folds")
    best = min(records, key=lambda r: r.score)
    chosen = replace(best.hyper, n_rounds=int(round(best.best_rounds)))
    return (chosen, records) if return_records else chosen
