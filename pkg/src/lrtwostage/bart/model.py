"""Bayesian additive regression trees fitted by Bayesian backfitting.

Continuous responses are rescaled to [-0.5, 0.5] before fitting and the
error variance gets an inverse-gamma prior calibrated against an OLS fit.
Binary responses use probit data augmentation with a fixed latent variance
of one; scores are reported as probabilities.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import chi2

from ..data import Outcome
from . import _kernels as K

NODE_CAPACITY = 256


class DegenerateResponseError(ValueError):
    pass


@dataclass(frozen=True)
class BartHyper:
    m: int = 200
    alpha: float = 0.95
    beta: float = 2.0
    k: float = 2.0
    nu: float = 3.0
    q: float = 0.90
    n_burn: int = 500
    n_keep: int = 100
    n_cuts: int = 100

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.k <= 0 or self.nu <= 0:
            raise ValueError("k and nu must be positive")
        if not 0 < self.q < 1:
            raise ValueError("q must lie in (0, 1)")
        if self.n_burn < 0 or self.n_keep < 1:
            raise ValueError("need n_burn >= 0 and n_keep >= 1")
        if self.n_cuts < 1:
            raise ValueError("n_cuts must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "BartHyper":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown BART settings: {sorted(unknown)}")
        return cls(**d)


def cut_grid(X: np.ndarray, n_cuts: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Candidate split values per feature.

    Midpoints between distinct values when there are at most ``n_cuts`` of
    them, otherwise ``n_cuts`` interior quantiles.
    """
    n, p = X.shape
    grid = np.zeros((p, n_cuts))
    counts = np.zeros(p, np.int64)
    levels = np.arange(1, n_cuts + 1) / (n_cuts + 1)
    for v in range(p):
        u = np.unique(X[:, v])
        if u.size < 2:
            continue
        c = (u[:-1] + u[1:]) / 2
        if c.size > n_cuts:
            c = np.unique(np.quantile(X[:, v], levels))
            c = c[(c >= u[0]) & (c < u[-1])]
        grid[v, :c.size] = c
        counts[v] = c.size
    return grid, counts


def ols_sigma(X: np.ndarray, y: np.ndarray) -> float:
    """Residual SD of the least-squares fit of y on [1, X] (sample SD if n <= p + 1)."""
    n, p = X.shape
    if n > p + 1:
        A = np.column_stack([np.ones(n), X])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = y - A @ coef
        s = np.sqrt(resid @ resid / (n - p - 1))
        if s > 0:
            return float(s)
    return float(np.std(y, ddof=1))


def calibrate_lambda(sigma_hat: float, nu: float, q: float) -> float:
    """Scale of the InvGamma(nu/2, nu*lam/2) prior with P(sigma < sigma_hat) = q."""
    return float(sigma_hat**2 * chi2.ppf(1.0 - q, nu) / nu)


@dataclass
class DecisionTree:
    """One fitted tree as flat node arrays (``feat == -1`` marks a leaf)."""

    feat: np.ndarray
    thr: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feat < 0))

    def leaf_for(self, x) -> int:
        node = 0
        while self.feat[node] >= 0:
            node = self.left[node] if x[self.feat[node]] <= self.thr[node] else self.right[node]
        return int(node)

    def predict_one(self, x) -> float:
        return float(self.value[self.leaf_for(x)])

    def to_nested(self, node: int = 0):
        if self.feat[node] < 0:
            return float(self.value[node])
        return [int(self.feat[node]), float(self.thr[node]),
                self.to_nested(int(self.left[node])), self.to_nested(int(self.right[node]))]


@dataclass
class ScoreDraws:
    """K x n matrix of posterior prognostic-score draws."""

    values: np.ndarray
    scale: str

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def K(self) -> int:
        return self.values.shape[0]

    def posterior_mean(self) -> np.ndarray:
        return self.values.mean(axis=0)


@dataclass
class BartChain:
    hyper: BartHyper
    outcome: Outcome
    p: int
    seed: int
    # response transforms
    y_min: float
    y_max: float
    offset: float
    sigma_mu: float
    sigma_hat: float
    lam: float
    # retained draws
    nodes_feat: np.ndarray
    nodes_thr: np.ndarray
    nodes_left: np.ndarray
    nodes_right: np.ndarray
    nodes_value: np.ndarray
    roots: np.ndarray  # n_keep x m
    sigma: np.ndarray  # n_keep, outcome scale (ones for binary)
    split_counts: np.ndarray  # n_keep x p
    train_draws: np.ndarray  # n_keep x n_train, outcome scale
    accept: dict = field(default_factory=dict)

    @property
    def n_keep(self) -> int:
        return self.roots.shape[0]

    def tree(self, k: int, j: int) -> DecisionTree:
        """Tree ``j`` of retained draw ``k`` with node indices local to the tree."""
        root = int(self.roots[k, j])
        order, stack = [], [root]
        while stack:
            node = stack.pop()
            order.append(node)
            if self.nodes_feat[node] >= 0:
                stack.append(int(self.nodes_right[node]))
                stack.append(int(self.nodes_left[node]))
        local = {g: i for i, g in enumerate(order)}
        idx = np.array(order)
        remap = np.vectorize(lambda g: local.get(int(g), -1), otypes=[np.int64])
        return DecisionTree(self.nodes_feat[idx].copy(), self.nodes_thr[idx].copy(),
                            remap(self.nodes_left[idx]), remap(self.nodes_right[idx]),
                            self.nodes_value[idx].copy())

    def latent_to_scale(self, f: np.ndarray) -> np.ndarray:
        if self.outcome is Outcome.BINARY:
            return ndtr(f + self.offset)
        return (f + 0.5) * (self.y_max - self.y_min) + self.y_min

    def predict_latent(self, Xnew) -> np.ndarray:
        """Sum-of-trees values before the inverse link / back-transform."""
        Xnew = np.ascontiguousarray(Xnew, dtype=float)
        if Xnew.ndim != 2 or Xnew.shape[1] != self.p:
            raise ValueError(f"expected {self.p} columns, got shape {Xnew.shape}")
        return K.predict_sum(self.nodes_feat, self.nodes_thr, self.nodes_left,
                             self.nodes_right, self.nodes_value, self.roots, Xnew)

    def to_json(self, path) -> None:
        """Write the chain with each tree as a nested ``[feature, cut, left, right]`` list."""
        trees = [[self.tree(k, j).to_nested() for j in range(self.roots.shape[1])]
                 for k in range(self.n_keep)]
        doc = {
            "format": "lrtwostage.bart_chain/1",
            "hyper": asdict(self.hyper), "outcome": self.outcome.value, "p": self.p,
            "seed": self.seed, "y_min": self.y_min, "y_max": self.y_max,
            "offset": self.offset, "sigma_mu": self.sigma_mu, "sigma_hat": self.sigma_hat,
            "lam": self.lam, "sigma": self.sigma.tolist(),
            "split_counts": self.split_counts.tolist(),
            "train_draws": self.train_draws.tolist(), "accept": self.accept, "trees": trees,
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def from_json(cls, path) -> "BartChain":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "lrtwostage.bart_chain/1":
            raise ValueError(f"{path}: not a serialized BART chain")
        feat, thr, left, right, val = [], [], [], [], []

        def emit(t):
            i = len(feat)
            feat.append(-1), thr.append(0.0), left.append(-1), right.append(-1), val.append(0.0)
            if isinstance(t, list):
                feat[i], thr[i] = t[0], t[1]
                left[i] = emit(t[2])
                right[i] = emit(t[3])
            else:
                val[i] = t
            return i

        roots = np.array([[emit(t) for t in draw] for draw in doc["trees"]], dtype=np.int32)
        return cls(BartHyper(**doc["hyper"]), Outcome(doc["outcome"]), doc["p"], doc["seed"],
                   doc["y_min"], doc["y_max"], doc["offset"], doc["sigma_mu"], doc["sigma_hat"],
                   doc["lam"], np.array(feat, np.int32), np.array(thr, float),
                   np.array(left, np.int32), np.array(right, np.int32), np.array(val, float),
                   roots, np.array(doc["sigma"], float),
                   np.array(doc["split_counts"], np.int64), np.array(doc["train_draws"], float),
                   doc["accept"])


def _draw_latent(y1: np.ndarray, mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Truncated-normal latents: z > 0 where y = 1, z <= 0 where y = 0."""
    u = 1.0 - rng.random(mean.shape[0])  # (0, 1]
    pos = mean - ndtri(np.maximum(u * ndtr(mean), 1e-300))
    neg = mean + ndtri(np.maximum(u * ndtr(-mean), 1e-300))
    return np.where(y1, pos, neg)


def fit_bart(X, y, outcome: Outcome | str, hyper: Optional[BartHyper] = None,
             seed: int = 0) -> BartChain:
    """Run ``n_burn + n_keep`` backfitting sweeps and keep the last ``n_keep``."""
    hyper = hyper or BartHyper()
    outcome = Outcome(outcome)
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be n x p with n matching y")
    n, p = X.shape
    if n < 20:
        raise ValueError(f"need at least 20 observations, got {n}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("non-finite values in X or y")
    if y.min() == y.max():
        raise DegenerateResponseError("degenerate response: y is constant")
    if outcome is Outcome.BINARY and not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("binary outcome must be 0/1")

    rng = np.random.default_rng(seed)
    cuts, ncuts = cut_grid(X, hyper.n_cuts)
    binary = outcome is Outcome.BINARY
    y_min, y_max = float(y.min()), float(y.max())
    if binary:
        offset = float(ndtri(np.clip(y.mean(), 1e-6, 1 - 1e-6)))
        sigma_mu = 3.0 / (hyper.k * np.sqrt(hyper.m))
        sigma_hat, lam = 1.0, float("nan")
        target = np.zeros(n)
        y1 = y == 1.0
    else:
        offset = 0.0
        target = (y - y_min) / (y_max - y_min) - 0.5
        # range of the rescaled response is 1, so k*sqrt(m)*sigma_mu = 1/2
        sigma_mu = 0.5 / (hyper.k * np.sqrt(hyper.m))
        sigma_hat = ols_sigma(X, target)
        lam = calibrate_lambda(sigma_hat, hyper.nu, hyper.q)
    tau2 = sigma_mu**2
    sigma2 = 1.0 if binary else sigma_hat**2

    arena = K.init_arena(hyper.m, NODE_CAPACITY, n)
    feat, cut, left, right, parent, depth, value, hi, free_stack, n_free, leaf_of = arena
    fit = np.zeros(n)
    stats = np.zeros(4, np.int64)
    kept = []
    sig = np.empty(hyper.n_keep)
    train = np.empty((hyper.n_keep, n))
    for it in range(hyper.n_burn + hyper.n_keep):
        if binary:
            target = _draw_latent(y1, fit + offset, rng) - offset
        else:
            resid = target - fit
            sigma2 = (hyper.nu * lam + resid @ resid) / rng.chisquare(hyper.nu + n)
        K.sweep(X, cuts, ncuts, target, fit, feat, cut, left, right, parent, depth, value, hi,
                free_stack, n_free, leaf_of, sigma2, tau2, hyper.alpha, hyper.beta, True, rng,
                stats)
        keep = it - hyper.n_burn
        if keep >= 0:
            kept.append(K.compact(feat, cut, left, right, value, hi, cuts))
            sig[keep] = np.sqrt(sigma2) * (1.0 if binary else y_max - y_min)
            train[keep] = ndtr(fit + offset) if binary else (fit + 0.5) * (y_max - y_min) + y_min

    sizes = np.array([c[0].size for c in kept])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    cat = [np.concatenate([c[i] for c in kept]) for i in range(5)]
    nf, nt, nl, nr, nv = cat
    for k_, s0 in enumerate(starts):
        sl = slice(s0, s0 + sizes[k_])
        nl[sl] = np.where(nl[sl] >= 0, nl[sl] + s0, -1)
        nr[sl] = np.where(nr[sl] >= 0, nr[sl] + s0, -1)
    roots = np.stack([c[5] + s0 for c, s0 in zip(kept, starts)]).astype(np.int32)
    split_counts = np.stack([np.bincount(c[0][c[0] >= 0], minlength=p) for c in kept])
    accept = {"grow_proposed": int(stats[0]), "grow_accepted": int(stats[1]),
              "prune_proposed": int(stats[2]), "prune_accepted": int(stats[3])}
    return BartChain(hyper, outcome, p, seed, y_min, y_max, offset, float(sigma_mu),
                     float(sigma_hat), lam, nf, nt, nl.astype(np.int32), nr.astype(np.int32),
                     nv, roots, sig, split_counts, train, accept)


def acceptance_rate(chain: BartChain) -> float:
    a = chain.accept
    proposed = a["grow_proposed"] + a["prune_proposed"]
    return (a["grow_accepted"] + a["prune_accepted"]) / max(proposed, 1)


def predict_posterior(chain: BartChain, Xnew) -> ScoreDraws:
    """Row k holds the k-th retained ensemble's score at every row of ``Xnew``."""
    f = chain.predict_latent(Xnew)
    scale = "probability" if chain.outcome is Outcome.BINARY else "outcome"
    return ScoreDraws(chain.latent_to_scale(f), scale)


@dataclass
class VipResult:
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    per_draw: np.ndarray


def vip(chain: BartChain, level: float = 0.95) -> VipResult:
    """Variable inclusion proportions over retained draws.

    Each draw's split counts are normalised to proportions; a draw without
    splits contributes 1/p to every feature.
    """
    counts = chain.split_counts.astype(float)
    tot = counts.sum(axis=1, keepdims=True)
    props = np.where(tot > 0, counts / np.where(tot > 0, tot, 1.0), 1.0 / chain.p)
    a = (1 - level) / 2
    return VipResult(props.mean(axis=0), np.quantile(props, a, axis=0),
                     np.quantile(props, 1 - a, axis=0), props)


def posterior_predictive_rates(chain: BartChain, n_rep: int = 100, seed: int = 0) -> np.ndarray:
    """Event rates of ``n_rep`` replicate training responses (draw ``r mod K``)."""
    if chain.outcome is not Outcome.BINARY:
        raise ValueError("posterior predictive event rates need a binary-outcome chain")
    rng = np.random.default_rng(seed)
    probs = chain.train_draws
    rates = np.empty(n_rep)
    for r in range(n_rep):
        pr = probs[r % probs.shape[0]]
        rates[r] = np.mean(rng.random(pr.shape[0]) < pr)
    return rates


def posterior_predictive_pvalue(chain: BartChain, y, n_rep: int = 100, seed: int = 0) -> float:
    """Fraction of replicate event rates at or above the observed rate."""
    y = np.asarray(y, dtype=float)
    if chain.outcome is not Outcome.BINARY:
        raise ValueError("posterior predictive p-value needs a binary-outcome chain")
    if y.shape[0] != chain.train_draws.shape[1]:
        raise ValueError("y does not match the chain's training rows")
    rates = posterior_predictive_rates(chain, n_rep, seed)
    return float(np.mean(rates >= y.mean()))


def prior_tree_sizes(hyper: Optional[BartHyper] = None, p: int = 10, seed: int = 0,
                     method: str = "mcmc") -> np.ndarray:
    """Leaf counts of trees drawn from the tree prior alone.

    ``method="mcmc"`` runs the GROW/PRUNE sampler with the likelihood switched
    off (``m`` independent trees, ``n_burn`` discarded then ``n_keep`` recorded
    sweeps); ``method="direct"`` simulates the branching process.
    """
    hyper = hyper or BartHyper()
    rng = np.random.default_rng(seed)
    if method == "direct":
        n = hyper.m * hyper.n_keep
        out = np.empty(n, np.int64)
        for i in range(n):
            leaves, frontier = 0, [0]
            while frontier:
                d = frontier.pop()
                if rng.random() < hyper.alpha * (1.0 + d) ** (-hyper.beta):
                    frontier += [d + 1, d + 1]
                else:
                    leaves += 1
            out[i] = leaves
        return out
    if method != "mcmc":
        raise ValueError(f"unknown method {method!r}")
    X = np.zeros((0, p))
    cuts = np.tile(np.linspace(0, 1, hyper.n_cuts), (p, 1))
    ncuts = np.full(p, hyper.n_cuts, np.int64)
    feat, cut, left, right, parent, depth, value, hi, free_stack, n_free, leaf_of = \
        K.init_arena(hyper.m, NODE_CAPACITY, 0)
    stats = np.zeros(4, np.int64)
    out = []
    for it in range(hyper.n_burn + hyper.n_keep):
        K.sweep(X, cuts, ncuts, np.zeros(0), np.zeros(0), feat, cut, left, right, parent, depth,
                value, hi, free_stack, n_free, leaf_of, 1.0, 1.0, hyper.alpha, hyper.beta, False,
                rng, stats)
        if it >= hyper.n_burn:
            out.append(K.count_leaves(feat, hi))
    return np.concatenate(out).astype(np.int64)
