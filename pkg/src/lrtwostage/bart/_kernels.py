"""Compiled inner loops for the BART sampler.

Trees live in per-ensemble arenas of ``cap`` nodes. A node is a leaf when
``feat == LEAF`` and unused when ``feat == FREE``; node 0 is always the root.
``leaf_of[j, i]`` tracks the leaf of tree ``j`` holding observation ``i``.
"""
import math

import numpy as np
from numba import njit

LEAF = -1
FREE = -2


@njit(cache=True)
def _leaf_loglik(n, s, sigma2, tau2):
    # log marginal of a leaf's residuals, dropping terms that cancel in ratios
    return -0.5 * math.log(1.0 + n * tau2 / sigma2) + 0.5 * tau2 * s * s / (
        sigma2 * (sigma2 + n * tau2))


@njit(cache=True)
def _alloc(j, hi, free_stack, n_free, cap):
    if n_free[j] > 0:
        n_free[j] -= 1
        return free_stack[j, n_free[j]]
    if hi[j] < cap:
        hi[j] += 1
        return hi[j] - 1
    return -1


@njit(cache=True)
def init_arena(m, cap, n):
    feat = np.full((m, cap), FREE, np.int32)
    feat[:, 0] = LEAF
    cut = np.zeros((m, cap), np.int32)
    left = np.full((m, cap), -1, np.int32)
    right = np.full((m, cap), -1, np.int32)
    parent = np.full((m, cap), -1, np.int32)
    depth = np.zeros((m, cap), np.int32)
    value = np.zeros((m, cap))
    hi = np.ones(m, np.int32)
    free_stack = np.zeros((m, cap), np.int32)
    n_free = np.zeros(m, np.int32)
    leaf_of = np.zeros((m, n), np.int32)
    return feat, cut, left, right, parent, depth, value, hi, free_stack, n_free, leaf_of


@njit(cache=True)
def sweep(X, cuts, ncuts, target, fit, feat, cut, left, right, parent, depth, value, hi,
          free_stack, n_free, leaf_of, sigma2, tau2, alpha, beta, use_data, rng, stats):
    """One backfitting pass over all trees: a GROW/PRUNE Metropolis step, then
    conjugate leaf draws. ``fit`` is updated in place.

    stats: [grow proposed, grow accepted, prune proposed, prune accepted]
    """
    m, cap = feat.shape
    n = target.shape[0]
    p = X.shape[1]
    r = np.empty(n)
    leaves = np.empty(cap, np.int32)
    nogs = np.empty(cap, np.int32)
    nacc = np.zeros(cap)
    sacc = np.zeros(cap)
    for j in range(m):
        if use_data:
            for i in range(n):
                r[i] = target[i] - fit[i] + value[j, leaf_of[j, i]]
        nl = 0
        nn = 0
        for k in range(hi[j]):
            f = feat[j, k]
            if f == LEAF:
                leaves[nl] = k
                nl += 1
            elif f >= 0:
                if feat[j, left[j, k]] == LEAF and feat[j, right[j, k]] == LEAF:
                    nogs[nn] = k
                    nn += 1
        if nl == 1 or rng.random() < 0.5:
            stats[0] += 1
            node = leaves[rng.integers(0, nl)]
            v = rng.integers(0, p)
            continue_ok = ncuts[v] > 0
            if continue_ok:
                c = rng.integers(0, ncuts[v])
                thr = cuts[v, c]
                nL = 0
                nR = 0
                sL = 0.0
                sR = 0.0
                if use_data:
                    for i in range(n):
                        if leaf_of[j, i] == node:
                            if X[i, v] <= thr:
                                nL += 1
                                sL += r[i]
                            else:
                                nR += 1
                                sR += r[i]
                    if nL == 0 or nR == 0:
                        continue_ok = False
            if continue_ok:
                d = depth[j, node]
                pd = alpha * (1.0 + d) ** (-beta)
                pc = alpha * (2.0 + d) ** (-beta)
                par = parent[j, node]
                par_was_nog = 0
                if par >= 0:
                    sib = left[j, par] if right[j, par] == node else right[j, par]
                    if feat[j, sib] == LEAF:
                        par_was_nog = 1
                nog_new = nn + 1 - par_was_nog
                logr = math.log(0.5) - math.log(1.0 if nl == 1 else 0.5)
                logr += math.log(nl) - math.log(nog_new)
                logr += math.log(pd) + 2.0 * math.log(1.0 - pc) - math.log(1.0 - pd)
                if use_data:
                    logr += (_leaf_loglik(nL, sL, sigma2, tau2) + _leaf_loglik(nR, sR, sigma2, tau2)
                             - _leaf_loglik(nL + nR, sL + sR, sigma2, tau2))
                if math.log(rng.random()) < logr:
                    a = _alloc(j, hi, free_stack, n_free, cap)
                    b = _alloc(j, hi, free_stack, n_free, cap)
                    if a >= 0 and b >= 0:
                        stats[1] += 1
                        feat[j, node] = v
                        cut[j, node] = c
                        left[j, node] = a
                        right[j, node] = b
                        for q in (a, b):
                            feat[j, q] = LEAF
                            parent[j, q] = node
                            depth[j, q] = d + 1
                            left[j, q] = -1
                            right[j, q] = -1
                            value[j, q] = value[j, node]
                        if use_data:
                            for i in range(n):
                                if leaf_of[j, i] == node:
                                    leaf_of[j, i] = a if X[i, v] <= thr else b
                    else:
                        # arena full: give back whatever was taken
                        for q in (a, b):
                            if q >= 0:
                                feat[j, q] = FREE
                                free_stack[j, n_free[j]] = q
                                n_free[j] += 1
        else:
            stats[2] += 1
            node = nogs[rng.integers(0, nn)]
            a = left[j, node]
            b = right[j, node]
            d = depth[j, node]
            pd = alpha * (1.0 + d) ** (-beta)
            pc = alpha * (2.0 + d) ** (-beta)
            nl_new = nl - 1
            logr = math.log(1.0 if nl_new == 1 else 0.5) - math.log(0.5)
            logr += math.log(nn) - math.log(nl_new)
            logr += math.log(1.0 - pd) - math.log(pd) - 2.0 * math.log(1.0 - pc)
            if use_data:
                nL = 0
                nR = 0
                sL = 0.0
                sR = 0.0
                for i in range(n):
                    li = leaf_of[j, i]
                    if li == a:
                        nL += 1
                        sL += r[i]
                    elif li == b:
                        nR += 1
                        sR += r[i]
                logr += (_leaf_loglik(nL + nR, sL + sR, sigma2, tau2)
                         - _leaf_loglik(nL, sL, sigma2, tau2) - _leaf_loglik(nR, sR, sigma2, tau2))
            if math.log(rng.random()) < logr:
                stats[3] += 1
                feat[j, node] = LEAF
                left[j, node] = -1
                right[j, node] = -1
                for q in (a, b):
                    feat[j, q] = FREE
                    free_stack[j, n_free[j]] = q
                    n_free[j] += 1
                if use_data:
                    for i in range(n):
                        li = leaf_of[j, i]
                        if li == a or li == b:
                            leaf_of[j, i] = node
        if not use_data:
            continue
        for k in range(hi[j]):
            nacc[k] = 0.0
            sacc[k] = 0.0
        for i in range(n):
            k = leaf_of[j, i]
            nacc[k] += 1.0
            sacc[k] += r[i]
        for k in range(hi[j]):
            if feat[j, k] == LEAF:
                pv = 1.0 / (nacc[k] / sigma2 + 1.0 / tau2)
                value[j, k] = pv * sacc[k] / sigma2 + math.sqrt(pv) * rng.standard_normal()
        for i in range(n):
            fit[i] = target[i] - r[i] + value[j, leaf_of[j, i]]


@njit(cache=True)
def count_leaves(feat, hi):
    m = feat.shape[0]
    out = np.zeros(m, np.int32)
    for j in range(m):
        for k in range(hi[j]):
            if feat[j, k] == LEAF:
                out[j] += 1
    return out


@njit(cache=True)
def compact(feat, cut, left, right, value, hi, cuts):
    """Flatten the live nodes of every tree in preorder.

    Child pointers in the result index into the flattened arrays.
    """
    m = feat.shape[0]
    total = 0
    for j in range(m):
        for k in range(hi[j]):
            if feat[j, k] != FREE:
                total += 1
    c_feat = np.empty(total, np.int32)
    c_thr = np.empty(total)
    c_left = np.empty(total, np.int32)
    c_right = np.empty(total, np.int32)
    c_val = np.empty(total)
    roots = np.empty(m, np.int32)
    stack = np.empty(feat.shape[1], np.int32)
    dest = np.empty(feat.shape[1], np.int32)
    pos = 0
    for j in range(m):
        roots[j] = pos
        sp = 0
        stack[0] = 0
        dest[0] = pos
        pos += 1
        sp = 1
        while sp > 0:
            sp -= 1
            k = stack[sp]
            o = dest[sp]
            f = feat[j, k]
            c_feat[o] = f
            if f == LEAF:
                c_thr[o] = 0.0
                c_left[o] = -1
                c_right[o] = -1
                c_val[o] = value[j, k]
            else:
                c_thr[o] = cuts[f, cut[j, k]]
                c_val[o] = 0.0
                lo = pos
                ro = pos + 1
                pos += 2
                c_left[o] = lo
                c_right[o] = ro
                stack[sp] = right[j, k]
                dest[sp] = ro
                sp += 1
                stack[sp] = left[j, k]
                dest[sp] = lo
                sp += 1
    return c_feat, c_thr, c_left, c_right, c_val, roots


@njit(cache=True)
def predict_sum(c_feat, c_thr, c_left, c_right, c_val, roots, X):
    """Sum-of-trees prediction for each (draw, row); ``roots`` is K x m."""
    K, m = roots.shape
    n = X.shape[0]
    out = np.zeros((K, n))
    for k in range(K):
        for i in range(n):
            s = 0.0
            for j in range(m):
                node = roots[k, j]
                while c_feat[node] >= 0:
                    if X[i, c_feat[node]] <= c_thr[node]:
                        node = c_left[node]
                    else:
                        node = c_right[node]
                s += c_val[node]
            out[k, i] = s
    return out
