"""Compiled inner loops: per-point GPD losses, the annealing chain and the
switch-budget dynamic program.

Everything here works on plain float64/int64 arrays and assumes validated
inputs; the public modules do the checking.
"""

import math

import numpy as np
from numba import njit

XI_SWITCH = 1e-8
XI_BOUND = 0.5


@njit(cache=True)
def neg_logpdf(y, xi, sigma):
    # +inf on any violated constraint: sigma > 0, |xi| < 0.5, 1 + xi*y/sigma > 0
    if not (sigma > 0.0):
        return math.inf
    if not (-XI_BOUND < xi < XI_BOUND):
        return math.inf
    z = xi * y / sigma
    if not (z > -1.0):
        return math.inf
    if abs(xi) < XI_SWITCH:
        return math.log(sigma) + y / sigma
    return math.log(sigma) + (1.0 / xi + 1.0) * math.log1p(z)


@njit(cache=True)
def _affine(X, i, coef, offset, q):
    acc = 0.0
    for p in range(q):
        acc += X[i, p] * coef[offset + p]
    return acc


@njit(cache=True)
def point_losses(y, X, coef, out):
    """Fill ``out`` with -log h(y_i) under one regime; ``coef`` = (xi..., sigma...)."""
    q = X.shape[1]
    for i in range(y.shape[0]):
        xi = _affine(X, i, coef, 0, q)
        sg = _affine(X, i, coef, q, q)
        out[i] = neg_logpdf(y[i], xi, sg)


@njit(cache=True)
def loss_sum(y, X, coef):
    q = X.shape[1]
    total = 0.0
    for i in range(y.shape[0]):
        xi = _affine(X, i, coef, 0, q)
        sg = _affine(X, i, coef, q, q)
        v = neg_logpdf(y[i], xi, sg)
        if v == math.inf:
            return math.inf
        total += v
    return total


@njit(cache=True)
def _penalty(coef, weights, lam):
    if lam == 0.0:
        return 0.0
    acc = 0.0
    for c in range(coef.shape[0]):
        acc += weights[c] * abs(coef[c])
    return lam * acc


@njit(cache=True)
def _fill_state(y, X, coef, xi, sg, lsg):
    q = X.shape[1]
    for i in range(y.shape[0]):
        xi[i] = _affine(X, i, coef, 0, q)
        sg[i] = _affine(X, i, coef, q, q)
        lsg[i] = math.log(sg[i]) if sg[i] > 0.0 else -math.inf


@njit(cache=True)
def _loss_from_state(y, xi, sg, lsg):
    total = 0.0
    for i in range(y.shape[0]):
        s = sg[i]
        x = xi[i]
        if not (s > 0.0) or not (-XI_BOUND < x < XI_BOUND):
            return math.inf
        z = x * y[i] / s
        if not (z > -1.0):
            return math.inf
        if abs(x) < XI_SWITCH:
            total += lsg[i] + y[i] / s
        else:
            total += lsg[i] + (1.0 / x + 1.0) * math.log1p(z)
    return total


@njit(cache=True)
def anneal(y, X, coef, weights, lam, comps, normals, uniforms, zero_moves,
           scales, floors, temperature, decay, target, rate, patience):
    """Componentwise annealed random walk; returns the best point visited.

    ``scales`` is updated in place (Robbins-Monro toward ``target``
    acceptance). ``zero_moves[i]`` replaces the Gaussian proposal by an exact
    zero for that step. The chain stops early after ``patience`` consecutive
    steps without a new best (``patience <= 0`` disables this). Returns
    (best_coef, best_value, final_temperature, steps_taken). Per-point shape, scale and log-scale are cached, so a shape move costs
    one logarithm per point; values match :func:`loss_sum` exactly.
    """
    n = y.shape[0]
    q = X.shape[1]
    cur = coef.copy()
    xi = np.empty(n)
    sg = np.empty(n)
    lsg = np.empty(n)
    _fill_state(y, X, cur, xi, sg, lsg)
    xi_new = np.empty(n)
    sg_new = np.empty(n)
    lsg_new = np.empty(n)
    f = loss_sum(y, X, cur) + _penalty(cur, weights, lam)
    best = cur.copy()
    fbest = f
    up = math.exp(rate * (1.0 - target))
    down = math.exp(-rate * target)
    stale = 0
    steps = 0
    for it in range(comps.shape[0]):
        if patience > 0 and stale >= patience:
            break
        steps += 1
        stale += 1
        c = comps[it]
        old = cur[c]
        zm = zero_moves[it]
        if zm:
            if old == 0.0:
                temperature *= decay
                continue
            cur[c] = 0.0
        else:
            cur[c] = old + scales[c] * normals[it]
        if c < q:
            for i in range(n):
                xi_new[i] = _affine(X, i, cur, 0, q)
            fn = _loss_from_state(y, xi_new, sg, lsg)
        else:
            for i in range(n):
                v = _affine(X, i, cur, q, q)
                sg_new[i] = v
                lsg_new[i] = math.log(v) if v > 0.0 else -math.inf
            fn = _loss_from_state(y, xi, sg_new, lsg_new)
        accept = False
        if fn < math.inf:
            fn += _penalty(cur, weights, lam)
            d = fn - f
            if d <= 0.0 or uniforms[it] < math.exp(-d / temperature):
                accept = True
        if accept:
            f = fn
            if c < q:
                xi, xi_new = xi_new, xi
            else:
                sg, sg_new = sg_new, sg
                lsg, lsg_new = lsg_new, lsg
            if f < fbest:
                fbest = f
                best[:] = cur
                stale = 0
            if not zm:
                scales[c] *= up
        else:
            cur[c] = old
            if not zm:
                scales[c] *= down
        if scales[c] < floors[c]:
            scales[c] = floors[c]
        temperature *= decay
    return best, fbest, temperature, steps


@njit(cache=True)
def budget_dp(L, C):
    """Exact minimum of sum_j L[j, r_j] over label paths with <= C switches.

    Costs accumulate left to right, so the optimum equals the plain left-fold
    sum of the returned path bit for bit. Ties go to the lexicographically
    smallest path (lowest label at the earliest differing position); each
    prefix maps to a unique (label, switches) state, so ties between states
    are resolved by a per-layer lexicographic rank of their prefixes.
    """
    T, K = L.shape
    W = C + 1
    M = K * W
    big = M * K + 1
    cost = np.full(M, math.inf)
    reach = np.zeros(M, dtype=np.bool_)
    rank = np.full(M, big, dtype=np.int64)
    pred = np.full((T, M), -1, dtype=np.int64)

    for k in range(K):
        s = k * W
        cost[s] = L[0, k]
        reach[s] = True
        rank[s] = k

    new_cost = np.empty(M)
    new_reach = np.empty(M, dtype=np.bool_)
    keys = np.empty(M, dtype=np.int64)
    for j in range(1, T):
        new_cost[:] = math.inf
        new_reach[:] = False
        for k in range(K):
            lk = L[j, k]
            cmax = min(C, j)
            for c in range(cmax + 1):
                s = k * W + c
                found = False
                bv = math.inf
                br = big
                bp = -1
                # stay in k
                if reach[s]:
                    found = True
                    bv = cost[s] + lk
                    br = rank[s]
                    bp = s
                if c >= 1:
                    for kp in range(K):
                        if kp == k:
                            continue
                        sp = kp * W + c - 1
                        if not reach[sp]:
                            continue
                        v = cost[sp] + lk
                        r = rank[sp]
                        if (not found) or v < bv or (v == bv and r < br):
                            found = True
                            bv = v
                            br = r
                            bp = sp
                if found:
                    new_cost[s] = bv
                    new_reach[s] = True
                    pred[j, s] = bp
        for s in range(M):
            if new_reach[s]:
                keys[s] = rank[pred[j, s]] * K + s // W
            else:
                keys[s] = big * K
        order = np.argsort(keys)
        for pos in range(M):
            rank[order[pos]] = pos
        for s in range(M):
            if not new_reach[s]:
                rank[s] = big
        cost[:] = new_cost
        reach[:] = new_reach

    bs = -1
    bv = math.inf
    br = big
    for s in range(M):
        if not reach[s]:
            continue
        v = cost[s]
        if bs < 0 or v < bv or (v == bv and rank[s] < br):
            bs = s
            bv = v
            br = rank[s]
    path = np.empty(T, dtype=np.int64)
    s = bs
    for j in range(T - 1, -1, -1):
        path[j] = s // W
        if j > 0:
            s = pred[j, s]
    return path, bv


def warmup():
    """Compile every kernel once (before forking worker processes)."""
    y = np.ones(2)
    X = np.ones((2, 1))
    coef = np.array([0.0, 1.0])
    out = np.empty(2)
    point_losses(y, X, coef, out)
    loss_sum(y, X, coef)
    anneal(y, X, coef, np.ones(2), 0.0, np.zeros(1, np.int64), np.zeros(1), np.zeros(1),
           np.zeros(1, np.bool_), np.ones(2), np.full(2, 1e-8), 1.0, 0.999, 0.3, 0.05, 0)
    budget_dp(np.zeros((2, 2)), 1)
