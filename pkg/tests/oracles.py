"""Independent reference computations used by the tests.

Everything here is written from the definitions with plain Python loops or
scalar arithmetic, deliberately avoiding the library's own code paths.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections import defaultdict


def column_means_from_csv(path):
    sums, counts = defaultdict(float), defaultdict(int)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sums[row["asset_id"]] += float(row["close"])
            counts[row["asset_id"]] += 1
    return {a: sums[a] / counts[a] for a in sums}


def average_ranks(xs):
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    ranks = [0.0] * len(xs)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    sab = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    saa = sum((x - ma) ** 2 for x in a)
    sbb = sum((y - mb) ** 2 for y in b)
    return sab / math.sqrt(saa * sbb)


def spearman(a, b):
    return pearson(average_ranks(list(a)), average_ranks(list(b)))


def covariance(rows):
    """Sample covariance of a list of observation rows, n-1 denominator."""
    n, k = len(rows), len(rows[0])
    means = [sum(r[j] for r in rows) / n for j in range(k)]
    return [[sum((r[i] - means[i]) * (r[j] - means[j]) for r in rows) / (n - 1)
             for j in range(k)] for i in range(k)]


def simple_regression(x, y):
    """Intercept and slope by the two normal equations, solved by Cramer's rule."""
    n = len(x)
    sx, sy = sum(x), sum(y)
    sxx = sum(v * v for v in x)
    sxy = sum(u * v for u, v in zip(x, y))
    det = n * sxx - sx * sx
    return (sy * sxx - sx * sxy) / det, (n * sxy - sx * sy) / det


def inv2(m):
    (a, b), (c, d) = m
    det = a * d - b * c
    return [[d / det, -b / det], [-c / det, a / det]]


def matmul(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))]
            for i in range(len(a))]


def transpose(a):
    return [list(r) for r in zip(*a)]


def black_litterman_2x2(sigma, w_mkt, lam, tau, p, q, omega):
    """Posterior returns for N=2 via the precision-form formula and explicit 2x2 inverses.

    ``p`` is a list of view rows, ``omega`` the list of diagonal entries.
    """
    pi = [lam * (sigma[i][0] * w_mkt[0] + sigma[i][1] * w_mkt[1]) for i in range(2)]
    ts_inv = inv2([[tau * sigma[i][j] for j in range(2)] for i in range(2)])
    pto = [[p[k][i] / omega[k] for k in range(len(p))] for i in range(2)]   # P' Omega^-1
    ptop = matmul(pto, p)
    a = [[ts_inv[i][j] + ptop[i][j] for j in range(2)] for i in range(2)]
    rhs = [sum(ts_inv[i][j] * pi[j] for j in range(2)) + sum(pto[i][k] * q[k] for k in range(len(q)))
           for i in range(2)]
    a_inv = inv2(a)
    return [sum(a_inv[i][j] * rhs[j] for j in range(2)) for i in range(2)], pi


def trigger_point(k, c, sigma_i, sigma_p, rho):
    return k * c / (sigma_i * sigma_i + sigma_p * sigma_p - 2.0 * sigma_i * sigma_p * rho)


def brinson(w_p, r_p, w_b, r_b):
    alloc = [(wp - wb) * rb for wp, wb, rb in zip(w_p, w_b, r_b)]
    sel = [wb * (rp - rb) for wb, rp, rb in zip(w_b, r_p, r_b)]
    inter = [(wp - wb) * (rp - rb) for wp, wb, rp, rb in zip(w_p, w_b, r_p, r_b)]
    return alloc, sel, inter


# ---------------------------------------------------------------------------
# exhaustive rebalancing oracle


def _normalize(g, n):
    grown = [gi * (1.0 + ni) for gi, ni in zip(g, n)]
    s = sum(grown)
    return [x / s for x in grown]


def _vertices(axes, w):
    """Multilinear interpolation over the first N-1 coordinates: [(grid index, weight)]."""
    per_axis = []
    for ax, x in zip(axes, w[:-1]):
        x = min(max(x, ax[0]), ax[-1])
        j = 0
        while j + 1 < len(ax) - 1 and ax[j + 1] <= x:
            j += 1
        lo, hi = ax[j], ax[j + 1]
        t = (x - lo) / (hi - lo)
        per_axis.append([(j, 1.0 - t), (j + 1, t)])
    out = []
    for combo in itertools.product(*per_axis):
        weight = 1.0
        for _, p in combo:
            weight *= p
        if weight > 0:
            out.append((tuple(j for j, _ in combo), weight))
    return out


def exhaustive_policy(axes, actions, outcomes, probs, cost_rate, shortfall, horizon, tol=1e-12):
    """Finite-horizon optimal first decision for every grid state by tree search.

    ``axes`` are the grid coordinates for the first N-1 weights, ``actions`` the
    post-trade weight vectors, ``shortfall(w)`` the per-period tracking cost.
    Continuation values at off-grid weights are the interpolation lottery over
    grid vertices, searched recursively to the end of the horizon.
    Returns ``{state_index_tuple: choice}`` with choice -1 for hold or an
    action index, and the optimal value per state.
    """
    n = len(axes) + 1

    def point(idx):
        w = [axes[k][i] for k, i in enumerate(idx)]
        return w + [1.0 - sum(w)]

    memo = {}

    def value(idx, stage):
        if stage == horizon:
            return 0.0
        key = (idx, stage)
        if key not in memo:
            memo[key] = min(q for q, _, _ in options(idx, stage))
        return memo[key]

    def cont(w, stage):
        # expected interpolated cost-to-go after the return draw
        total = 0.0
        for r, pr in zip(outcomes, probs):
            nxt = _normalize(w, r)
            total += pr * sum(p * value(v, stage + 1) for v, p in _vertices(axes, nxt))
        return total

    def options(idx, stage):
        w = point(idx)
        feasible = w[-1] >= -1e-12
        out = []
        if feasible:
            out.append((shortfall(w) + cont(w, stage), 0.0, -1))
        for a, g in enumerate(actions):
            size = sum(abs(x - y) for x, y in zip(g, w))
            out.append((cost_rate * size + shortfall(g) + cont(list(g), stage), size, a))
        return out

    policy = {}
    values = {}
    for idx in itertools.product(*(range(len(ax)) for ax in axes)):
        w = point(idx)
        if w[-1] < -1e-12:
            continue
        opts = options(idx, 0)
        best = min(q for q, _, _ in opts)
        tied = [o for o in opts if o[0] <= best + tol * max(1.0, abs(best))]
        tied.sort(key=lambda o: (o[1], o[2]))
        policy[idx] = tied[0][2]
        values[idx] = best
    assert all(len(point(i)) == n for i in policy)
    return policy, values
