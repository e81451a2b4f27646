"""Independent reference computations shared by the fitter tests.

Grid searches profile the linear parameters (amplitude, offset) in closed
form, so they share no code with the nonlinear optimizer.
"""

import math

import numpy as np
from scipy.special import erfc


def fd_jacobian(f, x, p, rel=1e-6):
    p = np.asarray(p, dtype=float)
    cols = []
    for i in range(p.size):
        h = rel * max(abs(p[i]), 1.0)
        up, dn = p.copy(), p.copy()
        up[i] += h
        dn[i] -= h
        cols.append((f(x, up) - f(x, dn)) / (2 * h))
    return np.column_stack(cols)


def assert_jacobian(f, jac, x, p):
    a = jac(x, np.asarray(p, dtype=float))
    n = fd_jacobian(f, x, p)
    scale = np.maximum(np.abs(a).max(axis=0), 1e-12)
    assert np.max(np.abs(a - n) / scale) < 1e-6


def edge_grid(scan, x0s, sigmas):
    """Brute-force (x0, sigma) grid; amplitude and offset profiled by linear least squares."""
    x = scan.positions_m
    y = scan.transmitted_counts / scan.shots_per_position
    best = (np.inf, None, None)
    for s in sigmas:
        t = 0.5 * erfc((x[None, :] - x0s[:, None]) / (s * math.sqrt(2)))
        # closed-form 2-parameter regression per x0
        tm, ym = t.mean(1, keepdims=True), y.mean()
        amp = ((t - tm) * (y - ym)).sum(1) / ((t - tm) ** 2).sum(1)
        off = ym - amp * tm[:, 0]
        rss = ((amp[:, None] * t + off[:, None] - y) ** 2).sum(1)
        k = int(np.argmin(rss))
        if rss[k] < best[0]:
            best = (rss[k], x0s[k], s)
    return best[1], best[2]


def dips_grid(spec, n_dips, centers, splits, widths):
    x = (spec.frequency_hz - 2.87e9) / 1e6
    y = spec.signal
    best = (np.inf, None)
    for w in widths:
        for sp in splits:
            f0 = centers[:, None]
            shape = sum(1 / (1 + (2 * (x[None, :] - f0 - o * sp) / w) ** 2)
                        for o in ((-0.5, 0.5) if n_dips == 2 else (-1, 0, 1)))
            sm = shape.mean(1, keepdims=True)
            slope = ((shape - sm) * (y - y.mean())).sum(1) / ((shape - sm) ** 2).sum(1)
            icpt = y.mean() - slope * sm[:, 0]
            rss = ((slope[:, None] * shape + icpt[:, None] - y) ** 2).sum(1)
            k = int(np.argmin(rss))
            if rss[k] < best[0]:
                best = (rss[k], (centers[k], sp, w))
    return best[1]


def decay_grid(curve, grid):
    """Best T2 on ``grid`` for a mono-exponential decay with free baseline and contrast."""
    e = np.exp(-curve.delay_s[None, :] / grid[:, None])
    em = e.mean(1, keepdims=True)
    y = curve.signal
    c = ((e - em) * (y - y.mean())).sum(1) / ((e - em) ** 2).sum(1)
    b = y.mean() - c * em[:, 0]
    rss = ((c[:, None] * e + b[:, None] - y) ** 2).sum(1)
    return grid[np.argmin(rss)]
