"""Two-step maximization: coarse grid seeding followed by local ascent."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SearchSettings:
    grid_size: int = 64
    max_iterations: int = 200
    fd_step: float = 1e-6
    n_starts: int = 8

    def __post_init__(self):
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


def numeric_gradient(fun, x, steps):
    g = np.empty_like(x)
    for i, h in enumerate(steps):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def numeric_hessian(fun, x, steps, f0=None):
    n = x.size
    f0 = fun(x) if f0 is None else f0
    hess = np.empty((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = steps[i]
        hess[i, i] = (fun(x + ei) - 2 * f0 + fun(x - ei)) / steps[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = steps[j]
            val = (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)) / (4 * steps[i] * steps[j])
            hess[i, j] = hess[j, i] = val
    return hess


def ascend(fun, x0, steps, max_iterations=200):
    """Local ascent from ``x0`` using central-difference derivatives.

    Takes Newton steps along directions of negative curvature, gradient
    steps elsewhere, and halves the step until the objective improves.
    Never returns a point worse than ``x0``.
    """
    x = np.array(x0, dtype=float)
    steps = np.asarray(steps, dtype=float)
    f = fun(x)
    if not np.isfinite(f):
        return x, f
    hess_steps = np.sqrt(steps) * 1e-1
    for _ in range(max_iterations):
        # differences that straddle an infeasible region come out non-finite
        with np.errstate(invalid="ignore"):
            g = numeric_gradient(fun, x, steps)
            if not np.all(np.isfinite(g)) or not np.any(g):
                break
            h = numeric_hessian(fun, x, hess_steps, f)
        direction = np.zeros_like(x)
        if np.all(np.isfinite(h)):
            w, v = np.linalg.eigh(h)
            scale = max(np.max(np.abs(w)), 1e-300)
            proj = v.T @ g
            for i in range(len(w)):
                if w[i] < -1e-9 * scale:
                    direction -= proj[i] / w[i] * v[:, i]
                else:
                    direction += proj[i] / scale * v[:, i]
        else:
            direction = g * steps
        improved = False
        for _ in range(60):
            cand = x + direction
            fc = fun(cand)
            if np.isfinite(fc) and fc > f:
                improved = True
                break
            direction = direction / 2
        if not improved:
            break
        # below the difference step the derivatives carry no more information
        done = np.all(np.abs(cand - x) <= steps) or fc - f <= 1e-14 * abs(fc)
        x, f = cand, fc
        if done:
            break
    return x, f


def two_step_maximize(fun, grid_points, grid_values, steps, settings):
    """Refine the ``n_starts`` best grid points with :func:`ascend` and keep the best.

    A single start is not enough for narrow main lobes: a grid cell next
    to a strong sidelobe can outscore every cell on the true peak.
    Returns ``(x, f, seed, seed_value)`` where ``seed`` started the winner.
    """
    vals = np.where(np.isfinite(grid_values), grid_values, -np.inf)
    k = min(settings.n_starts, vals.size)
    order = np.argsort(-vals, kind="stable")[:k]
    best = None
    for idx in order:
        if not np.isfinite(vals[idx]) and best is not None:
            break
        seed = np.asarray(grid_points[idx], dtype=float)
        x, f = ascend(fun, seed, steps, settings.max_iterations)
        if best is None or f > best[1]:
            best = (x, f, seed, float(grid_values[idx]))
    return best
