"""Reduced phase-space grid (r, u, mu) for spherically symmetric data.

mu is the cosine of the angle between x and v.  The deviation g = F - f is
stored at every node; interpolation is monotone cubic in r and linear in u
and mu.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import PchipInterpolator


def radial_nodes(n_r, r_max):
    """Uniform nodes on [0, 1] followed by geometric nodes out to r_max.

    The split is chosen so the uniform spacing matches the first geometric
    step as closely as possible.
    """
    if n_r < 4:
        raise ValueError("need at least 4 radial nodes")
    if not r_max > 0:
        raise ValueError("r_max must be positive")
    if r_max <= 1.0:
        return np.linspace(0.0, r_max, n_r)
    best = None
    for n_geo in range(1, n_r - 1):
        n_in = n_r - 1 - n_geo
        ratio = r_max ** (1.0 / n_geo)
        mismatch = abs(np.log((ratio - 1.0) * n_in))
        if best is None or mismatch < best[0]:
            best = (mismatch, n_in, n_geo)
    _, n_in, n_geo = best
    inner = np.linspace(0.0, 1.0, n_in + 1)
    outer = np.exp(np.log(r_max) * np.arange(1, n_geo + 1) / n_geo)
    return np.concatenate([inner, outer])


def simpson_weights(x):
    """Per-node weights of scipy's composite Simpson rule on the nodes x."""
    return simpson(np.eye(len(x)), x=x, axis=1)


@dataclass(frozen=True, eq=False)
class PhaseGrid:
    r: np.ndarray
    u: np.ndarray
    mu: np.ndarray
    mu_weights: np.ndarray
    u_weights: np.ndarray

    @property
    def shape(self):
        return (len(self.r), len(self.u), len(self.mu))

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def r_max(self):
        return float(self.r[-1])

    @property
    def u_max(self):
        return float(self.u[-1])

    def velocity_weights(self):
        """Weights w[j, k] with  int g dv  ~  sum_jk w[j, k] g[., j, k]."""
        return 2.0 * np.pi * np.outer(self.u_weights * self.u**2, self.mu_weights)

    def axes(self):
        return {"r": self.r.tolist(), "u": self.u.tolist(), "mu": self.mu.tolist()}


def build_grid(n_r=128, n_u=32, n_mu=16, r_max=1000.0, u_max=1.5):
    if min(n_r, n_u, n_mu) < 4:
        raise ValueError("need at least 4 nodes per axis")
    if not u_max > 0:
        raise ValueError("u_max must be positive")
    r = radial_nodes(n_r, r_max)
    if np.any(np.diff(r) <= 0):
        raise ValueError("radial nodes are not strictly increasing")
    u = np.linspace(0.0, u_max, n_u)
    mu, wmu = np.polynomial.legendre.leggauss(n_mu)
    return PhaseGrid(r=r, u=u, mu=mu, mu_weights=wmu, u_weights=simpson_weights(u))


@dataclass(eq=False)
class DeviationState:
    t: float
    grid: PhaseGrid
    g: np.ndarray

    def copy(self):
        return DeviationState(self.t, self.grid, self.g.copy())


def node_coords(grid):
    """Broadcast (r, u, mu) arrays of the full node set."""
    return np.meshgrid(grid.r, grid.u, grid.mu, indexing="ij")


def lift(r, u, mu):
    """Representative (x, v) with x on the first axis and v in the 1-2 plane."""
    r, u, mu = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (r, u, mu)))
    zero = np.zeros_like(r)
    x = np.stack([r, zero, zero], axis=-1)
    s = np.sqrt(np.clip(1.0 - mu * mu, 0.0, None))
    v = np.stack([u * mu, u * s, zero], axis=-1)
    return x, v


def project(x, v):
    """(|x|, |v|, x.v / |x||v|); mu = 1 when r or u vanishes."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    u = np.linalg.norm(v, axis=-1)
    denom = r * u
    dot = np.sum(x * v, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 1.0)
    return r, u, np.clip(mu, -1.0, 1.0)


class Interpolator:
    """Evaluates g off-node for one frozen DeviationState.

    Radial slopes are computed once (PCHIP), so repeated queries against the
    same state are cheap.
    """

    def __init__(self, state, tail_exponent=2.0):
        self.state = state
        grid = state.grid
        self.r = grid.r
        self.u = grid.u
        self.mu = grid.mu
        self.g = state.g
        with np.errstate(over="ignore", divide="ignore"):  # round-off sized g
            self.slopes = PchipInterpolator(grid.r, state.g, axis=0).derivative()(grid.r)
        self.tail_exponent = tail_exponent

    def __call__(self, r, u, mu, *, outside_u=None):
        r = np.asarray(r, dtype=float)
        u = np.asarray(u, dtype=float)
        mu = np.asarray(mu, dtype=float)
        if np.any(np.abs(mu) > 1.0 + 1e-12):
            raise ValueError("mu outside [-1, 1]")
        over = u > self.u[-1] * (1.0 + 1e-12)
        if np.any(over) and outside_u is None:
            raise ValueError("speed above u_max")
        if np.any(r < 0):
            raise ValueError("negative radius")
        uc = np.minimum(u, self.u[-1])

        rr = np.minimum(r, self.r[-1])
        i = np.clip(np.searchsorted(self.r, rr, side="right") - 1, 0, len(self.r) - 2)
        h = self.r[i + 1] - self.r[i]
        s = (rr - self.r[i]) / h
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)

        j = np.clip(np.searchsorted(self.u, uc, side="right") - 1, 0, len(self.u) - 2)
        a = (uc - self.u[j]) / (self.u[j + 1] - self.u[j])
        # mu nodes do not reach +-1: the end cells extrapolate linearly
        k = np.clip(np.searchsorted(self.mu, mu, side="right") - 1, 0, len(self.mu) - 2)
        b = (mu - self.mu[k]) / (self.mu[k + 1] - self.mu[k])

        out = np.zeros(np.broadcast(r, u, mu).shape)
        for dj, wj in ((0, 1 - a), (1, a)):
            for dk, wk in ((0, 1 - b), (1, b)):
                g0 = self.g[i, j + dj, k + dk]
                g1 = self.g[i + 1, j + dj, k + dk]
                d0 = self.slopes[i, j + dj, k + dk]
                d1 = self.slopes[i + 1, j + dj, k + dk]
                out += wj * wk * (h00 * g0 + h10 * h * d0 + h01 * g1 + h11 * h * d1)

        beyond = r > self.r[-1]
        if np.any(beyond):
            p = self.tail_exponent
            if np.isinf(p):
                factor = 0.0
            else:
                factor = (self.r[-1] / np.where(beyond, r, 1.0)) ** p
            out = np.where(beyond, out * factor, out)
        if outside_u is not None:
            out = np.where(over, outside_u, out)
        return out


def sample_g(state, r, u, mu, tail_exponent=2.0):
    return Interpolator(state, tail_exponent)(r, u, mu)


def range_violations(state, background, f0_sup, tol=1e-12):
    """Count nodes where f = F - g leaves [-tol, f0_sup + tol]."""
    _, U, _ = node_coords(state.grid)
    f = background.radial(U) - state.g
    low = f < -tol
    high = f > f0_sup + tol
    return {
        "below": int(np.count_nonzero(low)),
        "above": int(np.count_nonzero(high)),
        "fraction": float(np.count_nonzero(low | high)) / f.size,
        "min_f": float(f.min()),
        "max_f": float(f.max()),
    }


def write_snapshot(path, state):
    """Delimited text dump with header (r, u, mu, g) in node-major order."""
    R, U, M = node_coords(state.grid)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "u", "mu", "g"])
        for row in zip(R.ravel(), U.ravel(), M.ravel(), state.g.ravel()):
            w.writerow([repr(float(c)) for c in row])
