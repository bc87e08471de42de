"""Charge density, enclosed charge and the radial self-consistent field.

Under spherical symmetry the field is E(x) = m(|x|) x / |x|^3, with m the
charge inside the ball of radius |x|.  m is interpolated by a monotone cubic
(PCHIP) on the prefix sums; the gradient of E used by the variational
equations is the exact derivative of that interpolant, so the discrete flow
and its Jacobian are consistent.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import PchipInterpolator


def compute_density(state):
    """rho(r_i) = 2 pi int int g u^2 dmu du (Gauss-Legendre in mu, Simpson in u)."""
    w = state.grid.velocity_weights()
    return np.einsum("ijk,jk->i", state.g, w)


def enclosed_charge(rho, r):
    """m(r_i) = int_0^{r_i} 4 pi s^2 rho(s) ds by the trapezoid rule, m(0) = 0."""
    r = np.asarray(r, dtype=float)
    return cumulative_trapezoid(4.0 * np.pi * r * r * np.asarray(rho, dtype=float), r, initial=0.0)


@dataclass(eq=False)
class RadialFieldSnapshot:
    t: float
    r: np.ndarray
    rho: np.ndarray
    m: np.ndarray = None
    slopes: np.ndarray = dc_field(default=None, repr=False)

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        if self.m is None:
            self.m = enclosed_charge(self.rho, self.r)
        self.m = np.asarray(self.m, dtype=float)
        if self.r[0] != 0.0:
            raise ValueError("radial nodes must start at 0")
        if self.slopes is None:
            # round-off sized m can overflow the harmonic mean; the slope is then 0
            with np.errstate(over="ignore", divide="ignore"):
                self.slopes = PchipInterpolator(self.r[1:], self.m[1:]).derivative()(self.r[1:])

    @classmethod
    def from_state(cls, state, rho=None):
        rho = compute_density(state) if rho is None else rho
        return cls(state.t, state.grid.r, rho)

    # m and dm/dr; cubic growth m(r1) (r/r1)^3 inside the first cell
    def enclosed(self, r):
        r = np.asarray(r, dtype=float)
        m, _ = self._m_and_dm(r)
        return m

    def _m_and_dm(self, r):
        nodes = self.r[1:]
        vals = self.m[1:]
        d = self.slopes
        r1 = nodes[0]
        rc = np.clip(r, r1, nodes[-1])
        i = np.clip(np.searchsorted(nodes, rc, side="right") - 1, 0, len(nodes) - 2)
        h = nodes[i + 1] - nodes[i]
        s = (rc - nodes[i]) / h
        m0, m1, d0, d1 = vals[i], vals[i + 1], d[i], d[i + 1]
        m = ((1 + 2 * s) * (1 - s) ** 2 * m0 + s * (1 - s) ** 2 * h * d0
             + s * s * (3 - 2 * s) * m1 + s * s * (s - 1) * h * d1)
        dm = (6 * s * (s - 1) * (m0 - m1) / h + (1 - s) * (1 - 3 * s) * d0
              + s * (3 * s - 2) * d1)
        inner = r < r1
        c = vals[0] / r1**3
        m = np.where(inner, c * r**3, m)
        dm = np.where(inner, 3.0 * c * r * r, dm)
        outer = r > nodes[-1]
        dm = np.where(outer, 0.0, dm)
        return m, dm

    def radial(self, r):
        """Radial component h(r) = m/r^2 and its derivative h'(r)."""
        r = np.asarray(r, dtype=float)
        m, dm = self._m_and_dm(r)
        r1 = self.r[1]
        inner = r < r1
        c = self.m[1] / r1**3
        safe = np.where(inner, 1.0, r)
        h = np.where(inner, c * r, m / safe**2)
        dh = np.where(inner, c, dm / safe**2 - 2.0 * m / safe**3)
        return h, dh

    def density_at(self, r):
        """Density implied by the interpolated m, i.e. m'(r) / (4 pi r^2)."""
        r = np.asarray(r, dtype=float)
        _, dm = self._m_and_dm(r)
        r1 = self.r[1]
        inner = r < r1
        safe = np.where(inner, 1.0, r)
        return np.where(inner, 3.0 * self.m[1] / r1**3, dm / safe**2) / (4.0 * np.pi)

    def field(self, x):
        return field_at(self, x)

    def jacobian(self, x):
        return radial_jacobian(self.radial, x)

    def rows(self):
        h, _ = self.radial(self.r)
        return np.column_stack([self.r, self.rho, self.m, np.abs(h)])


def radial_vector(h, x):
    """h(r) x / r, with the r = 0 value taken as 0."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    safe = np.where(r > 0, r, 1.0)
    return (np.where(r > 0, h / safe, 0.0))[..., None] * x


def radial_jacobian(radial, x):
    """Jacobian J[..., k, i] = d/dx_i of h(r) x_k / r for a radial profile."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    h, dh = radial(r)
    safe = np.where(r > 0, r, 1.0)
    n = x / safe[..., None]
    h_over_r = np.where(r > 0, h / safe, dh)
    nn = n[..., :, None] * n[..., None, :]
    eye = np.eye(3)
    return h_over_r[..., None, None] * eye + (dh - h_over_r)[..., None, None] * nn


def field_at(snapshot, x):
    x = np.asarray(x, dtype=float)
    h, _ = snapshot.radial(np.linalg.norm(x, axis=-1))
    return radial_vector(h, x)


def total_field(snapshot, external, t, x):
    return field_at(snapshot, x) + external(t, x)


def write_field_snapshot(path, snapshot):
    np.savetxt(path, snapshot.rows(), delimiter=",", header="r,rho,m,E_mag",
               comments="", fmt="%.17g")


# ------------------------------------------------------------- oracles


@dataclass(frozen=True)
class Lattice:
    """Cell-centred cubic lattice: centres lo + (i + 1/2) h along each axis."""

    lo: float
    h: float
    n: int

    def centres(self):
        c = self.lo + (np.arange(self.n) + 0.5) * self.h
        return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)

    def cell_average(self, density, sub=4):
        """Average a callable density over each cell with sub^3 midpoint samples."""
        offs = (np.arange(sub) + 0.5) / sub - 0.5
        centres = self.centres()
        acc = np.zeros(centres.shape[:-1])
        for a in offs:
            for b in offs:
                for c in offs:
                    acc += density(centres + self.h * np.array([a, b, c]))
        return acc / sub**3

    def cell_moments(self, density, sub=4):
        """Cell averages plus the centre of charge of each cell (centre if empty)."""
        offs = (np.arange(sub) + 0.5) / sub - 0.5
        centres = self.centres()
        acc = np.zeros(centres.shape[:-1])
        first = np.zeros(centres.shape)
        for a in offs:
            for b in offs:
                for c in offs:
                    d = self.h * np.array([a, b, c])
                    val = density(centres + d)
                    acc += val
                    first += val[..., None] * d
        with np.errstate(invalid="ignore", divide="ignore"):
            shift = np.where(acc[..., None] != 0, first / acc[..., None], 0.0)
        return acc / sub**3, centres + shift


def gauss_oracle(rho, lattice, x, chunk=256, density=None, near=3, sub=7, positions=None):
    """Direct quadrature of E(x) = int rho(y) (x - y)/|x - y|^3 dy on a lattice.

    rho holds cell values on `lattice`.  The cell containing each evaluation
    point is skipped.  For a point at a cell centre with locally uniform
    density that cell contributes nothing by symmetry, otherwise it is
    bounded by 2 pi |rho| h (recorded as `self_cell_bound`).  The truncation
    estimate is the charge carried by the outermost lattice shell times the
    kernel at distance h, a crude upper bound for the cut-off tail.

    If the callable `density` is given, points whose neighbourhood (cells
    within `near`) is not uniform get that neighbourhood split into sub^3
    point charges sampled from the callable, and only the sub-cell holding
    the point is skipped (sub odd keeps a cell-centred point at a sub-cell
    centre).  The self bound then shrinks by 1/sub.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    rho = np.asarray(rho, dtype=float)
    if density is not None and sub % 2 == 0:
        raise ValueError("sub must be odd")
    h = lattice.h
    grid_c = lattice.centres().reshape(-1, 3)
    centres = grid_c if positions is None else np.asarray(positions, dtype=float).reshape(-1, 3)
    q = rho.ravel() * h**3
    keep = q != 0.0
    centres, q = centres[keep], q[keep]
    idx_src = np.floor((grid_c[keep] - lattice.lo) / h).astype(int)
    idx_x = np.floor((x - lattice.lo) / h).astype(int)
    refine = np.zeros(len(x), dtype=bool)
    if density is not None:
        for i, ci in enumerate(idx_x):
            lo = np.clip(ci - near, 0, lattice.n)
            hi = np.clip(ci + near + 1, 0, lattice.n)
            block = rho[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
            refine[i] = block.size > 0 and np.ptp(block) > 0
    E = np.zeros_like(x)
    for start in range(0, len(x), chunk):
        xs = x[start:start + chunk]
        d = xs[:, None, :] - centres[None, :, :]
        r2 = np.einsum("abk,abk->ab", d, d)
        gap = np.max(np.abs(idx_src[None, :, :] - idx_x[start:start + chunk, None, :]), axis=-1)
        reach = np.where(refine[start:start + chunk], near, 0)
        skip = (gap <= reach[:, None]) | (r2 == 0)
        w = np.where(skip, 0.0, q[None, :] / np.where(r2 > 0, r2, 1.0) ** 1.5)
        E[start:start + chunk] = np.einsum("ab,abk->ak", w, d)
    if np.any(refine):
        E[refine] += _near_field(density, lattice, x[refine], idx_x[refine], near, sub)
    shell = np.zeros_like(rho, dtype=bool)
    shell[[0, -1], :, :] = shell[:, [0, -1], :] = shell[:, :, [0, -1]] = True
    edge_charge = float(np.sum(np.abs(rho[shell]))) * h**3
    bound = 2.0 * np.pi * float(np.max(np.abs(rho), initial=0.0)) * h
    return E, {
        "truncation_estimate": edge_charge / h**2,
        "self_cell_bound": bound / (sub if density is not None else 1),
    }


def _near_field(density, lattice, x, idx_x, near, sub):
    h = lattice.h
    hs = h / sub
    k = np.arange(-near * sub - sub // 2, (near + 1) * sub - sub // 2)
    offs = np.stack(np.meshgrid(k, k, k, indexing="ij"), axis=-1).reshape(-1, 3)
    E = np.zeros_like(x)
    for i, (xi, ci) in enumerate(zip(x, idx_x)):
        lo = np.clip(ci - near, 0, lattice.n)
        hi = np.clip(ci + near + 1, 0, lattice.n)
        base = lattice.lo + ci * h + 0.5 * h
        y = base + (offs + 0.0) * hs
        cell = np.floor((y - lattice.lo) / h).astype(int)
        inside = np.all((cell >= lo) & (cell < hi), axis=-1)
        y = y[inside]
        qs = density(y) * hs**3
        d = xi - y
        r2 = np.einsum("ak,ak->a", d, d)
        own = r2 < (0.25 * hs) ** 2
        w = np.where(own | (qs == 0), 0.0, qs / np.where(own, 1.0, r2) ** 1.5)
        E[i] = w @ d
    return E


def uniform_ball_comparison(n_points=16, radius=1.0, h=1.0 / 16, near=2, sub=11, avg_sub=8):
    """Radial field of a uniform unit-charge ball against lattice quadrature.

    Sample points form an n_points^3 grid of lattice cell centres; a point
    whose cell is cut by the sphere moves one cell along its largest
    coordinate, away from the surface, so the skipped cell is uniform and
    contributes nothing.  Returns the largest error relative to max |E| and
    the exterior error of m/r^2 in relative terms.
    """
    rho0 = 3.0 / (4.0 * np.pi * radius**3)

    def density(y):
        return np.where(np.linalg.norm(y, axis=-1) <= radius, rho0, 0.0)

    n = int(np.ceil(2 * radius / h)) + 2
    lat = Lattice(-n * h / 2, h, n)
    dens, where = lat.cell_moments(density, sub=avg_sub)
    r = np.concatenate([np.linspace(0.0, radius, 4097), np.geomspace(radius, 1e3, 400)[1:]])
    snap = RadialFieldSnapshot(0.0, r, np.where(r <= radius, rho0, 0.0),
                               np.minimum(r / radius, 1.0) ** 3)
    k = np.linspace(1, n - 2, n_points).round().astype(int)
    idx = np.stack(np.meshgrid(k, k, k, indexing="ij"), axis=-1).reshape(-1, 3)
    for _ in range(3):
        val = dens[idx[:, 0], idx[:, 1], idx[:, 2]]
        cut = (val != 0.0) & (val != rho0)
        if not np.any(cut):
            break
        c = lat.lo + (idx[cut] + 0.5) * h
        axis = np.argmax(np.abs(c), axis=-1)
        outward = np.linalg.norm(c, axis=-1) > radius
        step = np.where(outward, 1, -1) * np.sign(c[np.arange(len(c)), axis]).astype(int)
        moved = idx[cut]
        moved[np.arange(len(c)), axis] += step
        idx[cut] = np.clip(moved, 0, n - 1)
    pts = lat.lo + (idx + 0.5) * h
    E_rad = field_at(snap, pts)
    E_lat, bounds = gauss_oracle(dens, lat, pts, density=density, near=near, sub=sub,
                                 positions=where)
    scale = float(np.max(np.linalg.norm(E_rad, axis=-1)))
    rel = float(np.max(np.linalg.norm(E_rad - E_lat, axis=-1)) / scale)
    far = np.geomspace(1.5 * radius, 1e3, 50)
    h_far, _ = snap.radial(far)
    ext = float(np.max(np.abs(h_far - 1.0 / far**2) * far**2))
    return {"interior_relerr": rel, "exterior_relerr": ext, "points": int(len(pts)),
            "lattice_h": h, "lattice_n": n, **bounds}


# --------------------------------------------------------- diagnostics


def envelope(r):
    """Two-branch envelope: r^{-4/5} on (0, 1], r^{-1/2} beyond."""
    r = np.asarray(r, dtype=float)
    return np.where(r <= 1.0, r ** -0.8, r ** -0.5)


def envelope_check(snapshot):
    r = snapshot.r[1:]
    h, _ = snapshot.radial(r)
    E = np.abs(h)
    tail = r >= 1.0
    return {
        "sup_E_over_G": float(np.max(E / envelope(r))),
        "sup_E_r2_tail": float(np.max(E[tail] * r[tail] ** 2, initial=0.0)),
    }


def gradient_bound(snapshot, n=64, r_lo=1.0, rel_step=1e-5):
    """max over sampled r >= r_lo of |dE/dx| r^2, by central differences."""
    r = np.geomspace(r_lo, snapshot.r[-1], n)
    x = np.stack([r, np.zeros_like(r), np.zeros_like(r)], axis=-1)
    J = np.empty(x.shape + (3,))
    for i in range(3):
        step = np.zeros(3)
        step[i] = 1.0
        hh = rel_step * r
        J[..., i] = (field_at(snapshot, x + hh[:, None] * step)
                     - field_at(snapshot, x - hh[:, None] * step)) / (2 * hh[:, None])
    vals = np.linalg.norm(J, axis=(-2, -1)) * r * r
    k = int(np.argmax(vals))
    return {"max_grad_E_r2": float(vals[k]), "at_r": float(r[k])}
