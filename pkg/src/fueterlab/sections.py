"""Grid-sampled maps into target charts, with derivatives along the frame.

A SectionSample stores values, the per-point derivative du(v_a) along the
grid frame, and the energy density |du|^2 in the target metric.  Derivatives
come either from closed-form callbacks ("exact mode", used by the built-in
analytic families and by all oracle tests) or from second-order finite
differences on the structured grid.

Finite differences of chart values use TargetChart-aware coordinate
differences so that periodic chart coordinates (the Eguchi-Hanson fiber
angle, flat-torus coordinates) difference across the wrap correctly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import domains as dom
from .domains import DomainGrid
from .hk import TargetChart


def chart_coord_diff(chart: TargetChart, a, b):
    """Coordinate difference a - b respecting periodic chart coordinates."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    periodic = getattr(chart, "periodic_coords", None)
    if periodic is None:
        if chart.name == "eguchi-hanson":
            periodic = np.array([True, False, False, False])
        elif chart.periodic:
            periodic = np.ones(chart.dim, dtype=bool)
        else:
            return d
    if periodic.any():
        wrapped = (d + np.pi) % (2 * np.pi) - np.pi
        d = np.where(periodic, wrapped, d)
    return d


@dataclass
class SectionSample:
    """A map u sampled on a DomainGrid with frame derivatives and |du|^2."""

    grid: DomainGrid
    chart: TargetChart
    values: np.ndarray          # (N, dim)
    derivative: np.ndarray      # (N, nframe, dim): du(v_a) at each point
    energy_density: np.ndarray  # (N,)
    valid: np.ndarray           # (N,) bool, False where FD stencils underflow
    evaluate: Callable | None = None     # exact values at arbitrary points
    d_evaluate: Callable | None = None   # exact frame derivatives at points

    @property
    def exact_mode(self) -> bool:
        return self.d_evaluate is not None

    def eval_values(self, pts):
        if self.evaluate is not None:
            return self.evaluate(np.asarray(pts, dtype=float))
        return _interpolate_grid_field(self.grid, self.values, pts, self.chart)

    def eval_derivative(self, pts):
        """du(v_a) at arbitrary points, exact or interpolated frame components."""
        if self.d_evaluate is not None:
            return self.d_evaluate(np.asarray(pts, dtype=float))
        nf = self.derivative.shape[1]
        flat = self.derivative.reshape(self.grid.n_points, -1)
        out = _interpolate_grid_field(self.grid, flat, pts, None)
        return out.reshape(len(np.atleast_2d(pts)), nf, self.chart.dim)

    def eval_density(self, pts):
        d = self.eval_derivative(pts)
        vals = self.eval_values(pts)
        G = self.chart.metric_at(vals)
        return np.einsum("nai,nij,naj->n", d, G, d)

    def directional_derivative(self, pts, vecs):
        """du(w) for tangent vectors w given in embedding coordinates."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        vecs = np.atleast_2d(np.asarray(vecs, dtype=float))
        frames = self.grid.frame_at(pts)
        coeff = np.einsum("nad,nd->na", frames, vecs)
        return np.einsum("na,nai->ni", coeff, self.eval_derivative(pts))

    def scaled_values(self, c: float) -> "SectionSample":
        """The sample of c*u (flat targets only; used by homogeneity tests)."""
        if not self.chart.is_flat:
            raise ValueError("value scaling is only meaningful in flat charts")
        return SectionSample(self.grid, self.chart, c * self.values,
                             c * self.derivative, c ** 2 * self.energy_density,
                             self.valid.copy())

    def to_csv(self, path, extra: dict | None = None) -> None:
        cols = {"id": np.arange(self.grid.n_points)}
        for i in range(self.grid.points.shape[1]):
            cols[f"x{i}"] = self.grid.points[:, i]
        cols["density"] = self.energy_density
        for k, v in (extra or {}).items():
            cols[k] = v
        data = np.column_stack(list(cols.values()))
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="")


def sample_map(grid: DomainGrid, chart: TargetChart, fn,
               dfn=None) -> SectionSample:
    """Sample fn on the grid; derivatives from dfn when given, else FD.

    fn maps points (N, d_embed) to chart coordinates (N, dim); dfn maps points
    to frame derivatives (N, nframe, dim) along grid.frame_at(points).
    """
    values = np.asarray(fn(grid.points), dtype=float)
    if dfn is not None:
        deriv = np.asarray(dfn(grid.points), dtype=float)
        valid = np.ones(grid.n_points, dtype=bool)
    else:
        deriv, valid = _fd_derivative(grid, chart, values)
    G = chart.metric_at(values)
    density = np.einsum("nai,nij,naj->n", deriv, G, deriv)
    return SectionSample(grid, chart, values, deriv, density, valid,
                         evaluate=fn, d_evaluate=dfn)


# ---------------------------------------------------------------------------
# Interpolation of grid fields at arbitrary points
# ---------------------------------------------------------------------------

def _interpolate_grid_field(grid: DomainGrid, field, pts, chart):
    """Trilinear interpolation of per-point data at arbitrary manifold points.

    Linear interpolation of chart values is only meaningful for charts
    without angular coordinates; the analytic families provide exact
    evaluators instead.
    """
    from scipy.interpolate import RegularGridInterpolator

    field = np.asarray(field, dtype=float)
    if field.ndim == 1:
        field = field[:, None]
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    h = grid.h

    if grid.kind == "torus3":
        n = int(round(grid.extent / h))
        cube = field.reshape(n, n, n, -1)
        cube = np.pad(cube, ((0, 1), (0, 1), (0, 1), (0, 0)), mode="wrap")
        axis = np.arange(n + 1) * (grid.extent / n)
        interp = RegularGridInterpolator((axis, axis, axis), cube)
        return interp(np.mod(pts, grid.extent))

    if grid.kind == "ball3":
        from scipy import ndimage
        m = int(np.floor(grid.extent / h + 1e-9))
        size = 2 * m + 1
        cube = np.full((size, size, size, field.shape[1]), np.nan)
        keys = np.round(grid.points / h).astype(int) + m
        cube[keys[:, 0], keys[:, 1], keys[:, 2]] = field
        hole = np.isnan(cube[..., 0])
        if hole.any():
            _, nearest = ndimage.distance_transform_edt(hole, return_indices=True)
            cube = cube[nearest[0], nearest[1], nearest[2]]
        axis = (np.arange(size) - m) * h
        interp = RegularGridInterpolator((axis, axis, axis), cube,
                                         bounds_error=False, fill_value=None)
        return interp(pts)

    if grid.kind == "sphere3":
        nt, nr, nphi = grid.struct_shape
        n_main = nt * nr * nphi
        cube = field[:n_main].reshape(nt, nr, nphi, -1)
        cube = np.pad(cube, ((0, 1), (0, 0), (0, 1), (0, 0)), mode="wrap")
        t_ax = np.append(grid.t_vals, 2 * np.pi)
        p_ax = np.append(grid.phi_vals, 2 * np.pi)
        interp = RegularGridInterpolator((t_ax, grid.rho_vals, p_ax), cube,
                                         bounds_error=False, fill_value=None)
        t, rho, phi = dom.sphere3_coords(pts)
        rho = np.clip(rho, grid.rho_vals[0], grid.rho_vals[-1])
        coords = np.column_stack([np.mod(t, 2 * np.pi), rho, np.mod(phi, 2 * np.pi)])
        return interp(coords)

    raise ValueError(f"interpolation unsupported on {grid.kind}")


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def _fd_derivative(grid: DomainGrid, chart: TargetChart, values):
    if grid.kind == "torus3":
        return _fd_periodic_lattice(grid, chart, values, 3)
    if grid.kind == "flat4":
        return _fd_cartesian(grid, chart, values, 4)
    if grid.kind == "ball3":
        return _fd_cartesian(grid, chart, values, 3)
    if grid.kind == "sphere3":
        return _fd_sphere3(grid, chart, values)
    raise ValueError(f"finite differences unsupported on {grid.kind}")


def _diff(chart, a, b):
    return chart_coord_diff(chart, a, b)


def _fd_periodic_lattice(grid, chart, values, d):
    n = int(round(grid.extent / grid.h))
    vals = values.reshape((n,) * d + (-1,))
    h = grid.h
    derivs = []
    for axis in range(d):
        plus = np.roll(vals, -1, axis=axis)
        minus = np.roll(vals, 1, axis=axis)
        derivs.append(_diff(chart, plus, minus) / (2 * h))
    deriv = np.stack([g.reshape(len(values), -1) for g in derivs], axis=1)
    return deriv, np.ones(len(values), dtype=bool)


def _fd_cartesian(grid, chart, values, d):
    """Centered FD where both neighbors exist, one-sided second order else."""
    h = grid.h
    idx = {}
    keys = np.round(grid.points / h).astype(int)
    for i, k in enumerate(map(tuple, keys)):
        idx[k] = i
    n = len(values)
    nf = d
    deriv = np.zeros((n, nf, values.shape[1]))
    valid = np.ones(n, dtype=bool)
    for i, k in enumerate(map(tuple, keys)):
        for a in range(d):
            kp = tuple(k[j] + (1 if j == a else 0) for j in range(d))
            km = tuple(k[j] - (1 if j == a else 0) for j in range(d))
            if kp in idx and km in idx:
                deriv[i, a] = _diff(chart, values[idx[kp]], values[idx[km]]) / (2 * h)
            elif kp in idx:
                kpp = tuple(k[j] + (2 if j == a else 0) for j in range(d))
                if kpp in idx:
                    # one-sided 2nd order via wrap-safe small differences
                    deriv[i, a] = (4 * _diff(chart, values[idx[kp]], values[i])
                                   - _diff(chart, values[idx[kpp]], values[i])) / (2 * h)
                else:
                    valid[i] = False
            elif km in idx:
                kmm = tuple(k[j] - (2 if j == a else 0) for j in range(d))
                if kmm in idx:
                    deriv[i, a] = -(4 * _diff(chart, values[idx[km]], values[i])
                                    - _diff(chart, values[idx[kmm]], values[i])) / (2 * h)
                else:
                    valid[i] = False
            else:
                valid[i] = False
    return deriv, valid


def _fd_sphere3(grid, chart, values):
    """FD along the Hopf coordinate directions, converted to the frame.

    The cap fibers have no structured neighborhood and are marked invalid.
    """
    nt, nr, nphi = grid.struct_shape
    n_main = nt * nr * nphi
    vals = values[:n_main].reshape(nt, nr, nphi, -1)
    dt = grid.t_vals[1] - grid.t_vals[0]
    dphi = grid.phi_vals[1] - grid.phi_vals[0]
    drho = grid.rho_vals[1] - grid.rho_vals[0]

    g_t = _diff(chart, np.roll(vals, -1, 0), np.roll(vals, 1, 0)) / (2 * dt)
    g_p = _diff(chart, np.roll(vals, -1, 2), np.roll(vals, 1, 2)) / (2 * dphi)
    g_r = np.empty_like(vals)
    g_r[:, 1:-1] = _diff(chart, vals[:, 2:], vals[:, :-2]) / (2 * drho)
    g_r[:, 0] = (4 * _diff(chart, vals[:, 1], vals[:, 0])
                 - _diff(chart, vals[:, 2], vals[:, 0])) / (2 * drho)
    g_r[:, -1] = -(4 * _diff(chart, vals[:, -2], vals[:, -1])
                   - _diff(chart, vals[:, -3], vals[:, -1])) / (2 * drho)

    dim = vals.shape[-1]
    coord_deriv = np.stack([g.reshape(n_main, dim) for g in (g_t, g_r, g_p)], axis=1)

    T, R, P = np.meshgrid(grid.t_vals, grid.rho_vals, grid.phi_vals, indexing="ij")
    tang = dom.sphere3_coord_tangents(T.ravel(), R.ravel(), P.ravel())  # (N,3,4)
    frames = grid.frames[:n_main]
    M = np.einsum("ncd,nad->nca", tang, frames)  # du(T_c) = M[c,a] du(v_a)
    deriv_main = np.linalg.solve(M, coord_deriv)

    deriv = np.zeros((grid.n_points, 3, dim))
    deriv[:n_main] = deriv_main
    valid = np.zeros(grid.n_points, dtype=bool)
    valid[:n_main] = True
    return deriv, valid
