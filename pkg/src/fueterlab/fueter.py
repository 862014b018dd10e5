"""The discrete Fueter operator (3D and 4D), energy, and pointwise identities.

The 3D operator pairs the grid frame with the target structure triple through
the identity identification, F u = sum_a I_a du(v_a).  The pointwise energy
identity, with the conventions of this package (left multiplication on the
target, omega_a = G(I_a ., .)), reads

    |du|^2 - |F u|^2 + 2 [w1(d2u,d3u) - w2(d1u,d3u) + w3(d1u,d2u)] = 0

for every map, Fueter or not; the reported pairing term is the negated
bracket so that the residual is density - fueter^2 - pairing.  The sign was
calibrated once on u = x1*i - x2*j and is frozen by a regression test.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import domains as dom
from . import quaternions as quat
from .domains import DomainGrid, S2Grid, build_s2_grid, psi_endomorphism
from .hk import SphereMap, TargetChart, regularize_sphere_points
from .sections import SectionSample, chart_coord_diff, sample_map


@dataclass
class FueterResidualField:
    """Per-point Fueter residual F u and its target-metric norm."""

    grid: DomainGrid
    values: np.ndarray  # (N, dim)
    norm: np.ndarray    # (N,)
    valid: np.ndarray   # (N,) bool

    def max_norm(self) -> float:
        return float(self.norm[self.valid].max()) if self.valid.any() else 0.0

    def l2_norm(self) -> float:
        w = self.grid.weights[self.valid]
        return float(np.sqrt(np.sum(w * self.norm[self.valid] ** 2)))


def fueter_residual_3d(u: SectionSample) -> FueterResidualField:
    """F u = sum_a I_a du(v_a) per grid point; second-order accurate in h."""
    if u.grid.kind not in ("ball3", "torus3", "sphere3"):
        raise ValueError("fueter_residual_3d requires a 3D grid")
    if u.grid.n_points < 5:
        raise ValueError("grid too small for the difference stencil")
    I = u.chart.structures_at(u.values)
    res = np.einsum("naij,naj->ni", I, u.derivative)
    G = u.chart.metric_at(u.values)
    norm = np.sqrt(np.maximum(np.einsum("ni,nij,nj->n", res, G, res), 0.0))
    return FueterResidualField(u.grid, res, norm, u.valid.copy())


def psi_apply(T, n: int | None = None):
    """Apply Psi = sum_a I(w_a) . T . iota(w_a) to (..., 4n, 4) maps."""
    T = np.asarray(T, dtype=float)
    rows = T.shape[-2]
    n = n or rows // 4
    eye_n = np.eye(n)
    out = np.zeros_like(T)
    for a in range(3):
        B = np.kron(eye_n, quat.LEFT[a])
        out += np.einsum("ij,...jk,kl->...il", B, T, quat.LEFT[a])
    return out


def fueter_residual_4d(T, n: int | None = None):
    """The 4D residual (id - Psi) T; zero iff T lies in the 1-eigenspace."""
    T = np.asarray(T, dtype=float)
    return T - psi_apply(T, n)


def time_slice_residual_3d(T, n: int | None = None):
    """For T with T(e0) = 0, the e0-component of -(id - Psi)T equals the 3D
    Fueter expression sum_a I_a T(e_a); used by the 4D/3D consistency check."""
    return -fueter_residual_4d(T, n)[..., :, 0]


def total_energy(u: SectionSample) -> float:
    """Quadrature of the energy density over the grid."""
    return float(np.sum(u.grid.weights * u.energy_density))


def energy_identity_residual(u: SectionSample, reference_density=None):
    """Pointwise energy-identity residual and its three constituents.

    Returns a namespace with arrays residual, density, fueter_sq, pairing and
    residual = density - fueter_sq - pairing.  The identity is algebraic in
    the derivative vectors, so with a single derivative source it vanishes to
    rounding; passing the closed-form density as reference_density against a
    finite-difference sample turns the residual into an O(h^2) consistency
    measure of the discretization.
    """
    if u.derivative.shape[1] != 3:
        raise ValueError("energy identity is for 3D grids")
    res = fueter_residual_3d(u)
    G = u.chart.metric_at(u.values)
    fueter_sq = np.einsum("ni,nij,nj->n", res.values, G, res.values)
    om = u.chart.omegas_at(u.values)
    d = u.derivative
    pair = lambda a, x, y: np.einsum("ni,nij,nj->n", d[:, x], om[:, a], d[:, y])
    bracket = pair(0, 1, 2) - pair(1, 0, 2) + pair(2, 0, 1)
    pairing = -2.0 * bracket
    density = (np.asarray(reference_density, dtype=float)
               if reference_density is not None else u.energy_density)
    residual = density - fueter_sq - pairing
    return SimpleNamespace(residual=residual, density=density.copy(),
                           fueter_sq=fueter_sq, pairing=pairing,
                           valid=u.valid.copy())


# ---------------------------------------------------------------------------
# The differential inequality Delta |du|^2 <= c (|du|^p + 1)
# ---------------------------------------------------------------------------

def laplacian_of_density(u: SectionSample, fd_step: float | None = None):
    """Geometer's Laplacian (positive spectrum, -sum d^2) of |du|^2.

    Exact-mode samples difference the closed-form density along the frame
    flows (straight lines, or great circles on sphere3); FD samples use
    lattice stencils.  Returns (values, valid mask).
    """
    h = fd_step or u.grid.h
    if u.exact_mode:
        pts = u.grid.points
        f0 = u.energy_density
        acc = np.zeros_like(f0)
        if u.grid.kind == "sphere3":
            # frame flows are great circles t -> q (cos t + e_a sin t)
            for e in (quat.I, quat.J, quat.K):
                rot_p = np.array([np.cos(h), 0.0, 0.0, 0.0]) + np.sin(h) * e
                rot_m = np.array([np.cos(h), 0.0, 0.0, 0.0]) - np.sin(h) * e
                fp = u.eval_density(quat.quat_mul(pts, rot_p))
                fm = u.eval_density(quat.quat_mul(pts, rot_m))
                acc += (fp - 2 * f0 + fm) / h ** 2
        else:
            d = pts.shape[1]
            for a in range(d):
                off = np.zeros(d)
                off[a] = h
                fp = u.eval_density(pts + off)
                fm = u.eval_density(pts - off)
                acc += (fp - 2 * f0 + fm) / h ** 2
        return -acc, np.ones(len(f0), dtype=bool)

    if u.grid.kind == "torus3":
        n = int(round(u.grid.extent / u.grid.h))
        f = u.energy_density.reshape(n, n, n)
        acc = np.zeros_like(f)
        for a in range(3):
            acc += (np.roll(f, -1, a) - 2 * f + np.roll(f, 1, a)) / u.grid.h ** 2
        return -acc.ravel(), np.ones(u.grid.n_points, dtype=bool)

    if u.grid.kind == "ball3":
        h0 = u.grid.h
        keys = np.round(u.grid.points / h0).astype(int)
        idx = {tuple(k): i for i, k in enumerate(keys)}
        f = u.energy_density
        out = np.zeros_like(f)
        valid = np.ones(len(f), dtype=bool)
        for i, k in enumerate(map(tuple, keys)):
            s = 0.0
            for a in range(3):
                kp = tuple(k[j] + (1 if j == a else 0) for j in range(3))
                km = tuple(k[j] - (1 if j == a else 0) for j in range(3))
                if kp in idx and km in idx:
                    s += (f[idx[kp]] - 2 * f[i] + f[idx[km]]) / h0 ** 2
                else:
                    valid[i] = False
                    break
            out[i] = -s
        return out, valid

    raise ValueError("laplacian_of_density on sphere3 requires exact-mode samples")


def diff_inequality_ratio(u: SectionSample, exponent: int,
                          fd_step: float | None = None):
    """Pointwise Delta|du|^2 / (|du|^exponent + 1) and its maximum.

    exponent 3 corresponds to the flat-target inequality, 4 to the general
    one; the field maximum is the empirical inequality constant.
    """
    if exponent not in (3, 4):
        raise ValueError("exponent must be 3 or 4")
    lap, lap_valid = laplacian_of_density(u, fd_step)
    grad_norm = np.sqrt(np.maximum(u.energy_density, 0.0))
    ratio = lap / (grad_norm ** exponent + 1.0)
    valid = lap_valid & u.valid
    vmax = float(ratio[valid].max()) if valid.any() else 0.0
    return SimpleNamespace(field=ratio, valid=valid, max=vmax)


# ---------------------------------------------------------------------------
# Twistor-holomorphy check
# ---------------------------------------------------------------------------

def hopf_extension_sample(chart: TargetChart, sphere: SphereMap, xi,
                          grid: DomainGrid, exact: bool = False) -> SectionSample:
    """The fiber-invariant extension z o pi_xi on an S^3 grid, where
    pi_xi(q) = q xihat conj(q); it is an exact Fueter map when z is
    I_xi-holomorphic."""
    xi = np.asarray(xi, dtype=float)
    c = quat.from_imag(xi / np.linalg.norm(xi))

    def project(q):
        return quat.imag(quat.quat_mul(quat.quat_mul(q, c), quat.conj(q)))

    def fn(pts):
        p = regularize_sphere_points(project(np.atleast_2d(pts)), sphere.valid_mask)
        return sphere(p)

    dfn = None
    if exact and sphere.differential is not None:
        def dfn(pts):
            pts = np.atleast_2d(pts)
            tang = np.zeros((len(pts), 3, 3))
            for a, e in enumerate((quat.I, quat.J, quat.K)):
                comm = quat.quat_mul(e, c) - quat.quat_mul(c, e)
                tang[:, a] = quat.imag(
                    quat.quat_mul(quat.quat_mul(pts, comm), quat.conj(pts)))
            p, tang = regularize_sphere_points(project(pts), sphere.valid_mask, tang)
            out = np.zeros((len(pts), 3, chart.dim))
            for a in range(3):
                out[:, a] = sphere.differential(p, tang[:, a])
            return out

    return sample_map(grid, chart, fn, dfn)


def twistor_check(chart: TargetChart, sphere: SphereMap, xi=None,
                  s2_grid: S2Grid | None = None, extension_h: float = 0.25,
                  extension_extent: float = 2.0) -> dict:
    """Two holomorphy diagnostics for a sphere map, reported together.

    (1) dbar residual: relative L^2 norm of dz o j - I_xi o dz over an S^2
        grid, with j the fixed orientation w -> w x p.
    (2) extension residual: the discrete Fueter residual of the fiber
        extension z o pi_xi on an S^3 annulus (cells whose image avoids the
        map's chart-singular circles, per its band mask), finite-differenced
        at extension_h; decays at second order for holomorphic spheres.
    """
    xi = np.asarray(xi if xi is not None else sphere.xi, dtype=float)
    if abs(np.linalg.norm(xi) - 1.0) > 1e-10:
        raise ValueError("xi must be a unit 3-vector")
    grid2 = s2_grid or build_s2_grid(64, 64)

    mask = (sphere.valid_mask(grid2.points) if sphere.valid_mask
            else np.ones(grid2.n_points, bool))
    pts = grid2.points[mask]
    w = grid2.weights[mask]
    tang = grid2.tangents[mask]
    jt = np.stack([np.cross(tang[:, 0], pts), np.cross(tang[:, 1], pts)], axis=1)
    vals = sphere(pts)
    G = chart.metric_at(vals)
    Ixi = np.einsum("a,naij->nij", xi, chart.structures_at(vals))

    def differentials(tangents):
        if sphere.differential is not None:
            return sphere.differential(pts, tangents)
        delta = 1e-5
        stepped = pts + delta * tangents
        stepped /= np.linalg.norm(stepped, axis=1, keepdims=True)
        back = pts - delta * tangents
        back /= np.linalg.norm(back, axis=1, keepdims=True)
        return chart_coord_diff(chart, sphere(stepped), sphere(back)) / (2 * delta)

    num = 0.0
    den = 0.0
    for a in range(2):
        dz = differentials(tang[:, a])
        djz = differentials(jt[:, a])
        r = djz - np.einsum("nij,nj->ni", Ixi, dz)
        num += np.sum(w * np.einsum("ni,nij,nj->n", r, G, r))
        den += np.sum(w * np.einsum("ni,nij,nj->n", dz, G, dz))
    dbar_abs = float(np.sqrt(num))
    dbar_rel = float(np.sqrt(num / den)) if den > 0 else 0.0

    grid3 = dom.build_grid("sphere3", extension_h, extension_extent)
    ext = hopf_extension_sample(chart, sphere, xi, grid3)
    res = fueter_residual_3d(ext)
    c = quat.from_imag(xi)
    p_img = quat.imag(quat.quat_mul(quat.quat_mul(grid3.points, c),
                                    quat.conj(grid3.points)))
    keep = res.valid
    band_fn = sphere.band_mask or sphere.valid_mask
    if band_fn is not None:
        keep = keep & band_fn(p_img)
    ext_max = float(res.norm[keep].max()) if keep.any() else 0.0
    wkeep = grid3.weights[keep]
    ext_l2 = float(np.sqrt(np.sum(wkeep * res.norm[keep] ** 2)))
    return {
        "dbar_residual_rel": dbar_rel,
        "dbar_residual_abs": dbar_abs,
        "sphere_energy": float(den),
        "extension_residual_max": ext_max,
        "extension_residual_l2": ext_l2,
        "extension_h": extension_h,
    }
