"""Pointwise hyperkähler structures and the two built-in target charts.

A hyperkähler structure at a point is a positive metric G together with a
triple of complex structures (I1, I2, I3) obeying the quaternion relations
I1 I2 = I3 (cyclic), each an isometry of G, and the Kähler forms
omega_a(v, w) = G(I_a v, w).

Built-in targets:

* flat quaternionic space H^n (or the torus T^{4n}), with I_a acting by left
  multiplication with i, j, k on each H factor;
* the Eguchi-Hanson space in two-center Gibbons-Hawking form, chart
  coordinates (t, x1, x2, x3) with t the circle fiber coordinate.  It carries
  one compact holomorphic sphere, the bolt over the inter-center segment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import quaternions as quat
from .domains import S2Grid, build_s2_grid


@dataclass
class HKStructure:
    """Metric, complex-structure triple and Kähler forms at one target point."""

    dim: int
    metric: np.ndarray   # (dim, dim) symmetric positive-definite
    I: np.ndarray        # (3, dim, dim), I[a] squares to -id
    omega: np.ndarray    # (3, dim, dim), omega[a] = metric @ I[a] antisymmetrized

    @property
    def I1(self):
        return self.I[0]

    @property
    def I2(self):
        return self.I[1]

    @property
    def I3(self):
        return self.I[2]

    def validate(self, tol: float = 1e-10) -> None:
        eye = np.eye(self.dim)
        if np.abs(self.metric - self.metric.T).max() > tol:
            raise ValueError("metric is not symmetric")
        if np.linalg.eigvalsh(self.metric).min() <= 0:
            raise ValueError("metric is not positive definite")
        for a in range(3):
            if np.abs(self.I[a] @ self.I[a] + eye).max() > tol:
                raise ValueError(f"I{a + 1} does not square to -id")
            if np.abs(self.I[a].T @ self.metric @ self.I[a] - self.metric).max() > 1e-9:
                raise ValueError(f"I{a + 1} is not a metric isometry")
            if np.abs(self.omega[a] + self.omega[a].T).max() > tol:
                raise ValueError(f"omega{a + 1} is not antisymmetric")
        for a, b, c in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
            if np.abs(self.I[a] @ self.I[b] - self.I[c]).max() > 1e-9:
                raise ValueError("quaternion relations I_a I_b = I_c fail")


def complex_structure_from_xi(h: HKStructure, xi) -> np.ndarray:
    """The member I_xi = sum_a xi_a I_a of the hyperkähler sphere; |xi| = 1."""
    xi = np.asarray(xi, dtype=float)
    if abs(np.linalg.norm(xi) - 1.0) > 1e-10:
        raise ValueError("xi must be a unit 3-vector (|xi| = 1 within 1e-10)")
    return np.einsum("a,aij->ij", xi, h.I)


@dataclass
class SphereMap:
    """A parametrized 2-sphere in a target chart, tagged with the xi for which
    it is I_xi-holomorphic.  `func` maps S^2 points (N, 3) to chart coordinates
    (N, dim); `differential`, when given, maps (points, tangents) to the image
    tangent vectors and enables exact-derivative residual checks."""

    name: str
    xi: np.ndarray
    func: Callable[[np.ndarray], np.ndarray]
    differential: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    valid_mask: Callable[[np.ndarray], np.ndarray] | None = None
    # band for finite-difference diagnostics: excludes a fixed neighbourhood of
    # the circles where the chart representation degenerates (the map itself is
    # smooth there, but its coordinate expression is not FD-resolvable)
    band_mask: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, pts):
        return self.func(np.asarray(pts, dtype=float))


def regularize_sphere_points(p, mask_fn, tangents=None, delta: float = 1e-4):
    """Nudge S^2 points off the invalid set of a sphere map.

    Points where the chart representation of a map degenerates (poles of an
    angular coordinate) are rotated by delta toward a deterministic tangent
    direction; compositions extend continuously, so the O(delta) displacement
    is harmless for quadrature.  When tangent stacks (N, m, 3) are supplied
    they are rotated along, keeping them tangent at the displaced points.
    """
    if mask_fn is None:
        return p if tangents is None else (p, tangents)
    p = np.atleast_2d(np.asarray(p, dtype=float)).copy()
    if tangents is not None:
        tangents = np.asarray(tangents, dtype=float).copy()
    for _ in range(3):
        bad = ~mask_fn(p)
        if not bad.any():
            break
        pb = p[bad]
        ref = np.zeros_like(pb)
        ref[:, 1] = 1.0
        parallel = np.abs(pb[:, 1]) > 0.9
        ref[parallel] = 0.0
        ref[parallel, 2] = 1.0
        tau = ref - pb * np.einsum("ni,ni->n", ref, pb)[:, None]
        tau /= np.linalg.norm(tau, axis=1, keepdims=True)
        p[bad] = np.cos(delta) * pb + np.sin(delta) * tau
        if tangents is not None:
            w = tangents[bad]
            w_tau = np.einsum("nmi,ni->nm", w, tau)
            w_p = np.einsum("nmi,ni->nm", w, pb)
            corr = (w_tau[..., None] * ((np.cos(delta) - 1.0) * tau
                                        - np.sin(delta) * pb)[:, None, :]
                    + w_p[..., None] * ((np.cos(delta) - 1.0) * pb
                                       + np.sin(delta) * tau)[:, None, :])
            tangents[bad] = w + corr
    return p if tangents is None else (p, tangents)


@dataclass
class TargetChart:
    """Chart of a hyperkähler target exposing pointwise structure data.

    metric_at / structures_at are vectorized over (N, dim) coordinate arrays;
    structure_at returns a single validated HKStructure.
    """

    name: str
    dim: int
    metric_at: Callable[[np.ndarray], np.ndarray]
    structures_at: Callable[[np.ndarray], np.ndarray]  # (N, 3, dim, dim)
    holomorphic_spheres: list = field(default_factory=list)
    periodic: bool = False
    is_flat: bool = False

    def structure_at(self, x) -> HKStructure:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        G = self.metric_at(x)[0]
        I = self.structures_at(x)[0]
        # bilinear-form matrix of omega_a(v, w) = G(I_a v, w):  I_a^T G
        omega = np.einsum("aji,jk->aik", I, G)
        return HKStructure(self.dim, G, I, omega)

    def omegas_at(self, x) -> np.ndarray:
        """Kähler-form matrices (v^T omega_a w = G(I_a v, w)), (N, 3, dim, dim)."""
        x = np.asarray(x, dtype=float)
        G = self.metric_at(x)
        I = self.structures_at(x)
        return np.einsum("naji,njk->naik", I, G)

    def norm_sq(self, x, v) -> np.ndarray:
        """Squared metric norm of tangent vectors v (..., dim) at points x."""
        G = self.metric_at(x)
        return np.einsum("...i,...ij,...j->...", v, G, v)


# ---------------------------------------------------------------------------
# Flat targets
# ---------------------------------------------------------------------------

def flat_quaternion_target(n: int = 1, periodic: bool = False) -> TargetChart:
    """H^n (or T^{4n} when periodic) with the constant left-multiplication
    structure and the identity metric.  Flat targets carry no non-trivial
    holomorphic spheres, so holomorphic_spheres is empty."""
    if n < 1:
        raise ValueError("n must be a positive integer")
    dim = 4 * n
    eye_n = np.eye(n)
    I_const = np.stack([np.kron(eye_n, quat.LEFT[a]) for a in range(3)])
    G_const = np.eye(dim)

    def metric_at(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(G_const, x.shape[:-1] + (dim, dim)).copy()

    def structures_at(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(I_const, x.shape[:-1] + (3, dim, dim)).copy()

    name = f"flat-t{4 * n}" if periodic else ("flat-h" if n == 1 else f"flat-h{n}")
    return TargetChart(name, dim, metric_at, structures_at, [], periodic, is_flat=True)


# ---------------------------------------------------------------------------
# Eguchi-Hanson in Gibbons-Hawking form
# ---------------------------------------------------------------------------

def _gh_potential(a: float, x: np.ndarray):
    """Harmonic potential V and connection 1-form alpha of the two-center
    Gibbons-Hawking ansatz, centers at (+-a/2, 0, 0).

    The centers sit on the x1 axis so that the bolt is I_1-holomorphic, the
    structure the Hopf-fiber compositions pair with.  The Dirac strings lie on
    the axis pieces |x1| > a/2; strings and centers are outside the chart
    domain.  Returns (V, alpha) with alpha_1 = 0.
    """
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    up = x1 - a / 2.0
    dn = x1 + a / 2.0
    rho2 = x2 ** 2 + x3 ** 2
    rp = np.sqrt(rho2 + up ** 2)
    rm = np.sqrt(rho2 + dn ** 2)
    if np.any(rp < 1e-12 * a) or np.any(rm < 1e-12 * a):
        raise ValueError("point coincides with a Gibbons-Hawking center "
                         "(coordinate singularity of the chart)")
    on_axis = rho2 < (1e-7 * a) ** 2
    if np.any(on_axis & (np.abs(x1) > a / 2.0)):
        raise ValueError("point lies on the Dirac-string axis outside the "
                         "inter-center segment (chart coordinate singularity)")
    V = 0.5 / rp + 0.5 / rm
    cos_sum = up / rp + dn / rm
    # stable on-axis limit between the centers: cos_sum ~ rho2/2 (u^-2 - v^-2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rho2 > (1e-7 * a) ** 2, cos_sum / np.where(rho2 == 0, 1.0, rho2),
                         0.5 * (1.0 / up ** 2 - 1.0 / dn ** 2))
    alpha = np.zeros_like(x)
    alpha[..., 1] = -0.5 * ratio * x3
    alpha[..., 2] = 0.5 * ratio * x2
    return V, alpha


def eguchi_hanson_target(a: float = 1.0) -> TargetChart:
    """Eguchi-Hanson space from the two-center Gibbons-Hawking ansatz.

    Chart coordinates are (t, x1, x2, x3) with fiber coordinate t of period
    2 pi and centers separated by a.  The metric is V dx.dx + (dt+alpha)^2/V
    with Kähler forms omega_a = (dt+alpha)^dx^a + V dx^b^dx^c (cyclic); the
    triple realizes I1 I2 = I3 in the flat limit convention of this package.
    Declares the bolt over the inter-center segment as an I_(0,0,1)-holomorphic
    sphere of area 2 pi a.
    """
    if a <= 0:
        raise ValueError("center separation a must be positive")
    dim = 4

    def _assemble(x):
        x = np.asarray(x, dtype=float)
        spatial = x[..., 1:]
        V, alpha = _gh_potential(a, spatial)
        n = x.shape[0]
        G = np.zeros((n, 4, 4))
        G[:, 0, 0] = 1.0 / V
        for k in range(3):
            G[:, 0, k + 1] = G[:, k + 1, 0] = alpha[:, k] / V
        for j in range(3):
            for k in range(3):
                G[:, j + 1, k + 1] = alpha[:, j] * alpha[:, k] / V
            G[:, j + 1, j + 1] += V
        Om = np.zeros((n, 3, 4, 4))
        cyc = ((0, 1, 2), (1, 2, 0), (2, 0, 1))
        for idx, (aa, bb, cc) in enumerate(cyc):
            Om[:, idx, 0, aa + 1] = 1.0
            Om[:, idx, bb + 1, aa + 1] = alpha[:, bb]
            Om[:, idx, cc + 1, aa + 1] = alpha[:, cc]
            Om[:, idx, bb + 1, cc + 1] = V
        # entries were filled one-sided as omega(e_row, e_col); antisymmetrize
        Om = Om - np.transpose(Om, (0, 1, 3, 2))
        return G, Om

    def metric_at(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return _assemble(x)[0]

    def structures_at(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        G, Om = _assemble(x)
        Ginv = np.linalg.inv(G)
        return -np.einsum("nij,najk->naik", Ginv, Om)

    def bolt_func(p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        t = np.arctan2(p[:, 2], p[:, 1])
        out = np.zeros((len(p), 4))
        out[:, 0] = t
        out[:, 1] = -(a / 2.0) * p[:, 0]
        return out

    def bolt_diff(p, w):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        w = np.atleast_2d(np.asarray(w, dtype=float))
        denom = p[:, 1] ** 2 + p[:, 2] ** 2
        out = np.zeros((len(p), 4))
        out[:, 0] = (p[:, 1] * w[:, 2] - p[:, 2] * w[:, 1]) / denom
        out[:, 1] = -(a / 2.0) * w[:, 0]
        return out

    def bolt_mask(p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        return p[:, 1] ** 2 + p[:, 2] ** 2 > 1e-6

    def bolt_band(p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        return np.abs(p[:, 0]) < 0.85

    bolt = SphereMap("bolt", np.array([1.0, 0.0, 0.0]), bolt_func, bolt_diff,
                     bolt_mask, bolt_band)
    chart = TargetChart("eguchi-hanson", dim, metric_at, structures_at, [bolt])
    chart.scale = a
    return chart


def sphere_map_area_energy(chart: TargetChart, sphere: SphereMap,
                           grid: S2Grid | None = None) -> tuple[float, float]:
    """Riemannian area and Dirichlet energy of a sphere map by quadrature."""
    grid = grid or build_s2_grid(64, 64)
    mask = sphere.valid_mask(grid.points) if sphere.valid_mask else np.ones(grid.n_points, bool)
    pts = grid.points[mask]
    w = grid.weights[mask]
    vals = sphere(pts)
    if sphere.differential is None:
        raise ValueError("area quadrature requires the sphere map differential")
    d1 = sphere.differential(pts, grid.tangents[mask, 0])
    d2 = sphere.differential(pts, grid.tangents[mask, 1])
    G = chart.metric_at(vals)
    g11 = np.einsum("ni,nij,nj->n", d1, G, d1)
    g22 = np.einsum("ni,nij,nj->n", d2, G, d2)
    g12 = np.einsum("ni,nij,nj->n", d1, G, d2)
    area = float(np.sum(w * np.sqrt(np.maximum(g11 * g22 - g12 ** 2, 0.0))))
    energy = float(np.sum(w * (g11 + g22)))
    return area, energy


_TARGET_BUILDERS = {
    "flat-h": lambda **kw: flat_quaternion_target(int(kw.get("n", 1)), False),
    "flat-t4": lambda **kw: flat_quaternion_target(int(kw.get("n", 1)), True),
    "eguchi-hanson": lambda **kw: eguchi_hanson_target(float(kw.get("scale", 1.0))),
}


def target_by_name(name: str, **params) -> TargetChart:
    """Select a built-in target chart by name string."""
    try:
        builder = _TARGET_BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown target {name!r}; valid names: "
                         f"{sorted(_TARGET_BUILDERS)}") from None
    return builder(**params)
