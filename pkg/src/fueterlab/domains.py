"""Discretized source manifolds and the 4D linear-algebra core.

Grid kinds
----------
ball3   : uniform Cartesian grid on a Euclidean ball, constant frame (e1,e2,e3).
torus3  : uniform periodic grid on a flat 3-torus, constant frame.
sphere3 : the round S^3 sampled in Hopf coordinates (fiber angle t, base point
          in log-stereographic coordinates (rho, phi)), with the left-invariant
          frame v_a(q) = q * e_a.  Cell weights are exact round volumes; the two
          pole fibers (over +-i) are sampled as dedicated "cap" circles.  The
          base grid is uniform in (rho, phi), i.e. equal-area in the cylinder
          metric of the stereographic chart; this is what lets a fixed grid
          resolve conformal rescalings over many dyadic scales.
flat4   : uniform Cartesian grid on a 4D cube (rarely needed; most 4D checks
          operate on single linear maps).

Conventions: the Hopf map is q -> q i conj(q); the stereographic chart on S^2
sends i -> 0 and -i -> infinity, so the circle {q : q i conj(q) = -i} is the
fiber over the point at infinity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import quaternions as quat


# ---------------------------------------------------------------------------
# Hopf map, stereographic chart, conformal scaling
# ---------------------------------------------------------------------------

def hopf_map(q):
    """Hopf fibration S^3 -> S^2, q -> q i conj(q), returned as unit 3-vectors.

    Constant along the orbits of the left-invariant field v1(q) = q*i.
    """
    q = np.asarray(q, dtype=float)
    n = quat.norm(q)
    if np.any(np.abs(n - 1.0) > 1e-10):
        raise ValueError("hopf_map requires unit quaternions (|q| = 1 within 1e-10)")
    return quat.imag(quat.quat_mul(quat.quat_mul(q, quat.I), quat.conj(q)))


def stereo_from_sphere(p):
    """Chart S^2 \\ {-i} -> C, p -> (p2 - i p3) / (1 + p1);  i -> 0, -i -> inf."""
    p = np.asarray(p, dtype=float)
    denom = 1.0 + p[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (p[..., 1] - 1j * p[..., 2]) / denom
    return np.where(denom <= 1e-300, np.inf + 0j, z)


def sphere_from_stereo(z):
    """Inverse of stereo_from_sphere; accepts inf (maps to -i)."""
    z = np.asarray(z, dtype=complex)
    finite = np.isfinite(z)
    zs = np.where(finite, z, 0.0)
    m = np.abs(zs) ** 2
    p = np.stack([
        (1.0 - m) / (1.0 + m),
        2.0 * zs.real / (1.0 + m),
        -2.0 * zs.imag / (1.0 + m),
    ], axis=-1)
    pole = np.array([-1.0, 0.0, 0.0])
    return np.where(finite[..., None], p, pole)


def sphere_scaling(lam: float, z):
    """Conformal scaling of S^2 in the stereographic chart: z -> lam*z, inf fixed."""
    if lam <= 0:
        raise ValueError("scaling factor must be positive")
    z = np.asarray(z, dtype=complex)
    return np.where(np.isfinite(z), lam * z, z)


def left_frame(q):
    """Left-invariant frame (v1, v2, v3)(q) = (q*i, q*j, q*k), shape (..., 3, 4)."""
    q = np.asarray(q, dtype=float)
    return np.stack([
        quat.quat_mul(q, quat.I),
        quat.quat_mul(q, quat.J),
        quat.quat_mul(q, quat.K),
    ], axis=-2)


def hopf_lift(p):
    """A section of the Hopf fibration over S^2 \\ {-i}: hopf_map(lift(p)) = p."""
    p = np.asarray(p, dtype=float)
    w = np.maximum(1.0 + p[..., 0], 1e-30)  # degenerate at -i itself
    out = np.stack([w, np.zeros_like(w), -p[..., 2], p[..., 1]], axis=-1)
    return out / np.sqrt(2.0 * w)[..., None]


def _sphere3_base_point(rho, phi):
    """Base S^2 point with stereographic coordinate exp(rho + i phi)."""
    sech = 1.0 / np.cosh(rho)
    return np.stack([-np.tanh(rho), sech * np.cos(phi), -sech * np.sin(phi)], axis=-1)


def sphere3_point(t, rho, phi):
    """S^3 point of the Hopf-coordinate parametrization (arrays broadcast)."""
    t, rho, phi = np.broadcast_arrays(*map(np.asarray, (t, rho, phi)))
    lift = hopf_lift(_sphere3_base_point(rho, phi))
    fib = np.zeros(t.shape + (4,))
    fib[..., 0] = np.cos(t)
    fib[..., 1] = np.sin(t)
    return quat.quat_mul(lift, fib)


def sphere3_coord_tangents(t, rho, phi):
    """Coordinate tangent vectors (dq/dt, dq/drho, dq/dphi), shape (..., 3, 4)."""
    t, rho, phi = np.broadcast_arrays(*map(np.asarray, (t, rho, phi)))
    sech = 1.0 / np.cosh(rho)
    th = np.tanh(rho)
    p = _sphere3_base_point(rho, phi)
    dp_rho = np.stack([-sech ** 2, -sech * th * np.cos(phi), sech * th * np.sin(phi)],
                      axis=-1)
    dp_phi = np.stack([np.zeros_like(rho), -sech * np.sin(phi), -sech * np.cos(phi)],
                      axis=-1)
    w = 1.0 + p[..., 0]
    n = np.sqrt(2.0 * w)
    u = np.stack([w, np.zeros_like(w), -p[..., 2], p[..., 1]], axis=-1)
    lift = u / n[..., None]

    def dlift(dp):
        du = np.stack([dp[..., 0], np.zeros_like(dp[..., 0]),
                       -dp[..., 2], dp[..., 1]], axis=-1)
        return du / n[..., None] - lift * (dp[..., 0] / n ** 2)[..., None]

    fib = np.zeros(t.shape + (4,))
    fib[..., 0] = np.cos(t)
    fib[..., 1] = np.sin(t)
    q = quat.quat_mul(lift, fib)
    T_t = quat.quat_mul(q, quat.I)
    T_rho = quat.quat_mul(dlift(dp_rho), fib)
    T_phi = quat.quat_mul(dlift(dp_phi), fib)
    return np.stack([T_t, T_rho, T_phi], axis=-2)


def sphere3_coords(q):
    """Inverse Hopf coordinates (t, rho, phi) of unit quaternions.

    rho is clipped to +-30 near the pole fibers where the chart degenerates.
    """
    p = hopf_map(q)
    rho = np.arctanh(np.clip(-p[..., 0], -1.0 + 1e-14, 1.0 - 1e-14))
    rho = np.clip(rho, -30.0, 30.0)
    phi = np.arctan2(-p[..., 2], p[..., 1])
    rel = quat.quat_mul(quat.conj(hopf_lift(p)), np.asarray(q, dtype=float))
    t = np.arctan2(rel[..., 1], rel[..., 0])
    return t, rho, phi


# ---------------------------------------------------------------------------
# Domain grids
# ---------------------------------------------------------------------------

@dataclass
class DomainGrid:
    """Sampled source manifold with quadrature weights and orthonormal frames.

    points live in the embedding coordinates (R^3 for ball3/torus3, unit
    quaternions in R^4 for sphere3, R^4 for flat4).  frames[i] is the ordered
    orthonormal frame at points[i], shape (N, 3, d) (or (N, 4, 4) for flat4).
    """

    kind: str
    h: float
    extent: float
    points: np.ndarray
    weights: np.ndarray
    frames: np.ndarray
    # sphere3 structure (None for other kinds)
    struct_shape: tuple | None = None
    t_vals: np.ndarray | None = None
    rho_vals: np.ndarray | None = None
    phi_vals: np.ndarray | None = None
    cap_lo_index: int = -1  # first index of the fiber over +i (rho -> -inf)
    cap_hi_index: int = -1  # first index of the fiber over -i (rho -> +inf)
    _neighbor_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def frame_at(self, pts):
        """Frame at arbitrary points of the manifold (not just grid points)."""
        pts = np.asarray(pts, dtype=float)
        if self.kind == "sphere3":
            return left_frame(pts)
        n = 4 if self.kind == "flat4" else 3
        eye = np.eye(n)
        return np.broadcast_to(eye, pts.shape[:-1] + (n, n)).copy()

    def volume(self) -> float:
        return float(self.weights.sum())

    # -- distances and ball queries -------------------------------------

    def distances_from(self, x):
        """Geodesic distance from x to every grid point."""
        x = np.asarray(x, dtype=float)
        if self.kind == "sphere3":
            dots = np.clip(self.points @ x, -1.0, 1.0)
            return np.arccos(dots)
        if self.kind == "torus3":
            d = np.abs(self.points - x)
            d = np.minimum(d, self.extent - d)
            return np.linalg.norm(d, axis=-1)
        return np.linalg.norm(self.points - x, axis=-1)

    def ball_fractions(self, x, r: float):
        """Smoothed indicator of the geodesic ball B_r(x) on grid points.

        Cells straddling the boundary enter with a linear volume fraction,
        which restores O(h^2) accuracy of ball quadratures.
        """
        d = self.distances_from(x)
        return np.clip((r - d) / self.h + 0.5, 0.0, 1.0)

    def max_admissible_radius(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if self.kind == "ball3":
            return self.extent - float(np.linalg.norm(x))
        if self.kind == "torus3":
            return self.extent / 2.0
        if self.kind == "sphere3":
            return np.pi
        return self.extent / 2.0 - float(np.max(np.abs(x)))

    def require_ball(self, x, r: float) -> None:
        rmax = self.max_admissible_radius(x)
        if r > rmax + 1e-12:
            raise ValueError(
                f"ball of radius {r} exits the domain; maximal admissible radius "
                f"at this center is {rmax:.6g}"
            )

    # -- sphere3 adjacency ----------------------------------------------

    def neighbors(self, idx: int):
        """Indices of cells adjacent to cell idx (structured 6-neighborhood)."""
        if self.kind != "sphere3":
            raise NotImplementedError("cell adjacency is only defined for sphere3 grids")
        if idx in self._neighbor_cache:
            return self._neighbor_cache[idx]
        nt, nr, nphi = self.struct_shape
        n_main = nt * nr * nphi

        def flat(it, irho, iphi):
            return (it % nt) * nr * nphi + irho * nphi + (iphi % nphi)

        out = []
        if idx < n_main:
            it, rem = divmod(idx, nr * nphi)
            irho, iphi = divmod(rem, nphi)
            out += [flat(it + 1, irho, iphi), flat(it - 1, irho, iphi),
                    flat(it, irho, iphi + 1), flat(it, irho, iphi - 1)]
            for dr in (-1, 1):
                jr = irho + dr
                if 0 <= jr < nr:
                    out.append(flat(it, jr, iphi))
                else:
                    cap = self.cap_lo_index if dr < 0 else self.cap_hi_index
                    d = self.distances_from(self.points[idx])
                    cap_ids = np.arange(cap, cap + nt)
                    out.append(int(cap_ids[np.argmin(d[cap_ids])]))
        else:
            cap0 = self.cap_lo_index if idx < self.cap_hi_index else self.cap_hi_index
            k = idx - cap0
            out += [cap0 + (k + 1) % nt, cap0 + (k - 1) % nt]
            # closest cells on the adjacent extreme ring
            irho = 0 if cap0 == self.cap_lo_index else nr - 1
            d = self.distances_from(self.points[idx])
            ring = np.array([flat(it, irho, iphi) for it in range(nt) for iphi in range(nphi)])
            order = np.argsort(d[ring])
            out.extend(int(i) for i in ring[order[:4]])
        res = sorted(set(int(i) for i in out) - {idx})
        self._neighbor_cache[idx] = res
        return res

    def to_csv(self, path) -> None:
        """Dump point coordinates, weight and frame columns to CSV."""
        d = self.points.shape[1]
        fr = self.frames.reshape(self.n_points, -1)
        header = (["id"] + [f"x{i}" for i in range(d)] + ["weight"]
                  + [f"frame{a}{i}" for a in range(self.frames.shape[1]) for i in range(d)])
        data = np.column_stack([np.arange(self.n_points), self.points, self.weights, fr])
        np.savetxt(path, data, delimiter=",", header=",".join(header), comments="")


_DEFAULT_EXTENT = {"ball3": 1.0, "torus3": 1.0, "sphere3": 8.0, "flat4": 1.0}


def build_grid(kind: str, h: float, extent: float | None = None) -> DomainGrid:
    """Uniform grid of the requested kind with quadrature weights.

    For sphere3, `extent` is the cutoff L of the log-stereographic base
    coordinate; spacing h is used for all three Hopf coordinate directions
    and weights are exact cell volumes (they sum to 2 pi^2 exactly).
    """
    if kind not in _DEFAULT_EXTENT:
        raise ValueError(f"unsupported grid kind {kind!r}; expected one of "
                         f"{sorted(_DEFAULT_EXTENT)}")
    if h <= 0:
        raise ValueError("grid spacing h must be positive")
    extent = _DEFAULT_EXTENT[kind] if extent is None else float(extent)
    if kind != "sphere3" and extent < 4 * h:
        raise ValueError("extent must be at least 4 h")

    if kind == "ball3":
        m = int(np.floor(extent / h + 1e-9))
        axis = np.arange(-m, m + 1) * h
        X, Y, Z = np.meshgrid(axis, axis, axis, indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
        keep = np.linalg.norm(pts, axis=1) <= extent + 1e-12
        pts = pts[keep]
        w = np.full(len(pts), h ** 3)
        frames = np.broadcast_to(np.eye(3), (len(pts), 3, 3)).copy()
        return DomainGrid(kind, h, extent, pts, w, frames)

    if kind == "torus3":
        n = max(4, int(round(extent / h)))
        axis = np.arange(n) * (extent / n)
        X, Y, Z = np.meshgrid(axis, axis, axis, indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
        w = np.full(len(pts), (extent / n) ** 3)
        frames = np.broadcast_to(np.eye(3), (len(pts), 3, 3)).copy()
        return DomainGrid(kind, extent / n, extent, pts, w, frames)

    if kind == "flat4":
        m = int(np.floor(extent / (2 * h) + 1e-9))
        axis = np.arange(-m, m + 1) * h
        grids = np.meshgrid(*([axis] * 4), indexing="ij")
        pts = np.column_stack([g.ravel() for g in grids])
        w = np.full(len(pts), h ** 4)
        frames = np.broadcast_to(np.eye(4), (len(pts), 4, 4)).copy()
        return DomainGrid(kind, h, extent, pts, w, frames)

    # sphere3
    L = extent
    nt = max(8, int(round(2 * np.pi / h)))
    nphi = nt
    nr = max(8, int(round(2 * L / h)))
    dt = 2 * np.pi / nt
    dphi = 2 * np.pi / nphi
    drho = 2 * L / nr
    t_vals = np.arange(nt) * dt
    phi_vals = np.arange(nphi) * dphi
    rho_vals = -L + (np.arange(nr) + 0.5) * drho

    T, R, P = np.meshgrid(t_vals, rho_vals, phi_vals, indexing="ij")
    pts = sphere3_point(T.ravel(), R.ravel(), P.ravel())
    # exact cell volume: (1/4) dt dphi * [tanh(rho+)-tanh(rho-)]
    cell = np.tanh(rho_vals + drho / 2) - np.tanh(rho_vals - drho / 2)
    w_main = 0.25 * dt * dphi * np.tile(np.repeat(cell, nphi), nt)

    cap_mass = np.pi ** 2 * (1.0 - np.tanh(L))  # per pole, exact remainder
    fib = np.zeros((nt, 4))
    fib[:, 0] = np.cos(t_vals)
    fib[:, 1] = np.sin(t_vals)
    cap_lo_pts = fib.copy()                       # fiber over +i through q = 1
    cap_hi_pts = quat.quat_mul(quat.J, fib)        # fiber over -i through q = j
    pts = np.vstack([pts, cap_lo_pts, cap_hi_pts])
    w = np.concatenate([w_main, np.full(nt, cap_mass / nt), np.full(nt, cap_mass / nt)])
    frames = left_frame(pts)
    n_main = nt * nr * nphi
    return DomainGrid("sphere3", h, L, pts, w, frames,
                      struct_shape=(nt, nr, nphi), t_vals=t_vals,
                      rho_vals=rho_vals, phi_vals=phi_vals,
                      cap_lo_index=n_main, cap_hi_index=n_main + nt)


def blowup_circle_distance(grid: DomainGrid):
    """Geodesic distance of every grid point to the circle {q : q i conj(q) = -i}.

    The distance to a Hopf fiber is half the S^2 distance of the base points.
    """
    p = hopf_map(grid.points)
    ang = np.arccos(np.clip(-p[..., 0], -1.0, 1.0))  # S^2 angle between p and -i
    return 0.5 * ang


# ---------------------------------------------------------------------------
# S^2 sampling for sphere maps (twistor checks, bubble compactification)
# ---------------------------------------------------------------------------

@dataclass
class S2Grid:
    """Latitude-longitude sampling of the unit S^2 in Im H, poles at +-i.

    tangents[:, 0] is the unit theta direction, tangents[:, 1] the unit phi
    direction; weights are exact cell areas (they sum to 4 pi).
    """

    points: np.ndarray    # (N, 3)
    weights: np.ndarray   # (N,)
    tangents: np.ndarray  # (N, 2, 3)
    shape: tuple

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def complex_rotation(self):
        """The complex structure w -> w x p on tangent pairs: returns the
        images (j tau_theta, j tau_phi) as an (N, 2, 3) array."""
        p = self.points
        jt = np.stack([np.cross(self.tangents[:, 0], p),
                       np.cross(self.tangents[:, 1], p)], axis=1)
        return jt


def build_s2_grid(n_theta: int = 64, n_phi: int = 64) -> S2Grid:
    theta = (np.arange(n_theta) + 0.5) * np.pi / n_theta
    phi = np.arange(n_phi) * 2 * np.pi / n_phi
    T, P = np.meshgrid(theta, phi, indexing="ij")
    st, ct = np.sin(T).ravel(), np.cos(T).ravel()
    sp, cp = np.sin(P).ravel(), np.cos(P).ravel()
    pts = np.column_stack([ct, st * cp, st * sp])
    # exact band areas
    edges = np.arange(n_theta + 1) * np.pi / n_theta
    band = np.cos(edges[:-1]) - np.cos(edges[1:])
    w = np.repeat(band, n_phi) * (2 * np.pi / n_phi)
    w = w.reshape(n_theta, n_phi).ravel()
    tan_theta = np.column_stack([-st, ct * cp, ct * sp])
    tan_phi = np.column_stack([np.zeros_like(sp), -sp, cp])
    tangents = np.stack([tan_theta, tan_phi], axis=1)
    return S2Grid(pts, w, tangents, (n_theta, n_phi))


# ---------------------------------------------------------------------------
# Generalized cubes (tangent x normal product balls)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneralizedCube:
    """Product B_r(z0) x B_s(w0) of a tangential interval and a normal disk."""

    z0: float
    w0: np.ndarray
    r: float
    s: float

    def __post_init__(self):
        if self.r <= 0 or self.s <= 0:
            raise ValueError("generalized cube radii must be positive")

    def contains(self, z, w):
        z = np.asarray(z, dtype=float)
        w = np.asarray(w, dtype=float)
        return (np.abs(z - self.z0) <= self.r) & (
            np.linalg.norm(w - self.w0, axis=-1) <= self.s)


# ---------------------------------------------------------------------------
# The 4D algebraic core
# ---------------------------------------------------------------------------

def psi_endomorphism(n: int = 1) -> np.ndarray:
    """Matrix of T -> sum_i I(w_i) o T o iota(w_i) on Hom(R^4, H^n).

    iota sends the standard self-dual 2-form basis to the complex structures
    L_i, L_j, L_k on R^4 = H (normalized to square to -id), and I(w_i) is left
    quaternion multiplication on each H factor.  T is flattened row-major as a
    (4n, 4) matrix; the returned matrix is (16n, 16n) and symmetric.
    """
    if n < 1:
        raise ValueError("n must be a positive integer")
    eye_n = np.eye(n)
    mat = np.zeros((16 * n, 16 * n))
    for a in range(3):
        B = np.kron(eye_n, quat.LEFT[a])      # left multiplication on H^n
        A = quat.LEFT[a]                      # iota(w_a) on R^4
        mat += np.kron(B, A.T)
    return mat
