"""The explicit blow-up family, rescaling, bubble extraction, tangent cones.

The family u_lam = z o s_lam o pi composes a holomorphic sphere z with the
conformal scaling s_lam of S^2 (in the stereographic chart with infinity at
-i) and the Hopf map.  For I_(1,0,0)-holomorphic z it is an exact Fueter map
whose energy is lam-independent; as lam -> 0 it concentrates along the circle
{q : q i conj(q) = -i}.

Bubble extraction follows a three-stage pipeline at a point x of the detected
locus with estimated tangent direction v: (i) find a zoom scale at which the
rescaled energy is concentrated along the v-axis; (ii) refine the scale and
recenter in the normal plane so the maximal unit-ball energy over normal
translates equals epsilon0/8, the max sitting at the origin; (iii) average
the final map along v, restrict to the normal plane, compactify, and measure
the anti-holomorphy residual dbar = d_2 - I(v) d_3 together with the 2D
energy.  "No bubble" is a reported outcome, not an error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from . import domains as dom
from . import quaternions as quat
from .domains import DomainGrid, build_grid
from .hk import SphereMap, TargetChart, regularize_sphere_points
from .measures import RadonMeasureApprox, density_theta, energy_measure
from .sections import SectionSample, chart_coord_diff, sample_map


# ---------------------------------------------------------------------------
# Stereographic pushforwards (both charts, scaling-safe near either pole)
# ---------------------------------------------------------------------------

def _scaled_base_and_push(p, tangents, lam):
    """Image and differential of p -> unstereo(lam * stereo(p)) on S^2.

    tangents has shape (N, m, 3); the computation switches to the inverted
    chart near the pole at -i so the conformal map is evaluated stably on all
    of S^2.  Returns (p_new (N,3), tangents_new (N,m,3)).
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    tangents = np.asarray(tangents, dtype=float)
    n, m = tangents.shape[0], tangents.shape[1]
    p_new = np.empty_like(p)
    t_new = np.empty_like(tangents)

    use_zeta = 1.0 + p[:, 0] >= 0.5  # else use eta = 1/zeta around -i

    def push_zeta(idx, scale):
        pp = p[idx]
        den = 1.0 + pp[:, 0]
        z = (pp[:, 1] - 1j * pp[:, 2]) / den
        zs = scale * z
        w = tangents[idx]
        dz = ((w[..., 1] - 1j * w[..., 2]) - z[:, None] * w[..., 0]) / den[:, None]
        dzs = scale * dz
        mm = np.abs(zs) ** 2
        dm = 2 * (zs.real[:, None] * dzs.real + zs.imag[:, None] * dzs.imag)
        opm = 1.0 + mm
        p_new[idx, 0] = (1.0 - mm) / opm
        p_new[idx, 1] = 2 * zs.real / opm
        p_new[idx, 2] = -2 * zs.imag / opm
        t_new[idx, :, 0] = -2 * dm / opm[:, None] ** 2
        t_new[idx, :, 1] = 2 * dzs.real / opm[:, None] - 2 * zs.real[:, None] * dm / opm[:, None] ** 2
        t_new[idx, :, 2] = -2 * dzs.imag / opm[:, None] + 2 * zs.imag[:, None] * dm / opm[:, None] ** 2

    def push_eta(idx, scale):
        # eta = 1/zeta; scaling zeta by lam divides eta by lam
        pp = p[idx]
        den = 1.0 - pp[:, 0]
        e = (pp[:, 1] + 1j * pp[:, 2]) / den
        es = e / scale
        w = tangents[idx]
        de = ((w[..., 1] + 1j * w[..., 2]) + e[:, None] * w[..., 0]) / den[:, None]
        des = de / scale
        mm = np.abs(es) ** 2
        dm = 2 * (es.real[:, None] * des.real + es.imag[:, None] * des.imag)
        opm = mm + 1.0
        p_new[idx, 0] = (mm - 1.0) / opm
        p_new[idx, 1] = 2 * es.real / opm
        p_new[idx, 2] = 2 * es.imag / opm
        t_new[idx, :, 0] = 2 * dm / opm[:, None] ** 2
        t_new[idx, :, 1] = 2 * des.real / opm[:, None] - 2 * es.real[:, None] * dm / opm[:, None] ** 2
        t_new[idx, :, 2] = 2 * des.imag / opm[:, None] - 2 * es.imag[:, None] * dm / opm[:, None] ** 2

    if use_zeta.any():
        push_zeta(use_zeta, lam)
    if (~use_zeta).any():
        push_eta(~use_zeta, lam)
    return p_new, t_new


# ---------------------------------------------------------------------------
# The blow-up family
# ---------------------------------------------------------------------------

def hns_family(chart: TargetChart, z: SphereMap, lam: float,
               grid: DomainGrid) -> SectionSample:
    """Sample u_lam = z o s_lam o pi on a sphere3 grid (exact derivatives when
    the sphere map carries a differential)."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    if grid.kind != "sphere3":
        raise ValueError("the blow-up family lives on sphere3 grids")

    def fn(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        p = dom.hopf_map(pts)
        p_new, _ = _scaled_base_and_push(p, np.zeros((len(p), 1, 3)), lam)
        return z(regularize_sphere_points(p_new, z.valid_mask))

    dfn = None
    if z.differential is not None:
        def dfn(pts):
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            p = dom.hopf_map(pts)
            # dpi(v_a) = q [e_a, i] conj(q): zero, -2 q k conj(q), 2 q j conj(q)
            qj = quat.imag(quat.quat_mul(quat.quat_mul(pts, quat.J), quat.conj(pts)))
            qk = quat.imag(quat.quat_mul(quat.quat_mul(pts, quat.K), quat.conj(pts)))
            tang = np.stack([-2.0 * qk, 2.0 * qj], axis=1)
            p_new, t_new = _scaled_base_and_push(p, tang, lam)
            p_new, t_new = regularize_sphere_points(p_new, z.valid_mask, t_new)
            out = np.zeros((len(pts), 3, chart.dim))
            out[:, 1] = z.differential(p_new, t_new[:, 0])
            out[:, 2] = z.differential(p_new, t_new[:, 1])
            return out

    return sample_map(grid, chart, fn, dfn)


# ---------------------------------------------------------------------------
# Rescaling
# ---------------------------------------------------------------------------

def _exp_point_and_frame(grid_kind: str, x, frame_x):
    """Returns exp(y) and d exp_y[e_a] callables for tangent coordinates y
    expressed in the orthonormal frame frame_x at x."""
    x = np.asarray(x, dtype=float)

    if grid_kind == "sphere3":
        def exp_fn(y):
            y = np.atleast_2d(y)
            r = np.linalg.norm(y, axis=1)
            direction = np.einsum("na,ad->nd", y, frame_x)
            safe = r > 1e-300
            unit = np.where(safe[:, None], direction / np.where(safe, r, 1.0)[:, None], 0.0)
            return np.cos(r)[:, None] * x + np.sin(r)[:, None] * unit

        def dexp_fn(y):
            """(N, 3, 4): image of the coordinate basis under d exp_y."""
            y = np.atleast_2d(y)
            n = len(y)
            r = np.linalg.norm(y, axis=1)
            out = np.empty((n, 3, 4))
            small = r < 1e-9
            direction = np.einsum("na,ad->nd", y, frame_x)
            unit = np.where(~small[:, None], direction / np.where(small, 1.0, r)[:, None], 0.0)
            rad = -np.sin(r)[:, None] * x + np.cos(r)[:, None] * unit
            for a in range(3):
                e_emb = frame_x[a]
                ca = np.where(small, 0.0, y[:, a] / np.where(small, 1.0, r))
                perp = e_emb[None, :] - ca[:, None] * unit
                sinc = np.where(small, 1.0, np.sin(r) / np.where(small, 1.0, r))
                out[:, a] = ca[:, None] * rad + sinc[:, None] * perp
            out[small] = np.broadcast_to(frame_x, (3, 4))
            return out

        return exp_fn, dexp_fn

    def exp_fn(y):
        return x + np.atleast_2d(y)

    def dexp_fn(y):
        y = np.atleast_2d(y)
        return np.broadcast_to(np.eye(3), (len(y), 3, 3)).copy()

    return exp_fn, dexp_fn


def max_rescale_factor(u: SectionSample, x, extent: float) -> float:
    """Largest admissible lam for rescale windows of the given extent."""
    if u.grid.kind == "sphere3":
        return 0.45 * np.pi / extent
    if u.grid.kind == "torus3":
        return 0.5 * u.grid.extent / extent
    return max(u.grid.max_admissible_radius(x), 0.0) / extent


def rescale_map(u: SectionSample, x, lam: float, new_h: float = 1 / 16,
                new_extent: float = 1.0) -> SectionSample:
    """Pullback u(exp_x o s_lam) resampled on a fresh ball3 grid.

    Derivatives are chain-ruled through the exponential map; values come from
    the sample's exact evaluator when present, else grid interpolation.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    lam_max = max_rescale_factor(u, x, new_extent)
    if lam > lam_max + 1e-12:
        raise ValueError(f"rescaled window exits the domain; maximal admissible "
                         f"lam for extent {new_extent} is {lam_max:.6g}")
    x = np.asarray(x, dtype=float)
    frame_x = u.grid.frame_at(x[None])[0]
    exp_fn, dexp_fn = _exp_point_and_frame(u.grid.kind, x, frame_x)
    ball = build_grid("ball3", new_h, new_extent)

    def fn(y):
        return u.eval_values(exp_fn(lam * np.atleast_2d(y)))

    def dfn(y):
        y = np.atleast_2d(y)
        ys = lam * y
        pts = exp_fn(ys)
        dex = dexp_fn(ys)  # (N, 3, d_emb)
        frames = u.grid.frame_at(pts)
        coeff = np.einsum("nad,nbd->nab", dex, frames)  # dexp[e_a] in frame
        du = u.eval_derivative(pts)
        return lam * np.einsum("nab,nbi->nai", coeff, du)

    out = sample_map(ball, u.chart, fn, dfn)
    if not u.exact_mode:
        # values were interpolated; keep evaluators for further zooms anyway
        pass
    return out


# ---------------------------------------------------------------------------
# Translation deficit over generalized cubes
# ---------------------------------------------------------------------------

def translation_deficit(u: SectionSample, v, L: float, n_s: int = 8) -> float:
    """sup_{s <= L} (1/s) int_{Q_{s,L}(0)} |du(v)|^2 on a ball3 sample.

    Q_{s,L} is the product of the tangential interval of radius s along v and
    the normal disk of radius L.
    """
    if u.grid.kind != "ball3":
        raise ValueError("translation deficit is computed on ball3 windows")
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    pts = u.grid.points
    z = pts @ v
    w = pts - np.outer(z, v)
    wn = np.linalg.norm(w, axis=1)
    if L > u.grid.extent + 1e-12:
        raise ValueError("normal radius L exceeds the window extent")
    dv = np.einsum("a,nai->ni", v, u.derivative)
    G = u.chart.metric_at(u.values)
    dv_sq = np.einsum("ni,nij,nj->n", dv, G, dv)
    best = 0.0
    for s in np.linspace(L / n_s, L, n_s):
        if np.sqrt(s ** 2 + L ** 2) > u.grid.extent + 1e-9:
            raise ValueError("generalized cube exits the ball3 window")
        inside = (np.abs(z) <= s) & (wn <= L)
        val = float(np.sum(u.grid.weights[inside] * dv_sq[inside]) / s)
        best = max(best, val)
    return best


# ---------------------------------------------------------------------------
# Bubble extraction
# ---------------------------------------------------------------------------

@dataclass
class BubbleReport:
    """Outcome of the bubble-extraction pipeline at one base point."""

    found: bool
    reason: str = ""
    base_point: np.ndarray | None = None
    tangent_direction: np.ndarray | None = None
    bubble_values: np.ndarray | None = None      # (W, W, dim) planar map
    bubble_grid_radius: float = 0.0
    bubble_spacing: float = 0.0
    infinity_value: np.ndarray | None = None
    bubble_energy: float = 0.0
    antiholomorphy_residual: float = 0.0         # relative L^2
    theta_at_x: float = 0.0
    eps_scale: float = 0.0
    delta_scale: float = 0.0
    energy_capture: float = 0.0                  # half-window / full-window energy
    compact: bool = False

    def to_json(self, path=None):
        payload = {
            "schema_version": 1,
            "found": self.found,
            "reason": self.reason,
            "bubble_energy": float(self.bubble_energy),
            "antiholomorphy_residual": float(self.antiholomorphy_residual),
            "theta_at_x": float(self.theta_at_x),
            "eps_scale": float(self.eps_scale),
            "delta_scale": float(self.delta_scale),
            "energy_capture": float(self.energy_capture),
            "compact": bool(self.compact),
        }
        if self.base_point is not None:
            payload["base_point"] = [float(c) for c in self.base_point]
            payload["tangent_direction"] = [float(c) for c in self.tangent_direction]
        text = json.dumps(payload, sort_keys=True, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def map_to_csv(self, path):
        if self.bubble_values is None:
            raise ValueError("no bubble map to export")
        W = self.bubble_values.shape[0]
        ax = (np.arange(W) - (W - 1) / 2) * self.bubble_spacing
        W2, W3 = np.meshgrid(ax, ax, indexing="ij")
        flat = self.bubble_values.reshape(W * W, -1)
        data = np.column_stack([W2.ravel(), W3.ravel(), flat])
        cols = ["w2", "w3"] + [f"u{i}" for i in range(flat.shape[1])]
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="")


def estimate_tangent_direction(nu: RadonMeasureApprox, x, radius: float):
    """Principal direction of the nu-mass second-moment matrix in a ball."""
    x = np.asarray(x, dtype=float)
    d = nu.distances_from(x)
    sel = (d <= radius) & (nu.masses > 0)
    if not sel.any():
        raise ValueError("no defect mass near the requested point")
    disp = nu.points[sel] - x
    if nu.geometry == "sphere3":
        # project chordal displacements to the tangent space at x
        disp = disp - np.outer(disp @ x, x)
    m = nu.masses[sel]
    M = np.einsum("n,ni,nj->ij", m, disp, disp)
    vals, vecs = np.linalg.eigh(M)
    v = vecs[:, -1]
    if nu.geometry == "sphere3":
        fr = dom.left_frame(x[None])[0]
        coeff = fr @ v
        v = coeff / np.linalg.norm(coeff)
    return v / np.linalg.norm(v)


def _orthonormal_triple(grid: DomainGrid, x, v_coeff):
    """Right-handed orthonormal frame (v, n2, n3) in frame coefficients."""
    v = np.asarray(v_coeff, dtype=float)
    v = v / np.linalg.norm(v)
    a = np.array([1.0, 0.0, 0.0])
    if abs(v @ a) > 0.9:
        a = np.array([0.0, 1.0, 0.0])
    n2 = a - (a @ v) * v
    n2 /= np.linalg.norm(n2)
    n3 = np.cross(v, n2)
    return v, n2, n3


class _Zoom:
    """Evaluation of a member in tangent coordinates around x (frame (v,n2,n3))."""

    def __init__(self, u: SectionSample, x, v_coeff):
        self.u = u
        self.x = np.asarray(x, dtype=float)
        frame_x = u.grid.frame_at(self.x[None])[0]
        self.v, self.n2, self.n3 = _orthonormal_triple(u.grid, x, v_coeff)
        self.basis = np.stack([self.v, self.n2, self.n3])  # rows: frame coeffs
        self.exp_fn, self.dexp_fn = _exp_point_and_frame(u.grid.kind, self.x, frame_x)

    def tangent_to_manifold(self, y_zvw):
        """(z, w2, w3) coordinates -> manifold points."""
        y = np.atleast_2d(y_zvw) @ self.basis
        return self.exp_fn(y)

    def density(self, y_zvw):
        return self.u.eval_density(self.tangent_to_manifold(y_zvw))

    def derivative_zvw(self, y_zvw):
        """du along d exp of the (v, n2, n3) directions, shape (N, 3, dim)."""
        y = np.atleast_2d(y_zvw) @ self.basis
        pts = self.exp_fn(y)
        dex = self.dexp_fn(y)                      # images of frame_x axes
        frames = self.u.grid.frame_at(pts)
        coeff = np.einsum("nad,nbd->nab", dex, frames)
        du = np.einsum("nab,nbi->nai", coeff, self.u.eval_derivative(pts))
        return np.einsum("ca,nai->nci", self.basis, du)

    def ball_energy(self, center_zvw, r: float, n: int = 9) -> float:
        """int_{B_r(center)} |du|^2 by tangent-space product quadrature."""
        ax = (np.arange(n) + 0.5) / n * 2 - 1.0
        X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
        inside = np.linalg.norm(pts, axis=1) <= 1.0
        pts = pts[inside]
        cell = (2.0 / n) ** 3 * r ** 3
        y = np.asarray(center_zvw, dtype=float) + r * pts
        return float(np.sum(self.density(y)) * cell)

    def cylinder_profile(self, z_half: float, w_max: float, nz: int, nw: int):
        """Energy in Q_{z_half, w_max} and the fraction inside |w| <= w_max/4."""
        zs = np.linspace(-z_half, z_half, nz)
        ax = (np.arange(nw) + 0.5) / nw * 2 - 1.0
        W2, W3 = np.meshgrid(ax * w_max, ax * w_max, indexing="ij")
        wpts = np.column_stack([W2.ravel(), W3.ravel()])
        keep = np.linalg.norm(wpts, axis=1) <= w_max
        wpts = wpts[keep]
        cell = (2.0 * w_max / nw) ** 2 * (zs[1] - zs[0] if nz > 1 else 2 * z_half)
        total = 0.0
        core = 0.0
        wn = np.linalg.norm(wpts, axis=1)
        tube = wn <= w_max / 4.0
        for z0 in zs:
            y = np.column_stack([np.full(len(wpts), z0), wpts])
            dens = self.density(y)
            total += float(np.sum(dens) * cell)
            core += float(np.sum(dens[tube]) * cell)
    # guard: empty profile
        if total <= 0:
            return 0.0, 0.0
        return total, core / total


def extract_bubble(seq, x, v, epsilon0: float,
                   theta_at_x: float | None = None,
                   eps_candidates=None,
                   window_radius: float = 36.0,
                   window_spacing: float = 0.375,
                   n_delta: int = 64,
                   member: int = -1) -> BubbleReport:
    """Run the three-stage extraction pipeline at a candidate locus point."""
    if not seq:
        raise ValueError("empty sequence")
    u = seq[member]
    x = np.asarray(x, dtype=float)
    zoom = _Zoom(u, x, v)

    lam_cap = max_rescale_factor(u, x, 2.0)
    if eps_candidates is None:
        eps_candidates = np.geomspace(min(0.35, lam_cap), 1e-3, 25)

    # Stage (i): deepest scale at which energy is tube-concentrated along v.
    eps_star = None
    for eps in sorted(eps_candidates):  # ascending: prefer the deepest zoom
        total, frac = zoom.cylinder_profile(2.0 * eps, eps, nz=7, nw=25)
        renorm = zoom.ball_energy(np.zeros(3), eps) / eps
        if renorm >= 0.5 * epsilon0 and frac >= 0.9:
            eps_star = float(eps)
            break
    if eps_star is None:
        return BubbleReport(False, "no concentration scale", x, zoom.v)

    # Stage (ii): largest delta with max_w unit-ball energy == epsilon0/8.
    target = epsilon0 / 8.0
    deltas = np.geomspace(1.0, 1e-3, n_delta)
    offsets = np.linspace(-1.0, 1.0, 9)
    W2, W3 = np.meshgrid(offsets, offsets, indexing="ij")
    wgrid = np.column_stack([W2.ravel(), W3.ravel()])
    wgrid = wgrid[np.linalg.norm(wgrid, axis=1) <= 1.0]
    delta_star = None
    w_star = np.zeros(2)
    found_mass = False
    for delta in deltas:
        vals = np.array([
            zoom.ball_energy(np.array([0.0, eps_star * w[0], eps_star * w[1]]),
                             eps_star * delta, n=7) / (eps_star * delta)
            for w in wgrid
        ])
        m = vals.max()
        if m > target:
            found_mass = True
        if m <= target:
            if not found_mass and delta == deltas[0]:
                return BubbleReport(False, "no mass at the epsilon0/8 level",
                                    x, zoom.v)
            delta_star = float(delta)
            w_star = wgrid[int(vals.argmax())] * eps_star
            break
    if delta_star is None:
        return BubbleReport(False, "no scale achieving the epsilon0/8 level",
                            x, zoom.v)

    # Stage (iii): average along v, restrict to the normal plane, compactify.
    sigma = eps_star * delta_star
    R = window_radius
    dw = window_spacing
    nside = int(2 * round(R / dw / 2) + 1)
    ax = (np.arange(nside) - (nside - 1) / 2) * dw
    AW2, AW3 = np.meshgrid(ax, ax, indexing="ij")
    plane = np.column_stack([AW2.ravel(), AW3.ravel()])
    z_slices = np.linspace(-1.0, 1.0, 5)
    dim = u.chart.dim
    periodic = _periodic_mask(u.chart)

    vals_acc = np.zeros((len(plane), dim))
    circ_acc = np.zeros((len(plane), 2, int(periodic.sum()))) if periodic.any() else None
    d2_acc = np.zeros((len(plane), dim))
    d3_acc = np.zeros((len(plane), dim))
    for z0 in z_slices:
        y = np.column_stack([np.full(len(plane), z0 * sigma),
                             w_star[0] + sigma * plane[:, 0],
                             w_star[1] + sigma * plane[:, 1]])
        vals = u.eval_values(zoom.tangent_to_manifold(y))
        deriv = zoom.derivative_zvw(y) * sigma  # per unit w-plane coordinate
        vals_acc += vals
        if circ_acc is not None:
            ang = vals[:, periodic]
            circ_acc[:, 0] += np.cos(ang)
            circ_acc[:, 1] += np.sin(ang)
        d2_acc += deriv[:, 1]
        d3_acc += deriv[:, 2]
    vals_mean = vals_acc / len(z_slices)
    if circ_acc is not None:
        vals_mean[:, periodic] = np.arctan2(circ_acc[:, 1], circ_acc[:, 0])
    d2 = d2_acc / len(z_slices)
    d3 = d3_acc / len(z_slices)

    G = u.chart.metric_at(vals_mean)
    e2 = np.einsum("ni,nij,nj->n", d2, G, d2)
    e3 = np.einsum("ni,nij,nj->n", d3, G, d3)
    dens2d = e2 + e3
    cell = dw ** 2
    bubble_energy = float(np.sum(dens2d) * cell)
    rad = np.linalg.norm(plane, axis=1)
    inner = rad <= R / 2
    energy_inner = float(np.sum(dens2d[inner]) * cell)
    capture = energy_inner / bubble_energy if bubble_energy > 0 else 0.0

    # anti-holomorphy residual of dbar = d_2 - I(v) d_3
    Iv = np.einsum("a,naij->nij",
                   zoom.v, u.chart.structures_at(vals_mean))
    dbar = d2 - np.einsum("nij,nj->ni", Iv, d3)
    num = float(np.sum(np.einsum("ni,nij,nj->n", dbar, G, dbar)) * cell)
    rel = float(np.sqrt(num / bubble_energy)) if bubble_energy > 0 else 0.0

    boundary = rad >= R - 2 * dw
    inf_value = vals_mean[boundary].mean(axis=0)
    if circ_acc is not None:
        ang = vals_mean[boundary][:, periodic]
        inf_value[periodic] = np.arctan2(np.sin(ang).mean(axis=0),
                                         np.cos(ang).mean(axis=0))

    if theta_at_x is None:
        mu = energy_measure(u)
        theta_at_x = density_theta(mu, x, [0.4, 0.3, 0.2, 0.1]).theta

    return BubbleReport(
        found=True, reason="", base_point=x, tangent_direction=zoom.v,
        bubble_values=vals_mean.reshape(nside, nside, dim),
        bubble_grid_radius=R, bubble_spacing=dw, infinity_value=inf_value,
        bubble_energy=bubble_energy, antiholomorphy_residual=rel,
        theta_at_x=float(theta_at_x), eps_scale=eps_star,
        delta_scale=delta_star, energy_capture=capture,
        compact=bool(capture >= 0.95),
    )


def _periodic_mask(chart: TargetChart):
    if chart.name == "eguchi-hanson":
        return np.array([True, False, False, False])
    if chart.periodic:
        return np.ones(chart.dim, dtype=bool)
    return np.zeros(chart.dim, dtype=bool)


# ---------------------------------------------------------------------------
# Tangent-cone diagnostics
# ---------------------------------------------------------------------------

@dataclass
class TangentConeSample:
    """Rays with positive weights, plus an optional 2D map part."""

    rays: np.ndarray      # (k, 3) unit vectors
    weights: np.ndarray   # (k,)
    map_part: tuple | None = None   # (S2Grid, density array)

    def __post_init__(self):
        self.rays = np.atleast_2d(np.asarray(self.rays, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights <= 0):
            raise ValueError("ray weights must be positive")
        norms = np.linalg.norm(self.rays, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("rays must be unit vectors")
        for i in range(len(self.rays)):
            for j in range(i + 1, len(self.rays)):
                if np.allclose(self.rays[i], self.rays[j], atol=1e-9):
                    raise ValueError("rays must be distinct")


def balancing_deficit(cone: TangentConeSample) -> float:
    """|sum_x x Theta(x) + int_{S^2} x |du|^2|, zero for balanced cones."""
    total = np.einsum("k,ki->i", cone.weights, cone.rays)
    if cone.map_part is not None:
        s2, dens = cone.map_part
        total = total + np.einsum("n,n,ni->i", s2.weights, dens, s2.points)
    return float(np.linalg.norm(total))


def tangent_cone_from_measure(nu: RadonMeasureApprox, x, radii=(0.5, 0.25),
                              angle_bin: float = 0.2, min_weight: float = 1e-6):
    """Estimate a tangent cone of a 1D measure at x from annulus directions.

    Returns (TangentConeSample, per-annulus weights per ray) so constancy of
    the ray weights across scales can be checked.
    """
    x = np.asarray(x, dtype=float)
    ray_dirs = []
    ray_weights = []
    for r in radii:
        d = nu.distances_from(x)
        sel = (d > r / 2) & (d <= r) & (nu.masses > 0)
        dirs = (nu.points[sel] - x) / d[sel, None]
        mass = nu.masses[sel]
        bins = []
        for direction, m in zip(dirs, mass):
            for b in bins:
                if np.arccos(np.clip(direction @ b["dir"], -1, 1)) < angle_bin:
                    b["mass"] += m
                    b["vec"] += m * direction
                    break
            else:
                bins.append({"dir": direction, "mass": m, "vec": m * direction.copy()})
        ann = {}
        for b in bins:
            if b["mass"] > min_weight:
                v = b["vec"] / np.linalg.norm(b["vec"])
                ann[tuple(np.round(v, 3))] = b["mass"] / (r / 2)
        ray_dirs.append(ann)
    merged = {}
    for ann in ray_dirs:
        for k, w in ann.items():
            merged.setdefault(k, []).append(w)
    rays = np.array([np.asarray(k) for k in merged])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    weights = np.array([np.mean(v) for v in merged.values()])
    cone = TangentConeSample(rays, weights)
    return cone, merged


def conical_deviation(u: SectionSample, phi, R: float, phi_grad=None,
                      n_r: int = 16):
    """Deviation of the rescaled energy measure from conicality, vs. majorant.

    phi is a compactly supported C^1 weight given as a callable on points;
    the lhs compares int phi(x) R^2 |du|^2(Rx) with int phi |du|^2 (tangent
    measure normalization), the rhs integrates the radial-energy majorant
    (diam supp phi) ||phi||_C1 |du(d_r)| |du| r^2 over r in [1, R].
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    grid = u.grid
    if grid.kind != "ball3":
        raise ValueError("conical deviation is computed on ball3 samples")
    pts = grid.points
    w = grid.weights
    phi_vals = np.asarray(phi(pts), dtype=float)
    supp = phi_vals > 0
    if not supp.any():
        raise ValueError("phi vanishes on the grid")
    supp_rad = np.linalg.norm(pts[supp], axis=1).max()
    if R * supp_rad > grid.extent + 1e-9:
        raise ValueError("[1, R] . supp(phi) exits the domain")
    diam = 2.0 * supp_rad
    if phi_grad is not None:
        gn = np.linalg.norm(np.asarray(phi_grad(pts[supp])), axis=1).max()
    else:
        delta = 1e-5
        gmax = 0.0
        for a in range(3):
            off = np.zeros(3)
            off[a] = delta
            gmax = max(gmax, np.abs(np.asarray(phi(pts[supp] + off), dtype=float)
                                    - np.asarray(phi(pts[supp] - off), dtype=float)
                                    ).max() / (2 * delta))
        gn = gmax
    phi_c1 = phi_vals.max() + gn

    dens_1 = u.eval_density(pts[supp])
    dens_R = u.eval_density(R * pts[supp])
    lhs = abs(float(np.sum(w[supp] * phi_vals[supp] * (R ** 2 * dens_R - dens_1))))

    r_nodes = np.linspace(1.0, R, n_r)
    integrand = np.zeros(n_r)
    base = pts[supp]
    radial_dir = base / np.linalg.norm(base, axis=1, keepdims=True)
    for k, r in enumerate(r_nodes):
        scaled = r * base
        du_r = u.directional_derivative(scaled, radial_dir)
        vals = u.eval_values(scaled)
        G = u.chart.metric_at(vals)
        nr = np.sqrt(np.maximum(np.einsum("ni,nij,nj->n", du_r, G, du_r), 0))
        nd = np.sqrt(np.maximum(u.eval_density(scaled), 0))
        integrand[k] = float(np.sum(w[supp] * diam * phi_c1 * nr * nd * r ** 2))
    rhs = float(np.trapezoid(integrand, r_nodes)) if R > 1 else 0.0
    return lhs, rhs


def balancing_boundary_functional(u: SectionSample, x, r: float, v,
                                  n_sphere: int = 48):
    """Surface functional whose vanishing expresses balancing, with its bound.

    lhs = | int_{dB_r(x)} <v, d_r> (2|du|^2 + |du(d_r)|^2) - 2 <du(d_r), du(v)> |
    rhs = int_{dB_r(x)} r ||grad v||_inf |du|^2  (zero for constant v).
    Also returns the boundary energy scale int_{dB_r} |du|^2 for tolerance
    normalization.
    """
    from .domains import build_s2_grid

    x = np.asarray(x, dtype=float)
    grid = u.grid
    s2 = build_s2_grid(n_sphere, n_sphere)
    if grid.kind == "sphere3":
        frame_x = grid.frame_at(x[None])[0]
        exp_fn, _ = _exp_point_and_frame("sphere3", x, frame_x)
        pts = exp_fn(r * s2.points)
        # radial directions via the geodesic tangent at the surface point
        c = np.cos(r)
        unit = np.einsum("na,ad->nd", s2.points, frame_x)
        rad_emb = -np.sin(r) * x + c * unit
        frames = grid.frame_at(pts)
        rad_coeff = np.einsum("nad,nd->na", frames, rad_emb)
        surf_w = s2.weights * np.sin(r) ** 2  # geodesic sphere area element
    else:
        pts = x + r * s2.points
        rad_coeff = s2.points
        surf_w = s2.weights * r ** 2
    if callable(v):
        v_vecs = np.asarray(v(pts), dtype=float)
        grad_norm = _vector_field_grad_norm(v, pts)
    else:
        v_vecs = np.broadcast_to(np.asarray(v, dtype=float), rad_coeff.shape).copy()
        grad_norm = 0.0
    du = u.eval_derivative(pts)
    vals = u.eval_values(pts)
    G = u.chart.metric_at(vals)
    du_r = np.einsum("na,nai->ni", rad_coeff, du)
    du_v = np.einsum("na,nai->ni", v_vecs, du)
    dens = np.einsum("nai,nij,naj->n", du, G, du)
    r_sq = np.einsum("ni,nij,nj->n", du_r, G, du_r)
    rv = np.einsum("ni,nij,nj->n", du_r, G, du_v)
    v_dot_r = np.einsum("na,na->n", v_vecs, rad_coeff)
    lhs = abs(float(np.sum(surf_w * (v_dot_r * (2 * dens + r_sq) - 2 * rv))))
    boundary_energy = float(np.sum(surf_w * dens))
    rhs = float(r * grad_norm * boundary_energy)
    return SimpleNamespace(lhs=lhs, rhs_bound=rhs, boundary_energy=boundary_energy)


def _vector_field_grad_norm(v, pts, delta: float = 1e-5) -> float:
    gmax = 0.0
    for a in range(pts.shape[1]):
        off = np.zeros(pts.shape[1])
        off[a] = delta
        diff = (np.asarray(v(pts + off)) - np.asarray(v(pts - off))) / (2 * delta)
        gmax = max(gmax, float(np.linalg.norm(diff, axis=1).max()))
    return gmax
