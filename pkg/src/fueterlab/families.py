"""Built-in analytic map families with closed-form frame derivatives.

Everything downstream (oracle tests, calibration, acceptance experiments)
works with explicit families rather than solving the Fueter equation; each
family returns (fn, dfn) callbacks consumable by sections.sample_map, where
dfn yields derivatives along the constant frame (e1, e2, e3).
"""

from __future__ import annotations

import numpy as np

from . import quaternions as quat


def linear_map(A):
    """u(x) = A x for a (dim, 3) matrix A; columns are the frame derivatives."""
    A = np.asarray(A, dtype=float)

    def fn(pts):
        return np.atleast_2d(pts) @ A.T

    def dfn(pts):
        pts = np.atleast_2d(pts)
        return np.broadcast_to(A.T, (len(pts),) + A.T.shape).copy()

    return fn, dfn


def linear_fueter():
    """u(x) = x1 i - x2 j, the basic exact Fueter map into flat H."""
    A = np.zeros((4, 3))
    A[1, 0] = 1.0   # x1 -> i
    A[2, 1] = -1.0  # x2 -> -j
    return linear_map(A)


def linear_all_axes():
    """u(x) = x1 i + x2 j + x3 k; constant Fueter residual -3."""
    A = np.zeros((4, 3))
    A[1, 0] = A[2, 1] = A[3, 2] = 1.0
    return linear_map(A)


def quadratic_fueter():
    """u(x) = (k/2)(x1^2 - x2^2) + x1 x2, an exact quadratic Fueter map."""

    def fn(pts):
        pts = np.atleast_2d(pts)
        x1, x2 = pts[:, 0], pts[:, 1]
        out = np.zeros((len(pts), 4))
        out[:, 0] = x1 * x2
        out[:, 3] = 0.5 * (x1 ** 2 - x2 ** 2)
        return out

    def dfn(pts):
        pts = np.atleast_2d(pts)
        x1, x2 = pts[:, 0], pts[:, 1]
        d = np.zeros((len(pts), 3, 4))
        d[:, 0, 0] = x2
        d[:, 0, 3] = x1
        d[:, 1, 0] = x1
        d[:, 1, 3] = -x2
        return d

    return fn, dfn


def exp_fueter():
    """u(x) = e^{x2} (cos x1 + k sin x1), a transcendental exact Fueter map."""

    def fn(pts):
        pts = np.atleast_2d(pts)
        out = np.zeros((len(pts), 4))
        r = np.exp(pts[:, 1])
        out[:, 0] = r * np.cos(pts[:, 0])
        out[:, 3] = r * np.sin(pts[:, 0])
        return out

    def dfn(pts):
        pts = np.atleast_2d(pts)
        r = np.exp(pts[:, 1])
        c, s = np.cos(pts[:, 0]), np.sin(pts[:, 0])
        d = np.zeros((len(pts), 3, 4))
        d[:, 0, 0] = -r * s
        d[:, 0, 3] = r * c
        d[:, 1, 0] = r * c
        d[:, 1, 3] = r * s
        return d

    return fn, dfn


def exp_fueter_second():
    """u(x) = e^{x3} (cos x2 + i sin x2), an independent transcendental Fueter map."""

    def fn(pts):
        pts = np.atleast_2d(pts)
        out = np.zeros((len(pts), 4))
        r = np.exp(pts[:, 2])
        out[:, 0] = r * np.cos(pts[:, 1])
        out[:, 1] = r * np.sin(pts[:, 1])
        return out

    def dfn(pts):
        pts = np.atleast_2d(pts)
        r = np.exp(pts[:, 2])
        c, s = np.cos(pts[:, 1]), np.sin(pts[:, 1])
        d = np.zeros((len(pts), 3, 4))
        d[:, 1, 0] = -r * s
        d[:, 1, 1] = r * c
        d[:, 2, 0] = r * c
        d[:, 2, 1] = r * s
        return d

    return fn, dfn


def smooth_control():
    """A smooth non-Fueter map with non-vanishing derivatives of all orders."""

    def fn(pts):
        pts = np.atleast_2d(pts)
        x1, x2, x3 = pts[:, 0], pts[:, 1], pts[:, 2]
        out = np.zeros((len(pts), 4))
        out[:, 0] = np.sin(x1 + 0.5 * x3)
        out[:, 1] = np.cos(x2) * np.exp(0.3 * x1)
        out[:, 2] = np.sin(x2 + x3)
        out[:, 3] = np.cos(x1 - x2)
        return out

    def dfn(pts):
        pts = np.atleast_2d(pts)
        x1, x2, x3 = pts[:, 0], pts[:, 1], pts[:, 2]
        d = np.zeros((len(pts), 3, 4))
        d[:, 0, 0] = np.cos(x1 + 0.5 * x3)
        d[:, 2, 0] = 0.5 * np.cos(x1 + 0.5 * x3)
        d[:, 0, 1] = 0.3 * np.cos(x2) * np.exp(0.3 * x1)
        d[:, 1, 1] = -np.sin(x2) * np.exp(0.3 * x1)
        d[:, 1, 2] = np.cos(x2 + x3)
        d[:, 2, 2] = np.cos(x2 + x3)
        d[:, 0, 3] = -np.sin(x1 - x2)
        d[:, 1, 3] = np.sin(x1 - x2)
        return d

    return fn, dfn


def conical_pullback(sphere_fn, sphere_dfn):
    """u(x) = s(x/|x|), the cone over a sphere map s: S^2 -> chart.

    sphere_dfn(points, tangents) must return the image tangents.  The density
    is exactly (-2)-homogeneous, the radial derivative vanishes.
    """

    def fn(pts):
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=1, keepdims=True)
        return sphere_fn(pts / r)

    def dfn(pts):
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=1, keepdims=True)
        p = pts / r
        n = len(pts)
        out = []
        for a in range(3):
            e = np.zeros((n, 3))
            e[:, a] = 1.0
            tang = (e - p * p[:, a][:, None]) / r
            out.append(sphere_dfn(p, tang))
        return np.stack(out, axis=1)

    return fn, dfn


def round_sphere_map(target_dim: int = 4):
    """The inclusion S^2 in Im H as a flat-target sphere map (not holomorphic);
    returns (fn, dfn) with dfn(points, tangents)."""

    def fn(p):
        p = np.atleast_2d(p)
        out = np.zeros((len(p), target_dim))
        out[:, 1:4] = p
        return out

    def dfn(p, tang):
        tang = np.atleast_2d(tang)
        out = np.zeros((len(tang), target_dim))
        out[:, 1:4] = tang
        return out

    return fn, dfn


def torus_winding(W, amplitude: float = 0.0, phase: float = 0.0):
    """u: T^3 -> T^4, x -> 2 pi W x plus a periodic perturbation.

    W is an integer (4, 3) winding matrix; amplitude deforms the map within
    its homotopy class, which the topological energy check varies.
    """
    W = np.asarray(W, dtype=float)

    def fn(pts):
        pts = np.atleast_2d(pts)
        base = 2 * np.pi * pts @ W.T
        if amplitude:
            s = np.sin(2 * np.pi * pts[:, 0] + phase) * np.cos(2 * np.pi * pts[:, 1])
            base = base + amplitude * np.outer(s, np.array([1.0, 0.5, -0.25, 0.75]))
        return base

    def dfn(pts):
        pts = np.atleast_2d(pts)
        d = np.broadcast_to(2 * np.pi * W.T, (len(pts), 3, 4)).copy()
        if amplitude:
            c = np.cos(2 * np.pi * pts[:, 0] + phase) * np.cos(2 * np.pi * pts[:, 1])
            s = np.sin(2 * np.pi * pts[:, 0] + phase) * (-np.sin(2 * np.pi * pts[:, 1]))
            vec = np.array([1.0, 0.5, -0.25, 0.75])
            d = d.copy()
            d[:, 0, :] += amplitude * 2 * np.pi * np.outer(c, vec)
            d[:, 1, :] += amplitude * 2 * np.pi * np.outer(s, vec)
        return d

    return fn, dfn
