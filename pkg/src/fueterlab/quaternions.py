"""Quaternion algebra on numpy arrays of shape (..., 4).

Components are ordered (w, x, y, z) with the Hamilton convention ij = k.
All target complex structures in this package act by *left* multiplication
with the imaginary units; the sign conventions of the energy identity are
calibrated against this choice (see tests/test_fueter.py).
"""

from __future__ import annotations

import numpy as np

ONE = np.array([1.0, 0.0, 0.0, 0.0])
I = np.array([0.0, 1.0, 0.0, 0.0])
J = np.array([0.0, 0.0, 1.0, 0.0])
K = np.array([0.0, 0.0, 0.0, 1.0])

def quat_mul(p, q):
    """Hamilton product of quaternion arrays, broadcasting over leading axes."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pw, px, py, pz = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ], axis=-1)


# Left multiplication by i, j, k as 4x4 matrices: LEFT[a] @ q == e_a * q.
LEFT = np.stack([
    np.column_stack([quat_mul(e, b) for b in np.eye(4)])
    for e in (I, J, K)
])


def conj(q):
    q = np.asarray(q, dtype=float)
    out = q.copy()
    out[..., 1:] *= -1.0
    return out


def norm(q):
    return np.linalg.norm(np.asarray(q, dtype=float), axis=-1)


def normalize(q):
    q = np.asarray(q, dtype=float)
    return q / norm(q)[..., None]


def from_imag(v):
    """Embed 3-vectors (..., 3) as imaginary quaternions (..., 4)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (4,))
    out[..., 1:] = v
    return out


def imag(q):
    """Imaginary part of a quaternion array as 3-vectors."""
    return np.asarray(q, dtype=float)[..., 1:].copy()


def exp_imag(v):
    """exp of an imaginary quaternion given as 3-vectors: cos|v| + sin|v| v/|v|."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    out = np.zeros(v.shape[:-1] + (4,))
    out[..., 0] = np.cos(theta)
    s = np.where(theta > 1e-300, np.sin(theta) / np.where(theta == 0.0, 1.0, theta), 1.0)
    out[..., 1:] = v * s[..., None]
    return out


def left_mult_matrix(q):
    """Matrix of x -> q * x for quaternion arrays (..., 4) -> (..., 4, 4)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, -z, y], axis=-1),
        np.stack([y, z, w, -x], axis=-1),
        np.stack([z, -y, x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)
