"""Batched unit-quaternion helpers, [w, x, y, z] convention, body-to-world."""

from __future__ import annotations

import numpy as np


def normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    w2, x2, y2, z2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def conjugate(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors from body to world frame: R(q) v."""
    w = q[..., :1]
    u = q[..., 1:]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def rotate_inverse(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return rotate(conjugate(q), v)


def from_rotation_vector(rv: np.ndarray) -> np.ndarray:
    """exp(rv/2): the unit quaternion rotating by |rv| radians about rv."""
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x)/x is 1 - x^2/6 + ... ; the series keeps the zero-angle case exact
    small = angle < 1e-8
    k = np.where(small, 0.5 - angle**2 / 48.0, np.divide(np.sin(half), np.where(angle == 0, 1.0, angle)))
    return np.concatenate([np.cos(half), k * rv], axis=-1)


def from_matrix(m: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) to quaternions, Shepperd's method."""
    m = np.asarray(m)
    batch = m.shape[:-2]
    q = np.empty(batch + (4,))
    t = np.einsum("...ii->...", m)
    flat_m = m.reshape(-1, 3, 3)
    flat_q = q.reshape(-1, 4)
    flat_t = t.reshape(-1)
    for i in range(flat_m.shape[0]):
        r = flat_m[i]
        tr = flat_t[i]
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            flat_q[i] = [0.25 * s, (r[2, 1] - r[1, 2]) / s,
                         (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            flat_q[i] = [(r[2, 1] - r[1, 2]) / s, 0.25 * s,
                         (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            flat_q[i] = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s,
                         0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            flat_q[i] = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                         (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    return normalize(q.reshape(batch + (4,)))


def identity(n: int | None = None) -> np.ndarray:
    if n is None:
        return np.array([1.0, 0.0, 0.0, 0.0])
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q


def yaw_of(q: np.ndarray) -> np.ndarray:
    """Heading of the body x-axis in the EN plane, radians from east."""
    xb = rotate(q, np.broadcast_to(np.array([1.0, 0.0, 0.0]), q.shape[:-1] + (3,)))
    return np.arctan2(xb[..., 1], xb[..., 0])
