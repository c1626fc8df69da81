"""Unit quaternion helpers, scalar-first (w, x, y, z), vectorized over leading axes.

Dot products are written out per component so results for one row never depend
on how many rows share the array.
"""
from __future__ import annotations

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


class InvalidQuaternionError(ValueError):
    pass


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def conj(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def norm(q: np.ndarray) -> np.ndarray:
    return np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2 + q[..., 2] ** 2 + q[..., 3] ** 2)


def normalize(q: np.ndarray) -> np.ndarray:
    return q / norm(q)[..., None]


def canonical(q: np.ndarray) -> np.ndarray:
    """Flip sign so the scalar part is non-negative."""
    sign = np.where(q[..., 0] < 0.0, -1.0, 1.0)
    return q * sign[..., None]


def dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2] + a[..., 3] * b[..., 3]


def from_axis_angle(axis: np.ndarray, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    half = 0.5 * angle
    s = np.sin(half)
    return np.concatenate([np.cos(half)[..., None], axis * s[..., None]], axis=-1)


def from_rotvec(v: np.ndarray) -> np.ndarray:
    """Exponential map of a rotation vector (axis times angle)."""
    v = np.asarray(v, dtype=float)
    theta = np.sqrt(v[..., 0] ** 2 + v[..., 1] ** 2 + v[..., 2] ** 2)
    half = 0.5 * theta
    # sin(theta/2)/theta with its series near zero
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half)[..., None], v * k[..., None]], axis=-1)


def to_rotvec(q: np.ndarray) -> np.ndarray:
    q = canonical(q)
    vn = np.sqrt(q[..., 1] ** 2 + q[..., 2] ** 2 + q[..., 3] ** 2)
    angle = 2.0 * np.arctan2(vn, q[..., 0])
    small = vn < 1e-12
    k = np.where(small, 2.0, angle / np.where(small, 1.0, vn))
    return q[..., 1:] * k[..., None]


def to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate 3-vectors ``v`` by ``q``."""
    vq = np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)
    return mul(mul(q, vq), conj(q))[..., 1:]


def check_unit(q: np.ndarray, tol: float = 1e-6) -> None:
    err = np.abs(norm(np.asarray(q, dtype=float)) - 1.0)
    if np.any(err > tol):
        raise InvalidQuaternionError(f"quaternion norm off by {float(np.max(err)):.3g} (tolerance {tol})")


def angle_between(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Rotation angle in [0, pi] taking ``qb`` to ``qa``."""
    return 2.0 * np.arccos(np.minimum(1.0, np.abs(dot(qa, qb))))


def random_unit(rng: np.random.Generator, size=None) -> np.ndarray:
    """Uniform random rotation via a normalized 4-D standard Gaussian, scalar part >= 0."""
    shape = (4,) if size is None else tuple(np.atleast_1d(size)) + (4,)
    return canonical(normalize(rng.standard_normal(shape)))


def random_axis(rng: np.random.Generator, size=None) -> np.ndarray:
    shape = (3,) if size is None else tuple(np.atleast_1d(size)) + (3,)
    v = rng.standard_normal(shape)
    return v / np.sqrt(v[..., 0] ** 2 + v[..., 1] ** 2 + v[..., 2] ** 2)[..., None]
