"""SE(2)/SE(3) value types and group operations.

Tangent vectors use a fixed ordering: rotation coordinates first, then
translation ([w, vx, vy] for SE(2); [wx, wy, wz, vx, vy, vz] for SE(3)).
3D rotations are stored as unit quaternions [qw, qx, qy, qz] and renormalized
on construction.
"""
from __future__ import annotations

import numpy as np

from . import _kernels as K

ANTIPODAL_TOL = 1e-9


class Rotation:
    """A 2D (angle) or 3D (unit quaternion) rotation."""

    __slots__ = ("dim", "data")

    def __init__(self, dim, data):
        self.dim = int(dim)
        if dim == 2:
            self.data = np.array([K.wrap_angle(float(data))])
        elif dim == 3:
            q = np.asarray(data, dtype=np.float64)
            if q.shape != (4,) or not np.all(np.isfinite(q)):
                raise ValueError("3D rotation requires a finite quaternion [qw,qx,qy,qz]")
            self.data = q / np.linalg.norm(q)
        else:
            raise ValueError(f"unsupported rotation dimension {dim}")

    @classmethod
    def identity(cls, dim):
        return cls(dim, 0.0 if dim == 2 else np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def exp_map(cls, v):
        v = np.atleast_1d(np.asarray(v, dtype=np.float64))
        if v.shape == (1,):
            return cls(2, v[0])
        if v.shape == (3,):
            return cls(3, K.so3_exp(v[None, :])[0])
        raise ValueError("rotation tangent must have length 1 (2D) or 3 (3D)")

    def log_map(self):
        if self.dim == 2:
            return self.data.copy()
        return K.so3_log(self.data[None, :])[0]

    def matrix(self):
        if self.dim == 2:
            c, s = np.cos(self.data[0]), np.sin(self.data[0])
            return np.array([[c, -s], [s, c]])
        w, x, y, z = self.data
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def compose(self, other):
        if self.dim == 2:
            return Rotation(2, self.data[0] + other.data[0])
        return Rotation(3, K.quat_mul(self.data[None, :], other.data[None, :])[0])

    def inverse(self):
        if self.dim == 2:
            return Rotation(2, -self.data[0])
        return Rotation(3, K.quat_conj(self.data[None, :])[0])

    def apply(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self.dim == 2:
            return self.matrix() @ v
        return K.quat_rotate(self.data[None, :], v[None, :])[0]

    def angle_to(self, other):
        """Magnitude of the relative rotation angle."""
        rel = self.inverse().compose(other)
        return float(np.linalg.norm(rel.log_map()))

    def __repr__(self):
        return f"Rotation(dim={self.dim}, data={self.data})"


class Pose:
    """An SE(2) or SE(3) element: rotation plus translation.

    ``raw()`` exposes the packed layout used by the kernels and by Values:
    [theta, x, y] for SE(2), [qw, qx, qy, qz, x, y, z] for SE(3).
    """

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Rotation, translation):
        t = np.asarray(translation, dtype=np.float64)
        if t.shape != (rotation.dim,):
            raise ValueError("translation length must match rotation dimension")
        self.rotation = rotation
        self.translation = t

    @property
    def dim(self):
        return self.rotation.dim

    @classmethod
    def identity(cls, dim):
        return cls(Rotation.identity(dim), np.zeros(dim))

    @classmethod
    def se2(cls, x, y, theta):
        return cls(Rotation(2, theta), np.array([x, y], dtype=np.float64))

    @classmethod
    def from_raw(cls, dim, raw):
        raw = np.asarray(raw, dtype=np.float64)
        if dim == 2:
            return cls(Rotation(2, raw[0]), raw[1:3])
        return cls(Rotation(3, raw[:4]), raw[4:7])

    def raw(self):
        if self.dim == 2:
            return np.array([self.rotation.data[0], self.translation[0], self.translation[1]])
        return np.concatenate([self.rotation.data, self.translation])

    def matrix(self):
        d = self.dim
        m = np.eye(d + 1)
        m[:d, :d] = self.rotation.matrix()
        m[:d, d] = self.translation
        return m

    def __repr__(self):
        return f"Pose(dim={self.dim}, raw={self.raw()})"


def tangent_dim(dim):
    """Tangent-space dimension p of SE(dim)."""
    return 3 if dim == 2 else 6


def pose_size(dim):
    """Packed array length of an SE(dim) pose."""
    return 3 if dim == 2 else 7


def compose(a: Pose, b: Pose) -> Pose:
    if a.dim != b.dim:
        raise ValueError("pose dimensions differ")
    fn = K.se2_compose if a.dim == 2 else K.se3_compose
    return Pose.from_raw(a.dim, fn(a.raw()[None, :], b.raw()[None, :])[0])


def inverse(a: Pose) -> Pose:
    fn = K.se2_inverse if a.dim == 2 else K.se3_inverse
    return Pose.from_raw(a.dim, fn(a.raw()[None, :])[0])


def log_map(p: Pose) -> np.ndarray:
    """Principal-branch SE(N) logarithm, rotation coordinates first."""
    raw = p.raw()
    if not np.all(np.isfinite(raw)):
        raise ValueError("non-finite pose")
    fn = K.se2_log if p.dim == 2 else K.se3_log
    return fn(raw[None, :])[0]


def exp_map(v, dim=None) -> Pose:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite tangent vector")
    if dim is None:
        dim = 2 if v.shape == (3,) else 3
    if v.shape != (tangent_dim(dim),):
        raise ValueError("tangent dimension mismatch")
    fn = K.se2_exp if dim == 2 else K.se3_exp
    return Pose.from_raw(dim, fn(v[None, :])[0])


def slerp(ra: Rotation, rb: Rotation, t):
    """Spherical interpolation along the geodesic from ra to rb.

    Raises for antipodal endpoints (relative angle pi), where the geodesic is
    not unique; consensus between near-agreeing estimates never hits this.
    """
    rel = ra.inverse().compose(rb)
    w = rel.log_map()
    if np.pi - np.linalg.norm(w) < ANTIPODAL_TOL:
        raise ValueError("antipodal rotations: interpolation undefined")
    return ra.compose(Rotation.exp_map(t * w))


def split_interpolate(a: Pose, b: Pose, t) -> Pose:
    """Linear translation / spherical rotation interpolation, t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("interpolation fraction must be in [0, 1]")
    if a.dim != b.dim:
        raise ValueError("pose dimensions differ")
    rot = slerp(a.rotation, b.rotation, t)
    trans = (1.0 - t) * a.translation + t * b.translation
    return Pose(rot, trans)


def chordal_vec(p: Pose) -> np.ndarray:
    """Embedding in R^(N^2+N): rotation matrix entries in column-major order,
    then translation."""
    return np.concatenate([p.rotation.matrix().flatten(order="F"), p.translation])


def local_distance(a: Pose, b: Pose) -> float:
    """Tangent norm of log(a^-1 b); the disagreement metric used throughout."""
    return float(np.linalg.norm(log_map(compose(inverse(a), b))))
