"""Rigid-body geometry: unit quaternions, SE(3), interpolation, 6D rotations.

Conventions: quaternions are (w, x, y, z), rotations act on column vectors,
angles in radians, lengths in meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-6


def _canonical_sign(q: np.ndarray) -> np.ndarray:
    # w >= 0; for w == 0 the first non-zero component is made positive
    for c in q:
        if c > 0:
            return q
        if c < 0:
            return -q
    return q


@dataclass(frozen=True, eq=False)
class UnitQuaternion:
    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        q = np.array([self.w, self.x, self.y, self.z], dtype=float)
        n = float(np.linalg.norm(q))
        if not np.all(np.isfinite(q)) or abs(n - 1.0) > UNIT_TOL:
            raise ValueError(f"quaternion norm {n!r} is not unit")
        q = _canonical_sign(q / n)
        for name, v in zip("wxyz", q):
            object.__setattr__(self, name, float(v))

    @classmethod
    def normalized(cls, q) -> UnitQuaternion:
        q = np.asarray(q, dtype=float)
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise ValueError("cannot normalize a zero quaternion")
        return cls(*(q / n))

    @classmethod
    def identity(cls) -> UnitQuaternion:
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> UnitQuaternion:
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        s = math.sin(angle / 2.0)
        return cls(math.cos(angle / 2.0), *(s * axis))

    @classmethod
    def from_rotvec(cls, rv) -> UnitQuaternion:
        return cls(*quat_from_rotvec(np.asarray(rv, dtype=float)))

    @classmethod
    def from_matrix(cls, R) -> UnitQuaternion:
        return cls.normalized(quat_from_matrix(np.asarray(R, dtype=float)))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.as_array())

    def __mul__(self, other: UnitQuaternion) -> UnitQuaternion:
        return UnitQuaternion.normalized(quat_mul(self.as_array(), other.as_array()))

    def inverse(self) -> UnitQuaternion:
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def angle_to(self, other: UnitQuaternion) -> float:
        return quat_angle(self.as_array(), other.as_array())

    def __eq__(self, other):
        if not isinstance(other, UnitQuaternion):
            return NotImplemented
        return self.as_array().tolist() == other.as_array().tolist()

    def __hash__(self):
        return hash(tuple(self.as_array()))

    def __repr__(self):
        return f"UnitQuaternion(w={self.w!r}, x={self.x!r}, y={self.y!r}, z={self.z!r})"


def _frozen_vec(v, n: int = 3) -> np.ndarray:
    a = np.array(v, dtype=float).reshape(n)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """p -> R p + T."""

    rotation: UnitQuaternion = field(default_factory=UnitQuaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "translation", _frozen_vec(self.translation))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, R, t) -> RigidTransform:
        return cls(UnitQuaternion.from_matrix(R), t)

    @classmethod
    def from_homogeneous(cls, M) -> RigidTransform:
        M = np.asarray(M, dtype=float)
        return cls.from_matrix(M[:3, :3], M[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix()

    def homogeneous(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def apply(self, p) -> np.ndarray:
        """Apply to one point (3,) or row-stacked points (n, 3)."""
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """self ∘ other: apply `other` first."""
        R = self.R
        return RigidTransform(self.rotation * other.rotation, R @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> RigidTransform:
        qi = self.rotation.inverse()
        return RigidTransform(qi, -(qi.matrix() @ self.translation))

    def __repr__(self):
        return f"RigidTransform({self.rotation!r}, translation={self.translation.tolist()!r})"


def se3_compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def se3_apply(t: RigidTransform, p) -> np.ndarray:
    return t.apply(p)


def se3_inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def rotation_distance(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """(rotation angle in radians, translation distance) between two transforms."""
    return a.rotation.angle_to(b.rotation), float(np.linalg.norm(a.translation - b.translation))


# -- array helpers (batched where it matters) --------------------------------


def hat(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(M) -> np.ndarray:
    return np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]]) * 0.5


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """(..., 4) unit quaternions -> (..., 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    # Shepperd's method, single matrix
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return _canonical_sign(q / np.linalg.norm(q))


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    """(..., 3) rotation vectors -> (..., 4) quaternions."""
    rv = np.asarray(rv, dtype=float)
    theta = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(θ/2)/θ with a series fallback near zero
    small = theta < 1e-8
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    return np.concatenate([np.cos(half), k * rv], axis=-1)


def rotvec_from_quat(q: np.ndarray) -> np.ndarray:
    q = _canonical_sign(np.asarray(q, dtype=float))
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-15:
        return 2.0 * v
    angle = 2.0 * math.atan2(s, q[0])
    return v * (angle / s)


def quat_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Rotation angle of a^-1 b, robust near zero."""
    d = quat_mul(np.array([a[0], -a[1], -a[2], -a[3]]), b)
    return 2.0 * math.atan2(float(np.linalg.norm(d[1:])), abs(float(d[0])))


def so3_exp(rv) -> np.ndarray:
    return quat_to_matrix(quat_from_rotvec(np.asarray(rv, dtype=float)))


# -- interpolation ------------------------------------------------------------


def _as_unit(q) -> np.ndarray:
    if isinstance(q, UnitQuaternion):
        return q.as_array()
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if abs(n - 1.0) > UNIT_TOL:
        raise ValueError(f"slerp input is not a unit quaternion (norm {n!r})")
    return q / n


def slerp_array(q0: np.ndarray, q1: np.ndarray, w: float) -> np.ndarray:
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        # shortest arc; q0 ~ -q1 lands here too and becomes the trivial path
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-12:
        q = q0 + w * (q1 - q0)
        return q / np.linalg.norm(q)
    if dot < 1e-6:
        # 180° apart in rotation space: fixed orthogonal path through
        # q0 and its w-orthogonal partner q1 (sign pinned by the dot >= 0 rule)
        q1 = q1 - dot * q0
        q1 = q1 / np.linalg.norm(q1)
        dot = 0.0
    theta = math.acos(min(1.0, dot))
    s = math.sin(theta)
    q = (math.sin((1.0 - w) * theta) / s) * q0 + (math.sin(w * theta) / s) * q1
    return q / np.linalg.norm(q)


def slerp(q0, q1, w: float) -> UnitQuaternion:
    """Constant-angular-velocity interpolation from q0 (w=0) to q1 (w=1)."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"slerp weight {w} outside [0, 1]")
    a, b = _as_unit(q0), _as_unit(q1)
    return UnitQuaternion.normalized(slerp_array(a, b, w))


def lerp_vec3(p0, p1, w: float) -> np.ndarray:
    p0 = np.asarray(p0, dtype=float)
    return p0 + w * (np.asarray(p1, dtype=float) - p0)


def interpolate_transform(a: RigidTransform, b: RigidTransform, w: float) -> RigidTransform:
    return RigidTransform(slerp(a.rotation, b.rotation, w), lerp_vec3(a.translation, b.translation, w))


# -- continuous 6D rotation ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class Rotation6D:
    """First two (unnormalized) columns of a rotation matrix."""

    a1: np.ndarray
    a2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a1", _frozen_vec(self.a1))
        object.__setattr__(self, "a2", _frozen_vec(self.a2))

    def to_matrix(self) -> np.ndarray:
        return rot6d_to_matrix(self)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.a1, self.a2])


def _gram_schmidt(a1: np.ndarray, a2: np.ndarray):
    n1 = np.linalg.norm(a1)
    n2 = np.linalg.norm(a2)
    if n1 < 1e-9 or n2 < 1e-9:
        raise ValueError(f"degenerate 6D rotation: column norms {n1:.3g}, {n2:.3g}")
    b1 = a1 / n1
    if abs(float(b1 @ a2)) / n2 > 1.0 - 1e-9:
        raise ValueError("degenerate 6D rotation: a1 and a2 are parallel")
    u2 = a2 - (b1 @ a2) * b1
    nu = np.linalg.norm(u2)
    b2 = u2 / nu
    b3 = np.cross(b1, b2)
    return b1, b2, b3, n1, u2, nu


def rot6d_to_matrix(r) -> np.ndarray:
    if isinstance(r, Rotation6D):
        a1, a2 = r.a1, r.a2
    else:
        r = np.asarray(r, dtype=float).reshape(6)
        a1, a2 = r[:3], r[3:]
    b1, b2, b3, *_ = _gram_schmidt(a1, a2)
    return np.stack([b1, b2, b3], axis=1)


def matrix_to_rot6d(R) -> Rotation6D:
    R = np.asarray(R, dtype=float)
    return Rotation6D(R[:, 0], R[:, 1])


def rot6d_backward(r: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the rotation matrix back to the 6 raw parameters."""
    a1, a2 = r[:3], r[3:]
    b1, b2, b3, n1, u2, nu = _gram_schmidt(a1, a2)
    g1, g2, g3 = dR[:, 0].copy(), dR[:, 1].copy(), dR[:, 2]
    # b3 = b1 x b2
    g1 += np.cross(b2, g3)
    g2 += np.cross(g3, b1)
    # b2 = u2 / |u2|
    gu2 = (g2 - b2 * (b2 @ g2)) / nu
    # u2 = a2 - (b1 . a2) b1
    ga2 = gu2 - b1 * (b1 @ gu2)
    g1 = g1 - ((b1 @ a2) * gu2 + a2 * (b1 @ gu2))
    # b1 = a1 / |a1|
    ga1 = (g1 - b1 * (b1 @ g1)) / n1
    return np.concatenate([ga1, ga2])
