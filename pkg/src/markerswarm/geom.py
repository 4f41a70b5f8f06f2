"""Rigid-body pose algebra used everywhere else in the package.

Conventions, fixed once here:

* a pose is a translation ``t`` plus a unit quaternion ``q`` (scalar first,
  ``w >= 0`` canonical sign), mapping body coordinates into the parent frame;
* Euler angles ``(alpha, beta, gamma)`` are roll/pitch/yaw with rotation
  matrix ``R = Rz(gamma) @ Ry(beta) @ Rx(alpha)``, i.e. intrinsic
  yaw-pitch-roll;
* angles are wrapped to the half-open interval ``(-pi, pi]``;
* at the pitch singularity ``|beta| = pi/2`` roll and yaw are degenerate and
  the extraction returns the canonical solution with ``alpha = 0``.

Quaternions are the internal representation; Euler triples appear only at
API boundaries (construction, serialization, filter state vectors).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_QUAT_NORM_TOL = 1e-9
_GIMBAL_TOL = 1.0 - 1e-12


def wrap_angle(angle: float) -> float:
    """Wrap a single angle to (-pi, pi]."""
    wrapped = math.pi - (math.pi - angle) % (2.0 * math.pi)
    return wrapped


def wrap_angles(angles: np.ndarray) -> np.ndarray:
    """Wrap an array of angles to (-pi, pi]."""
    return math.pi - (math.pi - np.asarray(angles, dtype=float)) % (2.0 * math.pi)


# --------------------------------------------------------------------------
# quaternions, scalar-first (w, x, y, z)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm < _QUAT_NORM_TOL:
        raise ValueError(f"cannot normalize quaternion with norm {norm!r}")
    q = q / norm
    # canonical sign: w >= 0 makes serialization and comparisons deterministic
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate a 3-vector by a unit quaternion (q v q*)."""
    w, x, y, z = q
    u = np.array([x, y, z])
    v = np.asarray(v, dtype=float)
    return v + 2.0 * np.cross(u, np.cross(u, v) + w * v)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(rot: np.ndarray) -> np.ndarray:
    """Shepperd's method: pick the best-conditioned of the four branches."""
    r = np.asarray(rot, dtype=float)
    trace = r[0, 0] + r[1, 1] + r[2, 2]
    if trace > 0.0:
        s = math.sqrt(trace + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        )
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array(
            [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array(
            [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def quat_from_euler(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """Quaternion for R = Rz(gamma) @ Ry(beta) @ Rx(alpha)."""
    ha, hb, hg = 0.5 * alpha, 0.5 * beta, 0.5 * gamma
    qx = np.array([math.cos(ha), math.sin(ha), 0.0, 0.0])
    qy = np.array([math.cos(hb), 0.0, math.sin(hb), 0.0])
    qz = np.array([math.cos(hg), 0.0, 0.0, math.sin(hg)])
    return quat_normalize(quat_multiply(qz, quat_multiply(qy, qx)))


def quat_to_euler(q: np.ndarray) -> np.ndarray:
    """Extract (alpha, beta, gamma); canonical alpha = 0 at |beta| = pi/2."""
    rot = quat_to_rot(q)
    return rot_to_euler(rot)


def rot_to_euler(rot: np.ndarray) -> np.ndarray:
    # R[2,0] = -sin(beta); see euler_to_rot for the full matrix
    s_beta = -rot[2, 0]
    s_beta = min(1.0, max(-1.0, s_beta))
    if abs(s_beta) >= _GIMBAL_TOL:
        beta = math.copysign(0.5 * math.pi, s_beta)
        # roll/yaw degenerate: fold everything into gamma, alpha = 0
        alpha = 0.0
        gamma = math.atan2(-rot[0, 1], rot[1, 1])
    else:
        beta = math.asin(s_beta)
        alpha = math.atan2(rot[2, 1], rot[2, 2])
        gamma = math.atan2(rot[1, 0], rot[0, 0])
    return np.array([wrap_angle(alpha), wrap_angle(beta), wrap_angle(gamma)])


def euler_to_rot(euler: np.ndarray) -> np.ndarray:
    """R = Rz(gamma) @ Ry(beta) @ Rx(alpha), written out."""
    ca, sa = math.cos(euler[0]), math.sin(euler[0])
    cb, sb = math.cos(euler[1]), math.sin(euler[1])
    cg, sg = math.cos(euler[2]), math.sin(euler[2])
    return np.array(
        [
            [cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa],
            [sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa],
            [-sb, cb * sa, cb * ca],
        ]
    )


def euler_rot_derivatives(euler: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Rotation matrix and its three partial derivatives d R / d angle."""
    alpha, beta, gamma = float(euler[0]), float(euler[1]), float(euler[2])
    ca, sa = math.cos(alpha), math.sin(alpha)
    cb, sb = math.cos(beta), math.sin(beta)
    cg, sg = math.cos(gamma), math.sin(gamma)

    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])

    drx = np.array([[0, 0, 0], [0, -sa, -ca], [0, ca, -sa]])
    dry = np.array([[-sb, 0, cb], [0, 0, 0], [-cb, 0, -sb]])
    drz = np.array([[-sg, -cg, 0], [cg, -sg, 0], [0, 0, 0]])

    rot = rz @ ry @ rx
    return rot, [rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx]


def euler_rate_from_rot_rate(rot: np.ndarray, drot: np.ndarray) -> np.ndarray:
    """Chain rule through the Euler extraction: d euler / d s from d R / d s.

    Valid away from the pitch singularity (the extraction formulas are
    atan2/asin of individual matrix entries, differentiated directly).
    """
    r20 = rot[2, 0]
    denom_a = rot[2, 1] ** 2 + rot[2, 2] ** 2
    denom_g = rot[1, 0] ** 2 + rot[0, 0] ** 2
    denom_b = 1.0 - r20 * r20
    if denom_a < 1e-14 or denom_g < 1e-14 or denom_b < 1e-14:
        raise ArithmeticError("euler derivative at pitch singularity")
    d_alpha = (rot[2, 2] * drot[2, 1] - rot[2, 1] * drot[2, 2]) / denom_a
    d_beta = -drot[2, 0] / math.sqrt(denom_b)
    d_gamma = (rot[0, 0] * drot[1, 0] - rot[1, 0] * drot[0, 0]) / denom_g
    return np.array([d_alpha, d_beta, d_gamma])


def quat_slerp(qa: np.ndarray, qb: np.ndarray, weight_b: float) -> np.ndarray:
    """Spherical interpolation from qa toward qb; weight_b in [0, 1]."""
    qa = np.asarray(qa, dtype=float)
    qb = np.asarray(qb, dtype=float)
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 0.9995:
        # nearly parallel: linear blend, renormalized
        return quat_normalize(qa + weight_b * (qb - qa))
    theta = math.acos(min(1.0, dot))
    s = math.sin(theta)
    wa = math.sin((1.0 - weight_b) * theta) / s
    wb = math.sin(weight_b * theta) / s
    return quat_normalize(wa * qa + wb * qb)


def quat_chordal_mean(quats: list[np.ndarray]) -> np.ndarray:
    """Mean rotation as the principal eigenvector of sum(q q^T).

    Sign-invariant, exact for identical inputs, standard for small spreads.
    """
    if not quats:
        raise ValueError("empty quaternion list")
    acc = np.zeros((4, 4))
    for q in quats:
        q = np.asarray(q, dtype=float)
        acc += np.outer(q, q)
    _, vecs = np.linalg.eigh(acc)
    return quat_normalize(vecs[:, -1])


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle of a unit quaternion, in [0, pi].

    atan2 form: stable for small angles where acos(w) loses digits.
    """
    vec = math.sqrt(float(q[1]) ** 2 + float(q[2]) ** 2 + float(q[3]) ** 2)
    return 2.0 * math.atan2(vec, abs(float(q[0])))


def rotation_angle_between(qa: np.ndarray, qb: np.ndarray) -> float:
    """Geodesic angle between two orientations."""
    return quat_angle(quat_multiply(quat_conjugate(qa), qb))


# --------------------------------------------------------------------------
# poses


@dataclass(frozen=True)
class Pose6D:
    """Rigid transform: rotate by ``q`` then translate by ``t``."""

    t: np.ndarray
    q: np.ndarray

    def __post_init__(self) -> None:
        t = np.array(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"non-finite translation {t}")
        q = quat_normalize(np.array(self.q, dtype=float).reshape(4))
        t.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)

    @staticmethod
    def identity() -> "Pose6D":
        return Pose6D(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_euler(t, euler) -> "Pose6D":
        euler = np.asarray(euler, dtype=float).reshape(3)
        return Pose6D(np.asarray(t, dtype=float), quat_from_euler(*euler))

    @property
    def euler(self) -> np.ndarray:
        return quat_to_euler(self.q)

    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.q)

    def compose(self, other: "Pose6D") -> "Pose6D":
        """self then other: first apply other in self's frame (self * other)."""
        return Pose6D(self.t + quat_rotate(self.q, other.t), quat_multiply(self.q, other.q))

    def inverse(self) -> "Pose6D":
        q_inv = quat_conjugate(self.q)
        return Pose6D(-quat_rotate(q_inv, self.t), q_inv)

    def apply(self, point: np.ndarray) -> np.ndarray:
        return self.t + quat_rotate(self.q, np.asarray(point, dtype=float))

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation()
        m[:3, 3] = self.t
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose6D":
        m = np.asarray(m, dtype=float)
        return Pose6D(m[:3, 3], rot_to_quat(m[:3, :3]))

    def to_vector(self) -> np.ndarray:
        """(x, y, z, alpha, beta, gamma) boundary form."""
        return np.concatenate([self.t, self.euler])

    @staticmethod
    def from_vector(vec: np.ndarray) -> "Pose6D":
        vec = np.asarray(vec, dtype=float).reshape(6)
        return Pose6D.from_euler(vec[:3], vec[3:])

    def to_dict(self) -> dict:
        e = self.euler
        return {"t": [float(v) for v in self.t], "euler": [float(v) for v in e]}

    @staticmethod
    def from_dict(data: dict) -> "Pose6D":
        return Pose6D.from_euler(data["t"], data["euler"])

    def __repr__(self) -> str:  # compact, round-trip not required
        t = ", ".join(f"{v:.4g}" for v in self.t)
        e = ", ".join(f"{v:.4g}" for v in self.euler)
        return f"Pose6D(t=[{t}], euler=[{e}])"


# --------------------------------------------------------------------------
# 6x6 covariances over (x, y, z, alpha, beta, gamma)

SYM_TOL = 1e-12
EIG_TOL = -1e-12


def check_covariance(cov: np.ndarray, what: str = "covariance") -> np.ndarray:
    """Validate symmetry within 1e-12 and eigenvalues >= -1e-12."""
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (6, 6):
        raise ValueError(f"{what}: expected 6x6, got {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise ValueError(f"{what}: non-finite entries")
    if np.max(np.abs(cov - cov.T)) > SYM_TOL:
        raise ValueError(f"{what}: not symmetric within {SYM_TOL}")
    eigs = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    if eigs[0] < EIG_TOL:
        raise ValueError(f"{what}: negative eigenvalue {eigs[0]}")
    return cov


def symmetrize(cov: np.ndarray) -> np.ndarray:
    return 0.5 * (cov + cov.T)


def transport_covariance(cov: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """Re-express a 6x6 pose covariance in a rotated frame.

    The position block is conjugated by ``rot``; the angle block is
    conjugated by the same rotation (small-angle treatment of the Euler
    uncertainty, adequate for the near-hover regime this package targets).
    Trace and positive semidefiniteness are preserved exactly.
    """
    cov = np.asarray(cov, dtype=float)
    rot = np.asarray(rot, dtype=float)
    jac = np.zeros((6, 6))
    jac[:3, :3] = rot
    jac[3:, 3:] = rot
    return symmetrize(jac @ cov @ jac.T)
