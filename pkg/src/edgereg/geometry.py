"""Rigid poses, pinhole projection and pose-error metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform ``p -> R p + t`` (meters)."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "PoseSE3":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.R.T + self.t

    def is_valid(self, tol: float = 1e-9) -> bool:
        return (np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
                and abs(np.linalg.det(self.R) - 1.0) <= tol)

    def orthonormalized(self) -> "PoseSE3":
        return PoseSE3(_orthonormalize(self.R), self.t)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return se3_compose(self, other)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PoseError:
    rre: float  # degrees
    rte: float  # meters


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def se3_compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Pose that applies ``b`` first, then ``a``."""
    R = a.R @ b.R
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
        R = _orthonormalize(R)
    return PoseSE3(R, a.R @ b.t + a.t)


def se3_invert(T: PoseSE3) -> PoseSE3:
    Rt = T.R.T
    return PoseSE3(Rt, -Rt @ T.t)


@dataclass
class Projection:
    uv: np.ndarray        # (N, 2); NaN where not in front
    depth: np.ndarray     # (N,)
    in_front: np.ndarray  # (N,) bool

    def __len__(self) -> int:
        return len(self.depth)


def project_points(K: CameraIntrinsics, T: PoseSE3, points) -> Projection:
    """Pinhole projection of world points through pose ``T``.

    The returned depth is the camera-frame z, i.e. the homogeneous scale factor.
    """
    pc = T.apply(points)
    depth = pc[:, 2].copy()
    in_front = depth > 0
    uv = np.full((len(pc), 2), np.nan)
    z = depth[in_front]
    uv[in_front, 0] = K.fx * pc[in_front, 0] / z + K.cx
    uv[in_front, 1] = K.fy * pc[in_front, 1] / z + K.cy
    return Projection(uv, depth, in_front)


def euler_xyz(R: np.ndarray) -> np.ndarray:
    """Angles (a, b, c) in radians with ``R = Rx(a) @ Ry(b) @ Rz(c)``."""
    r13 = float(np.clip(R[0, 2], -1.0, 1.0))
    if abs(r13) > 1.0 - 1e-9:
        # gimbal lock: the whole twist goes to the first angle
        b = np.copysign(np.pi / 2, r13)
        a = np.arctan2(R[2, 1], R[1, 1])
        return np.array([a, b, 0.0])
    a = np.arctan2(-R[1, 2], R[2, 2])
    b = np.arcsin(r13)
    c = np.arctan2(-R[0, 1], R[0, 0])
    return np.array([a, b, c])


def compute_pose_error(T_gt: PoseSE3, T_est: PoseSE3) -> PoseError:
    """Rotation error as the summed |Euler angles| of R_gt^-1 R_est (degrees), plus translation error."""
    dR = T_gt.R.T @ T_est.R
    rre = float(np.degrees(np.abs(euler_xyz(dR)).sum()))
    rte = float(np.linalg.norm(T_gt.t - T_est.t))
    return PoseError(rre=rre, rte=rte)


def sample_pose_perturbation(rng: np.random.Generator, max_xy: float, max_yaw: float | None = None) -> PoseSE3:
    """Random xy translation in +-max_xy and a rotation about z.

    The yaw is uniform in [0, 2*pi) by default; ``max_yaw`` narrows it to
    [-max_yaw, max_yaw] for curriculum-style training setups.
    """
    if max_xy <= 0:
        raise ContractError("max_xy must be positive")
    tx, ty = rng.uniform(-max_xy, max_xy, size=2)
    if max_yaw is None:
        yaw = rng.uniform(0.0, 2.0 * np.pi)
    else:
        yaw = rng.uniform(-max_yaw, max_yaw)
    return PoseSE3(rot_z(yaw), np.array([tx, ty, 0.0]))
