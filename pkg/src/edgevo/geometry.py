"""Camera model, SE(3) poses, and inverse-depth projection with analytic Jacobians.

Conventions used throughout the package:
  * pixels are (u, v) = (column, row); image arrays are indexed [v, u]
  * tangent vectors are ordered (translation, rotation): xi = [rho, omega]
  * perturbations are left-multiplicative: pose' = exp_map(delta) @ pose
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-8
_MAX_LOG_ANGLE = np.pi - 1e-6


class GeometryError(ValueError):
    """Invalid rotation, degenerate log, or unprojectable point."""


def _skew(w):
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


class Pose:
    """Rigid transform mapping points as X_out = R @ X_in + t."""

    __slots__ = ("R", "t")

    def __init__(self, R=None, t=None, check: bool = True):
        self.R = np.eye(3) if R is None else np.asarray(R, dtype=float)
        self.t = np.zeros(3) if t is None else np.asarray(t, dtype=float).reshape(3)
        if check:
            if self.R.shape != (3, 3):
                raise GeometryError("rotation must be 3x3")
            err = np.abs(self.R.T @ self.R - np.eye(3)).max()
            if err > 1e-8 or np.linalg.det(self.R) < 0.0:
                raise GeometryError(f"rotation is not orthonormal (|R'R - I| = {err:.2e})")

    @staticmethod
    def identity() -> "Pose":
        return Pose(check=False)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t, check=False)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t, check=False)

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def rotation_angle(self) -> float:
        return float(np.arccos(np.clip((np.trace(self.R) - 1.0) / 2.0, -1.0, 1.0)))

    def __repr__(self):
        return f"Pose(angle={self.rotation_angle():.4f}, t={self.t.round(4)})"


def exp_map(tangent) -> Pose:
    """Map a se(3) tangent [rho, omega] to a Pose."""
    xi = np.asarray(tangent, dtype=float).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise GeometryError("tangent must be finite")
    rho, omega = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    W = _skew(omega)
    W2 = W @ W
    if theta < _SMALL_ANGLE:
        # Taylor series; avoids 0/0 at the identity.
        R = np.eye(3) + W + 0.5 * W2
        V = np.eye(3) + 0.5 * W + W2 / 6.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        R = np.eye(3) + (s / theta) * W + ((1.0 - c) / theta**2) * W2
        V = np.eye(3) + ((1.0 - c) / theta**2) * W + ((theta - s) / theta**3) * W2
    return Pose(R, V @ rho, check=False)


def log_map(pose: Pose):
    """Inverse of exp_map. Requires rotation angle < pi."""
    theta = pose.rotation_angle()
    if theta >= _MAX_LOG_ANGLE:
        raise GeometryError(f"rotation angle {theta:.6f} rad too close to pi for a stable log")
    R = pose.R
    axis_x2 = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        omega = 0.5 * axis_x2
        W = _skew(omega)
        V_inv = np.eye(3) - 0.5 * W + (W @ W) / 12.0
    else:
        omega = (theta / (2.0 * np.sin(theta))) * axis_x2
        W = _skew(omega)
        coeff = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
        V_inv = np.eye(3) - 0.5 * W + coeff * (W @ W)
    rho = V_inv @ pose.t
    return np.concatenate([rho, omega])


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    """Pinhole camera without distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    def scaled(self, level: int) -> "CameraIntrinsics":
        """Intrinsics of pyramid level `level` (half resolution per level)."""
        f = float(2**level)
        return CameraIntrinsics(
            fx=self.fx / f,
            fy=self.fy / f,
            cx=(self.cx + 0.5) / f - 0.5,
            cy=(self.cy + 0.5) / f - 0.5,
            width=int(np.ceil(self.width / f)),
            height=int(np.ceil(self.height / f)),
        )

    def backproject(self, pixels, inv_depths):
        """Pixels + inverse depths -> 3-D points in the camera frame."""
        px = np.atleast_2d(np.asarray(pixels, dtype=float))
        d = np.asarray(inv_depths, dtype=float).reshape(-1)
        z = 1.0 / d
        out = np.empty((len(d), 3))
        out[:, 0] = (px[:, 0] - self.cx) / self.fx * z
        out[:, 1] = (px[:, 1] - self.cy) / self.fy * z
        out[:, 2] = z
        return out

    def project_camera_points(self, points):
        """3-D camera-frame points -> pixels (no validity handling)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        uv = np.empty((len(pts), 2))
        uv[:, 0] = self.fx * pts[:, 0] / pts[:, 2] + self.cx
        uv[:, 1] = self.fy * pts[:, 1] / pts[:, 2] + self.cy
        return uv

    def in_bounds(self, pixels, margin: float = 0.0):
        px = np.atleast_2d(np.asarray(pixels, dtype=float))
        return (
            (px[:, 0] >= margin)
            & (px[:, 0] <= self.width - 1 - margin)
            & (px[:, 1] >= margin)
            & (px[:, 1] <= self.height - 1 - margin)
        )


@dataclass(frozen=True, eq=False)
class InverseDepthPoint:
    """A pixel in its host frame parameterized by inverse depth d = 1/z."""

    pixel: np.ndarray
    inv_depth: float
    inv_depth_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=float).reshape(2))
        if not self.inv_depth > 0:
            raise GeometryError("inverse depth must be positive")
        if self.inv_depth_sigma < 0:
            raise GeometryError("inverse depth sigma must be non-negative")


def project_points(pixels, inv_depths, intrinsics: CameraIntrinsics, pose: Pose, check_bounds=True, src_intrinsics=None):
    """Warp host pixels with inverse depth into another frame.

    Returns (pixels (N,2), valid (N,)). Invalid means behind the camera or,
    when check_bounds, outside the image. src_intrinsics back-projects the
    host pixels when the two frames use different camera scales (pyramid
    levels); it defaults to `intrinsics`.
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=float))
    d = np.asarray(inv_depths, dtype=float).reshape(-1)
    X = (src_intrinsics or intrinsics).backproject(px, d)
    Xt = pose.apply(X)
    z = Xt[:, 2]
    valid = z > 1e-12
    zs = np.where(valid, z, 1.0)
    uv = np.empty((len(d), 2))
    uv[:, 0] = intrinsics.fx * Xt[:, 0] / zs + intrinsics.cx
    uv[:, 1] = intrinsics.fy * Xt[:, 1] / zs + intrinsics.cy
    if check_bounds:
        valid &= intrinsics.in_bounds(uv)
    return uv, valid


def project(point: InverseDepthPoint, intrinsics: CameraIntrinsics, pose: Pose, check_bounds=True):
    """Single-point convenience wrapper around project_points."""
    uv, valid = project_points(point.pixel, point.inv_depth, intrinsics, pose, check_bounds)
    return uv[0], bool(valid[0])


def projection_jacobians_batch(pixels, inv_depths, intrinsics: CameraIntrinsics, pose: Pose, src_intrinsics=None):
    """Jacobians of the projected pixel w.r.t. the pose tangent and inverse depth.

    Returns (J_xi (N,2,6), J_d (N,2), valid (N,)). J_xi uses the left
    perturbation exp(delta) @ pose with (translation, rotation) ordering.
    src_intrinsics back-projects the host pixels as in project_points.
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=float))
    d = np.asarray(inv_depths, dtype=float).reshape(-1)
    n = len(d)
    X = (src_intrinsics or intrinsics).backproject(px, d)
    Xt = pose.apply(X)
    z = Xt[:, 2]
    valid = z > 1e-12
    zs = np.where(valid, z, 1.0)
    iz = 1.0 / zs
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = intrinsics.fx * iz
    dpi[:, 0, 2] = -intrinsics.fx * Xt[:, 0] * iz**2
    dpi[:, 1, 1] = intrinsics.fy * iz
    dpi[:, 1, 2] = -intrinsics.fy * Xt[:, 1] * iz**2

    J_xi = np.zeros((n, 2, 6))
    J_xi[:, :, :3] = dpi
    # Rotation block: dpi @ (-[Xt]x), expanded column by column.
    x, y, zc = Xt[:, 0], Xt[:, 1], Xt[:, 2]
    sk = np.zeros((n, 3, 3))
    sk[:, 0, 1] = -zc
    sk[:, 0, 2] = y
    sk[:, 1, 0] = zc
    sk[:, 1, 2] = -x
    sk[:, 2, 0] = -y
    sk[:, 2, 1] = x
    J_xi[:, :, 3:] = -np.einsum("nij,njk->nik", dpi, sk)

    # X = Xbar / d exactly, so dX/dd = -X / d.
    dX = -(X / d[:, None])
    dXt = dX @ pose.R.T
    J_d = np.einsum("nij,nj->ni", dpi, dXt)
    return J_xi, J_d, valid


def projection_jacobians(point: InverseDepthPoint, intrinsics: CameraIntrinsics, pose: Pose):
    """Single-point Jacobians; raises if the projection is invalid."""
    _, ok = project(point, intrinsics, pose)
    if not ok:
        raise GeometryError("projection invalid (behind camera or out of bounds)")
    J_xi, J_d, _ = projection_jacobians_batch(point.pixel, point.inv_depth, intrinsics, pose)
    return J_xi[0], J_d[0]
