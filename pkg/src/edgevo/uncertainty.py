"""Point-to-edge geometric uncertainty: search length, disparity variance,
and the match/depth confidence measures.

The local model: near a projected point p, the target edge is a straight
line along g_perp (the edge tangent), and depth changes slide p along the
epipolar direction l. theta is the angle between the edge normal g and l,
folded into [0, pi/2] since only |sin| and |cos| enter the formulas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, GeometryError, InverseDepthPoint, Pose, project


class DegenerateGeometryError(ValueError):
    """No usable epipolar direction (zero baseline or epipole)."""


class PoorlyObservableError(ValueError):
    """Edge normal nearly perpendicular to the epipolar direction."""


def rot90(vec):
    """Counter-clockwise quarter turn: (x, y) -> (-y, x)."""
    v = np.asarray(vec, dtype=float)
    return np.array([-v[1], v[0]])


@dataclass(frozen=True, eq=False)
class EdgeGeometry:
    """Local geometry at a projected point: edge normal g, tangent g_perp,
    epipolar direction l, and the angle theta between g and l."""

    p: np.ndarray
    g: np.ndarray
    g_perp: np.ndarray
    l: np.ndarray
    theta: float

    @classmethod
    def from_directions(cls, p, g, l):
        g = np.asarray(g, dtype=float)
        l = np.asarray(l, dtype=float)
        ng, nl = np.linalg.norm(g), np.linalg.norm(l)
        if not (ng > 0 and nl > 0):
            raise ValueError("g and l must be nonzero")
        g = g / ng
        l = l / nl
        theta = float(np.arccos(np.clip(abs(float(g @ l)), 0.0, 1.0)))
        return cls(p=np.asarray(p, dtype=float), g=g, g_perp=rot90(g), l=l, theta=theta)


@dataclass(frozen=True, eq=False)
class CovarianceEigen:
    """2x2 covariance as standard deviations along orthonormal axes."""

    sigma1: float
    sigma2: float
    v1: np.ndarray
    v2: np.ndarray

    def reconstruct(self):
        V = np.column_stack([self.v1, self.v2])
        return V @ np.diag([self.sigma1**2, self.sigma2**2]) @ V.T


@dataclass(frozen=True, eq=False)
class SearchBudget:
    """Terms of the probabilistic search radius along the edge."""

    sigma_p_perp_g: float
    sigma_mu: float
    radius: float
    k_p: float
    k_mu: float


def eigen_decompose(sigma_p) -> CovarianceEigen:
    """Closed-form eigendecomposition of a symmetric PSD 2x2 covariance."""
    S = np.asarray(sigma_p, dtype=float)
    if S.shape != (2, 2) or abs(S[0, 1] - S[1, 0]) > 1e-9:
        raise ValueError("covariance must be symmetric 2x2")
    a, b, c = S[0, 0], 0.5 * (S[0, 1] + S[1, 0]), S[1, 1]
    half_tr = 0.5 * (a + c)
    rad = np.hypot(0.5 * (a - c), b)
    lam1 = half_tr + rad
    lam2 = half_tr - rad
    if lam2 < -1e-12:
        raise ValueError(f"covariance not PSD (eigenvalue {lam2:.3e})")
    lam1, lam2 = max(lam1, 0.0), max(lam2, 0.0)
    if rad <= 1e-15 * max(1.0, half_tr):
        v1 = np.array([1.0, 0.0])
    elif abs(b) > 1e-15 * max(abs(a), abs(c), 1e-300):
        v1 = np.array([lam1 - c, b])
        v1 /= np.linalg.norm(v1)
    elif a >= c:
        v1 = np.array([1.0, 0.0])
    else:
        v1 = np.array([0.0, 1.0])
    return CovarianceEigen(
        sigma1=float(np.sqrt(lam1)), sigma2=float(np.sqrt(lam2)), v1=v1, v2=rot90(v1)
    )


def sigma_perp(eigen: CovarianceEigen, g_perp) -> float:
    """Spread of the reprojected point along the edge tangent g_perp.

    Max of the two eigen-axis projections (magnitudes). For isotropic
    covariances the eigenbasis is arbitrary, so we evaluate in the basis
    aligned with g_perp, which gives sigma exactly.
    """
    gp = np.asarray(g_perp, dtype=float)
    if eigen.sigma1 - eigen.sigma2 <= 1e-12 * eigen.sigma1:
        return float(eigen.sigma1)
    return float(max(eigen.sigma1 * abs(eigen.v1 @ gp), eigen.sigma2 * abs(eigen.v2 @ gp)))


def sigma_parallel(eigen: CovarianceEigen, g) -> float:
    """Spread of the reprojected point along the edge normal g."""
    return sigma_perp(eigen, g)


def sigma_mu(point: InverseDepthPoint, pose: Pose, intrinsics: CameraIntrinsics) -> float:
    """Reprojection displacement from perturbing inverse depth by +-sigma_d.

    The lower perturbation is clamped to d/10 so inverse depth stays positive.
    """
    if point.inv_depth_sigma == 0.0:
        return 0.0
    base, ok0 = project(point, intrinsics, pose, check_bounds=False)
    if not ok0:
        raise GeometryError("point does not project in front of the camera")
    d = point.inv_depth
    d_hi = d + point.inv_depth_sigma
    d_lo = d - point.inv_depth_sigma
    if d_lo <= 0:
        d_lo = d / 10.0
    disp = []
    for dv in (d_hi, d_lo):
        uv, ok = project(
            InverseDepthPoint(point.pixel, dv), intrinsics, pose, check_bounds=False
        )
        if ok:
            disp.append(float(np.linalg.norm(uv - base)))
    if not disp:
        raise GeometryError("both depth-perturbed projections are invalid")
    return max(disp)


def search_radius(geom: EdgeGeometry, sigma_p_perp_g, sigma_mu_val, k_p=1.0, k_mu=1.0) -> float:
    """Half-width of the 1-D search interval along the edge."""
    return float(k_p * sigma_p_perp_g + k_mu * sigma_mu_val * abs(np.sin(geom.theta)))


def search_budget(geom, eigen, sigma_mu_val, k_p=1.0, k_mu=1.0) -> SearchBudget:
    sp = sigma_perp(eigen, geom.g_perp)
    return SearchBudget(
        sigma_p_perp_g=sp,
        sigma_mu=float(sigma_mu_val),
        radius=search_radius(geom, sp, sigma_mu_val, k_p, k_mu),
        k_p=float(k_p),
        k_mu=float(k_mu),
    )


_MIN_COS = 1e-3


def disparity_and_variance(geom: EdgeGeometry, e_p_parallel_g, sigma_p_parallel_g):
    """Disparity mu = e/cos(theta) and its variance sigma^2/cos^2(theta)."""
    cos_t = np.cos(geom.theta)
    if abs(cos_t) <= _MIN_COS:
        raise PoorlyObservableError(
            f"edge normal nearly orthogonal to epipolar direction (theta={geom.theta:.4f})"
        )
    mu = float(e_p_parallel_g / cos_t)
    var = float(sigma_p_parallel_g**2 / cos_t**2)
    return mu, var


def depth_confidence(geom: EdgeGeometry, sigma_p_parallel_g) -> float:
    """Inverse predicted disparity standard deviation, cos(theta)/sigma."""
    if sigma_p_parallel_g < 0:
        raise ValueError("sigma must be non-negative")
    if sigma_p_parallel_g == 0.0:
        return np.inf
    return float(np.cos(geom.theta) / sigma_p_parallel_g)


def epipolar_direction(pose: Pose, intrinsics: CameraIntrinsics, pixel) -> np.ndarray:
    """Unit image direction in which a host pixel's projection moves as its
    inverse depth increases, under the given relative pose.

    The projected track pi(z * R*Xbar + t) is a straight image line, so the
    direction is depth-independent.
    """
    t = pose.t
    if np.linalg.norm(t) < 1e-12:
        raise DegenerateGeometryError("zero baseline: no epipolar direction")
    px = np.asarray(pixel, dtype=float).reshape(2)
    xbar = np.array(
        [(px[0] - intrinsics.cx) / intrinsics.fx, (px[1] - intrinsics.cy) / intrinsics.fy, 1.0]
    )
    a = pose.R @ xbar
    # d(pixel)/dz is parallel to this z-independent vector:
    dirn = np.array(
        [
            intrinsics.fx * (a[0] * t[2] - a[2] * t[0]),
            intrinsics.fy * (a[1] * t[2] - a[2] * t[1]),
        ]
    )
    n = np.linalg.norm(dirn)
    if n < 1e-12:
        raise DegenerateGeometryError("pixel coincides with the epipole")
    # increasing inverse depth = decreasing z
    return -dirn / n
