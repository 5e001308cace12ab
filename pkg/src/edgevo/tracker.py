"""ICP-based frame-to-keyframe camera tracking.

Minimizes the point-to-tangent error over a coarse-to-fine pyramid: host
edge points are projected into the frame, matched to their nearest edge
pixel via the frame's nearest-edge field, and the residual is the
projection error along the matched pixel's gradient direction. The
association is refreshed after every pose update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose, exp_map, project_points, projection_jacobians_batch
from .imageproc import Pyramid, bilinear, compute_gradients
from .keyframe import Keyframe


@dataclass(frozen=True)
class TrackerConfig:
    levels: int = 3
    max_iterations: int = 30
    huber_gamma: float = 1.0  # px at the finest level, doubled per coarser level
    convergence_delta: float = 1e-8
    divergence_residual: float = 10.0  # mean |r| px; explosion signal
    nn_gate: float = 20.0  # px at the finest level
    min_points: int = 20
    fail_mean_residual: float = 3.0
    fail_inlier_fraction: float = 0.30

    def __post_init__(self):
        if min(
            self.levels,
            self.max_iterations,
            self.huber_gamma,
            self.convergence_delta,
            self.divergence_residual,
            self.nn_gate,
        ) <= 0:
            raise ValueError("tracker config values must be positive")


@dataclass(frozen=True, eq=False)
class PointTrack:
    point_id: int
    projected: np.ndarray
    nn_pixel: np.ndarray
    residual: float
    weight: float


@dataclass(eq=False)
class TrackingResult:
    pose: Pose  # keyframe -> frame
    pose_covariance: np.ndarray  # 6x6
    residual_variance: float  # sigma_r^2, px^2
    inlier_fraction: float
    per_point: list  # PointTrack entries for points valid at convergence
    failed: bool = False
    failure_reason: str = ""
    mean_displacement: float = 0.0  # mean |p_proj - p_host| px, keyframe policy input
    intrinsics: CameraIntrinsics = None
    _host: dict = field(default_factory=dict, repr=False)  # point id -> (pixel, inv_depth)
    _normal_rank: int = 6
    _cost_trace: list = field(default_factory=list, repr=False)  # (level, cost) accepted steps

    def track(self, point_id) -> PointTrack:
        for t in self.per_point:
            if t.point_id == point_id:
                return t
        raise KeyError(f"point {point_id} was not tracked in the last iteration")


def huber_weights(r, gamma):
    absr = np.abs(r)
    return np.where(absr <= gamma, 1.0, gamma / np.maximum(absr, 1e-300))


def huber_cost(r, gamma):
    absr = np.abs(r)
    quad = 0.5 * r**2
    lin = gamma * (absr - 0.5 * gamma)
    return float(np.sum(np.where(absr <= gamma, quad, lin)))


def alignment_residuals(pixels, inv_depths, intrinsics, pose, edges, gate, src_intrinsics=None):
    """Point-to-tangent residuals and their pose Jacobians at one level.

    Host pixels are full-resolution coordinates; src_intrinsics back-projects
    them while `intrinsics` may be a coarser pyramid level. Returns
    (r (N,), J (N,6), valid (N,), proj (N,2), nn (N,2), g (N,2)).
    """
    proj, valid = project_points(pixels, inv_depths, intrinsics, pose, src_intrinsics=src_intrinsics)
    h, w = edges.mask.shape
    ip = np.rint(proj).astype(int)
    ip[:, 0] = np.clip(ip[:, 0], 0, w - 1)
    ip[:, 1] = np.clip(ip[:, 1], 0, h - 1)
    nn = edges.nnf[ip[:, 1], ip[:, 0]].astype(float)
    dist = edges.dist[ip[:, 1], ip[:, 0]]
    valid = valid & np.isfinite(dist) & (dist <= gate)
    nn_i = np.rint(nn).astype(int)
    nn_i[:, 0] = np.clip(nn_i[:, 0], 0, w - 1)
    nn_i[:, 1] = np.clip(nn_i[:, 1], 0, h - 1)
    g = edges.gradient_dir[nn_i[:, 1], nn_i[:, 0]]
    r = np.einsum("ni,ni->n", g, proj - nn)
    J_xi, _, _ = projection_jacobians_batch(pixels, inv_depths, intrinsics, pose, src_intrinsics=src_intrinsics)
    J = np.einsum("ni,nij->nj", g, J_xi)
    return r, J, valid, proj, nn, g


def align(keyframe: Keyframe, frame: Pyramid, init_pose: Pose, config: TrackerConfig) -> TrackingResult:
    """Track a frame against a keyframe by minimizing point-to-tangent error."""
    points = keyframe.usable_points()
    if len(points) < config.min_points:
        raise ValueError(f"keyframe hosts only {len(points)} usable points, need {config.min_points}")
    if len(frame) < config.levels:
        raise ValueError("frame pyramid has fewer levels than the tracker needs")

    pixels = np.array([p.pixel for p in points])
    depths = np.array([p.inv_depth for p in points])
    ids = [p.id for p in points]
    init = Pose(init_pose.R, init_pose.t, check=False)
    reason_box = []
    cost_trace = []

    def run_levels(levels, pose, tag):
        for level in levels:
            K = keyframe.intrinsics.scaled(level)
            edges = frame.levels[level].edges
            gamma = config.huber_gamma * 2**level
            gate = config.nn_gate / 2**level
            if edges.edge_count() == 0:
                reason_box.append("frame has no edges")
                return pose
            for _ in range(config.max_iterations):
                r, J, valid, _, _, _ = alignment_residuals(
                    pixels, depths, K, pose, edges, gate, src_intrinsics=keyframe.intrinsics
                )
                if valid.sum() < 6:
                    reason_box.append(f"only {int(valid.sum())} valid associations at level {level}")
                    return pose
                rv, Jv = r[valid], J[valid]
                if np.mean(np.abs(rv)) > config.divergence_residual * 2**level:
                    reason_box.append("residual explosion")
                    return pose
                w = huber_weights(rv, gamma)
                H = Jv.T @ (Jv * w[:, None])
                b = -Jv.T @ (w * rv)
                cost0 = huber_cost(rv, gamma)
                try:
                    delta = np.linalg.solve(H + 1e-12 * np.eye(6), b)
                except np.linalg.LinAlgError:
                    delta = np.linalg.lstsq(H, b, rcond=None)[0]
                # plain Gauss-Newton with backtracking halvings
                scale = 1.0
                accepted = False
                for _ in range(6):
                    trial = exp_map(delta * scale) @ pose
                    r2, _, v2, _, _, _ = alignment_residuals(
                        pixels, depths, K, trial, edges, gate, src_intrinsics=keyframe.intrinsics
                    )
                    trial_cost = huber_cost(r2[v2], gamma) if v2.sum() >= 6 else np.inf
                    if trial_cost <= cost0:
                        pose = trial
                        accepted = True
                        cost_trace.append((tag, level, trial_cost))
                        break
                    scale *= 0.5
                if not accepted:
                    break
                if np.linalg.norm(delta * scale) < config.convergence_delta:
                    break
        return pose

    def fine_score(pose):
        r, _, valid, _, _, _ = alignment_residuals(
            pixels, depths, keyframe.intrinsics, pose, frame.levels[0].edges, config.nn_gate
        )
        nv = int(valid.sum())
        if nv < 6:
            return np.inf
        return huber_cost(r[valid], config.huber_gamma) / nv / (nv / len(points))

    # Coarse levels extend the convergence basin for large motions but are
    # noisy in weakly observable directions, so a good init must never be
    # lost: warm starts skip them, and otherwise the cascaded result only
    # wins if it beats a fine-only solve from the same init.
    init_score = fine_score(init)
    warm = np.isfinite(init_score) and init_score < 0.5 * config.huber_gamma**2
    if warm or config.levels == 1:
        pose = run_levels([0], init, "warm")
    else:
        pose_cascade = run_levels(list(range(config.levels - 1, -1, -1)), init, "cascade")
        pose_fine = run_levels([0], init, "fine")
        pose = pose_cascade if fine_score(pose_cascade) <= fine_score(pose_fine) else pose_fine
    failed = False
    reason = reason_box[-1] if reason_box else ""

    # final statistics at the finest level
    K0 = keyframe.intrinsics
    edges0 = frame.levels[0].edges
    if edges0.edge_count() == 0:
        return TrackingResult(
            pose=pose,
            pose_covariance=np.zeros((6, 6)),
            residual_variance=0.0,
            inlier_fraction=0.0,
            per_point=[],
            failed=True,
            failure_reason=reason or "frame has no edges",
            intrinsics=K0,
            _cost_trace=cost_trace,
        )
    r, J, valid, proj, nn, _ = alignment_residuals(pixels, depths, K0, pose, edges0, config.nn_gate)
    n_valid = int(valid.sum())
    inlier_fraction = n_valid / len(points)
    if n_valid >= 6:
        rv, Jv = r[valid], J[valid]
        w = huber_weights(rv, config.huber_gamma)
        H = Jv.T @ (Jv * w[:, None])
        dof = max(n_valid - 6, 1)
        sigma_r2 = float(np.sum(w * rv**2) / dof)
        rank = int(np.linalg.matrix_rank(H, tol=1e-9 * max(np.trace(H), 1e-12)))
        cov = np.linalg.pinv(H) * sigma_r2
        cov = 0.5 * (cov + cov.T)
        mean_res = float(np.mean(np.abs(rv)))
        mean_disp = float(np.mean(np.linalg.norm(proj[valid] - pixels[valid], axis=1)))
    else:
        w = np.zeros(len(points))
        sigma_r2 = 0.0
        rank = 0
        cov = np.zeros((6, 6))
        mean_res = np.inf
        mean_disp = np.inf
        failed, reason = True, reason or "too few valid associations"

    if not failed:
        if mean_res > config.fail_mean_residual:
            failed, reason = True, f"mean residual {mean_res:.2f} px above threshold"
        elif inlier_fraction < config.fail_inlier_fraction:
            failed, reason = True, f"inlier fraction {inlier_fraction:.2f} below threshold"

    weights = np.zeros(len(points))
    weights[valid] = huber_weights(r[valid], config.huber_gamma)
    per_point = [
        PointTrack(
            point_id=ids[i],
            projected=proj[i].copy(),
            nn_pixel=nn[i].copy(),
            residual=float(r[i]),
            weight=float(weights[i]),
        )
        for i in range(len(points))
        if valid[i]
    ]
    return TrackingResult(
        pose=pose,
        pose_covariance=cov,
        residual_variance=sigma_r2,
        inlier_fraction=inlier_fraction,
        per_point=per_point,
        failed=failed,
        failure_reason=reason,
        mean_displacement=mean_disp,
        intrinsics=K0,
        _host={ids[i]: (pixels[i], depths[i]) for i in range(len(points))},
        _normal_rank=rank,
        _cost_trace=cost_trace,
    )


def point_covariance(tracking: TrackingResult, point_id) -> np.ndarray:
    """2x2 reprojection covariance of one tracked point, propagated from the
    pose covariance of the alignment through the point's projection Jacobian."""
    tracking.track(point_id)  # raises if the point was not tracked
    if tracking._normal_rank < 6:
        raise ValueError("normal matrix is singular: degenerate tracking geometry")
    pixel, inv_depth = tracking._host[point_id]
    J_xi, _, valid = projection_jacobians_batch(pixel, inv_depth, tracking.intrinsics, tracking.pose)
    if not valid[0]:
        raise ValueError("point no longer projects validly")
    S = J_xi[0] @ tracking.pose_covariance @ J_xi[0].T
    return 0.5 * (S + S.T)


def census_descriptor(image, pixels):
    """8-neighbor census bits at rounded pixel positions (border-safe)."""
    h, w = image.shape
    ip = np.rint(np.atleast_2d(pixels)).astype(int)
    ip[:, 0] = np.clip(ip[:, 0], 1, w - 2)
    ip[:, 1] = np.clip(ip[:, 1], 1, h - 2)
    center = image[ip[:, 1], ip[:, 0]]
    bits = []
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            if du == 0 and dv == 0:
                continue
            bits.append(image[ip[:, 1] + dv, ip[:, 0] + du] > center)
    return np.stack(bits, axis=-1)


def photometric_residuals(keyframe: Keyframe, frame: Pyramid, pose: Pose, points, representation="intensity"):
    """Generalized photometric residuals F_k(p_kr) - F_r(p_r).

    representation is one of intensity, gradient-magnitude, census. Census
    returns Hamming distances and no Jacobian. Returns (residuals, jacobians,
    valid) where jacobians is (N, 6) or None.
    """
    pixels = np.array([p.pixel for p in points])
    depths = np.array([p.inv_depth for p in points])
    K = keyframe.intrinsics
    proj, valid = project_points(pixels, depths, K, pose)
    if not valid.any():
        raise ValueError("all points project out of bounds")

    host_level = keyframe.pyramid.levels[0]
    frame_level = frame.levels[0]
    if representation == "census":
        host_desc = census_descriptor(host_level.image, pixels)
        frame_desc = census_descriptor(frame_level.image, proj)
        r = (host_desc != frame_desc).sum(axis=-1).astype(float)
        return np.where(valid, r, np.nan), None, valid

    if representation == "intensity":
        f_host, f_frame = host_level.image, frame_level.image
        grad_frame = frame_level.gradients
    elif representation == "gradient-magnitude":
        f_host = host_level.gradients.magnitude
        f_frame = frame_level.gradients.magnitude
        grad_frame = compute_gradients(f_frame)
    else:
        raise ValueError(f"unknown representation {representation!r}")

    val_frame = bilinear(f_frame, proj)
    val_host = bilinear(f_host, pixels)
    r = val_frame - val_host
    valid = valid & np.isfinite(r)
    gx = bilinear(grad_frame.gx, proj)
    gy = bilinear(grad_frame.gy, proj)
    J_xi, _, _ = projection_jacobians_batch(pixels, depths, K, pose)
    dF = np.stack([gx, gy], axis=-1)
    J = np.einsum("ni,nij->nj", np.nan_to_num(dF), J_xi)
    return r, J, valid
