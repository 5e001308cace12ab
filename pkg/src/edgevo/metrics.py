"""Trajectory containers, TUM file I/O, and trajectory error metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Pose

FAILURE_DRIFT_CAP = 30.0  # cm/m: any segment beyond this counts as a failure


@dataclass(eq=False)
class Trajectory:
    """Timestamped world-to-camera poses at a uniform timestep."""

    poses: list
    timestamps: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.poses) < 2:
            raise ValueError("a trajectory needs at least two poses")
        if len(self.poses) != len(self.timestamps):
            raise ValueError("pose/timestamp length mismatch")
        if not np.all(np.isfinite(self.timestamps)):
            raise ValueError("timestamps must be finite")

    def __len__(self):
        return len(self.poses)

    def positions(self):
        """Camera centers in world coordinates, (N, 3)."""
        return np.array([-(p.R.T @ p.t) for p in self.poses])

    def relative(self, i, j) -> Pose:
        """Motion mapping camera-i coordinates to camera-j coordinates."""
        return self.poses[j] @ self.poses[i].inverse()


@dataclass
class MetricReport:
    ate_rmse: float
    rpe_drift_cm_per_m: float
    failure_rate: float
    per_frame_errors: np.ndarray
    n_tracking_failures: int = 0
    frames: int = 0
    fps: float = 0.0

    def to_dict(self):
        return {
            "ate_rmse": float(self.ate_rmse),
            "rpe_drift_cm_per_m": float(self.rpe_drift_cm_per_m),
            "failure_rate": float(self.failure_rate),
            "n_tracking_failures": int(self.n_tracking_failures),
            "frames": int(self.frames),
            "fps": float(self.fps),
            "per_frame_errors": [float(x) for x in np.asarray(self.per_frame_errors).ravel()],
        }


def write_tum(path, trajectory: Trajectory):
    """TUM format: timestamp tx ty tz qx qy qz qw, camera-to-world."""
    with open(path, "w") as fh:
        for ts, pose in zip(trajectory.timestamps, trajectory.poses):
            inv = pose.inverse()
            q = Rotation.from_matrix(inv.R).as_quat()  # (x, y, z, w)
            t = inv.t
            fh.write(
                f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
            )


def read_tum(path) -> Trajectory:
    timestamps = []
    poses = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.replace(",", " ").split()]
            if len(vals) != 8:
                raise ValueError(f"{path}: expected 8 values per line, got {len(vals)}")
            ts, tx, ty, tz, qx, qy, qz, qw = vals
            R_cw = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
            cam_to_world = Pose(R_cw, [tx, ty, tz])
            timestamps.append(ts)
            poses.append(cam_to_world.inverse())
    return Trajectory(poses=poses, timestamps=np.array(timestamps))


def umeyama(src, dst, with_scale=True):
    """Similarity fit dst ~= s * R @ src + t. Returns (s, R, t)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    X = src - mu_s
    Y = dst - mu_d
    cov = Y.T @ X / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var = np.mean(np.sum(X**2, axis=1))
    s = float(np.trace(np.diag(D) @ S) / var) if (with_scale and var > 1e-18) else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def _aligned_errors(estimated: Trajectory, truth: Trajectory, scale_correction_interval, align=True):
    if len(estimated) != len(truth):
        raise ValueError("trajectory length mismatch")
    est = estimated.positions()
    gt = truth.positions()
    n = len(est)
    if not align:
        return np.linalg.norm(est - gt, axis=1)
    interval = max(int(scale_correction_interval), 2)
    errors = np.empty(n)
    start = 0
    while start < n:
        stop = min(start + interval, n)
        if n - stop < 2:  # merge a short tail into the last chunk
            stop = n
        sl = slice(start, stop)
        s, R, t = umeyama(est[sl], gt[sl], with_scale=True)
        aligned = est[sl] @ (s * R).T + t
        errors[sl] = np.linalg.norm(aligned - gt[sl], axis=1)
        start = stop
    return errors


def ate(estimated: Trajectory, truth: Trajectory, scale_correction_interval=200, align=True):
    """RMSE of translation after per-interval similarity (scale) correction.

    align=False skips both the scale correction and the rigid alignment and
    compares raw positions.
    """
    errors = _aligned_errors(estimated, truth, scale_correction_interval, align)
    return float(np.sqrt(np.mean(errors**2)))


def rpe_drift(estimated: Trajectory, truth: Trajectory, segment_length=2.0):
    """Mean relative-translation drift in cm per meter of traveled path.

    Segments start at every frame and end once the ground-truth path length
    reaches segment_length. Returns (drift_cm_per_m, failed) where failed
    means some segment exceeded the 30 cm/m cap.
    """
    if len(estimated) != len(truth):
        raise ValueError("trajectory length mismatch")
    gt_pos = truth.positions()
    steps = np.linalg.norm(np.diff(gt_pos, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(steps)])
    drifts = []
    j = 0
    for i in range(len(truth) - 1):
        target = cum[i] + segment_length
        j = max(j, i + 1)
        while j < len(truth) and cum[j] < target:
            j += 1
        if j >= len(truth):
            break
        path = cum[j] - cum[i]
        if path <= 1e-12:
            continue
        rel_est = estimated.relative(i, j).t
        rel_gt = truth.relative(i, j).t
        err = np.linalg.norm(rel_est - rel_gt)
        drifts.append(100.0 * err / path)
    if not drifts:
        # trajectory shorter than one segment: fall back to the full span
        path = cum[-1]
        if path <= 1e-12:
            return 0.0, False
        err = np.linalg.norm(estimated.relative(0, len(truth) - 1).t - truth.relative(0, len(truth) - 1).t)
        drifts = [100.0 * err / path]
    drift = float(np.mean(drifts))
    failed = bool(np.max(drifts) > FAILURE_DRIFT_CAP)
    return drift, failed
