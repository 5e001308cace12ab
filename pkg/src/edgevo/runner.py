"""End-to-end odometry runs: tracking, keyframe creation, data association,
windowed bundle adjustment, dataset reading, and flat key=value configs.

Execution is sequential but follows the snapshot contract: the tracker only
reads immutable pyramids and the latest keyframe; the mapping side mutates
only window state between frames.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .association import AssociationConfig, associate
from .backend import BaConfig, TriangulationError, Window, add_keyframe, local_ba, triangulate_depth
from .geometry import CameraIntrinsics, Pose, project_points
from .imageproc import build_pyramid, read_pgm
from .keyframe import Keyframe, KeyframePoint, PointState, sample_edge_pixels
from .metrics import MetricReport, Trajectory, ate, read_tum, rpe_drift
from .tracker import TrackerConfig, TrackingResult, align


@dataclass
class PipelineConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    assoc: AssociationConfig = field(default_factory=AssociationConfig)
    ba: BaConfig = field(default_factory=BaConfig)
    n_points: int = 800
    canny_low: float = 0.1
    canny_high: float = 0.2
    kf_displacement: float = 12.0  # px: new keyframe beyond this mean flow
    kf_min_inliers: float = 0.6
    assoc_depth: int = 2  # how many previous keyframes match into a new one
    gt_seed_depth: bool = True  # seed depths from ground truth at (re)init
    gt_depth_sigma_frac: float = 0.1
    ate_scale_interval: int = 200
    rpe_segment: float = 2.0  # scene units
    seed: int = 0


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_value(text):
    t = text.strip()
    if t.lower() in _BOOL:
        return _BOOL[t.lower()]
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def load_config(path=None, overrides=None) -> PipelineConfig:
    """Flat key=value config: `tracker.levels = 2`, `assoc.tau_match = 8`,
    `ba.window_size = 7`, bare keys for pipeline-level fields."""
    entries = {}
    if path is not None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                key, val = line.split("=", 1)
                entries[key.strip()] = _parse_value(val)
    if overrides:
        entries.update(overrides)

    cfg = PipelineConfig()
    sub = {"tracker": {}, "assoc": {}, "ba": {}}
    for key, val in entries.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in sub:
                raise ValueError(f"unknown config section {section!r}")
            sub[section][name] = val
        else:
            if not hasattr(cfg, key):
                raise ValueError(f"unknown config key {key!r}")
            setattr(cfg, key, val)
    try:
        cfg.tracker = replace(cfg.tracker, **sub["tracker"])
        cfg.assoc = replace(cfg.assoc, **sub["assoc"])
        cfg.ba = replace(cfg.ba, **sub["ba"])
    except TypeError as exc:
        raise ValueError(f"bad config field: {exc}") from None
    return cfg


class DiskSequence:
    """Directory of binary PGM frames with plain-text intrinsics and an
    optional TUM ground-truth trajectory."""

    def __init__(self, directory):
        self.directory = directory
        names = sorted(n for n in os.listdir(directory) if n.endswith(".pgm"))
        if not names:
            raise FileNotFoundError(f"no .pgm frames in {directory}")
        self._paths = [os.path.join(directory, n) for n in names]
        self.intrinsics = self._read_intrinsics(os.path.join(directory, "intrinsics.txt"))
        gt_path = os.path.join(directory, "groundtruth.txt")
        self._gt = read_tum(gt_path) if os.path.exists(gt_path) else None
        self.timestamps = (
            self._gt.timestamps if self._gt is not None else np.arange(len(self._paths), dtype=float)
        )
        self.name = os.path.basename(os.path.normpath(directory))

    @staticmethod
    def _read_intrinsics(path):
        with open(path) as fh:
            vals = [float(x) for x in fh.read().split()]
        if len(vals) != 6:
            raise ValueError(f"{path}: expected 'fx fy cx cy width height'")
        fx, fy, cx, cy, w, h = vals
        return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=int(w), height=int(h))

    def __len__(self):
        return len(self._paths)

    def frame(self, i):
        return read_pgm(self._paths[i])

    def has_ground_truth(self):
        return self._gt is not None

    def gt_pose(self, i):
        return self._gt.poses[i] if self._gt is not None else None

    def gt_inv_depth(self, i, pixels):
        n = len(np.atleast_2d(pixels))
        return np.zeros(n), np.zeros(n, dtype=bool)


def write_dataset(directory, sequence):
    """Write a rendered sequence as a PGM dataset (frames, intrinsics, TUM gt)."""
    from .imageproc import write_pgm

    os.makedirs(directory, exist_ok=True)
    for i, img in enumerate(sequence.images):
        write_pgm(os.path.join(directory, f"{i:06d}.pgm"), img)
    K = sequence.intrinsics
    with open(os.path.join(directory, "intrinsics.txt"), "w") as fh:
        fh.write(f"{K.fx} {K.fy} {K.cx} {K.cy} {K.width} {K.height}\n")
    from .metrics import write_tum

    write_tum(
        os.path.join(directory, "groundtruth.txt"),
        Trajectory(poses=list(sequence.poses), timestamps=sequence.timestamps),
    )


class _PipelineState:
    def __init__(self, config):
        self.config = config
        self.window = Window(max_size=config.ba.window_size)
        self.current_kf = None
        self.rel_to_kf = Pose.identity()  # keyframe -> previous frame
        self.velocity = Pose.identity()  # frame-to-frame motion model
        self.kf_counter = 0
        self.point_counter = 0
        self.kf_poses = {}  # latest optimized pose per keyframe id
        self.last_tracking = None
        self.failures = 0


def _seed_depths(source, frame_idx, pixels, config, rng):
    """Depths for a fresh (re)initialized keyframe."""
    if config.gt_seed_depth and source.has_ground_truth():
        inv, ok = source.gt_inv_depth(frame_idx, pixels)
        if ok.any():
            inv = np.where(ok, inv, np.median(inv[ok]))
            sigma = config.gt_depth_sigma_frac * inv
            if config.gt_depth_sigma_frac > 0:
                inv = np.maximum(inv + rng.normal(0.0, sigma), 0.1 * inv)
            return inv, config.gt_depth_sigma_frac * inv + 1e-6, np.ones(len(pixels), bool)
    inv = np.full(len(pixels), 0.25)
    return inv, np.full(len(pixels), 0.25), np.ones(len(pixels), bool)


def _propagated_depths(state, rel, pixels):
    """Transfer depths from the current keyframe into a new keyframe frame."""
    kf = state.current_kf
    pts = kf.usable_points()
    if not pts:
        return None
    host_px = np.array([p.pixel for p in pts])
    host_d = np.array([p.inv_depth for p in pts])
    host_s = np.array([p.inv_depth_sigma for p in pts])
    uv, valid = project_points(host_px, host_d, kf.intrinsics, rel)
    X = kf.intrinsics.backproject(host_px, host_d)
    z_new = rel.apply(X)[:, 2]
    valid &= z_new > 1e-6
    grid = {}
    for j in np.nonzero(valid)[0]:
        key = (int(round(uv[j, 0])), int(round(uv[j, 1])))
        d_new = 1.0 / z_new[j]
        sigma_new = d_new * (host_s[j] / host_d[j] + 0.05)
        if key not in grid or grid[key][1] > sigma_new:
            grid[key] = (d_new, sigma_new)
    if not grid:
        return None
    med = float(np.median([v[0] for v in grid.values()]))
    inv = np.empty(len(pixels))
    sig = np.empty(len(pixels))
    for i, px in enumerate(pixels):
        found = None
        cu, cv = int(round(px[0])), int(round(px[1]))
        for r in (0, 1, 2):
            for du in range(-r, r + 1):
                for dv in range(-r, r + 1):
                    if max(abs(du), abs(dv)) != r:
                        continue
                    hit = grid.get((cu + du, cv + dv))
                    if hit is not None and (found is None or hit[1] < found[1]):
                        found = hit
            if found is not None:
                break
        if found is None:
            inv[i], sig[i] = med, 0.5 * med
        else:
            inv[i], sig[i] = found
    return inv, sig


def _make_keyframe(state, source, frame_idx, pyramid, pose_w, rel=None, rng=None):
    config = state.config
    pixels = sample_edge_pixels(pyramid.levels[0].edges, config.n_points, rng)
    if rel is None:
        inv, sig, ok = _seed_depths(source, frame_idx, pixels, config, rng)
    else:
        prop = _propagated_depths(state, rel, pixels)
        if prop is None:
            inv, sig, ok = _seed_depths(source, frame_idx, pixels, config, rng)
        else:
            inv, sig = prop
            ok = np.ones(len(pixels), bool)
    pts = []
    for i in range(len(pixels)):
        if not ok[i] or inv[i] <= 0:
            continue
        pts.append(KeyframePoint(state.point_counter, pixels[i], float(inv[i]), float(sig[i])))
        state.point_counter += 1
    kf = Keyframe(state.kf_counter, pyramid, pose_w, pts, source.intrinsics)
    state.kf_counter += 1
    return kf


def _tracking_proxy(pose, template: TrackingResult):
    return TrackingResult(
        pose=pose,
        pose_covariance=template.pose_covariance,
        residual_variance=template.residual_variance,
        inlier_fraction=template.inlier_fraction,
        per_point=[],
        intrinsics=template.intrinsics,
    )


def _associate_new_keyframe(state, new_kf, tracking):
    config = state.config
    records = associate(state.current_kf, new_kf, tracking, config.assoc)
    older = [kf for kf in state.window.keyframes if kf.id != state.current_kf.id]
    for kf in older[-(config.assoc_depth - 1) :] if config.assoc_depth > 1 else []:
        rel = new_kf.pose @ kf.pose.inverse()
        proxy = _tracking_proxy(rel, tracking)
        records.extend(associate(kf, new_kf, proxy, config.assoc))
    return records


def _refine_depths(state, records):
    """Triangulate eligible records whose host depth prior is weak."""
    for rec in records:
        if rec.source != "template-match" and rec.depth_confidence < state.config.assoc.tau_depth:
            continue
        try:
            host = state.window.keyframe(rec.host_kf)
            target = state.window.keyframe(rec.target_kf)
        except KeyError:
            continue
        pt = host.point(rec.host_point)
        if pt.state != PointState.ACTIVE:
            continue
        if pt.inv_depth_sigma < 0.3 * pt.inv_depth:
            continue  # prior already trustworthy; leave refinement to BA
        try:
            d, sigma = triangulate_depth(rec, host.pose, target.pose, host.intrinsics)
        except TriangulationError:
            continue
        pt.inv_depth = d
        pt.inv_depth_sigma = max(sigma, 0.01 * d)


def _reassociation_callback(state):
    config = state.config

    def callback(window, flagged):
        by_pair = {}
        for host_id, point_id, target_id in flagged:
            by_pair.setdefault((host_id, target_id), []).append(point_id)
        out = {}
        for (host_id, target_id), pids in by_pair.items():
            try:
                host = window.keyframe(host_id)
                target = window.keyframe(target_id)
            except KeyError:
                for pid in pids:
                    out[(host_id, pid, target_id)] = None
                continue
            proxy = _tracking_proxy(target.pose @ host.pose.inverse(), state.last_tracking)
            recs = {r.host_point: r for r in associate(host, target, proxy, config.assoc, point_ids=pids)}
            for pid in pids:
                out[(host_id, pid, target_id)] = recs.get(pid)
        return out

    return callback


def run_pipeline(source, config: PipelineConfig = None):
    """Run tracking -> keyframing -> association -> local BA over a sequence.

    Returns (MetricReport, estimated Trajectory, info dict). Tracking
    failures are counted and the pipeline re-initializes from ground truth
    (when the source has it) at the failing frame.
    """
    config = config or PipelineConfig()
    rng = np.random.default_rng(config.seed)
    state = _PipelineState(config)
    n = len(source)
    if n < 2:
        raise ValueError("need at least two frames")
    track_log = [None] * n  # (kf_id, relative pose)
    t_start = time.perf_counter()

    for i in range(n):
        pyr = build_pyramid(
            source.frame(i), config.tracker.levels, config.canny_low, config.canny_high
        )
        if state.current_kf is None:
            pose_w = source.gt_pose(i) if source.has_ground_truth() else Pose.identity()
            kf = _make_keyframe(state, source, i, pyr, pose_w, rng=rng)
            add_keyframe(state.window, kf)
            state.current_kf = kf
            state.kf_poses[kf.id] = kf.pose
            state.rel_to_kf = Pose.identity()
            state.velocity = Pose.identity()
            track_log[i] = (kf.id, Pose.identity())
            continue

        init = state.velocity @ state.rel_to_kf
        tracking = align(state.current_kf, pyr, init, config.tracker)
        if tracking.failed:
            state.failures += 1
            pose_w = (
                source.gt_pose(i)
                if source.has_ground_truth()
                else state.velocity @ state.rel_to_kf @ state.current_kf.pose
            )
            kf = _make_keyframe(state, source, i, pyr, pose_w, rng=rng)
            add_keyframe(state.window, kf)
            state.current_kf = kf
            state.kf_poses[kf.id] = kf.pose
            state.rel_to_kf = Pose.identity()
            state.velocity = Pose.identity()
            track_log[i] = (kf.id, Pose.identity())
            continue

        rel = tracking.pose
        state.velocity = rel @ state.rel_to_kf.inverse()
        state.rel_to_kf = rel
        state.last_tracking = tracking
        track_log[i] = (state.current_kf.id, rel)

        needs_kf = (
            tracking.mean_displacement > config.kf_displacement
            or tracking.inlier_fraction < config.kf_min_inliers
        )
        if needs_kf and i < n - 1:
            pose_w = rel @ state.current_kf.pose
            new_kf = _make_keyframe(state, source, i, pyr, pose_w, rel=rel, rng=rng)
            new_kf.tracking_sigma_r2 = max(tracking.residual_variance, 1e-6)
            records = _associate_new_keyframe(state, new_kf, tracking)
            prev_kf = state.current_kf
            add_keyframe(state.window, new_kf, records)
            _refine_depths(state, records)
            if len(state.window.keyframes) >= 2 and len(state.window.observations) >= 10:
                local_ba(
                    state.window,
                    config.ba,
                    reassociate=_reassociation_callback(state),
                    k_m=config.assoc.k_match_update,
                )
            for kf in state.window.keyframes:
                state.kf_poses[kf.id] = kf.pose
            state.current_kf = new_kf
            # retracking baseline: the new keyframe was created at this frame
            state.rel_to_kf = Pose.identity()
            track_log[i] = (new_kf.id, Pose.identity())

    elapsed = time.perf_counter() - t_start
    timestamps = np.asarray(source.timestamps[:n], dtype=float)
    # per frame: relative pose composed onto the final optimized keyframe pose
    poses = [track_log[i][1] @ state.kf_poses[track_log[i][0]] for i in range(n)]
    estimated = Trajectory(poses=poses, timestamps=timestamps)

    fps = n / elapsed if elapsed > 0 else 0.0
    if source.has_ground_truth():
        truth = Trajectory(poses=[source.gt_pose(i) for i in range(n)], timestamps=timestamps)
        ate_val = ate(estimated, truth, config.ate_scale_interval)
        drift, drift_failed = rpe_drift(estimated, truth, config.rpe_segment)
        per_frame = np.linalg.norm(estimated.positions() - truth.positions(), axis=1)
        failed = drift_failed or state.failures > 0
        report = MetricReport(
            ate_rmse=ate_val,
            rpe_drift_cm_per_m=drift,
            failure_rate=1.0 if failed else 0.0,
            per_frame_errors=per_frame,
            n_tracking_failures=state.failures,
            frames=n,
            fps=fps,
        )
    else:
        report = MetricReport(
            ate_rmse=float("nan"),
            rpe_drift_cm_per_m=float("nan"),
            failure_rate=1.0 if state.failures > 0 else 0.0,
            per_frame_errors=np.zeros(n),
            n_tracking_failures=state.failures,
            frames=n,
            fps=fps,
        )
    info = {
        "keyframes": state.kf_counter,
        "window": state.window,
        "elapsed": elapsed,
    }
    return report, estimated, info
