"""Sliding-window local bundle adjustment.

Jointly refines in-window keyframe poses and hosted inverse depths by
minimizing robust reprojection error against the data-association matches,
with a dense Schur complement over poses (depths are scalars, so the
landmark block is diagonal). Between solver rounds, matches whose residual
slides too far along the edge are flagged for re-association.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .association import MatchRecord, match_update_check
from .geometry import Pose, exp_map, projection_jacobians_batch
from .imageproc import bilinear, compute_gradients
from .keyframe import Keyframe, PointState
from .uncertainty import rot90

_PHOTO_GAMMA = 0.1  # Huber width for gradient-magnitude residuals


class RankDeficientError(RuntimeError):
    """The reduced normal equations are singular after gauge fixing."""

    def __init__(self, message, directions):
        super().__init__(message)
        self.directions = directions


class TriangulationError(ValueError):
    """Unobservable triangulation geometry."""


@dataclass(frozen=True)
class BaConfig:
    window_size: int = 7
    max_outer: int = 3  # solver rounds interleaved with match updates
    max_inner: int = 15  # LM iterations per round
    huber_gamma: float = 1.0  # px on the reprojection residual norm
    damping_init: float = 1e-4
    damping_scale: float = 5.0
    conv_delta: float = 1e-6
    photometric_weight: float = 0.0  # optional gradient-magnitude term

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window size must be at least 2")


@dataclass(eq=False)
class Window:
    max_size: int = 7
    keyframes: list = field(default_factory=list)
    observations: dict = field(default_factory=dict)  # (host, point, target) -> MatchRecord

    def keyframe(self, kf_id) -> Keyframe:
        for kf in self.keyframes:
            if kf.id == kf_id:
                return kf
        raise KeyError(f"keyframe {kf_id} not in window")

    def ids(self):
        return [kf.id for kf in self.keyframes]


@dataclass
class BaReport:
    initial_cost: float
    final_cost: float
    rounds: int
    iterations: int
    converged: bool
    reassociated: list = field(default_factory=list)
    pose_var_ids: list = field(default_factory=list)
    depth_var_keys: list = field(default_factory=list)


def add_keyframe(window: Window, keyframe: Keyframe, records=()):
    """Append a keyframe and its association records; evict the oldest
    keyframe (with every observation involving it) beyond capacity."""
    if keyframe.id in window.ids():
        raise ValueError(f"duplicate keyframe id {keyframe.id}")
    window.keyframes.append(keyframe)
    for rec in records:
        window.observations[(rec.host_kf, rec.host_point, rec.target_kf)] = rec
        host = window.keyframe(rec.host_kf)
        pt = host.point(rec.host_point)
        if pt.state != PointState.DROPPED:
            pt.state = PointState.DEPTH_FIXED if rec.depth_fixed else PointState.ACTIVE
    evicted = None
    if len(window.keyframes) > window.max_size:
        evicted = window.keyframes.pop(0)
        window.observations = {
            key: rec
            for key, rec in window.observations.items()
            if key[0] != evicted.id and key[2] != evicted.id
        }
    return evicted


def reprojection_terms(host_pixels, inv_depths, intrinsics, host_pose: Pose, target_pose: Pose, target_pixels, with_jacobians=True):
    """Residuals and Jacobians of p_proj - p_target for a batch sharing one
    keyframe pair.

    Returns (r (N,2), J_host (N,2,6), J_target (N,2,6), J_d (N,2), valid).
    Pose Jacobians use the left perturbation exp(delta) @ pose on each
    world-to-camera keyframe pose, (translation, rotation) ordering. With
    with_jacobians=False the three Jacobians are None.
    """
    rel = target_pose @ host_pose.inverse()
    px = np.atleast_2d(np.asarray(host_pixels, dtype=float))
    d = np.asarray(inv_depths, dtype=float).reshape(-1)
    n = len(d)
    X_h = intrinsics.backproject(px, d)
    X_t = rel.apply(X_h)
    z = X_t[:, 2]
    valid = z > 1e-12
    zs = np.where(valid, z, 1.0)
    uv = np.empty((n, 2))
    uv[:, 0] = intrinsics.fx * X_t[:, 0] / zs + intrinsics.cx
    uv[:, 1] = intrinsics.fy * X_t[:, 1] / zs + intrinsics.cy
    r = uv - np.atleast_2d(np.asarray(target_pixels, dtype=float))
    if not with_jacobians:
        return r, None, None, None, valid

    iz = 1.0 / zs
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = intrinsics.fx * iz
    dpi[:, 0, 2] = -intrinsics.fx * X_t[:, 0] * iz**2
    dpi[:, 1, 1] = intrinsics.fy * iz
    dpi[:, 1, 2] = -intrinsics.fy * X_t[:, 1] * iz**2

    def skew_batch(v):
        s = np.zeros((len(v), 3, 3))
        s[:, 0, 1] = -v[:, 2]
        s[:, 0, 2] = v[:, 1]
        s[:, 1, 0] = v[:, 2]
        s[:, 1, 2] = -v[:, 0]
        s[:, 2, 0] = -v[:, 1]
        s[:, 2, 1] = v[:, 0]
        return s

    # target pose: X_t' = exp(delta_t) @ T_t @ P_w  =>  dX_t = drho + dw x X_t
    J_target = np.zeros((n, 2, 6))
    J_target[:, :, :3] = dpi
    J_target[:, :, 3:] = -np.einsum("nij,njk->nik", dpi, skew_batch(X_t))
    # host pose: T_h^-1 <- T_h^-1 exp(-delta_h): dX_t = -R_th (drho + dw x X_h)
    R_th = rel.R
    dpiR = np.einsum("nij,jk->nik", dpi, R_th)
    J_host = np.zeros((n, 2, 6))
    J_host[:, :, :3] = -dpiR
    J_host[:, :, 3:] = np.einsum("nij,njk->nik", dpiR, skew_batch(X_h))
    # depth: X_h = Xbar / d  =>  dX_t/dd = -R_th X_h / d
    dX = -(X_h / d[:, None]) @ R_th.T
    J_d = np.einsum("nij,nj->ni", dpi, dX)
    return r, J_host, J_target, J_d, valid


def _huber_weight_norm(rnorm, gamma):
    return np.where(rnorm <= gamma, 1.0, gamma / np.maximum(rnorm, 1e-300))


def _huber_cost_norm(rnorm, gamma):
    return np.sum(np.where(rnorm <= gamma, 0.5 * rnorm**2, gamma * (rnorm - 0.5 * gamma)))


def _group_observations(window: Window):
    """Usable observations grouped per (host, target) keyframe pair, with
    the per-group arrays the vectorized solver needs."""
    raw = {}
    for (host_id, point_id, target_id), rec in sorted(window.observations.items()):
        try:
            host = window.keyframe(host_id)
            target = window.keyframe(target_id)
        except KeyError:
            continue
        pt = host.point(point_id)
        if pt.state == PointState.DROPPED or pt.inv_depth <= 0:
            continue
        g = raw.setdefault(
            (host_id, target_id),
            {"host": host, "target": target, "points": [], "recs": [], "keys": []},
        )
        g["points"].append(pt)
        g["recs"].append(rec)
        g["keys"].append((host_id, point_id, target_id))
    groups = []
    for key in sorted(raw):
        g = raw[key]
        g["px"] = np.array([p.pixel for p in g["points"]])
        g["tpix"] = np.array([r.target_pixel for r in g["recs"]])
        g["w"] = np.array([r.weight for r in g["recs"]])
        g["radii"] = np.array([r.search_radius for r in g["recs"]])
        g["gperp"] = np.array([rot90(r.gradient_dir) for r in g["recs"]])
        groups.append(g)
    return groups


def flag_reassociations(window: Window, k_m: float):
    """Keys of observations whose edge-tangent residual component exceeds
    k_m times their search radius at the current estimates."""
    flagged = []
    for g in _group_observations(window):
        d = np.array([p.inv_depth for p in g["points"]])
        r, _, _, _, valid = reprojection_terms(
            g["px"], d, g["host"].intrinsics, g["host"].pose, g["target"].pose, g["tpix"], with_jacobians=False
        )
        e = np.abs(np.einsum("ni,ni->n", r, g["gperp"]))
        bad = (~valid) | (e > k_m * g["radii"])
        flagged.extend(g["keys"][i] for i in np.nonzero(bad)[0])
    return flagged


def local_ba(window: Window, config: BaConfig, reassociate=None, k_m: float = 0.5) -> BaReport:
    """Levenberg-Marquardt refinement of in-window poses and inverse depths.

    The oldest keyframe's pose is the gauge anchor; the median-inverse-depth
    variable point it hosts pins scale. Between solver rounds the match
    update rule (ratio k_m) flags sliding records, which
    `reassociate(window, keys)` (when given) may replace: it returns
    {key: MatchRecord or None}.
    """
    if len(window.keyframes) < 2:
        raise ValueError("local BA needs at least two keyframes")
    if len(window.observations) < 10:
        raise ValueError(f"local BA needs at least 10 observations, have {len(window.observations)}")

    total_iters = 0
    reassociated = []
    report = None
    initial_cost = None
    for round_idx in range(config.max_outer):
        cost0, cost1, iters, converged, pose_ids, depth_keys = _lm_rounds(window, config, check_rank=(round_idx == 0))
        if initial_cost is None:
            initial_cost = cost0
        total_iters += iters
        flagged = flag_reassociations(window, k_m=k_m)
        report = BaReport(
            initial_cost=initial_cost,
            final_cost=cost1,
            rounds=round_idx + 1,
            iterations=total_iters,
            converged=converged,
            reassociated=list(reassociated),
            pose_var_ids=pose_ids,
            depth_var_keys=depth_keys,
        )
        if not flagged or reassociate is None:
            break
        replacements = reassociate(window, flagged)
        changed = False
        for key in flagged:
            new_rec = replacements.get(key)
            if new_rec is None:
                if key in window.observations:
                    del window.observations[key]
                    changed = True
            else:
                window.observations[key] = new_rec
                host = window.keyframe(key[0])
                pt = host.point(key[1])
                if pt.state != PointState.DROPPED:
                    pt.state = PointState.DEPTH_FIXED if new_rec.depth_fixed else PointState.ACTIVE
                changed = True
                reassociated.append(key)
        if not changed:
            break
    return report


def _lm_rounds(window: Window, config: BaConfig, check_rank: bool):
    kfs = window.keyframes
    K = kfs[0].intrinsics
    groups = _group_observations(window)
    n_obs = sum(len(g["points"]) for g in groups)
    if n_obs < 10:
        raise ValueError("fewer than 10 usable observations")

    gauge_id = kfs[0].id
    pose_ids = [kf.id for kf in kfs if kf.id != gauge_id]
    pose_index = {kf_id: i for i, kf_id in enumerate(pose_ids)}

    # depth variables: active points with observations, minus the scale anchor
    obs_points = {}
    for g in groups:
        for pt in g["points"]:
            if pt.state == PointState.ACTIVE:
                obs_points.setdefault((g["host"].id, pt.id), pt)
    anchor = None
    for kf in kfs:  # oldest first
        hosted = [(key, p) for key, p in obs_points.items() if key[0] == kf.id]
        if hosted:
            hosted.sort(key=lambda kp: kp[1].inv_depth)
            anchor = hosted[len(hosted) // 2][0]
            break
    depth_keys = [key for key in sorted(obs_points) if key != anchor]
    depth_index = {key: i for i, key in enumerate(depth_keys)}

    n_pose = len(pose_ids)
    n_depth = len(depth_keys)

    for g in groups:
        g["bi"] = pose_index.get(g["host"].id, -1)
        g["bj"] = pose_index.get(g["target"].id, -1)
        g["cols"] = np.array(
            [
                depth_index.get((g["host"].id, pt.id), -1) if pt.state == PointState.ACTIVE else -1
                for pt in g["points"]
            ],
            dtype=int,
        )

    photo = config.photometric_weight
    photo_cache = {}

    def photo_fields(kf):
        if kf.id not in photo_cache:
            mag = kf.pyramid.levels[0].gradients.magnitude
            grad = compute_gradients(mag)
            photo_cache[kf.id] = (mag, grad.gx, grad.gy)
        return photo_cache[kf.id]

    gamma = config.huber_gamma
    miss_cost = float(_huber_cost_norm(np.array([10 * gamma]), gamma))

    def group_terms(g, with_jacobians):
        d = np.array([p.inv_depth for p in g["points"]])
        return reprojection_terms(
            g["px"], d, K, g["host"].pose, g["target"].pose, g["tpix"], with_jacobians
        ), d

    def photo_terms(g, r, valid):
        mag_h, _, _ = photo_fields(g["host"])
        mag_t, gx_t, gy_t = photo_fields(g["target"])
        uv = r + g["tpix"]
        f_h = bilinear(mag_h, g["px"])
        f_t = bilinear(mag_t, uv)
        r_ph = f_t - f_h
        ok = valid & np.isfinite(r_ph)
        dF = np.stack([bilinear(gx_t, uv), bilinear(gy_t, uv)], axis=-1)
        return np.where(ok, r_ph, 0.0), np.nan_to_num(dF), ok

    def current_cost():
        c = 0.0
        for g in groups:
            (r, _, _, _, valid), _ = group_terms(g, False)
            rn = np.linalg.norm(r, axis=1)
            c += float(np.sum(g["w"][valid] * np.where(rn[valid] <= gamma, 0.5 * rn[valid] ** 2, gamma * (rn[valid] - 0.5 * gamma))))
            c += miss_cost * float(g["w"][~valid].sum())
            if photo > 0:
                r_ph, _, ok = photo_terms(g, r, valid)
                a = np.abs(r_ph[ok])
                c += photo * float(
                    np.sum(g["w"][ok] * np.where(a <= _PHOTO_GAMMA, 0.5 * a**2, _PHOTO_GAMMA * (a - 0.5 * _PHOTO_GAMMA)))
                )
        return c

    def assemble():
        H_pp = np.zeros((6 * n_pose, 6 * n_pose))
        H_pl = np.zeros((6 * n_pose, n_depth))
        H_ll = np.zeros(n_depth)
        b_p = np.zeros(6 * n_pose)
        b_l = np.zeros(n_depth)
        cost = 0.0

        def accumulate(g, w_row, r_rows, Jh, Jt, Jd):
            # r_rows (N,R), Jh/Jt (N,R,6), Jd (N,R); R = residual rows per obs
            nonlocal cost
            bi, bj = g["bi"], g["bj"]
            cols = g["cols"]
            m = cols >= 0
            blocks = [(bi, Jh), (bj, Jt)]
            for b, J in blocks:
                if b < 0:
                    continue
                s = slice(6 * b, 6 * b + 6)
                b_p[s] -= np.einsum("n,nri,nr->i", w_row, J, r_rows)
                H_pp[s, s] += np.einsum("n,nri,nrj->ij", w_row, J, J)
            if bi >= 0 and bj >= 0:
                si = slice(6 * bi, 6 * bi + 6)
                sj = slice(6 * bj, 6 * bj + 6)
                Hij = np.einsum("n,nri,nrj->ij", w_row, Jh, Jt)
                H_pp[si, sj] += Hij
                H_pp[sj, si] += Hij.T
            if m.any():
                # depth columns are unique within a pair group, so plain
                # fancy-index accumulation is safe
                wm = w_row[m]
                H_ll[cols[m]] += np.einsum("n,nr,nr->n", wm, Jd[m], Jd[m])
                b_l[cols[m]] -= np.einsum("n,nr,nr->n", wm, Jd[m], r_rows[m])
                for b, J in blocks:
                    if b < 0:
                        continue
                    s = slice(6 * b, 6 * b + 6)
                    v = np.einsum("n,nri,nr->ni", wm, J[m], Jd[m])
                    H_pl[s, cols[m]] += v.T
            return

        for g in groups:
            (r, J_h, J_t, J_d, valid), _ = group_terms(g, True)
            rn = np.linalg.norm(r, axis=1)
            w = g["w"] * _huber_weight_norm(rn, gamma) * valid
            cost += float(
                np.sum(g["w"][valid] * np.where(rn[valid] <= gamma, 0.5 * rn[valid] ** 2, gamma * (rn[valid] - 0.5 * gamma)))
            )
            cost += miss_cost * float(g["w"][~valid].sum())
            accumulate(g, w, r, J_h, J_t, J_d)
            if photo > 0:
                r_ph, dF, ok = photo_terms(g, r, valid)
                a = np.abs(r_ph)
                w_ph = photo * g["w"] * _huber_weight_norm(np.maximum(a, 1e-300), _PHOTO_GAMMA) * ok
                cost += photo * float(
                    np.sum(g["w"][ok] * np.where(a[ok] <= _PHOTO_GAMMA, 0.5 * a[ok] ** 2, _PHOTO_GAMMA * (a[ok] - 0.5 * _PHOTO_GAMMA)))
                )
                Jph_h = np.einsum("ni,nij->nj", dF, J_h)[:, None, :]
                Jph_t = np.einsum("ni,nij->nj", dF, J_t)[:, None, :]
                Jph_d = np.einsum("ni,ni->n", dF, J_d)[:, None]
                accumulate(g, w_ph, r_ph[:, None], Jph_h, Jph_t, Jph_d)
        return H_pp, H_pl, H_ll, b_p, b_l, float(cost)

    def rank_check(H_pp, H_pl, H_ll):
        H_ll_safe = np.where(H_ll > 1e-12, H_ll, np.inf)
        S = H_pp - (H_pl / H_ll_safe) @ H_pl.T
        if n_pose == 0:
            return
        ev, evec = np.linalg.eigh(S)
        scale = max(ev.max(), 1e-12)
        deficient = []
        for i in range(len(ev)):
            if ev[i] < 1e-10 * scale:
                v = evec[:, i]
                contrib = [
                    (float(np.linalg.norm(v[6 * j : 6 * j + 6])), pose_ids[j]) for j in range(n_pose)
                ]
                contrib.sort(reverse=True)
                deficient.append(f"eig {ev[i]:.3e}: pose blocks {[c[1] for c in contrib[:3]]}")
        # isolated dead depth columns (invalid projections) contribute zero
        # gradient too and solve to a zero step; only a fully dead landmark
        # block marks true degeneracy (e.g. zero baseline)
        dead_depths = [depth_keys[i] for i in range(n_depth) if H_ll[i] <= 1e-12]
        if n_depth > 0 and len(dead_depths) == n_depth:
            deficient.append(f"unconstrained depths {dead_depths[:5]}")
        if deficient:
            raise RankDeficientError(
                "rank-deficient system after gauge fixing: " + "; ".join(deficient), deficient
            )

    lam = config.damping_init
    cost = current_cost()
    cost_first = cost
    converged = False
    it = 0
    for it in range(1, config.max_inner + 1):
        H_pp, H_pl, H_ll, b_p, b_l, cost = assemble()
        if check_rank and it == 1:
            rank_check(H_pp, H_pl, H_ll)
        stepped = False
        for _ in range(8):
            D_pp = np.diag(H_pp).copy()
            d_ll = H_ll * (1.0 + lam) + lam * 1e-9
            Hd_pp = H_pp + lam * np.diag(D_pp + 1e-9)
            if n_depth:
                ratio = H_pl / d_ll
                S = Hd_pp - ratio @ H_pl.T
                rhs = b_p - ratio @ b_l
            else:
                S = Hd_pp
                rhs = b_p
            try:
                dp = np.linalg.solve(S, rhs) if n_pose else np.zeros(0)
            except np.linalg.LinAlgError:
                lam *= config.damping_scale
                continue
            dl = (b_l - H_pl.T @ dp) / d_ll if n_depth else np.zeros(0)

            saved_poses = {kf.id: kf.pose for kf in kfs}
            saved_depths = {key: window.keyframe(key[0]).point(key[1]).inv_depth for key in depth_keys}
            for kf in kfs:
                if kf.id != gauge_id:
                    i = pose_index[kf.id]
                    kf.pose = exp_map(dp[6 * i : 6 * i + 6]) @ kf.pose
            for key, i in depth_index.items():
                pt = window.keyframe(key[0]).point(key[1])
                pt.inv_depth = max(pt.inv_depth + dl[i], 0.05 * pt.inv_depth)
            new_cost = current_cost()
            if new_cost <= cost + 1e-12:
                lam = max(lam / config.damping_scale, 1e-12)
                stepped = True
                step_norm = np.linalg.norm(np.concatenate([dp, dl])) if (n_pose or n_depth) else 0.0
                cost = new_cost
                break
            # reject: restore and increase damping
            for kf in kfs:
                kf.pose = saved_poses[kf.id]
            for key in depth_keys:
                window.keyframe(key[0]).point(key[1]).inv_depth = saved_depths[key]
            lam *= config.damping_scale
        if not stepped:
            break
        if step_norm < config.conv_delta:
            converged = True
            break
    return cost_first, cost, it, converged, pose_ids, depth_keys


def triangulate_depth(record: MatchRecord, host_pose: Pose, target_pose: Pose, intrinsics):
    """Closed-form inverse depth from a matched pixel pair.

    Solves the two cross-multiplied projection equations for the depth along
    the host ray in least squares, then propagates the record's disparity
    standard deviation (1/C_d) through the depth Jacobian.
    Raises TriangulationError on unobservable geometry.
    """
    if record.host_pixel is None:
        raise ValueError("record carries no host pixel")
    rel = target_pose @ host_pose.inverse()
    t = rel.t
    if np.linalg.norm(t) < 1e-12:
        raise TriangulationError("zero baseline")
    if record.depth_confidence <= 1e-6:
        raise TriangulationError("depth confidence too low: unobservable direction")
    K = intrinsics
    xbar = np.array(
        [
            (record.host_pixel[0] - K.cx) / K.fx,
            (record.host_pixel[1] - K.cy) / K.fy,
            1.0,
        ]
    )
    a = rel.R @ xbar
    u = (record.target_pixel[0] - K.cx) / K.fx
    v = (record.target_pixel[1] - K.cy) / K.fy
    # u (z a3 + t3) = z a1 + t1  (normalized coordinates)
    coeffs = np.array([u * a[2] - a[0], v * a[2] - a[1]])
    rhs = np.array([t[0] - u * t[2], t[1] - v * t[2]])
    denom = coeffs @ coeffs
    if denom < 1e-18:
        raise TriangulationError("degenerate ray pair")
    z = float(coeffs @ rhs / denom)
    if z <= 1e-9:
        raise TriangulationError(f"triangulated depth {z:.3e} behind the camera")
    inv_depth = 1.0 / z
    _, J_d, valid = projection_jacobians_batch(record.host_pixel, inv_depth, K, rel)
    j = np.linalg.norm(J_d[0]) if valid[0] else 0.0
    if j < 1e-9:
        raise TriangulationError("vanishing depth Jacobian")
    sigma_mu_px = 0.0 if np.isinf(record.depth_confidence) else 1.0 / record.depth_confidence
    return inv_depth, sigma_mu_px / j
