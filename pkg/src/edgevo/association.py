"""Edge-guided data association.

For each host point projected into a new keyframe: take the nearest edge
pixel as the coarse match, bound the ambiguity with the probabilistic
search radius, walk the edge chain within that radius, score candidates by
gradient-magnitude template cost with an affine pre-warp, gate the best
match by its AML confidence (growing the patch when ambiguous), and fall
back to the edge-alignment match with depth conditioning when the
photometric match stays ambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import InverseDepthPoint, project_points, projection_jacobians_batch
from .imageproc import bilinear
from .keyframe import Keyframe, PointState
from .tracker import TrackingResult
from .uncertainty import (
    DegenerateGeometryError,
    EdgeGeometry,
    eigen_decompose,
    epipolar_direction,
    depth_confidence,
    rot90,
    search_budget,
    sigma_mu,
    sigma_parallel,
)

EDGE_ALIGNMENT = "edge-alignment"
TEMPLATE_MATCH = "template-match"

_NEIGHBORS = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]


@dataclass(frozen=True, eq=False)
class MatchCandidate:
    pixel: np.ndarray  # integer edge pixel (u, v)
    cost: float
    arc_offset: int  # signed steps along the edge chain from the search center


@dataclass(eq=False)
class MatchRecord:
    host_point: int
    target_pixel: np.ndarray
    search_radius: float
    match_confidence: float
    depth_confidence: float
    depth_fixed: bool
    patch_size: int
    source: str  # EDGE_ALIGNMENT or TEMPLATE_MATCH
    gradient_dir: np.ndarray  # target edge normal g at the matched pixel
    host_pixel: np.ndarray = None  # host-frame pixel of the matched point
    host_kf: int = -1
    target_kf: int = -1
    weight: float = 1.0  # 1 / sigma_r^2 of the host's tracking

    def __post_init__(self):
        self.target_pixel = np.asarray(self.target_pixel, dtype=float).reshape(2)
        self.gradient_dir = np.asarray(self.gradient_dir, dtype=float).reshape(2)
        if self.host_pixel is not None:
            self.host_pixel = np.asarray(self.host_pixel, dtype=float).reshape(2)


@dataclass(frozen=True)
class AssociationConfig:
    k_p: float = 1.0
    k_mu: float = 1.0
    patch_size_init: int = 5
    tau_patch: int = 13  # patch size limit (tau_S)
    tau_match: float = 10.0  # AML confidence threshold (tau_m)
    tau_radius: float = 2.0  # small-search-length threshold (tau_lambda), px
    tau_depth: float = 0.5  # depth confidence threshold (tau_d), 1/px
    k_match_update: float = 0.5  # update ratio k_m
    nn_gate_floor: float = 2.0  # px; integer-grid NN can never be closer
    representation: str = "gradient-magnitude"  # or "intensity"
    conditioning_enabled: bool = True  # ablation flag: False accepts every best match

    def __post_init__(self):
        if self.patch_size_init % 2 == 0 or self.tau_patch % 2 == 0:
            raise ValueError("patch sizes must be odd")
        if not (0.0 < self.k_match_update <= 1.0):
            raise ValueError("k_match_update must be in (0, 1]")
        if min(self.k_p, self.k_mu, self.tau_match, self.tau_radius, self.tau_depth) < 0:
            raise ValueError("association thresholds must be non-negative")


def grow_search_chain(edge_map, center, radius):
    """Ordered 8-connected edge chain around `center`, both directions.

    Each arm stops at the arc-length radius, at a dead end or gap, or at a
    branch junction (a pixel with more than two edge neighbors). Returns a
    list of (pixel (u,v) int array, signed step offset) sorted by offset.
    """
    mask = edge_map.mask
    h, w = mask.shape
    cu, cv = int(round(center[0])), int(round(center[1]))
    if not (0 <= cu < w and 0 <= cv < h) or not mask[cv, cu]:
        raise ValueError(f"search center ({cu}, {cv}) is not an edge pixel")

    def neighbors(u, v):
        out = []
        for du, dv in _NEIGHBORS:
            uu, vv = u + du, v + dv
            if 0 <= uu < w and 0 <= vv < h and mask[vv, uu]:
                out.append((uu, vv))
        return out

    chain = [(np.array([cu, cv]), 0)]
    center_nbrs = neighbors(cu, cv)
    if len(center_nbrs) > 2:
        return chain  # center itself is a junction
    visited = {(cu, cv)}
    for direction, start in zip((1, -1), center_nbrs):
        arc = 0.0
        step = 0
        prev = (cu, cv)
        cur = start
        prev_dir = (cur[0] - prev[0], cur[1] - prev[1])
        while True:
            arc += np.hypot(cur[0] - prev[0], cur[1] - prev[1])
            if arc > radius:
                break
            step += 1
            visited.add(cur)
            chain.append((np.array(cur), direction * step))
            nbrs = [n for n in neighbors(*cur) if n not in visited and n != prev]
            if len(neighbors(*cur)) > 2:
                break  # junction
            if not nbrs:
                break  # dead end or gap
            # prefer the straightest continuation, ties toward smaller index
            nbrs.sort(key=lambda n: (-( (n[0] - cur[0]) * prev_dir[0] + (n[1] - cur[1]) * prev_dir[1] ), n[1] * w + n[0]))
            nxt = nbrs[0]
            prev_dir = (nxt[0] - cur[0], nxt[1] - cur[1])
            prev, cur = cur, nxt
    chain.sort(key=lambda c: c[1])
    return chain


def template_cost(host_patch, target_patch):
    """Mean squared difference between two equally sized patches.

    Patches containing out-of-bounds samples (NaN) get an infinite cost.
    """
    a = np.asarray(host_patch, dtype=float)
    b = np.asarray(target_patch, dtype=float)
    if a.shape != b.shape:
        raise ValueError("patch shapes differ")
    d = a - b
    if not np.all(np.isfinite(d)):
        return np.inf
    return float(np.mean(d**2))


def extract_patch(field, center, size, warp=None):
    """size x size bilinear patch around center; warp maps grid offsets."""
    half = (size - 1) // 2
    dv, du = np.mgrid[-half : half + 1, -half : half + 1]
    offsets = np.stack([du.ravel(), dv.ravel()], axis=-1).astype(float)
    if warp is not None:
        offsets = offsets @ warp.T
    pts = np.asarray(center, dtype=float) + offsets
    return bilinear(field, pts).reshape(size, size)


def aml_confidence(costs, best=None):
    """Attainable-maximum-likelihood confidence: 1 / sum((c - c*)^2).

    A flat cost profile (all candidates equal to the best) has no
    discrimination and returns 0.
    """
    arr = np.asarray([c for c in costs if np.isfinite(c)], dtype=float)
    if arr.size == 0:
        raise ValueError("no finite costs")
    c_star = float(arr.min()) if best is None else float(best)
    denom = float(np.sum((arr - c_star) ** 2))
    if denom == 0.0:
        return 0.0
    return 1.0 / denom


def patch_warp(point, pose, intrinsics, patch_half):
    """Affine approximation of the host->target patch warp, from projecting
    the four patch corners through a fronto-parallel plane at the point's
    depth. Returns the 2x2 matrix mapping host offsets to target offsets."""
    corners = np.array(
        [
            [-patch_half, -patch_half],
            [patch_half, -patch_half],
            [-patch_half, patch_half],
            [patch_half, patch_half],
        ],
        dtype=float,
    )
    pts = point.pixel + corners
    d = np.full(4, point.inv_depth)
    uv, ok = project_points(pts, d, intrinsics, pose, check_bounds=False)
    center_uv, ok_c = project_points(point.pixel, point.inv_depth, intrinsics, pose, check_bounds=False)
    if not (ok.all() and ok_c[0]):
        return np.eye(2)
    rel = uv - center_uv[0]
    # least-squares 2x2 fit: rel ~= A @ corners
    A, *_ = np.linalg.lstsq(corners, rel, rcond=None)
    A = A.T
    if abs(np.linalg.det(A)) < 1e-6:
        return np.eye(2)
    return A


def match_update_check(residual, g_perp, lambda_max, k_m):
    """Eq.-style update condition: |<r, g_perp>| > k_m * lambda_max."""
    r = np.asarray(residual, dtype=float).reshape(2)
    gp = np.asarray(g_perp, dtype=float).reshape(2)
    return bool(abs(float(r @ gp)) > k_m * lambda_max)


def associate(host_kf: Keyframe, target_kf: Keyframe, tracking: TrackingResult, config: AssociationConfig, point_ids=None):
    """Match host keyframe points into a target keyframe.

    tracking carries the host->target pose with its covariance (from the
    alignment front-end). Returns a list of MatchRecord; points that project
    out of bounds or have no nearby target edge are dropped. point_ids
    restricts the work to a subset of host points (re-association).
    """
    if tracking.failed:
        raise ValueError("cannot associate from a failed tracking result")
    K = host_kf.intrinsics
    rel = tracking.pose
    level0 = target_kf.pyramid.levels[0]
    edges = level0.edges
    if edges.edge_count() == 0:
        raise ValueError("target keyframe has no edges")
    if config.representation == "gradient-magnitude":
        field_host = host_kf.pyramid.levels[0].gradients.magnitude
        field_target = level0.gradients.magnitude
    elif config.representation == "intensity":
        field_host = host_kf.pyramid.levels[0].image
        field_target = level0.image
    else:
        raise ValueError(f"unknown representation {config.representation!r}")

    points = host_kf.usable_points()
    if point_ids is not None:
        wanted = set(point_ids)
        points = [p for p in points if p.id in wanted]
    if not points:
        return []
    pixels = np.array([p.pixel for p in points])
    depths = np.array([p.inv_depth for p in points])
    proj, valid = project_points(pixels, depths, K, rel)
    J_xi, _, _ = projection_jacobians_batch(pixels, depths, K, rel)
    h, w = edges.mask.shape

    records = []
    for i, point in enumerate(points):
        if not valid[i]:
            continue
        ip_u = int(round(proj[i, 0]))
        ip_v = int(round(proj[i, 1]))
        nn_dist = edges.dist[ip_v, ip_u]
        center = edges.nnf[ip_v, ip_u]
        g = edges.gradient_dir[center[1], center[0]]

        # search radius from pose and depth uncertainty
        sigma_p = J_xi[i] @ tracking.pose_covariance @ J_xi[i].T
        eig = eigen_decompose(0.5 * (sigma_p + sigma_p.T))
        idp = InverseDepthPoint(point.pixel, point.inv_depth, point.inv_depth_sigma)
        try:
            l_dir = epipolar_direction(rel, K, point.pixel)
            geom = EdgeGeometry.from_directions(proj[i], g, l_dir)
            s_mu = sigma_mu(idp, rel, K)
            c_d = depth_confidence(geom, sigma_parallel(eig, geom.g))
        except DegenerateGeometryError:
            # zero baseline: no depth-driven search term, depth unobservable
            g_unit = g / np.linalg.norm(g)
            geom = EdgeGeometry(p=proj[i], g=g_unit, g_perp=rot90(g_unit), l=rot90(g_unit), theta=np.pi / 2)
            s_mu = 0.0
            c_d = 0.0
        budget = search_budget(geom, eig, s_mu, config.k_p, config.k_mu)
        radius = budget.radius

        if nn_dist > max(2.0 * radius, config.nn_gate_floor):
            continue  # no edge near the prediction: drop for this keyframe

        chain = grow_search_chain(edges, center, radius)

        # template matching with patch-size adaption
        patch = config.patch_size_init
        best_idx, c_m, costs = _score_chain(
            field_host, field_target, point, rel, K, chain, patch, config
        )
        if radius > config.tau_radius:
            while c_m < config.tau_match and patch < config.tau_patch:
                patch += 2
                best_idx, c_m, costs = _score_chain(
                    field_host, field_target, point, rel, K, chain, patch, config
                )
        if best_idx is None:
            continue  # every candidate (center included) was unsampleable

        trusted = radius <= config.tau_radius
        ambiguous = c_m < config.tau_match
        if config.conditioning_enabled and not trusted and ambiguous:
            # discard the photometric match; keep the edge-alignment match
            target_pixel = center.astype(float)
            source = EDGE_ALIGNMENT
            depth_fixed = c_d < config.tau_depth
        else:
            target_pixel = chain[best_idx][0].astype(float)
            source = TEMPLATE_MATCH
            depth_fixed = False
        g_match = edges.gradient_dir[int(target_pixel[1]), int(target_pixel[0])]
        records.append(
            MatchRecord(
                host_point=point.id,
                target_pixel=target_pixel,
                search_radius=radius,
                match_confidence=c_m,
                depth_confidence=c_d,
                depth_fixed=depth_fixed,
                patch_size=patch,
                source=source,
                gradient_dir=g_match,
                host_pixel=point.pixel,
                host_kf=host_kf.id,
                target_kf=target_kf.id,
                weight=1.0 / max(tracking.residual_variance, 1e-4),
            )
        )
    return records


def _score_chain(field_host, field_target, point, rel, intrinsics, chain, patch, config):
    """Costs for every chain candidate at one patch size.

    Returns (best index or None, aml confidence, costs). Ties break toward
    the smaller |arc_offset|.
    """
    half = (patch - 1) // 2
    A = patch_warp(point, rel, intrinsics, half)
    try:
        A_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        A_inv = np.eye(2)
    host_patch = extract_patch(field_host, point.pixel, patch, warp=A_inv)
    if not np.all(np.isfinite(host_patch)):
        return None, 0.0, []
    costs = []
    for pix, _ in chain:
        target_patch = extract_patch(field_target, pix.astype(float), patch)
        costs.append(template_cost(host_patch, target_patch))
    finite = [c for c in costs if np.isfinite(c)]
    if not finite:
        return None, 0.0, costs
    best_cost = min(finite)
    order = sorted(range(len(chain)), key=lambda j: (costs[j] != best_cost, abs(chain[j][1])))
    best_idx = order[0]
    return best_idx, aml_confidence(costs, best_cost), costs
