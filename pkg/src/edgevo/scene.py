"""Synthetic edge-rich scenes with exact ground truth.

Scenes are textured planar quads (boxes are six quads with border-frame
textures). Rendering ray-casts every pixel against every quad with a
z-buffer, which keeps depth maps and cross-frame correspondences exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose, project_points

_Z_NEAR = 0.05


class RenderError(RuntimeError):
    """Camera intersects scene geometry."""


@dataclass(frozen=True, eq=False)
class Quad:
    """Rectangle origin + s*edge_u + t*edge_v, (s,t) in [0,1]^2, with a
    nearest-sampled albedo texture indexed [t, s]."""

    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    texture: np.ndarray

    def __post_init__(self):
        for name in ("origin", "edge_u", "edge_v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        object.__setattr__(self, "texture", np.asarray(self.texture, dtype=float))
        if abs(self.edge_u @ self.edge_v) > 1e-9:
            raise ValueError("quad edges must be orthogonal")

    def normal(self):
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)


@dataclass(frozen=True)
class Illumination:
    """Per-frame lighting: global gain/bias plus an optional radial glare blob."""

    gain: float = 1.0
    bias: float = 0.0
    glare_center: tuple = None  # (u, v) px
    glare_sigma: float = 30.0
    glare_intensity: float = 0.0

    def apply(self, image):
        out = self.gain * image + self.bias
        if self.glare_center is not None and self.glare_intensity != 0.0:
            h, w = image.shape
            vv, uu = np.mgrid[0:h, 0:w]
            r2 = (uu - self.glare_center[0]) ** 2 + (vv - self.glare_center[1]) ** 2
            out = out + self.glare_intensity * np.exp(-r2 / (2.0 * self.glare_sigma**2))
        return out


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    quads: tuple
    boxes: tuple = ()  # AABBs (min (3,), max (3,)) used for camera containment checks
    background: float = 0.5

    def camera_clear(self, center):
        for lo, hi in self.boxes:
            if np.all(center >= lo) and np.all(center <= hi):
                return False
        return True


# ---------------------------------------------------------------------------
# textures


def checkerboard(n_u, n_v, lo=0.2, hi=0.85):
    uu, vv = np.meshgrid(np.arange(n_u), np.arange(n_v))
    return np.where((uu + vv) % 2 == 0, lo, hi)


def mondrian(n_u, n_v, rng, palette=(0.08, 0.3, 0.52, 0.72, 0.92)):
    """Random block texture: dense edges and corners with strong contrast."""
    tex = rng.choice(palette, size=(n_v, n_u))
    # force neighboring cells apart so every boundary is a detectable edge
    for v in range(n_v):
        for u in range(n_u):
            bad = True
            tries = 0
            while bad and tries < 8:
                bad = False
                if u > 0 and abs(tex[v, u] - tex[v, u - 1]) < 0.15:
                    bad = True
                if v > 0 and abs(tex[v, u] - tex[v - 1, u]) < 0.15:
                    bad = True
                if bad:
                    tex[v, u] = rng.choice(palette)
                    tries += 1
    return tex


def stripes(n=256, period=8, horizontal=True, lo=0.15, hi=0.8, mark_every=0, mark_value=0.5):
    """Stripe texture with optional thin perpendicular marks every
    `mark_every` texels (single-texel wide)."""
    idx = (np.arange(n) // period) % 2
    if horizontal:
        tex = np.where(idx[:, None] == 0, lo, hi) * np.ones((1, n))
    else:
        tex = np.where(idx[None, :] == 0, lo, hi) * np.ones((n, 1))
    tex = np.array(tex)
    if mark_every:
        cols = np.arange(mark_every // 2, n, mark_every)
        if horizontal:
            tex[:, cols] = mark_value
        else:
            tex[cols, :] = mark_value
    return tex


def frame_texture(n=16, border=2, lo=0.1, hi=0.85):
    tex = np.full((n, n), hi)
    tex[border:-border, border:-border] = lo
    return tex


def make_box(center, half_sizes, texture):
    """Axis-aligned box as six framed quads."""
    c = np.asarray(center, dtype=float)
    h = np.asarray(half_sizes, dtype=float)
    quads = []
    for axis in range(3):
        for sign in (-1, 1):
            n = np.zeros(3)
            n[axis] = sign * h[axis]
            a = np.zeros(3)
            a[(axis + 1) % 3] = 2 * h[(axis + 1) % 3]
            b = np.zeros(3)
            b[(axis + 2) % 3] = 2 * h[(axis + 2) % 3]
            origin = c + n - a / 2 - b / 2
            quads.append(Quad(origin=origin, edge_u=a, edge_v=b, texture=texture))
    return quads, (c - h, c + h)


# ---------------------------------------------------------------------------
# rendering


def render_frame(scene, pose: Pose, intrinsics: CameraIntrinsics, illumination=None, noise_sigma=0.0, rng=None):
    """Render one frame. Returns (image in [0,1], depth map with inf background)."""
    K = intrinsics
    h, w = K.height, K.width
    vv, uu = np.mgrid[0:h, 0:w]
    dirs_cam = np.stack(
        [(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu, dtype=float)], axis=-1
    )
    R_cw = pose.R.T
    center = -pose.R.T @ pose.t
    if not scene.camera_clear(center):
        raise RenderError("camera center is inside scene geometry")
    dirs_w = dirs_cam @ R_cw.T

    depth = np.full((h, w), np.inf)
    albedo = np.full((h, w), scene.background)
    for quad in scene.quads:
        n = quad.normal()
        denom = dirs_w @ n
        num = (quad.origin - center) @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            z = num / denom  # camera depth: dirs_cam has unit z component
        hit = np.isfinite(z) & (z > _Z_NEAR)
        if not hit.any():
            if np.isfinite(z).any() and (z[np.isfinite(z)] > 0).any():
                raise RenderError("geometry closer than the near plane")
            continue
        pts = center + z[..., None] * dirs_w
        rel = pts - quad.origin
        lu2 = quad.edge_u @ quad.edge_u
        lv2 = quad.edge_v @ quad.edge_v
        s = (rel @ quad.edge_u) / lu2
        t = (rel @ quad.edge_v) / lv2
        hit &= (s >= 0) & (s <= 1) & (t >= 0) & (t <= 1) & (z < depth)
        if not hit.any():
            continue
        th, tw = quad.texture.shape
        si = np.clip((s[hit] * tw).astype(int), 0, tw - 1)
        ti = np.clip((t[hit] * th).astype(int), 0, th - 1)
        albedo[hit] = quad.texture[ti, si]
        depth[hit] = z[hit]

    image = albedo if illumination is None else illumination.apply(albedo)
    if noise_sigma > 0:
        rng = np.random.default_rng() if rng is None else rng
        image = image + rng.normal(0.0, noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0), depth


@dataclass(eq=False)
class SequenceData:
    """A rendered sequence with exact ground truth."""

    images: list
    depth_maps: list
    poses: list  # world -> camera
    timestamps: np.ndarray
    intrinsics: CameraIntrinsics
    name: str = "synthetic"

    def __len__(self):
        return len(self.images)

    def frame(self, i):
        return self.images[i]

    def gt_pose(self, i):
        return self.poses[i]

    def has_ground_truth(self):
        return True

    def gt_inv_depth(self, i, pixels):
        """Exact inverse depth at rounded pixel positions; valid where finite."""
        dm = self.depth_maps[i]
        ip = np.rint(np.atleast_2d(pixels)).astype(int)
        ip[:, 0] = np.clip(ip[:, 0], 0, dm.shape[1] - 1)
        ip[:, 1] = np.clip(ip[:, 1], 0, dm.shape[0] - 1)
        z = dm[ip[:, 1], ip[:, 0]]
        valid = np.isfinite(z) & (z > 0)
        inv = np.where(valid, 1.0 / np.where(valid, z, 1.0), 0.0)
        return inv, valid

    def gt_correspondence(self, i, j, pixels):
        """Project frame-i pixels into frame j with exact pose and depth.

        Returns (pixels_j (N,2), visible (N,)) where visible requires a valid
        projection and an unoccluded depth within 2% in frame j.
        """
        inv, valid = self.gt_inv_depth(i, pixels)
        rel = self.poses[j] @ self.poses[i].inverse()
        safe = np.where(valid, inv, 1.0)
        uv, ok = project_points(np.atleast_2d(pixels), safe, self.intrinsics, rel)
        visible = valid & ok
        # occlusion: compare projected depth against frame j's depth map
        X = self.intrinsics.backproject(np.atleast_2d(pixels), safe)
        z_j = rel.apply(X)[:, 2]
        dm = self.depth_maps[j]
        ip = np.rint(uv).astype(int)
        ip[:, 0] = np.clip(ip[:, 0], 0, dm.shape[1] - 1)
        ip[:, 1] = np.clip(ip[:, 1], 0, dm.shape[0] - 1)
        z_map = dm[ip[:, 1], ip[:, 0]]
        with np.errstate(invalid="ignore"):
            visible &= np.isfinite(z_map) & (np.abs(z_map - z_j) <= 0.02 * np.maximum(z_j, 1e-9))
        return uv, visible


def render_sequence(scene, poses, intrinsics, illumination_schedule=None, noise_sigma=0.0, seed=0, timestep=0.1, name="synthetic"):
    """Render a trajectory. illumination_schedule maps frame index ->
    Illumination (or None for flat lighting)."""
    rng = np.random.default_rng(seed)
    images, depths = [], []
    for i, pose in enumerate(poses):
        illum = illumination_schedule(i) if illumination_schedule is not None else None
        img, dep = render_frame(scene, pose, intrinsics, illum, noise_sigma, rng)
        images.append(img)
        depths.append(dep)
    ts = np.arange(len(poses)) * timestep
    return SequenceData(
        images=images,
        depth_maps=depths,
        poses=list(poses),
        timestamps=ts,
        intrinsics=intrinsics,
        name=name,
    )


def subsample(sequence: SequenceData, rate: int) -> SequenceData:
    """Keep every rate-th frame, re-indexing ground truth."""
    if rate < 1:
        raise ValueError("rate must be >= 1")
    sl = slice(None, None, rate)
    return SequenceData(
        images=sequence.images[sl],
        depth_maps=sequence.depth_maps[sl],
        poses=sequence.poses[sl],
        timestamps=sequence.timestamps[sl],
        intrinsics=sequence.intrinsics,
        name=f"{sequence.name}@r{rate}",
    )


# ---------------------------------------------------------------------------
# presets


def _look_pose(center, yaw=0.0, pitch=0.0):
    """World->camera pose for a camera at `center` looking roughly +z."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    R_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    R_x = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    R_wc = R_y @ R_x  # camera axes in world coordinates
    R = R_wc.T
    return Pose(R, -R @ np.asarray(center, dtype=float))


def corridor_scene(seed=0, with_boxes=True):
    """A textured corridor: two side walls, floor, ceiling, and an end cap."""
    rng = np.random.default_rng(seed)
    length, half_w, half_h = 30.0, 1.5, 1.2
    cell = 0.3
    n_z = int(length / cell)
    quads = [
        Quad([-half_w, -half_h, 0], [0, 0, length], [0, 2 * half_h, 0], mondrian(n_z, 8, rng)),
        Quad([half_w, -half_h, 0], [0, 0, length], [0, 2 * half_h, 0], mondrian(n_z, 8, rng)),
        Quad([-half_w, half_h, 0], [2 * half_w, 0, 0], [0, 0, length], mondrian(10, n_z, rng)),
        Quad([-half_w, -half_h, 0], [2 * half_w, 0, 0], [0, 0, length], mondrian(10, n_z, rng)),
        Quad([-half_w, -half_h, length], [2 * half_w, 0, 0], [0, 2 * half_h, 0], mondrian(10, 8, rng)),
    ]
    boxes = []
    if with_boxes:
        for bc in ([0.8, 0.85, 6.0], [-0.75, 0.8, 12.0]):
            bq, aabb = make_box(bc, [0.35, 0.35, 0.35], frame_texture())
            quads.extend(bq)
            boxes.append(aabb)
    return SyntheticScene(quads=tuple(quads), boxes=tuple(boxes))


def corridor_trajectory(n_frames=100, speed=0.1):
    poses = []
    for i in range(n_frames):
        cx = 0.12 * np.sin(2 * np.pi * i / 70.0)
        cyv = 0.05 * np.sin(2 * np.pi * i / 90.0 + 1.0)
        yaw = 0.02 * np.sin(2 * np.pi * i / 60.0)
        poses.append(_look_pose([cx, cyv, speed * i], yaw=yaw))
    return poses


def flat_edge_scene(mark_every=48):
    """A single wall of horizontal stripes ahead of the camera; sparse thin
    vertical marks keep lateral motion observable while most edges stay
    parallel to an x-translation baseline."""
    tex = stripes(n=256, period=8, horizontal=True, mark_every=mark_every)
    quad = Quad([-10.0, -4.0, 4.0], [20.0, 0, 0], [0, 8.0, 0], tex)
    return SyntheticScene(quads=(quad,))


def flat_edge_trajectory(n_frames=40, speed=0.04):
    return [_look_pose([speed * i, 0.0, 0.0]) for i in range(n_frames)]


def default_intrinsics(width=320, height=240):
    f = 0.8125 * width
    return CameraIntrinsics(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height)


def jitter_illumination_schedule(seed, gain_jitter=0.2, glare=True, width=320, height=240, glare_intensity=0.35, glare_sigma=28.0):
    """Per-frame +-gain jitter with a slowly moving glare blob."""
    rng = np.random.default_rng(seed)
    gains = {}

    def schedule(i):
        if i not in gains:
            gains[i] = 1.0 + rng.uniform(-gain_jitter, gain_jitter)
        center = None
        intensity = 0.0
        if glare:
            center = (
                width * (0.5 + 0.35 * np.sin(0.13 * i)),
                height * (0.5 + 0.3 * np.cos(0.09 * i)),
            )
            intensity = glare_intensity
        return Illumination(
            gain=gains[i],
            bias=0.0,
            glare_center=center,
            glare_sigma=glare_sigma,
            glare_intensity=intensity,
        )

    return schedule


PRESETS = {}


def preset(name, n_frames=None, seed=0, size=(320, 240), noise_sigma=0.0, illumination=None, speed=None):
    """Build a named synthetic sequence.

    Presets: corridor (forward motion through a textured corridor) and
    flat_edge (striped wall with an edge-parallel baseline: the degenerate
    depth-observability case).
    """
    w, h = size
    K = default_intrinsics(w, h)
    if name == "corridor":
        n_frames = 100 if n_frames is None else n_frames
        speed = 0.1 if speed is None else speed
        scene = corridor_scene(seed=seed)
        poses = corridor_trajectory(n_frames, speed=speed)
    elif name == "flat_edge":
        n_frames = 40 if n_frames is None else n_frames
        speed = 0.04 if speed is None else speed
        scene = flat_edge_scene()
        poses = flat_edge_trajectory(n_frames, speed=speed)
    else:
        raise ValueError(f"unknown preset {name!r} (have: corridor, flat_edge)")
    schedule = None
    if illumination == "jitter":
        schedule = jitter_illumination_schedule(seed + 1, width=w, height=h)
    return render_sequence(
        scene, poses, K, illumination_schedule=schedule, noise_sigma=noise_sigma, seed=seed, name=name
    )
