"""Keyframes: an image pyramid, a world-to-camera pose, and hosted edge points."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import CameraIntrinsics, Pose
from .imageproc import Pyramid


class PointState(Enum):
    ACTIVE = "active"
    DEPTH_FIXED = "depth_fixed"
    DROPPED = "dropped"


@dataclass
class KeyframePoint:
    """An edge pixel hosted by a keyframe, parameterized by inverse depth."""

    id: int
    pixel: np.ndarray
    inv_depth: float
    inv_depth_sigma: float
    state: PointState = PointState.ACTIVE

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)


@dataclass
class Keyframe:
    id: int
    pyramid: Pyramid
    pose: Pose  # world -> camera
    points: list
    intrinsics: CameraIntrinsics
    tracking_sigma_r2: float = 1.0
    _by_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        ids = [p.id for p in self.points]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate point ids in keyframe")
        mask = self.pyramid.levels[0].edges.mask
        h, w = mask.shape
        for p in self.points:
            u, v = int(round(p.pixel[0])), int(round(p.pixel[1]))
            if not (0 <= u < w and 0 <= v < h and mask[v, u]):
                raise ValueError(f"point {p.id} at {p.pixel} is not on the edge mask")
        self._by_id = {p.id: p for p in self.points}

    def point(self, point_id) -> KeyframePoint:
        return self._by_id[point_id]

    def usable_points(self):
        """Points that participate in tracking and association."""
        return [p for p in self.points if p.state != PointState.DROPPED and p.inv_depth > 0]


def sample_edge_pixels(edge_map, n_points: int, rng) -> np.ndarray:
    """Uniform sample of up to n_points edge pixels, returned as (N, 2) (u, v)."""
    vv, uu = np.nonzero(edge_map.mask)
    total = len(uu)
    if total == 0:
        raise ValueError("no edge pixels to sample from")
    if total <= n_points:
        sel = np.arange(total)
    else:
        sel = rng.choice(total, size=n_points, replace=False)
        sel.sort()
    return np.stack([uu[sel], vv[sel]], axis=-1).astype(float)
