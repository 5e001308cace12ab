"""Grayscale image handling: gradients, Canny edges, nearest-edge fields, pyramids.

Images are (H, W) float64 arrays with intensities in [0, 1], indexed
[v, u]. All pixel coordinates handed around as vectors are (u, v).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._edt import distance_transform

# Sobel normalized so a unit intensity ramp gives unit gradient (intensity/pixel).
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float) / 8.0
SOBEL_Y = SOBEL_X.T


class ImageError(ValueError):
    """Invalid image input (wrong size, empty mask, bad thresholds)."""


def as_gray(data) -> np.ndarray:
    img = np.asarray(data, dtype=float)
    if img.ndim != 2:
        raise ImageError("expected a 2-D grayscale array")
    if not np.all(np.isfinite(img)):
        raise ImageError("image contains non-finite values")
    return img


@dataclass(frozen=True, eq=False)
class GradientField:
    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray


@dataclass(frozen=True, eq=False)
class EdgeMap:
    """Binary edge mask with per-edge-pixel gradient direction and an exact
    nearest-edge-pixel field (nnf as (u, v), dist in pixels)."""

    mask: np.ndarray
    gradient_dir: np.ndarray  # (H, W, 2), unit (u, v) on mask pixels, 0 elsewhere
    nnf: np.ndarray  # (H, W, 2) int32 (u, v); (-1, -1) when mask is empty
    dist: np.ndarray  # (H, W) float64; inf when mask is empty

    @classmethod
    def build(cls, mask, gradient_dir):
        mask = np.asarray(mask, dtype=bool)
        h, w = mask.shape
        if mask.any():
            nnf, dist_sq = distance_transform(mask)
            dist = np.sqrt(dist_sq.astype(float))
        else:
            nnf = np.full((h, w, 2), -1, dtype=np.int32)
            dist = np.full((h, w), np.inf)
        return cls(mask=mask, gradient_dir=np.asarray(gradient_dir, dtype=float), nnf=nnf, dist=dist)

    def edge_count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True, eq=False)
class PyramidLevel:
    image: np.ndarray
    gradients: GradientField
    edges: EdgeMap


@dataclass(frozen=True, eq=False)
class Pyramid:
    levels: tuple  # level 0 finest, each coarser level half resolution

    def __len__(self):
        return len(self.levels)


def compute_gradients(image) -> GradientField:
    """3x3 Sobel response with replicated borders.

    Computed separably so constant regions cancel to exactly zero.
    """
    img = as_gray(image)
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise ImageError("image must be at least 3x3")
    smooth_v = ndimage.correlate1d(img, [1.0, 2.0, 1.0], axis=0, mode="nearest")
    smooth_h = ndimage.correlate1d(img, [1.0, 2.0, 1.0], axis=1, mode="nearest")
    gx = ndimage.correlate1d(smooth_v, [-1.0, 0.0, 1.0], axis=1, mode="nearest") / 8.0
    gy = ndimage.correlate1d(smooth_h, [-1.0, 0.0, 1.0], axis=0, mode="nearest") / 8.0
    return GradientField(gx=gx, gy=gy, magnitude=np.hypot(gx, gy))


def gaussian_kernel(size: int = 5, sigma: float = 1.4) -> np.ndarray:
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=float)
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur(image, size: int = 5, sigma: float = 1.4) -> np.ndarray:
    return ndimage.correlate(as_gray(image), gaussian_kernel(size, sigma), mode="nearest")


# NMS direction bins: quantized gradient axis -> (du, dv) of the "plus" neighbor.
_NMS_OFFSETS = ((1, 0), (1, 1), (0, 1), (-1, 1))


def _direction_bins(gx, gy):
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    return (np.floor(angle / (np.pi / 4.0) + 0.5).astype(int)) % 4


def non_maximum_suppression(magnitude, bins):
    """Keep pixels that are local maxima along their quantized gradient axis.

    The comparison is strict toward the plus neighbor and non-strict toward
    the minus neighbor, so a two-pixel plateau keeps exactly one pixel.
    """
    h, w = magnitude.shape
    padded = np.full((h + 2, w + 2), -1.0)
    padded[1:-1, 1:-1] = magnitude
    keep = np.zeros((h, w), dtype=bool)
    for b, (du, dv) in enumerate(_NMS_OFFSETS):
        sel = bins == b
        plus = padded[1 + dv : h + 1 + dv, 1 + du : w + 1 + du]
        minus = padded[1 - dv : h + 1 - dv, 1 - du : w + 1 - du]
        keep |= sel & (magnitude > plus) & (magnitude >= minus)
    return keep & (magnitude > 0)


def canny_edges(image, low_thresh: float = 0.1, high_thresh: float = 0.2) -> EdgeMap:
    """Canny edge map; thresholds are fractions of the max gradient magnitude."""
    if not (0.0 < low_thresh < high_thresh <= 1.0):
        raise ImageError("thresholds must satisfy 0 < low < high <= 1")
    img = as_gray(image)
    if img.shape[0] < 5 or img.shape[1] < 5:
        raise ImageError("image must be at least 5x5 for Canny")
    blurred = gaussian_blur(img)
    grad = compute_gradients(blurred)
    m = grad.magnitude
    m_max = m.max()
    # Gradients below numerical noise never count as structure.
    if m_max <= 1e-9:
        h, w = img.shape
        return EdgeMap.build(np.zeros((h, w), dtype=bool), np.zeros((h, w, 2)))
    bins = _direction_bins(grad.gx, grad.gy)
    nms = non_maximum_suppression(m, bins)
    weak = nms & (m >= low_thresh * m_max)
    strong = nms & (m >= high_thresh * m_max)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    mask = np.zeros_like(weak)
    if n:
        keep = np.zeros(n + 1, dtype=bool)
        keep[np.unique(labels[strong])] = True
        keep[0] = False
        mask = keep[labels]
    return EdgeMap.build(mask, gradient_directions(grad, mask))


def gradient_directions(grad: GradientField, mask) -> np.ndarray:
    """Unit gradient direction per mask pixel, zeros elsewhere."""
    h, w = grad.magnitude.shape
    out = np.zeros((h, w, 2))
    m = np.where(mask & (grad.magnitude > 0), grad.magnitude, 1.0)
    out[..., 0] = np.where(mask, grad.gx / m, 0.0)
    out[..., 1] = np.where(mask, grad.gy / m, 0.0)
    return out


def build_nnf(mask):
    """Exact nearest-edge field. Returns (nnf (H,W,2) int32 (u,v), dist (H,W))."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ImageError("mask has no edge pixels")
    nnf, dist_sq = distance_transform(mask)
    return nnf, np.sqrt(dist_sq.astype(float))


def box_downsample(image) -> np.ndarray:
    """2x2 box filter; odd dimensions replicate the last row/column."""
    img = as_gray(image)
    if img.shape[0] % 2:
        img = np.vstack([img, img[-1:]])
    if img.shape[1] % 2:
        img = np.hstack([img, img[:, -1:]])
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])


def build_pyramid(
    image,
    n_levels: int,
    canny_low: float = 0.1,
    canny_high: float = 0.2,
    edge_source=None,
) -> Pyramid:
    """Image pyramid with gradients, edges, and nearest-edge fields per level.

    edge_source, when given, is a callable mask = edge_source(image, level)
    replacing the built-in Canny detector (e.g. externally computed edges).
    """
    img = as_gray(image)
    if n_levels < 1:
        raise ImageError("need at least one pyramid level")
    h, w = img.shape
    if min(h, w) / 2 ** (n_levels - 1) < 16:
        raise ImageError(f"{n_levels} levels would shrink {w}x{h} below 16x16")
    levels = []
    for level in range(n_levels):
        grad = compute_gradients(img)
        if edge_source is None:
            edges = canny_edges(img, canny_low, canny_high)
        else:
            mask = np.asarray(edge_source(img, level), dtype=bool)
            if mask.shape != img.shape:
                raise ImageError("edge_source mask shape mismatch")
            edges = EdgeMap.build(mask, gradient_directions(compute_gradients(gaussian_blur(img)), mask))
        levels.append(PyramidLevel(image=img, gradients=grad, edges=edges))
        if level + 1 < n_levels:
            img = box_downsample(img)
    return Pyramid(levels=tuple(levels))


def bilinear(field, pts) -> np.ndarray:
    """Bilinear samples of a (H, W) field at (u, v) points; NaN out of bounds."""
    f = np.asarray(field, dtype=float)
    p = np.atleast_2d(np.asarray(pts, dtype=float))
    h, w = f.shape
    u, v = p[:, 0], p[:, 1]
    ok = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    u0 = np.clip(np.floor(u).astype(int), 0, w - 2) if w > 1 else np.zeros(len(u), int)
    v0 = np.clip(np.floor(v).astype(int), 0, h - 2) if h > 1 else np.zeros(len(v), int)
    fu = np.clip(u - u0, 0.0, 1.0)
    fv = np.clip(v - v0, 0.0, 1.0)
    u0 = np.clip(u0, 0, w - 1)
    v0 = np.clip(v0, 0, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    val = (
        f[v0, u0] * (1 - fu) * (1 - fv)
        + f[v0, u1] * fu * (1 - fv)
        + f[v1, u0] * (1 - fu) * fv
        + f[v1, u1] * fu * fv
    )
    return np.where(ok, val, np.nan)


def read_pgm(path) -> np.ndarray:
    """Binary (P5) 8-bit PGM -> float image in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ImageError(f"{path}: not a binary PGM (P5) file")
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed.
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval > 255:
        raise ImageError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=i)
    return raw.reshape(h, w).astype(float) / float(maxval)


def write_pgm(path, image) -> None:
    img = as_gray(image)
    raw = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = raw.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(raw.tobytes())
