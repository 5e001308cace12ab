"""Independent oracles shared by the test suite.

Everything here is deliberately written from first principles (no imports
from edgevo internals beyond plain data in/out) so that tests compare two
independent computation paths.
"""

import numpy as np


def rodrigues(axis, angle):
    """Closed-form rotation matrix about a unit axis."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def finite_diff_jacobian(fn, x, step=1e-6):
    """Central finite differences of a vector function fn: R^n -> R^m."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x), dtype=float)
    J = np.zeros((f0.size, x.size))
    for i in range(x.size):
        dx = np.zeros_like(x)
        dx[i] = step
        fp = np.asarray(fn(x + dx), dtype=float)
        fm = np.asarray(fn(x - dx), dtype=float)
        J[:, i] = (fp - fm) / (2.0 * step)
    return J


def rel_error(a, b):
    """Max elementwise difference normalized by max(1, max |b|)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b).max() / max(1.0, np.abs(b).max())


def brute_force_nnf(mask):
    """All-pairs nearest edge pixel with smallest-linear-index tie break.

    Returns (nnf (H,W,2) int array of (u,v), dist_sq (H,W) int array).
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    ev, eu = np.nonzero(mask)  # nonzero enumerates in row-major = linear order
    if len(ev) == 0:
        raise ValueError("empty mask")
    vv, uu = np.mgrid[0:h, 0:w]
    d2 = (uu.reshape(-1, 1) - eu.reshape(1, -1)) ** 2 + (
        vv.reshape(-1, 1) - ev.reshape(1, -1)
    ) ** 2
    best = np.argmin(d2, axis=1)  # first occurrence = smallest linear index
    nnf = np.stack([eu[best], ev[best]], axis=-1).reshape(h, w, 2)
    dist_sq = d2[np.arange(h * w), best].reshape(h, w)
    return nnf, dist_sq


def sobel_reference(image):
    """Direct double-loop Sobel with replicated borders, unit-ramp normalized."""
    img = np.asarray(image, dtype=float)
    h, w = img.shape
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float) / 8.0
    ky = kx.T
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    for v in range(h):
        for u in range(w):
            sx = 0.0
            sy = 0.0
            for dv in (-1, 0, 1):
                for du in (-1, 0, 1):
                    vv = min(max(v + dv, 0), h - 1)
                    uu = min(max(u + du, 0), w - 1)
                    sx += kx[dv + 1, du + 1] * img[vv, uu]
                    sy += ky[dv + 1, du + 1] * img[vv, uu]
            gx[v, u] = sx
            gy[v, u] = sy
    return gx, gy
