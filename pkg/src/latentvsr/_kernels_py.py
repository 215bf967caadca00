"""NumPy fallback for the compiled kernels; same signatures and results."""

import numpy as np

_EPS = 1e-9


def warp_abs_diff(prev, nxt, flow):
    C, H, W = prev.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    sx = xs - flow[0]
    sy = ys - flow[1]
    valid = (sx >= -_EPS) & (sy >= -_EPS) & (sx <= W - 1 + _EPS) & (sy <= H - 1 + _EPS)
    sx = np.clip(sx, 0, W - 1)
    sy = np.clip(sy, 0, H - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    warped = (prev[:, y0, x0] * (1 - fx) * (1 - fy)
              + prev[:, y0, x1] * fx * (1 - fy)
              + prev[:, y1, x0] * (1 - fx) * fy
              + prev[:, y1, x1] * fx * fy)
    diff = np.abs(nxt - warped)[:, valid]
    return float(diff.sum()), int(diff.size)


def blend_rows(a, b, alpha, out):
    w = alpha[:, None]
    out[...] = (w * a.astype(np.float64) + (1.0 - w) * b.astype(np.float64)).astype(np.float32)
    return out
