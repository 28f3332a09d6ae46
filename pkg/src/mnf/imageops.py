"""Square-image rotation used by the rotation sweeps.

Rotation is about the image center, counterclockwise in degrees, with the
background held at zero.  The default resampling is bilinear; nearest is
available where exactness matters more than smoothness.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def rotate(image, angle_deg, method="bilinear"):
    """Rotate a grayscale image ([h, w] or [h, w, 1]) about its center."""
    img = np.asarray(image, dtype=float)
    squeeze = False
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
        squeeze = True
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ContractError(f"rotate: expected a square grayscale image, got {img.shape}")
    if method not in ("bilinear", "nearest"):
        raise ContractError(f"rotate: unknown method {method!r}")

    n = img.shape[0]
    center = (n - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)

    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    yd = rows - center
    xd = cols - center
    # map each destination pixel back through the inverse rotation
    ys = cos * yd + sin * xd + center
    xs = -sin * yd + cos * xd + center

    if method == "nearest":
        yn = np.rint(ys).astype(int)
        xn = np.rint(xs).astype(int)
        inside = (yn >= 0) & (yn < n) & (xn >= 0) & (xn < n)
        out = np.zeros_like(img)
        out[inside] = img[yn[inside], xn[inside]]
    else:
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        wy = ys - y0
        wx = xs - x0

        def at(yy, xx):
            inside = (yy >= 0) & (yy < n) & (xx >= 0) & (xx < n)
            vals = np.zeros_like(img)
            vals[inside] = img[yy.clip(0, n - 1)[inside], xx.clip(0, n - 1)[inside]]
            return vals

        out = ((1 - wy) * (1 - wx) * at(y0, x0)
               + (1 - wy) * wx * at(y0, x0 + 1)
               + wy * (1 - wx) * at(y0 + 1, x0)
               + wy * wx * at(y0 + 1, x0 + 1))
    return out[:, :, None] if squeeze else out
