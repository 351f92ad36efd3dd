"""Point-vector upsampling, Gaussian smoothing and heat-map overlays."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tokenizer import DimensionError, side


def default_sigma(width: int) -> float:
    return width / 64.0


def _center_interp_matrix(s: int, n: int) -> np.ndarray:
    """(n, s) weights interpolating s token-center samples onto n pixels.

    Token j covers pixels [j*n/s, (j+1)*n/s) so its center sits at
    (j + 0.5) * n / s - 0.5; pixels beyond the outermost centers take the
    edge value.
    """
    pos = (np.arange(n) + 0.5) * s / n - 0.5
    pos = np.clip(pos, 0.0, s - 1)
    lo = np.minimum(np.floor(pos).astype(int), s - 1)
    hi = np.minimum(lo + 1, s - 1)
    frac = pos - lo
    m = np.zeros((n, s))
    rows = np.arange(n)
    m[rows, lo] += 1.0 - frac
    m[rows, hi] += frac
    return m


def gaussian_kernel(sigma: float) -> np.ndarray:
    r = max(int(math.ceil(3.0 * sigma)), 1)
    x = np.arange(-r, r + 1)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _blur_axis(arr: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    return ndimage.convolve1d(arr, k, axis=axis, mode="constant", cval=0.0)


def gaussian_blur(gaze: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur truncated at 3 sigma.

    Near the border the kernel is renormalized over the in-image taps, so
    constants are preserved everywhere and mass is preserved in the interior.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    k = gaussian_kernel(sigma)
    arr = np.asarray(gaze, dtype=np.float64)
    out = arr
    for axis in (-2, -1):
        num = _blur_axis(out, k, axis)
        den = _blur_axis(np.ones(arr.shape[axis]), k, 0)
        shape = [1] * arr.ndim
        shape[axis] = -1
        out = num / den.reshape(shape)
    return out


def upsample_points(points: np.ndarray, T: int, H: int, W: int, sigma=None, kind: str = "bilinear") -> np.ndarray:
    """Turn a length-T point vector into an (H, W) gaze map in [0, 1]."""
    points = np.asarray(points, dtype=np.float64)
    s = side(T)
    if points.shape != (T,):
        raise DimensionError(f"expected {T} points, got shape {points.shape}")
    if H < s or W < s:
        raise DimensionError(f"output {H}x{W} is smaller than the {s}x{s} token grid")
    grid = points.reshape(s, s)
    if kind == "bilinear":
        up = _center_interp_matrix(s, H) @ grid @ _center_interp_matrix(s, W).T
    elif kind == "bicubic":
        ys = np.clip((np.arange(H) + 0.5) * s / H - 0.5, 0, s - 1)
        xs = np.clip((np.arange(W) + 0.5) * s / W - 0.5, 0, s - 1)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        up = ndimage.map_coordinates(grid, [yy, xx], order=3, mode="nearest")
    else:
        raise ValueError(f"unknown interpolation {kind!r}")
    if sigma is None:
        sigma = default_sigma(W)
    if sigma > 0:
        up = gaussian_blur(up, sigma)
    return np.clip(up, 0.0, 1.0)


def normalize_max(gaze: np.ndarray) -> np.ndarray:
    peak = float(np.max(gaze)) if np.size(gaze) else 0.0
    return gaze / peak if peak > 0 else np.zeros_like(gaze)


# -- colormap -------------------------------------------------------------------


def _jet(x: np.ndarray) -> np.ndarray:
    r = np.clip(1.5 - np.abs(4.0 * x - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * x - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * x - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


# 256-entry RGB table; entry i = jet(i / 255), see docs/colormap.md
COLORMAP = _jet(np.arange(256) / 255.0)


def colorize(gaze: np.ndarray) -> np.ndarray:
    """(H, W) map in [0, 1] -> (3, H, W) heat colors."""
    idx = np.round(np.clip(gaze, 0.0, 1.0) * 255.0).astype(int)
    return COLORMAP[idx].transpose(2, 0, 1)


def overlay(image: np.ndarray, gaze: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend the heat-colored map onto a (3, H, W) image."""
    if image.shape[1:] != gaze.shape:
        raise DimensionError(f"image {image.shape[1:]} and gaze map {gaze.shape} differ in size")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * image + alpha * colorize(gaze)


def colormap_table() -> str:
    """Markdown table of the colormap, one row per entry."""
    rows = ["| index | R | G | B |", "|---:|---:|---:|---:|"]
    for i, (r, g, b) in enumerate(np.round(COLORMAP * 255).astype(int)):
        rows.append(f"| {i} | {r} | {g} | {b} |")
    return "\n".join(rows) + "\n"


def write_colormap_doc(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (
        "# Overlay colormap\n\n"
        "A gaze value v in [0, 1] selects entry round(255 v). Entry i is the jet ramp\n"
        "at x = i / 255: R = clip(1.5 - |4x - 3|), G = clip(1.5 - |4x - 2|),\n"
        "B = clip(1.5 - |4x - 1|), each clipped to [0, 1] and listed here as bytes.\n\n"
    )
    path.write_text(header + colormap_table(), encoding="utf-8")
    return path
