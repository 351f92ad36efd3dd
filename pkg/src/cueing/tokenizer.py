"""Parameter-free tokenization, fold/unfold and positional coordinate grids.

Tokens are non-overlapping ``H/s x W/s`` patches with ``s = sqrt(T)``, ordered
row-major from the top-left corner.  All functions accept an optional leading
batch axis.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

SUPPORTED_TOKENS = (4, 16, 64, 256, 1024)


class DimensionError(ValueError):
    pass


def side(T: int) -> int:
    """Tokens per row/column; raises unless ``T`` is a perfect square."""
    s = math.isqrt(T) if T > 0 else 0
    if s * s != T or T < 1:
        raise DimensionError(f"token count T={T} is not a perfect square")
    return s


def check_divisible(H: int, W: int, T: int) -> int:
    s = side(T)
    if H % s or W % s:
        raise DimensionError(f"H={H} and W={W} must both be divisible by sqrt(T)={s}")
    return s


def tokenize(image: np.ndarray, T: int) -> np.ndarray:
    """(..., C, H, W) -> (..., T, C, H', W')."""
    *lead, C, H, W = image.shape
    s = check_divisible(H, W, T)
    hp, wp = H // s, W // s
    x = image.reshape(*lead, C, s, hp, s, wp)
    n = len(lead)
    order = list(range(n)) + [n + 1, n + 3, n, n + 2, n + 4]
    return np.ascontiguousarray(x.transpose(order)).reshape(*lead, T, C, hp, wp)


def untokenize(tokens: np.ndarray) -> np.ndarray:
    """(..., T, C, H', W') -> (..., C, H, W); exact inverse of :func:`tokenize`."""
    *lead, T, C, hp, wp = tokens.shape
    s = side(T)
    x = tokens.reshape(*lead, s, s, C, hp, wp)
    n = len(lead)
    order = list(range(n)) + [n + 2, n, n + 3, n + 1, n + 4]
    return np.ascontiguousarray(x.transpose(order)).reshape(*lead, C, s * hp, s * wp)


def unfold(tokens: np.ndarray) -> np.ndarray:
    """Stack tokens along the batch axis: (B, T, C, h, w) -> (B*T, C, h, w).

    A single image's (T, C, h, w) tokens are returned as a copy of the same
    shape, with the token axis acting as the batch axis.
    """
    if tokens.ndim == 4:
        return tokens.copy()
    if tokens.ndim != 5:
        raise DimensionError(f"expected (B, T, C, h, w) tokens, got shape {tokens.shape}")
    B, T = tokens.shape[:2]
    return tokens.reshape(B * T, *tokens.shape[2:]).copy()


def fold(stack, T: int = None) -> np.ndarray:
    """Inverse of :func:`unfold`.

    ``stack`` is an array (N, ...) or a sequence of equally shaped arrays.  With
    ``T`` given and ``N = B*T`` the result is (B, T, ...); otherwise (N, ...).
    """
    if not isinstance(stack, np.ndarray):
        items: Sequence[np.ndarray] = list(stack)
        shapes = {np.shape(i) for i in items}
        if len(shapes) > 1:
            raise DimensionError(f"ragged token stack with shapes {sorted(shapes)}")
        stack = np.stack(items) if items else np.zeros((0,))
    if T is None:
        return stack.copy()
    N = stack.shape[0]
    if N % T:
        raise DimensionError(f"stack of {N} items is not a multiple of T={T}")
    return stack.reshape(N // T, T, *stack.shape[1:]).copy()


def token_coordinates(T: int) -> np.ndarray:
    """Per-token (x, y) coordinates, shape (2, s, s), equally spaced in [-1, 1]."""
    s = side(T)
    if s == 1:
        axis = np.zeros(1)
    else:
        axis = -1.0 + 2.0 * np.arange(s) / (s - 1)
    xs = np.broadcast_to(axis[None, :], (s, s))
    ys = np.broadcast_to(axis[:, None], (s, s))
    return np.stack([xs, ys])


def coord_grid(H: int, W: int, T: int) -> np.ndarray:
    """(2, H, W) grid; channel 0 is the token column coordinate, 1 the row."""
    s = check_divisible(H, W, T)
    coords = token_coordinates(T)
    return np.repeat(np.repeat(coords, H // s, axis=1), W // s, axis=2)


def downsample_gaze(gaze: np.ndarray, T: int) -> np.ndarray:
    """Mean gaze per token: (..., H, W) -> (..., T)."""
    *lead, H, W = gaze.shape
    s = check_divisible(H, W, T)
    x = gaze.reshape(*lead, s, H // s, s, W // s)
    return x.mean(axis=(-3, -1)).reshape(*lead, T)
