"""Deterministic numerical kernels.

Feature matrices and grids are plain 2-D float64 numpy arrays. Every kernel
here uses a fixed reduction order built from elementwise numpy operations, so
results are bit-identical regardless of BLAS backend or thread count.
"""
from __future__ import annotations

import heapq
import math
from fractions import Fraction

import numpy as np
from scipy import ndimage

from .errors import ParameterError, PreconditionError, ShapeError

# 8-connectivity, used for component labelling and the dilation footprint.
NEIGHBOURS_8 = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0))
NEIGHBOURS_4 = ((-1, 0), (0, -1), (0, 1), (1, 0))


def matmul(a, b):
    """Matrix product accumulated left to right over the inner dimension.

    Leading dimensions broadcast like ``np.matmul``; the inner loop runs over
    ``k`` so every output element is ``((a0*b0 + a1*b1) + a2*b2) + ...``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    inner = a.shape[-1]
    if inner == 0:
        return np.zeros(np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1]))
    out = a[..., :, 0:1] * b[..., 0:1, :]
    for k in range(1, inner):
        out = out + a[..., :, k : k + 1] * b[..., k : k + 1, :]
    return out


def row_softmax(m):
    """Softmax along the last axis with max subtraction."""
    m = np.asarray(m, dtype=np.float64)
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, eps=1e-6):
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean(axis=-1, keepdims=True)
    var = (centred * centred).mean(axis=-1, keepdims=True)
    return centred / np.sqrt(var + eps)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


def gaussian_kernel(k: int, sigma: float) -> np.ndarray:
    """Isotropic Gaussian sampled on a ``k x k`` integer lattice, normalised to sum 1."""
    if not isinstance(k, (int, np.integer)) or k < 1 or k % 2 == 0:
        raise ParameterError(f"kernel size must be a positive odd integer, got {k!r}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma!r}")
    half = k // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    sq = offsets[:, None] ** 2 + offsets[None, :] ** 2
    w = np.exp(-sq / (2.0 * sigma * sigma))
    return w / w.sum()


def conv2d_same(g, kern) -> np.ndarray:
    """Same-size correlation with replicate padding.

    Evaluated as ``g + sum_i w_i * (g_i - g)`` over the window; with a sum-1
    kernel that equals the ordinary weighted sum, and a constant field passes
    through unchanged bit for bit.
    """
    g = np.asarray(g, dtype=np.float64)
    kern = np.asarray(kern, dtype=np.float64)
    if g.ndim != 2 or kern.ndim != 2 or kern.shape[0] != kern.shape[1]:
        raise ShapeError(f"conv2d_same expects a 2-D grid and square kernel, got {g.shape}, {kern.shape}")
    k = kern.shape[0]
    h, w = g.shape
    if k > min(h, w):
        raise ParameterError(f"kernel size {k} exceeds grid {h}x{w}")
    half = k // 2
    padded = np.pad(g, half, mode="edge")
    acc = np.zeros_like(g)
    for dy in range(k):
        for dx in range(k):
            acc = acc + kern[dy, dx] * (padded[dy : dy + h, dx : dx + w] - g)
    return g + acc


def renorm(g) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant field maps to all zeros."""
    g = np.asarray(g, dtype=np.float64)
    lo, hi = g.min(), g.max()
    if not hi > lo:
        return np.zeros_like(g)
    return (g - lo) / (hi - lo)


def quantile(g, q: float) -> float:
    """Nearest-rank quantile: the ``ceil(q*n)``-th smallest cell (rank >= 1).

    The rank is computed from the exact binary value of ``q`` so that e.g.
    ``q=0.7, n=10`` gives rank 7, not 8.
    """
    if not 0.0 <= q <= 1.0:
        raise ParameterError(f"quantile level must lie in [0, 1], got {q!r}")
    values = np.sort(np.asarray(g, dtype=np.float64), axis=None)
    if values.size == 0:
        raise ParameterError("quantile of an empty grid")
    rank = max(1, math.ceil(Fraction(q) * values.size))
    return float(values[rank - 1])


def connected_components(b, connectivity: int = 8):
    """Label foreground cells; returns ``(labels, count)`` with labels 1..count."""
    b = np.asarray(b)
    if connectivity == 8:
        structure = np.ones((3, 3), dtype=bool)
    elif connectivity == 4:
        structure = ndimage.generate_binary_structure(2, 1)
    else:
        raise ParameterError(f"connectivity must be 4 or 8, got {connectivity!r}")
    labels, count = ndimage.label(b != 0, structure=structure)
    return labels.astype(np.int64), int(count)


def dilate3x3(g) -> np.ndarray:
    """Grayscale dilation with a flat 3x3 footprint (borders replicate)."""
    g = np.asarray(g, dtype=np.float64)
    h, w = g.shape
    padded = np.pad(g, 1, mode="edge")
    out = g.copy()
    for dy in range(3):
        for dx in range(3):
            np.maximum(out, padded[dy : dy + h, dx : dx + w], out=out)
    return out


def morph_reconstruct(marker, mask) -> np.ndarray:
    """Grayscale reconstruction by dilation of ``mask`` from ``marker``.

    Computed by priority flooding: cells are settled in decreasing order of
    their reconstructed value, each neighbour receiving ``min(value, mask)``.
    Only min/max are involved, so the result is exactly the fixpoint of
    ``r <- min(dilate(r), mask)``.
    """
    marker = np.asarray(marker, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if marker.shape != mask.shape or marker.ndim != 2:
        raise ShapeError(f"marker {marker.shape} and mask {mask.shape} must be equal 2-D shapes")
    if np.any(marker > mask):
        raise PreconditionError("marker exceeds mask")
    h, w = mask.shape
    out = marker.copy()
    heap = [(-out[y, x], y, x) for y in range(h) for x in range(w) if out[y, x] > -np.inf]
    heapq.heapify(heap)
    while heap:
        neg, y, x = heapq.heappop(heap)
        v = -neg
        if v < out[y, x]:
            continue
        for dy, dx in NEIGHBOURS_8:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w:
                cand = min(v, mask[ny, nx])
                if cand > out[ny, nx]:
                    out[ny, nx] = cand
                    heapq.heappush(heap, (-cand, ny, nx))
    return out
