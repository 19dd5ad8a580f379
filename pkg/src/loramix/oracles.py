"""Brute-force reference implementations.

Each function is a deliberately naive scalar loop sharing no code with the
vectorised kernels it is used to check.
"""
import math
from fractions import Fraction

import numpy as np


def matmul_loops(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s = s + a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_naive(m):
    m = np.asarray(m, dtype=np.float64)
    out = np.zeros_like(m)
    for i in range(m.shape[0]):
        exps = [math.exp(v) for v in m[i]]
        total = sum(exps)
        out[i] = [e / total for e in exps]
    return out


def gaussian_closed_form(k, sigma):
    half = k // 2
    raw = [[math.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) for dx in range(-half, half + 1)]
           for dy in range(-half, half + 1)]
    total = sum(sum(row) for row in raw)
    return np.array([[v / total for v in row] for row in raw])


def conv_sliding_window(g, kern):
    g = np.asarray(g, dtype=np.float64)
    h, w = g.shape
    k = kern.shape[0]
    half = k // 2
    out = np.zeros_like(g)
    for y in range(h):
        for x in range(w):
            s = 0.0
            for dy in range(k):
                for dx in range(k):
                    yy = min(max(y + dy - half, 0), h - 1)
                    xx = min(max(x + dx - half, 0), w - 1)
                    s += kern[dy, dx] * g[yy, xx]
            out[y, x] = s
    return out


def quantile_sort(g, q):
    """Smallest cell value v with count(cells <= v) >= q*n (v = min when q = 0)."""
    values = sorted(float(v) for v in np.asarray(g).ravel())
    n = len(values)
    for v in values:
        if sum(1 for u in values if u <= v) >= Fraction(q) * n:
            return v
    return values[-1]


def flood_fill_count(b, connectivity=8):
    """Count components by recursive flood fill."""
    import sys

    b = np.asarray(b) != 0
    h, w = b.shape
    seen = np.zeros_like(b)
    if connectivity == 8:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx]
    else:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, h * w + 100))

    def fill(y, x):
        seen[y, x] = True
        for dy, dx in steps:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and b[ny, nx] and not seen[ny, nx]:
                fill(ny, nx)

    count = 0
    try:
        for y in range(h):
            for x in range(w):
                if b[y, x] and not seen[y, x]:
                    count += 1
                    fill(y, x)
    finally:
        sys.setrecursionlimit(limit)
    return count


def dilate_loops(g):
    g = np.asarray(g, dtype=np.float64)
    h, w = g.shape
    out = np.empty_like(g)
    for y in range(h):
        for x in range(w):
            out[y, x] = max(g[yy, xx]
                            for yy in range(max(0, y - 1), min(h, y + 2))
                            for xx in range(max(0, x - 1), min(w, x + 2)))
    return out


def reconstruct_fixpoint(marker, mask):
    """Iterate r <- min(dilate(r), mask) from the marker until nothing changes."""
    r = np.asarray(marker, dtype=np.float64).copy()
    mask = np.asarray(mask, dtype=np.float64)
    while True:
        nxt = np.minimum(dilate_loops(r), mask)
        if np.array_equal(nxt, r):
            return r
        r = nxt


def argmax_loops(maps):
    """Per-cell winner index, ties to the lowest index."""
    n = len(maps)
    h, w = np.asarray(maps[0]).shape
    out = np.zeros((h, w), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            best = 0
            for u in range(1, n):
                if maps[u][y][x] > maps[best][y][x]:
                    best = u
            out[y, x] = best
    return out


def alpha_loops(priors, eps):
    """Token weights by direct per-token evaluation; priors is (N, S)."""
    priors = np.asarray(priors, dtype=np.float64)
    n, s = priors.shape
    out = np.zeros((s, n))
    for p in range(s):
        total = 0.0
        for u in range(n):
            total += priors[u, p]
        for k in range(n):
            out[p, k] = priors[k, p] / (total + eps)
    return out


def blend_loops(base, adapters, priors, image_rows, eps):
    """Token-by-token residual blending.

    ``base`` and each adapter residual are (rows, C); ``priors`` is (N, S);
    ``image_rows[j]`` is the record row of image token ``j``.
    """
    base = np.asarray(base, dtype=np.float64)
    out = base.copy()
    rows, c = base.shape
    n = len(adapters)
    token_of_row = {r: j for j, r in enumerate(image_rows)}
    for row in range(rows):
        if row not in token_of_row:
            continue
        p = token_of_row[row]
        claims = 0.0
        for u in range(n):
            claims += priors[u][p]
        if claims == 0:
            continue
        alphas = [priors[k][p] / (claims + eps) for k in range(n)]
        for ch in range(c):
            s = 0.0
            for k in range(n):
                s = s + alphas[k] * adapters[k][row, ch]
            out[row, ch] = s
    return out


def numerical_rank(m, tol=1e-8):
    sv = np.linalg.svd(np.asarray(m, dtype=np.float64), compute_uv=False)
    return int(np.sum(sv > tol))
