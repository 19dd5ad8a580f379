"""Subject priors from cross-attention.

Pipeline per subject: token-selected attention map -> iterative blur until
the super-threshold region is one blob -> reconstruction from the global
peak. Across subjects the smoothed maps are partitioned by per-cell argmax,
and each winner region is intersected with the subject's own quantile mask.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .mmdit import AttentionCapture, Model, noise_latent, run_velocity, time_grid
from .tensor_math import (conv2d_same, connected_components, gaussian_kernel, matmul,
                          morph_reconstruct, quantile, renorm, row_softmax)


@dataclass(frozen=True)
class SubjectSpec:
    name: str
    tokens: tuple[int, ...]
    adapter: str = ""

    def validate(self, prompt_len: int):
        if not self.tokens:
            raise ParameterError(f"subject {self.name!r} has no prompt tokens")
        bad = [t for t in self.tokens if not 0 <= t < prompt_len]
        if bad:
            raise ParameterError(f"subject {self.name!r} token indices {bad} outside prompt of length {prompt_len}")
        return self


@dataclass(frozen=True)
class PriorParams:
    gamma: float = 0.94
    tau: float = 0.7
    kernel_size: int = 3
    sigma: float = 1.0
    max_passes: int = 16
    capture_block: int | None = None  # None -> last double-stream block
    # Accepted for parity with the blob procedure's signature; unused.
    mode: str = "flatten"
    distance: float = 0.0

    def validate(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ParameterError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 < self.tau < 1.0:
            raise ParameterError(f"tau must lie in (0, 1), got {self.tau}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ParameterError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if self.max_passes < 1:
            raise ParameterError(f"max_passes must be >= 1, got {self.max_passes}")
        return self


def attention_map(capture: AttentionCapture, tokens, height: int, width: int) -> np.ndarray:
    """Softmax of image queries against all text keys, summed over the
    subject's token columns, averaged over heads, renormalised to [0, 1]."""
    tokens = list(tokens)
    if not tokens:
        raise ParameterError("empty token set")
    q, k = capture.image_queries, capture.text_keys
    n_text = k.shape[1]
    if any(not 0 <= t < n_text for t in tokens):
        raise ParameterError(f"token indices {tokens} outside prompt of length {n_text}")
    d = q.shape[-1]
    heads = q.shape[0]
    total = np.zeros(q.shape[1])
    for h in range(heads):
        probs = row_softmax(matmul(q[h], k[h].T) / math.sqrt(d))
        col = np.zeros(q.shape[1])
        for t in tokens:
            col = col + probs[:, t]
        total = total + col
    return renorm((total / heads).reshape(height, width))


def super_threshold(m, tau: float) -> np.ndarray:
    """Cells at or above the tau quantile; zero cells never qualify."""
    m = np.asarray(m, dtype=np.float64)
    return (m >= quantile(m, tau)) & (m > 0)


@dataclass
class BlobResult:
    mask: np.ndarray
    passes: int
    components: int  # super-threshold components of the smoothed map when the loop stopped
    exhausted: bool  # loop ran all passes without reaching one component


def homogeneous_blob(m, params: PriorParams) -> BlobResult:
    """Blur and renormalise until the super-threshold region is at most one
    8-connected component (up to ``max_passes``), then reconstruct the map
    from a marker at its global peak and renormalise."""
    g = gaussian_kernel(params.kernel_size, params.sigma)
    m = renorm(m)
    passes, count = 0, 0
    exhausted = True
    for passes in range(1, params.max_passes + 1):
        m = renorm(conv2d_same(m, g))
        _, count = connected_components(super_threshold(m, params.tau), 8)
        if count <= 1:
            exhausted = False
            break
    peak = int(np.argmax(m))  # first maximum in row-major order
    marker = np.zeros_like(m)
    marker.flat[peak] = m.flat[peak]
    m = renorm(morph_reconstruct(marker, m))
    return BlobResult(m, passes, count, exhausted)


def binarize(m, tau: float) -> np.ndarray:
    return super_threshold(m, tau).astype(np.uint8)


def argmax_partition(maps) -> np.ndarray:
    """One-hot priors (N, H, W) from the per-cell winner; ties go to the lowest index."""
    maps = [np.asarray(x, dtype=np.float64) for x in maps]
    if not maps:
        raise ParameterError("argmax_partition needs at least one map")
    if any(x.shape != maps[0].shape for x in maps):
        raise ShapeError(f"map shapes differ: {[x.shape for x in maps]}")
    winner = np.argmax(np.stack(maps), axis=0)
    return np.stack([(winner == u).astype(np.uint8) for u in range(len(maps))])


@dataclass
class PriorResult:
    priors: np.ndarray  # (N, H, W) uint8, disjoint
    winners: np.ndarray  # (N, H, W) uint8, argmax partition before background removal
    raw_maps: np.ndarray  # (N, H, W)
    smoothed: np.ndarray  # (N, H, W)
    blobs: list[BlobResult]
    capture_step: int
    capture_time: float
    warnings: list[str] = field(default_factory=list)


def priors_from_maps(maps, params: PriorParams):
    """Blob-smooth each map, partition by argmax, drop cells outside each winner's own mask."""
    blobs = [homogeneous_blob(m, params) for m in maps]
    smoothed = np.stack([b.mask for b in blobs])
    winners = argmax_partition(smoothed)
    own = np.stack([binarize(s, params.tau) for s in smoothed])
    return winners & own, winners, smoothed, blobs


def extract_priors(model: Model, prompt, subjects, params: PriorParams, noise_seed: int = 0,
                   z1=None, steps: int = 16) -> PriorResult:
    """Pseudo-denoise from t=1 on the ``steps`` grid; at the first grid time
    at or below gamma, capture attention at the capture block and build priors.

    Runs the base model only. ``z1`` overrides the seeded starting noise.
    """
    params.validate()
    cfg = model.cfg
    if not subjects:
        raise ParameterError("need at least one subject")
    for s in subjects:
        s.validate(cfg.prompt_len)
    block = cfg.last_double_block if params.capture_block is None else params.capture_block
    if not 0 <= block < cfg.double_blocks:
        raise ParameterError(f"capture block {block} is not a double-stream block (0..{cfg.double_blocks - 1})")
    z = noise_latent(cfg, noise_seed) if z1 is None else np.asarray(z1, dtype=np.float64)
    grid = time_grid(steps)
    capture = None
    for i in range(steps):
        t = float(grid[i])
        if t <= params.gamma:
            _, _, caps = run_velocity(model, z, t, prompt, capture=(block,))
            capture = caps[0]
            break
        v, _, _ = run_velocity(model, z, t, prompt)
        z = z + (float(grid[i + 1]) - t) * v
    if capture is None:
        raise ParameterError(f"no grid time at or below gamma={params.gamma} with {steps} steps")
    raw = np.stack([attention_map(capture, s.tokens, cfg.height, cfg.width) for s in subjects])
    priors, winners, smoothed, blobs = priors_from_maps(raw, params)
    warnings = [f"subject {s.name!r}: blob smoothing exhausted {params.max_passes} passes "
                f"with {b.components} components" for s, b in zip(subjects, blobs) if b.exhausted]
    return PriorResult(priors, winners, raw, smoothed, blobs, i, t, warnings)
