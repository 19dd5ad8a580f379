"""Oracle suites run by ``loramix selftest``.

Each suite draws from its own fixed seed, compares a kernel against the
scalar reference in :mod:`loramix.oracles`, and reports the first violated
invariant by name.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import oracles
from . import tensor_math as tm
from .adapters import LoRADelta, merge_weights
from .blending import BlendConfig, alpha_weights, blend_residual
from .mmdit import ResidualRecord
from .priors import argmax_partition


class Failed(Exception):
    pass


def check(cond, invariant):
    if not cond:
        raise Failed(invariant)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    detail: str = ""


def suite_matmul(rng):
    for _ in range(20):
        n, k, m = rng.integers(1, 7, size=3)
        a, b = rng.standard_normal((n, k)), rng.standard_normal((k, m))
        check(np.max(np.abs(tm.matmul(a, b) - oracles.matmul_loops(a, b))) <= 1e-12,
              "matmul equals triple-loop product within 1e-12")
    return 20


def suite_softmax(rng):
    for _ in range(20):
        m = rng.standard_normal((3, 5)) * 4
        out = tm.row_softmax(m)
        check(np.all(np.abs(out.sum(axis=1) - 1) <= 1e-6), "softmax rows sum to 1")
        check(np.max(np.abs(out - oracles.softmax_naive(m))) <= 1e-9, "softmax equals naive exp/sum")
    check(np.all(np.isfinite(tm.row_softmax(np.array([[1000.0, 0.0]])))), "softmax stable at large logits")
    return 21


def suite_gaussian(rng):
    cases = 0
    for k in (1, 3, 5, 7):
        for sigma in (0.5, 1.0, 2.0):
            g = tm.gaussian_kernel(k, sigma)
            check(abs(g.sum() - 1) <= 1e-9, "gaussian kernel weights sum to 1")
            check(np.array_equal(g, g[::-1]) and np.array_equal(g, g[:, ::-1]) and np.array_equal(g, g.T),
                  "gaussian kernel symmetric under flips")
            check(np.max(np.abs(g - oracles.gaussian_closed_form(k, sigma))) <= 1e-12,
                  "gaussian kernel equals closed form")
            cases += 1
    return cases


def suite_conv(rng):
    g = tm.gaussian_kernel(3, 1.0)
    for _ in range(10):
        grid = rng.random((8, 8))
        check(np.max(np.abs(tm.conv2d_same(grid, g) - oracles.conv_sliding_window(grid, g))) <= 1e-12,
              "conv2d_same equals sliding-window oracle")
    const = np.full((6, 6), 0.3)
    check(np.array_equal(tm.conv2d_same(const, g), const), "conv2d_same preserves constant grids exactly")
    return 11


def suite_renorm(rng):
    for _ in range(20):
        grid = rng.standard_normal((5, 7))
        r = tm.renorm(grid)
        check(r.min() == 0 and r.max() == 1, "renorm spans [0, 1]")
        check(np.array_equal(np.argsort(r, axis=None, kind="stable"), np.argsort(grid, axis=None, kind="stable")),
              "renorm preserves order")
        check(np.array_equal(tm.renorm(r), r), "renorm idempotent")
    check(not tm.renorm(np.full((3, 3), 2.0)).any(), "renorm maps constant grids to zeros")
    return 21


def suite_quantile(rng):
    cases = 0
    for _ in range(20):
        grid = rng.integers(0, 6, size=(4, 5)).astype(float)
        for q in (0.0, 0.1, 0.25, 0.5, 0.7, 0.9, 1.0):
            check(tm.quantile(grid, q) == oracles.quantile_sort(grid, q), "quantile equals sort oracle")
            cases += 1
    return cases


def suite_components(rng):
    for _ in range(30):
        b = rng.random((16, 16)) < rng.uniform(0.2, 0.6)
        for conn in (4, 8):
            check(tm.connected_components(b, conn)[1] == oracles.flood_fill_count(b, conn),
                  f"component count equals flood fill ({conn}-connectivity)")
    return 60


def suite_reconstruct(rng):
    for _ in range(15):
        mask = rng.random((8, 8))
        marker = np.zeros_like(mask)
        idx = rng.integers(0, 64)
        marker.flat[idx] = mask.flat[idx]
        r = tm.morph_reconstruct(marker, mask)
        check(np.array_equal(r, oracles.reconstruct_fixpoint(marker, mask)), "reconstruction equals fixpoint iteration")
        check(np.all(marker <= r) and np.all(r <= mask), "marker <= reconstruction <= mask")
    return 15


def suite_partition(rng):
    for _ in range(30):
        n = int(rng.integers(1, 5))
        maps = np.round(rng.random((n, 6, 6)), 1)
        priors = argmax_partition(maps)
        check(np.all(priors.sum(axis=0) == 1), "argmax priors partition the grid")
        winner = oracles.argmax_loops(maps)
        check(all(np.array_equal(priors[u], (winner == u).astype(np.uint8)) for u in range(n)),
              "argmax partition equals scalar argmax")
    return 30


def suite_blend(rng):
    for _ in range(30):
        n = int(rng.integers(1, 5))
        s, c, t = 16, 4, 3
        cfg = BlendConfig(t=0.9, eps=1e-6, prompt_len=t, image_tokens=s)
        owner = rng.integers(-1, n, size=s)
        priors = np.stack([(owner == u).astype(np.uint8) for u in range(n)])
        w = alpha_weights(priors, cfg.eps)
        check(np.array_equal(w.alpha, oracles.alpha_loops(priors, cfg.eps)), "alpha weights equal per-token formula")
        base = ResidualRecord(2, 1, "joint", rng.standard_normal((t + s, c)))
        adapters = [ResidualRecord(2, 1, "joint", rng.standard_normal((t + s, c))) for _ in range(n)]
        out = blend_residual(base, adapters, w, cfg).values
        ref = oracles.blend_loops(base.values, [a.values for a in adapters], priors, list(cfg.image_rows("joint")),
                                  cfg.eps)
        check(np.array_equal(out, ref), "blend equals per-token reference loop bitwise")
    return 30


def suite_lora_rank(rng):
    for _ in range(20):
        d, k = int(rng.integers(4, 9)), int(rng.integers(4, 9))
        r = int(rng.integers(1, min(d, k)))
        delta = LoRADelta("w", rng.standard_normal((r, k)), rng.standard_normal((d, r)))
        w0 = rng.standard_normal((d, k))
        check(oracles.numerical_rank(merge_weights(w0, delta) - w0) <= r, "merged delta has rank <= r")
    return 20


SUITES = [
    ("matmul", suite_matmul),
    ("softmax", suite_softmax),
    ("gaussian_kernel", suite_gaussian),
    ("conv2d", suite_conv),
    ("renorm", suite_renorm),
    ("quantile", suite_quantile),
    ("flood_fill", suite_components),
    ("reconstruction", suite_reconstruct),
    ("argmax_partition", suite_partition),
    ("blend", suite_blend),
    ("lora_rank", suite_lora_rank),
]


def _corrupt_gaussian(k, sigma):
    g = _REAL_KERNELS["gaussian_kernel"](k, sigma)
    g = g.copy()
    g.flat[0] += 0.05
    return g


def _corrupt_conv(g, kern):
    return _REAL_KERNELS["conv2d_same"](g, kern) * 1.001


def _corrupt_matmul(a, b):
    return _REAL_KERNELS["matmul"](a, b) + 1e-9


_REAL_KERNELS = {"gaussian_kernel": tm.gaussian_kernel, "conv2d_same": tm.conv2d_same, "matmul": tm.matmul}
MUTATIONS = {"gaussian_kernel": _corrupt_gaussian, "conv2d_same": _corrupt_conv, "matmul": _corrupt_matmul}


@contextlib.contextmanager
def mutated(names):
    """Temporarily swap named kernels for corrupted versions (mutation testing)."""
    unknown = set(names) - set(MUTATIONS)
    if unknown:
        raise KeyError(f"no mutation for {sorted(unknown)}; choose from {sorted(MUTATIONS)}")
    saved = {n: getattr(tm, n) for n in names}
    try:
        for n in names:
            setattr(tm, n, MUTATIONS[n])
        yield
    finally:
        for n, fn in saved.items():
            setattr(tm, n, fn)


def run_selftest(mutations=(), seed: int = 20240601) -> list[SuiteResult]:
    results = []
    with mutated(mutations):
        for i, (name, suite) in enumerate(SUITES):
            rng = np.random.default_rng([seed, i])
            try:
                cases = suite(rng)
                results.append(SuiteResult(name, True, cases))
            except Failed as exc:
                results.append(SuiteResult(name, False, 0, str(exc)))
    return results


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'suite'.ljust(width)}  status  cases  detail"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL':6}  {r.cases:5d}  {r.detail}".rstrip())
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} suites passed")
    return "\n".join(lines)
