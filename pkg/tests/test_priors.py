import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from loramix import oracles
from loramix import tensor_math as tm
from loramix.errors import ParameterError, ShapeError
from loramix.io import read_pgm, read_raw, write_pgm, write_raw
from loramix.mmdit import AttentionCapture, ModelConfig, init_model, synthetic_prompt
from loramix.priors import (PriorParams, SubjectSpec, argmax_partition, attention_map, binarize,
                            extract_priors, homogeneous_blob, priors_from_maps, super_threshold)


def bump(n, cy, cx, height=1.0, width=1.5):
    ys, xs = np.mgrid[0:n, 0:n]
    return height * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * width**2))


def components(mask):
    return oracles.flood_fill_count(mask, 8)


# attention map

def attention_loops(q, k, tokens, h, w):
    heads, s, d = q.shape
    t = k.shape[1]
    total = [0.0] * s
    for head in range(heads):
        for i in range(s):
            logits = [sum(q[head, i, c] * k[head, j, c] for c in range(d)) / math.sqrt(d) for j in range(t)]
            exps = [math.exp(x - max(logits)) for x in logits]
            z = sum(exps)
            total[i] += sum(exps[j] / z for j in tokens)
    grid = np.array(total).reshape(h, w) / heads
    return (grid - grid.min()) / (grid.max() - grid.min())


def test_attention_map_single_key_is_degenerate():
    rng = np.random.default_rng(0)
    cap = AttentionCapture(1, rng.standard_normal((2, 16, 4)), rng.standard_normal((2, 1, 4)))
    assert not attention_map(cap, [0], 4, 4).any()


def test_attention_map_identical_queries():
    rng = np.random.default_rng(1)
    q = np.repeat(rng.standard_normal((2, 1, 4)), 16, axis=1)
    cap = AttentionCapture(1, q, rng.standard_normal((2, 5, 4)))
    assert not attention_map(cap, [2], 4, 4).any()


def test_attention_map_matches_scalar_oracle(model, cfg, prompt):
    from loramix.mmdit import noise_latent, run_velocity

    _, _, caps = run_velocity(model, noise_latent(cfg, 2), 0.9375, prompt, capture=(1,))
    for tokens in ([1], [2, 5]):
        got = attention_map(caps[0], tokens, cfg.height, cfg.width)
        ref = attention_loops(caps[0].image_queries, caps[0].text_keys, tokens, cfg.height, cfg.width)
        assert np.max(np.abs(got - ref)) <= 1e-9


def test_attention_map_rejects_bad_tokens():
    cap = AttentionCapture(0, np.zeros((1, 4, 2)), np.zeros((1, 3, 2)))
    with pytest.raises(ParameterError):
        attention_map(cap, [], 2, 2)
    with pytest.raises(ParameterError):
        attention_map(cap, [3], 2, 2)


# blob

def test_blob_single_bump():
    res = homogeneous_blob(bump(12, 5, 6), PriorParams())
    assert not res.exhausted
    assert components(super_threshold(res.mask, 0.7)) == 1


def test_blob_all_zero():
    res = homogeneous_blob(np.zeros((8, 8)), PriorParams())
    assert not res.mask.any() and res.components == 0
    assert components(super_threshold(res.mask, 0.7)) == 0


def test_blob_two_bumps_keeps_taller_basin():
    n = 16
    ys, xs = np.mgrid[0:n, 0:n]
    m = np.where(xs <= 5, bump(n, 7, 2.5, 1.0, 4.0), 0.0) + np.where(xs >= 10, bump(n, 7, 13, 0.1, 0.8), 0.0)
    params = PriorParams(sigma=1.0)
    res = homogeneous_blob(m, params)
    # oracle: one blur pass (the tall bump alone is above the 0.7 quantile), then fixpoint reconstruction
    kern = oracles.gaussian_closed_form(3, 1.0)
    blurred = tm.renorm(oracles.conv_sliding_window(tm.renorm(m), kern))
    assert components(super_threshold(blurred, 0.7)) == 1
    marker = np.zeros_like(blurred)
    peak = np.unravel_index(np.argmax(blurred), blurred.shape)
    marker[peak] = blurred[peak]
    expected = tm.renorm(oracles.reconstruct_fixpoint(marker, blurred))
    assert res.passes == 1 and not res.exhausted
    assert np.max(np.abs(res.mask - expected)) <= 1e-12
    assert not res.mask[xs >= 8].any()
    assert components(super_threshold(res.mask, 0.7)) == 1


def multi_bump(rng, n=16):
    m = np.zeros((n, n))
    for _ in range(rng.integers(2, 6)):
        m += bump(n, rng.uniform(0, n), rng.uniform(0, n), rng.uniform(0.2, 1), rng.uniform(0.7, 2.5))
    return m + 0.05 * rng.random((n, n))


def test_blob_guarantee_random_maps():
    rng = np.random.default_rng(11)
    for _ in range(30):
        res = homogeneous_blob(multi_bump(rng), PriorParams())
        if not res.exhausted:
            assert res.components <= 1
        assert components(super_threshold(res.mask, 0.7)) <= 1


def test_blob_exhaustion_is_flagged():
    rng = np.random.default_rng(2)
    m = rng.random((16, 16))
    res = homogeneous_blob(m, PriorParams(max_passes=1))
    assert res.exhausted and res.passes == 1 and res.components > 1


def test_blob_ignores_mode_and_distance():
    m = bump(8, 3, 3)
    a = homogeneous_blob(m, PriorParams())
    b = homogeneous_blob(m, PriorParams(mode="other", distance=7.0))
    assert np.array_equal(a.mask, b.mask)


# binarize

def test_binarize_high_tau_keeps_argmax(rng):
    m = rng.random((6, 6))
    out = binarize(m, 0.999)
    assert out.sum() == 1 and out.flat[np.argmax(m)] == 1


def test_binarize_zero_map():
    assert not binarize(np.zeros((4, 4)), 0.7).any()


@pytest.mark.parametrize("n", [8, 10, 16])
def test_binarize_fraction(n, rng):
    m = rng.random((n, n))
    count = int(binarize(m, 0.7).sum())
    assert abs(count - 0.3 * n * n) <= 1
    expected = sum(1 for v in m.ravel() if v >= oracles.quantile_sort(m, 0.7))
    assert count == expected


# argmax partition

def test_partition_single_subject(rng):
    assert np.array_equal(argmax_partition([rng.random((4, 4))]), np.ones((1, 4, 4), dtype=np.uint8))


def test_partition_dominant_map(rng):
    b = rng.random((5, 5))
    out = argmax_partition([b + 1, b])
    assert out[0].all() and not out[1].any()


def test_partition_ties_go_to_lowest_index():
    out = argmax_partition([np.full((2, 2), 0.5)] * 3)
    assert out[0].all() and not out[1:].any()


def test_partition_random_three(rng):
    maps = rng.random((3, 7, 7))
    out = argmax_partition(maps)
    winner = oracles.argmax_loops(maps)
    for u in range(3):
        assert np.array_equal(out[u], (winner == u).astype(np.uint8))
    assert np.all(out.sum(axis=0) == 1)


def test_partition_shape_mismatch():
    with pytest.raises(ShapeError):
        argmax_partition([np.zeros((2, 2)), np.zeros((3, 2))])


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(0, 1)))
@settings(max_examples=60)
def test_partition_invariant_under_increasing_map(maps):
    # cubing is strictly increasing on [0, 1], but underflow can merge tiny values; the
    # invariance is asserted wherever cubing keeps distinct values distinct
    cubed = maps**3
    distinct = all(np.array_equal(np.sign(maps[i] - maps[j]), np.sign(cubed[i] - cubed[j]))
                   for i in range(len(maps)) for j in range(len(maps)))
    if distinct:
        assert np.array_equal(argmax_partition(maps), argmax_partition(cubed))


# full extraction

def test_one_subject_prior_is_its_blob(model, prompt):
    res = extract_priors(model, prompt, [SubjectSpec("a", (1,))], PriorParams(), noise_seed=2)
    assert np.array_equal(res.priors[0], binarize(res.smoothed[0], 0.7))
    assert res.winners[0].all()


def test_disjoint_blobs_keep_their_masks():
    n = 8
    maps = np.stack([bump(n, 1.5, 1.5, 1.0, 1.2), bump(n, 6, 6, 1.0, 1.2)])
    priors, winners, smoothed, _ = priors_from_maps(maps, PriorParams())
    own = [binarize(s, 0.7) for s in smoothed]
    assert not (own[0] & own[1]).any()
    for u in range(2):
        assert np.array_equal(priors[u], own[u])
    assert (priors.sum(axis=0) <= 1).all()


def test_two_subjects_end_to_end(model, prompt):
    res = extract_priors(model, prompt, [SubjectSpec("a", (1,)), SubjectSpec("b", (4,))], PriorParams(),
                         noise_seed=2)
    assert (res.priors.sum(axis=0) <= 1).all()
    assert np.all(res.winners.sum(axis=0) == 1)
    own = np.stack([binarize(s, 0.7) for s in res.smoothed])
    assert np.array_equal(res.priors, res.winners & own)
    assert np.array_equal(res.winners, argmax_partition(res.smoothed))
    assert res.capture_step == 1 and res.capture_time == 0.9375


def test_gamma_one_captures_on_first_step(model, prompt):
    res = extract_priors(model, prompt, [SubjectSpec("a", (1,)), SubjectSpec("b", (4,))],
                         PriorParams(gamma=1.0), noise_seed=2)
    assert res.capture_step == 0 and res.capture_time == 1.0
    assert (res.priors.sum(axis=0) <= 1).all() and np.all(res.winners.sum(axis=0) == 1)


def test_extraction_is_deterministic(model, prompt):
    subjects = [SubjectSpec("a", (1, 2)), SubjectSpec("b", (5,)), SubjectSpec("c", (7,))]
    a = extract_priors(model, prompt, subjects, PriorParams(), noise_seed=8)
    b = extract_priors(model, prompt, subjects, PriorParams(), noise_seed=8)
    assert a.priors.tobytes() == b.priors.tobytes() and a.smoothed.tobytes() == b.smoothed.tobytes()


def test_default_capture_block_is_last_double(cfg):
    assert PriorParams().capture_block is None
    assert cfg.last_double_block == cfg.double_blocks - 1


def test_capture_block_must_be_double(model, prompt, cfg):
    with pytest.raises(ParameterError):
        extract_priors(model, prompt, [SubjectSpec("a", (1,))], PriorParams(capture_block=cfg.double_blocks))


def test_subject_validation(model, prompt):
    with pytest.raises(ParameterError):
        extract_priors(model, prompt, [], PriorParams())
    with pytest.raises(ParameterError):
        extract_priors(model, prompt, [SubjectSpec("a", ())], PriorParams())
    with pytest.raises(ParameterError):
        extract_priors(model, prompt, [SubjectSpec("a", (99,))], PriorParams())


@pytest.mark.parametrize("kwargs", [dict(gamma=0.0), dict(tau=1.0), dict(kernel_size=4), dict(max_passes=0)])
def test_param_validation(kwargs):
    with pytest.raises(ParameterError):
        PriorParams(**kwargs).validate()


def test_deeper_model_captures_its_last_double_block():
    cfg = ModelConfig(double_blocks=3, single_blocks=1, seed=4)
    m = init_model(cfg)
    res = extract_priors(m, synthetic_prompt(cfg, 1), [SubjectSpec("a", (0,))], PriorParams())
    assert res.priors.shape == (1, cfg.height, cfg.width)


# dumps

def test_pgm_and_raw_dumps(tmp_path, rng):
    mask = (rng.random((5, 7)) > 0.5).astype(np.uint8)
    write_pgm(mask, tmp_path / "m.pgm")
    data = (tmp_path / "m.pgm").read_bytes()
    assert data.startswith(b"P5\n7 5\n255\n") and len(data) == len(b"P5\n7 5\n255\n") + 35
    assert np.array_equal(read_pgm(tmp_path / "m.pgm") > 0, mask > 0)
    grid = rng.random((5, 7))
    write_raw(grid, tmp_path / "g.f32")
    raw = (tmp_path / "g.f32").read_bytes()
    assert raw[:8] == b"\x05\x00\x00\x00\x07\x00\x00\x00" and len(raw) == 8 + 4 * 35
    assert np.array_equal(read_raw(tmp_path / "g.f32"), grid.astype(np.float32).astype(np.float64))
