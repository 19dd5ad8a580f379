"""A miniature multi-modal rectified-flow transformer.

The network has ``double_blocks`` double-stream blocks (separate text/image
weights, joint attention over the concatenated tokens) followed by
``single_blocks`` single-stream blocks sharing one weight set over the
concatenation. Every block has two sublayers, attention (1) and MLP (2), each
producing a residual that is added through a skip connection. Blocks are
indexed globally: doubles are ``0..D-1``, singles ``D..D+G-1``.

Concatenation order is text first, image second.

Linear weights are stored ``(d_out, k_in)`` and applied as ``x @ W.T``.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import FormatError, ParameterError, ShapeError
from .tensor_math import gelu, layer_norm, matmul, row_softmax

LINEAR_NAMES = ("mod", "q", "k", "v", "o", "fc1", "fc2")
DOUBLE_STREAMS = ("text", "image")
SINGLE_STREAM = "joint"


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    heads: int = 4
    head_dim: int = 8
    height: int = 8
    width: int = 8
    prompt_len: int = 8
    double_blocks: int = 2
    single_blocks: int = 2
    mlp_ratio: int = 2
    seed: int = 0

    @property
    def image_tokens(self) -> int:
        return self.height * self.width

    @property
    def blocks(self) -> int:
        return self.double_blocks + self.single_blocks

    @property
    def last_double_block(self) -> int:
        return self.double_blocks - 1

    def validate(self):
        ints = [self.channels, self.heads, self.head_dim, self.height, self.width,
                self.prompt_len, self.double_blocks, self.single_blocks, self.mlp_ratio, self.seed]
        if any(not isinstance(v, (int, np.integer)) or isinstance(v, bool) for v in ints):
            raise ParameterError("model config fields must be integers")
        if self.channels != self.heads * self.head_dim:
            raise ParameterError(
                f"channels ({self.channels}) must equal heads x head_dim ({self.heads} x {self.head_dim})")
        if self.heads < 1 or self.head_dim < 1:
            raise ParameterError("heads and head_dim must be positive")
        if self.double_blocks < 1 or self.single_blocks < 0:
            raise ParameterError("need at least one double block and a non-negative single block count")
        if self.height < 2 or self.width < 2:
            raise ParameterError("image grid must be at least 2x2")
        if self.prompt_len < 1 or self.mlp_ratio < 1:
            raise ParameterError("prompt_len and mlp_ratio must be positive")
        if not 0 <= self.seed < 2**64:
            raise ParameterError("seed must fit in an unsigned 64-bit integer")
        return self


def block_streams(cfg: ModelConfig, block: int) -> tuple[str, ...]:
    return DOUBLE_STREAMS if block < cfg.double_blocks else (SINGLE_STREAM,)


def weight_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    """Names and shapes of every weight, in initialisation and file order."""
    c = cfg.channels
    m = c * cfg.mlp_ratio
    shapes = {"mod": (c, c), "q": (c, c), "k": (c, c), "v": (c, c), "o": (c, c),
              "fc1": (m, c), "fc2": (c, m)}
    layout = [("time.proj", (c, c)), ("embed.image", (c, c))]
    for block in range(cfg.blocks):
        for stream in block_streams(cfg, block):
            layout.extend((f"block.{block}.{stream}.{name}", shapes[name]) for name in LINEAR_NAMES)
    layout.append(("head.out", (c, c)))
    return layout


# Output projections feeding skip connections start smaller so the toy
# velocity field stays smooth in t.
_GAIN = {"o": 0.5, "fc2": 0.5, "mod": 0.5}


class Model:
    """Immutable weight container plus config."""

    def __init__(self, cfg: ModelConfig, weights: dict[str, np.ndarray]):
        cfg.validate()
        layout = weight_layout(cfg)
        missing = [n for n, _ in layout if n not in weights]
        if missing:
            raise ShapeError(f"missing weights: {missing[:4]}")
        self.cfg = cfg
        self.weights = {}
        for name, shape in layout:
            w = np.array(weights[name], dtype=np.float64)
            if w.shape != shape:
                raise ShapeError(f"weight {name} has shape {w.shape}, expected {shape}")
            w.setflags(write=False)
            self.weights[name] = w

    def with_weights(self, overrides: dict[str, np.ndarray]) -> "Model":
        merged = dict(self.weights)
        merged.update(overrides)
        return Model(self.cfg, merged)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, _ in weight_layout(self.cfg):
            h.update(self.weights[name].astype("<f8").tobytes())
        return h.hexdigest()

    def sublayer(self, block, sublayer, inputs, temb, weights=None, capture=False):
        """Residuals of one sublayer for every stream of ``block``.

        ``inputs`` maps stream name to its token matrix; ``weights`` defaults
        to the model's own. Returns ``(residuals, capture_or_None)``.
        """
        w = self.weights if weights is None else weights
        streams = block_streams(self.cfg, block)
        hidden = {}
        for s in streams:
            mod = matmul(temb[None, :], w[f"block.{block}.{s}.mod"].T)
            hidden[s] = layer_norm(inputs[s]) + mod
        if sublayer == 2:
            out = {}
            for s in streams:
                p = f"block.{block}.{s}."
                out[s] = matmul(gelu(matmul(hidden[s], w[p + "fc1"].T)), w[p + "fc2"].T)
            return out, None
        if sublayer != 1:
            raise ParameterError(f"unknown sublayer {sublayer}")
        q, k, v = (np.concatenate([matmul(hidden[s], w[f"block.{block}.{s}.{n}"].T) for s in streams])
                   for n in ("q", "k", "v"))
        q, k, v = (self._split_heads(a) for a in (q, k, v))
        scale = 1.0 / math.sqrt(self.cfg.head_dim)
        probs = row_softmax(matmul(q, np.swapaxes(k, -1, -2)) * scale)
        mixed = self._merge_heads(matmul(probs, v))
        out, start = {}, 0
        for s in streams:
            rows = inputs[s].shape[0]
            out[s] = matmul(mixed[start : start + rows], w[f"block.{block}.{s}.o"].T)
            start += rows
        cap = None
        if capture:
            t = self.cfg.prompt_len
            cap = AttentionCapture(block=block, image_queries=q[:, t:, :].copy(), text_keys=k[:, :t, :].copy())
        return out, cap

    def _split_heads(self, a):
        rows = a.shape[0]
        return a.reshape(rows, self.cfg.heads, self.cfg.head_dim).transpose(1, 0, 2)

    def _merge_heads(self, a):
        return a.transpose(1, 0, 2).reshape(a.shape[1], self.cfg.channels)


def init_model(cfg: ModelConfig) -> Model:
    """Seeded weights: one PCG64 stream seeded with ``cfg.seed``; arrays are
    drawn in :func:`weight_layout` order as standard normals scaled by
    ``gain / sqrt(fan_in)``."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    weights = {}
    for name, shape in weight_layout(cfg):
        gain = _GAIN.get(name.rsplit(".", 1)[-1], 1.0)
        weights[name] = rng.standard_normal(shape) * (gain / math.sqrt(shape[1]))
    return Model(cfg, weights)


def zero_model(cfg: ModelConfig) -> Model:
    return Model(cfg, {name: np.zeros(shape) for name, shape in weight_layout(cfg)})


@dataclass
class TokenState:
    text: np.ndarray
    image: np.ndarray
    temb: np.ndarray


@dataclass
class ResidualRecord:
    block: int
    sublayer: int
    stream: str
    values: np.ndarray

    @property
    def key(self):
        return (self.block, self.sublayer, self.stream)


@dataclass
class AttentionCapture:
    block: int
    image_queries: np.ndarray  # (heads, S, d)
    text_keys: np.ndarray  # (heads, T, d)


class Site(NamedTuple):
    block: int
    sublayer: int


# hook(site, inputs, temb, residuals) -> residuals
SublayerHook = Callable[[Site, dict, np.ndarray, dict], dict]


def _check_state(cfg, state):
    c = cfg.channels
    if state.text.shape != (cfg.prompt_len, c):
        raise ShapeError(f"text tokens {state.text.shape}, expected {(cfg.prompt_len, c)}")
    if state.image.shape != (cfg.image_tokens, c):
        raise ShapeError(f"image tokens {state.image.shape}, expected {(cfg.image_tokens, c)}")
    if state.temb.shape != (c,):
        raise ShapeError(f"timestep embedding {state.temb.shape}, expected {(c,)}")


def _wanted(taps, block):
    if taps is None or taps is False:
        return False
    if taps is True or taps == "all":
        return True
    return block in taps


def forward_pass(model: Model, state: TokenState, taps=None, capture=(), hook: SublayerHook | None = None):
    """Run all blocks.

    ``taps`` selects blocks whose residuals are recorded (``True`` for all);
    ``capture`` lists blocks whose attention queries/keys are captured.
    ``hook`` may replace each sublayer's residuals before the skip add.
    Returns ``(state, records, captures)``.
    """
    cfg = model.cfg
    _check_state(cfg, state)
    text, image, temb = state.text, state.image, state.temb
    records, captures = [], []
    for block in range(cfg.double_blocks):
        for sub in (1, 2):
            inputs = {"text": text, "image": image}
            res, cap = model.sublayer(block, sub, inputs, temb, capture=(sub == 1 and block in capture))
            if hook is not None:
                res = hook(Site(block, sub), inputs, temb, res)
            if cap is not None:
                captures.append(cap)
            if _wanted(taps, block):
                records.extend(ResidualRecord(block, sub, s, res[s]) for s in DOUBLE_STREAMS)
            text = text + res["text"]
            image = image + res["image"]
    if cfg.single_blocks:
        joint = np.concatenate([text, image])
        for block in range(cfg.double_blocks, cfg.blocks):
            for sub in (1, 2):
                inputs = {SINGLE_STREAM: joint}
                res, _ = model.sublayer(block, sub, inputs, temb)
                if hook is not None:
                    res = hook(Site(block, sub), inputs, temb, res)
                if _wanted(taps, block):
                    records.append(ResidualRecord(block, sub, SINGLE_STREAM, res[SINGLE_STREAM]))
                joint = joint + res[SINGLE_STREAM]
        text, image = joint[: cfg.prompt_len], joint[cfg.prompt_len :]
    return TokenState(text, image, temb), records, captures


def recompose(state: TokenState, records: list[ResidualRecord], cfg: ModelConfig) -> TokenState:
    """Re-add recorded residuals along the skip topology."""
    text, image = state.text, state.image
    joint = None
    for rec in records:
        if rec.stream == "text":
            text = text + rec.values
        elif rec.stream == "image":
            image = image + rec.values
        else:
            if joint is None:
                joint = np.concatenate([text, image])
            joint = joint + rec.values
    if joint is not None:
        text, image = joint[: cfg.prompt_len], joint[cfg.prompt_len :]
    return TokenState(text, image, state.temb)


def _sinusoid(values, channels):
    half = channels // 2
    freqs = np.exp(-math.log(100.0) * np.arange(half) / half)
    args = np.multiply.outer(np.asarray(values, dtype=np.float64), freqs) * math.pi
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def positional_embedding(cfg: ModelConfig) -> np.ndarray:
    """Fixed 2-D sinusoidal positions, row-major over the image grid, (S, C)."""
    c = cfg.channels
    ys, xs = np.meshgrid(np.arange(cfg.height), np.arange(cfg.width), indexing="ij")
    ey = _sinusoid(ys.ravel() / cfg.height, c // 2)
    ex = _sinusoid(xs.ravel() / cfg.width, c - c // 2)
    return np.concatenate([ey, ex], axis=1)


def timestep_embedding(model: Model, t: float) -> np.ndarray:
    return matmul(_sinusoid([t], model.cfg.channels), model.weights["time.proj"].T)[0]


def synthetic_prompt(cfg: ModelConfig, seed: int) -> np.ndarray:
    """Seeded stand-in for encoded prompt tokens, (T, C)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal((cfg.prompt_len, cfg.channels))


def noise_latent(cfg: ModelConfig, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal((cfg.image_tokens, cfg.channels))


def embed(model: Model, z: np.ndarray, t: float, prompt: np.ndarray) -> TokenState:
    cfg = model.cfg
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (cfg.image_tokens, cfg.channels):
        raise ShapeError(f"latent {z.shape}, expected {(cfg.image_tokens, cfg.channels)}")
    image = matmul(z, model.weights["embed.image"].T) + positional_embedding(cfg)
    return TokenState(np.asarray(prompt, dtype=np.float64), image, timestep_embedding(model, t))


def run_velocity(model: Model, z, t: float, prompt, hook=None, taps=None, capture=()):
    """Velocity plus the forward pass's records and captures.

    The head reads the accumulated change of the image tokens, so a pass whose
    residuals are all zero yields zero velocity.
    """
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"flow time must lie in [0, 1], got {t!r}")
    state = embed(model, z, t, prompt)
    out, records, captures = forward_pass(model, state, taps=taps, capture=capture, hook=hook)
    v = matmul(out.image - state.image, model.weights["head.out"].T)
    return v, records, captures


def velocity(model: Model, z, t: float, prompt, hook=None) -> np.ndarray:
    return run_velocity(model, z, t, prompt, hook=hook)[0]


def time_grid(steps: int, reverse: bool = True) -> np.ndarray:
    """Uniform grid from 1 to 0 (denoising) or 0 to 1 (inversion)."""
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    return np.linspace(1.0, 0.0, steps + 1) if reverse else np.linspace(0.0, 1.0, steps + 1)


def euler_integrate(field_fn, z, grid):
    """``z <- z + (grid[i+1] - grid[i]) * field_fn(z, grid[i], i)`` along ``grid``."""
    z = np.asarray(z, dtype=np.float64)
    for i in range(len(grid) - 1):
        t, t_next = float(grid[i]), float(grid[i + 1])
        z = z + (t_next - t) * field_fn(z, t, i)
    return z


def flow_denoise(model: Model, z1, steps: int, prompt, hook=None):
    """Euler integration from t=1 to t=0.

    ``hook(step, t)`` may return a sublayer hook (or ``None``) for that step.
    """
    def field_fn(z, t, i):
        return velocity(model, z, t, prompt, hook=None if hook is None else hook(i, t))

    return euler_integrate(field_fn, z1, time_grid(steps))


def flow_invert(model: Model, z0, steps: int, prompt):
    """First-order inversion: forward Euler from t=0 to t=1."""
    return euler_integrate(lambda z, t, i: velocity(model, z, t, prompt), z0, time_grid(steps, reverse=False))


# Checkpoint file: little-endian.
#   magic b"MDIT" | version u32 | field count u32 | fields u64 x count
#   | array count u32 | arrays as float64, row-major, in weight_layout order
CHECKPOINT_MAGIC = b"MDIT"
CHECKPOINT_VERSION = 1
_CONFIG_FIELDS = ("channels", "heads", "head_dim", "height", "width", "prompt_len",
                  "double_blocks", "single_blocks", "mlp_ratio", "seed")


def save_checkpoint(model: Model, path):
    cfg = model.cfg
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(_CONFIG_FIELDS))]
    parts.append(struct.pack(f"<{len(_CONFIG_FIELDS)}Q", *(getattr(cfg, f) for f in _CONFIG_FIELDS)))
    layout = weight_layout(cfg)
    parts.append(struct.pack("<I", len(layout)))
    parts.extend(model.weights[name].astype("<f8").tobytes() for name, _ in layout)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(data) < 12:
        raise FormatError("truncated checkpoint header", len(data))
    version, nfields = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if nfields != len(_CONFIG_FIELDS):
        raise FormatError(f"expected {len(_CONFIG_FIELDS)} config fields, found {nfields}", 8)
    off = 12
    if len(data) < off + 8 * nfields + 4:
        raise FormatError("truncated config block", len(data))
    values = struct.unpack_from(f"<{nfields}Q", data, off)
    off += 8 * nfields
    try:
        cfg = ModelConfig(**{f: int(v) for f, v in zip(_CONFIG_FIELDS, values)}).validate()
    except ParameterError as exc:
        raise FormatError(f"invalid config block: {exc}", 12) from exc
    (narrays,) = struct.unpack_from("<I", data, off)
    layout = weight_layout(cfg)
    if narrays != len(layout):
        raise FormatError(f"expected {len(layout)} arrays, found {narrays}", off)
    off += 4
    weights = {}
    for name, shape in layout:
        nbytes = 8 * shape[0] * shape[1]
        if off + nbytes > len(data):
            raise FormatError(f"truncated array {name}", off)
        weights[name] = np.frombuffer(data, dtype="<f8", count=shape[0] * shape[1], offset=off).reshape(shape)
        off += nbytes
    if off != len(data):
        raise FormatError("trailing bytes after last array", off)
    return Model(cfg, weights)
