"""Low-rank adapters: representation, binary I/O, merging, and forward passes.

Adapter file layout (all little-endian)::

    magic      4 bytes   b"LORA"
    version    u32       1
    name       u32 length + UTF-8 bytes
    trigger    i32       prompt token index, -1 when absent
    entries    u32       number of deltas
    per entry, in stored order:
        layer id   u32 length + UTF-8 bytes
        r          u32
        d_out      u32
        k_in       u32
        A          r * k_in float64, row-major
        B          d_out * r float64, row-major
        scale      float64
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CompatibilityError, FormatError, ShapeError
from .mmdit import Model, forward_pass
from .tensor_math import matmul

MAGIC = b"LORA"
VERSION = 1


@dataclass
class LoRADelta:
    layer: str
    A: np.ndarray  # (r, k_in)
    B: np.ndarray  # (d_out, r)
    scale: float = 1.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.A.ndim != 2 or self.B.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise ShapeError(f"{self.layer}: B {self.B.shape} and A {self.A.shape} do not chain")
        if self.rank > min(self.B.shape[0], self.A.shape[1]):
            raise ShapeError(f"{self.layer}: rank {self.rank} exceeds min(d_out, k_in)")
        self.scale = float(self.scale)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.B.shape[0], self.A.shape[1])

    def increment(self) -> np.ndarray:
        return self.scale * matmul(self.B, self.A)


@dataclass
class AdapterBundle:
    name: str
    deltas: dict[str, LoRADelta] = field(default_factory=dict)
    trigger: int | None = None

    def check_compatible(self, model: Model):
        bad = [layer for layer, d in self.deltas.items()
               if layer not in model.weights or model.weights[layer].shape != d.shape]
        if bad:
            raise CompatibilityError(bad)

    def merged_weights(self, model: Model) -> dict[str, np.ndarray]:
        """Full weight dict with every targeted layer replaced by W0 + scale*B*A."""
        self.check_compatible(model)
        weights = dict(model.weights)
        for layer, delta in self.deltas.items():
            weights[layer] = merge_weights(model.weights[layer], delta)
        return weights


def merge_weights(w0, delta: LoRADelta) -> np.ndarray:
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.shape != delta.shape:
        raise ShapeError(f"{delta.layer}: base weight {w0.shape} vs delta {delta.shape}")
    return w0 + delta.increment()


def random_bundle(model: Model, name: str, rank: int, seed: int, layers=None, scale: float = 1.0,
                  std: float = 0.3, trigger=None) -> AdapterBundle:
    """Seeded adapter over ``layers`` (default: every image/joint-stream projection)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    if layers is None:
        layers = [n for n in model.weights if n.startswith("block.") and ".text." not in n]
    deltas = {}
    for layer in layers:
        d_out, k_in = model.weights[layer].shape
        r = min(rank, d_out, k_in)
        A = rng.standard_normal((r, k_in)) * (std / np.sqrt(k_in))
        B = rng.standard_normal((d_out, r)) * (1.0 / np.sqrt(r))
        deltas[layer] = LoRADelta(layer, A, B, scale)
    return AdapterBundle(name, deltas, trigger)


def zero_bundle(model: Model, name: str, rank: int = 1, layers=None) -> AdapterBundle:
    if layers is None:
        layers = [n for n in model.weights if n.startswith("block.")]
    deltas = {}
    for layer in layers:
        d_out, k_in = model.weights[layer].shape
        deltas[layer] = LoRADelta(layer, np.zeros((rank, k_in)), np.zeros((d_out, rank)))
    return AdapterBundle(name, deltas)


def adapter_forward(model: Model, bundle: AdapterBundle, state, taps=True):
    """Forward pass with the bundle merged into a private weight copy.

    Returns the tapped residual records; ``model`` is left untouched.
    """
    merged = model.with_weights(bundle.merged_weights(model))
    _, records, _ = forward_pass(merged, state, taps=taps)
    return records


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_adapter(bundle: AdapterBundle) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(bundle.name),
             struct.pack("<i", -1 if bundle.trigger is None else bundle.trigger),
             struct.pack("<I", len(bundle.deltas))]
    for layer, d in bundle.deltas.items():
        d_out, k_in = d.shape
        parts.append(_pack_str(layer))
        parts.append(struct.pack("<III", d.rank, d_out, k_in))
        parts.append(d.A.astype("<f8").tobytes())
        parts.append(d.B.astype("<f8").tobytes())
        parts.append(struct.pack("<d", d.scale))
    return b"".join(parts)


def save_adapter(bundle: AdapterBundle, path):
    with open(path, "wb") as fh:
        fh.write(encode_adapter(bundle))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.data):
            raise FormatError(f"truncated {what}: need {n} bytes, have {len(self.data) - self.off}", self.off)
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what):
        (n,) = self.unpack("<I", what + " length")
        start = self.off
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} is not valid UTF-8", start) from exc

    def floats(self, count, what):
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def decode_adapter(data: bytes) -> AdapterBundle:
    rd = _Reader(data)
    if rd.take(4, "magic") != MAGIC:
        raise FormatError("bad adapter magic", 0)
    (version,) = rd.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported adapter version {version}", 4)
    name = rd.string("name")
    (trigger,) = rd.unpack("<i", "trigger")
    (count,) = rd.unpack("<I", "entry count")
    deltas = {}
    for _ in range(count):
        entry_at = rd.off
        layer = rd.string("layer id")
        shape_at = rd.off
        r, d_out, k_in = rd.unpack("<III", "shape table")
        if r == 0 or r > min(d_out, k_in):
            raise FormatError(f"layer {layer!r}: rank {r} invalid for {d_out}x{k_in}", shape_at)
        A = rd.floats(r * k_in, f"A of {layer!r}").reshape(r, k_in)
        B = rd.floats(d_out * r, f"B of {layer!r}").reshape(d_out, r)
        (scale,) = rd.unpack("<d", f"scale of {layer!r}")
        if layer in deltas:
            raise FormatError(f"duplicate layer {layer!r}", entry_at)
        deltas[layer] = LoRADelta(layer, A, B, scale)
    if rd.off != len(data):
        raise FormatError("trailing bytes after last entry", rd.off)
    return AdapterBundle(name, deltas, None if trigger < 0 else trigger)


def load_adapter(path) -> AdapterBundle:
    with open(path, "rb") as fh:
        return decode_adapter(fh.read())
