"""Prior-guided residual blending across several adapters.

At every sublayer the base model and each adapter are evaluated on the same
block inputs. Image tokens claimed by a subject take the prior-weighted sum
of the adapter residuals; prompt tokens and unclaimed image tokens keep the
base residual. Blending starts once the flow time drops to the gate ``t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .adapters import AdapterBundle
from .errors import ContractError, ParameterError, ShapeError
from .mmdit import Model, ResidualRecord, Site, flow_denoise, flow_invert
from .priors import PriorParams, PriorResult, extract_priors


@dataclass(frozen=True)
class BlendConfig:
    t: float = 0.90
    eps: float = 1e-6
    prompt_len: int = 8
    image_tokens: int = 64

    @classmethod
    def for_model(cls, model: Model, t: float = 0.90, eps: float = 1e-6) -> "BlendConfig":
        return cls(t=t, eps=eps, prompt_len=model.cfg.prompt_len, image_tokens=model.cfg.image_tokens)

    def validate(self):
        if not 0.0 <= self.t <= 1.0:
            raise ParameterError(f"gate t must lie in [0, 1], got {self.t}")
        if not self.eps > 0:
            raise ParameterError(f"eps must be positive, got {self.eps}")
        return self

    def image_rows(self, stream: str) -> np.ndarray:
        """Record rows holding image tokens, in token order."""
        if stream == "text":
            return np.arange(0)
        if stream == "image":
            return np.arange(self.image_tokens)
        if stream == "joint":
            return np.arange(self.prompt_len, self.prompt_len + self.image_tokens)
        raise ContractError(f"unknown stream {stream!r}")


@dataclass
class BlendWeights:
    alpha: np.ndarray  # (S, N)
    claims: np.ndarray  # (S,) number of subjects claiming each token
    eps: float


def alpha_weights(priors, eps: float = 1e-6) -> BlendWeights:
    """``alpha[p, k] = prior_k(p) / (sum_u prior_u(p) + eps)``; priors flattened row-major."""
    priors = np.asarray(priors, dtype=np.float64)
    flat = priors.reshape(priors.shape[0], -1)
    total = np.zeros(flat.shape[1])
    for row in flat:
        total = total + row
    alpha = np.stack([row / (total + eps) for row in flat], axis=1)
    return BlendWeights(alpha, total, eps)


def blend_residual(base: ResidualRecord, adapters: list[ResidualRecord], weights: BlendWeights,
                   cfg: BlendConfig) -> ResidualRecord:
    n = weights.alpha.shape[1]
    if len(adapters) != n:
        raise ContractError(f"{len(adapters)} adapter records for {n} subjects")
    for rec in adapters:
        if rec.key != base.key:
            raise ContractError(f"record {rec.key} does not match base {base.key}")
        if rec.values.shape != base.values.shape:
            raise ShapeError(f"record {rec.key} values {rec.values.shape} vs base {base.values.shape}")
    rows = cfg.image_rows(base.stream)
    out = base.values.copy()
    if rows.size == 0:
        return ResidualRecord(base.block, base.sublayer, base.stream, out)
    if weights.alpha.shape[0] != rows.size:
        raise ShapeError(f"weights cover {weights.alpha.shape[0]} tokens, record has {rows.size} image rows")
    acc = 0.0
    for k, rec in enumerate(adapters):
        acc = acc + weights.alpha[:, k : k + 1] * rec.values[rows]
    claimed = weights.claims > 0
    out[rows[claimed]] = acc[claimed]
    return ResidualRecord(base.block, base.sublayer, base.stream, out)


@dataclass
class BlendTrace:
    """Per-run bookkeeping: gate status per step and forward-pass counters."""

    gates: list[dict] = field(default_factory=list)
    base_forwards: int = 0
    adapter_forwards: list[int] = field(default_factory=list)

    def to_dict(self):
        return {"gates": self.gates, "base_forwards": self.base_forwards,
                "adapter_forwards": list(self.adapter_forwards)}


# observer(step, t, site, base_record, blended_record)
Observer = Callable[[int, float, Site, ResidualRecord, ResidualRecord], None]


def blend_hook(model: Model, merged: list[dict], weights: BlendWeights, cfg: BlendConfig,
               on_site: Callable | None = None):
    """Sublayer hook that swaps in blended residuals.

    ``merged`` holds one full weight dict per subject, in subject order.
    """
    def hook(site, inputs, temb, residuals):
        per_adapter = [model.sublayer(site.block, site.sublayer, inputs, temb, weights=w)[0] for w in merged]
        out = {}
        for stream, base_values in residuals.items():
            base = ResidualRecord(site.block, site.sublayer, stream, base_values)
            recs = [ResidualRecord(site.block, site.sublayer, stream, r[stream]) for r in per_adapter]
            blended = blend_residual(base, recs, weights, cfg)
            if on_site is not None:
                on_site(site, base, blended)
            out[stream] = blended.values
        return out

    return hook


def blended_denoise(model: Model, bundles: list[AdapterBundle], priors, z1, steps: int, cfg: BlendConfig,
                    prompt, trace: BlendTrace | None = None, observer: Observer | None = None):
    """Euler denoising where steps at flow time ``<= cfg.t`` blend adapter residuals."""
    cfg.validate()
    n = len(bundles)
    if n == 0:
        raise ParameterError("blended_denoise needs at least one adapter")
    priors = np.asarray(priors)
    if priors.shape[0] != n:
        raise ParameterError(f"{n} adapters but {priors.shape[0]} priors")
    if priors[0].size != model.cfg.image_tokens:
        raise ShapeError(f"priors cover {priors[0].size} cells, model has {model.cfg.image_tokens} image tokens")
    merged = [b.merged_weights(model) for b in bundles]
    weights = alpha_weights(priors, cfg.eps)
    if trace is None:
        trace = BlendTrace()
    trace.adapter_forwards = [0] * n

    def step_hook(i, t):
        trace.base_forwards += 1
        is_open = t <= cfg.t
        trace.gates.append({"step": i, "time": t, "open": is_open})
        if not is_open:
            return None

        def on_site(site, base, blended):
            if observer is not None:
                observer(i, t, site, base, blended)

        blend = blend_hook(model, merged, weights, cfg, on_site)

        def counted(site, inputs, temb, residuals):
            if site == (0, 1):
                for k in range(n):
                    trace.adapter_forwards[k] += 1
            return blend(site, inputs, temb, residuals)

        return counted

    return flow_denoise(model, z1, steps, prompt, hook=step_hook)


@dataclass
class EditResult:
    latent: np.ndarray
    inverted: np.ndarray
    priors: PriorResult
    trace: BlendTrace


def edit_image(model: Model, bundles, subjects, z0, steps: int, params: PriorParams, cfg: BlendConfig,
               prompt, make_observer: Callable[[PriorResult], Observer] | None = None) -> EditResult:
    """Invert the input latent, extract priors along the recovered noise, then blend-denoise.

    ``make_observer`` receives the extracted priors and returns an observer
    for the blended run.
    """
    if len(bundles) == 0:
        raise ParameterError("edit_image needs at least one adapter")
    z1 = flow_invert(model, z0, steps, prompt)
    prior = extract_priors(model, prompt, subjects, params, z1=z1, steps=steps)
    trace = BlendTrace()
    observer = None if make_observer is None else make_observer(prior)
    out = blended_denoise(model, bundles, prior.priors, z1, steps, cfg, prompt, trace=trace, observer=observer)
    return EditResult(out, z1, prior, trace)
