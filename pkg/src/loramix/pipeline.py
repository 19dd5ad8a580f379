"""Run configuration, command implementations, and run reports.

A run is described by one JSON file (see ``docs/formats.md`` and
``configs/default.json``). Relative paths inside it resolve against the
directory holding the config. Every command writes ``report.json`` into the
output directory, on failure as well as success.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import load_adapter
from .blending import BlendConfig, BlendTrace, blended_denoise, edit_image
from .errors import FormatError, LoramixError, ParameterError
from .io import read_raw, write_pgm, write_raw
from .mmdit import (Model, ModelConfig, flow_denoise, init_model, load_checkpoint,
                    noise_latent, synthetic_prompt)
from .priors import PriorParams, SubjectSpec, extract_priors

log = logging.getLogger("loramix")

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2


class ConfigError(LoramixError):
    pass


class InvariantViolation(LoramixError):
    pass


@dataclass
class SubjectBinding:
    name: str
    tokens: list[int]
    adapter: str


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint: str | None = None
    subjects: list[SubjectBinding] = field(default_factory=list)
    prompt_seed: int = 1
    noise_seed: int = 2
    steps: int = 16
    t: float = 0.90
    gamma: float = 0.94
    tau: float = 0.7
    kernel_size: int = 3
    sigma: float = 1.0
    max_passes: int = 16
    eps: float = 1e-6
    capture_block: int | None = None
    out: str = "out"
    base_dir: str = "."

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def prior_params(self) -> PriorParams:
        return PriorParams(gamma=self.gamma, tau=self.tau, kernel_size=self.kernel_size, sigma=self.sigma,
                           max_passes=self.max_passes, capture_block=self.capture_block)

    def blend_config(self, model: Model) -> BlendConfig:
        return BlendConfig.for_model(model, t=self.t, eps=self.eps)

    def subject_specs(self) -> list[SubjectSpec]:
        return [SubjectSpec(s.name, tuple(s.tokens), s.adapter) for s in self.subjects]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def validate(self, need_subjects: bool = True):
        if need_subjects and not self.subjects:
            raise ConfigError("config lists no subjects")
        names = [s.name for s in self.subjects]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate subject names: {names}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.checkpoint is not None and not self.resolve(self.checkpoint).is_file():
            raise ConfigError(f"checkpoint file not found: {self.resolve(self.checkpoint)}")
        for s in self.subjects:
            if not self.resolve(s.adapter).is_file():
                raise ConfigError(f"adapter file not found: {self.resolve(s.adapter)}")
        try:
            self.prior_params().validate()
            if not 0.0 <= self.t <= 1.0 or not self.eps > 0:
                raise ParameterError(f"gate t must lie in [0, 1] and eps be positive (t={self.t}, eps={self.eps})")
            if self.checkpoint is None:
                self.model.validate()
        except ParameterError as exc:
            raise ConfigError(str(exc)) from exc
        return self


_SCALAR_KEYS = ("checkpoint", "prompt_seed", "noise_seed", "steps", "t", "gamma", "tau", "kernel_size",
                "sigma", "max_passes", "eps", "capture_block", "out")


def config_from_dict(raw: dict, base_dir=".") -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known = set(_SCALAR_KEYS) | {"model", "subjects", "params"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    flat = dict(raw.get("params", {}))
    flat.update({k: raw[k] for k in _SCALAR_KEYS if k in raw})
    bad = set(flat) - set(_SCALAR_KEYS)
    if bad:
        raise ConfigError(f"unknown params: {sorted(bad)}")
    try:
        model = ModelConfig(**raw.get("model", {}))
        subjects = [SubjectBinding(str(s["name"]), [int(t) for t in s["tokens"]], str(s["adapter"]))
                    for s in raw.get("subjects", [])]
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"malformed model or subjects section: {exc}") from exc
    return PipelineConfig(model=model, subjects=subjects, base_dir=str(base_dir), **flat)


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    cfg = config_from_dict(raw, base_dir=path.parent)
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg


@dataclass
class RunReport:
    command: str
    config: dict | None = None
    status: str = "ok"
    exit_code: int = EXIT_OK
    error: str | None = None
    timings: dict | None = None
    priors: list[dict] = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    gates: list[dict] = field(default_factory=list)
    residual_checks: dict | None = None
    metrics: dict = field(default_factory=dict)
    checksums: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def write(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        d = {k: v for k, v in dataclasses.asdict(self).items() if v is not None}
        (out_dir / "report.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


class _Stages:
    def __init__(self):
        self.times = {}

    def __call__(self, name):
        stages = self

        class _Timer:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                elapsed = time.perf_counter() - self.start
                stages.times[name] = round(elapsed, 6)
                log.info("stage %s took %.3fs", name, elapsed)

        return _Timer()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _build_model(cfg: PipelineConfig) -> Model:
    if cfg.checkpoint is not None:
        return load_checkpoint(cfg.resolve(cfg.checkpoint))
    return init_model(cfg.model)


def _load_bundles(cfg: PipelineConfig, model: Model):
    bundles = []
    for s in cfg.subjects:
        bundle = load_adapter(cfg.resolve(s.adapter))
        bundle.check_compatible(model)
        bundles.append(bundle)
    return bundles


def _write_priors(result, subjects, out: Path, report: RunReport):
    files = []
    for i, (spec, prior) in enumerate(zip(subjects, result.priors)):
        stem = f"prior_{i}_{spec.name}"
        write_pgm(prior, out / f"{stem}.pgm")
        write_raw(result.smoothed[i], out / f"{stem}.f32")
        files += [f"{stem}.pgm", f"{stem}.f32"]
        blob = result.blobs[i]
        report.priors.append({
            "subject": spec.name,
            "claimed_tokens": int(prior.sum()),
            "claimed_fraction": float(prior.mean()),
            "winner_tokens": int(result.winners[i].sum()),
            "blob_passes": blob.passes,
            "blob_components": blob.components,
            "blob_exhausted": blob.exhausted,
        })
    report.warnings.extend(result.warnings)
    overlap = result.priors.sum(axis=0)
    if overlap.max(initial=0) > 1:
        raise InvariantViolation("subject priors overlap")
    if result.winners.sum(axis=0).min() != 1 or result.winners.sum(axis=0).max() != 1:
        raise InvariantViolation("argmax winners do not partition the grid")
    return files


def _residual_checker(priors, blend_cfg):
    """Observer asserting prompt and unclaimed image rows keep base residuals bitwise."""
    claimed = np.asarray(priors).reshape(len(priors), -1).sum(axis=0) > 0
    stats = {"records": 0, "violations": 0, "steps_checked": set()}

    def observer(step, t, site, base, blended):
        stats["records"] += 1
        stats["steps_checked"].add(step)
        rows = blend_cfg.image_rows(base.stream)
        keep = np.ones(base.values.shape[0], dtype=bool)
        if rows.size:
            keep[rows[claimed]] = False
        if not np.array_equal(base.values[keep], blended.values[keep]):
            stats["violations"] += 1

    return observer, stats


def cmd_prior(cfg: PipelineConfig, out: Path, report: RunReport, stages: _Stages):
    cfg.validate()
    with stages("load"):
        model = _build_model(cfg)
        _load_bundles(cfg, model)
    prompt = synthetic_prompt(model.cfg, cfg.prompt_seed)
    subjects = cfg.subject_specs()
    with stages("priors"):
        result = extract_priors(model, prompt, subjects, cfg.prior_params(), noise_seed=cfg.noise_seed,
                                steps=cfg.steps)
    files = _write_priors(result, subjects, out, report)
    report.metrics["capture_step"] = result.capture_step
    report.metrics["capture_time"] = result.capture_time
    return files


def cmd_gen(cfg: PipelineConfig, out: Path, report: RunReport, stages: _Stages):
    cfg.validate()
    with stages("load"):
        model = _build_model(cfg)
        bundles = _load_bundles(cfg, model)
    prompt = synthetic_prompt(model.cfg, cfg.prompt_seed)
    subjects = cfg.subject_specs()
    with stages("priors"):
        result = extract_priors(model, prompt, subjects, cfg.prior_params(), noise_seed=cfg.noise_seed,
                                steps=cfg.steps)
    files = _write_priors(result, subjects, out, report)
    blend_cfg = cfg.blend_config(model)
    observer, stats = _residual_checker(result.priors, blend_cfg)
    trace = BlendTrace()
    with stages("denoise"):
        z1 = noise_latent(model.cfg, cfg.noise_seed)
        latent = blended_denoise(model, bundles, result.priors, z1, cfg.steps, blend_cfg, prompt,
                                 trace=trace, observer=observer)
    write_raw(latent, out / "latent.f32")
    files.append("latent.f32")
    _record_trace(report, trace, stats)
    return files


def cmd_edit(cfg: PipelineConfig, out: Path, report: RunReport, stages: _Stages, input_path):
    cfg.validate()
    if input_path is None:
        raise ConfigError("edit needs an input latent (--input PATH)")
    input_path = Path(input_path)
    if not input_path.is_file():
        raise ConfigError(f"input latent not found: {input_path}")
    with stages("load"):
        model = _build_model(cfg)
        bundles = _load_bundles(cfg, model)
        z0 = read_raw(input_path)
    if z0.shape != (model.cfg.image_tokens, model.cfg.channels):
        raise FormatError(f"input latent is {z0.shape[0]}x{z0.shape[1]}, model expects "
                          f"{model.cfg.image_tokens}x{model.cfg.channels}", 0)
    prompt = synthetic_prompt(model.cfg, cfg.prompt_seed)
    subjects = cfg.subject_specs()
    blend_cfg = cfg.blend_config(model)
    checks = {}

    def make_observer(prior):
        checks["observer"], checks["stats"] = _residual_checker(prior.priors, blend_cfg)
        return checks["observer"]

    with stages("edit"):
        result = edit_image(model, bundles, subjects, z0, cfg.steps, cfg.prior_params(), blend_cfg, prompt,
                            make_observer=make_observer)
    with stages("roundtrip"):
        recon = flow_denoise(model, result.inverted, cfg.steps, prompt)
        report.metrics["roundtrip_rms"] = float(np.sqrt(np.mean((recon - z0) ** 2)))
    files = _write_priors(result.priors, subjects, out, report)
    write_raw(result.latent, out / "latent.f32")
    files.append("latent.f32")
    _record_trace(report, result.trace, checks["stats"])
    return files


def _record_trace(report, trace, stats):
    report.gates = trace.gates
    report.counters = {"base_forwards": trace.base_forwards, "adapter_forwards": trace.adapter_forwards}
    report.residual_checks = {"records": stats["records"], "violations": stats["violations"],
                              "steps_checked": len(stats["steps_checked"])}
    if stats["violations"]:
        raise InvariantViolation(f"{stats['violations']} blended records changed prompt or background rows")


COMMANDS = {"prior": cmd_prior, "gen": cmd_gen, "edit": cmd_edit}


def run_command(command: str, config_path=None, overrides: dict | None = None, input_path=None,
                timings: bool = False) -> int:
    """Run ``prior``/``gen``/``edit`` end to end; returns the exit code."""
    overrides = dict(overrides or {})
    report = RunReport(command)
    stages = _Stages()
    out = Path(overrides.get("out") or "out")
    try:
        if config_path is None:
            raise ConfigError("--config is required")
        cfg = load_config(config_path, overrides)
        out = Path(cfg.out) if overrides.get("out") else cfg.resolve(cfg.out)
        report.config = cfg.to_dict()
        out.mkdir(parents=True, exist_ok=True)
        fn = COMMANDS[command]
        files = fn(cfg, out, report, stages, input_path) if command == "edit" else fn(cfg, out, report, stages)
        report.checksums = {name: _sha256(out / name) for name in files}
    except (ConfigError, FormatError, OSError, ParameterError) as exc:
        report.status, report.exit_code, report.error = "error", EXIT_CONFIG, str(exc)
        log.error("%s", exc)
    except LoramixError as exc:
        report.status, report.exit_code, report.error = "error", EXIT_INVARIANT, str(exc)
        log.error("%s", exc)
    except Exception as exc:  # noqa: BLE001 - the report must still be written
        report.status, report.exit_code, report.error = "error", EXIT_INVARIANT, f"{type(exc).__name__}: {exc}"
        log.exception("unexpected failure")
    if timings:
        report.timings = stages.times
    try:
        report.write(out)
    except OSError as exc:
        log.error("could not write report to %s: %s", out, exc)
        return report.exit_code or EXIT_CONFIG
    return report.exit_code


def configure_logging():
    level = os.environ.get("LORAMIX_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
