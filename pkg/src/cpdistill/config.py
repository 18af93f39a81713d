"""Run configuration: a flat, section-prefixed key-value file (JSON accepted
as an alternative ingress). Every knob named in the module design decisions is
settable here; unknown keys are rejected before any compute."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .distill import DistillConfig, Variant
from .sampler import SamplerConfig
from .schedule import ConfigError, NoiseSchedule


def _parse_bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_widths(s) -> tuple[int, ...]:
    if isinstance(s, (list, tuple)):
        return tuple(int(v) for v in s)
    out = tuple(int(v) for v in str(s).split(",") if v.strip())
    if not out:
        raise ConfigError(f"expected comma-separated widths, got {s!r}")
    return out


@dataclass
class RunConfig:
    task_id: str = "multimodal-reach"
    horizon: int = 16
    exec_horizon: int = 8
    episodes: int = 200
    eval_seeds: int = 200
    bimodal_samples: int = 4000
    bimodal_mu: float = 0.55
    bimodal_sigma: float = 0.04
    bimodal_weight: float = 0.5
    t_min: float = 0.002
    t_max: float = 80.0
    rho: float = 7.0
    n_mesh: int = 40
    hidden: tuple[int, ...] = (128, 128, 128)
    emb_width: int = 32
    teacher_dropout: float = 0.2
    teacher_lr: float = 1e-3
    teacher_batch: int = 256
    teacher_steps: int = 3000
    alpha: float = 1.0
    beta: float = 1.0
    variant: str = "ctm-local"
    max_span: int = 10
    dropout_s0: bool = True
    s_emb_width: int = 16
    distill_lr: float = 5e-4
    distill_batch: int = 256
    distill_steps: int = 3000
    sigma_init: float = 1.0
    k: int = 1
    mode: str = "discretized"
    seed: int = 0

    def validate(self) -> None:
        if self.exec_horizon < 1 or self.exec_horizon > self.horizon:
            raise ConfigError(
                f"task.exec_horizon must be in 1..{self.horizon}, got {self.exec_horizon}"
            )
        self.schedule()  # raises on bad mesh parameters
        self.distill_config()
        self.sampler_config()

    def schedule(self, sigma_data: float = 0.5) -> NoiseSchedule:
        return NoiseSchedule(
            t_min=self.t_min, t_max=self.t_max, rho=self.rho, n=self.n_mesh,
            sigma_data=sigma_data,
        )

    def distill_config(self) -> DistillConfig:
        try:
            variant = Variant(self.variant)
        except ValueError:
            raise ConfigError(
                f"unknown distill.variant {self.variant!r}, expected one of "
                f"{[v.value for v in Variant]}"
            ) from None
        return DistillConfig(
            alpha=self.alpha, beta=self.beta, variant=variant,
            max_span=self.max_span, dropout_s0=self.dropout_s0,
        )

    def sampler_config(self, k: int | None = None, mode: str | None = None) -> SamplerConfig:
        return SamplerConfig(
            sigma_init=self.sigma_init,
            k=self.k if k is None else k,
            mode=self.mode if mode is None else mode,
        )

    def digest(self) -> str:
        flat = {key: getattr(self, attr) for key, (attr, _) in KEYS.items()}
        blob = json.dumps(flat, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


KEYS: dict[str, tuple[str, object]] = {
    "task.id": ("task_id", str),
    "task.horizon": ("horizon", int),
    "task.exec_horizon": ("exec_horizon", int),
    "task.episodes": ("episodes", int),
    "task.eval_seeds": ("eval_seeds", int),
    "bimodal.samples": ("bimodal_samples", int),
    "bimodal.mu": ("bimodal_mu", float),
    "bimodal.sigma": ("bimodal_sigma", float),
    "bimodal.weight": ("bimodal_weight", float),
    "schedule.t_min": ("t_min", float),
    "schedule.t_max": ("t_max", float),
    "schedule.rho": ("rho", float),
    "schedule.n": ("n_mesh", int),
    "teacher.hidden": ("hidden", _parse_widths),
    "teacher.emb_width": ("emb_width", int),
    "teacher.dropout": ("teacher_dropout", float),
    "teacher.lr": ("teacher_lr", float),
    "teacher.batch": ("teacher_batch", int),
    "teacher.steps": ("teacher_steps", int),
    "distill.alpha": ("alpha", float),
    "distill.beta": ("beta", float),
    "distill.variant": ("variant", str),
    "distill.max_span": ("max_span", int),
    "distill.dropout_s0": ("dropout_s0", _parse_bool),
    "distill.s_emb_width": ("s_emb_width", int),
    "distill.lr": ("distill_lr", float),
    "distill.batch": ("distill_batch", int),
    "distill.steps": ("distill_steps", int),
    "sampler.sigma_init": ("sigma_init", float),
    "sampler.k": ("k", int),
    "sampler.mode": ("mode", str),
    "run.seed": ("seed", int),
}


def _flatten_json(obj, prefix="") -> dict:
    flat = {}
    for key, val in obj.items():
        dotted = f"{prefix}{key}"
        if isinstance(val, dict):
            flat.update(_flatten_json(val, f"{dotted}."))
        else:
            flat[dotted] = val
    return flat


def parse_config(path) -> RunConfig:
    """Parse and fully validate a config file; unknown keys are fatal."""
    text = Path(path).read_text()
    raw: dict[str, object]
    if text.lstrip().startswith("{"):
        raw = _flatten_json(json.loads(text))
    else:
        raw = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            raw[key.strip()] = value.strip()
    kwargs = {}
    for key, value in raw.items():
        if key not in KEYS:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        attr, parser = KEYS[key]
        try:
            kwargs[attr] = parser(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}: bad value for {key}: {e}") from e
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Canonical flat rendering (human-diffable)."""
    lines = []
    for key, (attr, _) in KEYS.items():
        val = getattr(cfg, attr)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        elif isinstance(val, bool):
            val = str(val).lower()
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
