"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored.  Ranges are written ``lo,hi``.
Unknown keys are rejected, and each value is checked against the owning
module's preconditions when the config is turned into module objects.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .datagen import NoiseConfig, SamplingRanges


class ConfigError(ValueError):
    pass


ENV_VAR = "NPSEG_CONFIG"


@dataclass(frozen=True)
class RunConfig:
    # data generation
    noise_inputs: float = 0.01
    noise_output: float = 0.02
    m_range: tuple = (1.7, 2.6)
    n_range: tuple = (1.6, 2.6)
    rho_w_range: tuple = (0.025, 0.06)
    cec_range: tuple = (10.0, 100.0)
    cec_zero_prob: float = 0.5
    phi_range: tuple = (0.05, 0.35)
    sw_range: tuple = (0.2, 1.0)
    fclay_range: tuple = (0.0, 0.4)
    temperature: float = 25.0
    b_override: Optional[float] = None
    block_length: int = 50
    smooth_width: int = 10
    # segmentation
    l_min: int = 5
    restarts: int = 10
    max_iters: int = 25
    eps_rel: float = 0.02
    context_cap: int = 100
    mc_samples: int = 0
    fit_restarts: int = 8
    fit_iters: int = 500
    # training
    epochs: int = 100
    sets_per_epoch: int = 3000
    lr: float = 1e-3
    n_points: int = 200
    context_min: int = 50
    context_max: int = 100
    # run
    seed: int = 0
    threads: int = 0  # 0 = all available cores

    def noise(self) -> NoiseConfig:
        return NoiseConfig(self.noise_inputs, self.noise_output)

    def ranges(self) -> SamplingRanges:
        return SamplingRanges(
            m=self.m_range, n=self.n_range, rho_w=self.rho_w_range, cec=self.cec_range,
            cec_zero_prob=self.cec_zero_prob, phi=self.phi_range, sw=self.sw_range,
            f_clay=self.fclay_range, temperature_c=self.temperature, b_coeff=self.b_override,
        )

    def validate(self) -> "RunConfig":
        try:
            self.noise()
            self.ranges()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        positive = ("l_min", "restarts", "max_iters", "context_cap", "fit_restarts", "fit_iters",
                    "epochs", "sets_per_epoch", "n_points", "block_length", "context_min")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.context_max < self.context_min:
            raise ConfigError("context_max must be >= context_min")
        if self.context_max > self.n_points:
            raise ConfigError("context_max must not exceed n_points")
        for key in ("mc_samples", "smooth_width", "threads"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not self.eps_rel >= 0:
            raise ConfigError("eps_rel must be non-negative")
        return self

    def thread_count(self) -> int:
        return self.threads or (os.cpu_count() or 1)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    default = _FIELDS[key].default
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            parts = [float(p) for p in raw.split(",")]
            if len(parts) != 2:
                raise ValueError("expected lo,hi")
            return tuple(parts)
        if key == "b_override":
            return None if raw.lower() in ("", "none") else float(raw)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def parse_config(text: str, base: RunConfig = RunConfig(), source: str = "<config>") -> RunConfig:
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        updates[key] = _convert(key, value)
    return replace(base, **updates).validate()


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the file (``path`` or ``$NPSEG_CONFIG``), then explicit overrides."""
    cfg = RunConfig()
    path = path or os.environ.get(ENV_VAR)
    if path:
        p = Path(path)
        cfg = parse_config(p.read_text(encoding="utf-8"), cfg, str(p))
    if overrides:
        unknown = set(overrides) - set(_FIELDS)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}")
        cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name in _FIELDS:
        v = getattr(cfg, name)
        if isinstance(v, tuple):
            v = ",".join(repr(float(t)) for t in v)
        elif v is None:
            v = "none"
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"
