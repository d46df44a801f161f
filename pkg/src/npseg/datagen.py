"""Synthetic petrophysical data: training realizations and labeled test series."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .physics import DEFAULT_TEMPERATURE_C, EQUATIONS, RockParams, sigma_model

# (m, n, rho_w, cec, equation) per label, in table order.
_WS3 = [
    (1.85, 1.7, 0.03, 0, "ARCHIE"),
    (2.0, 2.0, 0.03, 0, "ARCHIE"),
    (2.05, 2.0, 0.029, 30, "WS"),
    (2.3, 2.1, 0.031, 0, "ARCHIE"),
    (2.5, 2.2, 0.049, 80, "WS"),
    (2.0, 2.5, 0.05, 0, "ARCHIE"),
    (2.0, 1.9, 0.05, 0, "ARCHIE"),
    (2.1, 2.1, 0.051, 45, "WS"),
]
_WS2 = [
    (1.85, 1.8, 0.052, 0, "ARCHIE"),
    (2.1, 2.0, 0.052, 0, "ARCHIE"),
    (2.4, 2.3, 0.049, 80, "WS"),
    (1.9, 2.0, 0.051, 0, "ARCHIE"),
    (2.0, 1.95, 0.051, 30, "WS"),
    (2.0, 2.5, 0.05, 0, "ARCHIE"),
]
PRESET_TABLES = {
    "WS-1": [
        (2.1, 2.3, 0.052, 0, "ARCHIE"),
        (1.9, 1.8, 0.05, 0, "ARCHIE"),
        (1.8, 1.75, 0.052, 0, "ARCHIE"),
        (2.05, 1.9, 0.05, 0, "ARCHIE"),
        (2.2, 2.0, 0.048, 20, "WS"),
        (2.4, 2.1, 0.048, 60, "WS"),
    ],
    "WS-2": _WS2,
    "WS-2-smooth": _WS2,
    "WS-3": _WS3,
    "WS-3-smooth": _WS3,
    "SGS-1": [
        (2.0, 1.95, 0.051, 30, "SGS"),
        (1.85, 1.8, 0.052, 0, "WS"),
        (2.1, 2.0, 0.052, 0, "WS"),
        (2.4, 2.3, 0.049, 80, "SGS"),
        (2.4, 2.3, 0.049, 80, "WS"),
        (1.9, 2.0, 0.051, 0, "WS"),
        (2.0, 1.95, 0.051, 30, "WS"),
        (2.0, 2.5, 0.05, 0, "WS"),
    ],
    # The source table has no equation column; duplicated rows are split
    # between WS and SGS so every label is distinguishable, CEC-free rows use ARCHIE.
    "SGS-2": [
        (1.85, 1.7, 0.03, 0, "ARCHIE"),
        (2.0, 2.0, 0.03, 0, "ARCHIE"),
        (2.05, 2.0, 0.029, 30, "WS"),
        (2.3, 2.1, 0.031, 0, "ARCHIE"),
        (2.05, 2.0, 0.029, 30, "SGS"),
        (2.5, 2.2, 0.049, 80, "WS"),
        (2.0, 2.5, 0.05, 0, "ARCHIE"),
        (2.0, 1.9, 0.05, 0, "ARCHIE"),
        (2.5, 2.2, 0.049, 80, "SGS"),
        (2.1, 2.1, 0.051, 45, "WS"),
        (2.1, 2.1, 0.051, 45, "SGS"),
    ],
}
PRESET_NAMES = tuple(PRESET_TABLES)


@dataclass(frozen=True)
class SamplingRanges:
    m: tuple = (1.7, 2.6)
    n: tuple = (1.6, 2.6)
    rho_w: tuple = (0.025, 0.06)
    cec: tuple = (10.0, 100.0)
    cec_zero_prob: float = 0.5
    phi: tuple = (0.05, 0.35)
    sw: tuple = (0.2, 1.0)
    f_clay: tuple = (0.0, 0.4)
    temperature_c: float = DEFAULT_TEMPERATURE_C
    b_coeff: Optional[float] = None

    def __post_init__(self):
        for name in ("m", "n", "rho_w", "cec", "phi", "sw", "f_clay"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"range for {name} must satisfy lo < hi, got ({lo}, {hi})")
        if not 0.0 <= self.cec_zero_prob <= 1.0:
            raise ValueError("cec_zero_prob must lie in [0, 1]")
        if not (0.0 < self.phi[0] and self.phi[1] < 1.0):
            raise ValueError("phi range must lie inside (0, 1)")
        if not (0.0 < self.sw[0] and self.sw[1] <= 1.0):
            raise ValueError("sw range must lie inside (0, 1]")
        if not (0.0 <= self.f_clay[0] and self.f_clay[1] < 1.0):
            raise ValueError("f_clay range must lie inside [0, 1)")
        if self.rho_w[0] <= 0 or self.cec[0] < 0 or self.m[0] <= 0 or self.n[0] <= 0:
            raise ValueError("physical parameter ranges must be positive")


@dataclass(frozen=True)
class NoiseConfig:
    """Relative std of multiplicative Gaussian noise."""

    inputs: float = 0.01
    output: float = 0.02

    def __post_init__(self):
        if self.inputs < 0 or self.output < 0:
            raise ValueError("noise levels must be non-negative")


NO_NOISE = NoiseConfig(0.0, 0.0)

_EPS = 1e-6


def sample_params(rng: np.random.Generator, ranges: SamplingRanges = SamplingRanges()) -> RockParams:
    m = rng.uniform(*ranges.m)
    n = rng.uniform(*ranges.n)
    rho_w = rng.uniform(*ranges.rho_w)
    equation = EQUATIONS[int(rng.integers(len(EQUATIONS)))]
    zero = rng.random() < ranges.cec_zero_prob
    cec = rng.uniform(*ranges.cec)
    if zero or equation == "ARCHIE":
        cec = 0.0
    return RockParams(
        m=float(m),
        n=float(n),
        rho_w=float(rho_w),
        cec=float(cec),
        temperature_c=ranges.temperature_c,
        equation=equation,
        b_coeff=ranges.b_coeff,
    )


def sample_inputs(n_points: int, rng: np.random.Generator, ranges: SamplingRanges = SamplingRanges()) -> np.ndarray:
    """Uniform (phi, sw, f_clay) rows."""
    phi = rng.uniform(*ranges.phi, size=n_points)
    sw = rng.uniform(*ranges.sw, size=n_points)
    f_clay = rng.uniform(*ranges.f_clay, size=n_points)
    return np.column_stack([phi, sw, f_clay])


def apply_noise(x: np.ndarray, y: np.ndarray, noise: NoiseConfig, rng: np.random.Generator):
    """Multiplicative noise on every input column and the output, clamped to valid bounds.

    The same number of normal draws is consumed whatever the noise level, so
    a zero-noise rerun with the same seed sees identical inputs.
    """
    ex = rng.standard_normal(x.shape)
    ey = rng.standard_normal(y.shape)
    xo = x * (1.0 + noise.inputs * ex)
    xo[:, 0] = np.clip(xo[:, 0], _EPS, 1.0 - _EPS)
    xo[:, 1] = np.clip(xo[:, 1], _EPS, 1.0)
    xo[:, 2] = np.clip(xo[:, 2], 0.0, 1.0 - _EPS)
    yo = np.maximum(y * (1.0 + noise.output * ey), 1e-12)
    return xo, yo


@dataclass
class Realization:
    x: np.ndarray  # (n, 3): phi, sw, f_clay
    y: np.ndarray  # (n,): sigma_o
    params: RockParams

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("inputs and outputs must have equal length")

    def __len__(self):
        return len(self.y)


def gen_realization(
    params: RockParams,
    n_points: int = 200,
    noise: NoiseConfig = NoiseConfig(),
    rng: Optional[np.random.Generator] = None,
    ranges: SamplingRanges = SamplingRanges(),
) -> Realization:
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    x = sample_inputs(n_points, rng, ranges)
    y = np.asarray(sigma_model(x[:, 0], x[:, 1], x[:, 2], params), dtype=float)
    xo, yo = apply_noise(x, y, noise, rng)
    return Realization(xo, yo, params)


@dataclass
class TrainingBatch:
    realization: Realization
    context_indices: np.ndarray
    target_indices: np.ndarray

    @property
    def context(self):
        r = self.realization
        return r.x[self.context_indices], r.y[self.context_indices]

    @property
    def targets(self):
        r = self.realization
        return r.x[self.target_indices], r.y[self.target_indices]


def make_training_batch(
    realization: Realization,
    rng: np.random.Generator,
    context_range: tuple = (50, 100),
) -> TrainingBatch:
    lo, hi = context_range
    n = len(realization)
    if n < hi:
        raise ValueError(f"realization has {n} points, need at least {hi} for context sampling")
    size = int(rng.integers(lo, hi + 1))
    ctx = np.sort(rng.choice(n, size=size, replace=False))
    return TrainingBatch(realization, ctx, np.arange(n))


# ---------------------------------------------------------------- labeled series


def blocks_from_labels(labels: Sequence[int]) -> list:
    """Maximal runs as (start, length, label)."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [labels.size]])
    return [(int(s), int(e - s), int(labels[s])) for s, e in zip(starts, ends)]


@dataclass
class LabeledSeries:
    phi: np.ndarray
    sw: np.ndarray
    fclay: np.ndarray
    sigma_o: np.ndarray
    labels: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    name: str = ""
    table: list = field(default_factory=list)  # RockParams per label
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.phi, self.sw, self.fclay, self.sigma_o = (
            np.asarray(a, dtype=float) for a in (self.phi, self.sw, self.fclay, self.sigma_o)
        )
        n = self.phi.size
        if not all(a.size == n for a in (self.sw, self.fclay, self.sigma_o)):
            raise ValueError("all channels must have equal length")
        if self.depth is None:
            self.depth = np.arange(n)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
            if self.labels.size != n:
                raise ValueError("labels length differs from series length")

    def __len__(self):
        return self.phi.size

    @property
    def x(self) -> np.ndarray:
        return np.column_stack([self.phi, self.sw, self.fclay])

    @property
    def y(self) -> np.ndarray:
        return self.sigma_o

    @property
    def blocks(self) -> list:
        return [] if self.labels is None else blocks_from_labels(self.labels)

    def validate(self, l_min: int = 1):
        x = self.x
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(self.sigma_o)):
            raise ValueError("series contains non-finite values")
        if np.any((self.phi <= 0) | (self.phi >= 1)) or np.any((self.sw <= 0) | (self.sw > 1)):
            raise ValueError("fraction bounds violated")
        if np.any((self.fclay < 0) | (self.fclay >= 1)) or np.any(self.sigma_o <= 0):
            raise ValueError("fraction bounds violated")
        for start, length, _ in self.blocks:
            if length < l_min:
                raise ValueError(f"block at {start} has length {length} < {l_min}")

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv_text())

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["depth", "phi", "sw", "fclay", "sigma_o"]
        if self.labels is not None:
            header.append("label")
        writer.writerow(header)
        for i in range(len(self)):
            row = [int(self.depth[i]), repr(float(self.phi[i])), repr(float(self.sw[i])),
                   repr(float(self.fclay[i])), repr(float(self.sigma_o[i]))]
            if self.labels is not None:
                row.append(int(self.labels[i]))
            writer.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path) -> "LabeledSeries":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            required = {"depth", "phi", "sw", "fclay", "sigma_o"}
            missing = required - set(reader.fieldnames or [])
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            rows = list(reader)
        has_label = "label" in (reader.fieldnames or []) and all(r["label"] not in ("", None) for r in rows)
        series = cls(
            phi=[float(r["phi"]) for r in rows],
            sw=[float(r["sw"]) for r in rows],
            fclay=[float(r["fclay"]) for r in rows],
            sigma_o=[float(r["sigma_o"]) for r in rows],
            labels=[int(r["label"]) for r in rows] if has_label else None,
            depth=np.array([int(r["depth"]) for r in rows]),
            name=Path(path).stem,
        )
        return series

    def sidecar(self) -> dict:
        return {
            "name": self.name,
            "length": len(self),
            "table": [{"label": k, **p.to_dict()} for k, p in enumerate(self.table)],
            "blocks": [list(b) for b in self.blocks],
            **self.meta,
        }


def default_block_plan(n_labels: int, rng: np.random.Generator, block_length: int = 50,
                       n_blocks: Optional[int] = None) -> list:
    """Random label order with every label present and no equal neighbours."""
    from .cluster import random_label_sequence

    if n_blocks is None:
        n_blocks = n_labels + n_labels // 2
    seq = random_label_sequence(n_blocks, n_labels, rng)
    return [(int(k), int(block_length)) for k in seq]


def _interp_params(a: RockParams, b: RockParams, alpha: float, equation: str) -> RockParams:
    # ARCHIE is WS at zero CEC, so WS keeps the ramp continuous
    mix = lambda u, v: (1.0 - alpha) * u + alpha * v
    return RockParams(
        m=mix(a.m, b.m),
        n=mix(a.n, b.n),
        rho_w=mix(a.rho_w, b.rho_w),
        cec=mix(a.cec, b.cec),
        temperature_c=a.temperature_c,
        equation="WS" if equation == "ARCHIE" else equation,
        b_coeff=a.b_coeff,
    )


def preset_table(name: str, temperature_c: float = DEFAULT_TEMPERATURE_C,
                 b_coeff: Optional[float] = None) -> list:
    if name not in PRESET_TABLES:
        raise KeyError(f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}")
    return [
        RockParams(m=m, n=n, rho_w=rw, cec=float(cec), temperature_c=temperature_c, equation=eq, b_coeff=b_coeff)
        for m, n, rw, cec, eq in PRESET_TABLES[name]
    ]


def build_preset(
    name: str,
    block_plan: Optional[list] = None,
    noise: NoiseConfig = NoiseConfig(),
    rng: Optional[np.random.Generator] = None,
    ranges: SamplingRanges = SamplingRanges(),
    block_length: int = 50,
    n_blocks: Optional[int] = None,
    smooth_width: int = 10,
) -> LabeledSeries:
    """Lay out a preset's parameter table as a labeled series.

    ``block_plan`` is a list of ``(label, length)``.  For ``-smooth`` presets
    the parameters ramp linearly over ``smooth_width`` samples centred on
    each block boundary; labels stay on the block side.
    """
    table = preset_table(name, ranges.temperature_c, ranges.b_coeff)
    rng = np.random.default_rng() if rng is None else rng
    if block_plan is None:
        block_plan = default_block_plan(len(table), rng, block_length, n_blocks)
    for (a, _), (b, _) in zip(block_plan, block_plan[1:]):
        if a == b:
            raise ValueError("adjacent blocks in the plan share a label")
    if any(not 0 <= k < len(table) for k, _ in block_plan):
        raise ValueError(f"block plan uses labels outside 0..{len(table) - 1}")
    labels = np.concatenate([np.full(length, k, dtype=int) for k, length in block_plan])
    length = labels.size
    point_params = [table[k] for k in labels]

    smooth = name.endswith("-smooth") and smooth_width > 0
    if smooth:
        half = smooth_width // 2
        start = 0
        bounds = []
        for k, blen in block_plan[:-1]:
            start += blen
            bounds.append(start)
        for b in bounds:
            left, right = table[labels[b - 1]], table[labels[b]]
            for i in range(max(0, b - half), min(length, b - half + smooth_width)):
                alpha = (i - (b - half) + 0.5) / smooth_width
                point_params[i] = _interp_params(left, right, alpha, table[labels[i]].equation)

    x = sample_inputs(length, rng, ranges)
    y = np.empty(length)
    # evaluate block-wise where parameters are shared, pointwise on ramps
    i = 0
    while i < length:
        j = i
        while j + 1 < length and point_params[j + 1] is point_params[i]:
            j += 1
        y[i:j + 1] = sigma_model(x[i:j + 1, 0], x[i:j + 1, 1], x[i:j + 1, 2], point_params[i])
        i = j + 1
    xo, yo = apply_noise(x, y, noise, rng)
    series = LabeledSeries(
        phi=xo[:, 0], sw=xo[:, 1], fclay=xo[:, 2], sigma_o=yo, labels=labels, name=name, table=table,
        meta={
            "preset": name,
            "block_plan": [list(b) for b in block_plan],
            "noise": {"inputs": noise.inputs, "output": noise.output},
            "smooth_width": smooth_width if smooth else 0,
            "equations": [p.equation for p in table],
        },
    )
    series.validate()
    return series


def build_random(
    n_labels: int,
    rng: np.random.Generator,
    noise: NoiseConfig = NoiseConfig(),
    ranges: SamplingRanges = SamplingRanges(),
    block_length: int = 50,
    n_blocks: Optional[int] = None,
) -> LabeledSeries:
    """Like :func:`build_preset` but with ``n_labels`` parameter sets drawn by :func:`sample_params`."""
    table = [sample_params(rng, ranges) for _ in range(n_labels)]
    plan = default_block_plan(n_labels, rng, block_length, n_blocks)
    labels = np.concatenate([np.full(blen, k, dtype=int) for k, blen in plan])
    x = sample_inputs(labels.size, rng, ranges)
    y = np.empty(labels.size)
    for k, p in enumerate(table):
        sel = labels == k
        y[sel] = sigma_model(x[sel, 0], x[sel, 1], x[sel, 2], p)
    xo, yo = apply_noise(x, y, noise, rng)
    series = LabeledSeries(
        phi=xo[:, 0], sw=xo[:, 1], fclay=xo[:, 2], sigma_o=yo, labels=labels, name="random", table=table,
        meta={"preset": None, "block_plan": [list(b) for b in plan],
              "noise": {"inputs": noise.inputs, "output": noise.output},
              "equations": [p.equation for p in table]},
    )
    series.validate()
    return series


def write_series(series: LabeledSeries, path) -> tuple:
    """Write the CSV and its ground-truth sidecar JSON; returns both paths."""
    path = Path(path)
    series.to_csv(path)
    side = path.with_suffix(".json")
    with open(side, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(series.sidecar(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path, side
