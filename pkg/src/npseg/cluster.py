"""Constrained segmentation-clustering by dynamic programming.

A pattern splits a series of length L into exactly ``n + 1`` blocks, each at
least ``l_min`` long, with ``c`` cluster labels such that neighbouring blocks
differ and every label is used.  ``iterate`` alternates between
characterizing each cluster from its current points and re-segmenting with
``dp_segment`` under the resulting per-point costs.
"""
from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from . import physics
from .datagen import blocks_from_labels


class InfeasibleConfig(ValueError):
    pass


class CharacterizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DpConfig:
    c: int
    n: int
    l_min: int = 5
    restarts: int = 10
    max_iters: int = 25
    seed: int = 0
    at_most: bool = False

    def check(self, length: int):
        if self.c < 1 or self.n < 0 or self.l_min < 1:
            raise InfeasibleConfig(f"need c >= 1, n >= 0, l_min >= 1 (got c={self.c}, n={self.n}, l_min={self.l_min})")
        if (self.n + 1) * self.l_min > length:
            raise InfeasibleConfig(
                f"(n+1)*l_min <= length violated: ({self.n}+1)*{self.l_min} = {(self.n + 1) * self.l_min} > {length}"
            )
        if self.c > self.n + 1:
            raise InfeasibleConfig(f"c <= n+1 violated: c={self.c} > {self.n + 1}")
        if self.c == 1 and self.n > 0 and not self.at_most:
            raise InfeasibleConfig(f"c=1 admits no transitions, got n={self.n}")


@dataclass
class Pattern:
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)

    @property
    def blocks(self) -> list:
        return blocks_from_labels(self.labels)

    @property
    def transitions(self) -> int:
        return int(np.count_nonzero(np.diff(self.labels)))

    def __len__(self):
        return self.labels.size

    def __eq__(self, other):
        return isinstance(other, Pattern) and np.array_equal(self.labels, other.labels)

    def key(self) -> bytes:
        return self.labels.astype(np.int32).tobytes()

    def check(self, config: DpConfig):
        blocks = self.blocks
        n_trans = len(blocks) - 1
        if (n_trans > config.n) if config.at_most else (n_trans != config.n):
            raise AssertionError(f"pattern has {n_trans} transitions, expected {config.n}")
        if min(b[1] for b in blocks) < config.l_min:
            raise AssertionError("block shorter than l_min")
        if set(np.unique(self.labels)) != set(range(config.c)):
            raise AssertionError("not every cluster label is used")


# ---------------------------------------------------------------- random init


def _sequence_counts(length: int, c: int) -> list:
    # f[r][u]: completions with r positions left and u labels used so far
    f = [[0] * (c + 1) for _ in range(length + 1)]
    f[0][c] = 1
    for r in range(1, length + 1):
        for u in range(1, c + 1):
            new = (c - u) * f[r - 1][u + 1] if u < c else 0
            f[r][u] = new + (u - 1) * f[r - 1][u]
    return f


def random_label_sequence(length: int, c: int, rng: np.random.Generator) -> list:
    """Uniform draw among sequences over ``c`` labels with no equal neighbours using every label."""
    if c < 1 or length < c or (c == 1 and length > 1):
        raise InfeasibleConfig(f"cannot build {length} blocks over {c} labels with distinct neighbours")
    f = _sequence_counts(length, c)
    seq = [int(rng.integers(c))]
    used = [seq[0]]
    unused = [k for k in range(c) if k != seq[0]]
    for pos in range(1, length):
        r = length - pos - 1  # positions left after this one
        u = len(used)
        w_new = (c - u) * f[r][u + 1] if u < c else 0
        w_old = (u - 1) * f[r][u]
        total = w_new + w_old
        pick = int(rng.integers(total)) if total < 2**63 else int(rng.random() * total)
        if pick < w_new:
            k = unused.pop(int(rng.integers(len(unused))))
            used.append(k)
        else:
            choices = [k for k in used if k != seq[-1]]
            k = choices[int(rng.integers(len(choices)))]
        seq.append(k)
    return seq


def random_pattern(length: int, config: DpConfig, rng: np.random.Generator) -> Pattern:
    """Uniform block lengths (stars and bars over the slack) and a uniform valid labeling."""
    config.check(length)
    n_blocks = config.n + 1
    slack = length - n_blocks * config.l_min
    bars = np.sort(rng.choice(slack + n_blocks - 1, size=n_blocks - 1, replace=False))
    edges = np.concatenate([[-1], bars, [slack + n_blocks - 1]])
    extra = np.diff(edges) - 1
    lengths = extra + config.l_min
    seq = random_label_sequence(n_blocks, config.c, rng)
    return Pattern(np.repeat(seq, lengths))


# ---------------------------------------------------------------- DP

_STORE_BUDGET = 256 * 2**20  # bytes of DP layers kept for backtracking


def _first_layer(S: np.ndarray, l_min: int, use_mask: bool) -> np.ndarray:
    """D_1[i, k, m]: cost of one block [0, i) labelled k (mask axis has size 1 without ``use_mask``)."""
    Lp1, c = S.shape
    D = np.full((Lp1, c, 1 << c if use_mask else 1), np.inf)
    for k in range(c):
        D[l_min:, k, (1 << k) if use_mask else 0] = S[l_min:, k]
    return D


def _next_layer(D: np.ndarray, S: np.ndarray, l_min: int, use_mask: bool) -> np.ndarray:
    """D_{t+1} from D_t: append one block [j, i) with a label differing from the previous block."""
    Lp1, c, M = D.shape
    # E[:, k] = min over labels other than k, from prefix and suffix minima
    pre = np.empty_like(D)
    suf = np.empty_like(D)
    pre[:, 0] = np.inf
    suf[:, c - 1] = np.inf
    for k in range(1, c):
        np.minimum(pre[:, k - 1], D[:, k - 1], out=pre[:, k])
    for k in range(c - 2, -1, -1):
        np.minimum(suf[:, k + 1], D[:, k + 1], out=suf[:, k])
    F = np.minimum(pre, suf, out=pre)
    F -= S[:, :, None]
    # running minimum over block starts j; a row loop beats minimum.accumulate on axis 0
    for j in range(1, Lp1):
        np.minimum(F[j - 1], F[j], out=F[j])
    H = suf
    H[:l_min] = np.inf
    H[l_min:] = F[: Lp1 - l_min]
    H += S[:, :, None]
    if not use_mask:
        return H
    out = np.full_like(H, np.inf)
    for k in range(c):
        # view the mask axis as (higher bits, bit k, lower bits)
        hk = H[:, k, :].reshape(Lp1, M >> (k + 1), 2, 1 << k)
        ok = out[:, k, :].reshape(Lp1, M >> (k + 1), 2, 1 << k)
        np.minimum(hk[:, :, 1, :], hk[:, :, 0, :], out=ok[:, :, 1, :])
    return out


def _backtrack_step(S, D_prev, i, k, m, l_min, use_mask):
    """Find (j, k_prev, m_prev) realising the stored optimum of the block [j, i) labelled k."""
    c = S.shape[1]
    cands = [m, m ^ (1 << k)] if use_mask else [0]
    cands = list(dict.fromkeys(cands))
    others = [kk for kk in range(c) if kk != k]
    sub = D_prev[: i - l_min + 1][:, others][:, :, cands]  # (j, k', m')
    E = sub.reshape(sub.shape[0], -1).min(axis=1)
    F = E - S[: i - l_min + 1, k]
    j = int(np.argmin(F))  # first occurrence: earliest boundary
    flat = sub[j]
    # smallest label id first, then the mask without k's bit is preferred last
    best = None
    for a, kk in enumerate(others):
        for b, mm in enumerate(cands):
            if flat[a, b] == E[j] and best is None:
                best = (kk, mm)
    return j, best[0], best[1]


def _solve(S: np.ndarray, n_blocks: int, l_min: int, use_mask: bool, at_most: bool):
    Lp1, c = S.shape
    L = Lp1 - 1
    M = 1 << c if use_mask else 1
    full = M - 1 if use_mask else 0
    keep_all = Lp1 * c * M * 8 * n_blocks <= _STORE_BUDGET
    stride = 1 if keep_all else max(1, math.isqrt(n_blocks))

    checkpoints = {}
    best = (np.inf, None, None)  # value, t, k
    D = None
    for t in range(1, n_blocks + 1):
        D = _first_layer(S, l_min, use_mask) if t == 1 else _next_layer(D, S, l_min, use_mask)
        if keep_all or (t - 1) % stride == 0:
            checkpoints[t] = D
        if at_most or t == n_blocks:
            finals = D[L, :, full]
            k = int(np.argmin(finals))
            if finals[k] < best[0]:
                best = (float(finals[k]), t, k)
    value, t_end, k_end = best
    if t_end is None or not np.isfinite(value):
        return None

    segment = {}

    def layer(t):
        if t in checkpoints:
            return checkpoints[t]
        if t not in segment:
            # recompute from the nearest checkpoint below, keeping only this segment
            base = max(s for s in checkpoints if s <= t)
            segment.clear()
            D = checkpoints[base]
            for s in range(base + 1, t + 1):
                D = _next_layer(D, S, l_min, use_mask)
                segment[s] = D
        return segment[t]

    labels = np.empty(L, dtype=int)
    i, k, m, t = L, k_end, full, t_end
    while t > 1:
        j, kp, mp = _backtrack_step(S, layer(t - 1), i, k, m, l_min, use_mask)
        labels[j:i] = k
        i, k, m, t = j, kp, mp, t - 1
    labels[:i] = k
    return labels


def pattern_cost(cost_matrix: np.ndarray, labels: Sequence[int]) -> float:
    """Exactly rounded sum of each point's cost under its label."""
    cm = np.asarray(cost_matrix, dtype=float)
    return math.fsum(cm[np.arange(cm.shape[0]), np.asarray(labels)].tolist())


def dp_segment(cost_matrix: np.ndarray, config: DpConfig) -> tuple:
    """Exact minimum-cost pattern for a fixed ``length x c`` cost matrix.

    Returns ``(Pattern, total_cost)``.  A relaxed DP without the all-labels
    constraint runs first; when its optimum already uses every label it is
    the constrained optimum too, otherwise a label-usage bitmask is tracked.
    """
    cm = np.asarray(cost_matrix, dtype=float)
    if cm.ndim != 2 or cm.shape[1] != config.c:
        raise ValueError(f"cost matrix must be length x {config.c}, got {cm.shape}")
    if not np.all(np.isfinite(cm)):
        raise ValueError("cost matrix has non-finite entries")
    L = cm.shape[0]
    config.check(L)
    S = np.zeros((L + 1, config.c))
    np.cumsum(cm, axis=0, out=S[1:])
    n_blocks = config.n + 1

    labels = _solve(S, n_blocks, config.l_min, use_mask=False, at_most=config.at_most)
    if labels is None or np.unique(labels).size < config.c:
        if config.c > 12:
            raise InfeasibleConfig(f"label-usage tracking supports c <= 12, got c={config.c}")
        labels = _solve(S, n_blocks, config.l_min, use_mask=True, at_most=config.at_most)
        if labels is None:
            raise InfeasibleConfig("no valid pattern for this configuration")
    return Pattern(labels), pattern_cost(cm, labels)


# ---------------------------------------------------------------- providers


class AffiliationProvider(Protocol):
    name: str

    def characterize(self, x: np.ndarray, y: np.ndarray): ...

    def cost(self, state, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...


def _content_seed(base: int, x: np.ndarray, y: np.ndarray) -> int:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(x, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(y, dtype=np.float64).tobytes())
    return int.from_bytes(h.digest()[:8], "little") ^ (int(base) & 0xFFFFFFFFFFFFFFFF)


class PhysicsAffiliation:
    """Cluster = fitted equation parameters; cost = squared conductivity residual."""

    def __init__(self, equation: str = "WS", seed: int = 0, temperature_c: float = physics.DEFAULT_TEMPERATURE_C,
                 b_coeff: Optional[float] = None, n_starts: int = 8, max_iter: int = 500):
        if equation not in physics.EQUATIONS:
            raise ValueError(f"unknown equation {equation!r}")
        self.equation = equation
        self.seed = seed
        self.temperature_c = temperature_c
        self.b_coeff = b_coeff
        self.n_starts = n_starts
        self.max_iter = max_iter
        self.name = f"physics:{equation}"

    def characterize(self, x, y) -> physics.FitResult:
        if len(y) == 0:
            raise CharacterizationError("empty cluster")
        rng = np.random.default_rng(_content_seed(self.seed, x, y))
        return physics.fit_params(
            x[:, 0], x[:, 1], x[:, 2], y, self.equation, rng=rng, temperature_c=self.temperature_c,
            b_coeff=self.b_coeff, n_starts=self.n_starts, max_iter=self.max_iter,
        )

    def cost(self, state: physics.FitResult, x, y) -> np.ndarray:
        pred = physics.sigma_model(x[:, 0], x[:, 1], x[:, 2], state.params)
        return (np.asarray(pred) - y) ** 2


def physics_affiliation(equation: str = "WS", **kwargs) -> PhysicsAffiliation:
    return PhysicsAffiliation(equation, **kwargs)


class NpAffiliation:
    """Cluster = its own points as ANP context; cost = per-point predictive NLL."""

    def __init__(self, weights, context_cap: int = 100, rng_seed: int = 0, mc_samples: int = 0):
        if context_cap < 1:
            raise ValueError("context_cap must be >= 1")
        self.weights = weights.frozen() if hasattr(weights, "frozen") else weights
        self.context_cap = context_cap
        self.rng_seed = rng_seed
        self.mc_samples = mc_samples
        self.name = "anp"

    def characterize(self, x, y) -> tuple:
        if len(y) == 0:
            raise CharacterizationError("empty cluster")
        if len(y) <= self.context_cap:
            return np.array(x, dtype=float), np.array(y, dtype=float)
        rng = np.random.default_rng(_content_seed(self.rng_seed, x, y))
        idx = np.sort(rng.choice(len(y), size=self.context_cap, replace=False))
        return x[idx], y[idx]

    def cost(self, state, x, y) -> np.ndarray:
        from .anp import predict_nll

        per_point, _ = predict_nll(state, (x, y), self.weights, mc_samples=self.mc_samples, seed=self.rng_seed)
        return per_point


def np_affiliation(weights, context_cap: int = 100, rng_seed: int = 0, mc_samples: int = 0) -> NpAffiliation:
    return NpAffiliation(weights, context_cap, rng_seed, mc_samples)


# ---------------------------------------------------------------- alternation


@dataclass
class IterateResult:
    pattern: Pattern
    cost_per_point: float
    config: DpConfig
    iterations: int
    restarts_trace: list = field(default_factory=list)
    runtime_s: float = 0.0

    def to_record(self) -> dict:
        return {
            "c": self.config.c,
            "n": self.config.n,
            "l_min": self.config.l_min,
            "seed": self.config.seed,
            "cost_per_point": self.cost_per_point,
            "labels": self.pattern.labels.tolist(),
            "blocks": [list(b) for b in self.pattern.blocks],
            "iterations": self.iterations,
            "restarts_trace": self.restarts_trace,
        }


def cost_matrix_for(labels: np.ndarray, x: np.ndarray, y: np.ndarray, provider, c: int) -> np.ndarray:
    cols = []
    for k in range(c):
        sel = labels == k
        try:
            state = provider.characterize(x[sel], y[sel])
        except CharacterizationError as exc:
            raise CharacterizationError(f"cluster {k}: {exc}") from exc
        cols.append(np.asarray(provider.cost(state, x, y), dtype=float))
    cm = np.column_stack(cols)
    if not np.all(np.isfinite(cm)):
        bad = sorted({int(k) for k in np.nonzero(~np.isfinite(cm))[1]})
        name = getattr(provider, "name", provider)
        raise FloatingPointError(f"provider {name} returned non-finite costs for clusters {bad}")
    return cm


def evaluate_pattern(labels, x, y, provider) -> float:
    """Self-consistent mean cost: each cluster characterized from its own points."""
    _, labels = np.unique(np.asarray(labels, dtype=int), return_inverse=True)
    cm = cost_matrix_for(labels, x, y, provider, int(labels.max()) + 1)
    return pattern_cost(cm, labels) / len(labels)


def _restart_rngs(seed: int, restarts: int) -> list:
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(restarts)]


def iterate(x: np.ndarray, y: np.ndarray, provider, config: DpConfig) -> IterateResult:
    """Alternate characterization and DP segmentation from random initial patterns.

    Each restart stops when the DP returns a pattern already visited in that
    restart, or after ``max_iters``.  The best restart by mean per-point
    self-consistent cost wins.
    """
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    L = len(y)
    config.check(L)
    best = None
    traces = []
    for r, rng in enumerate(_restart_rngs(config.seed, config.restarts)):
        pattern = random_pattern(L, config, rng)
        seen = {pattern.key()}
        steps = []
        final_cost = None
        for it in range(config.max_iters):
            cm = cost_matrix_for(pattern.labels, x, y, provider, config.c)
            incoming = pattern_cost(cm, pattern.labels)
            new, total = dp_segment(cm, config)
            steps.append({"iteration": it + 1, "incoming_cost": incoming, "dp_cost": total})
            if new == pattern:
                final_cost = total / L
                break
            pattern = new
            if pattern.key() in seen:
                break
            seen.add(pattern.key())
        if final_cost is None:
            cm = cost_matrix_for(pattern.labels, x, y, provider, config.c)
            final_cost = pattern_cost(cm, pattern.labels) / L
        traces.append({"restart": r, "iterations": len(steps), "cost_per_point": final_cost, "steps": steps})
        if best is None or final_cost < best[1]:
            best = (pattern, final_cost, len(steps))
    return IterateResult(
        pattern=best[0],
        cost_per_point=best[1],
        config=config,
        iterations=best[2],
        restarts_trace=traces,
        runtime_s=time.perf_counter() - t0,
    )
