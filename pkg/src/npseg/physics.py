"""Conductivity models for water-bearing rock and least-squares parameter fits.

All model functions accept scalars or numpy arrays and broadcast.  Water
conductivity is ``1 / rho_w``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

EQUATIONS = ("WS", "SGS", "ARCHIE")

DEFAULT_TEMPERATURE_C = 25.0

# Parameter box used both for sampling training data and for bounded fits.
PARAM_BOX = {
    "m": (1.7, 2.6),
    "n": (1.6, 2.6),
    "rho_w": (0.025, 0.06),
    "cec": (0.0, 100.0),
}


def b_of_t(temperature_c: float) -> float:
    """Equivalent counter-ion conductance B in S/m per meq/ml (Juhasz, temperature only)."""
    t = temperature_c
    return -1.28 + 0.225 * t - 0.0004059 * t * t


@dataclass(frozen=True)
class RockParams:
    m: float
    n: float
    rho_w: float
    cec: float = 0.0
    temperature_c: float = DEFAULT_TEMPERATURE_C
    equation: str = "WS"
    b_coeff: Optional[float] = None

    def __post_init__(self):
        if self.equation not in EQUATIONS:
            raise ValueError(f"unknown equation {self.equation!r}; expected one of {EQUATIONS}")
        if not (self.m > 0 and self.n > 0):
            raise ValueError(f"exponents must be positive, got m={self.m}, n={self.n}")
        if not self.rho_w > 0:
            raise ValueError(f"rho_w must be positive, got {self.rho_w}")
        if self.cec < 0:
            raise ValueError(f"cec must be non-negative, got {self.cec}")
        if self.equation == "ARCHIE" and self.cec != 0.0:
            object.__setattr__(self, "cec", 0.0)
        if self.b_coeff is None:
            object.__setattr__(self, "b_coeff", b_of_t(self.temperature_c))

    @property
    def sigma_w(self) -> float:
        return 1.0 / self.rho_w

    def replace(self, **changes) -> "RockParams":
        if "temperature_c" in changes and "b_coeff" not in changes:
            changes["b_coeff"] = None
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class LogPoint:
    phi: float
    sw: float
    f_clay: float
    sigma_o: float

    def __post_init__(self):
        vals = (self.phi, self.sw, self.f_clay, self.sigma_o)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite log point {vals}")
        if not 0.0 < self.phi < 1.0:
            raise ValueError(f"phi must lie in (0, 1), got {self.phi}")
        if not 0.0 < self.sw <= 1.0:
            raise ValueError(f"sw must lie in (0, 1], got {self.sw}")
        if not 0.0 <= self.f_clay < 1.0:
            raise ValueError(f"f_clay must lie in [0, 1), got {self.f_clay}")
        if not self.sigma_o > 0.0:
            raise ValueError(f"sigma_o must be positive, got {self.sigma_o}")


def qv(phi, f_clay, cec):
    """Clay exchange-cation concentration per unit pore volume (meq/ml)."""
    phi = np.asarray(phi, dtype=float)
    if np.any((phi <= 0.0) | (phi >= 1.0)):
        raise ValueError("phi must lie strictly inside (0, 1)")
    out = cec * f_clay * (1.0 - phi) / phi
    return float(out) if np.ndim(out) == 0 else out


def mu_t(temperature_c):
    return 1.0 + 0.0414 * (temperature_c - 22.0)


def sigma_archie(phi, sw, params: RockParams):
    return (phi ** params.m * sw ** params.n) * params.sigma_w


def sigma_ws(phi, sw, f_clay, params: RockParams):
    clay = params.b_coeff * qv(phi, f_clay, params.cec) / sw
    return (phi ** params.m * sw ** params.n) * (params.sigma_w + clay)


def sigma_sgs(phi, sw, f_clay, params: RockParams):
    q = qv(phi, f_clay, params.cec)
    mu = mu_t(params.temperature_c)
    sig_w = params.sigma_w
    inner = 1.93 * params.m * mu * q / (1.0 + 0.7 * mu * sw ** (-params.n) / sig_w)
    return (phi ** params.m * sw ** params.n) * (sig_w + inner) + 1.3 * mu * phi ** params.m * q


def sigma_model(phi, sw, f_clay, params: RockParams):
    """Dispatch on ``params.equation``."""
    if params.equation == "WS":
        return sigma_ws(phi, sw, f_clay, params)
    if params.equation == "SGS":
        return sigma_sgs(phi, sw, f_clay, params)
    return sigma_archie(phi, sw, params)


@dataclass
class FitResult:
    params: RockParams
    mse: float
    ill_conditioned: bool
    n_evals: int = 0
    starts: list = field(default_factory=list)


def _free_names(equation: str) -> tuple:
    return ("m", "n", "rho_w") if equation == "ARCHIE" else ("m", "n", "rho_w", "cec")


def _jacobian_rank(resid_fn, theta, free, box_scale, tol=1e-9):
    # forward-difference Jacobian in unit-box coordinates
    base = resid_fn(theta)
    cols = []
    for k in range(len(theta)):
        step = 1e-6
        t2 = theta.copy()
        t2[k] = t2[k] + step if t2[k] + step <= 1.0 else t2[k] - step
        cols.append((resid_fn(t2) - base) / (t2[k] - theta[k]))
    jac = np.column_stack(cols)
    s = np.linalg.svd(jac, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def fit_params(
    phi,
    sw,
    f_clay,
    sigma_o,
    equation: str = "WS",
    rng: Optional[np.random.Generator] = None,
    temperature_c: float = DEFAULT_TEMPERATURE_C,
    b_coeff: Optional[float] = None,
    box: Optional[dict] = None,
    n_starts: int = 8,
    max_iter: int = 500,
    xatol: float = 1e-9,
) -> FitResult:
    """Multi-start bounded Nelder-Mead fit of one equation to observed conductivity.

    The objective is the mean squared error of predicted vs observed
    ``sigma_o``.  Parameters are searched inside ``box`` (defaults to
    ``PARAM_BOX``); ARCHIE fits keep ``cec`` fixed at zero.
    """
    if equation not in EQUATIONS:
        raise ValueError(f"unknown equation {equation!r}")
    phi, sw, f_clay, sigma_o = (np.asarray(a, dtype=float) for a in (phi, sw, f_clay, sigma_o))
    free = _free_names(equation)
    if phi.size < len(free):
        raise ValueError(f"need at least {len(free)} points to fit {equation}, got {phi.size}")
    rng = np.random.default_rng(0) if rng is None else rng
    box = PARAM_BOX if box is None else box
    lo = np.array([box[k][0] for k in free])
    hi = np.array([box[k][1] for k in free])
    b = b_of_t(temperature_c) if b_coeff is None else b_coeff
    mu = mu_t(temperature_c)
    clay = f_clay * (1.0 - phi) / phi  # qv per unit cec

    def predict(theta):
        x = lo + theta * (hi - lo)
        m, n, rho_w = x[0], x[1], x[2]
        cec = x[3] if len(x) > 3 else 0.0
        sig_w = 1.0 / rho_w
        base = phi ** m * sw ** n
        if equation == "ARCHIE":
            return base * sig_w
        q = cec * clay
        if equation == "WS":
            return base * (sig_w + b * q / sw)
        inner = 1.93 * m * mu * q / (1.0 + 0.7 * mu * sw ** (-n) / sig_w)
        return base * (sig_w + inner) + 1.3 * mu * phi ** m * q

    def resid(theta):
        return predict(theta) - sigma_o

    def objective(theta):
        r = resid(theta)
        return float(np.dot(r, r)) / r.size

    starts = qmc.LatinHypercube(d=len(free), seed=rng).random(n_starts)
    best_theta, best_f, n_evals = None, np.inf, 0
    trace = []
    for x0 in starts:
        res = minimize(
            objective,
            x0,
            method="Nelder-Mead",
            bounds=[(0.0, 1.0)] * len(free),
            options={"maxiter": max_iter, "xatol": xatol, "fatol": np.inf, "adaptive": False},
        )
        n_evals += res.nfev
        trace.append(float(res.fun))
        if res.fun < best_f:
            best_f, best_theta = float(res.fun), np.clip(res.x, 0.0, 1.0)

    x = lo + best_theta * (hi - lo)
    values = dict(zip(free, (float(v) for v in x)))
    params = RockParams(
        m=values["m"],
        n=values["n"],
        rho_w=values["rho_w"],
        cec=values.get("cec", 0.0),
        temperature_c=temperature_c,
        equation=equation,
        b_coeff=b,
    )
    rank = _jacobian_rank(resid, best_theta, free, hi - lo)
    return FitResult(params=params, mse=best_f, ill_conditioned=rank < len(free), n_evals=n_evals, starts=trace)
