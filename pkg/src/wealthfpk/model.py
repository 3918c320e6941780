"""Closed-form objects for the wealth Fokker-Planck model.

The equilibrium is an inverse-Gamma law with shape ``mu`` and scale
``mu - 1`` supported on ``v > 0``; it is extended by zero to ``v <= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import integrate, special


class _Sentinel:
    __slots__ = ("name",)

    def __init__(self, name: str) -> None:
        self.name = name

    def __repr__(self) -> str:
        return self.name

    def __reduce__(self):
        return self.name


DIVERGENT = _Sentinel("DIVERGENT")
NO_GUARANTEE = _Sentinel("NO_GUARANTEE")

Moment = Union[float, _Sentinel]


@dataclass(frozen=True)
class ModelParams:
    """Market parameters: drift strength ``lam`` and diffusion strength ``sigma``."""

    lam: float
    sigma: float

    def __post_init__(self) -> None:
        for name in ("lam", "sigma"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be a positive finite number, got {value!r}")
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def mu(self) -> float:
        """Pareto exponent, always > 1."""
        return 1.0 + 2.0 * self.lam / self.sigma

    def as_dict(self) -> dict:
        return {"lambda": self.lam, "sigma": self.sigma}


@dataclass(frozen=True)
class EquilibriumStats:
    mode_location: float
    mode_value: float
    moment_order_bound: float


def _log_norm(mu: float) -> float:
    return mu * math.log(mu - 1.0) - special.gammaln(mu)


def equilibrium_log_pdf(params: ModelParams, v):
    """Natural log of the equilibrium density; ``-inf`` for ``v <= 0``."""
    mu = params.mu
    v = np.asarray(v, dtype=float)
    out = np.full(v.shape, -np.inf)
    pos = v > 0
    vp = v[pos]
    out[pos] = _log_norm(mu) - (mu - 1.0) / vp - (1.0 + mu) * np.log(vp)
    return out if out.ndim else float(out)


def equilibrium_pdf(params: ModelParams, v):
    """Equilibrium density, evaluated in log space and exactly 0 for ``v <= 0``."""
    logp = equilibrium_log_pdf(params, v)
    return np.exp(logp) if isinstance(logp, np.ndarray) else math.exp(logp)


def equilibrium_pdf_derivative(params: ModelParams, v):
    """Analytic derivative of the equilibrium density."""
    mu = params.mu
    v = np.asarray(v, dtype=float)
    f = np.asarray(equilibrium_pdf(params, v), dtype=float)
    out = np.zeros(v.shape)
    pos = v > 0
    vp = v[pos]
    out[pos] = f[pos] * ((mu - 1.0) / vp**2 - (1.0 + mu) / vp)
    return out if out.ndim else float(out)


def equilibrium_cdf(params: ModelParams, v):
    mu = params.mu
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape)
    pos = v > 0
    out[pos] = special.gammaincc(mu, (mu - 1.0) / v[pos])
    return out if out.ndim else float(out)


def equilibrium_ppf(params: ModelParams, u):
    """Inverse CDF of the equilibrium law, for ``0 < u < 1``."""
    mu = params.mu
    return (mu - 1.0) / special.gammainccinv(mu, np.asarray(u, dtype=float))


def equilibrium_mode(params: ModelParams) -> EquilibriumStats:
    mu = params.mu
    loc = (mu - 1.0) / (mu + 1.0)
    log_val = (mu + 1.0) * math.log(mu + 1.0) - special.gammaln(mu) - math.log(mu - 1.0) - (mu + 1.0)
    value = math.exp(log_val)
    # sampled shape check: increasing up to the mode, decreasing after
    left = equilibrium_pdf(params, np.linspace(loc * 1e-2, loc, 200))
    right = equilibrium_pdf(params, np.geomspace(loc, loc * 1e3, 200))
    if np.any(np.diff(left) < 0) or np.any(np.diff(right) > 0):
        raise RuntimeError(f"equilibrium density is not unimodal at {loc} for mu={mu}")
    return EquilibriumStats(mode_location=loc, mode_value=value, moment_order_bound=mu)


def equilibrium_moment(params: ModelParams, r: float) -> Moment:
    """Absolute moment of order ``r`` of the equilibrium, or ``DIVERGENT`` if ``r >= mu``."""
    mu = params.mu
    if r >= mu:
        return DIVERGENT
    if r == 0:
        return 1.0
    if r == 1:
        return 1.0
    if r == 2:
        return (mu - 1.0) / (mu - 2.0)
    mode = (mu - 1.0) / (mu + 1.0)

    def integrand(v: float) -> float:
        return v**r * equilibrium_pdf(params, v)

    a, _ = integrate.quad(integrand, 0.0, mode, epsabs=0.0, epsrel=1e-12, limit=200)
    b, _ = integrate.quad(integrand, mode, np.inf, epsabs=0.0, epsrel=1e-12, limit=400)
    return a + b


def second_moment_trajectory(params: ModelParams, m2_initial: float, t: float) -> float:
    """Whole-line second moment at time ``t`` for unit mass and unit mean.

    Solves ``dM2/dt = (sigma - 2 lam) M2 + 2 lam``; at ``sigma == 2 lam`` this is
    the linear limit ``M2(0) + 2 lam t``.
    """
    if m2_initial < 1.0:
        raise ValueError("a unit-mean density has second moment >= 1")
    if t < 0:
        raise ValueError("t must be nonnegative")
    k = params.sigma - 2.0 * params.lam
    growth = math.exp(k * t)
    # expm1(k t)/k -> t as k -> 0
    integral = t if k == 0 else math.expm1(k * t) / k
    return m2_initial * growth + 2.0 * params.lam * integral


def mean_trajectory(params: ModelParams, m_initial: float, t: float) -> float:
    """Mean of a unit-mass solution: relaxes to 1 at rate ``lam``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return 1.0 + (m_initial - 1.0) * math.exp(-params.lam * t)


def theoretical_decay_rate(params: ModelParams, s: float):
    """Guaranteed exponential decay rate of ``D_{s,2}(f(t), f_inf)``.

    Returns ``NO_GUARANTEE`` when ``s >= mu``.
    """
    if s <= 0:
        raise ValueError("s must be positive")
    if s >= params.mu:
        return NO_GUARANTEE
    return 0.5 * s * ((1.0 - s) * params.sigma + 2.0 * params.lam)


def optimal_decay_order(params: ModelParams) -> float:
    return 0.5 * params.mu


def optimal_decay_rate(params: ModelParams) -> float:
    return params.sigma * params.mu**2 / 8.0


def stationarity_residual(params: ModelParams, v):
    """Residual of ``d/dv(kappa f) + (v - 1) f`` with ``kappa = sigma/(2 lam) v^2``."""
    v = np.asarray(v, dtype=float)
    f = np.asarray(equilibrium_pdf(params, v))
    df = np.asarray(equilibrium_pdf_derivative(params, v))
    c = params.sigma / (2.0 * params.lam)
    return c * (2.0 * v * f + v**2 * df) + (v - 1.0) * f
