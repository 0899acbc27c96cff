"""Compound Poisson-Gamma (Tweedie, 1 < p < 2) distribution primitives.

Everything here is a pure function of its inputs: parameter conversions
between the mean/dispersion/power form and the Poisson-Gamma form, the
cell-level loss, a numerically careful log-density for validation, and an
exact sampler.  The variance relationship is Var(Y) = phi * mu**p.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

MAX_SERIES_TERMS = 10**6


class TweedieDomainError(ValueError):
    """Parameters outside the compound Poisson-Gamma domain."""


class SeriesConvergenceError(RuntimeError):
    """Density series failed to converge within the hard term cap."""


def _check_domain(mu: float, phi: float, p: float) -> None:
    if not (math.isfinite(mu) and mu > 0.0):
        raise TweedieDomainError(f"mu must be finite and positive, got {mu}")
    if not (math.isfinite(phi) and phi > 0.0):
        raise TweedieDomainError(f"phi must be finite and positive, got {phi}")
    # p exactly 1 or 2 divides by zero in the conversions; reject strictly.
    if not (1.0 < p < 2.0):
        raise TweedieDomainError(f"power must lie strictly in (1, 2), got {p}")


@dataclass(frozen=True)
class TweedieParams:
    """Mean/dispersion/power triple with E(Y) = mu, Var(Y) = phi * mu**p."""

    mu: float
    phi: float
    p: float

    def __post_init__(self) -> None:
        _check_domain(self.mu, self.phi, self.p)


@dataclass(frozen=True)
class CPGParams:
    """Poisson rate plus Gamma shape/rate of the compound construction."""

    lam: float
    alpha: float
    rate: float


@dataclass(frozen=True)
class NaturalParams:
    """Canonical parameter theta and cumulant value kappa(theta)."""

    theta: float
    kappa: float


def to_cpg(tp: TweedieParams) -> CPGParams:
    """Map (mu, phi, p) to the compound Poisson-Gamma triple.

    lam = mu**(2-p) / (phi*(2-p)), alpha = (2-p)/(p-1) and the Gamma rate
    satisfies 1/rate = phi*(p-1)*mu**(p-1).
    """
    mu, phi, p = tp.mu, tp.phi, tp.p
    lam = mu ** (2.0 - p) / (phi * (2.0 - p))
    alpha = (2.0 - p) / (p - 1.0)
    rate = 1.0 / (phi * (p - 1.0) * mu ** (p - 1.0))
    return CPGParams(lam=lam, alpha=alpha, rate=rate)


def from_cpg(cpg: CPGParams) -> TweedieParams:
    """Invert :func:`to_cpg`."""
    if not (cpg.lam > 0.0 and cpg.alpha > 0.0 and cpg.rate > 0.0):
        raise TweedieDomainError("CPG parameters must all be positive")
    p = (cpg.alpha + 2.0) / (cpg.alpha + 1.0)
    mu = cpg.lam * (2.0 - p) / (cpg.rate * (p - 1.0))
    phi = mu ** (2.0 - p) / (cpg.lam * (2.0 - p))
    return TweedieParams(mu=mu, phi=phi, p=p)


def to_natural(tp: TweedieParams) -> NaturalParams:
    """Canonical parameter theta = mu**(1-p)/(1-p) and kappa = mu**(2-p)/(2-p)."""
    mu, p = tp.mu, tp.p
    return NaturalParams(theta=mu ** (1.0 - p) / (1.0 - p),
                         kappa=mu ** (2.0 - p) / (2.0 - p))


def zero_probability(tp: TweedieParams) -> float:
    """Probability of an exact zero, exp(-lam) from the Poisson layer."""
    return math.exp(-to_cpg(tp).lam)


def cell_loss(y, eta, p):
    """Negative (y*theta - kappa) for one cell, with mu = exp(eta).

    This is the per-cell training objective; the normalization term of the
    density is dropped because it does not involve the regression
    parameters.  Accepts scalars or arrays; finite for all finite eta.
    """
    yv = np.asarray(y, dtype=float)
    if np.any(yv < 0.0):
        raise TweedieDomainError("y must be nonnegative")
    pv = np.asarray(p, dtype=float)
    if np.any(pv <= 1.0) or np.any(pv >= 2.0):
        raise TweedieDomainError("power must lie strictly in (1, 2)")
    ev = np.asarray(eta, dtype=float)
    out = -yv * np.exp((1.0 - pv) * ev) / (1.0 - pv) + np.exp((2.0 - pv) * ev) / (2.0 - pv)
    if out.ndim == 0:
        return float(out)
    return out


def _log_series_terms(k: np.ndarray, y: float, cpg: CPGParams) -> np.ndarray:
    # log of the k-th summand of the normalization series, k >= 1
    a = cpg.alpha
    return (k * a * math.log(cpg.rate)
            + (k * a - 1.0) * math.log(y)
            + k * math.log(cpg.lam)
            - gammaln(k * a)
            - gammaln(k + 1.0))


def log_density(y: float, tp: TweedieParams, tol: float = 1e-12) -> float:
    """Log density at y >= 0, for validation (never on the training path).

    For y = 0 this is -lam exactly.  For y > 0 the normalization series is
    summed in log space around its largest term: the continuous index of
    the maximum is bracketed, then the sum is extended outward in both
    directions until additional terms contribute less than ``tol``
    relative to the peak.

    Raises
    ------
    SeriesConvergenceError
        If more than ``MAX_SERIES_TERMS`` terms would be needed.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    if y < 0.0:
        raise TweedieDomainError("y must be nonnegative")
    cpg = to_cpg(tp)
    if y == 0.0:
        return -cpg.lam

    nat = to_natural(tp)
    base = (y * nat.theta - nat.kappa) / tp.phi

    # Continuous-k estimate of the peak index, then climb to the discrete max.
    k_guess = max(1, int(y ** (2.0 - tp.p) / ((2.0 - tp.p) * tp.phi)))
    k_mode = k_guess
    steps = 0
    while _log_series_terms(np.array([k_mode + 1.0]), y, cpg)[0] > \
            _log_series_terms(np.array([float(k_mode)]), y, cpg)[0]:
        k_mode += 1
        steps += 1
        if steps > MAX_SERIES_TERMS:
            raise SeriesConvergenceError("no series mode within the term cap")
    while k_mode > 1 and _log_series_terms(np.array([k_mode - 1.0]), y, cpg)[0] > \
            _log_series_terms(np.array([float(k_mode)]), y, cpg)[0]:
        k_mode -= 1
    log_max = _log_series_terms(np.array([float(k_mode)]), y, cpg)[0]
    cutoff = log_max + math.log(tol)

    block = 64
    pieces = [np.array([log_max])]
    # upward scan
    lo = k_mode + 1
    while True:
        ks = np.arange(lo, lo + block, dtype=float)
        vals = _log_series_terms(ks, y, cpg)
        keep = vals > cutoff
        pieces.append(vals[keep])
        if not keep.all():
            break
        lo += block
        if lo - k_mode > MAX_SERIES_TERMS:
            raise SeriesConvergenceError(f"series for y={y} exceeded {MAX_SERIES_TERMS} terms")
    # downward scan
    hi = k_mode - 1
    while hi >= 1:
        ks = np.arange(max(1, hi - block + 1), hi + 1, dtype=float)
        vals = _log_series_terms(ks, y, cpg)
        keep = vals > cutoff
        pieces.append(vals[keep])
        if not keep.all() or ks[0] == 1.0:
            break
        hi = int(ks[0]) - 1

    terms = np.concatenate(pieces)
    c_val = log_max + math.log(np.exp(terms - log_max).sum())
    return base + c_val


def sample_cpg(tp: TweedieParams, rng: np.random.Generator) -> float:
    """One exact draw: N ~ Poisson(lam), then Gamma(N*alpha, rate) if N > 0.

    The Gamma draws are aggregated through the additive property, so a
    single Gamma variate is drawn regardless of N.
    """
    cpg = to_cpg(tp)
    n = rng.poisson(cpg.lam)
    if n == 0:
        return 0.0
    return float(rng.gamma(n * cpg.alpha, 1.0 / cpg.rate))


def sample_cpg_many(mu, phi, p, rng: np.random.Generator) -> np.ndarray:
    """Vectorized sampler for elementwise (mu, phi, p) arrays."""
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(mu <= 0.0) or np.any(phi <= 0.0):
        raise TweedieDomainError("mu and phi must be positive")
    if np.any(p <= 1.0) or np.any(p >= 2.0):
        raise TweedieDomainError("power must lie strictly in (1, 2)")
    mu, phi, p = np.broadcast_arrays(mu, phi, p)
    lam = mu ** (2.0 - p) / (phi * (2.0 - p))
    alpha = (2.0 - p) / (p - 1.0)
    scale = phi * (p - 1.0) * mu ** (p - 1.0)
    n = rng.poisson(lam)
    out = np.zeros(mu.shape, dtype=float)
    mask = n > 0
    if np.any(mask):
        out[mask] = rng.gamma(n[mask] * alpha[mask], scale[mask])
    return out
