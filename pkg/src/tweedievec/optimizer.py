"""Parameter update rules and the convergence statistic.

Fisher scoring solves I * delta = U directly (never forming an inverse);
near-singular information matrices fall back to an escalating ridge on
the diagonal.  The learning-rate-adjusted variant scales the step by
lr / t**(1/4) where t is the outer iteration.  Adam is the standard
first-order baseline with bias correction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotrs


class SingularInformationError(RuntimeError):
    """Information matrix stayed singular through all ridge escalations."""


def _try_spd_solve(I: np.ndarray, U: np.ndarray):
    # Cholesky solve via raw LAPACK; returns None when I is not positive
    # definite (or carries non-finite values) instead of raising, the
    # caller escalates a ridge.
    c, info = dpotrf(I, lower=0, overwrite_a=0)
    if info != 0:
        return None
    x, info = dpotrs(c, U, lower=0)
    if info != 0 or not np.isfinite(x).all():
        return None
    return x


@dataclass(frozen=True)
class FisherConfig:
    lr: float = 0.5
    adjust: bool = False
    ridge: float = 1e-8

    def __post_init__(self) -> None:
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.ridge < 0.0:
            raise ValueError("ridge must be nonnegative")


@dataclass(frozen=True)
class ConvergenceConfig:
    epsilon: float = 1e-4
    maxit: int = 100

    def __post_init__(self) -> None:
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.maxit < 1:
            raise ValueError("maxit must be a positive integer")


def solve_information(I: np.ndarray, U: np.ndarray, ridge: float,
                      block_label: str = "?", counters=None) -> np.ndarray:
    """Solve I x = U by Cholesky, escalating a diagonal ridge on failure.

    Up to three escalations multiply the ridge by 10; each escalation is
    tallied on ``counters.ridge_events`` when a counter object is given.
    """
    x = _try_spd_solve(I, U)
    if x is not None:
        return x
    scale = float(np.mean(np.diag(I)))
    if not np.isfinite(scale) or scale <= 0.0:
        scale = 1.0
    bump = ridge if ridge > 0.0 else 1e-8
    for _ in range(3):
        if counters is not None:
            counters.ridge_events += 1
        x = _try_spd_solve(I + bump * scale * np.eye(I.shape[0]), U)
        if x is not None:
            return x
        bump *= 10.0
    raise SingularInformationError(
        f"information matrix for block {block_label} is singular after ridge escalation")


def fisher_step(beta: np.ndarray, U: np.ndarray, I: np.ndarray, t: int,
                cfg: FisherConfig, block_label: str = "?", counters=None) -> np.ndarray:
    """One Fisher-scoring update beta + s * solve(I, U).

    s is lr / t**(1/4) when cfg.adjust is set (t is the outer iteration,
    t >= 1) and exactly 1 otherwise.
    """
    if t < 1:
        raise ValueError("iteration counter t must be >= 1")
    direction = solve_information(np.atleast_2d(I), np.atleast_1d(U), cfg.ridge,
                                  block_label=block_label, counters=counters)
    s = cfg.lr / t ** 0.25 if cfg.adjust else 1.0
    return beta + s * direction


@dataclass
class AdamState:
    """Per-block Adam accumulator; m = v = 0 at t = 0."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    B1: float = 0.9
    B2: float = 0.999
    eps: float = 1e-8
    step_size: float = 1e-3

    @classmethod
    def zeros(cls, size: int, step_size: float = 1e-3) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), step_size=step_size)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState):
    """One Adam descent step; returns (new theta, new state)."""
    if theta.shape != grad.shape or theta.shape != state.m.shape:
        raise ValueError("theta, grad and state length mismatch")
    t = state.t + 1
    m = state.B1 * state.m + (1.0 - state.B1) * grad
    v = state.B2 * state.v + (1.0 - state.B2) * grad * grad
    m_hat = m / (1.0 - state.B1 ** t)
    v_hat = v / (1.0 - state.B2 ** t)
    new_theta = theta - state.step_size * m_hat / np.sqrt(v_hat + state.eps)
    return new_theta, replace(state, m=m, v=v, t=t)


def relative_loss_change(old: float, new: float) -> float:
    """|new - old| / (|new| + 0.1), the convergence statistic."""
    return abs(new - old) / (abs(new) + 0.1)


@dataclass
class PlateauScheduler:
    """Step-size reducer: multiply by ``factor`` after ``patience``
    iterations without relative improvement over the best loss seen."""

    factor: float = 0.1
    patience: int = 10
    threshold: float = 1e-4
    best: float = field(default=np.inf)
    bad_count: int = 0

    def step(self, loss: float, step_size: float) -> float:
        # rel-threshold improvement test, matching the common scheduler rule
        if loss < self.best * (1.0 - self.threshold):
            self.best = loss
            self.bad_count = 0
            return step_size
        self.bad_count += 1
        if self.bad_count > self.patience:
            self.bad_count = 0
            return step_size * self.factor
        return step_size
