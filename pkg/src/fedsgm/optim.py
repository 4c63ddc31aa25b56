"""Server-side optimizers: plain gradient step, AMSGrad, and Adam.

All three consume a descent direction `update` (for the federated loop this
is the desketched average client delta, which already points along the
gradient) and apply it functionally: step(theta, update, state) returns the
new iterate and new state without mutating either input.

The adaptive variants use the current first/second moments in the update and
apply no bias correction; AMSGrad additionally enforces the elementwise
running maximum on the second moment, which is what makes its effective step
sizes non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, DimensionMismatchError


@dataclass(frozen=True)
class GdConfig:
    """Plain global step: theta <- theta - eta_global * update."""

    eta_global: float

    def __post_init__(self):
        if not self.eta_global > 0.0:
            raise ConfigurationError(f"eta_global must be positive, got {self.eta_global}")


def gd_step(theta: np.ndarray, update: np.ndarray, cfg) -> np.ndarray:
    """theta - eta_global * update; cfg is a GdConfig or a bare step size."""
    eta = cfg.eta_global if isinstance(cfg, GdConfig) else float(cfg)
    theta = np.asarray(theta, dtype=np.float64)
    update = np.asarray(update, dtype=np.float64)
    if theta.shape != update.shape:
        raise DimensionMismatchError(
            f"theta shape {theta.shape} != update shape {update.shape}"
        )
    return theta - eta * update


def _check_betas(beta1: float, beta2: float):
    if not 0.0 <= beta1 < 1.0:
        raise ConfigurationError(f"beta1 must be in [0,1), got {beta1}")
    if not 0.0 <= beta2 < 1.0:
        raise ConfigurationError(f"beta2 must be in [0,1), got {beta2}")


@dataclass(frozen=True)
class AmsGradState:
    """Moment estimates for AMSGrad.

    v is the running elementwise maximum actually used in the step; v_hat is
    the plain second-moment EMA it is the maximum of (kept for inspection,
    defaults to v when not given).  normalize=False switches to a raw momentum
    step theta - eta*m (the second moment is still tracked); with
    beta1 = beta2 = 0 that reduces exactly to gd_step, which the tests use to
    check the plumbing.
    """

    m: np.ndarray
    v: np.ndarray
    v_hat: np.ndarray = None
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    normalize: bool = True

    def __post_init__(self):
        _check_betas(self.beta1, self.beta2)
        if self.eps <= 0.0:
            raise ConfigurationError(f"eps must be positive, got {self.eps}")
        if self.v_hat is None:
            object.__setattr__(self, "v_hat", np.array(self.v, dtype=np.float64, copy=True))

    @classmethod
    def init(cls, d: int, **hyper) -> "AmsGradState":
        return cls(m=np.zeros(d), v=np.zeros(d), **hyper)


@dataclass(frozen=True)
class AdamState:
    """Moment estimates for (uncorrected) Adam."""

    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    normalize: bool = True

    def __post_init__(self):
        _check_betas(self.beta1, self.beta2)
        if self.eps <= 0.0:
            raise ConfigurationError(f"eps must be positive, got {self.eps}")

    @classmethod
    def init(cls, d: int, **hyper) -> "AdamState":
        return cls(m=np.zeros(d), v=np.zeros(d), **hyper)


def amsgrad_step(
    theta: np.ndarray, update: np.ndarray, state: AmsGradState, eta: float
) -> tuple[np.ndarray, AmsGradState]:
    """One AMSGrad step.

    m_t = beta1 m + (1-beta1) u
    v_t = max(beta2 v + (1-beta2) u^2, v)   (elementwise, never decreases)
    theta_t = theta - eta * m_t / (sqrt(v_t) + eps)
    """
    theta = np.asarray(theta, dtype=np.float64)
    update = np.asarray(update, dtype=np.float64)
    if theta.shape != update.shape or theta.shape != state.m.shape:
        raise DimensionMismatchError(
            f"shape mismatch: theta {theta.shape}, update {update.shape}, "
            f"state {state.m.shape}"
        )
    m_t = state.beta1 * state.m + (1.0 - state.beta1) * update
    v_hat_t = state.beta2 * state.v + (1.0 - state.beta2) * update * update
    v_t = np.maximum(v_hat_t, state.v)
    if state.normalize:
        theta_t = theta - eta * m_t / (np.sqrt(v_t) + state.eps)
    else:
        theta_t = theta - eta * m_t
    return theta_t, replace(state, m=m_t, v=v_t, v_hat=v_hat_t)


def adam_step(
    theta: np.ndarray, update: np.ndarray, state: AdamState, eta: float
) -> tuple[np.ndarray, AdamState]:
    """One Adam step (no bias correction, no max on the second moment)."""
    theta = np.asarray(theta, dtype=np.float64)
    update = np.asarray(update, dtype=np.float64)
    if theta.shape != update.shape or theta.shape != state.m.shape:
        raise DimensionMismatchError(
            f"shape mismatch: theta {theta.shape}, update {update.shape}, "
            f"state {state.m.shape}"
        )
    m_t = state.beta1 * state.m + (1.0 - state.beta1) * update
    v_t = state.beta2 * state.v + (1.0 - state.beta2) * update * update
    if state.normalize:
        theta_t = theta - eta * m_t / (np.sqrt(v_t) + state.eps)
    else:
        theta_t = theta - eta * m_t
    return theta_t, replace(state, m=m_t, v=v_t)
