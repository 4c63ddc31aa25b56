"""Clipping and the sketched Gaussian mechanism.

The mechanism maps a d-dimensional statistic x to R @ x + xi where R is a
Gaussian sketch (see `sketch`) and xi ~ N(0, sigma_g^2 I_b).  Privacy comes
from the combination of norm clipping of the inputs and the additive noise;
the accounting lives in `accountant`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ParameterRegimeError
from .sketch import Compressor

# Domain-separation tag for noise streams (vs. sketch streams).
_NOISE_TAG = 0x401E


@dataclass(frozen=True)
class MechanismConfig:
    """Per-update privatization parameters.

    tau: clip threshold on the update norm (math.inf disables clipping).
    sigma_g: std of the additive Gaussian noise in sketched space.
    b: dimension of the sketched space the noise lives in (equals the ambient
       dimension when no sketch is used).
    noise_seed: root seed for all noise substreams.
    """

    tau: float
    sigma_g: float
    b: int
    noise_seed: int = 0

    def __post_init__(self):
        if not (self.tau > 0):  # also rejects NaN
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if not (self.sigma_g >= 0) or math.isinf(self.sigma_g):
            raise ConfigurationError(f"sigma_g must be finite >= 0, got {self.sigma_g}")
        if (
            isinstance(self.b, bool)
            or not isinstance(self.b, (int, np.integer))
            or self.b < 1
        ):
            raise ConfigurationError(f"b must be a positive integer, got {self.b!r}")
        object.__setattr__(self, "b", int(self.b))


def clip(v: np.ndarray, tau: float) -> np.ndarray:
    """Scale v onto the L2 ball of radius tau: v * min(1, tau/||v||).

    Idempotent, positively homogeneous (clip(c*v, c*tau) == c*clip(v, tau)
    for c > 0), and the zero vector is a fixed point.  tau = inf is a no-op.
    """
    if not (tau >= 0):
        raise ConfigurationError(f"tau must be >= 0, got {tau}")
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or norm <= tau:
        return v.copy()
    scale = tau / norm
    out = v * scale
    # Guarantee the post-condition ||out|| <= tau exactly: the rescaled norm
    # can overshoot tau by an ulp, which would also break idempotence.
    while float(np.linalg.norm(out)) > tau:
        scale = np.nextafter(scale, 0.0)
        out = v * scale
    return out


def noise_stream(noise_seed: int, client_id: int, round_idx: int) -> np.random.Generator:
    """Independent, reproducible noise substream for (client, round).

    Same arguments always give the same stream; changing any of them gives a
    statistically independent one (counter-based Philox keyed on the triple).
    """
    ss = np.random.SeedSequence(
        (int(noise_seed), _NOISE_TAG), spawn_key=(int(client_id), int(round_idx))
    )
    return np.random.Generator(np.random.Philox(ss))


def gaussian_noise(b: int, sigma_g: float, rng: np.random.Generator) -> np.ndarray:
    """xi ~ N(0, sigma_g^2 I_b); returns exact zeros (no draw) for sigma_g = 0."""
    if sigma_g == 0.0:
        return np.zeros(b)
    return sigma_g * rng.standard_normal(b)


def sgm_apply(
    x: np.ndarray, R: Compressor, sigma_g: float, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Sketched Gaussian mechanism: R @ x + N(0, sigma_g^2 I_b).

    With sigma_g = 0 no noise is drawn, so the output equals R @ x bit for
    bit (useful for ablations and exactness tests).
    """
    y = R.sketch(x)
    if sigma_g == 0.0:
        return y
    if rng is None:
        raise ConfigurationError("sigma_g > 0 requires a noise stream")
    return y + sigma_g * rng.standard_normal(y.shape[0])


def sensitivity_ratio(tau: float, b: int, sigma_g: float) -> float:
    """r = 2*tau^2 / (b*sigma_g^2), the knob controlling the variance-ratio range."""
    if tau == 0.0:
        return 0.0
    if sigma_g <= 0.0:
        raise ParameterRegimeError("sigma_g must be positive when tau > 0")
    return 2.0 * tau * tau / (b * sigma_g * sigma_g)


def ratio_sensitivity_bounds(tau: float, b: int, sigma_g: float) -> tuple[float, float]:
    """Range of the noise-scale ratio between adjacent datasets.

    For aggregated statistics with per-term norm at most tau, the std ratio
    sqrt((||gamma(D')||^2 + m*b*sigma_g^2) / (||gamma(D)||^2 + m*b*sigma_g^2))
    lies in [sqrt(1 - r), sqrt(1 + r)] with r = 2*tau^2/(b*sigma_g^2),
    independent of the aggregation count m.  Requires r < 1; otherwise the
    lower endpoint degenerates and the accounting regime is violated.
    """
    r = sensitivity_ratio(tau, b, sigma_g)
    if r >= 1.0:
        raise ParameterRegimeError(
            f"2*tau^2/(b*sigma_g^2) = {r:.6g} >= 1; increase sigma_g or b"
        )
    return (math.sqrt(1.0 - r), math.sqrt(1.0 + r))
