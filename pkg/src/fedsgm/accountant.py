"""Renyi-DP accounting and noise calibration for the sketched Gaussian mechanism.

The chain, for one federated round observed through the mechanism:

  1. One mechanism release is (alpha, eps_rdp)-RDP with
         eps_rdp = alpha^2 tau^4 / ((alpha-1) b sigma_g^4),
     valid in the regime 2 tau^2 / (b sigma_g^2) < 1.
  2. RDP converts to (eps, delta0)-DP at the optimal order, which has a
     closed form (`sgm_step_dp`).
  3. Poisson-style subsampling at rate q amplifies to
     eps' = log(1 + q (e^eps - 1)), delta' = q delta0.
  4. T-fold strong composition with slack delta' gives the total budget.

`sgm_epsilon` wires 2-4 together with the delta split delta0 = delta/(2 q T),
delta' = delta/2, so the reported guarantee is exactly (eps_total, delta).

A non-sketched baseline (`baseline_gm_epsilon`) accounts the subsampled
Gaussian mechanism through integer-order RDP for noise comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import (
    CalibrationError,
    ConfigurationError,
    ParameterRegimeError,
    RenyiOrderDomainError,
)
from .mechanism import sensitivity_ratio

# Above this per-release epsilon the composed budget is astronomically large;
# short-circuit to inf instead of overflowing exp().
_EPS_OVERFLOW = 700.0

_BASELINE_ORDERS = tuple(range(2, 257))


@dataclass(frozen=True)
class RdpPoint:
    """One point on a Renyi-DP curve: the guarantee is (alpha, epsilon)-RDP."""

    alpha: float
    epsilon: float

    def __post_init__(self):
        if not self.alpha > 1.0:
            raise ConfigurationError(f"alpha must be > 1, got {self.alpha}")
        if not self.epsilon >= 0.0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")


@dataclass(frozen=True)
class DpPoint:
    """An (epsilon, delta)-DP guarantee."""

    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon >= 0.0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError(f"delta must be in (0,1), got {self.delta}")


# ---------------------------------------------------------------------------
# Order-alpha divergence of scaled Gaussians
# ---------------------------------------------------------------------------


def f_alpha(alpha: float, x: float) -> float:
    """Per-coordinate Renyi divergence shape function.

    f_alpha(x) = log x + log(x^2 / (alpha x^2 + 1 - alpha)) / (2 (alpha - 1))
    is the order-alpha divergence D_alpha(N(0,1) || N(0, 1/x^2)) — equivalently
    the divergence between zero-mean Gaussians whose std ratio (second over
    first) is x.  Finite only when alpha x^2 + 1 - alpha > 0; decreasing in x
    on (0, 1), zero at x = 1, increasing on (1, inf).
    """
    if not alpha > 1.0:
        raise ConfigurationError(f"alpha must be > 1, got {alpha}")
    if not x > 0.0:
        raise ConfigurationError(f"x must be > 0, got {x}")
    dom = alpha * x * x + 1.0 - alpha
    if dom <= 0.0:
        raise RenyiOrderDomainError(
            f"alpha = {alpha:.6g} too large for variance ratio x^2 = {x * x:.6g}: "
            f"alpha*x^2 + 1 - alpha = {dom:.3g} <= 0"
        )
    return math.log(x) + math.log(x * x / dom) / (2.0 * (alpha - 1.0))


def renyi_divergence_sgm(
    alpha: float,
    norm_D: float,
    norm_Dp: float,
    m: int,
    b: int,
    sigma_g: float,
) -> float:
    """Exact order-alpha divergence between mechanism outputs on two datasets.

    The release on a dataset with aggregated statistic gamma is
    N(0, (||gamma||^2/b + m sigma_g^2) I_b) after marginalizing the sketch, so
    the divergence is b * f_alpha(x) with
    x = sqrt((norm_Dp^2 + m b sigma_g^2) / (norm_D^2 + m b sigma_g^2)).
    `m` counts independent noise terms summed into the release (e.g. clients
    per round).  Raises RenyiOrderDomainError where the divergence is infinite.
    """
    if norm_D < 0 or norm_Dp < 0:
        raise ConfigurationError("norms must be nonnegative")
    if m < 1 or b < 1:
        raise ConfigurationError(f"m and b must be >= 1, got m={m}, b={b}")
    if sigma_g < 0:
        raise ConfigurationError(f"sigma_g must be >= 0, got {sigma_g}")
    v_p = norm_D * norm_D + m * b * sigma_g * sigma_g
    v_q = norm_Dp * norm_Dp + m * b * sigma_g * sigma_g
    if v_p == 0.0 or v_q == 0.0:
        raise ConfigurationError("degenerate release: zero variance on one side")
    return b * f_alpha(alpha, math.sqrt(v_q / v_p))


def sgm_rdp_bound(alpha: float, tau: float, b: int, sigma_g: float) -> float:
    """Closed-form RDP bound for one mechanism release under tau-clipped inputs.

    eps_rdp(alpha) = alpha^2 tau^4 / ((alpha - 1) b sigma_g^4), requiring the
    regime 2 tau^2/(b sigma_g^2) < 1.  The quadratic form is a valid upper
    bound on the exact worst-case divergence when the sensitivity ratio
    r = 2 tau^2/(b sigma_g^2) satisfies r <~ 3/(2 (alpha^2 - 1)); see
    `rdp_bound_validity` for the sufficient condition used by the tests.
    """
    if not alpha > 1.0:
        raise ConfigurationError(f"alpha must be > 1, got {alpha}")
    if tau == 0.0:
        return 0.0
    r = sensitivity_ratio(tau, b, sigma_g)
    if r >= 1.0:
        raise ParameterRegimeError(
            f"2*tau^2/(b*sigma_g^2) = {r:.6g} >= 1; bound does not apply"
        )
    t2 = tau * tau
    s2 = sigma_g * sigma_g
    return alpha * alpha * t2 * t2 / ((alpha - 1.0) * b * s2 * s2)


def rdp_bound_validity(alpha: float, tau: float, b: int, sigma_g: float) -> bool:
    """Whether the quadratic RDP bound provably dominates the exact divergence.

    Sufficient condition: r = 2 tau^2/(b sigma_g^2) <= 3/(2 (alpha^2 - 1)).
    Comparing the series of alpha*log(1-r) - log(1-alpha*r) with alpha^2 r^2 / 2
    term by term shows the cubic term flips the inequality once
    r > 3/(2 (alpha^2 - 1)) (up to higher-order corrections); inside this
    region every term is dominated.  Calibrated deployments sit far inside:
    there alpha* ~ sqrt(b) sigma^2 sqrt(log(1/delta0))/tau^2 gives
    alpha^2 r ~ log(1/delta0) * 2/... << 1 only loosely, but r itself is
    O(1/b), so the product alpha^2 r stays well below 3/2.
    """
    r = sensitivity_ratio(tau, b, sigma_g)
    return r <= 1.5 / (alpha * alpha - 1.0)


def rdp_to_dp(point: RdpPoint, delta: float) -> DpPoint:
    """Standard conversion: (alpha, eps)-RDP implies (eps + log(1/delta)/(alpha-1), delta)-DP."""
    if not 0.0 < delta < 1.0:
        raise ConfigurationError(f"delta must be in (0,1), got {delta}")
    return DpPoint(point.epsilon + math.log(1.0 / delta) / (point.alpha - 1.0), delta)


# ---------------------------------------------------------------------------
# Per-release DP at the optimal order
# ---------------------------------------------------------------------------


def sgm_optimal_alpha(tau: float, b: int, sigma_g: float, delta0: float) -> float:
    """The Renyi order minimizing the per-release DP epsilon.

    Minimizing h(alpha) = A alpha^2/(alpha-1) + log(1/delta0)/(alpha-1) with
    A = tau^4/(b sigma_g^4) gives alpha* = 1 + sqrt(1 + log(1/delta0)/A).
    tau = 0 has no finite optimizer (any order gives eps 0): returns inf.
    """
    if not 0.0 < delta0 < 1.0:
        raise ConfigurationError(f"delta0 must be in (0,1), got {delta0}")
    if tau == 0.0:
        return math.inf
    if sigma_g <= 0.0:
        raise ParameterRegimeError("sigma_g must be positive when tau > 0")
    A = tau**4 / (b * sigma_g**4)
    return 1.0 + math.sqrt(1.0 + math.log(1.0 / delta0) / A)


def sgm_step_dp(tau: float, b: int, sigma_g: float, delta0: float) -> DpPoint:
    """Best (eps0, delta0)-DP guarantee for one release, optimized over orders.

    Evaluating the RDP bound at alpha* = sgm_optimal_alpha and converting
    gives eps0 = 2 A alpha* with A = tau^4/(b sigma_g^4).  tau = 0 is
    perfectly private: eps0 = 0.
    """
    if not 0.0 < delta0 < 1.0:
        raise ConfigurationError(f"delta0 must be in (0,1), got {delta0}")
    if tau == 0.0:
        return DpPoint(0.0, delta0)
    r = sensitivity_ratio(tau, b, sigma_g)
    if r >= 1.0:
        raise ParameterRegimeError(
            f"2*tau^2/(b*sigma_g^2) = {r:.6g} >= 1; accounting regime violated"
        )
    A = tau**4 / (b * sigma_g**4)
    alpha_star = sgm_optimal_alpha(tau, b, sigma_g, delta0)
    return DpPoint(2.0 * A * alpha_star, delta0)


def subsample_dp(point: DpPoint, p: float) -> DpPoint:
    """Privacy amplification by sampling each participant with probability p.

    (eps, delta) on the sampled set becomes
    (log(1 + p (e^eps - 1)), p delta) overall.  Evaluated in log space, so
    very large eps (where e^eps overflows) degrades gracefully.
    """
    if not 0.0 < p <= 1.0:
        raise ConfigurationError(f"p must be in (0,1], got {p}")
    if p == 1.0 or math.isinf(point.epsilon):
        return DpPoint(point.epsilon, p * point.delta)
    # log(1 + p(e^eps - 1)) = log((1-p) + p e^eps); mathematically >= 0 but
    # the log-space sum can land an ulp below zero when eps == 0.
    eps_amp = float(np.logaddexp(math.log1p(-p), math.log(p) + point.epsilon))
    return DpPoint(max(0.0, eps_amp), p * point.delta)


def strong_compose(point: DpPoint, k: int, delta_prime: float) -> DpPoint:
    """Advanced composition of k releases of an (eps, delta)-DP mechanism.

    Returns (sqrt(2 k log(1/delta')) eps + k eps (e^eps - 1),
             k delta + delta').
    """
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if not 0.0 < delta_prime < 1.0:
        raise ConfigurationError(f"delta_prime must be in (0,1), got {delta_prime}")
    eps = point.epsilon
    delta_total = k * point.delta + delta_prime
    if eps > _EPS_OVERFLOW or math.isinf(eps):
        return DpPoint(math.inf, delta_total)
    eps_total = math.sqrt(2.0 * k * math.log(1.0 / delta_prime)) * eps + k * eps * math.expm1(eps)
    return DpPoint(eps_total, delta_total)


# ---------------------------------------------------------------------------
# End-to-end pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AccountantParams:
    """Inputs to the end-to-end budget computation.

    q: per-round participation probability (N/C in the federated setting).
    T: number of composed rounds.
    tau: clip threshold entering the sensitivity analysis.
    b: sketch dimension.
    sigma_g: per-client mechanism noise std.
    """

    q: float
    T: int
    tau: float
    b: int
    sigma_g: float

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ConfigurationError(f"q must be in (0,1], got {self.q}")
        if self.T < 1:
            raise ConfigurationError(f"T must be >= 1, got {self.T}")
        if not self.tau > 0.0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.b < 1:
            raise ConfigurationError(f"b must be >= 1, got {self.b}")
        if not self.sigma_g > 0.0:
            raise ConfigurationError(f"sigma_g must be positive, got {self.sigma_g}")


@dataclass(frozen=True)
class PipelineStage:
    name: str
    eps: float
    delta: float


@dataclass(frozen=True)
class PipelineTrace:
    """Per-stage (eps, delta) ledger for one budget computation."""

    alpha_star: float
    stages: tuple[PipelineStage, ...] = field(default_factory=tuple)

    @property
    def epsilon(self) -> float:
        return self.stages[-1].eps

    @property
    def delta(self) -> float:
        return self.stages[-1].delta


def sgm_pipeline(
    params: AccountantParams, delta: float, slack_fraction: float = 0.5
) -> PipelineTrace:
    """Full accounting pipeline with the delta split baked in.

    The total delta is split into a composition slack delta' =
    slack_fraction * delta and a per-release delta0 =
    (1 - slack_fraction) * delta / (q T), so the final ledger line lands on
    (eps_total, delta) exactly: q T delta0 + delta' = delta.  The default
    even split gives delta0 = delta/(2 q T), delta' = delta/2; the fraction
    is exposed only for sensitivity studies.
    """
    if not 0.0 < delta < 1.0:
        raise ConfigurationError(f"delta must be in (0,1), got {delta}")
    if not 0.0 < slack_fraction < 1.0:
        raise ConfigurationError(
            f"slack_fraction must be in (0,1), got {slack_fraction}"
        )
    delta0 = (1.0 - slack_fraction) * delta / (params.q * params.T)
    if not delta0 < 1.0:
        raise ConfigurationError(
            f"per-release delta0 = {delta0:.3g} >= 1; delta too large for (q, T)"
        )
    delta_slack = slack_fraction * delta
    alpha_star = sgm_optimal_alpha(params.tau, params.b, params.sigma_g, delta0)
    released = sgm_step_dp(params.tau, params.b, params.sigma_g, delta0)
    sampled = subsample_dp(released, params.q)
    composed = strong_compose(sampled, params.T, delta_slack)
    return PipelineTrace(
        alpha_star=alpha_star,
        stages=(
            PipelineStage("release", released.epsilon, released.delta),
            PipelineStage("subsampled", sampled.epsilon, sampled.delta),
            PipelineStage("composed", composed.epsilon, composed.delta),
        ),
    )


def sgm_epsilon(
    params: AccountantParams, delta: float, slack_fraction: float = 0.5
) -> float:
    """Total (eps, delta)-DP epsilon of T subsampled mechanism rounds."""
    return sgm_pipeline(params, delta, slack_fraction).epsilon


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


def calibrate_sgm_sigma(
    target: DpPoint,
    q: float,
    T: int,
    tau: float,
    b: int,
    rel_tol: float = 1e-4,
) -> float:
    """Smallest sigma_g whose end-to-end budget meets the target guarantee.

    sgm_epsilon is continuous and strictly decreasing in sigma_g on the valid
    regime (sqrt(2/b) tau, inf), diverging at the left end and vanishing at
    the right, so bisection against the regime floor converges to the unique
    crossing.  The returned sigma satisfies sgm_epsilon(sigma) <= target
    epsilon and the regime constraint strictly.
    """
    target_eps = target.epsilon
    if not target_eps > 0.0 or math.isnan(target_eps):
        raise CalibrationError(f"target epsilon must be positive, got {target_eps}")
    if tau == 0.0:
        return 0.0

    def eps_at(sigma: float) -> float:
        return sgm_epsilon(AccountantParams(q=q, T=T, tau=tau, b=b, sigma_g=sigma), target.delta)

    floor = math.sqrt(2.0 / b) * tau
    hi = 2.0 * floor
    for _ in range(200):
        if eps_at(hi) <= target_eps:
            break
        hi *= 2.0
    else:
        raise CalibrationError(
            f"no sigma_g up to {hi:.3g} meets eps={target_eps} (q={q}, T={T})"
        )
    lo = floor  # infeasible by construction (regime boundary)
    while (hi - lo) > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        try:
            feasible = eps_at(mid) <= target_eps
        except ParameterRegimeError:
            feasible = False
        if feasible:
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# Non-sketched subsampled Gaussian baseline
# ---------------------------------------------------------------------------


def _sampled_gaussian_rdp(alpha: int, q: float, sigma: float) -> float:
    """Integer-order RDP of the subsampled Gaussian mechanism.

    For integer alpha >= 2, sampling rate q, and noise multiplier sigma
    (noise std = sigma * sensitivity):

      RDP(alpha) = log( sum_{k=0}^{alpha} C(alpha,k) (1-q)^(alpha-k) q^k
                        * exp((k^2 - k) / (2 sigma^2)) ) / (alpha - 1),

    evaluated entirely in log space.
    """
    k = np.arange(alpha + 1)
    log_binom = gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
    if q == 1.0:
        # only the k = alpha term survives
        return float((alpha * alpha - alpha) / (2.0 * sigma * sigma)) / (alpha - 1)
    terms = (
        log_binom
        + k * math.log(q)
        + (alpha - k) * math.log1p(-q)
        + (k * k - k) / (2.0 * sigma * sigma)
    )
    return float(logsumexp(terms)) / (alpha - 1)


def baseline_gm_epsilon(
    sigma: float, q: float, T: int, delta: float, orders=_BASELINE_ORDERS
) -> float:
    """Total epsilon of T rounds of the (non-sketched) subsampled Gaussian.

    sigma is the noise multiplier relative to the clip threshold (noise std =
    sigma * tau on sensitivity-tau sums).  Accounts in RDP over integer orders
    and converts at the best one.
    """
    if sigma <= 0.0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    if not 0.0 < q <= 1.0:
        raise ConfigurationError(f"q must be in (0,1], got {q}")
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not 0.0 < delta < 1.0:
        raise ConfigurationError(f"delta must be in (0,1), got {delta}")
    best = math.inf
    for alpha in orders:
        point = RdpPoint(alpha, T * _sampled_gaussian_rdp(alpha, q, sigma))
        eps = rdp_to_dp(point, delta).epsilon
        if eps < best:
            best = eps
    return best


def calibrate_baseline_sigma(
    target: DpPoint, q: float, T: int, rel_tol: float = 1e-4
) -> float:
    """Smallest baseline noise multiplier meeting the target guarantee.

    Note the integer-order conversion has an epsilon floor of about
    log(1/delta)/255; targets below it are reported as infeasible.
    """
    target_eps = target.epsilon
    if not target_eps > 0.0 or math.isnan(target_eps):
        raise CalibrationError(f"target epsilon must be positive, got {target_eps}")

    def eps_at(sigma: float) -> float:
        return baseline_gm_epsilon(sigma, q, T, target.delta)

    lo, hi = 1e-3, 1.0
    for _ in range(200):
        if eps_at(hi) <= target_eps:
            break
        hi *= 2.0
        if hi > 1e9:
            raise CalibrationError(
                f"target eps={target_eps} below the integer-order conversion floor"
            )
    while (hi - lo) > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if eps_at(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# Qualitative moments-accountant style bound
# ---------------------------------------------------------------------------


def ma_noise_bound(
    tau: float,
    b: int,
    m: int,
    T: int,
    n: int,
    eps: float,
    delta: float,
    c2: float = 1.0,
) -> float:
    """Noise scale sufficient for (eps, delta)-DP per the moments-style bound.

    sigma_g >= c2 * tau * sqrt((1 + log^1.5(2 m T / delta)/sqrt(b))
                               * m * T * log(2/delta)) / (n * eps)

    The constant c2 is not pinned by the analysis; with the default c2 = 1
    the output is a qualitative scaling, not a calibrated guarantee — prefer
    `sgm_epsilon` / `calibrate_sgm_sigma` for deployable numbers.
    """
    if min(tau, eps) <= 0 or min(b, m, T, n) < 1 or not 0 < delta < 1:
        raise ConfigurationError("ma_noise_bound: parameters out of range")
    log_inner = math.log(2.0 * m * T / delta)
    if log_inner <= 0:
        raise ConfigurationError("2mT/delta must exceed 1")
    boost = 1.0 + log_inner**1.5 / math.sqrt(b)
    return c2 * tau * math.sqrt(boost * m * T * math.log(2.0 / delta)) / (n * eps)
