"""Clipping and sketched-Gaussian-mechanism tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from fedsgm import (
    MechanismConfig,
    SketchSpec,
    clip,
    identity_compressor,
    ratio_sensitivity_bounds,
    sample_sketch,
    sgm_apply,
)
from fedsgm.errors import ConfigurationError, ParameterRegimeError
from fedsgm.mechanism import noise_stream, sensitivity_ratio

# ---------------------------------------------------------------------------
# config


def test_config_validation():
    cfg = MechanismConfig(tau=1.0, sigma_g=0.5, b=128, noise_seed=3)
    assert cfg.tau == 1.0 and cfg.b == 128
    with pytest.raises(ConfigurationError):
        MechanismConfig(tau=0.0, sigma_g=0.5, b=128)
    with pytest.raises(ConfigurationError):
        MechanismConfig(tau=-1.0, sigma_g=0.5, b=128)
    with pytest.raises(ConfigurationError):
        MechanismConfig(tau=1.0, sigma_g=-0.1, b=128)
    with pytest.raises(ConfigurationError):
        MechanismConfig(tau=1.0, sigma_g=0.5, b=0)


def test_config_accepts_numpy_ints_and_zero_noise():
    cfg = MechanismConfig(tau=1.0, sigma_g=0.0, b=np.int64(16))
    assert isinstance(cfg.b, int)
    assert cfg.sigma_g == 0.0  # non-private ablation mode is legal here


# ---------------------------------------------------------------------------
# clip


def test_clip_inside_ball_is_identity():
    v = np.array([0.3, 0.4])
    out = clip(v, 1.0)
    assert np.array_equal(out, v)


def test_clip_rescales_to_boundary():
    out = clip(np.array([3.0, 4.0]), 1.0)
    assert np.allclose(out, [0.6, 0.8], rtol=0, atol=1e-15)
    assert np.linalg.norm(out) == pytest.approx(1.0)


def test_clip_zero_vector():
    assert np.array_equal(clip(np.zeros(5), 1.0), np.zeros(5))


@settings(max_examples=100, deadline=None)
@given(
    v=hnp.arrays(
        np.float64,
        st.integers(min_value=1, max_value=20),
        elements=st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
    ),
    tau=st.floats(min_value=1e-6, max_value=1e3, allow_nan=False),
)
def test_clip_idempotent_and_bounded(v, tau):
    once = clip(v, tau)
    assert np.linalg.norm(once) <= tau * (1 + 1e-12)
    assert np.array_equal(clip(once, tau), once)


@settings(max_examples=50, deadline=None)
@given(c=st.floats(min_value=1e-3, max_value=1e3, allow_nan=False))
def test_clip_homogeneous(c):
    v = np.array([2.0, -3.0, 6.0])  # norm 7
    lhs = clip(c * v, c * 2.0)
    rhs = c * clip(v, 2.0)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=0)


# ---------------------------------------------------------------------------
# sgm_apply


def test_sgm_apply_noiseless_is_sketch():
    R = sample_sketch(SketchSpec(b=8, d=20, seed=1))
    x = np.random.default_rng(0).standard_normal(20)
    assert np.array_equal(sgm_apply(x, R, 0.0), R.sketch(x))


def test_sgm_apply_requires_stream_when_noisy():
    R = sample_sketch(SketchSpec(b=8, d=20, seed=1))
    with pytest.raises(ConfigurationError):
        sgm_apply(np.zeros(20), R, 0.5, None)


def test_sgm_apply_noise_variance():
    # x = 0, sigma_g = 1: output is pure noise with unit per-coordinate
    # variance; 1e5 scalar draws pin it to within 2%.
    R = identity_compressor(1)
    rng = noise_stream(42, client_id=0, round_idx=0)
    draws = np.array([sgm_apply(np.zeros(1), R, 1.0, rng)[0] for _ in range(1000)])
    # speed: pull the remaining draws in one vectorized call from the stream
    more = sgm_apply(np.zeros(1), R, 1.0, rng)  # keep the scalar path exercised
    bulk = rng.standard_normal(99_000)
    sample = np.concatenate([draws, more, bulk])
    assert sample.size >= 100_000
    assert abs(sample.var() - 1.0) < 0.02


def test_sgm_output_covariance():
    # ||x|| = 1, fresh (R, xi) each draw: covariance should be
    # (1/b + sigma_g^2) I within 5% on the diagonal, |corr| <= 0.05 off it.
    b, d, sigma_g = 64, 128, 0.25
    rng = np.random.default_rng(7)
    x = rng.standard_normal(d)
    x /= np.linalg.norm(x)
    n = 10_000
    outs = np.empty((n, b))
    noise = np.random.default_rng(8)
    for i in range(n):
        R = sample_sketch(SketchSpec(b=b, d=d, seed=i))
        outs[i] = sgm_apply(x, R, sigma_g, noise)
    cov = np.cov(outs, rowvar=False)
    target = 1.0 / b + sigma_g**2
    diag = np.diag(cov)
    assert np.all(np.abs(diag / target - 1.0) < 0.05)
    corr = cov / np.sqrt(np.outer(diag, diag))
    off = corr[~np.eye(b, dtype=bool)]
    assert np.max(np.abs(off)) <= 0.05


def test_noise_streams_reproducible_and_disjoint():
    a1 = noise_stream(5, client_id=3, round_idx=9).standard_normal(4)
    a2 = noise_stream(5, client_id=3, round_idx=9).standard_normal(4)
    b1 = noise_stream(5, client_id=4, round_idx=9).standard_normal(4)
    c1 = noise_stream(5, client_id=3, round_idx=10).standard_normal(4)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b1)
    assert not np.array_equal(a1, c1)


def test_aggregation_linearity():
    # mean_c SG(x_c) == (1/N) (R sum_c x_c + sum_c xi_c) with the same noise,
    # up to floating-point associativity.
    b, d, sigma_g, N = 16, 40, 0.3, 5
    R = sample_sketch(SketchSpec(b=b, d=d, seed=2))
    rng = np.random.default_rng(3)
    xs = [rng.standard_normal(d) for _ in range(N)]
    outs = [
        sgm_apply(xs[c], R, sigma_g, noise_stream(9, client_id=c, round_idx=0))
        for c in range(N)
    ]
    mean_out = np.mean(outs, axis=0)
    xis = [
        sigma_g * noise_stream(9, client_id=c, round_idx=0).standard_normal(b)
        for c in range(N)
    ]
    reference = (R.sketch(np.sum(xs, axis=0)) + np.sum(xis, axis=0)) / N
    assert np.allclose(mean_out, reference, rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------------------
# ratio sensitivity


def test_ratio_bounds_closed_form():
    lo, hi = ratio_sensitivity_bounds(1.0, 8, 1.0)
    assert lo == pytest.approx(math.sqrt(0.75))
    assert hi == pytest.approx(math.sqrt(1.25))


def test_ratio_bounds_zero_tau():
    assert ratio_sensitivity_bounds(0.0, 8, 1.0) == (1.0, 1.0)


def test_ratio_bounds_regime_violation():
    # 2 tau^2 / (b sigma^2) = 2 >= 1: lower endpoint undefined.
    with pytest.raises(ParameterRegimeError):
        ratio_sensitivity_bounds(1.0, 1, 1.0)
    with pytest.raises(ParameterRegimeError):
        sensitivity_ratio(1.0, 8, 0.0)


def test_ratio_bounds_dominate_achievable_ratios():
    # For aggregated norms g = ||gamma(D)|| in [0, m*tau] and g' within tau
    # of g (both clamped to [0, m*tau]), the achievable std ratio
    # sqrt((g'^2 + m b s^2) / (g^2 + m b s^2)) must stay inside the bounds.
    tau, b, sigma_g = 1.0, 64, 0.8
    lo, hi = ratio_sensitivity_bounds(tau, b, sigma_g)
    for m in (1, 4, 16):
        for g in np.linspace(0.0, m * tau, 200):
            for gp in (max(0.0, g - tau), g, min(m * tau, g + tau)):
                ratio = math.sqrt(
                    (gp**2 + m * b * sigma_g**2) / (g**2 + m * b * sigma_g**2)
                )
                assert lo - 1e-12 <= ratio <= hi + 1e-12


@settings(max_examples=100, deadline=None)
@given(
    tau=st.floats(min_value=1e-3, max_value=10.0),
    sigma_g=st.floats(min_value=1e-2, max_value=10.0),
    b=st.integers(min_value=1, max_value=4096),
)
def test_ratio_bounds_bracket_one(tau, sigma_g, b):
    r = 2 * tau * tau / (b * sigma_g * sigma_g)
    if r >= 1.0:
        with pytest.raises(ParameterRegimeError):
            ratio_sensitivity_bounds(tau, b, sigma_g)
    else:
        lo, hi = ratio_sensitivity_bounds(tau, b, sigma_g)
        assert lo <= 1.0 <= hi
        assert hi == pytest.approx(math.sqrt(1.0 + r))
