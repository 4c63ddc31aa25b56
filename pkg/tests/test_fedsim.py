"""Federated driver tests: client steps, privatization, aggregation, full runs.

Runs with sigma_g = 0 are non-private ablations; the accountant reports
epsilon = inf with a warning, which several tests capture on purpose.
"""

import math
import warnings

import numpy as np
import pytest

from fedsgm import (
    AccountantParams,
    CentralConfig,
    ClientData,
    FedConfig,
    MechanismConfig,
    SketchSpec,
    Task,
    client_local_update,
    client_privatize,
    client_sampler,
    identity_compressor,
    iid_partition,
    make_federated_quadratic,
    make_logreg,
    run_central_sgm,
    run_federation,
    sample_sketch,
    server_round,
    sgm_epsilon,
)
from fedsgm.errors import ConfigurationError, DimensionMismatchError
from fedsgm.fedsim import (
    _CENTRAL_TAG,
    PrivatizedUpdate,
    init_server_state,
    local_stream,
    records_to_csv,
)
from fedsgm.mechanism import noise_stream

NO_CLIP = 1e9  # tau large enough that clipping never activates in these runs


def diag_quadratic_task():
    """L(theta) = 0.5 theta^T diag(1,2) theta on a single sample."""
    H = np.diag([1.0, 2.0])
    return Task(
        name="diag",
        d=2,
        n=1,
        loss=lambda theta, idx=None: float(0.5 * theta @ H @ theta),
        grad=lambda theta, idx=None: H @ theta,
        per_example_grads=lambda theta, idx: np.tile(H @ theta, (len(idx), 1)),
        hessian=lambda theta: H,
        theta0=np.zeros(2),
        minimum_value=0.0,
    )


def small_fed_config(**over):
    base = dict(
        clients=4,
        clients_per_round=2,
        local_steps=2,
        rounds=3,
        eta_local=0.1,
        eta_global=0.5,
        batch_size=4,
        mechanism=MechanismConfig(tau=1.0, sigma_g=0.8, b=6, noise_seed=1),
        sketch_b=None,
        optimizer="gd",
        master_seed=7,
    )
    base.update(over)
    return FedConfig(**base)


# ---------------------------------------------------------------------------
# config and data types


def test_fed_config_validation():
    with pytest.raises(ConfigurationError):
        small_fed_config(clients_per_round=5)  # > clients
    with pytest.raises(ConfigurationError):
        small_fed_config(local_steps=0)
    with pytest.raises(ConfigurationError):
        small_fed_config(eta_global=0.0)
    with pytest.raises(ConfigurationError):
        small_fed_config(optimizer="lbfgs")
    with pytest.raises(ConfigurationError):
        # sketch_b and mechanism.b must agree
        small_fed_config(sketch_b=5, mechanism=MechanismConfig(tau=1.0, sigma_g=0.5, b=6))


def test_client_data_rejects_empty_shard():
    with pytest.raises(ConfigurationError):
        ClientData(diag_quadratic_task(), np.array([], dtype=int))


# ---------------------------------------------------------------------------
# client local update


def test_local_update_single_step_is_scaled_gradient():
    task = diag_quadratic_task()
    data = ClientData(task, np.array([0]))
    rng = local_stream(0, 0, 0)
    # from the origin the identity is exact
    delta0 = client_local_update(np.zeros(2), data, 1, 0.1, rng)
    assert np.array_equal(delta0, 0.1 * task.grad(np.zeros(2)))
    theta = np.array([1.0, 1.0])
    delta = client_local_update(theta, data, 1, 0.1, rng)
    assert np.allclose(delta, 0.1 * task.grad(theta), rtol=1e-12, atol=1e-15)


def test_local_update_zero_step_size():
    data = ClientData(diag_quadratic_task(), np.array([0]))
    delta = client_local_update(np.array([1.0, 1.0]), data, 3, 0.0, local_stream(0, 0, 0))
    assert np.array_equal(delta, np.zeros(2))


def test_local_update_two_step_hand_trace():
    # A = diag(1, 2), theta0 = (1, 1), eta = 0.1, K = 2, full batch:
    # step 1: theta = (0.9, 0.8); step 2: theta = (0.81, 0.64)
    # delta = (0.19, 0.36), traced by hand.
    data = ClientData(diag_quadratic_task(), np.array([0]))
    delta = client_local_update(np.array([1.0, 1.0]), data, 2, 0.1, local_stream(0, 0, 0))
    assert np.allclose(delta, [0.19, 0.36], rtol=1e-12, atol=0)


def test_local_update_minibatch_deterministic():
    task, part = make_logreg(n=40, d=5, clients=2, seed=1)
    data = ClientData(task, part.client_indices(0))
    theta = np.full(5, 0.3)
    d1 = client_local_update(theta, data, 4, 0.05, local_stream(9, 0, 2), batch_size=5)
    d2 = client_local_update(theta, data, 4, 0.05, local_stream(9, 0, 2), batch_size=5)
    d3 = client_local_update(theta, data, 4, 0.05, local_stream(9, 0, 3), batch_size=5)
    assert np.array_equal(d1, d2)
    assert not np.array_equal(d1, d3)


# ---------------------------------------------------------------------------
# client privatize


def test_privatize_noiseless_identity_within_threshold():
    mech = MechanismConfig(tau=10.0, sigma_g=0.0, b=3)
    delta = np.array([0.25, -0.5, 0.125])  # binary fractions: /0.5 is exact
    out = client_privatize(delta, 0.5, mech, identity_compressor(3), None, client_id=0)
    assert np.array_equal(out.payload, delta)
    assert out.clipped is False


def test_privatize_clip_saturation_norm():
    mech = MechanismConfig(tau=1.0, sigma_g=0.0, b=4)
    eta = 0.5
    delta = eta * np.array([2.0, 0.0, 0.0, 0.0])  # normalized norm = 2 tau
    out = client_privatize(delta, eta, mech, identity_compressor(4), None)
    assert out.clipped is True
    assert np.linalg.norm(out.payload) == eta * mech.tau


def test_privatize_clip_flag_boundary():
    mech = MechanismConfig(tau=1.0, sigma_g=0.0, b=2)
    inside = client_privatize(np.array([0.3, 0.4]), 1.0, mech, identity_compressor(2), None)
    outside = client_privatize(np.array([3.0, 4.0]), 1.0, mech, identity_compressor(2), None)
    assert inside.clipped is False
    assert outside.clipped is True


def test_privatize_dimension_mismatch():
    mech = MechanismConfig(tau=1.0, sigma_g=0.0, b=8)
    R = sample_sketch(SketchSpec(b=4, d=16, seed=0))
    with pytest.raises(DimensionMismatchError):
        client_privatize(np.zeros(16), 1.0, mech, R, None)


def test_privatize_payload_lives_in_sketched_space():
    mech = MechanismConfig(tau=1.0, sigma_g=0.5, b=4, noise_seed=2)
    R = sample_sketch(SketchSpec(b=4, d=16, seed=0))
    out = client_privatize(np.ones(16), 1.0, mech, R, noise_stream(2, 0, 0))
    assert out.payload.shape == (4,)


# ---------------------------------------------------------------------------
# server round


def test_server_round_zero_updates_leave_theta():
    cfg = small_fed_config()
    state = init_server_state(cfg, 6)
    theta = np.arange(6.0)
    ups = [PrivatizedUpdate(c, np.zeros(6), False) for c in range(2)]
    theta2, _ = server_round(theta, ups, identity_compressor(6), state)
    assert np.array_equal(theta2, theta)


def test_server_round_single_update_identity_aggregation():
    cfg = small_fed_config()
    state = init_server_state(cfg, 6)
    payload = np.linspace(-1, 1, 6)
    theta2, _ = server_round(np.zeros(6), [PrivatizedUpdate(0, payload, False)], identity_compressor(6), state)
    assert np.allclose(theta2, -cfg.eta_global * payload, rtol=1e-15, atol=0)


def test_server_round_order_independent():
    state = init_server_state(small_fed_config(), 5)
    rng = np.random.default_rng(3)
    ups = [PrivatizedUpdate(c, rng.standard_normal(5), False) for c in range(6)]
    theta = rng.standard_normal(5)
    ref, _ = server_round(theta, ups, identity_compressor(5), state)
    for perm_seed in range(4):
        shuffled = list(np.random.default_rng(perm_seed).permutation(ups))
        got, _ = server_round(theta, shuffled, identity_compressor(5), state)
        assert np.array_equal(got, ref)  # bit-identical


def test_server_round_rejects_raw_updates():
    # the type boundary: a d-dimensional (unsketched) vector must not pass
    state = init_server_state(small_fed_config(sketch_b=3, mechanism=MechanismConfig(tau=1.0, sigma_g=0.5, b=3)), 3)
    R = sample_sketch(SketchSpec(b=3, d=12, seed=1))
    raw = PrivatizedUpdate(0, np.zeros(12), False)
    with pytest.raises(DimensionMismatchError):
        server_round(np.zeros(12), [raw], R, state)
    with pytest.raises(ConfigurationError):
        server_round(np.zeros(12), [], R, state)


# ---------------------------------------------------------------------------
# client sampler


def test_sampler_full_participation():
    assert np.array_equal(client_sampler(7, 7, 0, 123), np.arange(7))


def test_sampler_deterministic_and_seed_sensitive():
    a = client_sampler(50, 10, 4, 9)
    b = client_sampler(50, 10, 4, 9)
    c = client_sampler(50, 10, 5, 9)
    d = client_sampler(50, 10, 4, 10)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c) or not np.array_equal(a, d)
    assert len(np.unique(a)) == 10  # without replacement


def test_sampler_uniform_frequency():
    # 1e5 rounds, C=20, N=5: empirical per-client frequency within 3 SE of 1/4
    C, N, rounds = 20, 5, 100_000
    counts = np.zeros(C)
    for t in range(rounds):
        counts[client_sampler(C, N, t, 77)] += 1
    freq = counts / rounds
    q = N / C
    se = math.sqrt(q * (1 - q) / rounds)
    assert np.all(np.abs(freq - q) <= 3 * se)


# ---------------------------------------------------------------------------
# full federation runs


def test_fedavg_equivalence():
    # identity compressor, sigma_g = 0, tau = inf, full participation, K = 1,
    # GD server: must match a textbook FedAvg implementation to 1e-12.
    task, part = make_federated_quadratic(
        [2.0, 1.0, 0.5, 0.25], seed=5, clients=3, heterogeneity=0.5, center_scale=1.5
    )
    cfg = FedConfig(
        clients=3,
        clients_per_round=3,
        local_steps=1,
        rounds=25,
        eta_local=0.2,
        eta_global=0.7,
        batch_size=10,
        mechanism=MechanismConfig(tau=math.inf, sigma_g=0.0, b=4),
        sketch_b=None,
        optimizer="gd",
        master_seed=3,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # eps = inf ablation warning
        result = run_federation(cfg, task, part)

    theta = task.theta0.copy()
    losses = []
    for _ in range(cfg.rounds):
        grads = [task.grad(theta, part.client_indices(c)) for c in range(3)]
        theta = theta - cfg.eta_global * cfg.eta_local * np.mean(grads, axis=0)
        losses.append(task.loss(theta))

    assert np.allclose(result.theta, theta, rtol=1e-12, atol=1e-14)
    for rec, ref_loss in zip(result, losses):
        assert rec.train_loss == pytest.approx(ref_loss, rel=1e-12)
        assert rec.clip_activation_rate == 0.0
        assert math.isinf(rec.epsilon_spent)


def test_sketched_quadratic_converges():
    # strongly convex quadratic, b = d/2, sigma_g = 0: the sketched run still
    # drives the gradient down by >= 1000x over 200 rounds.
    task, part = make_federated_quadratic(
        np.linspace(0.5, 2.0, 20), seed=3, clients=4, heterogeneity=0.3, center_scale=2.0
    )
    cfg = FedConfig(
        clients=4,
        clients_per_round=4,
        local_steps=1,
        rounds=200,
        eta_local=0.1,
        eta_global=0.5,
        batch_size=10,
        mechanism=MechanismConfig(tau=NO_CLIP, sigma_g=0.0, b=10),
        sketch_b=10,
        optimizer="gd",
        master_seed=11,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = run_federation(cfg, task, part)
    g0 = task.grad(task.theta0)
    initial = float(g0 @ g0)
    assert result[-1].grad_norm_sq <= 1e-3 * initial


def test_run_deterministic_in_seed():
    task, part = make_logreg(n=48, d=6, clients=4, seed=2)
    cfg = small_fed_config(
        rounds=4,
        sketch_b=3,
        mechanism=MechanismConfig(tau=1.0, sigma_g=1.2, b=3, noise_seed=5),
    )
    r1 = run_federation(cfg, task, part)
    r2 = run_federation(cfg, task, part)
    assert np.array_equal(r1.theta, r2.theta)
    assert records_to_csv(r1) == records_to_csv(r2)
    for a, b in zip(r1, r2):
        assert a == b
    # a different master seed genuinely changes the run
    r3 = run_federation(
        FedConfig(**{**cfg.__dict__, "master_seed": 8}), task, part
    )
    assert not np.array_equal(r1.theta, r3.theta)


def test_thread_count_does_not_change_results(monkeypatch):
    task, part = make_logreg(n=64, d=5, clients=8, seed=4)
    cfg = small_fed_config(
        clients=8,
        clients_per_round=4,
        rounds=3,
        sketch_b=3,
        mechanism=MechanismConfig(tau=1.0, sigma_g=1.0, b=3, noise_seed=6),
    )
    monkeypatch.setenv("FED_SGM_THREADS", "1")
    serial = run_federation(cfg, task, part)
    monkeypatch.setenv("FED_SGM_THREADS", "4")
    threaded = run_federation(cfg, task, part)
    assert np.array_equal(serial.theta, threaded.theta)
    assert records_to_csv(serial) == records_to_csv(threaded)


def test_epsilon_ledger_matches_accountant():
    task, part = make_logreg(n=60, d=6, clients=6, seed=5)
    mech = MechanismConfig(tau=1.0, sigma_g=0.9, b=6, noise_seed=2)
    cfg = small_fed_config(
        clients=6, clients_per_round=2, rounds=5, mechanism=mech, sketch_b=None
    )
    result = run_federation(cfg, task, part)
    eps = [r.epsilon_spent for r in result]
    assert all(b >= a for a, b in zip(eps, eps[1:]))  # non-decreasing
    expected = sgm_epsilon(
        AccountantParams(q=2 / 6, T=5, tau=1.0, b=6, sigma_g=0.9), cfg.delta
    )
    assert eps[-1] == expected


def test_regime_violation_warns_and_continues():
    task, part = make_logreg(n=30, d=6, clients=3, seed=6)
    # r = 2 tau^2/(b sigma^2) = 2/(6*0.09) = 3.7 >= 1: accounting impossible
    mech = MechanismConfig(tau=1.0, sigma_g=0.3, b=6, noise_seed=2)
    cfg = small_fed_config(clients=3, clients_per_round=2, rounds=2, mechanism=mech)
    with pytest.warns(UserWarning, match="epsilon = inf"):
        result = run_federation(cfg, task, part)
    assert len(result) == 2
    assert all(math.isinf(r.epsilon_spent) for r in result)


def test_clip_rate_regimes():
    task, part = make_federated_quadratic(
        [1.0, 0.5], seed=7, clients=3, heterogeneity=0.5, center_scale=2.0
    )
    base = dict(
        clients=3,
        clients_per_round=3,
        local_steps=2,
        rounds=3,
        eta_local=0.1,
        eta_global=0.5,
        batch_size=4,
        sketch_b=None,
        optimizer="gd",
        master_seed=1,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tight = run_federation(
            FedConfig(mechanism=MechanismConfig(tau=1e-9, sigma_g=0.0, b=2), **base),
            task,
            part,
        )
        loose = run_federation(
            FedConfig(mechanism=MechanismConfig(tau=NO_CLIP, sigma_g=0.0, b=2), **base),
            task,
            part,
        )
    assert all(r.clip_activation_rate == 1.0 for r in tight)
    assert all(r.clip_activation_rate == 0.0 for r in loose)


def test_mechanism_b_must_match_payload_dim():
    task, part = make_logreg(n=30, d=6, clients=3, seed=8)
    cfg = small_fed_config(
        clients=3, clients_per_round=2, mechanism=MechanismConfig(tau=1.0, sigma_g=0.5, b=4)
    )  # identity mode: payloads are d=6-dimensional, mechanism says 4
    with pytest.raises(ConfigurationError):
        run_federation(cfg, task, part)


def test_partition_mismatch_rejected():
    task, part = make_logreg(n=30, d=6, clients=3, seed=9)
    cfg = small_fed_config(clients=4, clients_per_round=2)
    with pytest.raises(ConfigurationError):
        run_federation(cfg, task, part)


# ---------------------------------------------------------------------------
# centralized variant


def test_central_matches_single_client_federation():
    task, _ = make_federated_quadratic([2.0, 1.0, 0.5, 0.25], seed=10, center_scale=1.0)
    mech = MechanismConfig(tau=1.0, sigma_g=1.5, b=2, noise_seed=4)
    central = run_central_sgm(
        CentralConfig(steps=6, batch_size=1, eta=0.05, mechanism=mech, sketch_b=2, master_seed=13),
        task,
    )
    fed = run_federation(
        FedConfig(
            clients=1,
            clients_per_round=1,
            local_steps=1,
            rounds=6,
            eta_local=1.0,  # exact scaling: payload math identical to central
            eta_global=0.05,
            batch_size=1,
            mechanism=mech,
            sketch_b=2,
            optimizer="gd",
            master_seed=13,
        ),
        task,
        iid_partition(1, 1),
    )
    assert np.allclose(central.theta, fed.theta, rtol=1e-12, atol=1e-14)
    for a, b in zip(central, fed):
        assert a.train_loss == pytest.approx(b.train_loss, rel=1e-12)


def test_central_matches_plain_sgd():
    # sigma_g = 0, identity compressor, tau = inf: plain minibatch SGD.
    task, _ = make_logreg(n=40, d=5, clients=1, seed=11)
    mech = MechanismConfig(tau=math.inf, sigma_g=0.0, b=5)
    cfg = CentralConfig(steps=8, batch_size=4, eta=0.3, mechanism=mech, master_seed=21)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = run_central_sgm(cfg, task)

    theta = task.theta0.copy()
    batch_rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence((21, _CENTRAL_TAG)))
    )
    for _ in range(8):
        batch = batch_rng.choice(task.n, size=4, replace=False)
        gs = task.per_example_grads(theta, batch)
        theta = theta - (0.3 / 4) * gs.sum(axis=0)
    assert np.allclose(out.theta, theta, rtol=1e-12, atol=1e-15)


def test_central_sketch_aggregation_linearity():
    # sketch(sum of clipped grads) == sum of per-example sketches, up to
    # floating-point associativity; bitwise when the batch has one element.
    task, _ = make_logreg(n=20, d=8, clients=1, seed=12)
    R = sample_sketch(SketchSpec(b=4, d=8, seed=3))
    theta = 0.3 * np.ones(8)
    grads = task.per_example_grads(theta, np.arange(6))
    agg_then_sketch = R.sketch(grads.sum(axis=0))
    sketch_then_agg = np.sum([R.sketch(g) for g in grads], axis=0)
    assert np.allclose(agg_then_sketch, sketch_then_agg, rtol=1e-12, atol=1e-14)
    single = task.per_example_grads(theta, np.arange(1))
    assert np.array_equal(R.sketch(single.sum(axis=0)), R.sketch(single[0]))


def test_central_batch_size_bounds():
    task, _ = make_logreg(n=10, d=4, clients=1, seed=13)
    mech = MechanismConfig(tau=1.0, sigma_g=0.5, b=4)
    with pytest.raises(ConfigurationError):
        run_central_sgm(CentralConfig(steps=1, batch_size=11, eta=0.1, mechanism=mech), task)


# ---------------------------------------------------------------------------
# emission helpers


def test_records_csv_shape():
    task, part = make_logreg(n=30, d=4, clients=3, seed=14)
    cfg = small_fed_config(
        clients=3,
        clients_per_round=2,
        rounds=2,
        mechanism=MechanismConfig(tau=1.0, sigma_g=1.0, b=4, noise_seed=9),
    )
    result = run_federation(cfg, task, part)
    text = records_to_csv(result)
    lines = text.strip().split("\n")
    assert lines[0] == "# fed-sgm csv v1"
    assert lines[1] == "round,train_loss,grad_norm_sq,test_metric,clip_rate,epsilon_spent"
    assert len(lines) == 2 + cfg.rounds
    # full-precision floats round-trip
    first = lines[2].split(",")
    assert float(first[1]) == result[0].train_loss
