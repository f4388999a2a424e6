import json
import math

import numpy as np
import pytest

from fedquant.fl_engine import (
    AlgoParams,
    SimulationError,
    aggregate,
    bound_inputs,
    default_input_ranges,
    expected_bits,
    local_sgd_pass,
    make_algo_params,
    recover_global,
    run_gqfedwavg,
)
from fedquant.bound import convergence_bound, critical_gamma
from fedquant.model_zoo import make_synthetic_quadratic
from fedquant.quantizer import QuantizerParams, QuantizedVector, decode, quantize_vector
from fedquant.rng import stream

HIGH = 2**32  # effectively lossless level count


def quad_setup(D=6, N=3, noise=0.4, seed=0, samples=12):
    task, meta = make_synthetic_quadratic(D=D, N=N, samples_per_worker=samples, noise=noise, seed=seed)
    return task, meta


def feasible_params(task, meta, K0=5, K=None, B=2, s_tilde=15, s=15, W=None, frac=0.5):
    n = task.n_workers
    K = np.full(n, 2) if K is None else np.asarray(K)
    W = np.full(n, 1.0 / n) if W is None else np.asarray(W)
    s_arr = np.full(n + 1, s)
    st_arr = np.full(n + 1, s_tilde)
    g = frac * critical_gamma(K.astype(float), W, s_arr.astype(float), meta.L, n, meta.dim)
    return make_algo_params(K0, K, B, g, W, st_arr, s_arr, meta, enforce_feasible=True)


def pm_sgd_reference(task, x0, gamma, K0, B, seed):
    """Independent parallel mini-batch SGD sharing the engine's batch streams."""
    x = np.array(x0, dtype=float)
    traj = [x.copy()]
    n = task.n_workers
    for k0 in range(1, K0 + 1):
        g = np.zeros_like(x)
        for worker in range(1, n + 1):
            rng = stream(seed, worker, k0, "batch")
            idx = rng.integers(0, task.worker_sizes[worker - 1], size=B)
            g += task.per_sample_grads(x, worker - 1, idx).mean(axis=0)
        x = x - gamma * g / n
        traj.append(x.copy())
    return traj


# ---------------------------------------------------------------------------
# ranges / params
# ---------------------------------------------------------------------------


def test_default_input_ranges_examples():
    r = default_input_ranges(1.0, 4, 2)
    assert r[0] == pytest.approx(6.0) and np.all(r[1:] == 1.0)
    assert default_input_ranges(2.0, 1, 1)[0] == pytest.approx(6.0)
    assert default_input_ranges(0.5, 100, 3)[0] == pytest.approx(16.5)


def test_algo_params_validation():
    q = QuantizerParams(3, 3, 1.0)
    with pytest.raises(ValueError):
        AlgoParams(2, [1, 1], 1, [0.1, 0.1], [0.6, 0.6], (q, q, q))  # weights sum > 1
    with pytest.raises(ValueError):
        AlgoParams(2, [1, 1], 1, [0.1], [0.5, 0.5], (q, q, q))  # gamma length


def test_enforce_feasible_rejects_large_gamma():
    task, meta = quad_setup()
    with pytest.raises(ValueError):
        feasible_params(task, meta, frac=1.5)


# ---------------------------------------------------------------------------
# local pass
# ---------------------------------------------------------------------------


def test_local_pass_zero_gamma():
    task, meta = quad_setup()
    params = feasible_params(task, meta)
    params = AlgoParams(params.K0, params.K, params.B, np.zeros(params.K0), params.W, params.quant)
    x0 = np.ones(task.dim)
    x_end, stats = local_sgd_pass(x0, 1, 1, params, task, stream(0, 1, 1, "batch"))
    assert np.array_equal(x_end, x0)
    assert len(stats.iterates) == params.K[0] + 1


def test_local_pass_full_gradient_on_zero_noise():
    task, meta = make_synthetic_quadratic(D=4, N=2, samples_per_worker=5, noise=0.0, seed=1)
    g = 0.05
    params = make_algo_params(1, [1, 1], 5, g, [0.5, 0.5], [7, 7, 7], [7, 7, 7], meta)
    x0 = np.ones(4) * 0.3
    x_end, _ = local_sgd_pass(x0, 1, 1, params, task, stream(0, 1, 1, "batch"))
    assert np.allclose(x_end, x0 - g * task.worker_grad(x0, 0), atol=1e-12)


def test_scaled_update_norm_within_R():
    task, meta = quad_setup(D=8, N=2, noise=0.6, seed=2)
    for run in range(100):
        params = feasible_params(task, meta, K0=1, K=[3, 2], B=1, frac=0.9)
        x_hat = stream(run, 0, 0, "init").normal(size=8) * 0.5
        for worker in (1, 2):
            x_end, _ = local_sgd_pass(x_hat, worker, 1, params, task, stream(run, worker, 1, "batch"))
            v = (x_end - x_hat) / (params.gamma[0] * params.K[worker - 1])
            assert np.linalg.norm(v) <= meta.R * (1 + 1e-9)


# ---------------------------------------------------------------------------
# aggregation / recovery
# ---------------------------------------------------------------------------


def qv_of(vec, qp, seed=0):
    return quantize_vector(np.asarray(vec, dtype=float), qp, stream(seed, 9, 9, "uplink"))


def test_aggregate_single_worker_identity():
    qp = QuantizerParams(HIGH, HIGH, 4.0)
    params = make_params_for_agg(1, [1], [1.0])
    qv = qv_of([0.5, -0.25], qp)
    assert np.allclose(aggregate([qv], params), decode(qv), atol=1e-15)


def make_params_for_agg(n, K, W):
    q = tuple(QuantizerParams(3, 3, 10.0) for _ in range(n + 1))
    return AlgoParams(1, K, 1, [0.1], W, q)


def test_aggregate_zero_and_cancellation():
    qp = QuantizerParams(7, 7, 4.0)
    params = make_params_for_agg(2, [2, 2], [0.5, 0.5])
    z = QuantizedVector(0, np.ones(3, dtype=np.int8), np.zeros(3, dtype=np.int64), qp, 3)
    assert np.array_equal(aggregate([z, z], params), np.zeros(3))

    v = np.array([1.0, -2.0, 0.5])
    qv = qv_of(v, QuantizerParams(HIGH, HIGH, 4.0))
    mirrored = QuantizedVector(qv.magnitude_level, (-qv.signs).astype(np.int8), qv.coord_levels, qv.params, qv.dim)
    out = aggregate([qv, mirrored], params)
    assert np.allclose(out, 0.0, atol=1e-15)


def test_aggregate_dimension_mismatch():
    qp = QuantizerParams(3, 3, 4.0)
    params = make_params_for_agg(2, [1, 1], [0.5, 0.5])
    a = QuantizedVector(0, np.ones(3, dtype=np.int8), np.zeros(3, dtype=np.int64), qp, 3)
    b = QuantizedVector(0, np.ones(2, dtype=np.int8), np.zeros(2, dtype=np.int64), qp, 2)
    with pytest.raises(ValueError):
        aggregate([a, b], params)


def test_recover_global_conventions():
    qp = QuantizerParams(5, 5, 3.0)
    zero_msg = QuantizedVector(0, np.ones(2, dtype=np.int8), np.zeros(2, dtype=np.int64), qp, 2)
    x = np.array([0.3, -0.1])
    assert np.array_equal(recover_global(x, zero_msg, 0.7, 2.0), x)

    # initialization round at effectively infinite precision recovers x0
    x0 = np.array([0.8, -0.6, 0.1])
    sum_wk = 2.5
    qp_hi = QuantizerParams(HIGH, HIGH, 2.0)
    msg = quantize_vector(x0 / sum_wk, qp_hi, stream(3, 0, 0, "downlink"))
    x1 = recover_global(np.zeros(3), msg, 1.0, sum_wk)
    assert np.allclose(x1, x0, rtol=1e-6, atol=1e-9)


def test_recovery_unbiased_at_finite_levels():
    x0 = np.array([0.5, -0.7])
    sum_wk = 1.5
    qp = QuantizerParams(2, 2, 1.0)
    n = 40_000
    rec = np.empty((n, 2))
    for i in range(n):
        msg = quantize_vector(x0 / sum_wk, qp, stream(i, 0, 0, "downlink"))
        rec[i] = recover_global(np.zeros(2), msg, 1.0, sum_wk)
    se = rec.std(axis=0) / math.sqrt(n)
    assert np.all(np.abs(rec.mean(axis=0) - x0) < 4 * se)


# ---------------------------------------------------------------------------
# full algorithm
# ---------------------------------------------------------------------------


def test_k0_zero_returns_recovered_init():
    task, meta = quad_setup()
    params = make_algo_params(0, [1] * 3, 1, np.zeros(0), [1 / 3] * 3, [HIGH] * 4, [HIGH] * 4, meta)
    x0 = stream(7, 0, 0, "init").normal(size=task.dim) * 0.1
    x_final, trace = run_gqfedwavg(task, params, seed=7, meta=meta, x0=x0)
    assert np.allclose(x_final, x0, rtol=1e-6, atol=1e-9)
    assert trace.loss.size == 0
    assert trace.total_downlink_bits > 0  # the init broadcast still happened


def test_matches_pm_sgd_reference():
    task, meta = quad_setup(D=5, N=3, noise=0.3, seed=4)
    g = 0.3 * critical_gamma(np.ones(3), np.full(3, 1 / 3), np.full(4, HIGH), meta.L, 3, 5)
    params = make_algo_params(20, [1, 1, 1], 2, g, [1 / 3] * 3, [HIGH] * 4, [HIGH] * 4, meta)
    x0 = stream(5, 0, 0, "init").normal(size=5) * 0.3
    x_final, trace = run_gqfedwavg(task, params, seed=5, meta=meta, x0=x0, record_models=True)
    ref = pm_sgd_reference(task, x0, g, 20, 2, seed=5)
    for k in range(20):
        assert np.allclose(trace.models[k], ref[k], rtol=1e-6, atol=1e-8)
    assert np.allclose(x_final, ref[20], rtol=1e-6, atol=1e-8)


def test_loss_nonincreasing_zero_noise():
    task, meta = make_synthetic_quadratic(D=6, N=2, samples_per_worker=4, noise=0.0, seed=6)
    params = feasible_params(task, meta, K0=15, K=[2, 2], B=1, s_tilde=HIGH, s=HIGH, frac=0.5)
    _, trace = run_gqfedwavg(task, params, seed=8, meta=meta)
    assert np.all(np.diff(trace.loss) <= 1e-12)


def test_lemma2_bounds_hold_over_runs():
    task, meta = quad_setup(D=7, N=3, noise=0.5, seed=9)
    d0 = (meta.R + 1) * (1 + math.sqrt(meta.dim))
    for run in range(20):
        params = feasible_params(task, meta, K0=4, K=[1 + run % 3, 2, 1], B=1 + run % 2, frac=0.8)
        _, trace = run_gqfedwavg(task, params, seed=100 + run, meta=meta)
        assert np.all(trace.worker_update_norms <= meta.R * (1 + 1e-9))
        assert np.all(trace.server_input_norms <= d0 * (1 + 1e-9))


def test_bit_accounting_exact():
    task, meta = quad_setup(D=5, N=3, noise=0.2, seed=10)
    params = feasible_params(task, meta, K0=6, s_tilde=15, s=7)
    _, trace = run_gqfedwavg(task, params, seed=11, meta=meta)
    up, down = expected_bits(params, task.dim)
    assert trace.total_uplink_bits == up
    assert trace.total_downlink_bits == down
    assert trace.downlink_bits.size == params.K0 + 1


def test_run_is_deterministic():
    task, meta = quad_setup(D=5, N=2, noise=0.4, seed=12)
    params = feasible_params(task, meta, K0=5)
    x1, t1 = run_gqfedwavg(task, params, seed=13, meta=meta)
    x2, t2 = run_gqfedwavg(task, params, seed=13, meta=meta)
    assert np.array_equal(x1, x2)
    assert t1.to_csv() == t2.to_csv()


def test_worker_streams_are_order_independent():
    # each worker's batch stream depends only on (seed, worker, k0)
    task, meta = quad_setup(D=5, N=3, noise=0.4, seed=14)
    params = feasible_params(task, meta, K0=1)
    x_hat = np.zeros(5)
    forward = [local_sgd_pass(x_hat, w, 1, params, task, stream(9, w, 1, "batch"))[0] for w in (1, 2, 3)]
    backward = [local_sgd_pass(x_hat, w, 1, params, task, stream(9, w, 1, "batch"))[0] for w in (3, 2, 1)]
    for a, b in zip(forward, reversed(backward)):
        assert np.array_equal(a, b)


def test_local_drift_bound_lemma():
    # empirical second moment of the local drift vs the analytic bound
    task, meta = make_synthetic_quadratic(D=4, N=1, samples_per_worker=25, noise=0.8, seed=15)
    K_n, B, g = 3, 2, 0.08
    params = make_algo_params(1, [K_n], B, g, [1.0], [15, 15], [15, 15], meta)
    x_hat = stream(16, 0, 0, "init").normal(size=4) * 0.5
    n_seeds = 300
    diffs = np.empty(n_seeds)
    for i in range(n_seeds):
        x_end, stats = local_sgd_pass(x_hat, 1, 1, params, task, stream(1000 + i, 1, 1, "batch"))
        lhs = float(np.sum((x_end - x_hat) ** 2))
        grads = [task.grad_full(it) for it in stats.iterates[:K_n]]
        rhs = g**2 * K_n * meta.sigma**2 / B + g**2 * K_n * sum(float(gr @ gr) for gr in grads)
        diffs[i] = lhs - rhs
    assert diffs.mean() <= 3 * diffs.std() / math.sqrt(n_seeds)


def test_theorem1_inputs_roundtrip():
    task, meta = quad_setup()
    params = feasible_params(task, meta)
    bi = bound_inputs(params, meta)
    total, terms = convergence_bound(bi)
    assert total > 0 and np.all(terms >= 0)


def test_trace_serialization():
    task, meta = quad_setup(D=4, N=2, noise=0.3, seed=17)
    params = feasible_params(task, meta, K0=3)
    _, trace = run_gqfedwavg(task, params, seed=18, meta=meta)
    csv = trace.to_csv()
    lines = csv.strip().splitlines()
    assert len(lines) == 4
    header = lines[0].split(",")
    assert header[:3] == ["k0", "loss", "grad_sq"]
    row = lines[1].split(",")
    assert float(row[1]) == trace.loss[0]
    blob = json.loads(trace.to_json())
    assert blob["final_loss"] == trace.final_loss
    assert len(blob["downlink_bits"]) == 4
