import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localams.optimizers import NAIVE, SGD, SHARED, Hyperparams
from localams.simulator import (
    ConfigError, DivergenceError, ExperimentConfig, build_problem, config_from_dict,
    initial_state, run_experiment, sweep,
)

import oracles


def ce_config(algo, T=100, **kw):
    return ExperimentConfig(algo, Hyperparams(0.1, 0.0, 0.5, 1e-8, 1, T),
                            {"family": "counterexample"}, num_workers=3, **kw)


def quad_config(algo=SHARED, N=4, d=5, T=200, k=5, alpha=0.01, sigma=0.0, **kw):
    return ExperimentConfig(algo, Hyperparams(alpha, 0.9, 0.99, 1e-8, k, T),
                            {"family": "quadratic", "dim": d}, num_workers=N, seed=3,
                            noise_std=sigma, **kw)


def test_initial_state_counterexample():
    workers, server = initial_state(ce_config(NAIVE))
    assert [w.x[0] for w in workers] == [5.0, 5.0, 5.0]
    assert all(w.m[0] == 0 and w.v[0] == 0 and w.vhat_local[0] == 1e-8 for w in workers)
    assert server.vhat_shared[0] == 1e-8 and server.sync_rounds == 0


def test_initial_state_seeded_draw_is_deterministic():
    a, _ = initial_state(quad_config())
    b, _ = initial_state(quad_config())
    assert a[0].x.tobytes() == b[0].x.tobytes()
    assert all(w.x.tobytes() == a[0].x.tobytes() for w in a)
    c, _ = initial_state(replace(quad_config(), seed=4))
    assert not np.array_equal(a[0].x, c[0].x)


def test_naive_trajectory_matches_scalar_oracle():
    log = run_experiment(ce_config(NAIVE, T=100, validators=True))
    expected, _ = oracles.counterexample_naive(100)
    got = [x[0] for x in log.trace.xbar]
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)
    assert all(b > a for a, b in zip(got[1:], got[2:]))


def test_shared_trajectory_matches_scalar_oracle():
    log = run_experiment(ce_config(SHARED, T=2000, validators=True))
    expected = oracles.counterexample_shared(2000)
    got = [x[0] for x in log.trace.xbar]
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)
    assert abs(got[-1]) <= 0.5
    assert not log.diverged


def test_gradient_descent_on_quadratic_monotone():
    cfg = quad_config(SGD, N=1, k=1, alpha=0.1, T=300)
    log = run_experiment(cfg)
    assert all(b <= a for a, b in zip(log.f_xbar, log.f_xbar[1:]))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 60), st.integers(1, 12), st.sampled_from([SGD, NAIVE, SHARED]))
def test_sync_round_count_and_bytes(T, k, algo):
    k = min(k, T)
    cfg = quad_config(algo, N=3, d=2, T=T, k=k, cadence=7)
    log = run_experiment(cfg)
    rounds = T // k
    per = 4 if algo == SHARED else 2
    assert log.sync_rounds[-1] == rounds
    assert log.comm_bytes[-1] == rounds * 3 * per * 2 * 8
    assert log.t[-1] == T and log.t == sorted(set(log.t))
    assert all(b >= a for a, b in zip(log.comm_bytes, log.comm_bytes[1:]))
    # every sync iteration is recorded
    assert set(range(k, T + 1, k)) <= set(log.t)


def test_identical_config_identical_log():
    a = run_experiment(quad_config(sigma=0.3))
    b = run_experiment(quad_config(sigma=0.3))
    assert a.rows() == b.rows()


def test_parallel_workers_match_sequential():
    seq = run_experiment(quad_config(sigma=0.3, validators=True))
    par = run_experiment(replace(quad_config(sigma=0.3, validators=True), parallel=True))
    assert seq.rows() == par.rows()
    assert np.array_equal(seq.trace.arrays()["worker_x"], par.trace.arrays()["worker_x"])


def test_local_sgd_k1_is_synchronous_sgd():
    log = run_experiment(quad_config(SGD, N=4, k=1, alpha=0.05, sigma=0.2, T=50, validators=True))
    tr = log.trace.arrays()
    for s in range(1, 51):
        np.testing.assert_allclose(tr["xbar"][s], tr["xbar"][s - 1] - 0.05 * tr["gbar"][s],
                                   rtol=0, atol=1e-14)


def test_shared_without_moments_is_preconditioned_sgd():
    cfg = replace(quad_config(SHARED, N=3, k=1, T=100), validators=True,
                  hyper=Hyperparams(0.02, 0.0, 0.0, 1e-8, 1, 100))
    log = run_experiment(cfg)
    tr = log.trace.arrays()
    for s in range(1, 101):
        step = 0.02 / np.sqrt(tr["vhat"][s]) * tr["gbar"][s]
        np.testing.assert_allclose(tr["xbar"][s], tr["xbar"][s - 1] - step, rtol=0, atol=1e-13)
        # with beta2 = 0 the shared vhat is the running max of mean squared gradients
        assert np.all(tr["vhat"][s] >= tr["vhat"][s - 1])


def test_workers_identical_after_every_sync():
    log = run_experiment(quad_config(NAIVE, sigma=0.2, validators=True))
    tr = log.trace.arrays()
    for s in log.trace.sync_steps:
        assert all(tr["worker_x"][s][i].tobytes() == tr["worker_x"][s][0].tobytes()
                   for i in range(4))
    assert log.consensus_max[log.t.index(log.trace.sync_steps[0])] == 0.0


def test_divergence_aborts_with_iteration():
    # clipped analytic gradients grow only linearly, so use the unbounded MLP
    cfg = ExperimentConfig(SGD, Hyperparams(1e4, 0.9, 0.99, 1e-4, 1, 200),
                           {"family": "mixture_mlp", "dim": 4, "samples_per_cluster": 20,
                            "layer_widths": [4, 8, 10], "batch_size": 16}, num_workers=2)
    with pytest.raises(DivergenceError) as info:
        run_experiment(cfg)
    assert info.value.iteration < 200
    assert info.value.log.aborted and info.value.log.diverged


def test_naive_counterexample_flagged_diverged():
    assert run_experiment(ce_config(NAIVE, T=300)).diverged
    assert not run_experiment(ce_config(SHARED, T=300)).diverged


def test_cadence_and_initial_record():
    log = run_experiment(quad_config(SHARED, T=100, k=7, cadence=20))
    assert log.t[0] == 0 and log.comm_bytes[0] == 0
    assert set(log.t) == {0, 100} | set(range(20, 101, 20)) | set(range(7, 101, 7))


def test_epochs_define_iterations():
    cfg = ExperimentConfig(SHARED, Hyperparams(0.01, 0.9, 0.99, 1e-4, 10, 10),
                           {"family": "mixture_mlp", "dim": 4, "samples_per_cluster": 20,
                            "layer_widths": [4, 8, 10], "batch_size": 16},
                           num_workers=5, sharding={"strategy": "by_label", "classes_per_worker": 2},
                           epochs=2, cadence=5)
    log = run_experiment(cfg)
    # 40 samples per shard, batch 16 -> 3 iterations per epoch
    assert log.total_iters == 6 and log.t[-1] == 6


# -- config ---------------------------------------------------------------

BASE = {"algorithm": "local_amsgrad", "hyper": {"alpha": 0.1, "total_iters": 10},
        "problem": {"family": "quadratic", "dim": 3}, "num_workers": 2}


@pytest.mark.parametrize("patch,path", [
    ({"hyper": {"alpha": 0.1, "beta2": 1.5, "total_iters": 10}}, "hyper.beta2"),
    ({"hyper": {"alpha": -1, "total_iters": 10}}, "hyper.alpha"),
    ({"hyper": {"alpha": 0.1, "period": 20, "total_iters": 10}}, "hyper.period"),
    ({"hyper": {"alpha": 0.1, "total_iters": 10, "gamma": 1}}, "hyper.gamma"),
    ({"hyper": {"alpha": "big", "total_iters": 10}}, "hyper.alpha"),
    ({"algorithm": "adam"}, "algorithm"),
    ({"num_workers": 0}, "num_workers"),
    ({"cadence": 0}, "cadence"),
    ({"problem": {"family": "cnn"}}, "problem.family"),
    ({"problem": {"family": "quadratic", "colour": 1}}, "problem.colour"),
    ({"problem": {"family": "counterexample"}}, "num_workers"),
    ({"sharding": {"strategy": "random"}}, "sharding.strategy"),
    ({"epochs": 3}, "epochs"),
    ({"bogus": 1}, "bogus"),
])
def test_config_errors_name_the_field(patch, path):
    with pytest.raises(ConfigError) as info:
        config_from_dict({**BASE, **patch})
    assert info.value.path == path


def test_config_round_trip():
    cfg = config_from_dict(BASE)
    assert config_from_dict(cfg.to_dict()) == cfg


def test_infeasible_sharding_is_config_error():
    cfg = config_from_dict({**BASE, "problem": {"family": "mixture_mlp", "num_clusters": 10},
                            "sharding": {"strategy": "by_label", "classes_per_worker": 2},
                            "num_workers": 3})
    with pytest.raises(ConfigError):
        build_problem(cfg)


# -- sweep ----------------------------------------------------------------

def test_alpha_sweep_one_row_per_value():
    alphas = [1e-4, 1e-3, 1e-2, 1e-1]
    results, summary = sweep(quad_config(T=50), "alpha", alphas)
    assert [r["value"] for r in summary] == alphas
    assert len(results) == 4


def test_k_sweep_comm_strictly_decreasing():
    T = 60
    _, summary = sweep(quad_config(T=T), "k", [1, 5, 10])
    comm = [r["comm_bytes"] for r in summary]
    assert comm == [(T // k) * 4 * 4 * 5 * 8 for k in (1, 5, 10)]
    assert comm[0] > comm[1] > comm[2]


def test_algorithm_and_N_sweeps():
    _, summary = sweep(quad_config(T=30, sigma=0.1), "algorithm", [SGD, NAIVE, SHARED])
    assert len(summary) == 3
    results, _ = sweep(quad_config(T=30), "N", [1, 4])
    assert [log.num_workers for _, log in results] == [1, 4]
    with pytest.raises(ConfigError):
        sweep(quad_config(T=30), "beta", [0.1])
