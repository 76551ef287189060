import json

import numpy as np
import pytest
from scipy import stats

from overflow_ppo.dynamics import State, cost
from overflow_ppo.network import ClipSchedule, NetworkParams, init_params, ppo_loss
from overflow_ppo.oracle import pool_kernel
from overflow_ppo.policy import complete_overflow, network, network_log_kappa, no_overflow
from overflow_ppo.presets import load_preset
from overflow_ppo.rollout import Trajectory, batch_means, evaluate, rollout
from overflow_ppo.trainer import TrainConfig, TrainingDiverged, build_batch, center_on_decisions, fit_value, train

from conftest import random_system


def tiny_config(**kw) -> TrainConfig:
    base = dict(iterations=3, days_per_actor=30, actors=2, epochs=2, hidden=(4,), burn_in=5,
                eval_days=40, minibatch=64, delta=1e-9, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_sys():
    return random_system(np.random.default_rng(77), J=2, m=2, N_range=(3, 5), load=1.1)


def fast_pool():
    """Small, lightly loaded pools: daily costs decorrelate within a few days."""
    return load_preset("twopool-midnight").replace(N=[5, 5], arrivals=[[3.0], [3.0]], mu=[0.9, 0.9])


def _stationary(K):
    w, v = np.linalg.eig(K.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1))])
    return pi / pi.sum()


# -- rollout -------------------------------------------------------------------------------


def test_rollout_deterministic(small3):
    a = rollout(complete_overflow(), small3, 50, 9)
    b = rollout(complete_overflow(), small3, 50, 9)
    for k, v in a.as_dict().items():
        assert np.array_equal(v, b.as_dict()[k]), k
    c = rollout(complete_overflow(), small3, 50, 10)
    assert not np.array_equal(a.x, c.x)


def test_rollout_records(small3, rng):
    params = init_params("partially_shared", 3, small3.m, (4,), rng)
    traj = rollout(network(params), small3, 40, 2, burn_in=3)
    assert traj.n == 40 * small3.m
    assert np.array_equal(traj.h, np.tile(np.arange(small3.m), 40))
    for t in range(0, traj.n, 7):
        s = State(traj.x[t], traj.y[t], traj.h[t])
        assert traj.cost[t] == pytest.approx(cost(s, traj.f[t], small3))
    # stored log-kappa equals the generating network's output at the recorded decision states
    samples = traj.atom_sample[traj.rec_atom]
    logk = network_log_kappa(params, traj.atom_x[traj.rec_atom], traj.y[samples], traj.h[samples], small3,
                             masks=traj.atom_mask[traj.rec_atom])
    got = logk[np.arange(len(samples)), traj.rec_class, traj.rec_pool]
    assert np.allclose(got, traj.rec_logk, atol=1e-12)


def test_rollout_without_arrivals_stays_empty(small3):
    cfg = small3.replace(arrivals=np.zeros_like(small3.arrivals))
    traj = rollout(complete_overflow(), cfg, 30, 1)
    assert not traj.x.any() and not traj.cost.any()


def test_rollout_transitions_match_kernel():
    """Two-pool midnight, no overflow: one-day transitions of pool 1 follow the exact kernel."""
    cfg = load_preset("twopool-midnight")
    traj = rollout(no_overflow(), cfg, 20000, 5, record=False)
    K = pool_kernel(28, 6.25, 0.25, 120)
    x = traj.x[:, 0]
    for s in (22, 28, 34):
        nxt = x[1:][x[:-1] == s]
        obs = np.bincount(nxt, minlength=121)
        keep = K[s] * len(nxt) > 5
        exp = K[s, keep] / K[s, keep].sum() * obs[keep].sum()
        assert stats.chisquare(obs[keep], exp).pvalue > 1e-3


def test_single_pool_mean_queue_matches_exact():
    cfg = fast_pool()
    traj = rollout(no_overflow(), cfg, 20000, 13, record=False)
    K = pool_kernel(5, 3.0, 0.9, 60)
    exact = (_stationary(K) * np.maximum(np.arange(61) - 5, 0)).sum()
    sim = np.maximum(traj.x[:, 0] - 5, 0).mean()
    assert sim == pytest.approx(exact, rel=0.05)


def test_trajectory_concat_and_io(small3, tmp_path):
    a = rollout(complete_overflow(), small3, 10, 1)
    b = rollout(complete_overflow(), small3, 12, 2)
    both = Trajectory.concat([a, b])
    assert both.n == a.n + b.n and both.day.max() == 21
    both.save(tmp_path / "t.npz")
    back = Trajectory.load(tmp_path / "t.npz")
    assert np.array_equal(back.x, both.x) and np.array_equal(back.rec_logk, both.rec_logk)


# -- evaluation ----------------------------------------------------------------------------


def test_evaluate_zero_cost(small3):
    cfg = small3.replace(arrivals=np.zeros_like(small3.arrivals))
    ev = evaluate(no_overflow(), cfg, 40, 1)
    assert (ev.mean, ev.half_width) == (0.0, 0.0)


def test_evaluate_deterministic_and_guarded(small3):
    a = evaluate(complete_overflow(), small3, 60, 4)
    assert a == evaluate(complete_overflow(), small3, 60, 4)
    assert a.half_width >= 0 and a.days == 60
    with pytest.raises(ValueError, match="20"):
        evaluate(no_overflow(), small3, 19, 1)


def test_batch_means_formula():
    daily = np.repeat(np.arange(20.0), 3)
    mean, hw = batch_means(daily)
    assert mean == pytest.approx(9.5)
    assert hw == pytest.approx(1.96 * np.std(np.arange(20.0), ddof=1) / np.sqrt(20))


def test_half_width_scales_like_sqrt_two():
    cfg = fast_pool()
    short = [evaluate(no_overflow(), cfg, 400, s).half_width for s in range(12)]
    long = [evaluate(no_overflow(), cfg, 800, s).half_width for s in range(12)]
    ratio = np.mean(short) / np.mean(long)
    assert abs(ratio / np.sqrt(2) - 1) <= 0.25


# -- training ------------------------------------------------------------------------------


def test_zero_iterations_returns_initial(small_sys, tmp_path):
    params = init_params("partially_shared", 2, 2, (4,), np.random.default_rng(1))
    params.weights[-1][...] = 0.3
    res = train(tiny_config(iterations=0), small_sys, params.copy(), out_dir=tmp_path)
    assert res.reports == []
    assert np.array_equal(res.params.flatten(), params.flatten())
    assert res.final is not None and (tmp_path / "final.json").exists()


def test_training_reproducible_and_improves_surrogate(small_sys):
    a = train(tiny_config(), small_sys)
    b = train(tiny_config(), small_sys)
    strip = lambda reps: [{k: v for k, v in r.to_dict().items() if k != "seconds"} for r in reps]  # noqa: E731
    assert strip(a.reports) == strip(b.reports)
    assert np.array_equal(a.params.flatten(), b.params.flatten())
    assert a.final == b.final
    for r in a.reports:
        assert r.loss_after <= r.loss_before + 1e-9
    assert [r.clip for r in a.reports] == [0.5, 0.5, 0.5]


def test_resume_is_bit_identical(small_sys, tmp_path):
    full = train(tiny_config(iterations=4), small_sys, out_dir=tmp_path / "full")
    train(tiny_config(iterations=2), small_sys, out_dir=tmp_path / "part", evaluate_final=False)
    resumed = train(tiny_config(iterations=4), small_sys, out_dir=tmp_path / "part", resume=True)
    assert np.array_equal(full.params.flatten(), resumed.params.flatten())
    assert [r.train_cost for r in full.reports] == [r.train_cost for r in resumed.reports]
    assert full.final == resumed.final
    lines = (tmp_path / "full" / "reports.jsonl").read_text().splitlines()
    assert [json.loads(x)["iteration"] for x in lines] == [0, 1, 2, 3]
    header = (tmp_path / "full" / "summary.csv").read_text().splitlines()[0]
    assert header == "iteration,train_cost,eval_cost,ci_half_width,loss_before,loss_after,clip,seconds"
    assert NetworkParams.load(tmp_path / "full" / "checkpoints" / "iter_003.json").n_params == full.params.n_params


def test_divergence_aborts(small_sys):
    with pytest.raises(TrainingDiverged, match="exceeds"):
        train(tiny_config(abort_factor=0.5), small_sys)


def test_convergence_stops_early(small_sys):
    res = train(tiny_config(iterations=5, delta=1e9), small_sys, evaluate_final=False)
    assert res.stopped == "converged" and len(res.reports) == 1


def test_invalid_config_rejected(small_sys):
    with pytest.raises(ValueError, match="actors"):
        train(tiny_config(actors=0), small_sys)
    bad = TrainConfig(delta=0, reuse=-1, select="x", value_fit="y", center="z").violations()
    assert len(bad) == 5


def test_train_config_roundtrip():
    tc = tiny_config(clip=ClipSchedule(0.4, ((3, 0.1),)), hidden=(7, 5))
    back = TrainConfig.from_dict(json.loads(json.dumps(tc.to_dict())))
    assert back == tc


def test_reused_samples_keep_generating_kappa(small_sys):
    """Ratios of reused samples are taken against the policy that generated them."""
    rng = np.random.default_rng(0)
    old = init_params("partially_shared", 2, 2, (4,), rng)
    old.weights[-1][...] = rng.normal(size=old.weights[-1].shape)
    new = old.copy()
    new.weights[-1][...] = rng.normal(size=new.weights[-1].shape)
    t_old = rollout(network(old), small_sys, 60, 1, burn_in=5)
    t_new = rollout(network(new), small_sys, 60, 2, burn_in=5)
    merged = Trajectory.concat([t_old, t_new])
    _, adv = fit_value(t_new, merged, small_sys)
    batch = build_batch(merged, adv, "partially_shared", small_sys)
    stored = np.concatenate([t_old.rec_logk, t_new.rec_logk])
    assert np.array_equal(batch.rec_logk_old, stored)  # every record belongs to a kept sample
    # at the newest params only the fresh half has unit ratios
    fresh_only = build_batch(t_new, adv[t_old.n:], "partially_shared", small_sys)
    assert ppo_loss(new, fresh_only, 0.2) == pytest.approx(fresh_only.adv.mean(), abs=1e-12)
    reused = build_batch(t_old, adv[: t_old.n], "partially_shared", small_sys)
    assert ppo_loss(old, reused, 0.2) == pytest.approx(reused.adv.mean(), abs=1e-12)
    assert ppo_loss(new, reused, 0.2) != pytest.approx(reused.adv.mean(), abs=1e-6)


def test_center_on_decisions(small_sys):
    params = init_params("partially_shared", 2, 2, (4,), np.random.default_rng(2))
    traj = rollout(network(params), small_sys, 80, 4, burn_in=5)
    _, adv = fit_value(traj, traj, small_sys)
    out = center_on_decisions(traj, adv, small_sys.m)
    decided = np.zeros(traj.n, bool)
    decided[traj.atom_sample[traj.rec_atom]] = True
    assert decided.any() and not decided.all()
    for h in range(small_sys.m):
        idx = decided & (traj.h == h)
        assert abs(out[idx].mean()) <= 1e-9
        assert np.allclose(out[idx] - adv[idx], out[idx][0] - adv[idx][0])  # a pure shift
    assert np.array_equal(out[~decided], adv[~decided])
