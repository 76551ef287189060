from math import comb

import numpy as np
import pytest

from overflow_ppo.dynamics import State, action_violations, feasibility_mask
from overflow_ppo.oracle import (
    OracleError,
    brute_force_action_prob,
    build_truncated_mdp,
    enumerate_feasible_actions,
    exact_policy_eval,
    optimality_gap,
    single_pool_eval,
    solve_poisson,
    stationary_distribution,
    value_iteration_midnight,
)
from overflow_ppo.policy import complete_overflow, no_overflow
from overflow_ppo.presets import load_preset

from conftest import random_kappa, random_system, uncapped_state


@pytest.fixture(scope="module")
def midnight():
    return load_preset("twopool-midnight")


@pytest.fixture(scope="module")
def solved(midnight):
    return value_iteration_midnight(midnight, X=80, tol=1e-9)


# -- enumeration and brute force -----------------------------------------------------------


def test_enumerate_empty_queue(small3):
    s = State(small3.N - 1, np.zeros(3, np.int64), 0)
    acts = enumerate_feasible_actions(s, small3)
    assert len(acts) == 1 and not acts[0].any()


def test_enumerate_capacity_binding(twopool_cfg):
    s = State([30, 31], [0, 0], 0)  # q1 = 2, one idle bed in pool 2
    acts = enumerate_feasible_actions(s, twopool_cfg)
    assert sorted(a.tolist() for a in acts) == [[[1, 1], [0, 0]], [[2, 0], [0, 0]]]


def test_enumerate_count_formula(rng):
    cfg = random_system(rng, J=3, m=1, N_range=(10, 14))
    for _ in range(40):
        s = uncapped_state(cfg, rng)
        acts = enumerate_feasible_actions(s, cfg)
        q = np.maximum(s.x - cfg.N, 0)
        w = feasibility_mask(s.x, cfg).sum(axis=1) - 1  # overflow options per class
        assert len(acts) == np.prod([comb(int(qi + wi), int(wi)) for qi, wi in zip(q, w)])
        assert len({a.tobytes() for a in acts}) == len(acts)
        assert all(action_violations(s, a, cfg) == [] for a in acts)


def test_guards(rng):
    cfg = random_system(rng, J=2, m=1, N_range=(3, 4))
    with pytest.raises(ValueError, match="guard"):
        enumerate_feasible_actions(State(cfg.N + 7, [0, 0], 0), cfg)
    with pytest.raises(ValueError, match="guard"):
        brute_force_action_prob(np.eye(2), State(cfg.N + 5, [0, 0], 0), np.diag([5, 4]))


def test_brute_force_singleton_and_sum(rng):
    cfg = random_system(rng, J=3, m=1, N_range=(10, 14))
    s = State(cfg.N + np.array([2, 0, 0]), np.zeros(3, np.int64), 0)
    s = State(np.where(np.arange(3) == 0, s.x, cfg.N), np.zeros(3, np.int64), 0)  # no idle beds anywhere
    (only,) = enumerate_feasible_actions(s, cfg)
    assert brute_force_action_prob(random_kappa(s, cfg, rng), s, only) == pytest.approx(1.0)
    s = uncapped_state(cfg, rng)
    kappa = random_kappa(s, cfg, rng)
    total = sum(brute_force_action_prob(kappa, s, f) for f in enumerate_feasible_actions(s, cfg))
    assert total == pytest.approx(1.0, abs=1e-12)


# -- two-pool MDP --------------------------------------------------------------------------


def test_transition_rows_sum_to_one(midnight):
    mdp = build_truncated_mdp(midnight, 60)
    for K in mdp.K:
        assert np.abs(K.sum(axis=1) - 1).max() <= 1e-10


def test_empty_arrivals(midnight):
    cfg = midnight.replace(arrivals=np.zeros((2, 1)))
    gamma, v, _ = value_iteration_midnight(cfg, X=60)
    assert gamma == pytest.approx(0.0, abs=1e-9)
    # from the empty state nothing ever happens
    assert v[0, 0] == 0.0 and np.abs(v[: cfg.N[0] + 1, : cfg.N[1] + 1]).max() <= 1e-9


def test_truncation_stability(midnight):
    g120 = value_iteration_midnight(midnight, X=120)[0]
    g140 = value_iteration_midnight(midnight, X=140)[0]
    assert g120 == pytest.approx(g140, abs=1e-6)


def test_optimality_certificate(midnight, solved):
    gamma, v, _ = solved
    gap = optimality_gap(midnight, gamma, v)
    interior = gap[:60, :60]  # away from the lumped boundary
    assert np.abs(interior).max() <= 1e-8


def test_optimal_table_attains_gamma(midnight, solved):
    gamma, _, moves = solved
    g_pi, _ = exact_policy_eval(moves, midnight, X=80)
    assert g_pi == pytest.approx(gamma, abs=1e-6)
    # and beats both simple benchmarks
    assert gamma < exact_policy_eval(no_overflow(), midnight, X=80)[0]
    assert gamma < exact_policy_eval(complete_overflow(), midnight, X=80)[0]


def test_no_overflow_is_sum_of_single_pools(midnight):
    X = 80
    gamma, v = exact_policy_eval(no_overflow(), midnight, X=X, tol=1e-10)
    parts = [single_pool_eval(int(midnight.N[j]), midnight.arrivals[j, 0], midnight.mu[j], midnight.holding_cost[j], X)
             for j in range(2)]
    assert gamma == pytest.approx(parts[0][0] + parts[1][0], abs=1e-6)
    assert np.abs(v - (parts[0][1][:, None] + parts[1][1][None, :])).max() <= 1e-5


def test_cheap_overflow_always_used(midnight):
    cfg = midnight.replace(N=[30, 30], routes=[[(1, 1.0)], [(0, 1.0)]])
    _, v, moves = value_iteration_midnight(cfg, X=70)
    rng = np.random.default_rng(4)
    mdp = build_truncated_mdp(cfg, 70)
    x1, x2 = mdp.grid()
    up = np.minimum(np.maximum(x1 - 30, 0), np.maximum(30 - x2, 0))
    down = np.minimum(np.maximum(x2 - 30, 0), np.maximum(30 - x1, 0))
    idx = np.argwhere((up + down > 0) & (x1 < 55) & (x2 < 55))
    W = mdp.K[0] @ v @ mdp.K[1].T
    for a, b in idx[rng.choice(len(idx), 50, replace=False)]:
        assert moves[a, b] == up[a, b] - down[a, b]
        # one-step lookahead with the solved values agrees
        vals = {f: 24.0 * (max(a - f - 30, 0) + max(b + f - 30, 0)) + abs(f) + W[a - f, b + f]
                for f in range(-down[a, b], up[a, b] + 1)}
        assert min(vals, key=vals.get) == moves[a, b]


def test_stationary_distribution(midnight):
    pi = stationary_distribution(no_overflow(), midnight, X=80)
    assert pi.min() >= 0 and pi.sum() == pytest.approx(1.0, abs=1e-12)
    gamma, _ = exact_policy_eval(no_overflow(), midnight, X=80)
    x1, x2 = np.meshgrid(np.arange(81), np.arange(81), indexing="ij")
    c = 24.0 * (np.maximum(x1 - 28, 0) + np.maximum(x2 - 32, 0))
    assert (pi * c).sum() == pytest.approx(gamma, rel=1e-8)


def test_solve_poisson():
    P = np.array([[0.5, 0.5], [0.2, 0.8]])
    gamma, v = solve_poisson(P, np.array([1.0, 0.0]))
    assert gamma == pytest.approx(2 / 7)
    assert np.allclose(np.array([1.0, 0.0]) - gamma + P @ v, v)
    with pytest.raises(OracleError, match="irreducible"):
        solve_poisson(np.eye(2), np.array([1.0, 0.0]))


def test_requires_two_pool_single_epoch():
    with pytest.raises(ValueError, match="two-pool"):
        value_iteration_midnight(load_preset("twopool-8epoch"))
