import numpy as np
import pytest

from overflow_ppo.config import SystemConfig
from overflow_ppo.dynamics import State, feasibility_mask
from overflow_ppo.presets import twopool


def random_system(rng, J=3, m=4, N_range=(2, 6), load=0.9, all_routes=True) -> SystemConfig:
    """Small random instance: every class may overflow to every other pool."""
    N = rng.integers(*N_range, size=J)
    mu = rng.uniform(0.2, 0.6, size=J)
    daily = load * N * mu * rng.uniform(0.8, 1.2, size=J)
    shape = rng.dirichlet(np.ones(m))
    arrivals = daily[:, None] * shape[None, :]
    F = np.zeros((J, m + 1))
    if m > 1:
        inc = rng.dirichlet(np.ones(m - 1), size=J)  # no discharges before the first daytime epoch
        F[:, 2:] = np.cumsum(inc, axis=1)
    F[:, -1] = 1.0
    routes = []
    for i in range(J):
        others = [j for j in range(J) if j != i]
        if not all_routes:
            others = others[:1]
        routes.append([(j, float(rng.uniform(1, 10))) for j in others])
    return SystemConfig(
        N=N, arrivals=arrivals, mu=mu, discharge_cdf=F,
        routes=routes, holding_cost=rng.uniform(1, 5, size=J), name="random",
    )


def uncapped_state(cfg, rng, max_total=8) -> State:
    """A state whose total queue cannot exhaust any idle pool (capacity non-binding)."""
    J = cfg.J
    while True:
        q = rng.integers(0, 4, size=J)
        if 0 < q.sum() <= max_total:
            break
    has_q = q > 0
    x = np.where(has_q, cfg.N + q, cfg.N - q.sum() - rng.integers(0, 2, size=J))
    x = np.where(~has_q & (rng.random(J) < 0.3), cfg.N, x)  # some full pools
    return State(np.maximum(x, 0), np.zeros(J, np.int64), 0)


def random_kappa(s, cfg, rng) -> np.ndarray:
    """Random routing rows supported on the feasible pools."""
    k = rng.dirichlet(np.ones(cfg.J), size=cfg.J) * feasibility_mask(s.x, cfg)
    return k / k.sum(axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small3(rng):
    return random_system(rng)


@pytest.fixture(scope="session")
def twopool_cfg():
    return twopool(1)


@pytest.fixture(scope="session")
def symmetric_twopool():
    return twopool(1).replace(N=[30, 30])
