"""Exact epoch-level MDP dynamics: arrivals, two-time-scale departures, actions, cost."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SystemConfig


class InfeasibleAction(ValueError):
    pass


@dataclass
class State:
    x: np.ndarray  # customer count per pool (waiting + in service)
    y: np.ndarray  # to-depart count per pool
    h: int  # epoch of day

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.h = int(self.h)

    def queue(self, N) -> np.ndarray:
        return np.maximum(self.x - N, 0)

    def in_service(self, N) -> np.ndarray:
        return np.minimum(self.x, N)

    def copy(self) -> "State":
        return State(self.x.copy(), self.y.copy(), self.h)

    def __eq__(self, other):
        return (
            isinstance(other, State)
            and self.h == other.h
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )

    @classmethod
    def empty(cls, J: int, h: int = 0) -> "State":
        return cls(np.zeros(J, np.int64), np.zeros(J, np.int64), h)


@dataclass
class ExogenousDraw:
    a: np.ndarray  # arrivals
    d: np.ndarray  # departures before the next epoch
    b: np.ndarray  # new to-depart counts (drawn at midnight only)


def state_violations(s: State, cfg: SystemConfig) -> list[str]:
    out = []
    if np.any(s.x < 0):
        out.append("x: negative customer count")
    if np.any(s.y < 0):
        out.append("y: negative to-depart count")
    if np.any(s.y > np.minimum(s.x, cfg.N)):
        out.append("y: to-depart count exceeds in-service count")
    if not 0 <= s.h < cfg.m:
        out.append(f"h: epoch {s.h} outside 0..{cfg.m - 1}")
    return out


def discharge_prob(cfg: SystemConfig, j: int, h: int) -> float:
    """Probability a flagged customer still present at epoch ``h`` leaves before ``h + 1``."""
    if h == 0:
        raise ValueError("midnight has no departures")
    if not 0 < h < cfg.m:
        raise ValueError(f"epoch {h} outside 1..{cfg.m - 1}")
    F = cfg.discharge_cdf[j]
    rem = 1.0 - F[h]
    if rem <= 0.0:
        return 0.0
    return float(np.clip((F[h + 1] - F[h]) / rem, 0.0, 1.0))


def feasibility_mask(x: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """Boolean J x J matrix: ``mask[i, j]`` iff one class-i customer may go to pool j now.

    Waiting (j == i) is always allowed; overflow needs a route and an idle server.
    """
    mask = cfg.route_mask & (x < cfg.N)[None, :]
    np.fill_diagonal(mask, True)
    return mask


def feasible_pools(s: State, i: int, cfg: SystemConfig) -> set[int]:
    return {int(j) for j in np.flatnonzero(feasibility_mask(s.x, cfg)[i])}


def action_violations(s: State, f: np.ndarray, cfg: SystemConfig) -> list[str]:
    """Every constraint of the feasibility condition that ``f`` breaks at ``s``."""
    f = np.asarray(f)
    J = cfg.J
    out = []
    if f.shape != (J, J):
        return [f"shape {f.shape} != ({J}, {J})"]
    if np.any(f < 0):
        out.append("negative assignment count")
    q = np.maximum(s.x - cfg.N, 0)
    idle = np.maximum(cfg.N - s.x, 0)
    rows = f.sum(axis=1)
    for i in np.flatnonzero(rows != q):
        out.append(f"class {i}: assignments sum to {rows[i]} but queue is {q[i]}")
    inflow = f.sum(axis=0) - np.diag(f)
    for j in np.flatnonzero(inflow > idle):
        out.append(f"pool {j}: {inflow[j]} overflow assignments exceed {idle[j]} idle servers")
    off = (f > 0) & ~cfg.route_mask
    np.fill_diagonal(off, False)
    for i, j in zip(*np.nonzero(off)):
        out.append(f"route {i}->{j} not allowed")
    return out


def check_action(s: State, f: np.ndarray, cfg: SystemConfig) -> None:
    v = action_violations(s, f, cfg)
    if v:
        raise InfeasibleAction("; ".join(v))


def apply_action(s: State, f: np.ndarray, cfg: SystemConfig, check: bool = True) -> State:
    """Pre-action to post-action state: move overflowed customers to their new pools."""
    if check:
        check_action(s, f, cfg)
    f = np.asarray(f, dtype=np.int64)
    moved = f - np.diag(np.diag(f))
    x = s.x + moved.sum(axis=0) - moved.sum(axis=1)
    return State(x, s.y.copy(), s.h)


def cost(s: State, f: np.ndarray, cfg: SystemConfig, check: bool = True) -> float:
    """Holding cost on post-action queues plus one-time overflow costs."""
    if check:
        check_action(s, f, cfg)
    f = np.asarray(f)
    moved = f - np.diag(np.diag(f))
    x_post = s.x + moved.sum(axis=0) - moved.sum(axis=1)
    q_post = np.maximum(x_post - cfg.N, 0)
    return float(cfg.holding_cost @ q_post + np.sum(cfg.overflow_cost * moved))


def sample_exogenous(cfg: SystemConfig, s_post: State, rng: np.random.Generator) -> ExogenousDraw:
    """Arrivals and departures between the current epoch and the next.

    With a single epoch per day the customers flagged at midnight also leave
    before the next midnight, so ``d = b`` in that case.
    """
    h = s_post.h
    a = rng.poisson(cfg.arrivals[:, h])
    J = cfg.J
    if h == 0:
        b = rng.binomial(np.minimum(s_post.x, cfg.N), cfg.mu)
        d = b.copy() if cfg.m == 1 else np.zeros(J, np.int64)
    else:
        b = np.zeros(J, np.int64)
        d = rng.binomial(s_post.y, cfg.discharge_probs[:, h])
    return ExogenousDraw(a.astype(np.int64), d.astype(np.int64), b.astype(np.int64))


def advance(s_post: State, draw: ExogenousDraw, cfg: SystemConfig) -> State:
    """Post-action state plus exogenous events -> pre-action state of the next epoch."""
    h = s_post.h
    h_next = (h + 1) % cfg.m
    if h == 0:
        if np.any(draw.b > np.minimum(s_post.x, cfg.N)) or np.any(draw.b < 0):
            raise ValueError("corrupt draw: to-depart count exceeds in-service count")
        if cfg.m == 1:
            return State(s_post.x + draw.a - draw.b, np.zeros(cfg.J, np.int64), h_next)
        return State(s_post.x + draw.a, draw.b.copy(), h_next)
    if np.any(draw.d > s_post.y) or np.any(draw.d < 0):
        raise ValueError("corrupt draw: departures exceed to-depart count")
    return State(s_post.x + draw.a - draw.d, s_post.y - draw.d, h_next)
