"""Atomic routing policies, batched/sequential action sampling and action probabilities."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .config import SystemConfig
from .dynamics import State, feasibility_mask
from .network import NetworkParams, encode, forward_logits, masked_log_softmax

log = logging.getLogger(__name__)

KINDS = ("no_overflow", "complete_overflow", "midnight", "empirical", "network")


@dataclass
class PolicySpec:
    """A routing policy.

    ``overflow_epochs`` restricts complete overflow to the listed epochs (midnight
    and empirical policies); ``None`` means every epoch.  Network policies sample
    either one batched action per epoch or customer by customer (``sequential``).
    """

    kind: str
    overflow_epochs: frozenset | None = None
    params: NetworkParams | None = None
    sequential: bool = False
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "network" and self.params is None:
            raise ValueError("network policy needs parameters")
        if self.overflow_epochs is not None:
            self.overflow_epochs = frozenset(int(h) for h in self.overflow_epochs)

    @property
    def name(self) -> str:
        return self.label or self.kind

    def overflows_at(self, h: int) -> bool:
        if self.kind == "no_overflow":
            return False
        if self.kind == "complete_overflow":
            return True
        return self.overflow_epochs is None or h in self.overflow_epochs


def no_overflow() -> PolicySpec:
    return PolicySpec("no_overflow")


def complete_overflow() -> PolicySpec:
    return PolicySpec("complete_overflow")


def midnight() -> PolicySpec:
    return PolicySpec("midnight", frozenset({0}))


def empirical(night_epochs) -> PolicySpec:
    return PolicySpec("empirical", frozenset(night_epochs))


def network(params: NetworkParams, sequential: bool = False) -> PolicySpec:
    return PolicySpec("network", params=params, sequential=sequential)


def benchmark(name: str, cfg: SystemConfig, night=None) -> PolicySpec:
    from .presets import night_epochs

    if name == "no_overflow":
        return no_overflow()
    if name == "complete_overflow":
        return complete_overflow()
    if name == "midnight":
        return midnight()
    if name == "empirical":
        return empirical(night if night is not None else night_epochs(cfg.m))
    raise ValueError(f"unknown benchmark {name!r}")


BENCHMARKS = ("no_overflow", "complete_overflow", "midnight", "empirical")


def complete_overflow_kappa(x: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """One-hot rows: first feasible route in priority order, else wait."""
    J = cfg.J
    kappa = np.eye(J)
    idle = x < cfg.N
    for i, r in enumerate(cfg.routes):
        for to, _ in r:
            if idle[to]:
                kappa[i, i] = 0.0
                kappa[i, to] = 1.0
                break
    return kappa


def atomic_distribution(policy: PolicySpec, s: State, cfg: SystemConfig) -> np.ndarray:
    """Routing matrix ``kappa[i, j]`` = P(a class-i customer is sent to pool j | s)."""
    if policy.kind == "network":
        return np.exp(network_log_kappa(policy.params, s.x[None], s.y[None], np.array([s.h]), cfg)[0])
    if policy.overflows_at(s.h):
        return complete_overflow_kappa(s.x, cfg)
    return np.eye(cfg.J)


def network_log_kappa(params: NetworkParams, x, y, h, cfg: SystemConfig, masks=None) -> np.ndarray:
    """Vectorized ``log kappa`` for a batch of atomic states, shape ``(n, J, J)``."""
    params.check(cfg.J, cfg.m)
    X = encode(x, y, h, cfg.N, params.structure, cfg.m)
    if masks is None:
        masks = cfg.route_mask[None] & (np.asarray(x) < cfg.N)[:, None, :]
        idx = np.arange(cfg.J)
        masks[:, idx, idx] = True
    return masked_log_softmax(forward_logits(params, X, np.asarray(h)), masks)


def _draw(p: np.ndarray, rng) -> int:
    c = np.cumsum(p)
    return min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(p) - 1)


def sample_from_kappa(kappa: np.ndarray, s: State, cfg: SystemConfig, rng) -> np.ndarray:
    """Batched action: every waiting customer draws from its class row of ``kappa``.

    Classes are processed in ascending order and customers one at a time; once a
    pool has no idle server left it is removed from the remaining draws (waiting is
    always kept).  When capacity cannot bind the draws are an exact multinomial.
    """
    J = cfg.J
    q = np.maximum(s.x - cfg.N, 0)
    idle = np.maximum(cfg.N - s.x, 0)
    f = np.zeros((J, J), np.int64)
    classes = np.flatnonzero(q)
    if classes.size == 0:
        return f
    off = kappa.copy()
    np.fill_diagonal(off, 0.0)
    demand = (q[:, None] * (off > 0)).sum(axis=0)
    if np.all(demand <= idle):
        for i in classes:
            p = np.clip(kappa[i], 0.0, None)
            tot = p.sum()
            if tot <= 0:
                f[i, i] = q[i]
                continue
            f[i] = rng.multinomial(q[i], p / tot)
        return f
    remaining = idle.copy()
    for i in classes:
        p = np.clip(kappa[i], 0.0, None).copy()
        p[(remaining <= 0) & (np.arange(J) != i)] = 0.0
        for _ in range(q[i]):
            if p.sum() <= 0:
                f[i, i] += 1
                continue
            j = _draw(p, rng)
            f[i, j] += 1
            if j != i:
                remaining[j] -= 1
                if remaining[j] == 0:
                    p[j] = 0.0
    return f


def complete_overflow_action(s: State, cfg: SystemConfig) -> np.ndarray:
    """Deterministic complete overflow: fill the routes of each class in priority order."""
    J = cfg.J
    q = np.maximum(s.x - cfg.N, 0)
    remaining = np.maximum(cfg.N - s.x, 0)
    f = np.zeros((J, J), np.int64)
    for i in range(J):
        left = q[i]
        for to, _ in cfg.routes[i]:
            if left == 0:
                break
            n = min(left, remaining[to])
            f[i, to] += n
            remaining[to] -= n
            left -= n
        f[i, i] += left
    return f


@dataclass
class ActionTrace:
    """Atomic decisions behind one sampled network action (used to build training data)."""

    x: list = field(default_factory=list)  # atomic states
    masks: list = field(default_factory=list)
    records: list = field(default_factory=list)  # (state index, class, pool, count, log kappa)


def sample_action(policy: PolicySpec, s: State, cfg: SystemConfig, rng, trace: ActionTrace | None = None):
    """Draw a feasible action at ``s``; network decisions are appended to ``trace``."""
    if policy.kind != "network":
        if policy.overflows_at(s.h):
            return complete_overflow_action(s, cfg)
        f = np.zeros((cfg.J, cfg.J), np.int64)
        np.fill_diagonal(f, np.maximum(s.x - cfg.N, 0))
        return f
    if policy.sequential:
        return _sample_sequential(policy.params, s, cfg, rng, trace)
    q = np.maximum(s.x - cfg.N, 0)
    f = np.zeros((cfg.J, cfg.J), np.int64)
    if not q.any():
        np.fill_diagonal(f, q)
        return f
    mask = feasibility_mask(s.x, cfg)
    logk = network_log_kappa(policy.params, s.x[None], s.y[None], np.array([s.h]), cfg, mask[None])[0]
    f = sample_from_kappa(np.exp(logk), s, cfg, rng)
    if trace is not None:
        record_decisions(trace, s.x, mask, logk, f)
    return f


def record_decisions(trace, x, mask, logk, f):
    """Append the decisions in ``f`` taken at atomic state ``x`` (rows with one option skipped)."""
    multi = mask.sum(axis=1) > 1
    idx = len(trace.x)
    recs = [(idx, int(i), int(j), int(f[i, j]), float(logk[i, j])) for i, j in zip(*np.nonzero(f)) if multi[i]]
    if recs:
        trace.x.append(x.copy())
        trace.masks.append(mask)
        trace.records.extend(recs)


def _sample_sequential(params, s, cfg, rng, trace):
    """Customer-by-customer sampling; the atomic state is updated after each decision."""
    J = cfg.J
    x = s.x.copy()
    q = np.maximum(x - cfg.N, 0)
    f = np.zeros((J, J), np.int64)
    for i in range(J):
        for _ in range(q[i]):
            mask = feasibility_mask(x, cfg)
            if mask[i].sum() == 1:
                f[i, i] += 1
                continue
            logk = network_log_kappa(params, x[None], s.y[None], np.array([s.h]), cfg, mask[None])[0]
            j = _draw(np.exp(logk[i]), rng)
            if trace is not None:
                one = np.zeros((J, J), np.int64)
                one[i, j] = 1
                record_decisions(trace, x, mask, logk, one)
            f[i, j] += 1
            if j != i:
                x[i] -= 1
                x[j] += 1
    return f


def action_log_prob(kappa: np.ndarray, s: State, f: np.ndarray, cfg: SystemConfig) -> float:
    """``log pi(f | s)`` under the multinomial batch structure (capacity-free form).

    Returns ``-inf`` (and logs the offending entry) if ``f`` uses a zero-probability route.
    """
    f = np.asarray(f)
    q = np.maximum(s.x - cfg.N, 0)
    bad = (f > 0) & (kappa <= 0)
    if bad.any():
        i, j = map(int, np.argwhere(bad)[0])
        log.debug("action uses pool %d for class %d with kappa = 0", j, i)
        return -np.inf
    with np.errstate(divide="ignore"):
        lk = np.where(f > 0, np.log(np.where(f > 0, kappa, 1.0)), 0.0)
    return float(np.sum(gammaln(q + 1)) - np.sum(gammaln(f + 1)) + np.sum(f * lk))


def prob_ratio(kappa_new: np.ndarray, kappa_old: np.ndarray, f: np.ndarray) -> float:
    """``pi_new(f|s) / pi_old(f|s)`` for batched actions: the combinatorial factor cancels."""
    f = np.asarray(f)
    used = f > 0
    if np.any(used & (kappa_old <= 0)):
        i, j = map(int, np.argwhere(used & (kappa_old <= 0))[0])
        raise ValueError(f"ratio undefined: old policy gives class {i} -> pool {j} probability 0")
    return float(np.exp(np.sum(np.where(used, f * (np.log(np.where(used, kappa_new, 1.0)) - np.log(np.where(used, kappa_old, 1.0))), 0.0))))
