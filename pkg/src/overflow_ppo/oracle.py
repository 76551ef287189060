"""Exact solvers for small instances.

* feasible-action enumeration and brute-force atomic-sequence probabilities;
* the two-pool single-epoch ("midnight") MDP on a truncated grid: relative value
  iteration for the optimal policy, and for fixed policies.

In the single-epoch model the state is ``(x1, x2)``; after the action, each pool
receives Poisson(Lambda_j) arrivals and ``Bin(min(x_j, N_j), mu_j)`` departures.
Counts above the truncation bound are lumped into the bound.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .config import SystemConfig
from .dynamics import State, feasibility_mask
from .policy import PolicySpec, atomic_distribution


# Grid bound for the two-pool instance; the optimal cost changes by < 1e-7 beyond it.
DEFAULT_X = 120


class OracleError(RuntimeError):
    pass


# -- combinatorics -------------------------------------------------------------------


def _compositions(n: int, k: int):
    """All k-tuples of nonnegative integers summing to n."""
    if k == 1:
        yield (n,)
        return
    for first in range(n, -1, -1):
        for rest in _compositions(n - first, k - 1):
            yield (first, *rest)


def enumerate_feasible_actions(s: State, cfg: SystemConfig, max_queue: int = 12, max_pools: int = 3) -> list:
    """Every feasible action matrix at ``s`` (no duplicates, deterministic order)."""
    J = cfg.J
    q = np.maximum(s.x - cfg.N, 0)
    if J > max_pools or q.sum() > max_queue:
        raise ValueError(f"enumeration guard: J={J}, total queue={q.sum()} (limits {max_pools}, {max_queue})")
    idle = np.maximum(cfg.N - s.x, 0)
    mask = feasibility_mask(s.x, cfg)
    per_class = []
    for i in range(J):
        pools = np.flatnonzero(mask[i])
        rows = []
        for comp in _compositions(int(q[i]), len(pools)):
            row = np.zeros(J, np.int64)
            row[pools] = comp
            rows.append(row)
        per_class.append(rows)
    out = []
    for rows in itertools.product(*per_class):
        f = np.array(rows)
        inflow = f.sum(axis=0) - np.diag(f)
        if np.all(inflow <= idle):
            out.append(f)
    return out


def brute_force_action_prob(kappa: np.ndarray, s: State, f: np.ndarray, max_customers: int = 8) -> float:
    """Probability that independent per-customer draws from ``kappa`` aggregate to ``f``.

    Sums the product of atomic probabilities over every labelled assignment
    sequence; the queue of class ``i`` is the row sum of ``f``.
    """
    f = np.asarray(f, np.int64)
    kappa = np.asarray(kappa, float)
    J = f.shape[0]
    q = f.sum(axis=1)
    n = int(q.sum())
    if n > max_customers:
        raise ValueError(f"brute-force guard: {n} customers exceeds {max_customers}")
    if n == 0:
        return 1.0
    classes = np.repeat(np.arange(J), q)
    seqs = np.array(list(itertools.product(range(J), repeat=n)), dtype=np.int64)
    probs = np.prod(kappa[classes[None, :], seqs], axis=1)
    codes = classes[None, :] * J + seqs
    counts = np.stack([np.bincount(row, minlength=J * J) for row in codes]).reshape(len(seqs), J, J)
    hit = np.all(counts == f[None], axis=(1, 2))
    return float(probs[hit].sum())


# -- two-pool single-epoch MDP -------------------------------------------------------------


def pool_kernel(N: int, lam: float, mu: float, X: int) -> np.ndarray:
    """``K[x, x']`` = P(min(x + A - D, X) = x') with A ~ Poi(lam), D ~ Bin(min(x, N), mu)."""
    K = np.zeros((X + 1, X + 1))
    pois = stats.poisson.pmf(np.arange(X + 1), lam)
    sf = stats.poisson.sf(np.arange(X + 1) - 1, lam)  # sf[k] = P(A >= k)
    for x in range(X + 1):
        z = min(x, N)
        pb = stats.binom.pmf(np.arange(z + 1), z, mu)
        for b, w in enumerate(pb):
            v0 = x - b
            K[x, v0:X] += w * pois[: X - v0]
            K[x, X] += w * sf[X - v0]
    return K


@dataclass
class TruncatedMDP:
    """Two-pool single-epoch MDP on ``{0..X}^2`` (state index ``x1 * (X + 1) + x2``)."""

    cfg: SystemConfig
    X: int
    K: tuple  # per-pool kernels

    @property
    def n_states(self) -> int:
        return (self.X + 1) ** 2

    def grid(self):
        return np.meshgrid(np.arange(self.X + 1), np.arange(self.X + 1), indexing="ij")


def _check_twopool(cfg: SystemConfig):
    if cfg.J != 2 or cfg.m != 1:
        raise ValueError(f"two-pool single-epoch instance required (got J={cfg.J}, m={cfg.m})")


def build_truncated_mdp(cfg: SystemConfig, X: int = DEFAULT_X) -> TruncatedMDP:
    _check_twopool(cfg)
    if X < int(cfg.N.max()):
        raise ValueError(f"truncation {X} below server count {cfg.N.max()}")
    K = tuple(pool_kernel(int(cfg.N[j]), float(cfg.arrivals[j, 0]), float(cfg.mu[j]), X) for j in range(2))
    return TruncatedMDP(cfg, X, K)


def _moves(mdp: TruncatedMDP):
    """Signed overflow counts allowed per state: ``+f`` is class 0 -> pool 1, ``-f`` is 1 -> 0."""
    cfg = mdp.cfg
    x1, x2 = mdp.grid()
    N1, N2 = cfg.N
    up = np.where(cfg.route_mask[0, 1], np.minimum(np.maximum(x1 - N1, 0), np.maximum(N2 - x2, 0)), 0)
    down = np.where(cfg.route_mask[1, 0], np.minimum(np.maximum(x2 - N2, 0), np.maximum(N1 - x1, 0)), 0)
    return x1, x2, up, down


def _post_cost(mdp: TruncatedMDP, x1, x2, move):
    """Post-action counts and one-step cost for a signed move."""
    cfg = mdp.cfg
    p1, p2 = x1 - move, x2 + move
    C = cfg.holding_cost
    B = cfg.overflow_cost
    g = C[0] * np.maximum(p1 - cfg.N[0], 0) + C[1] * np.maximum(p2 - cfg.N[1], 0)
    g = g + np.where(move > 0, B[0, 1] * move, B[1, 0] * -move)
    return p1, p2, g


def value_iteration_midnight(cfg: SystemConfig, X: int = DEFAULT_X, tol: float = 1e-9, max_iter: int = 100000):
    """Relative value iteration with span stopping.

    Returns ``(gamma, v, moves)``: optimal average daily cost, relative values on
    the grid (``v[0, 0] = 0``) and the optimal signed overflow per state.
    """
    mdp = build_truncated_mdp(cfg, X)
    K1, K2 = mdp.K
    x1, x2, up, down = _moves(mdp)
    fmax = int(max(up.max(), down.max()))
    cands = []
    for f in range(-fmax, fmax + 1):
        ok = (f <= up) & (-f <= down)
        p1, p2, g = _post_cost(mdp, x1, x2, np.full_like(x1, f))
        cands.append((f, ok, np.where(ok, p1, 0), np.where(ok, p2, 0), np.where(ok, g, np.inf)))
    v = np.zeros((X + 1, X + 1))
    for it in range(max_iter):
        W = K1 @ v @ K2.T
        best = np.full(v.shape, np.inf)
        for _, ok, p1, p2, g in cands:
            np.minimum(best, g + W[p1, p2], out=best)
        diff = best - v
        span = diff.max() - diff.min()
        v = best - best[0, 0]
        if span < tol:
            gamma = 0.5 * (diff.max() + diff.min())
            break
    else:
        raise OracleError(f"value iteration did not converge in {max_iter} sweeps (span {span:.3e})")
    W = K1 @ v @ K2.T
    best = np.full(v.shape, np.inf)
    moves = np.zeros(v.shape, np.int64)
    for f, ok, p1, p2, g in cands:
        q = g + W[p1, p2]
        better = q < best - 1e-12
        moves[better] = f
        best = np.where(better, q, best)
    return float(gamma), v, moves


def optimality_gap(cfg: SystemConfig, gamma: float, v: np.ndarray) -> np.ndarray:
    """Bellman residual ``min_f [g - gamma + E v(s')] - v(s)`` on the grid."""
    X = v.shape[0] - 1
    mdp = build_truncated_mdp(cfg, X)
    K1, K2 = mdp.K
    x1, x2, up, down = _moves(mdp)
    W = K1 @ v @ K2.T
    best = np.full(v.shape, np.inf)
    for f in range(-int(down.max()), int(up.max()) + 1):
        ok = (f <= up) & (-f <= down)
        p1, p2, g = _post_cost(mdp, x1, x2, np.full_like(x1, f))
        q = np.where(ok, g + W[np.where(ok, p1, 0), np.where(ok, p2, 0)], np.inf)
        best = np.minimum(best, q)
    return best - gamma - v


def move_distribution(policy, mdp: TruncatedMDP):
    """``(moves, probs)``: list of signed moves and per-state probability arrays.

    ``policy`` is a :class:`PolicySpec` (batched sampling) or an integer table of
    signed moves.
    """
    x1, x2, up, down = _moves(mdp)
    if not isinstance(policy, PolicySpec):
        table = np.asarray(policy, np.int64)
        if table.shape != x1.shape:
            raise ValueError(f"policy table shape {table.shape} != {x1.shape}")
        if np.any(table > up) or np.any(-table > down):
            raise ValueError("policy table contains infeasible moves")
        moves = np.unique(table)
        return moves, [(table == f).astype(float) for f in moves]
    cfg = mdp.cfg
    fmax = int(max(up.max(), down.max()))
    if policy.kind == "network" and policy.sequential:
        return _sequential_moves(policy, mdp, x1, x2, up, down, fmax)
    k12, k21 = _overflow_probs(policy, mdp)
    # class 0 overflows only when pool 1 has idle servers (then class 1 has no queue) and vice versa
    sign = np.where(up > 0, 1, -1)
    cap = np.where(up > 0, up, down)
    q = np.where(up > 0, np.maximum(x1 - cfg.N[0], 0), np.maximum(x2 - cfg.N[1], 0))
    k = np.clip(np.where(up > 0, k12, k21), 0.0, 1.0)
    moves = np.arange(-fmax, fmax + 1)
    probs = {f: np.zeros(x1.shape) for f in moves}
    probs[0] += cap == 0
    for n in range(fmax + 1):
        pmf = stats.binom.pmf(n, q, k)
        tail = stats.binom.sf(n - 1, q, k)  # P(Bin >= n)
        w = np.where(n < cap, pmf, np.where(n == cap, tail, 0.0))
        w = np.where(cap > 0, w, 0.0)
        for sgn in (1, -1):
            probs[sgn * n] += np.where(sign == sgn, w, 0.0)
    keep = [f for f in moves if probs[f].any()]
    return np.array(keep), [probs[f] for f in keep]


def _sequential_moves(policy, mdp, x1, x2, up, down, fmax):
    """Move distribution when customers decide one at a time from the updated state."""
    cfg = mdp.cfg
    k12, k21 = _overflow_probs(policy, mdp)
    X = mdp.X
    moves = np.arange(-fmax, fmax + 1)
    probs = {f: np.zeros(x1.shape) for f in moves}
    probs[0] += (up == 0) & (down == 0)
    for sign, cap, q, kap, xa, xb in (
        (1, up, np.maximum(x1 - cfg.N[0], 0), k12, x1, x2),
        (-1, down, np.maximum(x2 - cfg.N[1], 0), k21, x2, x1),
    ):
        active = cap > 0
        # dist[k]: probability that k customers have overflowed so far
        dist = np.zeros((fmax + 2,) + x1.shape)
        dist[0] = 1.0
        for n in range(int(q[active].max()) if active.any() else 0):
            live = active & (n < q)
            new = np.zeros_like(dist)
            for k in range(min(n, fmax) + 1):
                if not dist[k].any():
                    continue
                a = np.clip(xa - k, 0, X)
                b = np.clip(xb + k, 0, X)
                p = kap[a, b] if sign > 0 else kap[b, a]
                p = np.where(k < cap, p, 0.0)  # target pool full: the customer waits
                new[k] += dist[k] * (1 - p)
                new[k + 1] += dist[k] * p
            dist = np.where(live[None], new, dist)
        for k in range(fmax + 1):
            probs[sign * k] += np.where(active, dist[k], 0.0)
    keep = [f for f in moves if probs[f].any()]
    return np.array(keep), [probs[f] for f in keep]


def _overflow_probs(policy: PolicySpec, mdp: TruncatedMDP):
    """Grid tables of kappa(1 | s, 0) and kappa(0 | s, 1)."""
    cfg = mdp.cfg
    x1, x2 = mdp.grid()
    if policy.kind == "network":
        from .policy import network_log_kappa

        xs = np.stack([x1.ravel(), x2.ravel()], axis=1)
        kap = np.exp(network_log_kappa(policy.params, xs, np.zeros_like(xs), np.zeros(len(xs), np.int64), cfg))
        return kap[:, 0, 1].reshape(x1.shape), kap[:, 1, 0].reshape(x1.shape)
    k12 = np.zeros(x1.shape)
    k21 = np.zeros(x1.shape)
    for a in range(mdp.X + 1):
        for b in range(mdp.X + 1):
            kap = atomic_distribution(policy, State([a, b], [0, 0], 0), cfg)
            k12[a, b], k21[a, b] = kap[0, 1], kap[1, 0]
    return k12, k21


def _policy_terms(policy, mdp: TruncatedMDP):
    """Per-move ``(weight, post1, post2)`` arrays and the expected one-step cost."""
    x1, x2, _, _ = _moves(mdp)
    moves, probs = move_distribution(policy, mdp)
    terms = []
    c = np.zeros(x1.shape)
    for f, w in zip(moves, probs):
        p1, p2, g = _post_cost(mdp, x1, x2, np.full_like(x1, f))
        used = w > 0
        c += np.where(used, w * g, 0.0)
        terms.append((w, np.where(used, p1, 0), np.where(used, p2, 0)))
    return terms, c


def exact_policy_eval(policy, cfg_or_mdp, X: int = DEFAULT_X, tol: float = 1e-9, max_iter: int = 200000):
    """Average daily cost and relative values (``v[0, 0] = 0``) of a fixed policy.

    Relative value iteration on the Kronecker-structured kernel, stopped when the
    span of successive differences (the Poisson residual) is below ``tol``.
    """
    mdp = cfg_or_mdp if isinstance(cfg_or_mdp, TruncatedMDP) else build_truncated_mdp(cfg_or_mdp, X)
    K1, K2 = mdp.K
    terms, c = _policy_terms(policy, mdp)
    v = np.zeros(c.shape)
    for _ in range(max_iter):
        W = K1 @ v @ K2.T
        new = c.copy()
        for w, p1, p2 in terms:
            new += w * W[p1, p2]
        diff = new - v
        span = diff.max() - diff.min()
        v = new - new[0, 0]
        if span < tol:
            return float(0.5 * (diff.max() + diff.min())), v
    raise OracleError(f"policy evaluation did not converge (span {span:.3e}); chain may not be irreducible")


def stationary_distribution(policy, cfg_or_mdp, X: int = DEFAULT_X, tol: float = 1e-13, max_iter: int = 200000):
    """Stationary distribution on the grid by power iteration."""
    mdp = cfg_or_mdp if isinstance(cfg_or_mdp, TruncatedMDP) else build_truncated_mdp(cfg_or_mdp, X)
    K1, K2 = mdp.K
    terms, _ = _policy_terms(policy, mdp)
    n = mdp.X + 1
    pi = np.full((n, n), 1.0 / n ** 2)
    for _ in range(max_iter):
        post = np.zeros((n, n))
        for w, p1, p2 in terms:
            np.add.at(post, (p1, p2), w * pi)
        new = K1.T @ post @ K2
        if np.abs(new - pi).sum() < tol:
            return new
        pi = new
    raise OracleError("stationary distribution did not converge")


def solve_poisson(P: np.ndarray, c: np.ndarray, ref: int = 0, tol: float = 1e-9):
    """Dense solve of ``v = c - gamma + P v`` with ``v[ref] = 0``; returns ``(gamma, v)``."""
    S = len(c)
    A = np.eye(S) - P
    A[:, ref] = 1.0  # column of v[ref] now carries gamma
    try:
        sol = linalg.solve(A, c, check_finite=True)
    except linalg.LinAlgError as exc:
        raise OracleError(f"Poisson equation singular (chain not irreducible on the truncation): {exc}") from None
    gamma = float(sol[ref])
    v = sol.copy()
    v[ref] = 0.0
    res = np.abs(c - gamma + P @ v - v).max()
    if not np.isfinite(res) or res > tol * max(1.0, np.abs(c).max()):
        raise OracleError(f"Poisson residual {res:.3e} exceeds tolerance (chain not irreducible?)")
    return gamma, v


def single_pool_eval(N: int, lam: float, mu: float, C: float, X: int):
    """No-overflow single pool (single epoch): ``(gamma, v)`` with ``v[0] = 0``."""
    K = pool_kernel(N, lam, mu, X)
    c = C * np.maximum(np.arange(X + 1) - N, 0)
    return solve_poisson(K, c.astype(float), 0)
