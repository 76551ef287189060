"""Policy evaluation with a linear value approximation.

Features per epoch are ``[1, V_d(s), x_j, x_j^2, y_j, y_j^2, x_j y_j for each pool]``
where ``V_d(s) = sum_j v_j(x_j, y_j, h)`` adds up relative value functions of
single-pool chains.  Each single-pool chain sees its own arrivals and departures,
plus Poisson-thinned inflow from, and outflow to, other pools at the routing
rates ``kbar`` estimated from rollouts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse, stats

from .config import SystemConfig


class ValueError_(RuntimeError):
    """Numerical failure while solving or fitting."""


def truncation(cfg: SystemConfig, j: int) -> int:
    lam, mu = cfg.daily_rate[j], max(cfg.mu[j], 1e-12)
    return int(cfg.N[j] + np.ceil(6.0 * np.sqrt(lam / mu)) + 20)


def prev_rates(cfg: SystemConfig) -> np.ndarray:
    """``(J, m)`` arrival means of the interval that ends at each epoch."""
    return np.roll(cfg.arrivals, 1, axis=1)


# -- routing summaries ---------------------------------------------------------------


def kappa_summaries(kappa: np.ndarray, h: np.ndarray, cfg: SystemConfig):
    """Per-sample, per-pool flow rates implied by routing matrices ``kappa`` (n, J, J).

    Returns ``(in_rate, out_rate, out_cost)``, each ``(n, J)``: Poisson inflow rate
    into pool j, outflow rate of class j, and the probability-weighted overflow
    cost ``sum_k B[j, k] kappa[j, k]``.
    """
    lam = prev_rates(cfg)[:, h].T  # (n, J)
    off = kappa.copy()
    idx = np.arange(cfg.J)
    off[:, idx, idx] = 0.0
    in_rate = np.einsum("ni,nij->nj", lam, off)
    out_frac = off.sum(axis=2)
    out_rate = lam * out_frac
    out_cost = np.einsum("nij,ij->ni", off, cfg.overflow_cost)
    return in_rate, out_rate, out_cost, out_frac


@dataclass
class KbarEstimate:
    """Pool-local routing rates on ``(h, x_j, y_j)`` buckets, one table set per pool."""

    in_rate: list  # per pool (m, X+1, N+1)
    out_rate: list
    out_cost: list  # mean B-weighted overflow probability
    out_frac: list  # mean overflow probability of one class-j customer
    visits: list

    def overflow_prob(self, j: int) -> np.ndarray:
        return self.out_frac[j]

    def mean_overflow_cost(self, j: int) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.out_frac[j] > 0, self.out_cost[j] / self.out_frac[j], 0.0)


def wait_only_kbar(cfg: SystemConfig) -> KbarEstimate:
    tables = [np.zeros((cfg.m, truncation(cfg, j) + 1, cfg.N[j] + 1)) for j in range(cfg.J)]
    return KbarEstimate(tables, [t.copy() for t in tables], [t.copy() for t in tables],
                        [t.copy() for t in tables], [t.copy() for t in tables])


def estimate_kbar(x: np.ndarray, y: np.ndarray, h: np.ndarray, summaries, cfg: SystemConfig) -> KbarEstimate:
    """Bucket averages of the recorded routing rates.

    Unvisited buckets fall back to the average over all visits at the same epoch;
    an epoch with no visits at all falls back to waiting only.
    """
    if len(h) == 0:
        raise ValueError("estimate_kbar: empty data")
    in_rate, out_rate, out_cost, out_frac = summaries
    out = [[], [], [], [], []]
    m = cfg.m
    for j in range(cfg.J):
        X, N = truncation(cfg, j), int(cfg.N[j])
        xi = np.minimum(x[:, j], X)
        yi = np.minimum(y[:, j], N)
        cnt = np.zeros((m, X + 1, N + 1))
        np.add.at(cnt, (h, xi, yi), 1.0)
        tot_h = cnt.sum(axis=(1, 2))
        for k, vals in enumerate((in_rate[:, j], out_rate[:, j], out_cost[:, j], out_frac[:, j])):
            acc = np.zeros((m, X + 1, N + 1))
            np.add.at(acc, (h, xi, yi), vals)
            with np.errstate(divide="ignore", invalid="ignore"):
                marg = np.where(tot_h > 0, acc.sum(axis=(1, 2)) / np.maximum(tot_h, 1), 0.0)
                tab = np.where(cnt > 0, acc / np.maximum(cnt, 1), marg[:, None, None])
            out[k].append(tab)
        out[4].append(cnt)
    return KbarEstimate(*out)


# -- single-pool chains --------------------------------------------------------------------


def _poisson_matrix(lam: float, X: int) -> np.ndarray:
    """``A[x, x']`` = P(min(x + Poi(lam), X) = x')."""
    pmf = stats.poisson.pmf(np.arange(X + 1), lam)
    sf = stats.poisson.sf(np.arange(X + 1) - 1, lam)
    A = np.zeros((X + 1, X + 1))
    for x in range(X + 1):
        A[x, x:X] = pmf[: X - x]
        A[x, X] = sf[X - x]
    return A


@dataclass
class PoolModel:
    """Solved single-pool chain.

    ``V[h, x, y]`` is the relative value at the pre-action state (``V[0, 0, 0] = 0``),
    ``EV[h, x, y]`` the expected value at the next epoch seen from the post-action
    state ``(x, y)`` at epoch ``h``.  ``gamma`` is the average daily cost.
    """

    j: int
    N: int
    X: int
    V: np.ndarray
    EV: np.ndarray
    gamma: float
    residual: float
    sweeps: int

    def valid(self) -> np.ndarray:
        x = np.arange(self.X + 1)[:, None]
        y = np.arange(self.N + 1)[None, :]
        return y <= np.minimum(x, self.N)

    def lookup(self, x, y, h) -> np.ndarray:
        return self.V[h, np.minimum(x, self.X), y]

    def lookup_next(self, xpost, y, h) -> np.ndarray:
        return self.EV[h, np.minimum(xpost, self.X), y]


class _PoolChain:
    """Transition operators of one single-pool chain (all epochs)."""

    def __init__(self, cfg: SystemConfig, j: int, kbar: KbarEstimate):
        self.m = cfg.m
        self.N = N = int(cfg.N[j])
        self.X = X = truncation(cfg, j)
        self.C = float(cfg.holding_cost[j])
        self.valid = np.arange(N + 1)[None, :] <= np.minimum(np.arange(X + 1), N)[:, None]
        self.A = [_poisson_matrix(cfg.arrivals[j, h], X) for h in range(self.m)]
        self.p = cfg.discharge_probs[j]
        self.mu = float(cfg.mu[j])
        z = np.minimum(np.arange(X + 1), N)
        # midnight: Bmat[x, b] = P(Bin(min(x, N), mu) = b)
        self.Bmat = stats.binom.pmf(np.arange(N + 1)[None, :], z[:, None], self.mu)
        if self.m == 1:
            from .oracle import pool_kernel

            self.K = pool_kernel(N, cfg.arrivals[j, 0], self.mu, X)
        self.dep = []
        for h in range(self.m):
            if h == 0:
                self.dep.append(None)
                continue
            # (x, y) -> (x - d, y - d) with P(Bin(y, p) = d), on flattened states
            P = stats.binom.pmf(np.arange(N + 1)[:, None], np.arange(N + 1)[None, :], self.p[h])
            d, xx, yy = np.meshgrid(np.arange(N + 1), np.arange(X + 1), np.arange(N + 1), indexing="ij")
            w = np.where((xx >= d) & (yy >= d), P[d, yy], 0.0)
            keep = w > 0
            self.dep.append(sparse.csr_matrix(
                (w[keep], ((xx * (N + 1) + yy)[keep], ((xx - d) * (N + 1) + yy - d)[keep])),
                shape=((X + 1) * (N + 1),) * 2))
        self._build_overflow(kbar.in_rate[j], kbar.out_rate[j], kbar.mean_overflow_cost(j))

    def _build_overflow(self, in_rate, out_rate, bbar):
        """Overflow step as a sparse operator on flattened ``(x, y)`` per epoch.

        Pool j either sends ``min(Poi(out_rate), q)`` customers away or receives
        ``min(Poi(in_rate), idle)``; Poisson mass beyond ``L`` (< 1e-18) is lumped at ``L``.
        """
        X, N = self.X, self.N
        S = (X + 1) * (N + 1)
        x = np.arange(X + 1)[:, None] * np.ones((1, N + 1), np.int64)
        q = np.maximum(x - N, 0)
        idle = np.maximum(N - x, 0)
        cap = np.where(q > 0, q, idle)
        sign = np.where(q > 0, -1, 1)
        rows = np.arange(S).reshape(X + 1, N + 1)
        self.ops = []
        self.cost = []
        for h in range(self.m):
            rate = np.where(q > 0, out_rate[h], np.where(idle > 0, in_rate[h], 0.0))
            rate = np.where(self.valid, rate, 0.0)
            rmax = rate.max()
            L = int(min(cap.max(), stats.poisson.isf(1e-18, rmax) + 2 if rmax > 0 else 0))
            r_, c_, w_ = [], [], []
            cost = np.zeros((X + 1, N + 1))
            for k in range(L + 1):
                w = np.where(k < cap, stats.poisson.pmf(k, rate),
                             np.where(k == cap, stats.poisson.sf(k - 1, rate), 0.0))
                if k == L:
                    w = w + np.where(cap > L, stats.poisson.sf(L, rate), 0.0)
                w = np.where(self.valid, w, 0.0)
                keep = w > 0
                r_.append(rows[keep])
                c_.append((np.clip(x + sign * k, 0, X) * (N + 1) + np.arange(N + 1)[None, :])[keep])
                w_.append(w[keep])
                cost += w * np.where(sign < 0, self.C * (q - k) + bbar[h] * k, 0.0)
            self.ops.append(sparse.csr_matrix((np.concatenate(w_), (np.concatenate(r_), np.concatenate(c_))), shape=(S, S)))
            self.cost.append(np.where(self.valid, cost, 0.0))

    def exo(self, h: int, Vn: np.ndarray) -> np.ndarray:
        """Expected next-epoch value seen from post-action ``(x, y)`` at epoch ``h``."""
        if self.m == 1:
            ev = self.K @ Vn[:, 0]
            return np.repeat(ev[:, None], self.N + 1, axis=1)
        A = self.A[h]
        if h == 0:
            G = self.Bmat @ Vn.T  # G[x+, x'] = E_b V(x', b | z(x+))
            ev = (A * G).sum(axis=1)
            return np.repeat(ev[:, None], self.N + 1, axis=1)
        U = (self.dep[h] @ Vn.ravel()).reshape(Vn.shape)  # U[x, y] = E_d V(x - d, y - d)
        return A @ U

    def overflow(self, h: int, EV: np.ndarray) -> np.ndarray:
        return self.cost[h] + (self.ops[h] @ EV.ravel()).reshape(EV.shape)


def build_pool_model(cfg: SystemConfig, j: int, kbar: KbarEstimate | None = None, tol: float = 1e-8,
                     max_sweeps: int = 20000, warm: PoolModel | None = None) -> PoolModel:
    """Solve the single-pool Poisson equation by relative value iteration over days."""
    kbar = kbar if kbar is not None else wait_only_kbar(cfg)
    ch = _PoolChain(cfg, j, kbar)
    m = ch.m
    V0 = warm.V[0].copy() if warm is not None and warm.V.shape[1:] == (ch.X + 1, ch.N + 1) else np.zeros((ch.X + 1, ch.N + 1))
    span = np.inf
    for sweep in range(1, max_sweeps + 1):
        Vn = V0
        for h in range(m - 1, -1, -1):
            Vn = ch.overflow(h, ch.exo(h, Vn))
        diff = np.where(ch.valid, Vn - V0, np.nan)
        span = np.nanmax(diff) - np.nanmin(diff)
        V0 = Vn - Vn[0, 0]
        if span < tol:
            break
    else:
        raise ValueError_(f"pool {j}: value iteration stopped at span {span:.3e} after {max_sweeps} sweeps")
    gamma = float(0.5 * (np.nanmax(diff) + np.nanmin(diff)))
    V = np.zeros((m, ch.X + 1, ch.N + 1))
    EV = np.zeros_like(V)
    V[0] = V0
    nxt = V0
    for h in range(m - 1, -1, -1):
        EV[h] = ch.exo(h, nxt)
        if h > 0:
            V[h] = ch.overflow(h, EV[h]) - gamma / m
            nxt = V[h]
    res = np.abs(np.where(ch.valid, ch.overflow(0, EV[0]) - gamma / m - V[0], 0.0)).max()
    return PoolModel(j, ch.N, ch.X, V, EV, gamma, float(res), sweeps=sweep)


def poisson_residual(cfg: SystemConfig, model: PoolModel, kbar: KbarEstimate | None = None) -> np.ndarray:
    """``|c_h - gamma/m + E V_{h+1} - V_h|`` on every valid state of every epoch."""
    kbar = kbar if kbar is not None else wait_only_kbar(cfg)
    ch = _PoolChain(cfg, model.j, kbar)
    m = ch.m
    out = np.zeros_like(model.V)
    for h in range(m):
        ev = ch.exo(h, model.V[(h + 1) % m])
        out[h] = np.where(ch.valid, np.abs(ch.overflow(h, ev) - model.gamma / m - model.V[h]), 0.0)
    return out


def build_pool_models(cfg, kbar=None, tol=1e-8, warm=None) -> list:
    return [build_pool_model(cfg, j, kbar, tol, warm=None if warm is None else warm[j]) for j in range(cfg.J)]


# -- features ------------------------------------------------------------------------


def n_features(J: int, with_vd: bool = True) -> int:
    return (2 if with_vd else 1) + 5 * J


def _poly(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    blocks = np.stack([x, x * x, y, y * y, x * y], axis=-1)  # (n, J, 5)
    return blocks.reshape(x.shape[0], -1)


def vd(x, y, h, models) -> np.ndarray:
    x, y, h = np.atleast_2d(x), np.atleast_2d(y), np.atleast_1d(h)
    return sum(mod.lookup(x[:, j], y[:, j], h) for j, mod in enumerate(models))


def features(x, y, h, models=None) -> np.ndarray:
    """Feature rows for a batch of states; ``models=None`` drops the V_d column."""
    x, y, h = np.atleast_2d(x), np.atleast_2d(y), np.atleast_1d(h)
    cols = [np.ones((x.shape[0], 1))]
    if models is not None:
        cols.append(vd(x, y, h, models)[:, None])
    cols.append(_poly(x, y))
    return np.concatenate(cols, axis=1)


def next_moments(xpost, y, h, cfg: SystemConfig):
    """First and second moments of ``(x', y')`` after one exogenous step, per pool.

    Returns ``(Ex, Ex2, Ey, Ey2, Exy)`` each shaped like ``xpost``.
    """
    xpost = np.atleast_2d(np.asarray(xpost, float))
    y = np.atleast_2d(np.asarray(y, float))
    h = np.atleast_1d(h)
    lam = cfg.arrivals[:, h].T
    N = cfg.N[None, :]
    mu = cfg.mu[None, :]
    z = np.minimum(xpost, N)
    mid = (h == 0)[:, None]
    p = cfg.discharge_probs[:, h].T
    if cfg.m == 1:
        Ex = xpost + lam - z * mu
        Vx = lam + z * mu * (1 - mu)
        zero = np.zeros_like(xpost)
        return Ex, Vx + Ex * Ex, zero, zero, zero
    # non-midnight: x' = x + a - d, y' = y - d, d ~ Bin(y, p)
    Ex_n = xpost + lam - y * p
    Vx_n = lam + y * p * (1 - p)
    Ey_n = y * (1 - p)
    Vy_n = y * p * (1 - p)
    Exy_n = (xpost + lam) * Ey_n - p * (1 - p) * y * (y - 1)
    # midnight: x' = x + a, y' = b ~ Bin(min(x, N), mu), independent
    Ex_m = xpost + lam
    Vx_m = lam
    Ey_m = z * mu
    Vy_m = z * mu * (1 - mu)
    Exy_m = Ex_m * Ey_m
    Ex = np.where(mid, Ex_m, Ex_n)
    Ex2 = np.where(mid, Vx_m + Ex_m ** 2, Vx_n + Ex_n ** 2)
    Ey = np.where(mid, Ey_m, Ey_n)
    Ey2 = np.where(mid, Vy_m + Ey_m ** 2, Vy_n + Ey_n ** 2)
    Exy = np.where(mid, Exy_m, Exy_n)
    return Ex, Ex2, Ey, Ey2, Exy


def expected_features(xpost, y, h, cfg: SystemConfig, models=None) -> np.ndarray:
    """Exact ``E[features(s')]`` from post-action states at epoch ``h``."""
    xpost = np.atleast_2d(xpost)
    y = np.atleast_2d(y)
    h = np.atleast_1d(h)
    Ex, Ex2, Ey, Ey2, Exy = next_moments(xpost, y, h, cfg)
    n = xpost.shape[0]
    cols = [np.ones((n, 1))]
    if models is not None:
        ev = sum(mod.lookup_next(xpost[:, j], y[:, j], h) for j, mod in enumerate(models))
        cols.append(ev[:, None])
    cols.append(np.stack([Ex, Ex2, Ey, Ey2, Exy], axis=-1).reshape(n, -1))
    return np.concatenate(cols, axis=1)


# -- fitting -----------------------------------------------------------------------------


@dataclass
class EpochValueModel:
    beta: np.ndarray  # (m, d)
    gamma: float  # average cost per epoch
    pool_models: list | None

    def value(self, phi: np.ndarray, h: np.ndarray) -> np.ndarray:
        return np.einsum("nd,nd->n", phi, self.beta[h])

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "gamma": self.gamma,
            "pool_gamma": None if self.pool_models is None else [pm.gamma for pm in self.pool_models],
        }


FIT_METHODS = ("residual", "lstd")


def _epoch_blocks(phi, h, phi_next, m):
    """Rows ``z_t`` (features in the block of epoch h) and ``w_t`` (expected next features in block h+1)."""
    n, d = phi.shape
    hn = (h + 1) % m
    Z = np.zeros((n, m * d))
    W = np.zeros((n, m * d))
    rows = np.arange(n)[:, None]
    Z[rows, h[:, None] * d + np.arange(d)] = phi
    W[rows, hn[:, None] * d + np.arange(d)] = phi_next
    return Z, W


_CHUNK = 8192


def _residual_solve(P, h, Q, target, m, ridge):
    """Ridge least squares on rows ``(z_t - w_t) / sqrt(n)`` by a chunked QR update."""
    n, d = P.shape
    k = m * d - 1
    R = np.diag(np.sqrt(ridge))
    qtb = np.zeros(k)
    for s in range(0, n, _CHUNK):
        Z, W = _epoch_blocks(P[s:s + _CHUNK], h[s:s + _CHUNK], Q[s:s + _CHUNK], m)
        A = np.vstack([R, (Z - W)[:, 1:] / np.sqrt(n)])
        rhs = np.concatenate([qtb, target[s:s + _CHUNK] / np.sqrt(n)])
        Qf, R = np.linalg.qr(A)
        qtb = Qf.T @ rhs
    return np.r_[0.0, linalg.solve_triangular(R, qtb)]


def _lstd_solve(P, h, Q, target, m, ridge):
    n, d = P.shape
    M = np.zeros((m * d, m * d - 1))
    b = np.zeros(m * d)
    for s in range(0, n, _CHUNK):
        Z, W = _epoch_blocks(P[s:s + _CHUNK], h[s:s + _CHUNK], Q[s:s + _CHUNK], m)
        M += Z.T @ (Z - W)[:, 1:] / n
        b += Z.T @ target[s:s + _CHUNK] / n
    A = np.vstack([M, np.diag(np.sqrt(ridge))])
    sol, *_ = np.linalg.lstsq(A, np.r_[b, np.zeros(m * d - 1)], rcond=None)
    return np.r_[0.0, sol]


def fit_epoch_models(phi: np.ndarray, h: np.ndarray, cost: np.ndarray, phi_next: np.ndarray, m: int,
                     gamma: float, ridge: float = 1e-10, pool_models=None, method: str = "residual") -> EpochValueModel:
    """Per-epoch linear value functions fitted jointly across epochs.

    With ``z_t`` placing ``phi_t`` in the block of its epoch and ``w_t`` placing the
    exact expected next features in the block of the next epoch:

    * ``"residual"`` minimizes ``sum_t ((z_t - w_t) beta - (g_t - gamma))^2``; since
      ``w_t`` is an exact conditional expectation this is the Bellman residual itself;
    * ``"lstd"`` solves the fixed-point system ``sum_t z_t (z_t - w_t)^T beta = sum_t z_t (g_t - gamma)``.

    A common shift of all intercepts leaves both systems unchanged, so the
    intercept of epoch 0 is fixed at 0.  ``ridge`` is added to the diagonal of the
    per-sample (averaged) system in the original feature units, so duplicating
    the data leaves the fit unchanged; internally columns are scaled to unit RMS
    and the ridge is rescaled to match.
    """
    if method not in FIT_METHODS:
        raise ValueError(f"unknown fit method {method!r}; choose from {FIT_METHODS}")
    n, d = phi.shape
    h = np.asarray(h)
    counts = np.bincount(h, minlength=m)
    if np.any(counts == 0):
        raise ValueError(f"fit_epoch_models: no samples for epoch(s) {np.flatnonzero(counts == 0).tolist()}")
    scale = np.sqrt(np.mean(phi * phi, axis=0))
    scale = np.where(scale > 0, scale, 1.0)
    solve = _residual_solve if method == "residual" else _lstd_solve
    ridge_scaled = (ridge / np.tile(scale, m) ** 2)[1:]
    try:
        sol = solve(phi / scale, h, phi_next / scale, np.asarray(cost, float) - gamma, m, ridge_scaled)
    except np.linalg.LinAlgError as exc:
        raise ValueError_(f"value fit failed: {exc}") from None
    if not np.all(np.isfinite(sol)):
        raise ValueError_("value fit produced non-finite coefficients")
    beta = sol.reshape(m, d) / scale[None, :]
    return EpochValueModel(beta, float(gamma), pool_models)


def advantages(phi, h, cost, phi_next, model: EpochValueModel, m: int, normalize: bool = True) -> np.ndarray:
    """``g - gamma + E[v^{h+1}(s')] - v^h(s)``, centred per epoch when ``normalize``."""
    h = np.asarray(h)
    adv = cost - model.gamma + model.value(phi_next, (h + 1) % m) - model.value(phi, h)
    if normalize:
        for e in range(m):
            idx = h == e
            if idx.any():
                adv[idx] -= adv[idx].mean()
    return adv
