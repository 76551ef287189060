"""Simulation of trajectories under a policy and batch-means evaluation."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .config import SystemConfig
from .dynamics import State, advance, apply_action, cost, feasibility_mask, sample_exogenous
from .policy import (
    ActionTrace,
    PolicySpec,
    atomic_distribution,
    network_log_kappa,
    record_decisions,
    sample_action,
    sample_from_kappa,
)
from .value import kappa_summaries

N_BATCHES = 20


@dataclass
class Trajectory:
    """Decision-epoch records of one or more simulated runs, in time order.

    Per sample ``t``: pre-action state ``(x, y, h)``, post-action counts ``xpost``,
    action ``f``, cost, day index, arrivals during the following interval and
    the pool-local routing summaries used to estimate ``kbar``.  Network policies
    also store their atomic decisions (``atom_*`` / ``rec_*``) with the generating
    policy's ``log kappa``.
    """

    x: np.ndarray
    y: np.ndarray
    h: np.ndarray
    xpost: np.ndarray
    f: np.ndarray
    cost: np.ndarray
    day: np.ndarray
    arrivals: np.ndarray
    in_rate: np.ndarray
    out_rate: np.ndarray
    out_cost: np.ndarray
    out_frac: np.ndarray
    atom_x: np.ndarray
    atom_sample: np.ndarray
    atom_mask: np.ndarray
    rec_atom: np.ndarray
    rec_class: np.ndarray
    rec_pool: np.ndarray
    rec_count: np.ndarray
    rec_logk: np.ndarray

    @property
    def n(self) -> int:
        return len(self.h)

    def summaries(self):
        return self.in_rate, self.out_rate, self.out_cost, self.out_frac

    def daily_costs(self, m: int) -> np.ndarray:
        days = self.n // m
        return self.cost[: days * m].reshape(days, m).sum(axis=1)

    def as_dict(self) -> dict:
        return {fd.name: getattr(self, fd.name) for fd in fields(self)}

    @classmethod
    def concat(cls, parts: list) -> "Trajectory":
        if len(parts) == 1:
            return parts[0]
        out = {}
        sample_off = np.cumsum([0] + [p.n for p in parts[:-1]])
        atom_off = np.cumsum([0] + [len(p.atom_sample) for p in parts[:-1]])
        day_off = np.cumsum([0] + [int(p.day.max()) + 1 if p.n else 0 for p in parts[:-1]])
        for fd in fields(cls):
            arrs = [getattr(p, fd.name) for p in parts]
            if fd.name == "atom_sample":
                arrs = [a + o for a, o in zip(arrs, sample_off)]
            elif fd.name == "rec_atom":
                arrs = [a + o for a, o in zip(arrs, atom_off)]
            elif fd.name == "day":
                arrs = [a + o for a, o in zip(arrs, day_off)]
            out[fd.name] = np.concatenate(arrs, axis=0)
        return cls(**out)

    def save(self, path) -> None:
        np.savez_compressed(path, **self.as_dict())

    @classmethod
    def load(cls, path) -> "Trajectory":
        with np.load(path) as z:
            return cls(**{fd.name: z[fd.name] for fd in fields(cls)})


def _seed_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def actor_seed(master: int, iteration: int, actor: int) -> np.random.SeedSequence:
    """Independent stream per (master seed, iteration, actor)."""
    return np.random.SeedSequence([int(master), int(iteration), int(actor)])


def rollout(policy: PolicySpec, cfg: SystemConfig, days: int, seed, burn_in: int = 50,
            record: bool = True, start: State | None = None) -> Trajectory:
    """Simulate ``burn_in + days`` days from an empty system and keep the last ``days``."""
    rng = _seed_rng(seed)
    J, m = cfg.J, cfg.m
    n = days * m
    x = np.zeros((n, J), np.int64)
    y = np.zeros((n, J), np.int64)
    h = np.zeros(n, np.int64)
    xpost = np.zeros((n, J), np.int64)
    fs = np.zeros((n, J, J), np.int32)
    g = np.zeros(n)
    arr = np.zeros((n, J), np.int64)
    kap = np.zeros((n, J, J))
    trace = ActionTrace() if (record and policy.kind == "network") else None
    atom_sample = []
    is_net = policy.kind == "network"
    s = start.copy() if start is not None else State.empty(J, 0)
    diag = np.arange(J)
    for t in range(-burn_in * m, n):
        keep = t >= 0
        q = np.maximum(s.x - cfg.N, 0)
        if not q.any():
            f = np.zeros((J, J), np.int64)
            kappa = None
        elif is_net and not policy.sequential:
            mask = feasibility_mask(s.x, cfg)
            logk = network_log_kappa(policy.params, s.x[None], s.y[None], np.array([s.h]), cfg, mask[None])[0]
            kappa = np.exp(logk)
            f = sample_from_kappa(kappa, s, cfg, rng)
            if keep and trace is not None:
                before = len(trace.x)
                record_decisions(trace, s.x, mask, logk, f)
                atom_sample.extend([t] * (len(trace.x) - before))
        else:
            kappa = atomic_distribution(policy, s, cfg) if keep and record else None
            if keep and trace is not None:
                before = len(trace.x)
                f = sample_action(policy, s, cfg, rng, trace)
                atom_sample.extend([t] * (len(trace.x) - before))
            else:
                f = sample_action(policy, s, cfg, rng)
        post = apply_action(s, f, cfg, check=False)
        draw = sample_exogenous(cfg, post, rng)
        if keep:
            x[t], y[t], h[t] = s.x, s.y, s.h
            xpost[t] = post.x
            fs[t] = f
            g[t] = cost(s, f, cfg, check=False)
            arr[t] = draw.a
            if kappa is not None:
                kap[t] = kappa * (q > 0)[:, None]
                kap[t, diag, diag] += 1.0 - kap[t].sum(axis=1)
            else:
                kap[t, diag, diag] = 1.0
        s = advance(post, draw, cfg)
    ir, orr, oc, of = kappa_summaries(kap, h, cfg) if record else (np.zeros((n, J)),) * 4
    if trace is not None and trace.records:
        rec = np.array([r[:4] for r in trace.records], np.int64)
        rec_logk = np.array([r[4] for r in trace.records])
        atom_x = np.array(trace.x, np.int64)
        atom_mask = np.array(trace.masks, bool)
    else:
        rec = np.zeros((0, 4), np.int64)
        rec_logk = np.zeros(0)
        atom_x = np.zeros((0, J), np.int64)
        atom_mask = np.zeros((0, J, J), bool)
    return Trajectory(
        x=x, y=y, h=h, xpost=xpost, f=fs, cost=g, day=np.arange(n) // m, arrivals=arr,
        in_rate=ir, out_rate=orr, out_cost=oc, out_frac=of,
        atom_x=atom_x, atom_sample=np.array(atom_sample, np.int64), atom_mask=atom_mask,
        rec_atom=rec[:, 0], rec_class=rec[:, 1], rec_pool=rec[:, 2], rec_count=rec[:, 3], rec_logk=rec_logk,
    )


@dataclass
class Evaluation:
    mean: float  # average daily cost
    half_width: float  # 95% batch-means half-width
    overflow_rate: float  # overflow assignments per arrival
    days: int

    def as_row(self) -> dict:
        return {"mean_daily_cost": self.mean, "ci_half_width": self.half_width,
                "overflow_rate": self.overflow_rate, "days": self.days}


def batch_means(daily: np.ndarray, batches: int = N_BATCHES):
    per = len(daily) // batches
    if per < 1:
        raise ValueError(f"need at least {batches} days for {batches} batches, got {len(daily)}")
    means = daily[: per * batches].reshape(batches, per).mean(axis=1)
    return float(means.mean()), float(1.96 * means.std(ddof=1) / np.sqrt(batches))


def summarize(traj: Trajectory, cfg: SystemConfig) -> Evaluation:
    daily = traj.daily_costs(cfg.m)
    mean, hw = batch_means(daily)
    moved = traj.f.sum(axis=(1, 2)) - np.trace(traj.f, axis1=1, axis2=2)
    total_arr = traj.arrivals.sum()
    rate = float(moved.sum() / total_arr) if total_arr > 0 else 0.0
    return Evaluation(mean, hw, rate, len(daily))


def evaluate(policy: PolicySpec, cfg: SystemConfig, days: int, seed, burn_in: int = 50) -> Evaluation:
    """Mean daily cost with a 95% batch-means half-width (20 batches)."""
    if days < N_BATCHES:
        raise ValueError(f"evaluation needs at least {N_BATCHES} days, got {days}")
    traj = rollout(policy, cfg, days, seed, burn_in=burn_in, record=False)
    return summarize(traj, cfg)
