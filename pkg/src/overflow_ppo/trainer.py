"""PPO outer loop: rollouts, value fitting, advantage estimation and surrogate updates."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import SystemConfig
from .network import ClipSchedule, NetworkParams, OptimizerState, SurrogateBatch, encode, imitate, init_params, train_surrogate
from .policy import benchmark, complete_overflow_kappa, network
from .rollout import Evaluation, Trajectory, actor_seed, evaluate, rollout
from .value import (
    EpochValueModel,
    advantages,
    build_pool_model,
    estimate_kbar,
    expected_features,
    features,
    fit_epoch_models,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 10
    days_per_actor: int = 1000
    actors: int = 4
    epochs: int = 15
    clip: ClipSchedule = field(default_factory=ClipSchedule)
    delta: float = 0.1  # stop when consecutive daily training costs differ by less
    reuse: int = 3  # previous iterations whose data is merged with the fresh batch
    burn_in: int = 50
    seed: int = 0
    eval_days: int = 2000
    lr: float = 1e-3
    minibatch: int = 1024
    structure: str = "partially_shared"
    hidden: tuple = (34,)
    sequential: bool = False
    init_policy: str = "uniform"  # or a benchmark name to imitate before training
    abort_factor: float = 10.0
    select: str = "last"  # "best": keep the better of final and lowest-training-cost params
    value_fit: str = "residual"  # or "lstd"
    center: str = "all"  # per-epoch advantage centring over "all" samples or only "decisions"

    def violations(self) -> list[str]:
        out = []
        for name in ("days_per_actor", "actors", "epochs", "minibatch"):
            if getattr(self, name) < 1:
                out.append(f"{name}: must be >= 1")
        if self.iterations < 0:
            out.append("iterations: must be >= 0")
        if self.reuse < 0:
            out.append("reuse: must be >= 0")
        if self.delta <= 0:
            out.append("delta: must be > 0")
        if self.select not in ("last", "best"):
            out.append("select: must be 'last' or 'best'")
        if self.value_fit not in ("residual", "lstd"):
            out.append("value_fit: must be 'residual' or 'lstd'")
        if self.center not in ("all", "decisions"):
            out.append("center: must be 'all' or 'decisions'")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clip"] = {"initial": self.clip.initial, "steps": [list(s) for s in self.clip.steps]}
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("clip"), dict):
            c = d["clip"]
            d["clip"] = ClipSchedule(c["initial"], tuple(tuple(s) for s in c.get("steps", ())))
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class IterationReport:
    iteration: int
    train_cost: float  # mean daily cost of the fresh rollouts
    eval_cost: float | None
    eval_half_width: float | None
    loss_before: float
    loss_after: float
    clip: float
    lr: float
    seconds: float
    samples: int
    decisions: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: NetworkParams
    reports: list
    final: Evaluation | None
    stopped: str


def build_batch(traj: Trajectory, adv: np.ndarray, structure: str, cfg: SystemConfig) -> SurrogateBatch:
    """Surrogate batch over the samples that carry at least one recorded decision."""
    samples = traj.atom_sample
    inputs = encode(traj.atom_x, traj.y[samples], traj.h[samples], cfg.N, structure, cfg.m)
    full = SurrogateBatch(
        inputs=inputs,
        epochs=traj.h[samples],
        masks=traj.atom_mask,
        state_sample=samples,
        rec_state=traj.rec_atom,
        rec_class=traj.rec_class,
        rec_pool=traj.rec_pool,
        rec_count=traj.rec_count,
        rec_logk_old=traj.rec_logk,
        adv=adv,
    )
    return full.subset(np.unique(samples[traj.rec_atom]))


def center_on_decisions(traj: Trajectory, adv: np.ndarray, m: int) -> np.ndarray:
    """Shift advantages so each epoch's decision samples average zero.

    At a state with a single feasible action the true advantage is exactly zero,
    so any offset there is approximation error; only decision samples enter the
    surrogate, where a common offset would push down every sampled action.
    """
    adv = adv.copy()
    decided = np.zeros(traj.n, bool)
    decided[traj.atom_sample[traj.rec_atom]] = True
    for e in range(m):
        idx = decided & (traj.h == e)
        if idx.any():
            adv[idx] -= adv[idx].mean()
    return adv


def fit_value(fresh: Trajectory, merged: Trajectory, cfg: SystemConfig, warm=None, with_vd: bool = True,
              method: str = "residual"):
    """Pool models from the fresh batch, value fit on the merged batch; returns (model, adv)."""
    models = None
    if with_vd:
        kbar = estimate_kbar(fresh.x, fresh.y, fresh.h, fresh.summaries(), cfg)
        models = [build_pool_model(cfg, j, kbar, warm=None if warm is None else warm[j]) for j in range(cfg.J)]
    phi = features(merged.x, merged.y, merged.h, models)
    phi_next = expected_features(merged.xpost, merged.y, merged.h, cfg, models)
    gamma = float(merged.cost.mean())
    model = fit_epoch_models(phi, merged.h, merged.cost, phi_next, cfg.m, gamma, pool_models=models, method=method)
    adv = advantages(phi, merged.h, merged.cost, phi_next, model, cfg.m)
    return model, adv


def warm_start(params: NetworkParams, cfg: SystemConfig, policy_name: str, days: int = 200, seed: int = 0,
               smoothing: float = 0.1, steps: int = 1500) -> NetworkParams:
    """Fit the network by cross-entropy to a smoothed benchmark policy on its own visited states."""
    bench = benchmark(policy_name, cfg)
    traj = rollout(bench, cfg, days, np.random.SeedSequence([seed, 7919]), record=False)
    x, y, h = traj.x, traj.y, traj.h
    masks = cfg.route_mask[None] & (x < cfg.N)[:, None, :]
    idx = np.arange(cfg.J)
    masks[:, idx, idx] = True
    target = np.zeros(masks.shape)
    for t in range(len(h)):
        k = complete_overflow_kappa(x[t], cfg) if bench.overflows_at(h[t]) else np.eye(cfg.J)
        uni = masks[t] / masks[t].sum(axis=1, keepdims=True)
        target[t] = (1 - smoothing) * k + smoothing * uni
    inputs = encode(x, y, h, cfg.N, params.structure, cfg.m)
    return imitate(params, inputs, h, masks, target, steps=steps, rng=np.random.default_rng(seed))


def _write_csv(path: Path, reports: list):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "train_cost", "eval_cost", "ci_half_width", "loss_before", "loss_after", "clip", "seconds"])
        for r in reports:
            w.writerow([r.iteration, r.train_cost, r.eval_cost, r.eval_half_width, r.loss_before, r.loss_after, r.clip, r.seconds])


class _Checkpoints:
    """Per-iteration weights plus the state needed to resume bit-identically."""

    def __init__(self, out: Path | None):
        self.out = out
        if out is not None:
            (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    def save(self, r, params, window, warm, state, best):
        if self.out is None:
            return
        d = self.out / "checkpoints"
        params.save(d / f"iter_{r:03d}.json")
        best.save(d / "best.json")
        for k, traj in enumerate(window):
            traj.save(d / f"window_{k}.npz")
        if warm is not None:
            np.savez_compressed(d / "pool_values.npz", **{f"v{j}": m.V[0] for j, m in enumerate(warm)})
        state = dict(state, iteration=r, window=len(window))
        (d / "state.json").write_text(json.dumps(state))

    def load(self):
        d = self.out / "checkpoints" if self.out is not None else None
        if d is None or not (d / "state.json").exists():
            return None
        state = json.loads((d / "state.json").read_text())
        params = NetworkParams.load(d / f"iter_{state['iteration']:03d}.json")
        window = [Trajectory.load(d / f"window_{k}.npz") for k in range(state["window"])]
        warm = None
        if (d / "pool_values.npz").exists():
            with np.load(d / "pool_values.npz") as z:
                warm = [_WarmValues(z[f"v{j}"]) for j in range(len(z.files))]
        return state, params, window, warm


class _WarmValues:
    def __init__(self, v0):
        self.V = v0[None]


def train(tc: TrainConfig, cfg: SystemConfig, params: NetworkParams | None = None, out_dir=None,
          resume: bool = False, evaluate_final: bool = True, progress=None) -> TrainResult:
    """Run PPO iterations; writes reports/checkpoints under ``out_dir`` when given."""
    bad = tc.violations()
    if bad:
        raise ValueError("; ".join(bad))
    out = Path(out_dir) if out_dir is not None else None
    ckpt = _Checkpoints(out)
    if params is None:
        params = init_params(tc.structure, cfg.J, cfg.m, tc.hidden, np.random.default_rng(tc.seed))
        if tc.init_policy != "uniform":
            params = warm_start(params, cfg, tc.init_policy, seed=tc.seed)
    params.check(cfg.J, cfg.m)
    reports, window, warm = [], [], None
    start, initial_cost, prev_cost = 0, None, None
    best = (np.inf, params)
    if resume and (loaded := ckpt.load()) is not None:
        state, params, window, warm = loaded
        start = state["iteration"] + 1
        initial_cost, prev_cost = state["initial_cost"], state["prev_cost"]
        best = (state["best_cost"], NetworkParams.load(out / "checkpoints" / "best.json"))
        reports = [IterationReport(**r) for r in state["reports"]]
    stopped = "iterations"
    for r in range(start, tc.iterations):
        t0 = time.perf_counter()
        policy = network(params, tc.sequential)
        fresh = Trajectory.concat([
            rollout(policy, cfg, tc.days_per_actor, actor_seed(tc.seed, r, k), tc.burn_in) for k in range(tc.actors)
        ])
        train_cost = float(fresh.daily_costs(cfg.m).mean())
        if initial_cost is None:
            initial_cost = train_cost
        if train_cost > tc.abort_factor * max(initial_cost, 1e-12):
            raise TrainingDiverged(
                f"iteration {r}: training cost {train_cost:.3f} exceeds {tc.abort_factor}x the initial {initial_cost:.3f}"
            )
        if train_cost < best[0]:
            best = (train_cost, params)
        if prev_cost is not None and abs(train_cost - prev_cost) < tc.delta:
            stopped = "converged"
            log.info("iteration %d: converged (|%.4f - %.4f| < %g)", r, train_cost, prev_cost, tc.delta)
            break
        prev_cost = train_cost
        window = (window + [fresh])[-(tc.reuse + 1):]
        merged = Trajectory.concat(window)
        model, adv = fit_value(fresh, merged, cfg, warm, method=tc.value_fit)
        if tc.center == "decisions":
            adv = center_on_decisions(merged, adv, cfg.m)
        warm = model.pool_models
        batch = build_batch(merged, adv, params.structure, cfg)
        eps = tc.clip(r)
        opt = OptimizerState(lr=tc.lr)
        rng = np.random.default_rng(np.random.SeedSequence([tc.seed, r, 104729]))
        if batch.n > 0:
            params, opt, l0, l1 = train_surrogate(params, batch, eps, opt, tc.epochs, tc.minibatch, rng)
        else:
            l0 = l1 = 0.0
        rep = IterationReport(r, train_cost, None, None, l0, l1, eps, opt.lr, time.perf_counter() - t0, fresh.n, batch.n)
        reports.append(rep)
        if progress is not None:
            progress(rep, params)
        if out is not None:
            with open(out / "reports.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rep.to_dict()) + "\n")
        ckpt.save(r, params, window, warm, {
            "initial_cost": initial_cost, "prev_cost": prev_cost, "best_cost": best[0],
            "reports": [x.to_dict() for x in reports],
        }, best[1])
    final = None
    if evaluate_final and tc.eval_days > 0:
        eval_seed = np.random.SeedSequence([tc.seed, 999983])
        final = evaluate(network(params, tc.sequential), cfg, tc.eval_days, eval_seed, tc.burn_in)
        if tc.select == "best" and best[1] is not params:
            alt = evaluate(network(best[1], tc.sequential), cfg, tc.eval_days, eval_seed, tc.burn_in)
            if alt.mean < final.mean:
                params, final = best[1], alt
                stopped += "+best"
    if out is not None:
        _write_csv(out / "summary.csv", reports)
        params.save(out / "policy.json")
        if final is not None:
            (out / "final.json").write_text(json.dumps(final.as_row()))
    return TrainResult(params, reports, final, stopped)
