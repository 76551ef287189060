"""Command-line entry point: simulate, train, evaluate, compare, oracle, inspect-policy.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 numerical failure.
Errors are reported on stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import oracle
from .config import SystemConfig, validate_config
from .network import ClipSchedule, NetworkParams, init_params
from .policy import BENCHMARKS, PolicySpec, benchmark, network
from .presets import PRESET_NAMES, TRAIN_DEFAULTS, load_preset, preset_document
from .rollout import evaluate, rollout, summarize
from .trainer import TrainConfig, TrainingDiverged, train
from .value import ValueError_, truncation

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, violations=None):
        super().__init__(message)
        self.code, self.kind, self.violations = code, kind, violations or []


# -- config / policy resolution ---------------------------------------------------------


def load_system(args) -> tuple[SystemConfig, dict]:
    """``(cfg, document)`` from ``--preset`` or ``--config``; invalid configs exit with 2."""
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
            cfg = SystemConfig.from_dict(doc)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CliError(EXIT_CONFIG, "config", f"cannot load {args.config}: {exc}") from None
    else:
        name = args.preset or "tenpool"
        try:
            doc = preset_document(name)
        except KeyError as exc:
            raise CliError(EXIT_CONFIG, "config", str(exc.args[0])) from None
        cfg = SystemConfig.from_dict(doc)
    bad = validate_config(cfg)
    if bad:
        raise CliError(EXIT_CONFIG, "config", f"{len(bad)} configuration violation(s)", bad)
    return cfg, doc


def resolve_policy(spec: str, cfg: SystemConfig, doc: dict, sequential: bool = False) -> PolicySpec:
    """A benchmark name or a path to a weights file."""
    if spec in BENCHMARKS:
        return benchmark(spec, cfg, doc.get("night_epochs"))
    path = Path(spec)
    if not path.exists():
        raise CliError(EXIT_CONFIG, "policy", f"unknown policy {spec!r}: not a benchmark ({', '.join(BENCHMARKS)}) or weights file")
    try:
        params = NetworkParams.load(path, cfg.J, cfg.m)
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_CONFIG, "policy", f"{path}: {exc}") from None
    return PolicySpec("network", params=params, sequential=sequential, label=path.stem)


def train_config(args, cfg: SystemConfig, doc: dict) -> TrainConfig:
    profiles = doc.get("train") or TRAIN_DEFAULTS.get(doc.get("name"), {})
    base = dict(profiles.get("quick" if args.quick else "full", {}))
    overrides = {
        "iterations": args.iterations, "days_per_actor": args.days, "actors": args.actors,
        "epochs": args.epochs, "reuse": args.reuse, "seed": args.seed, "eval_days": args.eval_days,
        "lr": args.lr, "minibatch": args.minibatch, "delta": args.delta, "structure": args.structure,
        "init_policy": args.init_policy, "select": args.select,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.hidden is not None:
        base["hidden"] = args.hidden
    if args.sequential:
        base["sequential"] = True
    if args.clip is not None:
        base["clip"] = ClipSchedule.constant(args.clip)
    try:
        tc = TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, "train", str(exc)) from None
    bad = tc.violations()
    if bad:
        raise CliError(EXIT_CONFIG, "train", "invalid training settings", bad)
    return tc


def _is_twopool(cfg: SystemConfig) -> bool:
    return cfg.J == 2 and cfg.m == 1


def _write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _emit(obj) -> None:
    print(json.dumps(obj))


# -- commands ----------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg, doc = load_system(args)
    policy = resolve_policy(args.policy, cfg, doc, args.sequential)
    traj = rollout(policy, cfg, args.days, np.random.SeedSequence(args.seed), burn_in=args.burn_in, record=False)
    ev = summarize(traj, cfg)
    row = {"policy": policy.name, **ev.as_row()}
    if args.out:
        out = Path(args.out)
        J = cfg.J
        q = np.maximum(traj.x - cfg.N, 0)
        moved = traj.f.sum(axis=(1, 2)) - np.trace(traj.f, axis1=1, axis2=2)
        series = []
        for t in range(traj.n):
            r = {"day": int(traj.day[t]), "epoch": int(traj.h[t])}
            r.update({f"x{j}": int(traj.x[t, j]) for j in range(J)})
            r.update({f"q{j}": int(q[t, j]) for j in range(J)})
            r.update({"overflow": int(moved[t]), "cost": float(traj.cost[t])})
            series.append(r)
        _write_rows(out / "series.csv", series)
        _write_rows(out / "summary.csv", [row])
    _emit(row)
    return 0


def cmd_evaluate(args) -> int:
    cfg, doc = load_system(args)
    policy = resolve_policy(args.policy, cfg, doc, args.sequential)
    ev = evaluate(policy, cfg, args.days, np.random.SeedSequence(args.seed), args.burn_in)
    row = {"policy": policy.name, **ev.as_row()}
    if args.exact:
        if not _is_twopool(cfg):
            raise CliError(EXIT_CONFIG, "config", "--exact needs a two-pool single-epoch system")
        row["exact_cost"] = oracle.exact_policy_eval(policy, cfg, args.truncation)[0]
    _emit(row)
    return 0


def cmd_compare(args) -> int:
    cfg, doc = load_system(args)
    names = args.policies or ["no_overflow", "complete_overflow", "midnight", "empirical"]
    rows = []
    for name in names:
        policy = resolve_policy(name, cfg, doc, args.sequential)
        ev = evaluate(policy, cfg, args.days, np.random.SeedSequence(args.seed), args.burn_in)
        rows.append({"policy": policy.name, **ev.as_row()})
    best = min(range(len(rows)), key=lambda k: rows[k]["mean_daily_cost"])
    for k, r in enumerate(rows):
        r["best"] = int(k == best)
    out = Path(args.out) if args.out else None
    if out is not None:
        _write_rows(out / "compare.csv", rows)
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return 0


def cmd_train(args) -> int:
    cfg, doc = load_system(args)
    tc = train_config(args, cfg, doc)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_config.json").write_text(json.dumps(tc.to_dict(), indent=1))

    def progress(rep, params):
        if not args.quiet:
            print(json.dumps(rep.to_dict()), file=sys.stderr)

    params = None
    if args.weights:
        params = resolve_policy(args.weights, cfg, doc).params
    res = train(tc, cfg, params=params, out_dir=out, resume=args.resume, progress=progress)
    summary = {"stopped": res.stopped, "iterations": len(res.reports)}
    if res.final is not None:
        summary.update(res.final.as_row())
    if _is_twopool(cfg) and not args.no_exact:
        summary["exact_cost"] = oracle.exact_policy_eval(network(res.params, tc.sequential), cfg)[0]
    if out is not None:
        (out / "final.json").write_text(json.dumps(summary))
    _emit(summary)
    return 0


def cmd_oracle(args) -> int:
    cfg, doc = load_system(args)
    if not _is_twopool(cfg):
        raise CliError(EXIT_CONFIG, "config", f"oracle needs a two-pool single-epoch system (got J={cfg.J}, m={cfg.m})")
    gamma, v, moves = oracle.value_iteration_midnight(cfg, args.truncation, args.tol, args.max_iter)
    if args.out:
        n = v.shape[0]
        rows = [{"x1": a, "x2": b, "v": float(v[a, b]), "overflow_1_to_2": int(max(moves[a, b], 0)),
                 "overflow_2_to_1": int(max(-moves[a, b], 0))} for a in range(n) for b in range(n)]
        _write_rows(Path(args.out) / "oracle_policy.csv", rows)
    _emit({"gamma": gamma, "truncation": args.truncation, "tol": args.tol})
    return 0


def _parse_range(text: str) -> np.ndarray:
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise CliError(EXIT_CONFIG, "grid", f"bad range {text!r}; expected lo:hi") from None
    if hi < lo:
        raise CliError(EXIT_CONFIG, "grid", f"empty range {text!r}")
    return np.arange(lo, hi + 1)


def cmd_inspect_policy(args) -> int:
    cfg, doc = load_system(args)
    if args.weights == "zero":
        params = init_params("partially_shared", cfg.J, cfg.m, (1,))
    else:
        params = resolve_policy(args.weights, cfg, doc).params
    J = cfg.J
    a, b = args.axes
    if not (0 <= a < J and 0 <= b < J and a != b):
        raise CliError(EXIT_CONFIG, "grid", f"axes must be two distinct pools in 0..{J - 1}")
    if not 0 <= args.epoch < cfg.m:
        raise CliError(EXIT_CONFIG, "grid", f"epoch {args.epoch} outside 0..{cfg.m - 1}")
    ra, rb = _parse_range(args.grid[0]), _parse_range(args.grid[1])
    for j, r in ((a, ra), (b, rb)):
        if r[0] < 0 or r[-1] > truncation(cfg, j):
            raise CliError(EXIT_CONFIG, "grid", f"pool {j} range {r[0]}..{r[-1]} outside 0..{truncation(cfg, j)}")
    base = np.array(args.base if args.base is not None else cfg.N, np.int64)
    if base.shape != (J,):
        raise CliError(EXIT_CONFIG, "grid", f"--base needs {J} values")
    ga, gb = np.meshgrid(ra, rb, indexing="ij")
    x = np.repeat(base[None], ga.size, axis=0)
    x[:, a], x[:, b] = ga.ravel(), gb.ravel()
    y = np.zeros_like(x)
    h = np.full(len(x), args.epoch)
    from .policy import network_log_kappa

    kappa = np.exp(network_log_kappa(params, x, y, h, cfg))
    pairs = [(i, j) for i in range(J) for j in range(J) if cfg.route_mask[i, j]]
    if args.route is not None:
        i, j = args.route
        if not cfg.route_mask[i, j]:
            raise CliError(EXIT_CONFIG, "grid", f"no overflow route from class {i} to pool {j}")
        pairs = [(i, j)]
    rows = []
    for t in range(len(x)):
        r = {f"x{a}": int(x[t, a]), f"x{b}": int(x[t, b])}
        r.update({f"kappa_{i}_{j}": float(kappa[t, i, j]) for i, j in pairs})
        rows.append(r)
    if args.out:
        _write_rows(Path(args.out), rows)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return 0


# -- parser ---------------------------------------------------------------------------------


def _system_args(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", choices=PRESET_NAMES)
    g.add_argument("--config", help="system configuration JSON")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="overflow-ppo", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a policy and write per-epoch series")
    _system_args(p)
    p.add_argument("--policy", default="empirical")
    p.add_argument("--days", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--burn-in", type=int, default=50)
    p.add_argument("--sequential", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="mean daily cost with a batch-means interval")
    _system_args(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--days", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--burn-in", type=int, default=50)
    p.add_argument("--sequential", action="store_true")
    p.add_argument("--exact", action="store_true", help="also solve the exact cost (two-pool only)")
    p.add_argument("--truncation", type=int, default=oracle.DEFAULT_X)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="evaluate several policies on common seeds")
    _system_args(p)
    p.add_argument("--policies", nargs="+")
    p.add_argument("--days", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--burn-in", type=int, default=50)
    p.add_argument("--sequential", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("train", help="train a policy network with PPO")
    _system_args(p)
    p.add_argument("--quick", action="store_true", help="desk-scale profile")
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--weights", help="initial weights file")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--days", type=int, help="days per actor")
    p.add_argument("--actors", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--clip", type=float, help="constant clip size (default: adaptive)")
    p.add_argument("--reuse", type=int)
    p.add_argument("--eval-days", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--minibatch", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--hidden", type=int, nargs="+")
    p.add_argument("--structure", choices=("fully_connected", "fully_separate", "partially_shared"))
    p.add_argument("--init-policy", choices=("uniform", *BENCHMARKS))
    p.add_argument("--select", choices=("last", "best"))
    p.add_argument("--sequential", action="store_true")
    p.add_argument("--no-exact", action="store_true", help="skip the exact two-pool evaluation")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("oracle", help="optimal cost of the two-pool single-epoch system")
    _system_args(p)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--truncation", type=int, default=oracle.DEFAULT_X)
    p.add_argument("--max-iter", type=int, default=100000, help="value-iteration sweep cap")
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle, preset="twopool-midnight")

    p = sub.add_parser("inspect-policy", help="routing probabilities over a 2-D grid of states")
    _system_args(p)
    p.add_argument("--weights", required=True, help="weights file, or 'zero' for the initial uniform network")
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--axes", type=int, nargs=2, default=(0, 1), metavar=("A", "B"))
    p.add_argument("--grid", nargs=2, default=("0:49", "0:49"), metavar=("LO:HI", "LO:HI"))
    p.add_argument("--base", type=int, nargs="+", help="counts of the other pools (default: N)")
    p.add_argument("--route", type=int, nargs=2, metavar=("CLASS", "POOL"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_policy)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc)}
        if exc.violations:
            err["violations"] = exc.violations
        print(json.dumps(err), file=sys.stderr)
        return exc.code
    except (FloatingPointError, oracle.OracleError, ValueError_, TrainingDiverged, np.linalg.LinAlgError) as exc:
        print(json.dumps({"error": "numerical", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(json.dumps({"error": "invalid", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
