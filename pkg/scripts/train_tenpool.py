"""Desk-scale ten-pool run: benchmarks, then PPO from the quick profile.

Prints one line per iteration and a final JSON summary with the gain over the
empirical policy.  Training settings can be overridden as ``key=value``:

    python3 scripts/train_tenpool.py --out runs/tenpool seed=1 epochs=20
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from overflow_ppo.policy import benchmark
from overflow_ppo.presets import TRAIN_DEFAULTS, load_preset
from overflow_ppo.rollout import evaluate
from overflow_ppo.trainer import TrainConfig, train


def overrides(pairs):
    out = {}
    for pair in pairs:
        key, value = pair.split("=", 1)
        out[key] = json.loads(value) if value[:1] in "[{0123456789-" or value in ("true", "false") else value
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--preset", default="tenpool")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("settings", nargs="*", help="TrainConfig overrides as key=value")
    args = p.parse_args(argv)
    cfg = load_preset(args.preset)
    tc = TrainConfig.from_dict({**TRAIN_DEFAULTS[args.preset]["quick"], "eval_days": 2000, **overrides(args.settings)})
    seed = np.random.SeedSequence([tc.seed, 999983])  # same stream as the final evaluation
    bench = {name: evaluate(benchmark(name, cfg), cfg, tc.eval_days, seed).mean
             for name in ("complete_overflow", "midnight", "empirical")}
    print(json.dumps({"benchmarks": bench}), flush=True)

    def progress(r, params):
        print(f"iteration {r.iteration}: train cost {r.train_cost:.2f}, surrogate {r.loss_before:.3f} -> "
              f"{r.loss_after:.3f}, lr {r.lr:.2e}, {r.seconds:.0f}s", flush=True)

    t0 = time.perf_counter()
    res = train(tc, cfg, out_dir=args.out, progress=progress)
    summary = {"ppo": res.final.as_row(), "empirical": bench["empirical"],
               "gain": 1 - res.final.mean / bench["empirical"], "stopped": res.stopped,
               "minutes": (time.perf_counter() - t0) / 60, "train_config": tc.to_dict()}
    print(json.dumps(summary), flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
