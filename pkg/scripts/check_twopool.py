"""Two-pool midnight: PPO against the value-iteration optimum, exactly evaluated.

Each iteration's policy is evaluated on the truncated chain, so the printed
costs carry no simulation noise.  Overrides as ``key=value``:

    python3 scripts/check_twopool.py seed=3 iterations=20
"""
import argparse
import json

from overflow_ppo.oracle import build_truncated_mdp, exact_policy_eval, value_iteration_midnight
from overflow_ppo.policy import network
from overflow_ppo.presets import TRAIN_DEFAULTS, load_preset
from overflow_ppo.trainer import TrainConfig, train

from train_tenpool import overrides


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("settings", nargs="*", help="TrainConfig overrides as key=value")
    args = p.parse_args(argv)
    cfg = load_preset("twopool-midnight")
    gamma_star, _, _ = value_iteration_midnight(cfg)
    mdp = build_truncated_mdp(cfg)
    tc = TrainConfig.from_dict({**TRAIN_DEFAULTS["twopool-midnight"]["quick"], "eval_days": 0,
                                **overrides(args.settings)})
    print(f"optimal average cost {gamma_star:.4f}", flush=True)

    def progress(r, params):
        cost = exact_policy_eval(network(params, tc.sequential), mdp)[0]
        print(f"iteration {r.iteration}: train cost {r.train_cost:.2f}, exact cost of updated policy {cost:.3f} "
              f"({cost / gamma_star - 1:+.2%})", flush=True)

    res = train(tc, cfg, progress=progress, evaluate_final=False)
    cost = exact_policy_eval(network(res.params, tc.sequential), mdp)[0]
    print(json.dumps({"gamma_star": gamma_star, "ppo_exact": cost, "ratio": cost / gamma_star}), flush=True)
    return 0 if cost <= 1.05 * gamma_star else 1


if __name__ == "__main__":
    raise SystemExit(main())
