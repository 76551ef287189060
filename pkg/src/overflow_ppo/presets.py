"""Built-in instances.

The JSON files under ``presets/`` are generated by :func:`write_presets` and checked
in; :func:`load_preset` reads those files.  Hourly arrival and discharge shapes are
synthetic (see ``ARRIVAL_SHAPE`` / ``DISCHARGE_SHAPE``) and can be overridden by
editing a copy of the JSON.
"""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .config import SystemConfig

# Eight 3-hour epochs starting at midnight; epoch k covers [3k, 3k + 3) hours.
# 40% of daily arrivals fall in epochs 3-4 (09:00-15:00).
ARRIVAL_SHAPE = np.array([0.05, 0.04, 0.07, 0.20, 0.20, 0.19, 0.15, 0.10])
# Mass of the discharge-time distribution per epoch; 70% in 12:00-18:00, none before 06:00.
DISCHARGE_SHAPE = np.array([0.0, 0.0, 0.02, 0.06, 0.35, 0.35, 0.14, 0.08])

SYNTHETIC_NOTE = (
    "Hourly arrival/discharge shapes are synthetic defaults (40% of arrivals in 09:00-15:00, "
    "70% of discharges in 12:00-18:00); per-class daily rates split the department total "
    "in proportion to bed counts."
)

# Five-pool routes (0-indexed): preferred overflow pool, then two secondary pools.
FIVE_POOL_ROUTES = {
    0: (4, (1, 2)),
    1: (2, (3, 4)),
    2: (1, (0, 4)),
    3: (1, (0, 2)),
    4: (0, (1, 2)),
}

PRESET_NAMES = (
    "twopool-midnight",
    "twopool-8epoch",
    "fivepool-balanced",
    "fivepool-unbalanced",
    "tenpool",
    "twentypool",
    "twentypool-b40",
)


def epoch_profile(daily: np.ndarray, m: int) -> np.ndarray:
    daily = np.asarray(daily, float)
    if m == 1:
        return daily[:, None]
    if m != 8:
        raise ValueError("synthetic shapes are defined for m in {1, 8}")
    return daily[:, None] * ARRIVAL_SHAPE[None, :]


def discharge_cdf(J: int, m: int) -> np.ndarray:
    if m == 1:
        return np.tile([0.0, 1.0], (J, 1))
    if m != 8:
        raise ValueError("synthetic shapes are defined for m in {1, 8}")
    F = np.concatenate([[0.0], np.cumsum(DISCHARGE_SHAPE)])
    F[-1] = 1.0
    return np.tile(F, (J, 1))


def night_epochs(m: int, start_hour: float = 19.0, end_hour: float = 7.0) -> list[int]:
    """Epochs lying entirely inside the overnight window; ``[0]`` if none do."""
    out = []
    for k in range(m):
        a, b = 24.0 * k / m, 24.0 * (k + 1) / m
        if a >= start_hour or b <= end_hour:
            out.append(k)
    return out or [0]


def split_rate(total: float, N) -> np.ndarray:
    N = np.asarray(N, float)
    return total * N / N.sum()


def _department(offset, costs):
    """Within-department routes for the five-pool block starting at ``offset``."""
    pref_cost, sec_cost = costs
    routes = {}
    for k, (pref, secs) in FIVE_POOL_ROUTES.items():
        routes[offset + k] = [(offset + pref, pref_cost)] + [(offset + s, sec_cost) for s in secs]
    return routes


def twopool(m: int = 1, C=24.0, B=90.0) -> SystemConfig:
    N = [28, 32]
    daily = [6.25, 6.25]
    return SystemConfig(
        N=N,
        arrivals=epoch_profile(daily, m),
        mu=[0.25, 0.25],
        discharge_cdf=discharge_cdf(2, m),
        routes=[[(1, B)], [(0, B)]],
        holding_cost=[C, C],
        name="twopool-midnight" if m == 1 else f"twopool-{m}epoch",
        notes="Two-pool instance: N=(28,32), daily rates 6.25, mu=0.25."
        + ("" if m == 1 else " " + SYNTHETIC_NOTE),
    )


def fivepool(balanced: bool = False, B=(30.0, 35.0), C=6.0, m: int = 8) -> SystemConfig:
    N = [63] * 5 if balanced else [60, 64, 67, 62, 62]
    routes = _department(0, B)
    return SystemConfig(
        N=N,
        arrivals=epoch_profile(split_rate(70.0, N), m),
        mu=[0.25] * 5,
        discharge_cdf=discharge_cdf(5, m),
        routes=[routes[i] for i in range(5)],
        holding_cost=[C] * 5,
        name="fivepool-balanced" if balanced else "fivepool-unbalanced",
        notes=SYNTHETIC_NOTE,
    )


def _tenpool_routes(offset, B):
    """VIP block at ``offset``, regular block at ``offset + 5``; VIP may cross to regular."""
    b1, b2, b3, b4 = B
    vip = _department(offset, (b1, b2))
    reg = _department(offset + 5, (b1, b2))
    for k, (pref, secs) in FIVE_POOL_ROUTES.items():
        r = offset + 5
        vip[offset + k] = vip[offset + k] + [(r + k, b3), (r + pref, b3)] + [(r + s, b4) for s in secs]
    routes = dict(vip)
    routes.update(reg)
    return routes


def tenpool(B=(25.0, 30.0, 35.0, 40.0), C=(7.0, 6.0), m: int = 8) -> SystemConfig:
    N = [39, 43, 46, 41, 41, 81, 85, 88, 83, 83]
    daily = np.concatenate([split_rate(50.0, N[:5]), split_rate(90.0, N[5:])])
    routes = _tenpool_routes(0, B)
    return SystemConfig(
        N=N,
        arrivals=epoch_profile(daily, m),
        mu=[0.25] * 10,
        discharge_cdf=discharge_cdf(10, m),
        routes=[routes[i] for i in range(10)],
        holding_cost=[C[0]] * 5 + [C[1]] * 5,
        name="tenpool",
        notes="Pools 0-4 VIP, 5-9 regular. " + SYNTHETIC_NOTE,
    )


def twentypool(B=(25.0, 30.0, 35.0, 49.0, 40.0, 45.0, 50.0, 55.0), C=(7.0, 6.0), m: int = 8) -> SystemConfig:
    """Two ten-pool hospitals.

    Within-hospital routes use ``B[0:4]``.  Every within-hospital route (and the
    primary pool) is mirrored to the same pool of the other hospital, costed
    ``B[4]`` for the primary counterpart and ``B[k + 4]`` for a route costed ``B[k]``.
    """
    N = [32, 36, 39, 34, 34, 74, 78, 81, 76, 76, 46, 50, 53, 48, 48, 88, 92, 95, 90, 90]
    daily = np.concatenate([
        split_rate(50.0, N[0:5]), split_rate(90.0, N[5:10]),
        split_rate(50.0, N[10:15]), split_rate(90.0, N[15:20]),
    ])
    within = B[:4]
    cross = dict(zip(within, B[4:]))
    routes = {}
    for hosp in (0, 10):
        other = 10 - hosp
        base = _tenpool_routes(hosp, within)
        for i, r in base.items():
            mirrored = [(i - hosp + other, B[4])] + [(to - hosp + other, cross[c]) for to, c in r]
            routes[i] = r + mirrored
    return SystemConfig(
        N=N,
        arrivals=epoch_profile(daily, m),
        mu=[0.25] * 20,
        discharge_cdf=discharge_cdf(20, m),
        routes=[routes[i] for i in range(20)],
        holding_cost=([C[0]] * 5 + [C[1]] * 5) * 2,
        name="twentypool" if B[3] == 49.0 else "twentypool-b40",
        notes="Hospital 1 = pools 0-9, hospital 2 = pools 10-19 (VIP first in each). " + SYNTHETIC_NOTE,
    )


# Default training profiles: "full" is the large-budget baseline (complete-overflow
# start), "quick" the desk-scale one.  With ~1,000 days per actor the quick profiles
# start from no-overflow and train 30 epochs per iteration.
TRAIN_DEFAULTS = {
    "twopool-midnight": {
        "full": dict(days_per_actor=10000, actors=10, iterations=10, epochs=15, hidden=[10], structure="partially_shared",
                     init_policy="complete_overflow"),
        "quick": dict(days_per_actor=500, actors=4, iterations=15, epochs=15, hidden=[10], structure="partially_shared", delta=1e-6),
    },
    "twopool-8epoch": {
        "full": dict(days_per_actor=10000, actors=10, iterations=10, epochs=15, hidden=[10], structure="partially_shared",
                     init_policy="complete_overflow"),
        "quick": dict(days_per_actor=500, actors=4, iterations=10, epochs=15, hidden=[10], structure="partially_shared", delta=1e-6),
    },
    "fivepool-balanced": {
        "full": dict(days_per_actor=10000, actors=10, iterations=15, epochs=15, hidden=[25], structure="partially_shared",
                     init_policy="complete_overflow"),
        "quick": dict(days_per_actor=1000, actors=4, iterations=10, epochs=30, hidden=[25], structure="partially_shared", delta=1e-6,
                      init_policy="no_overflow"),
    },
    "tenpool": {
        "full": dict(days_per_actor=10000, actors=10, iterations=10, epochs=15, hidden=[34], structure="partially_shared",
                     init_policy="complete_overflow"),
        "quick": dict(days_per_actor=1000, actors=4, iterations=10, epochs=30, hidden=[34], structure="partially_shared", delta=1e-6,
                      init_policy="no_overflow"),
    },
    "twentypool": {
        "full": dict(days_per_actor=10000, actors=10, iterations=10, epochs=15, hidden=[68], structure="partially_shared",
                     init_policy="complete_overflow"),
        "quick": dict(days_per_actor=1000, actors=4, iterations=10, epochs=30, hidden=[68], structure="partially_shared", delta=1e-6,
                      init_policy="no_overflow"),
    },
}
TRAIN_DEFAULTS["fivepool-unbalanced"] = TRAIN_DEFAULTS["fivepool-balanced"]
TRAIN_DEFAULTS["twentypool-b40"] = TRAIN_DEFAULTS["twentypool"]


def build_preset(name: str) -> SystemConfig:
    builders = {
        "twopool-midnight": lambda: twopool(1),
        "twopool-8epoch": lambda: twopool(8, C=3.0, B=90.0),
        "fivepool-balanced": lambda: fivepool(True),
        "fivepool-unbalanced": lambda: fivepool(False),
        "tenpool": tenpool,
        "twentypool": twentypool,
        "twentypool-b40": lambda: twentypool(B=(25.0, 30.0, 35.0, 40.0, 40.0, 45.0, 50.0, 55.0)),
    }
    if name not in builders:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    return builders[name]()


def write_presets(directory=None) -> None:
    directory = Path(directory) if directory else Path(__file__).parent / "presets"
    directory.mkdir(parents=True, exist_ok=True)
    for name in PRESET_NAMES:
        cfg = build_preset(name)
        d = cfg.to_dict()
        d["train"] = TRAIN_DEFAULTS[name]
        d["night_epochs"] = night_epochs(cfg.m)
        (directory / f"{name}.json").write_text(json.dumps(d, indent=1) + "\n")


def preset_document(name: str) -> dict:
    if name not in PRESET_NAMES:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    text = resources.files("overflow_ppo").joinpath("presets", f"{name}.json").read_text()
    return json.loads(text)


def load_preset(name: str) -> SystemConfig:
    return SystemConfig.from_dict(preset_document(name))


if __name__ == "__main__":
    write_presets()
