"""Queueing instance definition, JSON (de)serialization and validation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SystemConfig:
    """A J-class / J-pool periodic overflow system.

    Pools and classes are 0-indexed; pool ``j`` is the primary pool of class ``j``.
    ``arrivals[j, h]`` is the mean number of class-``j`` arrivals between epoch ``h``
    and epoch ``h + 1``.  ``discharge_cdf[j]`` holds the within-day discharge-time
    CDF at the ``m + 1`` epoch boundaries.  ``routes[i]`` lists ``(pool, cost)``
    overflow routes for class ``i`` in priority order (preferred first).
    """

    N: np.ndarray
    arrivals: np.ndarray
    mu: np.ndarray
    discharge_cdf: np.ndarray
    routes: tuple
    holding_cost: np.ndarray
    name: str = "custom"
    notes: str = ""
    _derived: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "N", _frozen(self.N, np.int64))
        object.__setattr__(self, "arrivals", _frozen(np.atleast_2d(self.arrivals), float))
        object.__setattr__(self, "mu", _frozen(self.mu, float))
        object.__setattr__(self, "discharge_cdf", _frozen(np.atleast_2d(self.discharge_cdf), float))
        object.__setattr__(self, "holding_cost", _frozen(self.holding_cost, float))
        routes = tuple(tuple((int(to), float(c)) for to, c in r) for r in self.routes)
        object.__setattr__(self, "routes", routes)

    @property
    def J(self) -> int:
        return len(self.N)

    @property
    def m(self) -> int:
        return self.arrivals.shape[1]

    @property
    def daily_rate(self) -> np.ndarray:
        return self.arrivals.sum(axis=1)

    @property
    def route_mask(self) -> np.ndarray:
        """``route_mask[i, j]`` is True iff class ``i`` may overflow to pool ``j``."""
        if "route_mask" not in self._derived:
            mask = np.zeros((self.J, self.J), dtype=bool)
            for i, r in enumerate(self.routes):
                for to, _ in r:
                    if 0 <= to < self.J:
                        mask[i, to] = True
            mask.setflags(write=False)
            self._derived["route_mask"] = mask
        return self._derived["route_mask"]

    @property
    def overflow_cost(self) -> np.ndarray:
        """J x J matrix of B[i, j]; zero off the route set and on the diagonal."""
        if "overflow_cost" not in self._derived:
            B = np.zeros((self.J, self.J))
            for i, r in enumerate(self.routes):
                for to, c in r:
                    if 0 <= to < self.J:
                        B[i, to] = c
            B.setflags(write=False)
            self._derived["overflow_cost"] = B
        return self._derived["overflow_cost"]

    @property
    def discharge_probs(self) -> np.ndarray:
        """Table ``p[j, h]`` of per-epoch discharge probabilities (column 0 is 0)."""
        if "discharge_probs" not in self._derived:
            F = self.discharge_cdf
            p = np.zeros((self.J, self.m))
            for h in range(1, self.m):
                rem = 1.0 - F[:, h]
                with np.errstate(divide="ignore", invalid="ignore"):
                    p[:, h] = np.where(rem > 0, (F[:, h + 1] - F[:, h]) / rem, 0.0)
            p = np.clip(p, 0.0, 1.0)
            p.setflags(write=False)
            self._derived["discharge_probs"] = p
        return self._derived["discharge_probs"]

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "notes": self.notes,
            "servers": self.N.tolist(),
            "arrivals": self.arrivals.tolist(),
            "daily_discharge_prob": self.mu.tolist(),
            "discharge_cdf": self.discharge_cdf.tolist(),
            "routes": [[{"to": to, "cost": c} for to, c in r] for r in self.routes],
            "holding_cost": self.holding_cost.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema {d.get('schema')!r} (expected {SCHEMA_VERSION})")
        return cls(
            N=d["servers"],
            arrivals=d["arrivals"],
            mu=d["daily_discharge_prob"],
            discharge_cdf=d["discharge_cdf"],
            routes=[[(r["to"], r["cost"]) for r in rr] for rr in d["routes"]],
            holding_cost=d["holding_cost"],
            name=d.get("name", "custom"),
            notes=d.get("notes", ""),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SystemConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "SystemConfig":
        d = dict(
            N=self.N, arrivals=self.arrivals, mu=self.mu, discharge_cdf=self.discharge_cdf,
            routes=self.routes, holding_cost=self.holding_cost, name=self.name, notes=self.notes,
        )
        d.update(changes)
        return SystemConfig(**d)


def validate_config(cfg: SystemConfig) -> list[str]:
    """Return every invariant violation as ``"path: message"``; empty iff usable."""
    out = []
    J = len(cfg.N)
    if J < 1:
        return ["servers: need at least one pool"]
    if cfg.arrivals.ndim != 2 or cfg.arrivals.shape[0] != J:
        out.append(f"arrivals: expected shape (J={J}, m), got {cfg.arrivals.shape}")
        return out
    m = cfg.arrivals.shape[1]
    if m < 1:
        out.append("arrivals: need at least one epoch")
        return out
    for j in range(J):
        if cfg.N[j] < 1:
            out.append(f"servers[{j}]: must be a positive integer, got {cfg.N[j]}")
        for h in range(m):
            if not (cfg.arrivals[j, h] >= 0 and np.isfinite(cfg.arrivals[j, h])):
                out.append(f"arrivals[{j}][{h}]: must be finite and >= 0")
    if cfg.mu.shape != (J,):
        out.append(f"daily_discharge_prob: expected {J} values")
    else:
        for j in range(J):
            if not 0.0 <= cfg.mu[j] <= 1.0:
                out.append(f"daily_discharge_prob[{j}]: {cfg.mu[j]} not in [0, 1]")
    if cfg.holding_cost.shape != (J,):
        out.append(f"holding_cost: expected {J} values")
    elif np.any(cfg.holding_cost < 0):
        for j in np.flatnonzero(cfg.holding_cost < 0):
            out.append(f"holding_cost[{j}]: must be >= 0")
    F = cfg.discharge_cdf
    if F.shape != (J, m + 1):
        out.append(f"discharge_cdf: expected shape ({J}, {m + 1}), got {F.shape}")
    else:
        for j in range(J):
            if abs(F[j, 0]) > 1e-12:
                out.append(f"discharge_cdf[{j}][0]: must be 0")
            if abs(F[j, m] - 1.0) > 1e-12:
                out.append(f"discharge_cdf[{j}][{m}]: final boundary must be 1")
            if m > 1 and F[j, 1] > 1e-12:
                out.append(f"discharge_cdf[{j}][1]: no discharges between midnight and the next epoch")
            for h in range(m):
                if F[j, h + 1] < F[j, h] - 1e-12:
                    out.append(f"discharge_cdf[{j}][{h + 1}]: decreasing between epoch {h} and {h + 1}")
            if np.any(F[j] < -1e-12) or np.any(F[j] > 1 + 1e-12):
                out.append(f"discharge_cdf[{j}]: values must lie in [0, 1]")
    if len(cfg.routes) != J:
        out.append(f"routes: expected {J} route lists, got {len(cfg.routes)}")
    else:
        for i, r in enumerate(cfg.routes):
            seen = set()
            for k, (to, c) in enumerate(r):
                if to == i:
                    out.append(f"routes[{i}][{k}]: class {i} cannot overflow to its own pool")
                elif not 0 <= to < J:
                    out.append(f"routes[{i}][{k}]: pool {to} out of range")
                if to in seen:
                    out.append(f"routes[{i}][{k}]: duplicate route to pool {to}")
                seen.add(to)
                if not (c >= 0 and np.isfinite(c)):
                    out.append(f"routes[{i}][{k}].cost: must be finite and >= 0")
    return out


def check_overflow_costs(cfg: SystemConfig, B: np.ndarray) -> list[str]:
    """Violations for an explicit cost matrix: B[i, j] is defined only on routes."""
    out = []
    mask = cfg.route_mask
    for i in range(cfg.J):
        for j in range(cfg.J):
            if np.isfinite(B[i, j]) and not mask[i, j]:
                out.append(f"overflow_cost[{i}][{j}]: defined for a route not in routes[{i}]")
    return out
