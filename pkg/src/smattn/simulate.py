"""Synthetic event streams: homogeneous Poisson, exponential-kernel Hawkes, drifting preferences."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import SECONDS_PER_DAY, Event
from .errors import ConfigError, DomainError, SimulationError, StationarityError


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def simulate_poisson(rate: float, horizon: float, seed=None) -> np.ndarray:
    """Event times of a homogeneous Poisson process on (0, horizon]."""
    if rate <= 0 or horizon <= 0:
        raise DomainError("rate and horizon must be positive")
    rng = _rng(seed)
    times = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / rate)
        if t > horizon:
            break
        times.append(t)
    return np.array(times)


def simulate_hawkes(mu: float, alpha: float, beta: float, horizon: float, seed=None) -> np.ndarray:
    """Ogata thinning for lambda(t) = mu + sum_i alpha * exp(-beta (t - t_i))."""
    if mu <= 0 or alpha < 0 or beta <= 0 or horizon <= 0:
        raise DomainError("need mu > 0, alpha >= 0, beta > 0, horizon > 0")
    if alpha >= beta:
        raise StationarityError(f"alpha={alpha} >= beta={beta}: process is not stationary")
    rng = _rng(seed)
    times = []
    t = 0.0
    excite = 0.0  # sum_i alpha * exp(-beta (t - t_i)) at the current t
    while True:
        # intensity only decays between events, so its current value bounds the future
        bound = mu + excite
        w = rng.exponential(1.0 / bound)
        t_new = t + w
        if t_new > horizon:
            break
        excite *= math.exp(-beta * w)
        t = t_new
        if rng.uniform() * bound <= mu + excite:
            times.append(t)
            excite += alpha
    return np.array(times)


@dataclass
class Regime:
    start: float
    end: float
    rates: dict[int, float]  # category -> events per day


@dataclass
class SimConfig:
    """Drifting-preference generator.

    Items are split into contiguous equal blocks, one per category. Inside
    each regime window every active category fires as an independent Poisson
    process, and each event picks an item of its category uniformly.
    """

    users: int = 500
    items: int = 30
    categories: int = 6
    horizon: float = 100.0
    regimes: list[Regime] = field(default_factory=lambda: [
        Regime(0.0, 50.0, {0: 0.24, 1: 0.12, 2: 0.06}),
        Regime(50.0, 100.0, {3: 0.024, 4: 0.012, 5: 0.006}),
    ])
    min_events: int = 2
    max_retries: int = 100
    epoch: int = 0  # raw timestamp of simulated time zero

    def __post_init__(self):
        self.regimes = [r if isinstance(r, Regime) else Regime(**r) for r in self.regimes]
        for r in self.regimes:
            r.rates = {int(c): float(v) for c, v in r.rates.items()}
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if self.users < 1 or self.items < 1 or self.categories < 1:
            raise ConfigError("users, items and categories must be positive")
        if self.items < self.categories:
            raise ConfigError("need at least one item per category")
        bounds = [(r.start, r.end) for r in self.regimes]
        if not bounds or bounds[0][0] != 0.0 or bounds[-1][1] != self.horizon or any(
                a[1] != b[0] for a, b in zip(bounds, bounds[1:])) or any(s >= e for s, e in bounds):
            raise ConfigError("regime windows must partition [0, horizon]")
        for r in self.regimes:
            for c, v in r.rates.items():
                if not 0 <= c < self.categories:
                    raise ConfigError(f"category {c} outside [0, {self.categories})")
                if v < 0:
                    raise ConfigError("rates must be >= 0")

    def category_items(self, c: int) -> np.ndarray:
        edges = np.linspace(0, self.items, self.categories + 1).round().astype(int)
        return np.arange(edges[c], edges[c + 1])

    def category_of(self) -> np.ndarray:
        out = np.zeros(self.items, dtype=np.int64)
        for c in range(self.categories):
            out[self.category_items(c)] = c
        return out

    def regime_at(self, t: float) -> int:
        for k, r in enumerate(self.regimes):
            if r.start <= t < r.end:
                return k
        return len(self.regimes) - 1

    @staticmethod
    def from_flat(d: dict) -> "SimConfig":
        """Build from flat keys: regime_bounds, regime_categories, regime_rates."""
        d = dict(d)
        bounds = d.pop("regime_bounds", None)
        cats = d.pop("regime_categories", None)
        rates = d.pop("regime_rates", None)
        d.pop("kind", None)
        if bounds is not None:
            if len(bounds) != len(cats) + 1 or len(cats) != len(rates):
                raise ConfigError("regime_bounds needs one more entry than regime_categories/regime_rates")
            d["regimes"] = [Regime(float(bounds[k]), float(bounds[k + 1]),
                                   {int(c): float(v) for c, v in zip(cats[k], rates[k])})
                            for k in range(len(cats))]
        return SimConfig(**d)


def _user_stream(cfg: SimConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    times, items = [], []
    for r in cfg.regimes:
        for c in sorted(r.rates):
            rate = r.rates[c]
            if rate <= 0:
                continue
            n = rng.poisson(rate * (r.end - r.start))
            ts = rng.uniform(r.start, r.end, n)
            ts = np.where(ts <= 0.0, r.end, ts)  # keep times inside (0, T]
            times.append(ts)
            items.append(rng.choice(cfg.category_items(c), size=n))
    t = np.concatenate(times) if times else np.zeros(0)
    i = np.concatenate(items) if items else np.zeros(0, dtype=np.int64)
    order = np.argsort(t, kind="stable")
    return t[order], i[order].astype(np.int64)


def simulate_drifting_preferences(cfg: SimConfig, seed=0) -> list[Event]:
    """Events for every user, as integer-second timestamps offset by `cfg.epoch`.

    User u draws from its own stream seeded by (seed, u); a user with fewer
    than `min_events` events is redrawn up to `max_retries` times.
    """
    events = []
    width = len(str(cfg.users - 1))
    iwidth = len(str(cfg.items - 1))
    for u in range(cfg.users):
        rng = np.random.default_rng([int(seed), u])
        for _ in range(cfg.max_retries + 1):
            t, items = _user_stream(cfg, rng)
            if t.size >= cfg.min_events:
                break
        else:
            raise SimulationError(f"user {u}: fewer than {cfg.min_events} events after {cfg.max_retries} retries")
        secs = np.ceil(t * SECONDS_PER_DAY).astype(np.int64)
        uid = f"u{u:0{width}d}"
        for s, k in zip(secs, items):
            events.append(Event(uid, f"i{int(k):0{iwidth}d}", int(s) + cfg.epoch))
    return events


def group_map_rows(cfg: SimConfig) -> list[tuple[str, str]]:
    iwidth = len(str(cfg.items - 1))
    cat = cfg.category_of()
    return [(f"i{k:0{iwidth}d}", f"c{int(cat[k])}") for k in range(cfg.items)]
