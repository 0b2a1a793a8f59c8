"""Market primitives, market evolution and counterfactual action profiles.

Children and homes are indexed by integer ids equal to their position in the
environment.  A matching for one period is a ``dict`` mapping home id to child
id; agents missing from the dict are matched to themselves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

Matching = dict[int, int]

UNACCEPTABLE = -1.0


@dataclass(frozen=True)
class Child:
    id: int
    arrival: int
    age: float = 0.0
    high_needs: bool = False
    name: str = ""

    def __post_init__(self) -> None:
        if not 0.0 <= self.age <= 18.0:
            raise ValueError(f"child {self.id}: age {self.age} outside [0, 18]")

    @property
    def label(self) -> str:
        return self.name or f"c{self.id}"


@dataclass(frozen=True)
class Home:
    id: int
    arrival: int
    accepts_high_needs: bool = True
    name: str = ""

    @property
    def label(self) -> str:
        return self.name or f"h{self.id}"


@dataclass(frozen=True, eq=False)
class PreferenceTable:
    """Cardinal utilities for every (child, home) pair.

    ``child_utility[c, h]`` is the matchmaker's U_c(h).  ``home_true[h, c]`` is the
    home's true utility and ``home_observed[h, c]`` is what the matchmaker sees.
    Acceptability of the observed table is carried separately in
    ``observed_acceptable`` so that estimator noise can move a utility estimate
    below zero without the matchmaker forgetting what the home reported.
    """

    child_utility: np.ndarray
    home_true: np.ndarray
    home_observed: np.ndarray
    wait_cost_child: float
    wait_cost_home: float
    observed_acceptable: np.ndarray | None = None

    def __post_init__(self) -> None:
        n_c, n_h = self.child_utility.shape
        if self.home_true.shape != (n_h, n_c) or self.home_observed.shape != (n_h, n_c):
            raise ValueError("home utility tables must have shape (n_homes, n_children)")
        if self.wait_cost_child <= 0 or self.wait_cost_home <= 0:
            raise ValueError("waiting costs must be positive")
        if self.observed_acceptable is None:
            object.__setattr__(self, "observed_acceptable", self.home_observed >= 0)
        elif self.observed_acceptable.shape != (n_h, n_c):
            raise ValueError("observed_acceptable has the wrong shape")

    @property
    def n_children(self) -> int:
        return self.child_utility.shape[0]

    @property
    def n_homes(self) -> int:
        return self.child_utility.shape[1]

    @cached_property
    def child_acceptable(self) -> np.ndarray:
        return self.child_utility >= 0

    @cached_property
    def true_acceptable(self) -> np.ndarray:
        return self.home_true >= 0

    # Strict orders: descending utility, ties broken toward the lower id.
    @cached_property
    def child_order(self) -> np.ndarray:
        return _descending_order(self.child_utility)

    @cached_property
    def child_rank(self) -> np.ndarray:
        return _ranks(self.child_order)

    @cached_property
    def home_order(self) -> np.ndarray:
        return _descending_order(self.home_observed)

    @cached_property
    def home_rank(self) -> np.ndarray:
        return _ranks(self.home_order)

    def with_observed(
        self, observed: np.ndarray, acceptable: np.ndarray | None = None
    ) -> PreferenceTable:
        return PreferenceTable(
            child_utility=self.child_utility,
            home_true=self.home_true,
            home_observed=observed,
            wait_cost_child=self.wait_cost_child,
            wait_cost_home=self.wait_cost_home,
            observed_acceptable=acceptable,
        )


def _descending_order(values: np.ndarray) -> np.ndarray:
    if values.size == 0:
        return np.zeros(values.shape, dtype=np.int64)
    return np.argsort(-values, axis=1, kind="stable")


def _ranks(order: np.ndarray) -> np.ndarray:
    ranks = np.empty_like(order)
    if order.size:
        rows = np.arange(order.shape[0])[:, None]
        ranks[rows, order] = np.arange(order.shape[1])[None, :]
    return ranks


@dataclass(frozen=True, eq=False)
class Environment:
    horizon: int
    children: tuple[Child, ...]
    homes: tuple[Home, ...]
    prefs: PreferenceTable

    def __post_init__(self) -> None:
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")
        for i, c in enumerate(self.children):
            if c.id != i:
                raise ValueError(f"child ids must equal their position (got {c.id} at {i})")
            if not 1 <= c.arrival <= max(self.horizon, 1):
                raise ValueError(f"child {c.label} arrives outside [1, T]")
        for i, h in enumerate(self.homes):
            if h.id != i:
                raise ValueError(f"home ids must equal their position (got {h.id} at {i})")
            if not 1 <= h.arrival <= max(self.horizon, 1):
                raise ValueError(f"home {h.label} arrives outside [1, T]")
        if (self.prefs.n_children, self.prefs.n_homes) != (len(self.children), len(self.homes)):
            raise ValueError("preference table does not cover every (child, home) pair")

    @property
    def n_children(self) -> int:
        return len(self.children)

    @property
    def n_homes(self) -> int:
        return len(self.homes)

    @cached_property
    def child_arrival(self) -> np.ndarray:
        return np.array([c.arrival for c in self.children], dtype=np.int64)

    @cached_property
    def home_arrival(self) -> np.ndarray:
        return np.array([h.arrival for h in self.homes], dtype=np.int64)

    @property
    def child_arrivals(self) -> dict[int, list[Child]]:
        out: dict[int, list[Child]] = {t: [] for t in range(1, self.horizon + 1)}
        for c in self.children:
            out.setdefault(c.arrival, []).append(c)
        return out

    @property
    def home_arrivals(self) -> dict[int, list[Home]]:
        out: dict[int, list[Home]] = {t: [] for t in range(1, self.horizon + 1)}
        for h in self.homes:
            out.setdefault(h.arrival, []).append(h)
        return out

    def with_prefs(self, prefs: PreferenceTable) -> Environment:
        return replace(self, prefs=prefs)

    def child_by_label(self, label: str) -> Child:
        for c in self.children:
            if c.label == label:
                return c
        raise KeyError(label)

    def home_by_label(self, label: str) -> Home:
        for h in self.homes:
            if h.label == label:
                return h
        raise KeyError(label)


# ---------------------------------------------------------------------------
# utilities


def _check_pair(env: Environment, h: int, c: int) -> None:
    if not (0 <= h < env.n_homes and 0 <= c < env.n_children):
        raise KeyError(f"unknown (home, child) pair ({h}, {c})")


def discounted_home_utility(
    env: Environment, h: int, c: int, t: int, table: str = "observed"
) -> float:
    """V_h(c) less the waiting cost the home has accrued by period ``t``."""
    _check_pair(env, h, c)
    arrival = env.homes[h].arrival
    if t < arrival:
        raise ValueError(f"period {t} precedes arrival {arrival} of home {h}")
    if table == "observed":
        value = env.prefs.home_observed[h, c]
    elif table == "true":
        value = env.prefs.home_true[h, c]
    else:
        raise ValueError(f"unknown table {table!r}")
    return float(value) - (t - arrival) * env.prefs.wait_cost_home


def discounted_child_utility(env: Environment, c: int, h: int, t: int) -> float:
    _check_pair(env, h, c)
    arrival = env.children[c].arrival
    if t < arrival:
        raise ValueError(f"period {t} precedes arrival {arrival} of child {c}")
    return float(env.prefs.child_utility[c, h]) - (t - arrival) * env.prefs.wait_cost_child


# ---------------------------------------------------------------------------
# market evolution


@dataclass(frozen=True, eq=False)
class MarketState:
    """Everything a mechanism may condition on before running period ``t``.

    ``last_offer_period[h]`` is the most recent period in which ``h`` received an
    offer (0 if never) and ``last_offer_child[h]`` the child offered then.
    """

    t: int
    accepted_children: np.ndarray
    accepted_homes: np.ndarray
    last_offer_period: np.ndarray
    last_offer_child: np.ndarray

    @classmethod
    def initial(cls, env: Environment) -> MarketState:
        return cls(
            t=1,
            accepted_children=np.zeros(env.n_children, dtype=bool),
            accepted_homes=np.zeros(env.n_homes, dtype=bool),
            last_offer_period=np.zeros(env.n_homes, dtype=np.int64),
            last_offer_child=np.full(env.n_homes, -1, dtype=np.int64),
        )

    def active_children_mask(self, env: Environment) -> np.ndarray:
        return (env.child_arrival <= self.t) & ~self.accepted_children

    def active_homes_mask(self, env: Environment) -> np.ndarray:
        return (env.home_arrival <= self.t) & ~self.accepted_homes

    def active_children(self, env: Environment) -> np.ndarray:
        return np.flatnonzero(self.active_children_mask(env))

    def active_homes(self, env: Environment) -> np.ndarray:
        return np.flatnonzero(self.active_homes_mask(env))


def validate_matching(
    matching: Mapping[int, int], children: Iterable[int], homes: Iterable[int]
) -> None:
    """Raise ``ValueError`` unless ``matching`` is one-to-one over the given sets."""
    child_set = set(int(c) for c in children)
    home_set = set(int(h) for h in homes)
    seen: set[int] = set()
    for h, c in matching.items():
        if h not in home_set:
            raise ValueError(f"home {h} is not active")
        if c not in child_set:
            raise ValueError(f"child {c} is not active")
        if c in seen:
            raise ValueError(f"child {c} matched twice")
        seen.add(c)


def advance(
    env: Environment,
    state: MarketState,
    matching: Mapping[int, int],
    decisions: Mapping[int, bool],
) -> MarketState:
    """Apply the homes' accept/decline decisions and move to period ``t + 1``."""
    if set(decisions) != set(matching):
        extra = set(decisions) - set(matching)
        if extra:
            raise ValueError(f"decision supplied for homes without an offer: {sorted(extra)}")
        raise ValueError(f"missing decisions for offered homes: {sorted(set(matching) - set(decisions))}")
    accepted_c = state.accepted_children.copy()
    accepted_h = state.accepted_homes.copy()
    last_t = state.last_offer_period.copy()
    last_c = state.last_offer_child.copy()
    for h, c in matching.items():
        last_t[h] = state.t
        last_c[h] = c
        if decisions[h]:
            accepted_h[h] = True
            accepted_c[c] = True
    return MarketState(state.t + 1, accepted_c, accepted_h, last_t, last_c)


@dataclass(frozen=True)
class PeriodRecord:
    t: int
    active_children: tuple[int, ...]
    active_homes: tuple[int, ...]
    matching: dict[int, int]
    decisions: dict[int, bool]
    notes: dict[str, Any] = field(default_factory=dict)


@dataclass
class History:
    periods: list[PeriodRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.periods)

    def period(self, t: int) -> PeriodRecord:
        return self.periods[t - 1]

    def accepted_pairs(self, upto: int | None = None) -> list[tuple[int, int, int]]:
        """(t, home, child) for every accepted offer up to period ``upto``."""
        out = []
        for rec in self.periods:
            if upto is not None and rec.t > upto:
                break
            for h, c in rec.matching.items():
                if rec.decisions.get(h):
                    out.append((rec.t, h, c))
        return out

    def accepted_children(self, upto: int) -> set[int]:
        return {c for _, _, c in self.accepted_pairs(upto)}

    def accepted_homes(self, upto: int) -> set[int]:
        return {h for _, h, _ in self.accepted_pairs(upto)}

    def offers(self, h: int) -> list[tuple[int, int]]:
        return [(rec.t, rec.matching[h]) for rec in self.periods if h in rec.matching]

    def acceptance(self, h: int) -> tuple[int, int] | None:
        for rec in self.periods:
            if h in rec.matching and rec.decisions.get(h):
                return rec.t, rec.matching[h]
        return None

    def placements(self) -> int:
        return len(self.accepted_pairs())


def total_child_waiting_cost(history: History, env: Environment) -> float:
    w_c = env.prefs.wait_cost_child
    total = 0.0
    for rec in history.periods:
        placed = {c for h, c in rec.matching.items() if rec.decisions.get(h)}
        total += w_c * sum(1 for c in rec.active_children if c not in placed)
    return total


def realized_home_utility(
    history: History, env: Environment, h: int, table: str = "true"
) -> float:
    """Match utility minus waiting accrued until acceptance; unmatched waits to T."""
    arrival = env.homes[h].arrival
    acc = history.acceptance(h)
    if acc is None:
        return -(env.horizon - arrival) * env.prefs.wait_cost_home
    t, c = acc
    return discounted_home_utility(env, h, c, t, table)


# ---------------------------------------------------------------------------
# action profiles


@dataclass(frozen=True)
class ActionProfile:
    """Accept/decline intents keyed by (home, period).

    Homes act only where they hold an offer, so only the entries at realized
    offers matter for a given run.  Entries not listed fall back to ``default``.
    """

    actions: Mapping[tuple[int, int], bool] = field(default_factory=dict)
    default: bool = True

    def accepts(self, h: int, t: int) -> bool:
        return self.actions.get((h, t), self.default)

    def with_actions(self, updates: Mapping[tuple[int, int], bool]) -> ActionProfile:
        merged = dict(self.actions)
        merged.update(updates)
        return ActionProfile(merged, self.default)


def counterfactual_profile(a: ActionProfile, h: int, t_prime: int) -> ActionProfile:
    """Home ``h`` declines every offer before ``t_prime`` and accepts at ``t_prime``."""
    updates = {(h, k): False for k in range(1, t_prime)}
    updates[(h, t_prime)] = True
    return a.with_actions(updates)


# ---------------------------------------------------------------------------
# serialization


def _number(x: Any) -> float:
    if isinstance(x, str):
        if "/" in x:
            num, den = x.split("/")
            return float(num) / float(den)
        return float(x)
    return float(x)


def environment_from_dict(doc: Mapping[str, Any]) -> Environment:
    children = tuple(
        Child(
            id=i,
            arrival=int(c["arrival"]),
            age=float(c.get("age", 0.0)),
            high_needs=bool(c.get("high_needs", False)),
            name=str(c.get("name", "")),
        )
        for i, c in enumerate(doc["children"])
    )
    homes = tuple(
        Home(
            id=i,
            arrival=int(h["arrival"]),
            accepts_high_needs=bool(h.get("accepts_high_needs", True)),
            name=str(h.get("name", "")),
        )
        for i, h in enumerate(doc["homes"])
    )
    c_index = {c.label: c.id for c in children}
    h_index = {h.label: h.id for h in homes}

    def table(key: str, rows: dict, cols: dict, default: float) -> np.ndarray:
        out = np.full((len(rows), len(cols)), default, dtype=float)
        for r_label, entries in doc.get(key, {}).items():
            for c_label, value in entries.items():
                out[rows[r_label], cols[c_label]] = _number(value)
        return out

    child_u = table("child_utility", c_index, h_index, UNACCEPTABLE)
    home_u = table("home_utility", h_index, c_index, UNACCEPTABLE)
    observed = table("home_observed_utility", h_index, c_index, UNACCEPTABLE) if "home_observed_utility" in doc else home_u.copy()
    prefs = PreferenceTable(
        child_utility=child_u,
        home_true=home_u,
        home_observed=observed,
        wait_cost_child=_number(doc["wait_cost_child"]),
        wait_cost_home=_number(doc["wait_cost_home"]),
    )
    return Environment(int(doc["horizon"]), children, homes, prefs)


def environment_to_dict(env: Environment) -> dict[str, Any]:
    p = env.prefs
    doc: dict[str, Any] = {
        "horizon": env.horizon,
        "wait_cost_child": p.wait_cost_child,
        "wait_cost_home": p.wait_cost_home,
        "children": [
            {"name": c.label, "arrival": c.arrival, "age": c.age, "high_needs": c.high_needs}
            for c in env.children
        ],
        "homes": [
            {"name": h.label, "arrival": h.arrival, "accepts_high_needs": h.accepts_high_needs}
            for h in env.homes
        ],
        "child_utility": {
            c.label: {h.label: float(p.child_utility[c.id, h.id]) for h in env.homes}
            for c in env.children
        },
        "home_utility": {
            h.label: {c.label: float(p.home_true[h.id, c.id]) for c in env.children}
            for h in env.homes
        },
    }
    if not np.array_equal(p.home_observed, p.home_true):
        doc["home_observed_utility"] = {
            h.label: {c.label: float(p.home_observed[h.id, c.id]) for c in env.children}
            for h in env.homes
        }
    return doc


def load_environment(path: str | Path) -> Environment:
    with open(path, encoding="utf-8") as f:
        return environment_from_dict(json.load(f))


def dump_environment(env: Environment, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(environment_to_dict(env), f, indent=2, sort_keys=True)
        f.write("\n")
