"""Dynamic placement mechanisms as per-period step functions.

Every step reads the market through a :class:`MarketState` (active sets plus
each home's most recent offer) and the environment's preference table, using
observed home utilities and exact child utilities.  ``run_mechanism`` drives
the period loop and asks a behavior object for the homes' decisions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Protocol

import numpy as np

from dynmatch.core import Environment, History, MarketState, PeriodRecord, advance
from dynmatch.da import ConstructedPreferences, run_da


class Kind(str, Enum):
    SEQ_DA_HOME = "SeqDA-home"
    SEQ_DA_CHILD = "SeqDA-child"
    HPDA = "HPDA"
    CRDA = "CRDA"
    HEDA = "HEDA"
    HEDA_STAR = "HEDAstar"

    @property
    def endowed(self) -> bool:
        return self in (Kind.HEDA, Kind.HEDA_STAR)


@dataclass(frozen=True)
class EndowmentSchedule:
    """Descending utility intervals indexed by a home's months in the market.

    Interval ``i`` is ``[lo, hi)``, except the first which also contains its
    upper end.  Homes older than the schedule are endowed with ``{floor}``.
    """

    intervals: tuple[tuple[float, float], ...]
    floor: float

    def __post_init__(self) -> None:
        for lo, hi in self.intervals:
            if not lo < hi:
                raise ValueError(f"empty interval [{lo}, {hi})")
        for (lo, _), (_, hi_next) in zip(self.intervals, self.intervals[1:]):
            if lo < hi_next:
                raise ValueError("intervals must be disjoint and strictly descending")

    def __len__(self) -> int:
        return len(self.intervals)

    def contains(self, i: int, values: np.ndarray | float) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if i >= len(self.intervals):
            return values == self.floor
        lo, hi = self.intervals[i]
        if i == 0:
            return (values >= lo) & (values <= hi)
        return (values >= lo) & (values < hi)


def build_endowment_schedule(
    max_u: float,
    w_h: float,
    coarse_width: float,
    coarse_count: int,
    horizon: int,
) -> EndowmentSchedule:
    """Coarse bands of ``coarse_width`` below ``max_u``, then bands of width ``w_h``.

    One interval per month of the horizon.
    """
    if coarse_width <= 0 or w_h <= 0:
        raise ValueError("interval widths must be positive")
    if coarse_count < 0 or horizon < 1:
        raise ValueError("need coarse_count >= 0 and horizon >= 1")
    bottom = max_u - coarse_count * coarse_width
    if abs(bottom) <= 1e-9 * max(1.0, abs(max_u)):
        bottom = 0.0
    if bottom > 0:
        raise ValueError("coarse intervals must reach down to zero")
    intervals = []
    for i in range(horizon):
        if i < coarse_count:
            hi = max_u - i * coarse_width
            lo = bottom if i == coarse_count - 1 else max_u - (i + 1) * coarse_width
        else:
            j = i - coarse_count
            hi = bottom - j * w_h
            lo = bottom - (j + 1) * w_h
        intervals.append((lo, hi))
    return EndowmentSchedule(tuple(intervals), floor=intervals[-1][0])


def default_schedule(env: Environment, coarse_count: int = 4) -> EndowmentSchedule:
    """Quarter-width coarse bands under the largest observed acceptable utility."""
    p = env.prefs
    ok = p.observed_acceptable
    max_u = float(p.home_observed[ok].max()) if ok.any() else 1.0
    max_u = max(max_u, 1e-9)
    return build_endowment_schedule(
        max_u, p.wait_cost_home, max_u / coarse_count, coarse_count, max(env.horizon, 1)
    )


@dataclass(frozen=True)
class MechanismSpec:
    kind: Kind
    schedule: EndowmentSchedule | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind.endowed and self.schedule is None:
            raise ValueError(f"{self.kind.value} needs an endowment schedule")
        if not self.kind.endowed and self.schedule is not None:
            raise ValueError(f"{self.kind.value} takes no endowment schedule")

    @classmethod
    def for_environment(cls, kind: Kind | str, env: Environment) -> MechanismSpec:
        kind = Kind(kind)
        return cls(kind, default_schedule(env) if kind.endowed else None)

    @property
    def name(self) -> str:
        return self.kind.value


@dataclass
class StepResult:
    matching: dict[int, int]
    notes: dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# helpers


def _home_proposing(env: Environment, proposer_ok: np.ndarray | None = None) -> ConstructedPreferences:
    p = env.prefs
    return ConstructedPreferences(
        p.home_observed,
        p.child_utility,
        p.observed_acceptable if proposer_ok is None else proposer_ok,
        p.child_acceptable,
        proposer_order=p.home_order,
        receiver_rank=p.child_rank,
    )


def _child_proposing(env: Environment) -> ConstructedPreferences:
    p = env.prefs
    return ConstructedPreferences(
        p.child_utility,
        p.home_observed,
        p.child_acceptable,
        p.observed_acceptable,
        proposer_order=p.child_order,
        receiver_rank=p.home_rank,
    )


def _discounted(value: np.ndarray | float, t: int | np.ndarray, arrival, w: float):
    return value - (t - arrival) * w


def offer_bound(env: Environment, state: MarketState, h: int) -> float | None:
    """Discounted observed value of ``h``'s most recent offer, if it had one."""
    k = int(state.last_offer_period[h])
    if k == 0:
        return None
    c = int(state.last_offer_child[h])
    return float(
        _discounted(env.prefs.home_observed[h, c], k, env.homes[h].arrival, env.prefs.wait_cost_home)
    )


# ---------------------------------------------------------------------------
# steps


def seq_da_step(env: Environment, state: MarketState, child_proposing: bool = False) -> StepResult:
    children = state.active_children(env)
    homes = state.active_homes(env)
    if child_proposing:
        m = run_da(children, homes, _child_proposing(env))
        return StepResult({h: c for c, h in m.items()})
    return StepResult(run_da(homes, children, _home_proposing(env)))


def hpda_truncated(env: Environment, state: MarketState, h: int) -> bool:
    """Whether ``h`` could now get a better discounted match than its last rejected offer."""
    if state.t <= 1:
        return False
    bound = offer_bound(env, state, h)
    if bound is None:
        return False
    p = env.prefs
    cand = state.active_children_mask(env) & p.child_acceptable[:, h] & p.observed_acceptable[h]
    if not cand.any():
        return False
    best = float(p.home_observed[h, cand].max())
    return _discounted(best, state.t, env.homes[h].arrival, p.wait_cost_home) > bound


def hpda_step(env: Environment, state: MarketState) -> StepResult:
    children = state.active_children(env)
    homes = state.active_homes(env)
    truncated = [int(h) for h in homes if hpda_truncated(env, state, int(h))]
    ok = env.prefs.observed_acceptable
    if truncated:
        ok = ok.copy()
        ok[truncated, :] = False
    m = run_da(homes, children, _home_proposing(env, ok))
    return StepResult(m, {"truncated": tuple(truncated)})


def crda_step(env: Environment, state: MarketState) -> StepResult:
    t = state.t
    p = env.prefs
    w = p.wait_cost_home
    children = state.active_children(env)
    homes = state.active_homes(env)
    cp = _child_proposing(env)
    first = run_da(children, homes, cp)  # child -> home
    home_of = dict(first)
    child_of = {h: c for c, h in first.items()}
    if t <= 1:
        return StepResult(child_of, {"matching_phase": dict(child_of)})

    bounds = {int(h): offer_bound(env, state, int(h)) for h in homes}

    def disc(h: int, c: int) -> float:
        return float(_discounted(p.home_observed[h, c], t, env.homes[h].arrival, w))

    trigger = any(
        bounds[h] is not None and disc(h, c) > bounds[h] for h, c in child_of.items()
    )
    if not trigger:
        return StepResult(child_of, {"matching_phase": dict(child_of)})

    home_list = [int(h) for h in homes]
    r_hat = set()
    for c in map(int, children):
        mine = home_of.get(c)
        if mine is None:
            r_hat.add(c)
            continue
        options = [h for h in home_list if p.observed_acceptable[h, c]]
        best_u = max(p.child_utility[c, options]) if options else -np.inf
        if best_u > p.child_utility[c, mine]:
            r_hat.add(c)
        elif bounds[mine] is not None and disc(mine, c) > bounds[mine]:
            r_hat.add(c)
    r_h = {h for h in home_list if h not in child_of or child_of[h] in r_hat}
    constrained = [h for h in r_h if bounds[h] is not None]
    r_c = {
        c
        for c in r_hat
        if all(
            disc(h, c) <= bounds[h]
            for h in constrained
            if p.child_acceptable[c, h] and p.observed_acceptable[h, c]
        )
    }
    rotation = run_da(sorted(r_c), sorted(r_h), cp)
    final = {h: c for h, c in child_of.items() if c not in r_hat}
    final.update({h: c for c, h in rotation.items()})
    notes = {
        "matching_phase": dict(child_of),
        "rotation_children": tuple(sorted(r_c)),
        "rotation_homes": tuple(sorted(r_h)),
        "truncated_children": tuple(sorted(r_hat - r_c)),
    }
    return StepResult(final, notes)


def heda_eligibility(
    env: Environment, state: MarketState, h: int, schedule: EndowmentSchedule, star: bool = False
) -> np.ndarray:
    """Children ``h`` may be offered this period under its endowment."""
    p = env.prefs
    age = state.t - env.homes[h].arrival
    values = p.home_observed[h] if star else p.home_observed[h] - age * p.wait_cost_home
    return schedule.contains(age, values) & p.observed_acceptable[h]


def heda_step(env: Environment, state: MarketState, spec: MechanismSpec) -> StepResult:
    children = state.active_children(env)
    homes = state.active_homes(env)
    star = spec.kind is Kind.HEDA_STAR
    ok = env.prefs.observed_acceptable.copy()
    for h in homes:
        ok[h] &= heda_eligibility(env, state, int(h), spec.schedule, star)
    return StepResult(run_da(homes, children, _home_proposing(env, ok)))


def step(env: Environment, state: MarketState, spec: MechanismSpec) -> StepResult:
    kind = spec.kind
    if kind is Kind.SEQ_DA_HOME:
        return seq_da_step(env, state)
    if kind is Kind.SEQ_DA_CHILD:
        return seq_da_step(env, state, child_proposing=True)
    if kind is Kind.HPDA:
        return hpda_step(env, state)
    if kind is Kind.CRDA:
        return crda_step(env, state)
    return heda_step(env, state, spec)


# ---------------------------------------------------------------------------
# driver


class HomeBehavior(Protocol):
    def decide(
        self,
        env: Environment,
        spec: MechanismSpec,
        state: MarketState,
        offers: dict[int, int],
        history: History,
    ) -> dict[int, bool]: ...


def run_mechanism(
    env: Environment,
    spec: MechanismSpec,
    behavior: HomeBehavior | None = None,
    stop_after: int | None = None,
) -> History:
    """Play the mechanism for periods 1..T (or 1..``stop_after``).

    Homes never accept a child they truly find unacceptable, whatever the
    behavior says.
    """
    history = History()
    state = MarketState.initial(env)
    last = env.horizon if stop_after is None else min(stop_after, env.horizon)
    true_ok = env.prefs.true_acceptable
    for t in range(1, last + 1):
        result = step(env, state, spec)
        offers = result.matching
        if behavior is None:
            decisions = dict.fromkeys(offers, True)
        else:
            decisions = behavior.decide(env, spec, state, offers, history)
        decisions = {h: bool(decisions[h]) and bool(true_ok[h, c]) for h, c in offers.items()}
        history.periods.append(
            PeriodRecord(
                t=t,
                active_children=tuple(int(c) for c in state.active_children(env)),
                active_homes=tuple(int(h) for h in state.active_homes(env)),
                matching=dict(offers),
                decisions=decisions,
                notes=result.notes,
            )
        )
        state = advance(env, state, offers, decisions)
    return history
