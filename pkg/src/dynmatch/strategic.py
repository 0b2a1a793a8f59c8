"""Acceptability reports and home decision rules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dynmatch.core import UNACCEPTABLE, ActionProfile, Environment, History, MarketState, advance
from dynmatch.mechanisms import MechanismSpec, step


@dataclass(frozen=True, eq=False)
class Report:
    """``accepts[h, c]`` is True when home ``h`` declares child ``c`` acceptable."""

    accepts: np.ndarray


def truthful_report(true_util: np.ndarray) -> Report:
    return Report(np.asarray(true_util) >= 0)


def observed_from_report(true_util: np.ndarray, report: Report) -> np.ndarray:
    """True utility where the report accepts, the unacceptable sentinel elsewhere."""
    return np.where(report.accepts, true_util, UNACCEPTABLE)


def environment_with_report(env: Environment, h: int, accepts: np.ndarray) -> Environment:
    """Replace home ``h``'s observed row by what its acceptability report reveals."""
    p = env.prefs
    observed = p.home_observed.copy()
    acceptable = p.observed_acceptable.copy()
    row = np.asarray(accepts, dtype=bool)
    observed[h] = np.where(row, p.home_true[h], UNACCEPTABLE)
    acceptable[h] = row & (p.home_true[h] >= 0)
    return env.with_prefs(p.with_observed(observed, acceptable))


# ---------------------------------------------------------------------------
# behaviors


class AlwaysAccept:
    def decide(self, env, spec, state, offers, history) -> dict[int, bool]:
        return dict.fromkeys(offers, True)


@dataclass
class Scripted:
    profile: ActionProfile = field(default_factory=ActionProfile)

    def decide(self, env, spec, state, offers, history) -> dict[int, bool]:
        return {h: self.profile.accepts(h, state.t) for h in offers}


def _true_value(env: Environment, h: int, c: int, t: int) -> float:
    p = env.prefs
    return float(p.home_true[h, c]) - (t - env.homes[h].arrival) * p.wait_cost_home


def best_response_decision(
    env: Environment,
    spec: MechanismSpec,
    state: MarketState,
    offers: dict[int, int],
    h: int,
) -> bool:
    """Accept iff no later offer, reached by declining while everyone else accepts, is worth more.

    Values are true discounted utilities; never being placed is worth the
    waiting cost to the horizon.  The forward path itself follows the
    mechanism, which sees observed utilities.
    """
    p = env.prefs
    c = offers[h]
    if not p.true_acceptable[h, c]:
        return False
    current = _true_value(env, h, c, state.t)
    arrival = env.homes[h].arrival
    w = p.wait_cost_home
    true_row = p.home_true[h]
    ok_row = p.true_acceptable[h]
    true_ok = p.true_acceptable

    def bound(s: MarketState) -> float:
        remaining = ok_row & ~s.accepted_children
        if not remaining.any():
            return -np.inf
        return float(true_row[remaining].max()) - (s.t - arrival) * w

    matching = offers
    s = state
    while True:
        decisions = {k: (k != h) and bool(true_ok[k, v]) for k, v in matching.items()}
        s = advance(env, s, matching, decisions)
        if s.t > env.horizon or bound(s) <= current:
            return True
        matching = step(env, s, spec).matching
        c2 = matching.get(h)
        if c2 is not None and ok_row[c2] and _true_value(env, h, c2, s.t) > current:
            return False


class BestResponseLookahead:
    """Each offered home accepts unless waiting, with all others accepting, pays more.

    Decisions within a period are made independently and applied together.
    """

    def decide(
        self,
        env: Environment,
        spec: MechanismSpec,
        state: MarketState,
        offers: dict[int, int],
        history: History,
    ) -> dict[int, bool]:
        return {h: best_response_decision(env, spec, state, offers, h) for h in sorted(offers)}
