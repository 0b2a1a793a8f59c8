"""Executable checks for fairness, efficiency and incentive properties.

Matching-level checks take one period's offers plus the active sets.  Run-level
checks replay a mechanism under action profiles.  Profile sweeps enumerate
every realized accept/decline path when that is small enough and fall back to
seeded random paths otherwise.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from dynmatch.core import (
    ActionProfile,
    Child,
    Environment,
    History,
    Home,
    MarketState,
    PreferenceTable,
    advance,
    counterfactual_profile,
    realized_home_utility,
)
from dynmatch.da import ConstructedPreferences, enumerate_stable
from dynmatch.mechanisms import MechanismSpec, run_mechanism, step
from dynmatch.strategic import AlwaysAccept, Scripted, environment_with_report

MAX_PROFILES = 2**12
ENVY_MODES = ("bothMatched", "allowUnmatchedChild", "allowUnmatchedHome")


@dataclass(frozen=True)
class Violation:
    kind: str
    period: int
    agents: tuple[int, ...]
    magnitude: float
    detail: str = ""


def _home_table(env: Environment, table: str) -> tuple[np.ndarray, np.ndarray]:
    p = env.prefs
    if table == "true":
        return p.home_true, p.true_acceptable
    if table == "observed":
        return p.home_observed, p.observed_acceptable
    raise ValueError(f"unknown utility table {table!r}")


# ---------------------------------------------------------------------------
# one-period checks


def check_justified_envy_free(
    env: Environment,
    matching: Mapping[int, int],
    children: Iterable[int],
    homes: Iterable[int],
    mode: str = "bothMatched",
    period: int = 0,
    table: str = "observed",
) -> list[Violation]:
    """Pairs (c, h) that both strictly prefer each other to their offers.

    ``bothMatched`` only counts agents that hold an offer.  The relaxed modes
    let the child (or the home) of the blocking pair be without an offer, in
    which case any acceptable partner is an improvement.
    """
    if mode not in ENVY_MODES:
        raise ValueError(f"unknown envy mode {mode!r}")
    U = env.prefs.child_utility
    V, v_ok = _home_table(env, table)
    child_of = dict(matching)
    home_of = {c: h for h, c in matching.items()}
    out = []
    for c in children:
        c = int(c)
        mine = home_of.get(c)
        if mine is None and mode != "allowUnmatchedChild":
            continue
        for h in homes:
            h = int(h)
            theirs = child_of.get(h)
            if h == mine or (theirs is None and mode != "allowUnmatchedHome"):
                continue
            if U[c, h] < 0 or not v_ok[h, c]:
                continue
            c_gain = U[c, h] - (U[c, mine] if mine is not None else 0.0)
            h_gain = V[h, c] - (V[h, theirs] if theirs is not None else 0.0)
            c_better = mine is None or U[c, h] > U[c, mine]
            h_better = theirs is None or V[h, c] > V[h, theirs]
            if c_better and h_better:
                out.append(Violation("envy", period, (c, h), float(max(min(c_gain, h_gain), 1e-12)), mode))
    return out


def check_individually_rational(
    env: Environment, matching: Mapping[int, int], period: int = 0, table: str = "observed"
) -> list[Violation]:
    U = env.prefs.child_utility
    V, v_ok = _home_table(env, table)
    out = []
    for h, c in matching.items():
        if U[c, h] < 0 or not v_ok[h, c]:
            worst = min(float(U[c, h]), float(V[h, c]) if v_ok[h, c] else -1.0)
            out.append(Violation("IR", period, (c, h), -worst))
    return out


def idle_pairs(
    env: Environment, matching: Mapping[int, int], children: Iterable[int], homes: Iterable[int]
) -> list[tuple[int, int]]:
    """Mutually acceptable (child, home) pairs where neither side holds an offer."""
    p = env.prefs
    free_h = [int(h) for h in homes if int(h) not in matching]
    matched_c = set(matching.values())
    return [
        (int(c), h)
        for c in children
        if int(c) not in matched_c
        for h in free_h
        if p.child_acceptable[c, h] and p.observed_acceptable[h, c]
    ]


# ---------------------------------------------------------------------------
# action profile sweeps


def enumerate_action_profiles(
    env: Environment,
    spec: MechanismSpec,
    max_profiles: int = MAX_PROFILES,
    samples: int = 256,
    seed: int = 0,
) -> list[ActionProfile]:
    """One profile per realized accept/decline path of the mechanism.

    Every decision not on the path defaults to accept.  Offers of children a
    home truly finds unacceptable are always declined and do not branch.  When
    the tree has more than ``max_profiles`` leaves, ``samples`` random paths are
    drawn instead.
    """
    true_ok = env.prefs.true_acceptable
    leaves: list[ActionProfile] = []

    class _TooMany(Exception):
        pass

    def choices(state: MarketState) -> tuple[dict[int, int], list[int]]:
        offers = step(env, state, spec).matching
        return offers, sorted(h for h, c in offers.items() if true_ok[h, c])

    def dfs(state: MarketState, actions: dict[tuple[int, int], bool]) -> None:
        if state.t > env.horizon:
            leaves.append(ActionProfile(dict(actions)))
            if len(leaves) > max_profiles:
                raise _TooMany
            return
        offers, free = choices(state)
        for bits in itertools.product((True, False), repeat=len(free)):
            decisions = dict.fromkeys(offers, False)
            decisions.update(zip(free, bits))
            nxt = dict(actions)
            nxt.update({(h, state.t): d for h, d in decisions.items()})
            dfs(advance(env, state, offers, decisions), nxt)

    try:
        dfs(MarketState.initial(env), {})
        return leaves
    except _TooMany:
        pass

    rng = np.random.default_rng(seed)
    seen: dict[tuple, ActionProfile] = {}
    for _ in range(samples):
        state = MarketState.initial(env)
        actions: dict[tuple[int, int], bool] = {}
        while state.t <= env.horizon:
            offers, free = choices(state)
            decisions = dict.fromkeys(offers, False)
            decisions.update({h: bool(rng.integers(2)) for h in free})
            actions.update({(h, state.t): d for h, d in decisions.items()})
            state = advance(env, state, offers, decisions)
        seen.setdefault(tuple(sorted(actions.items())), ActionProfile(actions))
    return list(seen.values())


def run_profile(env: Environment, spec: MechanismSpec, profile: ActionProfile) -> History:
    return run_mechanism(env, spec, Scripted(profile))


# ---------------------------------------------------------------------------
# run-level checks


def history_envy(env: Environment, history: History, mode: str = "bothMatched") -> list[Violation]:
    out = []
    for rec in history.periods:
        out += check_justified_envy_free(
            env, rec.matching, rec.active_children, rec.active_homes, mode, rec.t
        )
    return out


def history_ir(env: Environment, history: History) -> list[Violation]:
    out = []
    for rec in history.periods:
        out += check_individually_rational(env, rec.matching, rec.t)
    return out


def check_patience_free(
    env: Environment,
    spec: MechanismSpec,
    profile: ActionProfile,
    table: str = "observed",
    history: History | None = None,
) -> list[Violation]:
    """Offers a home could beat by declining until a later period and accepting then.

    ``table="true"`` measures the same deviation with true utilities, which
    can differ from the mechanism's own (observed) guarantee.
    """
    V, _ = _home_table(env, table)
    w = env.prefs.wait_cost_home
    if history is None:
        history = run_profile(env, spec, profile)
    out = []
    for rec in history.periods:
        for h, c in rec.matching.items():
            arrival = env.homes[h].arrival
            now = V[h, c] - (rec.t - arrival) * w
            for t2 in range(rec.t + 1, env.horizon + 1):
                alt = run_mechanism(env, spec, Scripted(counterfactual_profile(profile, h, t2)), stop_after=t2)
                c2 = alt.period(t2).matching.get(h)
                if c2 is None:
                    continue
                later = V[h, c2] - (t2 - arrival) * w
                if later > now:
                    out.append(Violation("patience", rec.t, (h, c, t2, c2), float(later - now)))
    return out


def check_non_wasteful(
    env: Environment,
    spec: MechanismSpec,
    strict: bool = False,
    profiles: Iterable[ActionProfile] | None = None,
) -> list[Violation]:
    """Idle mutually acceptable pairs, under compliance or across the given profiles."""
    if not strict:
        histories: Iterator[History] = iter([run_mechanism(env, spec, AlwaysAccept())])
    else:
        if profiles is None:
            profiles = enumerate_action_profiles(env, spec)
        histories = (run_profile(env, spec, a) for a in profiles)
    kind = "strictWaste" if strict else "waste"
    out = []
    for hist in histories:
        for rec in hist.periods:
            for c, h in idle_pairs(env, rec.matching, rec.active_children, rec.active_homes):
                out.append(Violation(kind, rec.t, (c, h), 1.0))
    return out


def _plans(env: Environment, h: int) -> list[dict[tuple[int, int], bool]]:
    periods = range(env.homes[h].arrival, env.horizon + 1)
    return [
        dict(zip(((h, t) for t in periods), bits))
        for bits in itertools.product((True, False), repeat=len(periods))
    ]


def _opponent_profiles(
    env: Environment, h: int, max_profiles: int, samples: int, seed: int
) -> list[ActionProfile]:
    keys = [
        (k, t)
        for k in range(env.n_homes)
        if k != h
        for t in range(env.homes[k].arrival, env.horizon + 1)
    ]
    if 2 ** len(keys) <= max_profiles:
        return [ActionProfile(dict(zip(keys, bits))) for bits in itertools.product((True, False), repeat=len(keys))]
    rng = np.random.default_rng(seed)
    out = [ActionProfile()]
    for _ in range(samples - 1):
        out.append(ActionProfile(dict(zip(keys, map(bool, rng.integers(2, size=len(keys)))))))
    return out


def check_accept_first_dominant(
    env: Environment,
    spec: MechanismSpec,
    h: int,
    table: str = "true",
    max_profiles: int = MAX_PROFILES,
    samples: int = 64,
    seed: int = 0,
) -> list[Violation]:
    """Opponent profiles under which some plan of ``h`` beats accepting its first offer."""
    out = []
    plans = _plans(env, h)
    for opp in _opponent_profiles(env, h, max_profiles, samples, seed):
        base = realized_home_utility(run_profile(env, spec, opp.with_actions({(h, t): True for _, t in plans[0]})), env, h, table)
        for plan in plans[1:]:
            got = realized_home_utility(run_profile(env, spec, opp.with_actions(plan)), env, h, table)
            if got > base + 1e-12:
                declined = tuple(t for (_, t), a in plan.items() if not a)
                out.append(Violation("dominance", declined[0], (h,) + declined, float(got - base)))
    return out


def check_strategy_proof(env: Environment, spec: MechanismSpec, h: int) -> list[Violation]:
    """Reports and action plans of ``h`` that beat truthful reporting plus compliance.

    Other homes report truthfully and accept every offer.  Utilities are true
    utilities, and a home never accepts a truly unacceptable child.
    """
    true_row = env.prefs.home_true[h]
    truthful = environment_with_report(env, h, true_row >= 0)
    base = realized_home_utility(run_mechanism(truthful, spec, AlwaysAccept()), env, h)
    out = []
    plans = _plans(env, h)
    for bits in itertools.product((True, False), repeat=env.n_children):
        reported = environment_with_report(env, h, np.array(bits, dtype=bool))
        for plan in plans:
            hist = run_profile(reported, spec, ActionProfile(plan))
            got = realized_home_utility(hist, env, h)
            if got > base + 1e-12:
                hidden = tuple(c for c, b in enumerate(bits) if not b and true_row[c] >= 0)
                out.append(Violation("strategyProof", 0, (h,) + hidden, float(got - base),
                                     f"report={''.join('1' if b else '0' for b in bits)}"))
    return out


def check_h_perfect_condition(
    children: Iterable[int], homes: Iterable[int], prefs: ConstructedPreferences
) -> bool:
    """Whether some stable matching between the sets places every home.

    ``prefs`` has children proposing, as in a child-proposing rotation.
    """
    homes = set(int(h) for h in homes)
    if not homes:
        return True
    stable = enumerate_stable(prefs, proposers=list(children), receivers=sorted(homes))
    return any(homes <= set(m.values()) for m in stable)


# ---------------------------------------------------------------------------
# random small markets


def random_small_environment(
    rng: np.random.Generator,
    max_children: int = 6,
    max_homes: int = 6,
    max_horizon: int = 4,
    p_unacceptable: float = 0.2,
    min_horizon: int = 1,
) -> Environment:
    """Small market with strict preferences on a 1/16 grid.

    Distinct values per agent keep preferences strict; discounted values of
    different periods can still tie, which exercises the tie rules.
    """
    horizon = int(rng.integers(min_horizon, max_horizon + 1))
    n_c = int(rng.integers(1, max_children + 1))
    n_h = int(rng.integers(1, max_homes + 1))
    grid = np.arange(1, 49) / 16.0

    def table(rows: int, cols: int) -> np.ndarray:
        out = np.stack([rng.choice(grid, size=cols, replace=False) for _ in range(rows)])
        out[rng.random((rows, cols)) < p_unacceptable] = -1.0
        return out

    child_u = table(n_c, n_h)
    home_u = table(n_h, n_c)
    prefs = PreferenceTable(
        child_utility=child_u,
        home_true=home_u,
        home_observed=home_u.copy(),
        wait_cost_child=float(rng.choice([0.5, 1.0, 2.0])),
        wait_cost_home=float(rng.choice([0.25, 0.5, 0.75, 1.0])),
    )
    children = tuple(Child(i, int(rng.integers(1, horizon + 1))) for i in range(n_c))
    homes = tuple(Home(i, int(rng.integers(1, horizon + 1))) for i in range(n_h))
    return Environment(horizon, children, homes, prefs)


# ---------------------------------------------------------------------------
# sweeps

# Properties each mechanism guarantees, checked over every enumerated profile.
GUARANTEES: dict[str, tuple[str, ...]] = {
    "SeqDA-home": ("envy:bothMatched", "IR", "strictWaste"),
    "SeqDA-child": ("envy:bothMatched", "IR", "strictWaste"),
    "HPDA": ("envy:bothMatched", "envy:allowUnmatchedChild", "IR", "patience", "waste"),
    "CRDA": ("envy:bothMatched", "envy:allowUnmatchedHome", "IR", "patience", "waste"),
    "HEDA": ("IR", "patience"),
    "HEDAstar": ("IR",),
}


@dataclass
class SweepResult:
    environments: int = 0
    profiles: int = 0
    violations: dict[str, list[Violation]] = field(default_factory=dict)  # "mechanism/property"
    seq_patience: int = 0

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.violations.values())


def sweep_environment(
    env: Environment, mechanisms: Iterable[str], result: SweepResult, max_profiles: int = MAX_PROFILES
) -> None:
    """Check every guaranteed property of each mechanism on one environment."""
    result.environments += 1
    for kind in mechanisms:
        spec = MechanismSpec.for_environment(kind, env)
        wanted = GUARANTEES[kind]
        seq = kind.startswith("SeqDA")
        profiles = enumerate_action_profiles(env, spec, max_profiles)
        result.profiles += len(profiles)
        found: list[Violation] = []
        for a in profiles:
            hist = run_profile(env, spec, a)
            for prop in wanted:
                if prop.startswith("envy:"):
                    found += history_envy(env, hist, prop.split(":", 1)[1])
            if "IR" in wanted:
                found += history_ir(env, hist)
            if "patience" in wanted or seq:
                pv = check_patience_free(env, spec, a, history=hist)
                if seq:
                    result.seq_patience += len(pv)
                else:
                    found += pv
        if "waste" in wanted:
            found += check_non_wasteful(env, spec)
        if "strictWaste" in wanted:
            found += check_non_wasteful(env, spec, strict=True, profiles=profiles)
        for v in found:
            result.violations.setdefault(f"{kind}/{v.kind}", []).append(v)


def run_theorem_sweep(
    n_environments: int,
    seed: int = 0,
    mechanisms: Iterable[str] = ("SeqDA-home", "HPDA", "CRDA", "HEDA"),
    max_children: int = 6,
    max_homes: int = 6,
    max_horizon: int = 4,
) -> SweepResult:
    rng = np.random.default_rng(seed)
    mechanisms = tuple(mechanisms)
    result = SweepResult()
    for _ in range(n_environments):
        env = random_small_environment(rng, max_children, max_homes, max_horizon)
        sweep_environment(env, mechanisms, result)
    return result


def run_strategy_proof_sweep(
    n_environments: int,
    seed: int = 0,
    mechanisms: Iterable[str] = ("HEDA", "HEDAstar"),
) -> dict[str, list[Violation]]:
    """Strategy-proofness on 1-2 home, at most 3 child, T <= 3 markets."""
    rng = np.random.default_rng(seed)
    out: dict[str, list[Violation]] = {m: [] for m in mechanisms}
    for _ in range(n_environments):
        env = random_small_environment(rng, max_children=3, max_homes=2, max_horizon=3)
        for kind in mechanisms:
            spec = MechanismSpec.for_environment(kind, env)
            for h in range(env.n_homes):
                out[kind] += check_strategy_proof(env, spec, h)
    return out
