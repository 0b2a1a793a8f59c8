import numpy as np
import pytest

from dynmatch.core import ActionProfile, MarketState, advance
from dynmatch.da import ConstructedPreferences, is_stable
from dynmatch.mechanisms import (
    EndowmentSchedule,
    Kind,
    MechanismSpec,
    build_endowment_schedule,
    crda_step,
    heda_eligibility,
    hpda_step,
    hpda_truncated,
    offer_bound,
    run_mechanism,
    seq_da_step,
)
from dynmatch.properties import enumerate_action_profiles, random_small_environment, run_profile
from dynmatch.strategic import Scripted


def after(env, offers_and_decisions):
    s = MarketState.initial(env)
    for offers, decisions in offers_and_decisions:
        s = advance(env, s, offers, decisions)
    return s


def test_seq_da_e1(e1):
    s = MarketState.initial(e1)
    assert seq_da_step(e1, s).matching == {0: 0}
    s2 = after(e1, [({0: 0}, {0: False})])
    assert seq_da_step(e1, s2).matching == {0: 1, 1: 0}


def test_seq_da_empty_period(e1):
    s = MarketState(1, np.ones(2, bool), np.ones(2, bool), np.zeros(2, int), -np.ones(2, int))
    assert seq_da_step(e1, s).matching == {}


def test_hpda_truncation_e2(e2):
    s1 = MarketState.initial(e2)
    assert not hpda_truncated(e2, s1, 0)
    s2 = after(e2, [({0: 0}, {0: False})])
    assert offer_bound(e2, s2, 0) == 1.0
    assert hpda_truncated(e2, s2, 0)
    assert hpda_step(e2, s2).matching == {}
    s3 = advance(e2, s2, {}, {})
    assert not hpda_truncated(e2, s3, 0)
    assert hpda_step(e2, s3).matching == {0: 1}


def test_hpda_equals_seq_under_compliance():
    rng = np.random.default_rng(5)
    for _ in range(50):
        env = random_small_environment(rng)
        a = run_mechanism(env, MechanismSpec(Kind.HPDA))
        b = run_mechanism(env, MechanismSpec(Kind.SEQ_DA_HOME))
        assert [r.matching for r in a.periods] == [r.matching for r in b.periods]


def test_crda_e1_after_decline(e1):
    s2 = after(e1, [({0: 0}, {0: False})])
    res = crda_step(e1, s2)
    assert res.notes["matching_phase"] == {1: 0, 0: 1}
    assert res.matching == {1: 0}
    assert res.notes["rotation_children"] == ()
    assert res.notes["rotation_homes"] == (0,)
    assert res.notes["truncated_children"] == (1,)


def test_crda_without_prior_offers_is_child_da(e1):
    s = MarketState.initial(e1)
    assert crda_step(e1, s).matching == {0: 0}


def test_hpda_and_crda_compliance_counts_match():
    rng = np.random.default_rng(8)
    for _ in range(60):
        env = random_small_environment(rng)
        a = run_mechanism(env, MechanismSpec(Kind.HPDA))
        b = run_mechanism(env, MechanismSpec(Kind.CRDA))
        assert [len(r.matching) for r in a.periods] == [len(r.matching) for r in b.periods]
        assert [r.active_homes for r in a.periods] == [r.active_homes for r in b.periods]
        p = env.prefs
        for rec in b.periods:
            prefs = ConstructedPreferences(p.home_observed, p.child_utility)
            assert is_stable(rec.matching, prefs, rec.active_homes, rec.active_children)[0]


def test_hpda_never_beats_last_offer_and_crda_rotation_improves():
    rng = np.random.default_rng(9)
    for _ in range(40):
        env = random_small_environment(rng, 5, 5, 4)
        w = env.prefs.wait_cost_home
        V = env.prefs.home_observed
        U = env.prefs.child_utility
        for kind in (Kind.HPDA, Kind.CRDA):
            spec = MechanismSpec(kind)
            for a in enumerate_action_profiles(env, spec, max_profiles=256, samples=32):
                hist = run_profile(env, spec, a)
                last: dict[int, float] = {}
                for rec in hist.periods:
                    for h, c in rec.matching.items():
                        value = V[h, c] - (rec.t - env.homes[h].arrival) * w
                        if kind is Kind.HPDA and h in last:
                            assert value <= last[h] + 1e-12
                        last[h] = value
                    if kind is Kind.CRDA and "rotation_children" in rec.notes:
                        first = {c: h for h, c in rec.notes["matching_phase"].items()}
                        final = {c: h for h, c in rec.matching.items()}
                        for c in rec.notes["rotation_children"]:
                            before = U[c, first[c]] if c in first else 0.0
                            now = U[c, final[c]] if c in final else 0.0
                            assert now >= before


def test_build_endowment_schedule():
    s = build_endowment_schedule(100, 4, 25, 4, 6)
    assert s.intervals[:4] == ((75, 100), (50, 75), (25, 50), (0, 25))
    assert s.intervals[4] == (-4, 0)
    assert s.floor == -8
    assert len(build_endowment_schedule(100, 4, 25, 4, 1)) == 1
    with pytest.raises(ValueError):
        build_endowment_schedule(100, 0, 25, 4, 6)
    with pytest.raises(ValueError):
        build_endowment_schedule(100, 4, -1, 4, 6)


def test_schedule_membership():
    s = EndowmentSchedule(((75, 100), (50, 75)), 50)
    assert s.contains(0, 80) and not s.contains(0, 70)
    assert s.contains(0, 100)
    assert s.contains(1, 50) and not s.contains(1, 75)
    assert s.contains(5, 50) and not s.contains(5, 49)
    with pytest.raises(ValueError):
        EndowmentSchedule(((50, 75), (60, 100)), 50)


def test_heda_eligibility_and_e3(e3):
    sched = EndowmentSchedule(((1.5, 2.0), (0.5, 1.5)), 0.5)
    spec = MechanismSpec(Kind.HEDA, sched)
    s1 = MarketState.initial(e3)
    assert not heda_eligibility(e3, s1, 0, sched)[0]  # V(c1) = 1 is below E_0
    hist = run_mechanism(e3, spec)
    assert hist.period(1).matching == {}
    # V^2(c1) = 1/2 lies in [1/2, 3/2); V^2(c2) = 3/2 does not.
    assert hist.period(2).matching == {0: 0}


def test_heda_offers_in_endowment():
    rng = np.random.default_rng(10)
    for _ in range(40):
        env = random_small_environment(rng)
        for kind in (Kind.HEDA, Kind.HEDA_STAR):
            spec = MechanismSpec.for_environment(kind, env)
            hist = run_mechanism(env, spec)
            for rec in hist.periods:
                for h, c in rec.matching.items():
                    i = rec.t - env.homes[h].arrival
                    v = env.prefs.home_observed[h, c]
                    value = v if kind is Kind.HEDA_STAR else v - i * env.prefs.wait_cost_home
                    assert spec.schedule.contains(i, value)
                    assert env.prefs.observed_acceptable[h, c]


def test_spec_validation(e1):
    with pytest.raises(ValueError):
        MechanismSpec(Kind.HEDA)
    with pytest.raises(ValueError):
        MechanismSpec(Kind.HPDA, EndowmentSchedule(((0, 1),), 0))
    assert MechanismSpec.for_environment("HEDAstar", e1).schedule is not None


def test_replay_is_deterministic():
    rng = np.random.default_rng(12)
    env = random_small_environment(rng)
    for kind in Kind:
        spec = MechanismSpec.for_environment(kind, env)
        a = ActionProfile({(0, 1): False})
        h1, h2 = run_mechanism(env, spec, Scripted(a)), run_mechanism(env, spec, Scripted(a))
        assert [(r.matching, r.decisions) for r in h1.periods] == [(r.matching, r.decisions) for r in h2.periods]


def test_scripted_hpda_e2_offers(e2):
    hist = run_mechanism(e2, MechanismSpec(Kind.HPDA), Scripted(ActionProfile(default=False)))
    assert [r.t for r in hist.periods if r.matching] == [1, 3]


def test_unacceptable_offers_always_declined():
    rng = np.random.default_rng(13)
    for _ in range(20):
        env = random_small_environment(rng)
        p = env.prefs
        noisy = p.with_observed(np.abs(p.home_true) + 0.25, np.ones_like(p.true_acceptable))
        env2 = env.with_prefs(noisy)
        hist = run_mechanism(env2, MechanismSpec(Kind.SEQ_DA_HOME))
        for rec in hist.periods:
            for h, c in rec.matching.items():
                if not p.true_acceptable[h, c]:
                    assert rec.decisions[h] is False
