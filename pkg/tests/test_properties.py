import numpy as np

from dynmatch.core import ActionProfile, Child, Environment, Home, PreferenceTable
from dynmatch.da import ConstructedPreferences, run_da
from dynmatch.mechanisms import Kind, MechanismSpec, run_mechanism
from dynmatch.properties import (
    check_accept_first_dominant,
    check_h_perfect_condition,
    check_individually_rational,
    check_justified_envy_free,
    check_non_wasteful,
    check_patience_free,
    check_strategy_proof,
    enumerate_action_profiles,
    random_small_environment,
)


def test_envy_free_da_and_e1(e1):
    p = e1.prefs
    m = run_da([0, 1], [0, 1], ConstructedPreferences(p.home_observed, p.child_utility))
    assert check_justified_envy_free(e1, m, [0, 1], [0, 1]) == []
    # under the other pairing both (c1, h2) and (c2, h1) block
    v = check_justified_envy_free(e1, {0: 0, 1: 1}, [0, 1], [0, 1])
    assert [x.agents for x in v] == [(0, 1), (1, 0)]


def test_envy_modes(e2):
    assert check_justified_envy_free(e2, {}, [0, 1], [0], "allowUnmatchedChild") == []
    v = check_justified_envy_free(e2, {}, [0, 1], [0], "allowUnmatchedHome")
    assert v == []  # no child holds an offer
    v = check_justified_envy_free(e2, {0: 0}, [0, 1], [0], "allowUnmatchedChild")
    assert [x.agents for x in v] == [(1, 0)]


def test_individual_rationality(e1):
    assert check_individually_rational(e1, {0: 1, 1: 0}) == []
    assert check_individually_rational(e1, {}) == []
    prefs = PreferenceTable(np.ones((1, 1)), -np.ones((1, 1)), -np.ones((1, 1)), 1.0, 1.0)
    env = Environment(1, (Child(0, 1),), (Home(0, 1),), prefs)
    assert len(check_individually_rational(env, {0: 0})) == 1


def test_patience_examples(e1, e2):
    v = check_patience_free(e1, MechanismSpec(Kind.SEQ_DA_HOME), ActionProfile({(0, 1): False}))
    assert [x.magnitude for x in v] == [0.5]
    hpda = MechanismSpec(Kind.HPDA)
    for a in enumerate_action_profiles(e2, hpda):
        assert check_patience_free(e2, hpda, a) == []
    one = Environment(1, e1.children[:1], e1.homes[:1], PreferenceTable(
        e1.prefs.child_utility[:1, :1], e1.prefs.home_true[:1, :1], e1.prefs.home_observed[:1, :1], 2.0, 0.5))
    assert check_patience_free(one, MechanismSpec(Kind.SEQ_DA_HOME), ActionProfile(default=False)) == []


def test_patience_true_table_mode(e2):
    p = e2.prefs
    obs = p.home_observed.copy()
    obs[0, 1] = 1.2  # matchmaker underestimates c2
    env = e2.with_prefs(p.with_observed(obs))
    a = ActionProfile({(0, 1): False})
    spec = MechanismSpec(Kind.HPDA)
    assert check_patience_free(env, spec, a) == []
    # t=2: observed 1.2 - 1/2 <= 1 so no truncation; truly c2 is worth 3/2 then
    assert [x.magnitude for x in check_patience_free(env, spec, a, table="true")] == [0.5]


def test_non_wasteful(e2):
    hpda = MechanismSpec(Kind.HPDA)
    assert check_non_wasteful(e2, hpda) == []
    strict = check_non_wasteful(e2, hpda, strict=True)
    assert strict and {v.period for v in strict} == {2}
    prefs = PreferenceTable(-np.ones((2, 2)), -np.ones((2, 2)), -np.ones((2, 2)), 1.0, 1.0)
    env = Environment(2, (Child(0, 1), Child(1, 2)), (Home(0, 1), Home(1, 1)), prefs)
    assert check_non_wasteful(env, hpda) == [] and check_non_wasteful(env, hpda, strict=True) == []


def test_seq_da_strictly_non_wasteful():
    rng = np.random.default_rng(31)
    for _ in range(40):
        env = random_small_environment(rng)
        assert check_non_wasteful(env, MechanismSpec(Kind.SEQ_DA_HOME), strict=True) == []


def test_accept_first(e1, e2):
    assert check_accept_first_dominant(e2, MechanismSpec(Kind.HPDA), 0) == []
    v = check_accept_first_dominant(e1, MechanismSpec(Kind.SEQ_DA_HOME), 0)
    assert v and max(x.magnitude for x in v) == 0.5


def test_accept_first_sweep():
    rng = np.random.default_rng(32)
    for _ in range(20):
        env = random_small_environment(rng, 4, 3, 3)
        for kind in ("HPDA", "CRDA", "HEDA"):
            spec = MechanismSpec.for_environment(kind, env)
            for h in range(env.n_homes):
                assert check_accept_first_dominant(env, spec, h, samples=16) == []


def test_strategy_proof_single_pair():
    prefs = PreferenceTable(np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)), 1.0, 0.5)
    env = Environment(2, (Child(0, 1),), (Home(0, 1),), prefs)
    for kind in ("HPDA", "CRDA", "HEDA", "SeqDA-home"):
        assert check_strategy_proof(env, MechanismSpec.for_environment(kind, env), 0) == []


def test_h_perfect():
    prefs = ConstructedPreferences(np.ones((3, 2)), np.ones((2, 3)))
    assert check_h_perfect_condition([0, 1, 2], [], prefs)
    assert check_h_perfect_condition([0, 1, 2], [0, 1], prefs)
    assert not check_h_perfect_condition([], [0], prefs)


def test_profile_enumeration_guard(e1):
    spec = MechanismSpec(Kind.SEQ_DA_HOME)
    full = enumerate_action_profiles(e1, spec)
    # accept at t=1 leaves one offer at t=2 (2 paths); declining leaves two (4 paths)
    assert len(full) == 6
    sampled = enumerate_action_profiles(e1, spec, max_profiles=2, samples=50, seed=1)
    assert 1 <= len(sampled) <= len(full)


def test_realized_paths_cover_profiles(e1):
    spec = MechanismSpec(Kind.SEQ_DA_HOME)
    paths = {
        tuple((r.t, tuple(sorted(r.decisions.items()))) for r in run_mechanism(e1, spec, _S(a)).periods)
        for a in enumerate_action_profiles(e1, spec)
    }
    assert len(paths) == len(enumerate_action_profiles(e1, spec))


class _S:
    def __init__(self, a):
        self.a = a

    def decide(self, env, spec, state, offers, history):
        return {h: self.a.accepts(h, state.t) for h in offers}
