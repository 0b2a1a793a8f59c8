"""Command-line entry point: simulate, verify, replay and rmse-check."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from dynmatch.core import (
    ActionProfile,
    Environment,
    environment_from_dict,
    realized_home_utility,
    total_child_waiting_cost,
)
from dynmatch.mechanisms import EndowmentSchedule, Kind, MechanismSpec, run_mechanism
from dynmatch.properties import (
    Violation,
    check_patience_free,
    check_strategy_proof,
    run_strategy_proof_sweep,
    run_theorem_sweep,
)
from dynmatch.simulation import (
    ExperimentConfig,
    NoiseSpec,
    average_by_cell,
    empirical_rmse,
    apply_noise,
    monthly_csv,
    run_experiment,
    summary_csv,
)
from dynmatch.strategic import Scripted

log = logging.getLogger("dynmatch")

FIXTURES = ("E1", "E2", "E3")
RMSE_TOLERANCE = 0.05
BIAS_MEAN_TOLERANCE = 0.02


def exact(x: float) -> str:
    return str(Fraction(x).limit_denominator(10**6))


# ---------------------------------------------------------------------------
# fixtures


def fixture_document(name: str) -> dict[str, Any]:
    if name not in FIXTURES:
        raise ValueError(f"unknown fixture {name!r}; choose from {', '.join(FIXTURES)}")
    text = resources.files("dynmatch").joinpath("fixtures", f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_fixture(name: str) -> tuple[Environment, ActionProfile]:
    doc = fixture_document(name)
    env = environment_from_dict(doc)
    declines = {
        (env.home_by_label(d["home"]).id, int(d["period"])): False
        for d in doc.get("script", {}).get("declines", [])
    }
    return env, ActionProfile(declines)


def expected_transcript(name: str, mechanism: str) -> str | None:
    path = resources.files("dynmatch").joinpath("fixtures", "expected", f"{name}_{mechanism}.txt")
    return path.read_text(encoding="utf-8") if path.is_file() else None


def fixture_spec(env: Environment, mechanism: str) -> MechanismSpec:
    kind = Kind(mechanism)
    if kind.endowed:
        # Hand-sized endowments: top band down to 3/4 of the best value, then w_h wide.
        top = float(env.prefs.home_true[env.prefs.true_acceptable].max())
        w = env.prefs.wait_cost_home
        intervals = [(0.75 * top, top)]
        for _ in range(1, env.horizon):
            hi = intervals[-1][0]
            intervals.append((hi - 2 * w, hi))
        return MechanismSpec(kind, EndowmentSchedule(tuple(intervals), intervals[-1][0]))
    return MechanismSpec(kind)


def replay_fixture(name: str, mechanism: str) -> str:
    """Deterministic text transcript of a scripted fixture run plus its incentive checks."""
    env, profile = load_fixture(name)
    spec = fixture_spec(env, mechanism)
    hist = run_mechanism(env, spec, Scripted(profile))
    hl = lambda h: env.homes[h].label  # noqa: E731
    cl = lambda c: env.children[c].label  # noqa: E731

    lines = [f"fixture {name} mechanism {spec.name}"]
    if spec.schedule is not None:
        bands = ", ".join(
            f"[{exact(lo)}, {exact(hi)}{']' if i == 0 else ')'}"
            for i, (lo, hi) in enumerate(spec.schedule.intervals)
        )
        lines.append(f"endowments: {bands}")
    scripted = sorted(profile.actions)
    lines.append(
        "script: "
        + (", ".join(f"{hl(h)} declines at t={t}" for h, t in scripted) if scripted else "all homes accept")
    )
    for rec in hist.periods:
        offers = ", ".join(f"{hl(h)}->{cl(c)}" for h, c in sorted(rec.matching.items())) or "-"
        decisions = ", ".join(
            f"{hl(h)}={'accept' if d else 'decline'}" for h, d in sorted(rec.decisions.items())
        ) or "-"
        truncated = ", ".join(hl(h) for h in rec.notes.get("truncated", ())) or "-"
        lines.append(f"t={rec.t} offers: {offers} | decisions: {decisions} | truncated: {truncated}")
        if "rotation_homes" in rec.notes:
            rc = ", ".join(cl(c) for c in rec.notes["rotation_children"]) or "-"
            rh = ", ".join(hl(h) for h in rec.notes["rotation_homes"]) or "-"
            tc = ", ".join(cl(c) for c in rec.notes["truncated_children"]) or "-"
            lines.append(f"    rotation children: {rc} | rotation homes: {rh} | dropped children: {tc}")
    payoffs = ", ".join(f"{h.label}={exact(realized_home_utility(hist, env, h.id))}" for h in env.homes)
    lines.append(f"home payoffs: {payoffs}")
    lines.append(f"placements: {hist.placements()}")
    lines.append(f"child waiting cost: {exact(total_child_waiting_cost(hist, env))}")

    patience = check_patience_free(env, spec, profile, history=hist)
    if patience:
        for v in _best_per_offer(patience):
            h, c, t2, c2 = v.agents
            lines.append(
                f"patience gain {exact(v.magnitude)}: {hl(h)} offered {cl(c)} at t={v.period}, "
                f"waiting until t={t2} yields {cl(c2)}"
            )
    else:
        lines.append("patience gain: none")
    for h in env.homes:
        sp = check_strategy_proof(env, spec, h.id)
        if sp:
            best = max(sp, key=lambda v: v.magnitude)
            hidden = ", ".join(cl(c) for c in best.agents[1:]) or "none"
            lines.append(f"misreport gain {exact(best.magnitude)}: {h.label} hides {hidden}")
        else:
            lines.append(f"misreport gain: none for {h.label}")
    return "\n".join(lines) + "\n"


def _best_per_offer(violations: list[Violation]) -> list[Violation]:
    best: dict[tuple[int, int], Violation] = {}
    for v in violations:
        key = (v.agents[0], v.period)
        if key not in best or v.magnitude > best[key].magnitude:
            best[key] = v
    return [best[k] for k in sorted(best)]


# ---------------------------------------------------------------------------
# verification suites


def fixture_checks() -> list[dict[str, Any]]:
    """The scripted counterexamples and guarantees on the three fixtures."""
    checks = []

    def record(name: str, ok: bool, detail: str) -> None:
        checks.append({"check": name, "passed": bool(ok), "detail": detail})

    e1, a1 = load_fixture("E1")
    seq = MechanismSpec(Kind.SEQ_DA_HOME)
    gains = [v.magnitude for v in check_patience_free(e1, seq, a1)]
    record("E1 SeqDA-home patience counterexample", gains and max(gains) == 0.5, f"gains={gains}")

    e2, a2 = load_fixture("E2")
    hpda = MechanismSpec(Kind.HPDA)
    hist = run_mechanism(e2, hpda, Scripted(a2))
    offer_periods = [rec.t for rec in hist.periods if rec.matching]
    payoff = realized_home_utility(hist, e2, 0)
    record("E2 HPDA offers at t=1 and t=3", offer_periods == [1, 3], f"periods={offer_periods}")
    record("E2 HPDA payoff after declining", payoff == 1.0, f"payoff={payoff}")
    record("E2 HPDA patience-free", not check_patience_free(e2, hpda, a2), "")

    e3, _ = load_fixture("E3")
    for kind in (Kind.HPDA, Kind.CRDA, Kind.SEQ_DA_HOME):
        sp = check_strategy_proof(e3, MechanismSpec(kind), 0)
        best = max((v.magnitude for v in sp), default=0.0)
        record(f"E3 {kind.value} misreport counterexample", best == 0.5, f"gain={best}")
    heda = fixture_spec(e3, "HEDA")
    record("E3 HEDA strategy-proof", not check_strategy_proof(e3, heda, 0), "")
    return checks


def verify(suite: str, seed: int, budget: int) -> dict[str, Any]:
    if suite == "theorems":
        checks = fixture_checks()
        return {"suite": suite, "passed": all(c["passed"] for c in checks), "checks": checks}
    sweep = run_theorem_sweep(budget, seed)
    sp = run_strategy_proof_sweep(budget, seed)
    violations = [
        {"key": key, "kind": v.kind, "period": v.period, "agents": list(v.agents), "magnitude": v.magnitude}
        for key, vs in sorted(sweep.violations.items())
        for v in vs
    ]
    violations += [
        {"key": f"{m}/strategyProof", "kind": v.kind, "period": v.period, "agents": list(v.agents), "magnitude": v.magnitude}
        for m, vs in sp.items()
        for v in vs
    ]
    found_counterexample = sweep.seq_patience > 0
    return {
        "suite": suite,
        "seed": seed,
        "environments": sweep.environments,
        "profiles": sweep.profiles,
        "seq_da_patience_counterexamples": sweep.seq_patience,
        "violations": violations,
        "passed": not violations and found_counterexample,
    }


# ---------------------------------------------------------------------------
# noise calibration


def rmse_check(specs: Sequence[NoiseSpec], pairs: int, seed: int, v_bar: float = 100.0) -> list[dict[str, Any]]:
    side = int(np.ceil(np.sqrt(pairs)))
    rng = np.random.default_rng(seed)
    ages = rng.uniform(0, 12, side)
    true = v_bar - v_bar * (ages / 18.0) ** 2 + rng.normal(0, v_bar / 10, (side, side))
    true = np.maximum(true, 0.0)
    rows = []
    for i, spec in enumerate(specs):
        observed, ok = apply_noise(true, spec, seed + 1 + i, v_bar)
        rmse = empirical_rmse(true, observed, ok)
        target = spec.k * v_bar
        mean = float(np.mean(observed[ok] - true[ok]))
        passed = abs(rmse - target) <= RMSE_TOLERANCE * target if target else rmse == 0
        if spec.kind == "bias" and target:
            passed = passed and abs(mean + target) <= BIAS_MEAN_TOLERANCE * target
        rows.append({"noise": spec.label, "target": target, "rmse": rmse, "mean_error": mean, "passed": passed})
    return rows


# ---------------------------------------------------------------------------
# argument parsing


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise SystemExit(f"cannot write {path}: {exc}") from exc


def cmd_simulate(args: argparse.Namespace) -> int:
    doc: dict[str, Any] = {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            doc = json.load(f)
    config = ExperimentConfig.from_dict(doc)
    seeds = config.seeds
    if args.seeds:
        seeds = tuple(args.seeds)
    if args.replications:
        seeds = tuple(range(args.seed, args.seed + args.replications))
    config = ExperimentConfig(config.generator, config.mechanisms, config.noise, seeds, config.report_months)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("running %d cells x %d seeds", len(config.noise), len(seeds))
    results = run_experiment(config, jobs=args.jobs)
    cells = average_by_cell(results)
    for (noise, mech), report in cells.items():
        _write(out / f"monthly_{noise}_{mech}.csv", monthly_csv(report))
    _write(out / "summary.csv", summary_csv(cells))
    _write(out / "config.json", json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    print(summary_csv(cells), end="")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    report = verify(args.suite, args.seed, args.budget)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        _write(Path(args.out), text)
    else:
        print(text, end="")
    return 0 if report["passed"] else 1


def cmd_replay(args: argparse.Namespace) -> int:
    text = replay_fixture(args.fixture, args.mechanism)
    print(text, end="")
    expected = expected_transcript(args.fixture, args.mechanism)
    if expected is not None and expected != text:
        print("transcript differs from the stored expectation", file=sys.stderr)
        return 1
    return 0


def cmd_rmse(args: argparse.Namespace) -> int:
    if args.kind:
        specs = [NoiseSpec(args.kind, k) for k in (args.k or [0.1, 0.25, 0.5])]
    else:
        specs = [NoiseSpec(kind, k) for kind in ("bias", "variance") for k in (0.1, 0.25, 0.5)]
    rows = rmse_check(specs, args.pairs, args.seed)
    print("noise,target,rmse,mean_error,passed")
    for r in rows:
        print(f"{r['noise']},{r['target']:.6f},{r['rmse']:.6f},{r['mean_error']:.6f},{r['passed']}")
    return 0 if all(r["passed"] for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynmatch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run an experiment grid and write CSVs")
    sim.add_argument("--config", help="experiment config JSON (defaults if omitted)")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--seeds", type=int, nargs="+", help="explicit replication seeds")
    sim.add_argument("--seed", type=int, default=0, help="first seed when --replications is given")
    sim.add_argument("--replications", type=int, help="number of consecutive seeds")
    sim.add_argument("--jobs", type=int, default=1, help="worker processes")
    sim.set_defaults(func=cmd_simulate)

    ver = sub.add_parser("verify", help="check properties; exit 1 on any violation")
    ver.add_argument("--suite", choices=("theorems", "sweep"), default="theorems")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--budget", type=int, default=200, help="random environments in the sweep")
    ver.add_argument("--out", help="write the JSON report here instead of stdout")
    ver.set_defaults(func=cmd_verify)

    rep = sub.add_parser("replay", help="print a fixture transcript")
    rep.add_argument("--fixture", choices=FIXTURES, required=True)
    rep.add_argument("--mechanism", choices=[k.value for k in Kind], default="HPDA")
    rep.set_defaults(func=cmd_replay)

    rm = sub.add_parser("rmse-check", help="empirical RMSE of the noise specifications")
    rm.add_argument("--kind", choices=("bias", "variance"))
    rm.add_argument("--k", type=float, nargs="+", help="noise sizes as fractions of v_bar")
    rm.add_argument("--pairs", type=int, default=10_000)
    rm.add_argument("--seed", type=int, default=0)
    rm.set_defaults(func=cmd_rmse)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify" and args.budget <= 0:
        raise SystemExit("--budget must be positive")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
