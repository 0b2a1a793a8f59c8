"""Synthetic foster-care markets, estimator noise, metrics and experiment grids."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from dynmatch.core import UNACCEPTABLE, Child, Environment, History, Home, PreferenceTable
from dynmatch.mechanisms import MechanismSpec, run_mechanism
from dynmatch.strategic import BestResponseLookahead

TEEN_AGE = 13.0


@dataclass(frozen=True)
class GeneratorConfig:
    horizon: int = 24
    children_per_month: tuple[int, int] = (15, 20)
    homes_per_month: tuple[int, int] = (12, 15)
    age_mean: float = 8.0
    age_sd: float = 4.0
    p_child_high_needs: float = 1 / 3
    p_home_accepts_high_needs: float = 1 / 5
    eps_mean: float = 0.3
    eps_sd: float = 0.1
    v_bar: float = 100.0
    delta_sd: float = 10.0
    wait_cost_child: float = 14000 / 12
    wait_cost_home: float = 4.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "children_per_month", tuple(self.children_per_month))
        object.__setattr__(self, "homes_per_month", tuple(self.homes_per_month))
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        for lo, hi in (self.children_per_month, self.homes_per_month):
            if not 0 <= lo <= hi:
                raise ValueError("arrival bounds must satisfy 0 <= lo <= hi")
        for p in (self.p_child_high_needs, self.p_home_accepts_high_needs):
            if not 0 <= p <= 1:
                raise ValueError("probabilities must lie in [0, 1]")
        if min(self.age_sd, self.eps_sd, self.delta_sd) <= 0:
            raise ValueError("standard deviations must be positive")
        if self.wait_cost_child <= 0 or self.wait_cost_home <= 0:
            raise ValueError("waiting costs must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> GeneratorConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class NoiseSpec:
    """Estimator error: ``none``, ``bias`` or ``variance`` with size ``k`` as a fraction of v_bar."""

    kind: str = "none"
    k: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("none", "bias", "variance"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.k < 0:
            raise ValueError("noise size must be nonnegative")

    @property
    def label(self) -> str:
        if self.kind == "none" or self.k == 0:
            return "K0"
        return f"{self.kind}{round(self.k * 100):02d}"


# ---------------------------------------------------------------------------
# generation


def home_value(age, delta, v_bar: float = 100.0):
    """Home utility for a needs-compatible child: quadratic age penalty plus a match shock."""
    return v_bar - v_bar * (np.asarray(age) / 18.0) ** 2 + delta


def generate_environment(cfg: GeneratorConfig) -> Environment:
    rng = np.random.default_rng(cfg.seed)
    child_arrival, home_arrival = [], []
    for t in range(1, cfg.horizon + 1):
        child_arrival += [t] * int(rng.integers(cfg.children_per_month[0], cfg.children_per_month[1] + 1))
        home_arrival += [t] * int(rng.integers(cfg.homes_per_month[0], cfg.homes_per_month[1] + 1))
    n_c, n_h = len(child_arrival), len(home_arrival)
    ages = np.clip(rng.normal(cfg.age_mean, cfg.age_sd, n_c), 0.0, 18.0)
    high_needs = rng.random(n_c) < cfg.p_child_high_needs
    accepts_hn = rng.random(n_h) < cfg.p_home_accepts_high_needs

    child_u = np.clip(1.0 - rng.normal(cfg.eps_mean, cfg.eps_sd, (n_c, n_h)), 0.0, 1.0)
    home_u = home_value(ages[None, :], rng.normal(0.0, cfg.delta_sd, (n_h, n_c)), cfg.v_bar)
    home_u[~accepts_hn[:, None] & high_needs[None, :]] = UNACCEPTABLE

    children = tuple(
        Child(i, child_arrival[i], float(ages[i]), bool(high_needs[i])) for i in range(n_c)
    )
    homes = tuple(Home(i, home_arrival[i], bool(accepts_hn[i])) for i in range(n_h))
    prefs = PreferenceTable(
        child_utility=child_u,
        home_true=home_u,
        home_observed=home_u.copy(),
        wait_cost_child=cfg.wait_cost_child,
        wait_cost_home=cfg.wait_cost_home,
    )
    return Environment(cfg.horizon, children, homes, prefs)


def noise_draws(
    shape: tuple[int, int], spec: NoiseSpec, v_bar: float, rng: np.random.Generator
) -> np.ndarray:
    if spec.kind == "none" or spec.k == 0:
        return np.zeros(shape)
    if spec.kind == "bias":
        return rng.normal(-spec.k * v_bar, v_bar / 100, shape)
    return rng.normal(0.0, spec.k * v_bar, shape)


def apply_noise(
    true_util: np.ndarray, spec: NoiseSpec, seed: int, v_bar: float = 100.0
) -> tuple[np.ndarray, np.ndarray]:
    """Observed utilities and the acceptability mask the matchmaker keeps.

    Noise is added to acceptable pairs only; unacceptable pairs stay at the
    sentinel and acceptable pairs stay acceptable even if the estimate is
    negative.
    """
    acceptable = true_util >= 0
    gamma = noise_draws(true_util.shape, spec, v_bar, np.random.default_rng(seed))
    observed = np.where(acceptable, true_util + gamma, true_util)
    return observed, acceptable


def noisy_environment(env: Environment, spec: NoiseSpec, seed: int, v_bar: float = 100.0) -> Environment:
    observed, acceptable = apply_noise(env.prefs.home_true, spec, seed, v_bar)
    return env.with_prefs(env.prefs.with_observed(observed, acceptable))


def empirical_rmse(true_util: np.ndarray, observed_util: np.ndarray, mask: np.ndarray | None = None) -> float:
    diff = np.asarray(true_util, float) - np.asarray(observed_util, float)
    if mask is not None:
        diff = diff[mask]
    if diff.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(diff**2)))


# ---------------------------------------------------------------------------
# metrics

SERIES = (
    "placements",
    "cumulative_placements",
    "waiting_cost",
    "envy_share",
    "waste",
    "teen_placed_pct",
    "high_needs_placed_pct",
    "non_disruption",
)


@dataclass
class MetricsReport:
    months: list[int] = field(default_factory=list)
    placements: list[float] = field(default_factory=list)
    cumulative_placements: list[float] = field(default_factory=list)
    waiting_cost: list[float] = field(default_factory=list)
    envy_share: list[float] = field(default_factory=list)
    waste: list[float] = field(default_factory=list)
    teen_placed_pct: list[float] = field(default_factory=list)
    high_needs_placed_pct: list[float] = field(default_factory=list)
    non_disruption: list[float] = field(default_factory=list)

    def series(self, name: str) -> list[float]:
        return getattr(self, name)

    def average(self, name: str) -> float:
        values = self.series(name)
        return float(np.mean(values)) if values else 0.0

    def aggregates(self) -> dict[str, float]:
        return {name: self.average(name) for name in SERIES}

    @staticmethod
    def mean(reports: Sequence[MetricsReport]) -> MetricsReport:
        if not reports:
            return MetricsReport()
        out = MetricsReport(months=list(reports[0].months))
        for name in SERIES:
            stacked = np.array([r.series(name) for r in reports], dtype=float)
            setattr(out, name, stacked.mean(axis=0).tolist())
        return out


def envious_homes(env: Environment, matching: dict[int, int], accepted: Iterable[int]) -> list[int]:
    """Accepting homes that truly prefer some child offered elsewhere who prefers them back."""
    V = env.prefs.home_true
    U = env.prefs.child_utility
    home_of = {c: h for h, c in matching.items()}
    out = []
    for h in accepted:
        mine = matching[h]
        for c, other in home_of.items():
            if other != h and V[h, c] > V[h, mine] and U[c, h] > U[c, other]:
                out.append(h)
                break
    return out


def compute_metrics(history: History, env: Environment, months: int | None = None) -> MetricsReport:
    """Per-month outcomes, judged with true home utilities."""
    report = MetricsReport()
    w_c = env.prefs.wait_cost_child
    U = env.prefs.child_utility
    teen = np.array([c.age >= TEEN_AGE for c in env.children], dtype=bool)
    hn = np.array([c.high_needs for c in env.children], dtype=bool)
    arrival = env.child_arrival
    cum = envy = teen_placed = hn_placed = 0
    u_sum = 0.0
    for rec in history.periods:
        if months is not None and rec.t > months:
            break
        accepted = [h for h, c in rec.matching.items() if rec.decisions.get(h)]
        placed = [rec.matching[h] for h in accepted]
        cum += len(accepted)
        envy += len(envious_homes(env, rec.matching, accepted))
        teen_placed += int(teen[placed].sum()) if placed else 0
        hn_placed += int(hn[placed].sum()) if placed else 0
        u_sum += float(sum(U[c, h] for h, c in zip(accepted, placed)))
        arrived = arrival <= rec.t
        teen_total = int((teen & arrived).sum())
        hn_total = int((hn & arrived).sum())

        report.months.append(rec.t)
        report.placements.append(float(len(accepted)))
        report.cumulative_placements.append(float(cum))
        report.waiting_cost.append(w_c * (len(rec.active_children) - len(placed)))
        report.envy_share.append(envy / cum if cum else 0.0)
        report.waste.append(float(sum(1 for h in rec.active_homes if h not in rec.matching)))
        report.teen_placed_pct.append(teen_placed / teen_total if teen_total else 0.0)
        report.high_needs_placed_pct.append(hn_placed / hn_total if hn_total else 0.0)
        report.non_disruption.append(u_sum / cum if cum else 0.0)
    return report


# ---------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    mechanisms: tuple[str, ...] = ("SeqDA-home", "HPDA", "CRDA", "HEDA")
    noise: tuple[NoiseSpec, ...] = (NoiseSpec(),)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    report_months: int = 12

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown experiment fields: {sorted(unknown)}")
        kwargs: dict = {}
        if "generator" in doc:
            kwargs["generator"] = GeneratorConfig.from_dict(doc["generator"])
        if "mechanisms" in doc:
            kwargs["mechanisms"] = tuple(doc["mechanisms"])
        if "noise" in doc:
            kwargs["noise"] = tuple(NoiseSpec(n.get("kind", "none"), float(n.get("k", 0.0))) for n in doc["noise"])
        if "seeds" in doc:
            kwargs["seeds"] = tuple(int(s) for s in doc["seeds"])
        if "report_months" in doc:
            kwargs["report_months"] = int(doc["report_months"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "generator": asdict(self.generator),
            "mechanisms": list(self.mechanisms),
            "noise": [asdict(n) for n in self.noise],
            "seeds": list(self.seeds),
            "report_months": self.report_months,
        }


@dataclass
class RunResult:
    mechanism: str
    noise: NoiseSpec
    seed: int
    report: MetricsReport


def market_for(cfg: GeneratorConfig, noise: NoiseSpec, seed: int) -> Environment:
    """The shared market of one replication: same draws for every mechanism."""
    env = generate_environment(GeneratorConfig(**{**asdict(cfg), "seed": seed}))
    noise_seed = int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    return noisy_environment(env, noise, noise_seed, cfg.v_bar)


def run_replication(
    cfg: GeneratorConfig, noise: NoiseSpec, seed: int, mechanisms: Sequence[str], report_months: int
) -> list[RunResult]:
    env = market_for(cfg, noise, seed)
    out = []
    for kind in mechanisms:
        spec = MechanismSpec.for_environment(kind, env)
        hist = run_mechanism(env, spec, BestResponseLookahead(), stop_after=report_months)
        out.append(RunResult(kind, noise, seed, compute_metrics(hist, env, report_months)))
    return out


def _replication_task(args: tuple) -> list[RunResult]:
    return run_replication(*args)


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> list[RunResult]:
    """All (noise, seed) replications; results ordered by noise, seed, mechanism."""
    tasks = [
        (config.generator, noise, seed, config.mechanisms, config.report_months)
        for noise in config.noise
        for seed in config.seeds
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_replication_task, tasks))
    else:
        chunks = [_replication_task(t) for t in tasks]
    return [r for chunk in chunks for r in chunk]


def average_by_cell(results: Sequence[RunResult]) -> dict[tuple[str, str], MetricsReport]:
    """Mean report per (noise label, mechanism), in first-seen order."""
    groups: dict[tuple[str, str], list[MetricsReport]] = {}
    for r in results:
        groups.setdefault((r.noise.label, r.mechanism), []).append(r.report)
    return {key: MetricsReport.mean(reps) for key, reps in groups.items()}


# ---------------------------------------------------------------------------
# CSV


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def monthly_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["month", *SERIES])
    for i, month in enumerate(report.months):
        writer.writerow([month, *(_fmt(report.series(name)[i]) for name in SERIES)])
    return buf.getvalue()


SUMMARY_ROWS = (
    ("placements", "avg_placements_per_month"),
    ("teen_placed_pct", "avg_teen_placed_pct"),
    ("high_needs_placed_pct", "avg_high_needs_placed_pct"),
    ("waste", "avg_waste_per_month"),
    ("envy_share", "avg_envy_share"),
    ("non_disruption", "avg_non_disruption"),
    ("waiting_cost", "avg_waiting_cost_per_month"),
)


def summary_csv(cells: dict[tuple[str, str], MetricsReport]) -> str:
    """Table layout: one row per (metric, mechanism), one column per noise cell."""
    noise_labels = list(dict.fromkeys(k[0] for k in cells))
    mechanisms = list(dict.fromkeys(k[1] for k in cells))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "mechanism", *noise_labels])
    for name, label in SUMMARY_ROWS:
        for mech in mechanisms:
            row = [label, mech]
            for noise in noise_labels:
                rep = cells.get((noise, mech))
                row.append(_fmt(rep.average(name)) if rep is not None else "")
            writer.writerow(row)
    return buf.getvalue()
