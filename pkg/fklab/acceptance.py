"""
Acceptance suite
Runs every acceptance check at the sample sizes of a tier and collects a
pass/fail table. A failing or crashing check never stops the others.
"""
import logging
import math
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import integrate

from fklab import settings
from fklab.config import KOCH_CENTROID, ExperimentConfig
from fklab.errors import ArgumentError
from fklab.estimators import (
    Estimate,
    crossing_mass_estimate,
    decay_rate_fit,
    divergence_growth_fit,
    harmonic_exponent_fit,
    kernel_bridge_estimate,
    line_occupation_mean,
    occupation_mean_oracle,
    occupation_samples,
    occupation_scaling_fit,
    pz_empirical_check,
)
from fklab.geometry import (
    KOCH_ALPHA,
    DomainSpec,
    Orientation,
    halfplane_domain,
    koch_prefractal,
    line_boundary,
    minkowski_fit,
    required_level,
    slit_boundary,
)
from fklab.potential import DEFAULT_STEP_RESOLUTION, PotentialSpec, convolve_potential_gamma, required_n_steps
from fklab.stochastic import RngKey, sample_bridges, sample_paths, substream, transition_density, verify_fixture

logger = logging.getLogger(__name__)

LINE_X = (0.0, 1.0)
LINE_BALL = ((0.0, -1.0), 0.5)
KOCH_BALL = ((0.5, -1.5), 0.3)


@dataclass(frozen=True)
class TierPlan:
    """Sample sizes of one tier"""
    convention_paths: int
    bridge_paths: int
    constant_paths: int
    occupation_paths: int
    divergence_paths: int
    divergence_delta: float
    divergence_sweep: Tuple[float, ...]
    crossing_paths: int
    crossing_sweep: Tuple[float, ...]
    step_resolution: float
    mesh_levels: int
    walks: int
    distances: Tuple[float, ...]


# "full" runs the published sample sizes and the step rule h <= (1/(10A))²/2;
# "desk" keeps full's statistics but relaxes the step factor to 2 and stops
# the crossing sweep at 64 so it finishes on a workstation.
TIERS: Dict[str, TierPlan] = {
    "fast": TierPlan(
        convention_paths=20000,
        bridge_paths=20000,
        constant_paths=2000,
        occupation_paths=2000,
        divergence_paths=200,
        divergence_delta=0.5,
        divergence_sweep=(4.0, 8.0, 16.0, 32.0),
        crossing_paths=4000,
        crossing_sweep=(4.0, 8.0, 16.0, 32.0),
        step_resolution=2.0,
        mesh_levels=4,
        walks=2000,
        distances=tuple(2.0 ** -k for k in range(3, 8)),
    ),
    "desk": TierPlan(
        convention_paths=100000,
        bridge_paths=100000,
        constant_paths=10000,
        occupation_paths=4000,
        divergence_paths=400,
        divergence_delta=1.0,
        divergence_sweep=(8.0, 16.0, 32.0, 64.0),
        crossing_paths=20000,
        crossing_sweep=(4.0, 8.0, 16.0, 32.0, 64.0),
        step_resolution=2.0,
        mesh_levels=5,
        walks=20000,
        distances=tuple(2.0 ** -k for k in range(3, 8)),
    ),
    "full": TierPlan(
        convention_paths=100000,
        bridge_paths=100000,
        constant_paths=10000,
        occupation_paths=4000,
        divergence_paths=400,
        divergence_delta=1.0,
        divergence_sweep=(8.0, 16.0, 32.0, 64.0),
        crossing_paths=10 ** 6,
        crossing_sweep=(4.0, 8.0, 16.0, 32.0, 64.0, 128.0),
        step_resolution=DEFAULT_STEP_RESOLUTION,
        mesh_levels=5,
        walks=20000,
        distances=tuple(2.0 ** -k for k in range(3, 8)),
    ),
}


def _koch_for(sweep: Tuple[float, ...]):
    """Koch prefractal fine enough for the 1/A support of the largest A."""
    return koch_prefractal(max(6, required_level(1.0 / max(sweep))))


@dataclass
class AcceptanceItem:
    name: str
    measured: float = math.nan
    target: str = ""
    tolerance: str = ""
    passed: bool = False
    error: str = ""
    seconds: float = 0.0
    n_samples: int = 0


@dataclass
class AcceptanceReport:
    tier: str
    seed: int
    workers: int
    items: List[AcceptanceItem] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(item.passed for item in self.items)

    @property
    def failed(self) -> List[str]:
        return [item.name for item in self.items if not item.passed]

    @property
    def executed_fraction(self) -> float:
        if not self.items:
            return 0.0
        return sum(1 for item in self.items if not item.error) / len(self.items)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(item) for item in self.items])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tier": self.tier,
            "seed": self.seed,
            "workers": self.workers,
            "passed": self.passed,
            "failed": self.failed,
            "executed_fraction": self.executed_fraction,
            "items": [asdict(item) for item in self.items],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "AcceptanceReport":
        return cls(
            tier=payload["tier"],
            seed=int(payload["seed"]),
            workers=int(payload["workers"]),
            items=[AcceptanceItem(**item) for item in payload.get("items", [])],
        )


Outcome = Tuple[float, str, str, bool, int]


# --- individual checks --------------------------------------------------------
# Each returns (measured, target, tolerance, passed, n_samples).

def _kernel_convention(plan: TierPlan, rng: RngKey, workers: int, scratch: Path) -> Outcome:
    batch = sample_paths(rng, (0.0, 0.0), 1.0, 1, plan.convention_paths, workers)
    squared = np.sum((batch.points[:, -1] - batch.points[:, 0]) ** 2, axis=1)
    estimate = Estimate.from_samples(squared)
    mass, _ = integrate.dblquad(lambda y, x: transition_density((0.0, 0.0), (x, y), 1.0),
                                -30.0, 30.0, -30.0, 30.0, epsabs=1e-12, epsrel=1e-10)
    passed = abs(estimate.value - 4.0) <= 3.0 * estimate.stderr and abs(mass - 1.0) < 1e-6
    return estimate.value, "E|X_1-X_0|^2 = 4; mass = 1", f"3 stderr ({estimate.stderr:.3g}); 1e-6", passed, estimate.n_samples


def _bridge_marginals(plan: TierPlan, rng: RngKey, workers: int, scratch: Path) -> Outcome:
    batch = sample_bridges(rng, (0.0, 0.0), (0.0, 0.0), 1.0, 2, plan.bridge_paths, workers)
    pinned = bool(np.all(batch.points[:, 0] == 0.0) and np.all(batch.points[:, -1] == 0.0))
    mid = batch.points[:, 1]
    n = len(mid)
    mean_err = float(np.abs(mid.mean(axis=0)).max() / (mid.std(ddof=1) / math.sqrt(n)))
    variance = mid.var(axis=0, ddof=1)
    var_stderr = 0.5 * math.sqrt(2.0 / (n - 1))
    worst_var = float(np.abs(variance - 0.5).max())
    passed = pinned and mean_err <= 3.0 and worst_var <= 3.0 * var_stderr
    return float(variance.mean()), "endpoints exact; mean 0, variance 0.5 at s = 1/2", \
        f"3 stderr ({var_stderr:.3g})", passed, n


def _constant_potential(plan: TierPlan, rng: RngKey, workers: int, scratch: Path) -> Outcome:
    x, y, t = (0.0, 0.0), (1.0, 0.0), 1.0
    boundary = line_boundary(10.0)
    free = transition_density(x, y, t)
    worst = 0.0
    passed = True
    for i, c in enumerate((0.5, 2.0)):
        spec = PotentialSpec(constant_override=c)
        estimate = kernel_bridge_estimate(x, y, t, spec, boundary, plan.constant_paths, 8,
                                          rng.child("c", i), workers=workers)
        expected = math.exp(-c * t) * free
        error = abs(estimate.value - expected)
        worst = max(worst, error / expected)
        passed = passed and error <= max(3.0 * estimate.stderr, 1e-12 * expected)
    return worst, "exp(-ct) p_t(x, y) for c in {0.5, 2}", "3 stderr", passed, plan.constant_paths


def _koch_dimension(plan: TierPlan, rng: RngKey, workers: int, scratch: Path) -> Outcome:
    report = minkowski_fit(koch_prefractal(8), (3.0 ** -7, 3.0 ** -2))
    passed = abs(report.alpha_hat - KOCH_ALPHA) <= 0.05
    return report.alpha_hat, f"{KOCH_ALPHA:.4f}", "0.05", passed, report.sample_count


def _occupation_plan(boundary, plan: TierPlan, rng: RngKey, workers: int):
    delta, a, n_range = 1.0 / 3.0, 1.0 / 3.0, (1, 2)
    n_steps = int(math.ceil(delta ** 2 * 20.0 / a ** (2 * (n_range[1] + 1)) - 1e-9))
    return occupation_samples(boundary, (0.0, 0.0), delta, a, n_range, plan.occupation_paths,
                              n_steps, rng, 20.0, workers)


def _occupation_slope(plan: TierPlan, rng: RngKey, workers: int, scratch: Path) -> Outcome:
    """
    Slope over n = 1..5 fitted on quadrature oracle means. Sampling shell 5
    needs steps below a^12 / 20, so Monte Carlo means are compared with the
    same oracle only on the shells occupation_moments can afford.
    """
    boundary = line_boundary(20.0)
    a = 1.0 / 3.0
    means = {n: occupation_mean_oracle(boundary, (0.0, 0.0), 1.0, a, n) for n in range(1, 6)}
    closed_form = {n: line_occupation_mean(1.0, a, n) for n in means}
    agree = all(abs(means[n] / closed_form[n] - 1.0) < 0.01 for n in means)
    fit = occupation_scaling_fit(a, means)
    passed = agree and abs(fit.slope - 1.0) <= 0.15
    return fit.slope, "d - alpha = 1.0 on oracle E Z_n, n = 1..5 (quadrature, not sampled)", \
        "0.15; oracle within 1% of the 1D reduction", passed, 0


def _occupation_moments(plan: TierPlan, rng: RngKey, workers: int, scratch: Path) -> Outcome:
    boundary = line_boundary(20.0)
    stats = _occupation_plan(boundary, plan, rng, workers)
    worst = 0.0
    passed = True
    for n in stats.shells:
        oracle = occupation_mean_oracle(boundary, (0.0, 0.0), stats.delta, stats.a, n)
        mean = stats.mean_hat[n]
        worst = max(worst, abs(mean / oracle - 1.0))
        moment_ratio = stats.second_moment_hat[n] / mean ** 2 if mean > 0 else math.inf
        passed = passed and abs(mean / oracle - 1.0) <= 0.1 and moment_ratio < 50.0
    return worst, "mean_hat / oracle = 1; E Z^2 / (E Z)^2 < 50", "10%", passed, plan.occupation_paths


def _pz_check(boundary_name: str) -> Callable[..., Outcome]:
    def check(plan: TierPlan, rng: RngKey, workers: int, scratch: Path) -> Outcome:
        boundary = line_boundary(20.0) if boundary_name == "line" else koch_prefractal(6)
        records = pz_empirical_check(_occupation_plan(boundary, plan, rng, workers), 0.5)
        lowest = min(r.empirical_frac for r in records.values())
        passed = lowest >= 0.05 and all(r.passed for r in records.values())
        return lowest, "P(Z_n >= E Z_n / 2) >= 0.05 and >= PZ bound", "3 binomial stderr", passed, plan.occupation_paths
    return check


def _divergence(boundary_name: str, beta: float, expected: Optional[float]) -> Callable[..., Outcome]:
    def check(plan: TierPlan, rng: RngKey, workers: int, scratch: Path) -> Outcome:
        boundary = line_boundary(20.0) if boundary_name == "line" else _koch_for(plan.divergence_sweep)
        fit = divergence_growth_fit(boundary, (0.0, 0.0), plan.divergence_delta, beta,
                                    plan.divergence_sweep, plan.divergence_paths, rng,
                                    step_resolution=plan.step_resolution, workers=workers)
        if expected is None:
            return fit.slope, "slope <= 0.1", "", fit.slope <= 0.1, plan.divergence_paths
        return fit.slope, f"{expected:.3f}", "0.2", abs(fit.slope - expected) <= 0.2, plan.divergence_paths
    return check


def _crossing_masses(boundary_name: str, beta: float, plan: TierPlan, rng: RngKey, workers: int):
    if boundary_name == "line":
        domain = halfplane_domain(20.0)
        x, ball = LINE_X, LINE_BALL
    else:
        domain = DomainSpec(_koch_for(plan.crossing_sweep), Orientation.INTERIOR_IS_BOUNDED)
        x, ball = KOCH_CENTROID, KOCH_BALL
    n_steps = required_n_steps(1.0, max(plan.crossing_sweep), plan.step_resolution)
    masses = []
    for big_a in plan.crossing_sweep:
        spec = PotentialSpec(beta=beta, truncation_a=big_a)
        masses.append((big_a, crossing_mass_estimate(x, ball, 1.0, spec, domain, plan.crossing_paths,
                                                     n_steps, rng, plan.step_resolution, workers)))
    return masses


def _separation(boundary_name: str, beta: float) -> Callable[..., Outcome]:
    def check(plan: TierPlan, rng: RngKey, workers: int, scratch: Path) -> Outcome:
        fit = decay_rate_fit(_crossing_masses(boundary_name, beta, plan, rng, workers))
        sigma = -fit.slope
        passed = fit.slope_ci95[1] < 0 and not fit.censored
        return sigma, "sigma > 0, CI excluding 0", "95% CI", passed, plan.crossing_paths
    return check


def _plateau(boundary_name: str, beta: float) -> Callable[..., Outcome]:
    def check(plan: TierPlan, rng: RngKey, workers: int, scratch: Path) -> Outcome:
        masses = _crossing_masses(boundary_name, beta, plan, rng, workers)
        fit = decay_rate_fit(masses)
        (_, second), (_, top) = masses[-2], masses[-1]
        separated = all(m.ci95[0] > 0 for m in (second, top))
        spread = abs(top.value - second.value) / max(top.value, second.value) if top.value > 0 else math.inf
        passed = fit.slope_ci95[0] <= 0 <= fit.slope_ci95[1] and separated and spread < 0.2
        return -fit.slope, "sigma CI contains 0; top two masses within 20%", "95% CI", passed, plan.crossing_paths
    return check


def _positivity(boundary_name: str, beta: float, finite: bool) -> Callable[..., Outcome]:
    def check(plan: TierPlan, rng: RngKey, workers: int, scratch: Path) -> Outcome:
        if boundary_name == "line":
            boundary, x = line_boundary(20.0), (0.0, 0.5)
        else:
            boundary, x = koch_prefractal(7 if plan.mesh_levels <= 4 else 8), KOCH_CENTROID
        verdict = convolve_potential_gamma(PotentialSpec(beta=beta), boundary, x, 1.0, plan.mesh_levels)
        return verdict.growth, "finite" if finite else "diverging", "Cauchy 1e-3", verdict.finite == finite, 0
    return check


def _harmonic(domain_name: str, target: float, tolerance: Optional[float]) -> Callable[..., Outcome]:
    def check(plan: TierPlan, rng: RngKey, workers: int, scratch: Path) -> Outcome:
        anchor, direction = None, None
        if domain_name == "halfplane":
            domain, ball = halfplane_domain(), ((0.0, 2.0), 0.5)
            anchor, direction = (0.0, 0.0), (0.0, 1.0)
        elif domain_name == "slit":
            domain, ball = DomainSpec(slit_boundary(), Orientation.EXTERIOR), ((3.0, 0.0), 0.5)
            anchor, direction = (0.0, 0.0), (1.0, 0.0)
        else:
            domain, ball = DomainSpec(koch_prefractal(7), Orientation.EXTERIOR), KOCH_BALL
        fit = harmonic_exponent_fit(domain, ball, plan.distances, plan.walks, None, rng,
                                    anchor, direction, workers=workers)
        if tolerance is None:
            return fit.slope, f">= {target}", "", fit.slope >= target, plan.walks
        return fit.slope, f"{target}", f"{tolerance}", abs(fit.slope - target) <= tolerance, plan.walks
    return check


def _reproducibility(plan: TierPlan, rng: RngKey, workers: int, scratch: Path) -> Outcome:
    from fklab.experiments import run_experiment

    outputs = []
    for run in ("first", "second"):
        config = ExperimentConfig(
            experiment="kernel", kind="line", half_width=20.0, x=LINE_X, y=(0.0, -1.0),
            beta=1.5, truncation_a=8.0, step_resolution=plan.step_resolution, n_paths=500,
            seed=rng.seed, workers=workers, output=str(scratch / "reproducibility" / run),
        )
        record = run_experiment(config)
        outputs.append(Path(record.files["results"]).read_bytes())
    same = outputs[0] == outputs[1]
    return float(same), "byte-identical results.csv", "exact", same, 500


def _rng_fixture(plan: TierPlan, rng: RngKey, workers: int, scratch: Path) -> Outcome:
    ok = verify_fixture(settings.RNG_FIXTURE, freeze_missing=False)
    return float(ok), f"reference uniforms in {settings.RNG_FIXTURE}", "exact", ok, 0


CHECKS: List[Tuple[str, Callable[..., Outcome]]] = [
    ("kernel_convention", _kernel_convention),
    ("bridge_marginals", _bridge_marginals),
    ("constant_potential", _constant_potential),
    ("koch_dimension", _koch_dimension),
    ("occupation_slope", _occupation_slope),
    ("occupation_moments", _occupation_moments),
    ("pz_line", _pz_check("line")),
    ("pz_koch", _pz_check("koch")),
    ("divergence_line", _divergence("line", 1.5, 0.5)),
    ("divergence_koch", _divergence("koch", 1.2, 1.2 + KOCH_ALPHA - 2.0)),
    ("divergence_line_subcritical", _divergence("line", 0.5, None)),
    ("separation_line", _separation("line", 1.5)),
    ("separation_koch", _separation("koch", 1.0)),
    ("plateau_line", _plateau("line", 0.5)),
    ("plateau_koch", _plateau("koch", 0.4)),
    ("positivity_line_finite", _positivity("line", 0.5, True)),
    ("positivity_koch_finite", _positivity("koch", 0.3, True)),
    ("positivity_line_diverging", _positivity("line", 1.0, False)),
    ("positivity_koch_diverging", _positivity("koch", 0.8, False)),
    ("harmonic_halfplane", _harmonic("halfplane", 1.0, 0.1)),
    ("harmonic_slit", _harmonic("slit", 0.5, 0.1)),
    ("harmonic_koch_exterior", _harmonic("koch", 0.4, None)),
    ("reproducibility", _reproducibility),
    ("rng_fixture", _rng_fixture),
]


def run_check(name: str, check: Callable[..., Outcome], plan: TierPlan, rng: RngKey,
              workers: int, scratch: Path) -> AcceptanceItem:
    item = AcceptanceItem(name=name)
    started = time.perf_counter()
    try:
        measured, target, tolerance, passed, n_samples = check(plan, rng, workers, scratch)
        item.measured = float(measured)
        item.target = target
        item.tolerance = tolerance
        item.passed = bool(passed)
        item.n_samples = int(n_samples)
    except Exception as exc:
        logger.exception("acceptance check %s failed", name)
        item.error = f"{type(exc).__name__}: {exc}"
    item.seconds = time.perf_counter() - started
    return item


def acceptance_suite(tier: str = "fast", seed: int = 0, workers: int = 1,
                     scratch: Optional[Path] = None, only: Optional[List[str]] = None) -> AcceptanceReport:
    """Every check at the tier's sizes; `only` restricts to the named checks."""
    if tier not in TIERS:
        raise ArgumentError(f"unknown tier {tier!r}; valid: {', '.join(TIERS)}")
    plan = TIERS[tier]
    report = AcceptanceReport(tier=tier, seed=seed, workers=workers)
    with tempfile.TemporaryDirectory() as tmp:
        work = Path(scratch) if scratch is not None else Path(tmp)
        for index, (name, check) in enumerate(CHECKS):
            if only is not None and name not in only:
                continue
            item = run_check(name, check, plan, substream(seed, [("acceptance", index)]), workers, work)
            status = "PASS" if item.passed else ("ERROR" if item.error else "FAIL")
            logger.info("%-28s %s measured=%.4g (%.1f s)", name, status, item.measured, item.seconds)
            report.items.append(item)
    return report
