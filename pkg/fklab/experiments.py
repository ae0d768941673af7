"""
Experiment runners
Builds boundaries, domains and potentials from an ExperimentConfig,
dispatches to the estimators and collects long-format result rows.
"""
import logging
import math
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Tuple

import numpy as np

from fklab import settings
from fklab.config import EXPERIMENTS, ExperimentConfig, validate_config
from fklab.estimators import (
    crossing_mass_estimate,
    bridge_functional_samples,
    chebyshev_lower_bound,
    decay_rate_fit,
    divergence_growth_fit,
    gaussian_disk_mass,
    harmonic_exponent_fit,
    occupation_mean_oracle,
    occupation_samples,
    occupation_scaling_fit,
    occupation_step_limit,
    pz_empirical_check,
    Estimate,
)
from fklab.geometry import (
    DomainSpec,
    Orientation,
    PrefractalBoundary,
    export_boundary_csv,
    import_boundary_csv,
    koch_prefractal,
    line_boundary,
    minkowski_fit,
    regularity_probe,
    shell_ratio_admissible,
    slit_boundary,
    verify_boundary,
)
from fklab.potential import PotentialSpec, convolve_potential_gamma, fk_weight, required_n_steps
from fklab.records import RunRecord, result_row, results_frame
from fklab.stochastic import (
    GENERATOR_ID,
    RngKey,
    fixture_digest,
    sample_paths,
    substream,
    transition_density,
    write_path_csv,
)

logger = logging.getLogger(__name__)

Rows = List[Dict[str, Any]]
Runner = Callable[[ExperimentConfig, RngKey, Path], Tuple[Rows, Dict[str, Any]]]

DEFAULT_CONSTANT_STEPS = 100


def build_boundary(config: ExperimentConfig) -> PrefractalBoundary:
    if config.boundary_file:
        return import_boundary_csv(config.boundary_file)
    if config.kind == "koch":
        return koch_prefractal(config.level)
    if config.kind == "line":
        return line_boundary(config.half_width)
    return slit_boundary(config.half_width)


def build_domain(config: ExperimentConfig, boundary: PrefractalBoundary, exterior: bool = False) -> DomainSpec:
    """Half-plane for the line, complement for the slit, snowflake interior or exterior."""
    if config.kind == "line":
        return DomainSpec(boundary, Orientation.INTERIOR_IS_HALFPLANE_UPPER)
    if config.kind == "slit" or exterior:
        return DomainSpec(boundary, Orientation.EXTERIOR)
    return DomainSpec(boundary, Orientation.INTERIOR_IS_BOUNDED)


def boundary_anchor(config: ExperimentConfig) -> np.ndarray:
    """Start point on K: the configured anchor or the origin, which every built-in boundary contains."""
    return np.asarray(config.anchor if config.anchor is not None else (0.0, 0.0), dtype=float)


def potential_spec(config: ExperimentConfig, truncation_a: float) -> PotentialSpec:
    return PotentialSpec(beta=config.beta, c_v=config.c_v, truncation_a=truncation_a,
                         constant_override=config.constant)


def _path_steps(config: ExperimentConfig, horizon: float, truncation_a: float) -> int:
    if config.n_steps:
        return config.n_steps
    if config.constant is not None:
        return DEFAULT_CONSTANT_STEPS
    return required_n_steps(horizon, truncation_a, config.step_resolution)


def _dump_paths(config: ExperimentConfig, rng: RngKey, out_dir: Path, n_steps: int) -> None:
    if config.dump_paths <= 0:
        return
    batch = sample_paths(rng.child("dump"), config.x, config.t, n_steps, config.dump_paths)
    for i in range(len(batch)):
        write_path_csv(batch[i], out_dir / "paths" / f"path_{i:04d}.csv")
    logger.info("dumped %d paths to %s", len(batch), out_dir / "paths")


def _run_geometry(config: ExperimentConfig, rng: RngKey, out_dir: Path):
    rows: Rows = []
    summary: Dict[str, Any] = {}
    boundary = build_boundary(config)
    if config.geometry_mode == "verify":
        problems = verify_boundary(boundary)
        summary["problems"] = problems
        rows.append(result_row("geometry", "invariant_violations", len(problems), "level", boundary.level))
    else:
        summary["boundary_file"] = str(export_boundary_csv(boundary, out_dir / "boundary.csv"))
    rows.append(result_row("geometry", "n_segments", boundary.n_segments, "level", boundary.level))
    rows.append(result_row("geometry", "diameter", boundary.diameter))
    rows.append(result_row("geometry", "resolution", boundary.resolution))

    hi = min(config.scale_max, 0.99 * boundary.diameter)
    report = minkowski_fit(boundary, (config.scale_min, hi))
    rows.append(result_row("geometry", "alpha_box", report.alpha_hat, "n_scales", report.sample_count,
                           ci=report.alpha_ci))
    summary["alpha_box"] = report.alpha_hat

    if config.n_centers > 0:
        lo = max(config.scale_min, 3.0 * boundary.resolution)
        regularity = regularity_probe(boundary, config.n_centers, (lo, min(config.scale_max, 1.0)),
                                      rng.child("regularity"), n_points=config.n_regularity_points)
        rows.append(result_row("geometry", "c1_hat", regularity.c1_hat, n_samples=regularity.sample_count))
        rows.append(result_row("geometry", "c2_hat", regularity.c2_hat, n_samples=regularity.sample_count))
        rows.append(result_row("geometry", "alpha_regularity", regularity.alpha_hat, ci=regularity.alpha_ci))
        admissible = shell_ratio_admissible(regularity, config.a)
        rows.append(result_row("geometry", "shell_ratio_admissible", float(admissible), "a", config.a))
        summary.update(c1_hat=regularity.c1_hat, c2_hat=regularity.c2_hat, admissible=admissible)
    return rows, summary


def _occupation(config: ExperimentConfig, rng: RngKey):
    boundary = build_boundary(config)
    x0 = boundary_anchor(config)
    n_steps = config.n_steps or int(math.ceil(
        config.delta ** 2 / occupation_step_limit(config.a, config.n_max, config.shell_resolution) - 1e-9))
    stats = occupation_samples(boundary, x0, config.delta, config.a, config.n_range, config.n_paths,
                               n_steps, rng.child("occupation"), config.shell_resolution, config.workers)
    return boundary, x0, stats


def _run_occupation(config: ExperimentConfig, rng: RngKey, out_dir: Path):
    boundary, x0, stats = _occupation(config, rng)
    rows: Rows = []
    for n in stats.shells:
        samples = stats.samples[n]
        estimate = Estimate.from_samples(samples)
        mean = stats.mean_hat[n]
        oracle = occupation_mean_oracle(boundary, x0, config.delta, config.a, n)
        rows.append(result_row("occupation", "mean_hat", mean, "n", n, estimate.stderr, len(samples)))
        rows.append(result_row("occupation", "second_moment_hat", stats.second_moment_hat[n], "n", n,
                               n_samples=len(samples)))
        rows.append(result_row("occupation", "b_n", stats.b_n[n], "n", n))
        rows.append(result_row("occupation", "oracle_mean", oracle, "n", n))
        rows.append(result_row("occupation", "mean_over_oracle", mean / oracle if oracle > 0 else math.nan, "n", n))
        moment_ratio = stats.second_moment_hat[n] / mean ** 2 if mean > 0 else math.nan
        rows.append(result_row("occupation", "second_over_mean_squared", moment_ratio, "n", n))
    summary: Dict[str, Any] = {"n_steps": stats.n_steps}
    positive = {n: m for n, m in stats.mean_hat.items() if m > 0}
    if len(positive) >= 2:
        fit = occupation_scaling_fit(config.a, positive)
        rows.append(result_row("occupation", "scaling_slope", fit.slope, "expected", 2 - boundary.nominal_alpha,
                               fit.slope_stderr, ci=fit.slope_ci95))
        summary["scaling_slope"] = fit.slope
    return rows, summary


def _run_pz(config: ExperimentConfig, rng: RngKey, out_dir: Path):
    _, _, stats = _occupation(config, rng)
    records = pz_empirical_check(stats, config.theta)
    rows: Rows = []
    for n, record in records.items():
        count = len(stats.samples[n])
        rows.append(result_row("pz", "empirical_frac", record.empirical_frac, "n", n, n_samples=count))
        rows.append(result_row("pz", "bound", record.bound, "n", n))
        rows.append(result_row("pz", "passed", float(record.passed), "n", n))
    summary = {"all_passed": all(r.passed for r in records.values()),
               "reliable": all(r.reliable for r in records.values())}
    return rows, summary


def _run_divergence(config: ExperimentConfig, rng: RngKey, out_dir: Path):
    boundary = build_boundary(config)
    fit = divergence_growth_fit(boundary, boundary_anchor(config), config.delta, config.beta, config.a_sweep,
                                config.n_paths, rng.child("divergence"), config.c_v,
                                config.step_resolution, config.workers)
    rows = [result_row("divergence", "median_functional", y, "A", x, n_samples=config.n_paths)
            for x, y, _ in fit.points]
    expected = config.beta + boundary.nominal_alpha - 2.0
    rows.append(result_row("divergence", "growth_slope", fit.slope, "expected", expected,
                           fit.slope_stderr, ci=fit.slope_ci95))
    return rows, {"slope": fit.slope, "expected": expected, "r_squared": fit.r_squared}


def _run_kernel(config: ExperimentConfig, rng: RngKey, out_dir: Path):
    boundary = build_boundary(config)
    spec = potential_spec(config, config.truncation_a)
    n_steps = _path_steps(config, config.t, config.truncation_a)
    _dump_paths(config, rng, out_dir, n_steps)
    free = transition_density(config.x, config.y, config.t)
    rows: Rows = [result_row("kernel", "free_kernel", free, "t", config.t)]
    for label, (a, b) in (("forward", (config.x, config.y)), ("reversed", (config.y, config.x))):
        values = bridge_functional_samples(a, b, config.t, spec, boundary, config.n_paths, n_steps,
                                           rng.child("kernel", 0 if label == "forward" else 1),
                                           config.step_resolution, config.workers)
        estimate = Estimate.from_samples(fk_weight(values), scale=free)
        rows.append(result_row("kernel", f"kernel_{label}", estimate.value, "A", config.truncation_a,
                               estimate.stderr, estimate.n_samples))
        if label == "forward":
            bound = chebyshev_lower_bound(a, b, config.t, values)
            rows.append(result_row("kernel", "lower_bound", bound, "A", config.truncation_a))
    return rows, {"n_steps": n_steps}


def _crossing_sweep(config: ExperimentConfig, rng: RngKey, out_dir: Path, name: str):
    boundary = build_boundary(config)
    domain = build_domain(config, boundary)
    ball = (config.ball_center, config.ball_radius)
    if name == "decay":
        sweep = list(config.a_sweep)
    else:
        sweep = [math.inf if config.constant is not None else config.truncation_a]
    n_steps = _path_steps(config, config.t, max(sweep))
    _dump_paths(config, rng, out_dir, n_steps)
    free_mass = gaussian_disk_mass(config.x, config.ball_center, config.ball_radius, config.t)
    rows: Rows = [result_row(name, "free_mass", free_mass, "t", config.t)]
    masses = []
    for big_a in sweep:
        # one skeleton set for the whole sweep: common random numbers across A
        estimate = crossing_mass_estimate(config.x, ball, config.t, potential_spec(config, big_a), domain,
                                          config.n_paths, n_steps, rng.child("crossing"),
                                          config.step_resolution, config.workers)
        masses.append((big_a, estimate))
        rows.append(result_row(name, "crossing_mass", estimate.value, "A", big_a,
                               estimate.stderr, estimate.n_samples))
    return rows, masses, {"n_steps": n_steps}


def _run_crossing(config: ExperimentConfig, rng: RngKey, out_dir: Path):
    rows, _, summary = _crossing_sweep(config, rng, out_dir, "crossing")
    return rows, summary


def _run_decay(config: ExperimentConfig, rng: RngKey, out_dir: Path):
    rows, masses, summary = _crossing_sweep(config, rng, out_dir, "decay")
    fit = decay_rate_fit(masses)
    sigma_ci = (-fit.slope_ci95[1], -fit.slope_ci95[0])
    rows.append(result_row("decay", "sigma_hat", -fit.slope, "censored", len(fit.censored),
                           fit.slope_stderr, ci=sigma_ci))
    summary.update(sigma_hat=-fit.slope, sigma_ci95=list(sigma_ci), censored=fit.censored)
    return rows, summary


def _run_harmonic(config: ExperimentConfig, rng: RngKey, out_dir: Path):
    boundary = build_boundary(config)
    domain = build_domain(config, boundary, exterior=True)
    fit = harmonic_exponent_fit(domain, (config.ball_center, config.ball_radius), config.distances,
                                config.n_paths, config.eps, rng.child("harmonic"), config.anchor,
                                config.direction, config.max_steps, config.workers)
    rows = [result_row("harmonic", "hit_frequency", y, "d_K", x, n_samples=config.n_paths)
            for x, y, _ in fit.points]
    rows.append(result_row("harmonic", "gamma_hat", fit.slope, "censored", len(fit.censored),
                           fit.slope_stderr, ci=fit.slope_ci95))
    return rows, {"gamma_hat": fit.slope, "r_squared": fit.r_squared}


def _run_positivity(config: ExperimentConfig, rng: RngKey, out_dir: Path):
    boundary = build_boundary(config)
    spec = PotentialSpec(beta=config.beta, c_v=config.c_v, constant_override=config.constant)
    verdict = convolve_potential_gamma(spec, boundary, config.x, config.t, config.mesh_levels, config.a)
    rows = [result_row("positivity", "shell_term", term, "m", m) for m, term in enumerate(verdict.terms)]
    rows.append(result_row("positivity", "far_term", verdict.far_term))
    rows.append(result_row("positivity", "growth_per_shell", verdict.growth, "beta", config.beta))
    rows.append(result_row("positivity", "finite", float(verdict.finite), "beta", config.beta))
    if verdict.value is not None:
        rows.append(result_row("positivity", "value", verdict.value, "t", config.t))
    return rows, {"verdict": verdict.verdict, "growth": verdict.growth}


def _run_acceptance(config: ExperimentConfig, rng: RngKey, out_dir: Path):
    from fklab.acceptance import acceptance_suite

    report = acceptance_suite(config.tier, seed=config.seed, workers=config.workers, scratch=out_dir / "scratch")
    rows = [result_row("acceptance", item.name, item.measured, "passed", float(item.passed),
                       n_samples=item.n_samples)
            for item in report.items]
    return rows, report.to_dict()


RUNNERS: Dict[str, Runner] = {
    "geometry": _run_geometry,
    "occupation": _run_occupation,
    "pz": _run_pz,
    "divergence": _run_divergence,
    "kernel": _run_kernel,
    "crossing": _run_crossing,
    "decay": _run_decay,
    "harmonic": _run_harmonic,
    "positivity": _run_positivity,
    "acceptance": _run_acceptance,
}


def provenance(config: ExperimentConfig) -> Dict[str, Any]:
    return {
        "seed": config.seed,
        "generator": GENERATOR_ID,
        "fixture_sha256": fixture_digest(settings.RNG_FIXTURE),
        "workers": config.workers,
        "version": settings.ARTIFACT_VERSION,
    }


def run_experiment(config: ExperimentConfig, write: bool = True) -> RunRecord:
    """Validate, run the named experiment, and write results.csv plus metadata.json."""
    validate_config(config)
    rng = substream(config.seed, [("experiment", EXPERIMENTS.index(config.experiment))])
    out_dir = Path(config.output)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    logger.debug("running %s (seed %d, %d workers)", config.experiment, config.seed, config.workers)
    started = time.perf_counter()
    rows, summary = RUNNERS[config.experiment](config, rng, out_dir)
    wall_time = time.perf_counter() - started
    record = RunRecord(
        config=config,
        results=results_frame(rows),
        wall_time=wall_time,
        provenance=provenance(config),
        summary=summary,
    )
    if write:
        record.write(out_dir)
    logger.debug("%s finished in %.1f s, %d rows", config.experiment, wall_time, len(rows))
    return record
