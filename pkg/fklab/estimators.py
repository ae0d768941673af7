"""
Monte Carlo estimators and fits
Bridge kernel and crossing-mass estimates, occupation times of boundary
shells with Paley-Zygmund checks, and the log-log fits for functional
growth, crossing-mass decay and harmonic exponents.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, special, stats

from fklab.errors import (
    ArgumentError,
    InsufficientScalesError,
    ResolutionError,
    UnreliableRunError,
)
from fklab.geometry import (
    DomainSpec,
    PrefractalBoundary,
    check_resolution,
    contains_interior,
    neighborhood_cells,
    shell_membership,
)
from fklab.parallel import map_chunks, pairwise_mean
from fklab.potential import (
    DEFAULT_STEP_RESOLUTION,
    PotentialSpec,
    cell_quadrature,
    check_step,
    fk_weight,
    quadrature_window,
    required_n_steps,
    skeleton_functionals,
)
from fklab.stochastic import (
    DEFAULT_MAX_STEPS,
    Outcome,
    RngKey,
    bridge_points,
    brownian_points,
    default_eps,
    time_grid,
    transition_density,
    walk_on_spheres_batch,
)

logger = logging.getLogger(__name__)

Z95 = 1.96
DEFAULT_SHELL_RESOLUTION = 20.0
PZ_MIN_SAMPLES = 1000
MAX_TIMEOUT_FRACTION = 1e-3
GEOMETRIC_RTOL = 1e-6

Point = Union[Sequence[float], np.ndarray]
Ball = Tuple[Point, float]


@dataclass
class Estimate:
    value: float
    stderr: float
    n_samples: int

    @property
    def ci95(self) -> Tuple[float, float]:
        return (self.value - Z95 * self.stderr, self.value + Z95 * self.stderr)

    @classmethod
    def from_samples(cls, samples: np.ndarray, scale: float = 1.0) -> "Estimate":
        samples = np.asarray(samples, dtype=float)
        n = len(samples)
        if n == 0:
            raise ArgumentError("an estimate needs at least one sample")
        stderr = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(value=scale * pairwise_mean(samples), stderr=scale * stderr, n_samples=n)


@dataclass
class OccupationStats:
    """Occupation times Z_n of the shells K'_n up to time δ², one column per n"""
    a: float
    delta: float
    n_range: Tuple[int, int]
    samples: Dict[int, np.ndarray]
    b_n: Dict[int, float]
    mean_hat: Dict[int, float]
    second_moment_hat: Dict[int, float]
    n_steps: int = 0

    @property
    def shells(self) -> List[int]:
        return list(range(self.n_range[0], self.n_range[1] + 1))


@dataclass
class PZRecord:
    empirical_frac: float
    bound: float
    passed: bool
    reliable: bool = True


@dataclass
class FitResult:
    slope: float
    intercept: float
    slope_ci95: Tuple[float, float]
    r_squared: float
    points: List[Tuple[float, float, float]]
    slope_stderr: float = float("nan")
    censored: List[float] = field(default_factory=list)


# --- fitting ------------------------------------------------------------------

def weighted_loglog_fit(xs: Sequence[float], ys: Sequence[float],
                        weights: Optional[Sequence[float]] = None) -> FitResult:
    """
    Weighted least squares of log y on log x. Weights are relative; the
    slope interval uses the residual scatter and Student t.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if len(x) < 2 or len(x) != len(y) or len(w) != len(x):
        raise ArgumentError("a log-log fit needs at least two matching (x, y) pairs")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ArgumentError("log-log fits need positive x and y")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ArgumentError("fit weights must be positive and finite")
    lx, ly = np.log(x), np.log(y)
    total = w.sum()
    x_bar = np.sum(w * lx) / total
    y_bar = np.sum(w * ly) / total
    sxx = np.sum(w * (lx - x_bar) ** 2)
    if sxx == 0:
        raise ArgumentError("log-log fit needs at least two distinct x values")
    slope = float(np.sum(w * (lx - x_bar) * (ly - y_bar)) / sxx)
    intercept = float(y_bar - slope * x_bar)
    resid = ly - intercept - slope * lx
    ss_res = float(np.sum(w * resid ** 2))
    ss_tot = float(np.sum(w * (ly - y_bar) ** 2))
    r_squared = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    dof = len(x) - 2
    if dof > 0:
        stderr = math.sqrt(ss_res / dof / sxx)
        half = float(stats.t.ppf(0.975, dof)) * stderr
        ci = (slope - half, slope + half)
    else:
        stderr = float("inf")
        ci = (-math.inf, math.inf)
    return FitResult(
        slope=slope,
        intercept=intercept,
        slope_ci95=ci,
        r_squared=r_squared,
        points=[(float(a), float(b), float(c)) for a, b, c in zip(x, y, w)],
        slope_stderr=stderr,
    )


def _require_geometric(values: Sequence[float], minimum: int, name: str) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if len(values) < minimum:
        raise ArgumentError(f"{name} needs at least {minimum} values, got {len(values)}")
    if np.any(values <= 0):
        raise ArgumentError(f"{name} must be positive")
    ratios = values[1:] / values[:-1]
    if np.any(np.abs(ratios / ratios[0] - 1.0) > GEOMETRIC_RTOL) or abs(ratios[0] - 1.0) < GEOMETRIC_RTOL:
        raise ArgumentError(f"{name} must be a geometric sequence, got {values.tolist()}")
    return values


# --- closed-form oracles -------------------------------------------------------

def gaussian_disk_mass(x: Point, center: Point, radius: float, t: float) -> float:
    """∫_B p_t(x, y) dy for the disk B = B(center, radius)."""
    x = np.asarray(x, dtype=float)
    center = np.asarray(center, dtype=float)
    offset = float(np.sum((x - center) ** 2))
    return float(stats.ncx2.cdf(radius ** 2 / (2.0 * t), 2, offset / (2.0 * t)))


def line_occupation_mean(delta: float, a: float, n: int) -> float:
    """E Z_n from a point of a straight line: ∫_0^δ² P(a^(n+1) < |N(0, 2s)| <= a^n) ds."""
    outer, inner = a ** n, a ** (n + 1)

    def prob(s):
        root = 2.0 * math.sqrt(s)
        return special.erf(outer / root) - special.erf(inner / root)

    value, _ = integrate.quad(prob, 0.0, delta ** 2, limit=200, epsabs=0.0, epsrel=1e-10)
    return float(value)


# --- kernel and crossing estimates ---------------------------------------------

def _bridge_functional_chunk(key: RngKey, count: int, x, y, t, n_steps, spec, boundary):
    if spec.constant_override is not None:
        return np.full(count, spec.constant_override * t)
    points = bridge_points(key.generator(), x, y, t, n_steps, count)
    fine, _ = skeleton_functionals(points, time_grid(t, n_steps), spec, boundary)
    return fine


def _forward_functional_chunk(key: RngKey, count: int, x0, horizon, n_steps, spec, boundary):
    points = brownian_points(key.generator(), x0, horizon, n_steps, count)
    fine, _ = skeleton_functionals(points, time_grid(horizon, n_steps), spec, boundary)
    return fine


def _crossing_chunk(key: RngKey, count: int, x, center, radius, t, n_steps, spec, boundary):
    points = brownian_points(key.generator(), x, t, n_steps, count)
    fine, _ = skeleton_functionals(points, time_grid(t, n_steps), spec, boundary)
    end = points[:, -1]
    inside = np.hypot(end[:, 0] - center[0], end[:, 1] - center[1]) <= radius
    return np.where(inside, fk_weight(fine), 0.0)


def _check_support(spec: PotentialSpec, boundary: PrefractalBoundary) -> None:
    """The prefractal must resolve the 1/A support of a truncated V."""
    if spec.constant_override is None and spec.truncated:
        check_resolution(boundary, spec.support)


def bridge_functional_samples(
    x: Point, y: Point, t: float, spec: PotentialSpec, boundary: PrefractalBoundary,
    n_paths: int, n_steps: int, rng: RngKey,
    step_resolution: float = DEFAULT_STEP_RESOLUTION, workers: int = 1,
) -> np.ndarray:
    """A_V(t) along bridges from x to y."""
    if n_paths < 1:
        raise ArgumentError(f"n_paths must be positive, got {n_paths}")
    check_step(spec, t, n_steps, step_resolution)
    _check_support(spec, boundary)
    return map_chunks(_bridge_functional_chunk, n_paths, rng, n_steps, workers,
                      x=np.asarray(x, dtype=float), y=np.asarray(y, dtype=float), t=t,
                      n_steps=n_steps, spec=spec, boundary=boundary)


def forward_functional_samples(
    x0: Point, horizon: float, spec: PotentialSpec, boundary: PrefractalBoundary,
    n_paths: int, n_steps: int, rng: RngKey,
    step_resolution: float = DEFAULT_STEP_RESOLUTION, workers: int = 1,
) -> np.ndarray:
    """A_V(horizon) along free paths from x0."""
    if n_paths < 1:
        raise ArgumentError(f"n_paths must be positive, got {n_paths}")
    check_step(spec, horizon, n_steps, step_resolution)
    _check_support(spec, boundary)
    return map_chunks(_forward_functional_chunk, n_paths, rng, n_steps, workers,
                      x0=np.asarray(x0, dtype=float), horizon=horizon, n_steps=n_steps,
                      spec=spec, boundary=boundary)


def kernel_bridge_estimate(
    x: Point, y: Point, t: float, spec: PotentialSpec, boundary: PrefractalBoundary,
    n_paths: int, n_steps: int, rng: RngKey,
    step_resolution: float = DEFAULT_STEP_RESOLUTION, workers: int = 1,
) -> Estimate:
    """p_t^V(x, y) = p_t(x, y)·E[exp(-A_V)] over bridges from x to y."""
    values = bridge_functional_samples(x, y, t, spec, boundary, n_paths, n_steps, rng,
                                       step_resolution, workers)
    return Estimate.from_samples(fk_weight(values), scale=transition_density(x, y, t))


def chebyshev_lower_bound(x: Point, y: Point, t: float, functionals: np.ndarray) -> float:
    """
    With M = 2·E[A_V] over bridges, at least half of the bridge mass has
    A_V <= M, so p_t^V(x, y) >= e^(-M)·p_t(x, y) / 2.
    """
    mean = pairwise_mean(functionals)
    with np.errstate(under="ignore"):
        return 0.5 * math.exp(-2.0 * mean) * transition_density(x, y, t)


def crossing_mass_estimate(
    x: Point, ball: Ball, t: float, spec: PotentialSpec, domain: DomainSpec,
    n_paths: int, n_steps: int, rng: RngKey,
    step_resolution: float = DEFAULT_STEP_RESOLUTION, workers: int = 1,
) -> Estimate:
    """E^x[exp(-A_V(t)); X_t ∈ B] for a ball B on the far side of K."""
    center = np.asarray(ball[0], dtype=float)
    radius = float(ball[1])
    x = np.asarray(x, dtype=float)
    if not radius > 0:
        raise ArgumentError(f"ball radius must be positive, got {radius}")
    if n_paths < 1:
        raise ArgumentError(f"n_paths must be positive, got {n_paths}")
    if domain.boundary.distances(center[None, :], limit=radius)[0] <= radius:
        raise ArgumentError("the target ball meets K")
    if contains_interior(domain, x) == contains_interior(domain, center):
        raise ArgumentError("the target ball lies in the component of x")
    check_step(spec, t, n_steps, step_resolution)
    _check_support(spec, domain.boundary)
    samples = map_chunks(_crossing_chunk, n_paths, rng, n_steps, workers, x=x, center=center,
                         radius=radius, t=t, n_steps=n_steps, spec=spec, boundary=domain.boundary)
    return Estimate.from_samples(samples)


# --- occupation of boundary shells ---------------------------------------------

def occupation_step_limit(a: float, n_max: int, shell_resolution: float = DEFAULT_SHELL_RESOLUTION) -> float:
    """Largest step resolving the thinnest shell: (a^(n_max+1))² / shell_resolution."""
    return a ** (2 * (n_max + 1)) / shell_resolution


def _occupation_chunk(key: RngKey, count: int, boundary, x0, horizon, n_steps, a, n_lo, n_hi):
    points = brownian_points(key.generator(), x0, horizon, n_steps, count)
    mids = 0.5 * (points[:, :-1] + points[:, 1:])
    d = boundary.distances(mids.reshape(-1, 2), limit=a ** n_lo).reshape(count, n_steps)
    h = horizon / n_steps
    columns = [np.minimum(shell_membership(d, a, n).sum(axis=1) * h, horizon)
               for n in range(n_lo, n_hi + 1)]
    return np.column_stack(columns)


def occupation_samples(
    boundary: PrefractalBoundary, x0: Point, delta: float, a: float, n_range: Tuple[int, int],
    n_paths: int, n_steps: int, rng: RngKey,
    shell_resolution: float = DEFAULT_SHELL_RESOLUTION, workers: int = 1, d: int = 2,
) -> OccupationStats:
    """
    Z_n = ∫_0^δ² 1{X_s ∈ K'_n} ds for every n in n_range, all shells read
    off one shared set of forward paths from x0 ∈ K.
    """
    n_lo, n_hi = int(n_range[0]), int(n_range[1])
    x0 = np.asarray(x0, dtype=float)
    if not 0 < a < 1:
        raise ArgumentError(f"shell ratio must lie in (0, 1), got {a}")
    if not delta > 0:
        raise ArgumentError(f"delta must be positive, got {delta}")
    if n_lo < 0 or n_hi < n_lo:
        raise ArgumentError(f"invalid shell range {n_range}")
    if n_paths < 1:
        raise ArgumentError(f"n_paths must be positive, got {n_paths}")
    tolerance = max(boundary.resolution, 1e-9)
    if boundary.distances(x0[None, :], limit=tolerance)[0] > tolerance:
        raise ArgumentError(f"x0 = {x0.tolist()} is not on the boundary")
    horizon = delta ** 2
    limit = occupation_step_limit(a, n_hi, shell_resolution)
    need = int(math.ceil(horizon / limit - 1e-9))
    if n_steps < need:
        raise ResolutionError(
            f"step {horizon / n_steps:.3g} does not resolve shell {n_hi + 1}; use n_steps >= {need}",
            required_n_steps=need,
        )
    table = map_chunks(_occupation_chunk, n_paths, rng, n_steps, workers, boundary=boundary,
                       x0=x0, horizon=horizon, n_steps=n_steps, a=a, n_lo=n_lo, n_hi=n_hi)
    alpha = boundary.nominal_alpha
    shells = range(n_lo, n_hi + 1)
    samples = {n: table[:, j] for j, n in enumerate(shells)}
    logger.info("occupation: %d paths x %d steps, shells %d..%d", n_paths, n_steps, n_lo, n_hi)
    return OccupationStats(
        a=a,
        delta=delta,
        n_range=(n_lo, n_hi),
        samples=samples,
        b_n={n: a ** (n * (d - alpha)) * delta ** (2 - d + alpha) for n in shells},
        mean_hat={n: pairwise_mean(samples[n]) for n in shells},
        second_moment_hat={n: pairwise_mean(samples[n] ** 2) for n in shells},
        n_steps=n_steps,
    )


def occupation_mean_oracle(
    boundary: PrefractalBoundary, x0: Point, delta: float, a: float, n: int,
    mesh: Optional[float] = None,
) -> float:
    """E Z_n = ∫_{K'_n} Γ_δ²(|x0 - y|) dy on a square grid of spacing `mesh`."""
    outer, inner = a ** n, a ** (n + 1)
    width = outer - inner
    mesh = mesh or width / 8.0
    if mesh > width:
        raise ArgumentError(f"mesh {mesh:.3g} is coarser than the shell width {width:.3g}")
    x0 = np.asarray(x0, dtype=float)
    horizon = delta ** 2
    lo, hi = quadrature_window(boundary, x0, outer, horizon)
    if np.any(hi <= lo):
        return 0.0
    centers, dist = neighborhood_cells(boundary, lo, hi, outer, mesh)
    mask = dist > inner
    return cell_quadrature(x0, centers[mask], np.ones(int(mask.sum())), mesh, horizon)


def paley_zygmund_bound(mean: float, second_moment: float, theta: float) -> float:
    """P(Z >= θ EZ) >= (1 - θ)² (EZ)² / E Z²."""
    if not 0 <= theta <= 1:
        raise ArgumentError(f"theta must lie in [0, 1], got {theta}")
    if mean < 0 or not second_moment > 0:
        raise ArgumentError("moments of a positive variable must be positive")
    if second_moment < mean * mean * (1.0 - 1e-12):
        raise ArgumentError(
            f"second moment {second_moment:.6g} is below the squared mean {mean * mean:.6g}"
        )
    return min(1.0, (1.0 - theta) ** 2 * mean * mean / second_moment)


def pz_empirical_check(occupation: OccupationStats, theta: float = 0.5) -> Dict[int, PZRecord]:
    """Empirical P(Z_n >= θ·mean) against the Paley-Zygmund bound, per shell."""
    records = {}
    for n in occupation.shells:
        samples = occupation.samples[n]
        count = len(samples)
        reliable = count >= PZ_MIN_SAMPLES
        if not reliable:
            logger.warning("shell %d: only %d samples; the PZ check needs %d", n, count, PZ_MIN_SAMPLES)
        mean = occupation.mean_hat[n]
        second = occupation.second_moment_hat[n]
        empirical = float(np.mean(samples >= theta * mean))
        bound = paley_zygmund_bound(mean, second, theta) if second > 0 else 0.0
        slack = 3.0 * math.sqrt(bound * (1.0 - bound) / count)
        records[n] = PZRecord(empirical_frac=empirical, bound=bound,
                              passed=empirical >= bound - slack, reliable=reliable)
    return records


def occupation_scaling_fit(a: float, means: Dict[int, float]) -> FitResult:
    """Slope of log E Z_n against n·log a; d - α for a regular boundary."""
    shells = sorted(means)
    return weighted_loglog_fit([a ** n for n in shells], [means[n] for n in shells])


# --- growth, decay and harmonic exponents -------------------------------------

def divergence_growth_fit(
    boundary: PrefractalBoundary, x0: Point, delta: float, beta: float, a_list: Sequence[float],
    n_paths: int, rng: RngKey, c_v: float = 1.0,
    step_resolution: float = DEFAULT_STEP_RESOLUTION, workers: int = 1,
) -> FitResult:
    """
    Median of A_{V^A}(δ²) over paths from x0 ∈ K for each A, fitted against A.
    Each A has its own substream and a step ∝ A^-2 from the resolution rule.
    """
    a_values = _require_geometric(a_list, 4, "a_list")
    check_resolution(boundary, 1.0 / a_values.max())
    horizon = delta ** 2
    medians = []
    for i, big_a in enumerate(a_values):
        spec = PotentialSpec(beta=beta, c_v=c_v, truncation_a=float(big_a))
        n_steps = required_n_steps(horizon, big_a, step_resolution)
        values = forward_functional_samples(x0, horizon, spec, boundary, n_paths, n_steps,
                                            rng.child("A", i), step_resolution, workers)
        medians.append(float(np.median(values)))
        logger.info("A = %g: %d steps, median functional %.4g", big_a, n_steps, medians[-1])
    medians = np.array(medians)
    kept = medians > 0
    if not kept.all():
        logger.warning("dropping %d A values with zero median functional", int((~kept).sum()))
    if kept.sum() < 2:
        raise InsufficientScalesError("fewer than two A values with a positive median functional")
    fit = weighted_loglog_fit(a_values[kept], medians[kept])
    fit.censored = [float(v) for v in a_values[~kept]]
    return fit


def decay_rate_fit(masses: Sequence[Tuple[float, "Estimate"]]) -> FitResult:
    """
    Stderr-weighted fit of log mass against log A; σ̂ = -slope.
    Non-positive masses are dropped and listed in `censored`.
    """
    a_values = _require_geometric([m[0] for m in masses], 4, "A values")
    values = np.array([m[1].value for m in masses], dtype=float)
    errors = np.array([m[1].stderr for m in masses], dtype=float)
    kept = values > 0
    if not kept.all():
        logger.warning("censoring A = %s with non-positive mass", a_values[~kept].tolist())
    if kept.sum() < 2:
        raise InsufficientScalesError("fewer than two positive crossing masses")
    weights = None
    if np.all(errors[kept] > 0):
        weights = (values[kept] / errors[kept]) ** 2
    fit = weighted_loglog_fit(a_values[kept], values[kept], weights)
    fit.censored = [float(v) for v in a_values[~kept]]
    return fit


def harmonic_exponent_fit(
    domain: DomainSpec, ball: Ball, distances: Sequence[float], n_walks: int,
    eps: Optional[float], rng: RngKey, anchor: Optional[Point] = None,
    direction: Optional[Point] = None, max_steps: int = DEFAULT_MAX_STEPS, workers: int = 1,
) -> FitResult:
    """
    Hit frequency of the target ball from points anchor + s·direction,
    fitted against their distance to K. Without an anchor the vertex of K
    nearest the ball is used, looking straight at the ball.
    """
    steps = _require_geometric(sorted(distances), 3, "distances")
    boundary = domain.boundary
    center = np.asarray(ball[0], dtype=float)
    radius = float(ball[1])
    if anchor is None:
        vertices = boundary.vertices
        anchor = vertices[np.argmin(np.hypot(*(vertices - center).T))]
    anchor = np.asarray(anchor, dtype=float)
    if direction is None:
        direction = center - anchor
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.hypot(*direction)
    clearance = float(np.hypot(*(center - anchor))) - radius
    if steps.max() >= clearance:
        raise ArgumentError(f"distances must stay below the ball clearance {clearance:.3g}")
    if n_walks < 1:
        raise ArgumentError(f"n_walks must be positive, got {n_walks}")

    d_k, freq, weights, censored = [], [], [], []
    timeouts = 0
    for i, s in enumerate(steps):
        start = anchor + s * direction
        walk_eps = eps if eps is not None else min(default_eps(boundary, start, ball), 1e-2 * steps.min())
        outcomes = walk_on_spheres_batch(rng.child("distance", i), domain, start, ball, walk_eps,
                                         max_steps, n_walks, workers)
        timeouts += int(np.sum(outcomes == Outcome.TIMEOUT))
        h = float(np.mean(outcomes == Outcome.HIT_TARGET))
        dist = float(boundary.distances(start[None, :])[0])
        if h <= 0:
            censored.append(dist)
            continue
        d_k.append(dist)
        freq.append(h)
        weights.append(h / (1.0 - h) * n_walks if h < 1 else math.inf)
    fraction = timeouts / (n_walks * len(steps))
    if fraction > MAX_TIMEOUT_FRACTION:
        raise UnreliableRunError(
            f"{fraction:.2%} of walks timed out (limit {MAX_TIMEOUT_FRACTION:.1%}); raise max_steps"
        )
    if censored:
        logger.warning("no target hits from d_K = %s; dropped from the fit", censored)
    if len(d_k) < 2:
        raise InsufficientScalesError("fewer than two distances with target hits")
    use = weights if all(math.isfinite(w) for w in weights) else None
    fit = weighted_loglog_fit(d_k, freq, use)
    fit.censored = censored
    return fit
