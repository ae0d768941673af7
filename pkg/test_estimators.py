import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from fklab.config import KOCH_CENTROID
from fklab.errors import ArgumentError, InsufficientScalesError, ResolutionError
from fklab.estimators import (
    Estimate,
    OccupationStats,
    bridge_functional_samples,
    chebyshev_lower_bound,
    crossing_mass_estimate,
    decay_rate_fit,
    divergence_growth_fit,
    gaussian_disk_mass,
    harmonic_exponent_fit,
    kernel_bridge_estimate,
    line_occupation_mean,
    occupation_mean_oracle,
    occupation_samples,
    occupation_scaling_fit,
    paley_zygmund_bound,
    pz_empirical_check,
    weighted_loglog_fit,
)
from fklab.geometry import DomainSpec, Orientation, koch_prefractal, line_boundary, slit_boundary
from fklab.potential import PotentialSpec, fk_weight, required_n_steps
from fklab.stochastic import substream, transition_density

A = 1.0 / 3.0


def test_estimate_from_samples():
    estimate = Estimate.from_samples(np.array([1.0, 2.0, 3.0]), scale=2.0)
    assert estimate.value == pytest.approx(4.0)
    assert estimate.stderr == pytest.approx(2.0 / math.sqrt(3.0))
    low, high = estimate.ci95
    assert low < 4.0 < high
    assert Estimate.from_samples(np.array([5.0])).stderr == 0.0
    with pytest.raises(ArgumentError):
        Estimate.from_samples(np.array([]))


def test_loglog_fit_recovers_power_law():
    xs = [1.0, 2.0, 4.0, 8.0, 16.0]
    fit = weighted_loglog_fit(xs, [3.0 * x ** -0.7 for x in xs])
    assert fit.slope == pytest.approx(-0.7, abs=1e-12)
    assert math.exp(fit.intercept) == pytest.approx(3.0, rel=1e-12)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.slope_ci95[0] <= fit.slope <= fit.slope_ci95[1]


def test_loglog_fit_r_squared_from_residuals():
    xs = np.array([1.0, 2.0, 4.0, 8.0])
    ys = np.array([1.0, 2.2, 3.7, 8.5])
    fit = weighted_loglog_fit(xs, ys)
    resid = np.log(ys) - fit.intercept - fit.slope * np.log(xs)
    total = np.sum((np.log(ys) - np.log(ys).mean()) ** 2)
    assert fit.r_squared == pytest.approx(1.0 - np.sum(resid ** 2) / total, rel=1e-12)


def test_loglog_fit_arguments():
    with pytest.raises(ArgumentError):
        weighted_loglog_fit([1.0], [1.0])
    with pytest.raises(ArgumentError):
        weighted_loglog_fit([1.0, 2.0], [0.0, 1.0])
    with pytest.raises(ArgumentError):
        weighted_loglog_fit([2.0, 2.0], [1.0, 3.0])
    with pytest.raises(ArgumentError):
        weighted_loglog_fit([1.0, 2.0], [1.0, 3.0], [1.0, -1.0])


def test_gaussian_disk_mass_matches_quadrature():
    x, center, radius, t = (0.0, 1.0), (0.0, -1.0), 0.5, 1.0
    direct, _ = integrate.dblquad(
        lambda y1, y0: transition_density(x, (y0, y1), t),
        -radius, radius,
        lambda y0: center[1] - math.sqrt(radius ** 2 - y0 ** 2),
        lambda y0: center[1] + math.sqrt(radius ** 2 - y0 ** 2),
    )
    assert gaussian_disk_mass(x, center, radius, t) == pytest.approx(direct, rel=1e-6)


@pytest.mark.parametrize("n", [1, 2])
def test_occupation_oracle_matches_line_formula(n):
    oracle = occupation_mean_oracle(line_boundary(20.0), (0.0, 0.0), 1.0, A, n)
    assert oracle == pytest.approx(line_occupation_mean(1.0, A, n), rel=0.01)


def test_occupation_means_scale_like_b_n():
    line = line_boundary(20.0)
    means = {n: occupation_mean_oracle(line, (0.0, 0.0), 1.0, A, n) for n in range(1, 5)}
    for n, mean in means.items():
        b_n = A ** n
        assert 0.2 <= mean / b_n <= 5.0
    fit = occupation_scaling_fit(A, means)
    assert fit.slope == pytest.approx(1.0, abs=0.15)


def test_occupation_samples_on_line():
    line = line_boundary(20.0)
    stats = occupation_samples(line, (0.0, 0.0), 1.0 / 3.0, A, (1, 2), 4000, 1620, substream(1))
    assert stats.shells == [1, 2]
    assert stats.n_steps == 1620
    for n in stats.shells:
        samples = stats.samples[n]
        assert np.all(samples >= 0) and np.all(samples <= (1.0 / 3.0) ** 2 + 1e-12)
        oracle = line_occupation_mean(1.0 / 3.0, A, n)
        assert stats.mean_hat[n] == pytest.approx(oracle, rel=0.1)
        assert stats.second_moment_hat[n] / stats.mean_hat[n] ** 2 < 50
        # b_n = a^(n(d - alpha)) delta^(2 - d + alpha) with alpha = 1
        assert stats.b_n[n] == pytest.approx(A ** n * (1.0 / 3.0), rel=1e-12)


def test_occupation_samples_need_fine_steps():
    line = line_boundary(20.0)
    with pytest.raises(ResolutionError) as excinfo:
        occupation_samples(line, (0.0, 0.0), 1.0 / 3.0, A, (1, 2), 10, 100, substream(2))
    assert excinfo.value.required_n_steps >= 1620
    assert "n_steps >=" in str(excinfo.value)


def test_occupation_samples_start_on_boundary():
    with pytest.raises(ArgumentError):
        occupation_samples(line_boundary(20.0), (0.0, 0.5), 1.0, A, (1, 2), 10, 10 ** 5, substream(3))


def test_paley_zygmund_bound_examples():
    assert paley_zygmund_bound(1.0, 2.0, 0.5) == pytest.approx(0.125)
    assert paley_zygmund_bound(1.0, 1.0, 0.0) == 1.0
    with pytest.raises(ArgumentError):
        paley_zygmund_bound(1.0, 0.5, 0.5)
    with pytest.raises(ArgumentError):
        paley_zygmund_bound(1.0, 2.0, 1.5)


@settings(deadline=None, max_examples=100)
@given(mean=st.floats(min_value=1e-6, max_value=1e3),
       excess=st.floats(min_value=1.0, max_value=1e3),
       theta=st.floats(min_value=0.0, max_value=1.0))
def test_paley_zygmund_bound_is_a_probability(mean, excess, theta):
    bound = paley_zygmund_bound(mean, excess * mean * mean, theta)
    assert 0.0 <= bound <= 1.0


def _stats(samples):
    samples = np.asarray(samples, dtype=float)
    return OccupationStats(a=A, delta=1.0, n_range=(1, 1), samples={1: samples}, b_n={1: A},
                           mean_hat={1: float(samples.mean())},
                           second_moment_hat={1: float(np.mean(samples ** 2))})


def test_pz_check_on_constant_samples():
    record = pz_empirical_check(_stats(np.full(2000, 0.3)), 0.5)[1]
    assert record.empirical_frac == 1.0
    assert record.passed and record.reliable


def test_pz_check_flags_small_samples(caplog):
    with caplog.at_level("WARNING"):
        record = pz_empirical_check(_stats(np.linspace(0.1, 1.0, 50)), 0.5)[1]
    assert not record.reliable
    assert "only 50 samples" in caplog.text


def test_kernel_without_potential_is_free_kernel(line):
    x, y, t = (0.0, 1.0), (0.5, -1.0), 1.0
    free = kernel_bridge_estimate(x, y, t, PotentialSpec(constant_override=0.0), line, 200, 8, substream(4))
    assert free.value == pytest.approx(transition_density(x, y, t), rel=1e-12)
    assert free.stderr == pytest.approx(0.0, abs=1e-15)
    damped = kernel_bridge_estimate(x, y, t, PotentialSpec(constant_override=2.0), line, 200, 8, substream(4))
    assert damped.value == pytest.approx(math.exp(-2.0) * transition_density(x, y, t), rel=1e-12)


def test_kernel_barrier_suppresses_crossing(line):
    x, y, t = (0.0, 1.0), (0.0, -1.0), 1.0
    free = transition_density(x, y, t)
    rng = substream(5)
    weak = kernel_bridge_estimate(x, y, t, PotentialSpec(beta=1.5, truncation_a=8.0), line, 500, 512, rng,
                                  step_resolution=2.0)
    values = bridge_functional_samples(x, y, t, PotentialSpec(beta=1.5, truncation_a=32.0), line, 500, 8192,
                                       rng, step_resolution=2.0)
    strong = Estimate.from_samples(fk_weight(values), scale=free)
    assert strong.value < weak.value
    assert strong.value < 0.2 * free
    assert chebyshev_lower_bound(x, y, t, values) <= strong.value


def test_kernel_is_symmetric(line):
    x, y, t = (0.0, 1.0), (0.3, -0.8), 1.0
    spec = PotentialSpec(beta=1.5, truncation_a=8.0)
    forward = kernel_bridge_estimate(x, y, t, spec, line, 500, 512, substream(6, [("dir", 0)]), 2.0)
    reverse = kernel_bridge_estimate(y, x, t, spec, line, 500, 512, substream(6, [("dir", 1)]), 2.0)
    joint = math.hypot(forward.stderr, reverse.stderr)
    assert abs(forward.value - reverse.value) <= 4 * joint


def test_crossing_without_potential_is_gaussian_mass(halfplane):
    x, ball, t = (0.0, 1.0), ((0.0, -1.0), 0.5), 1.0
    estimate = crossing_mass_estimate(x, ball, t, PotentialSpec(constant_override=0.0), halfplane,
                                      20000, 4, substream(7))
    assert abs(estimate.value - gaussian_disk_mass(x, *ball, t)) <= 3 * estimate.stderr


def test_crossing_mass_is_monotone_in_strength(halfplane):
    x, ball, t = (0.0, 1.0), ((0.0, -1.0), 0.5), 1.0
    rng = substream(8)
    weak = crossing_mass_estimate(x, ball, t, PotentialSpec(beta=1.0, truncation_a=4.0), halfplane,
                                  1000, 128, rng, step_resolution=2.0)
    strong = crossing_mass_estimate(x, ball, t, PotentialSpec(beta=1.0, c_v=2.0, truncation_a=4.0), halfplane,
                                    1000, 128, rng, step_resolution=2.0)
    assert 0.0 <= strong.value <= weak.value <= 1.0


def test_crossing_arguments(halfplane):
    spec = PotentialSpec(constant_override=0.0)
    with pytest.raises(ArgumentError):
        crossing_mass_estimate((0.0, 1.0), ((0.0, 2.0), 0.5), 1.0, spec, halfplane, 10, 4, substream(0))
    with pytest.raises(ArgumentError):
        crossing_mass_estimate((0.0, 1.0), ((0.0, -0.2), 0.5), 1.0, spec, halfplane, 10, 4, substream(0))
    with pytest.raises(ArgumentError):
        crossing_mass_estimate((0.0, 1.0), ((0.0, -1.0), 0.0), 1.0, spec, halfplane, 10, 4, substream(0))


@settings(deadline=None, max_examples=5, derandomize=True)
@given(label=st.integers(0, 10 ** 6))
def test_quadrupling_paths_halves_stderr(halfplane, label):
    x, ball, t = (0.0, 0.5), ((0.0, -1.5), 1.0), 1.0
    spec = PotentialSpec(constant_override=0.0)
    rng = substream(14, [("stderr", label)])
    small = crossing_mass_estimate(x, ball, t, spec, halfplane, 4000, 1, rng.child("n", 0))
    large = crossing_mass_estimate(x, ball, t, spec, halfplane, 16000, 1, rng.child("n", 1))
    assert small.stderr / large.stderr == pytest.approx(2.0, rel=0.2)


def test_path_estimators_reject_coarse_prefractals():
    koch = koch_prefractal(2)
    spec = PotentialSpec(beta=1.0, truncation_a=16.0)
    n_steps = required_n_steps(1.0, 16.0)
    interior = DomainSpec(koch, Orientation.INTERIOR_IS_BOUNDED)
    with pytest.raises(ResolutionError) as excinfo:
        crossing_mass_estimate(KOCH_CENTROID, ((0.5, -1.5), 0.3), 1.0, spec, interior, 10, n_steps, substream(0))
    assert excinfo.value.required_level == 5
    with pytest.raises(ResolutionError):
        kernel_bridge_estimate(KOCH_CENTROID, (0.5, 0.1), 1.0, spec, koch, 10, n_steps, substream(0))


def test_divergence_resolution_ignores_step_factor():
    # a step factor of 2 must not relax the geometric rule 3^-L <= 1 / (10 A)
    with pytest.raises(ResolutionError) as excinfo:
        divergence_growth_fit(koch_prefractal(5), (0.0, 0.0), 0.5, 1.2, [4.0, 8.0, 16.0, 32.0], 10,
                              substream(0), step_resolution=2.0)
    assert excinfo.value.required_level == 6


def test_decay_fit_on_flat_masses():
    masses = [(a, Estimate(0.1, 0.01, 1000)) for a in (4.0, 8.0, 16.0, 32.0)]
    fit = decay_rate_fit(masses)
    assert fit.slope == pytest.approx(0.0, abs=1e-12)
    assert fit.censored == []


def test_decay_fit_censors_zero_masses():
    masses = [(4.0, Estimate(0.1, 0.01, 100)), (8.0, Estimate(0.05, 0.005, 100)),
              (16.0, Estimate(0.025, 0.0025, 100)), (32.0, Estimate(0.0, 0.0, 100))]
    fit = decay_rate_fit(masses)
    assert fit.slope == pytest.approx(-1.0, abs=1e-9)
    assert fit.censored == [32.0]


def test_decay_fit_needs_a_geometric_sweep():
    with pytest.raises(ArgumentError):
        decay_rate_fit([(a, Estimate(0.1, 0.01, 10)) for a in (4.0, 8.0, 16.0)])
    with pytest.raises(ArgumentError):
        decay_rate_fit([(a, Estimate(0.1, 0.01, 10)) for a in (4.0, 8.0, 12.0, 32.0)])
    with pytest.raises(InsufficientScalesError):
        decay_rate_fit([(a, Estimate(0.0, 0.0, 10)) for a in (4.0, 8.0, 16.0, 32.0)])


def test_divergence_growth_on_line():
    fit = divergence_growth_fit(line_boundary(20.0), (0.0, 0.0), 0.5, 1.5, [4.0, 8.0, 16.0, 32.0], 300,
                                substream(9), step_resolution=2.0)
    assert fit.slope == pytest.approx(0.5, abs=0.2)
    assert len(fit.points) == 4


def test_divergence_growth_needs_four_values():
    with pytest.raises(ArgumentError):
        divergence_growth_fit(line_boundary(20.0), (0.0, 0.0), 0.5, 1.5, [4.0, 8.0, 16.0], 10, substream(0))


def test_harmonic_exponent_halfplane(halfplane):
    fit = harmonic_exponent_fit(halfplane, ((0.0, 2.0), 0.5), [2.0 ** -k for k in range(3, 8)], 20000, None,
                                substream(10), anchor=(0.0, 0.0), direction=(0.0, 1.0))
    assert fit.slope == pytest.approx(1.0, abs=0.1)


def test_harmonic_exponent_slit_tip():
    domain = DomainSpec(slit_boundary(), Orientation.EXTERIOR)
    fit = harmonic_exponent_fit(domain, ((3.0, 0.0), 0.5), [2.0 ** -k for k in range(3, 8)], 20000, None,
                                substream(11), anchor=(0.0, 0.0), direction=(1.0, 0.0))
    assert fit.slope == pytest.approx(0.5, abs=0.1)


def test_harmonic_exponent_arguments(halfplane):
    with pytest.raises(ArgumentError):
        harmonic_exponent_fit(halfplane, ((0.0, 2.0), 0.5), [0.5, 1.0, 2.0], 10, None, substream(0),
                              anchor=(0.0, 0.0), direction=(0.0, 1.0))
    with pytest.raises(ArgumentError):
        harmonic_exponent_fit(halfplane, ((0.0, 2.0), 0.5), [0.1, 0.2], 10, None, substream(0),
                              anchor=(0.0, 0.0), direction=(0.0, 1.0))


def test_koch_exterior_fit_runs():
    domain = DomainSpec(koch_prefractal(5), Orientation.EXTERIOR)
    fit = harmonic_exponent_fit(domain, ((0.5, -1.5), 0.3), [2.0 ** -k for k in range(3, 7)], 1000, None,
                                substream(12))
    assert fit.slope > 0
    assert len(fit.points) + len(fit.censored) == 4
