import json
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from fklab import settings as lab_settings
from fklab.errors import ArgumentError
from fklab.geometry import DomainSpec, Orientation, koch_prefractal, line_boundary
from fklab.stochastic import (
    GENERATOR_ID,
    Outcome,
    RngKey,
    chapman_kolmogorov_check,
    dirichlet_halfplane_density,
    fixture_digest,
    freeze_fixture,
    reference_uniforms,
    sample_bridge,
    sample_bridges,
    sample_path,
    sample_paths,
    substream,
    transition_density,
    verify_fixture,
    walk_on_spheres,
    walk_on_spheres_batch,
    write_path_csv,
)

labels = st.lists(st.tuples(st.sampled_from(["a", "b", "chunk"]), st.integers(0, 5)), max_size=4)


@settings(deadline=None, max_examples=30)
@given(seed=st.integers(0, 2 ** 31), path=labels)
def test_substreams_are_deterministic(seed, path):
    first = substream(seed, path).generator().random(3)
    second = substream(seed, path).generator().random(3)
    assert np.array_equal(first, second)


def test_distinct_labels_give_distinct_streams():
    base = substream(0)
    assert base.child("x", 0).key != base.child("x", 1).key
    assert base.child("x", 0).key != base.child("y", 0).key
    assert substream(0, [("x", 0)]) == base.child("x", 0)
    assert isinstance(base, RngKey)


@settings(deadline=None, max_examples=10, derandomize=True)
@given(seed=st.integers(0, 2 ** 31), first=labels, second=labels)
def test_distinct_labels_are_uncorrelated(seed, first, second):
    assume(first != second)
    n = 10 ** 5
    u = substream(seed, first).generator().random(n)
    v = substream(seed, second).generator().random(n)
    assert abs(np.corrcoef(u, v)[0, 1]) < 3.0 / math.sqrt(n)


COMMITTED_UNIFORMS = [0.2795849509555567, 0.07698480035307032, 0.9553672996769705, 0.26913211181189667]


def test_reference_uniforms_match_committed_values():
    assert reference_uniforms().tolist() == COMMITTED_UNIFORMS
    payload = json.loads(lab_settings.RNG_FIXTURE.read_text())
    assert payload["uniforms"] == COMMITTED_UNIFORMS
    assert payload["generator"] == GENERATOR_ID
    assert verify_fixture(lab_settings.RNG_FIXTURE)


def test_committed_fixture_is_what_freeze_writes(tmp_path):
    frozen = freeze_fixture(tmp_path / "rng.json")
    assert fixture_digest(frozen) == fixture_digest(lab_settings.RNG_FIXTURE)


def test_missing_fixture_fails_unless_freezing(tmp_path):
    path = tmp_path / "rng.json"
    assert fixture_digest(path) == "missing"
    assert not verify_fixture(path)
    assert not path.exists()
    assert verify_fixture(path, freeze_missing=True)
    assert path.exists()
    assert verify_fixture(path)
    assert len(fixture_digest(path)) == 64


def test_fixture_detects_corruption(tmp_path):
    path = freeze_fixture(tmp_path / "rng.json")
    payload = json.loads(path.read_text())
    payload["uniforms"][0] += 1e-9
    path.write_text(json.dumps(payload))
    assert not verify_fixture(path)

    payload = json.loads(freeze_fixture(path).read_text())
    assert payload["generator"] == GENERATOR_ID
    payload["generator"] = "numpy.MT19937"
    path.write_text(json.dumps(payload))
    assert not verify_fixture(path)

    path.write_text("not json")
    assert not verify_fixture(path)


def test_transition_density_examples():
    assert transition_density((0, 0), (0, 0), 1.0) == pytest.approx(1.0 / (4.0 * math.pi))
    assert transition_density((0, 0), (2, 0), 1.0) == pytest.approx(math.exp(-1.0) / (4.0 * math.pi))
    with pytest.raises(ArgumentError):
        transition_density((0, 0), (0, 0), 0.0)


def test_transition_density_normalised():
    mass, _ = integrate.dblquad(lambda y, x: transition_density((0.3, -0.2), (x, y), 0.7),
                                -20, 20, -20, 20)
    assert mass == pytest.approx(1.0, rel=1e-6)


def test_halfplane_density_vanishes_outside():
    assert dirichlet_halfplane_density((0, 1), (0, -1), 1.0) == 0.0
    assert 0 < dirichlet_halfplane_density((0, 1), (0, 1), 1.0) < transition_density((0, 1), (0, 1), 1.0)


def test_free_increments_have_variance_two_t():
    batch = sample_paths(substream(1, [("free", 0)]), (0.0, 0.0), 1.0, 1, 100000)
    end = batch.points[:, -1]
    squared = np.sum(end ** 2, axis=1)
    stderr = squared.std(ddof=1) / math.sqrt(len(squared))
    assert abs(squared.mean() - 4.0) <= 4 * stderr
    assert stats.kstest(end[:, 0], "norm", args=(0.0, math.sqrt(2.0))).pvalue > 1e-3


def test_refinement_keeps_endpoint_law():
    coarse = sample_paths(substream(2, [("coarse", 0)]), (1.0, 1.0), 0.5, 4, 40000).points[:, -1]
    fine = sample_paths(substream(2, [("fine", 0)]), (1.0, 1.0), 0.5, 8, 40000).points[:, -1]
    assert coarse[:, 0].var() == pytest.approx(1.0, rel=0.05)
    assert fine[:, 0].var() == pytest.approx(1.0, rel=0.05)


def test_increments_are_uncorrelated():
    points = sample_paths(substream(3, [("incr", 0)]), (0.0, 0.0), 1.0, 2, 40000).points
    first = points[:, 1, 0] - points[:, 0, 0]
    second = points[:, 2, 0] - points[:, 1, 0]
    assert abs(np.corrcoef(first, second)[0, 1]) < 0.03


def test_bridge_endpoints_are_exact():
    bridge = sample_bridge(substream(4, [("bridge", 0)]), (0.1, 0.2), (1.5, -0.5), 1.0, 16)
    assert np.array_equal(bridge.points[0], [0.1, 0.2])
    assert np.array_equal(bridge.points[-1], [1.5, -0.5])
    assert bridge.step == pytest.approx(1.0 / 16)


def test_bridge_marginals():
    x, y = np.array([0.0, 0.0]), np.array([2.0, 0.0])
    points = sample_bridges(substream(5, [("bridge", 0)]), x, y, 1.0, 4, 40000).points
    mid = points[:, 2]
    np.testing.assert_allclose(mid.mean(axis=0), [1.0, 0.0], atol=0.02)
    assert mid[:, 1].var() == pytest.approx(0.5, rel=0.05)
    # Cov(X_s, X_u) = 2 s (t - u) / t per coordinate
    cov = np.cov(points[:, 1, 1], points[:, 3, 1])[0, 1]
    assert cov == pytest.approx(0.125, abs=0.01)


def test_chapman_kolmogorov():
    x, y = (0.0, 0.0), (1.0, 0.5)
    value, stderr = chapman_kolmogorov_check(substream(6, [("ck", 0)]), x, y, 1.0)
    assert abs(value - transition_density(x, y, 1.0)) <= 4 * stderr


def test_sampling_arguments():
    rng = substream(0)
    with pytest.raises(ArgumentError):
        sample_path(rng, (0, 0), 0.0, 10)
    with pytest.raises(ArgumentError):
        sample_path(rng, (0, 0), 1.0, 0)


def test_worker_count_does_not_change_paths():
    rng = substream(7, [("workers", 0)])
    serial = sample_paths(rng, (0.0, 0.0), 1.0, 1000, 5000, workers=1).points
    pooled = sample_paths(rng, (0.0, 0.0), 1.0, 1000, 5000, workers=2).points
    assert np.array_equal(serial, pooled)


def test_write_path_csv(tmp_path):
    path = sample_path(substream(8), (0.0, 0.0), 1.0, 10)
    target = write_path_csv(path, tmp_path / "paths" / "p.csv")
    frame = pd.read_csv(target)
    assert list(frame.columns) == ["time", "x1", "x2"]
    assert len(frame) == 11


def test_walks_in_bounded_domain_reach_the_boundary():
    domain = DomainSpec(koch_prefractal(2), Orientation.INTERIOR_IS_BOUNDED)
    outcomes = walk_on_spheres_batch(substream(9), domain, (0.5, 0.3), None, n_walks=200)
    assert np.all(outcomes == Outcome.HIT_BOUNDARY)


def test_slab_hit_frequency_is_linear():
    # a huge ball above the line leaves a slab of unit width
    domain = DomainSpec(line_boundary(1e3), Orientation.INTERIOR_IS_HALFPLANE_UPPER)
    ball = ((0.0, 1.0 + 1e5), 1e5)
    outcomes = walk_on_spheres_batch(substream(10), domain, (0.0, 0.5), ball, eps=1e-4, n_walks=2000)
    assert not np.any(outcomes == Outcome.TIMEOUT)
    h = np.mean(outcomes == Outcome.HIT_TARGET)
    assert abs(h - 0.5) <= 3 * math.sqrt(0.25 / 2000)


def test_halfplane_hit_frequency_grows_towards_target():
    domain = DomainSpec(line_boundary(1e3), Orientation.INTERIOR_IS_HALFPLANE_UPPER)
    ball = ((0.0, 2.0), 0.5)
    freq = []
    for i, height in enumerate([0.25, 0.5, 1.0]):
        outcomes = walk_on_spheres_batch(substream(11, [("height", i)]), domain, (0.0, height), ball,
                                         eps=1e-4, n_walks=2000)
        freq.append(np.mean(outcomes == Outcome.HIT_TARGET))
    assert freq[0] < freq[1] < freq[2]


def test_exterior_walks_do_not_time_out():
    domain = DomainSpec(koch_prefractal(3), Orientation.EXTERIOR)
    outcomes = walk_on_spheres_batch(substream(12), domain, (0.5, -0.6), ((0.5, -1.5), 0.3),
                                     eps=1e-4, n_walks=1000, max_steps=2000)
    assert not np.any(outcomes == Outcome.TIMEOUT)


def test_walk_arguments(halfplane):
    ball = ((0.0, 2.0), 0.5)
    with pytest.raises(ArgumentError):
        walk_on_spheres(substream(0), halfplane, (0.0, 1.0), ball, eps=0.6)
    with pytest.raises(ArgumentError):
        walk_on_spheres(substream(0), halfplane, (0.0, 2.1), ball)
    with pytest.raises(ArgumentError):
        walk_on_spheres(substream(0), halfplane, (0.0, 0.0), ball)
    assert walk_on_spheres(substream(0), halfplane, (0.0, 1.0), ball) in set(Outcome)
