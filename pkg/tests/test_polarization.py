import json
import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings, strategies as st

from rdmeflow.ctmc import build_ctmc_generator, initial_distribution
from rdmeflow.ensemble import PostProcessor, run_ensemble_nostorage
from rdmeflow.errors import MetricError
from rdmeflow.mesh import MEMBRANE
from rdmeflow.model import validate_model
from rdmeflow.polarization import (CAP_FRACTION, MEMBRANE_BOUND, build_reduced_yeast_model, build_yeast_model,
                                   cap_matrix, equilibrium_membrane_fraction, membrane_voxels,
                                   polarization_from_counts, polarization_percent, polarization_series,
                                   run_switch_sweep, switch_threshold, uniform_polarization)
from rdmeflow.solver import run_nsm
from rdmeflow.trajectory import Trajectory

from conftest import pure_death

NO_FEEDBACK = {"k_on": 0.5, "k_off": 1.0, "k_fb": 0.0}


@pytest.fixture(scope="module")
def sphere():
    return build_yeast_model(0, mesh_subdiv=1, tspan=[0.0])


def snapshot(model, membrane_counts):
    counts = np.zeros((1, model.num_voxels, 2), dtype=np.int64)
    counts[0, membrane_voxels(model.mesh, model.subdomains), 1] = membrane_counts
    return Trajectory([0.0], counts, model.model_hash, 0, model.species_names)


# ---------------------------------------------------------------- model

def test_empty_model_is_valid_and_inert():
    model = build_yeast_model(0, mesh_subdiv=1, tspan=[0.0, 5.0])
    assert validate_model(model) == []
    assert not run_nsm(model, seed=1).counts.any()


def test_structure(sphere):
    membrane = sphere.subdomains.labels == MEMBRANE
    assert set(sphere.subdomains.labels.tolist()) == {1, 2}
    for r in sphere.reactions:
        expected = membrane if r.name in ("on", "feedback", "off") else None
        assert sphere.reaction_mask(r).tolist() == expected.tolist()
    model = build_yeast_model(1000, mesh_subdiv=1, tspan=[0.0])
    x0 = run_nsm(model, seed=0).counts[0]
    assert x0[:, 1].sum() == 100 and x0[~membrane, 1].sum() == 0
    assert x0[membrane, 0].sum() == 0 and x0[:, 0].sum() == 900


def test_conservation_on_every_trajectory():
    model = build_yeast_model(600, mesh_subdiv=1, tspan=np.linspace(0, 30, 16))
    for seed in range(4):
        counts = run_nsm(model, seed=seed).counts
        assert np.all(counts.sum(axis=(1, 2)) == 600)


def test_negative_inputs_rejected():
    with pytest.raises(ValueError):
        build_yeast_model(-1)
    with pytest.raises(ValueError):
        build_yeast_model(10, {"k_on": -1.0})


def test_threshold():
    assert switch_threshold() == pytest.approx(500.0)
    assert switch_threshold({"k_fb": 0.0}) == math.inf


def test_reduced_model_ctmc_is_binomial():
    n = 12
    model = build_reduced_yeast_model(n, NO_FEEDBACK, tspan=[0.0, 1.0])
    ctmc = build_ctmc_generator(model, state_cap=n)
    p = ctmc.distribution(initial_distribution(ctmc, model), 60.0)
    frac = equilibrium_membrane_fraction(0.5, 1.0)
    assert frac == pytest.approx(1 / 3)
    law = np.zeros(n + 1)
    for i, s in enumerate(ctmc.states):
        law[s[0, 1]] += p[i]
    np.testing.assert_allclose(law, scipy.stats.binom.pmf(np.arange(n + 1), n, frac), atol=1e-8)


def test_sphere_equilibrium_uses_accessible_volume():
    model = build_yeast_model(100, {**NO_FEEDBACK}, mesh_subdiv=1, tspan=[0.0, 12.0])
    vol = model.mesh.volumes
    accessible = vol[model.subdomains.labels == MEMBRANE].sum() / vol.sum()
    expected = 100 * equilibrium_membrane_fraction(0.5, 1.0, accessible)
    s = run_ensemble_nostorage(model, 400, PostProcessor.make("species_total", species=MEMBRANE_BOUND), base_seed=8)
    se = math.sqrt(s.variance[0] / s.count)
    assert abs(s.mean[0] - expected) < 4 * se


def test_linear_relaxation_ci_coverage():
    # k_fb = 0: E[m(t)] = N p + (m0 - N p) exp(-(k_on + k_off) t)
    n, t = 100, 0.6
    model = build_reduced_yeast_model(n, NO_FEEDBACK, tspan=[0.0, t])
    p = equilibrium_membrane_fraction(0.5, 1.0)
    exact = n * p + (10 - n * p) * math.exp(-1.5 * t)
    g = PostProcessor.make("species_total", species=MEMBRANE_BOUND)
    covered = 0
    for rep in range(100):
        s = run_ensemble_nostorage(model, 40, g, base_seed=1000 + rep)
        covered += abs(s.mean[0] - exact) <= s.ci95[0]
    assert covered >= 90


# ---------------------------------------------------------------- metric

def test_single_voxel_is_full(sphere):
    counts = np.zeros(len(membrane_voxels(sphere.mesh, sphere.subdomains)), dtype=int)
    counts[5] = 17
    assert polarization_percent(snapshot(sphere, counts), 0, sphere) == 100.0


def test_uniform_is_cap_fraction(sphere):
    idx = membrane_voxels(sphere.mesh, sphere.subdomains)
    area = sphere.mesh.volumes[idx]
    largest_share = 100 * area.max() / area.sum()
    u = uniform_polarization(sphere)
    assert 100 * CAP_FRACTION <= u <= 100 * CAP_FRACTION + largest_share
    fine = build_yeast_model(0, mesh_subdiv=2, tspan=[0.0])
    assert uniform_polarization(fine) == pytest.approx(10.5636, abs=1e-4)


def test_empty_membrane_is_zero(sphere):
    assert polarization_percent(snapshot(sphere, 0), 0, sphere) == 0.0


def test_missing_membrane():
    model = pure_death()
    with pytest.raises(MetricError):
        membrane_voxels(model.mesh, model.subdomains)


def test_caps_are_minimal(sphere):
    caps = cap_matrix(sphere.mesh, sphere.subdomains)
    idx = membrane_voxels(sphere.mesh, sphere.subdomains)
    area = sphere.mesh.volumes[idx]
    target = CAP_FRACTION * area.sum()
    for c, row in enumerate(caps):
        assert row[c]
        assert area[row].sum() >= target * (1 - 1e-12)
        members = np.flatnonzero(row)
        unit = sphere.mesh.coords[idx] / np.linalg.norm(sphere.mesh.coords[idx], axis=1, keepdims=True)
        d = np.arccos(np.clip(unit[members] @ unit[c], -1, 1))
        farthest = members[np.argmax(d)]
        assert area[row].sum() - area[farthest] < target


@given(st.data())
@settings(max_examples=60)
def test_metric_range_and_full_iff_inside_a_cap(sphere, data):
    caps = cap_matrix(sphere.mesh, sphere.subdomains).astype(float)
    n = caps.shape[1]
    counts = np.array(data.draw(st.lists(st.integers(0, 30), min_size=n, max_size=n)), dtype=float)
    if data.draw(st.booleans()):
        keep = caps[data.draw(st.integers(0, n - 1))].astype(bool)
        counts[~keep] = 0
    value = polarization_from_counts(counts, caps)
    assert 0.0 <= value <= 100.0
    inside = counts.sum() > 0 and any(counts[~row.astype(bool)].sum() == 0 for row in caps)
    assert (value == 100.0) == inside


def test_series_and_postprocessor():
    model = build_yeast_model(800, mesh_subdiv=1, tspan=np.linspace(0, 10, 11))
    traj = run_nsm(model, seed=2)
    s = polarization_series(traj, model)
    assert len(s.percent) == 11 and np.all((0 <= s.percent) & (s.percent <= 100))
    assert np.all(s.membrane_count <= 800)
    assert s.window_mean == pytest.approx(s.percent[5:].mean())
    out = PostProcessor.make("polarization")(traj, model)
    assert len(out) == 3 + 11
    assert out[0] == s.window_mean and out[1] == pytest.approx(s.percent[5:].std())
    np.testing.assert_array_equal(out[3:], s.membrane_count)


def test_switch_sweep_outputs(tmp_path):
    res = run_switch_sweep([0, 300], ensemble_size=2, mesh_subdiv=1, tspan=np.linspace(0, 4, 5))
    assert [p.n_total for p in res.points] == [0, 300]
    off = res.points[0]
    assert off.polarization == 0.0 and off.membrane_count == 0.0 and off.error is None
    doc = json.loads(json.dumps(res.to_json()))
    assert doc["points"][1]["N"] == 300 and len(doc["points"][1]["membrane_series"]) == 5
    res.write_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0].startswith("N,polarization")
    again = run_switch_sweep([300], ensemble_size=2, mesh_subdiv=1, tspan=np.linspace(0, 4, 5))
    assert again.points[0].polarization == res.points[1].polarization
