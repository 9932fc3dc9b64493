import numpy as np
import pytest

from conftest import nearest
from cbclab.cbc import ControlTarget, drive_to_orbit
from cbclab.experiments import (CONDITIONS, EscapeConfig, ci_overlap, floquet_branch,
                                perturbation_study, poincare_points, run_escapes, study_summary,
                                unstable_direction, branch_rows, FLOQUET_COLUMNS)
from cbclab.rig import NoiseConfig, RigState, VirtualRig
from cbclab.sysid import FloquetConfig, estimate_floquet


@pytest.fixture(scope="module")
def unstable_orbit(duffing_run):
    return nearest(duffing_run, 0.035)


@pytest.fixture(scope="module")
def unstable_estimate(unstable_orbit):
    return estimate_floquet(VirtualRig(), unstable_orbit, FloquetConfig(repeats=4, seed=1))


def test_poincare_points():
    x = np.arange(40.0)
    P = poincare_points(x, 10, 5)
    np.testing.assert_array_equal(P, [[10, 8], [20, 18], [30, 28]])


def test_unstable_direction_is_unit(unstable_estimate):
    assert not unstable_estimate.stable
    d = unstable_direction(unstable_estimate)
    assert np.linalg.norm(d) == pytest.approx(1.0) and d[0] >= 0


def test_escapes_reach_both_attractors_along_eigendirection(unstable_orbit, unstable_estimate):
    res = run_escapes(VirtualRig(), unstable_orbit, unstable_estimate, range(8),
                      EscapeConfig(n_runs=8))
    assert set(res.attractor_counts) == {"high", "low"}
    ratios = res.alignment()
    assert len(ratios) > 0 and np.max(ratios) <= 0.1
    for r in res.runs:
        assert np.linalg.norm(r.poincare[0] - res.origin) < 0.03 * res.orbit_amplitude


def test_controller_holds_unstable_orbit(unstable_orbit):
    rig = VirtualRig(noise=NoiseConfig(0.02, seed=3))
    clean = rig.copy()
    clean.set_noise(amplitude=0.0)
    drive_to_orbit(clean, unstable_orbit)
    rig.state = RigState(clean.state.x, clean.state.xdot, 0.0)
    rec = rig.run(unstable_orbit.forcing, 200, ControlTarget(unstable_orbit.target).series)
    Np = rec.samples_per_period
    P = poincare_points(rec.x, Np, 10)
    origin = np.array([clean.state.x, P[0, 1]])
    dist = np.linalg.norm(P - origin, axis=1)
    assert np.max(dist) < 0.1 * unstable_orbit.response_amplitude


def test_floquet_branch_rows(duffing_run):
    sub = type(duffing_run)(duffing_run.points[::5], duffing_run.metadata)
    stab = floquet_branch(VirtualRig(), sub, FloquetConfig(repeats=2), seed_for=lambda i: i)
    assert not stab.failures
    rows = branch_rows(stab)
    assert len(rows[0]) == len(FLOQUET_COLUMNS)
    assert [r[4] for r in rows] == [0 if f else 1 for f in stab.flags]


def test_perturbation_study_shape(duffing_run, unstable_orbit):
    stable = nearest(duffing_run, 0.015)
    rows = perturbation_study(VirtualRig(), stable, unstable_orbit, (0.1, 0.5), repeats=3,
                              disturbance=NoiseConfig(0.02))
    assert [r.condition for r in rows] == [c for c in CONDITIONS for _ in range(2)]
    summary = study_summary(rows)
    amps, means, hws = summary["unstable_closed_loop"]
    assert np.all(means > 1) and np.all(hws > 0)
    _, m_open, h_open = summary["stable_open_loop"]
    _, m_closed, h_closed = summary["stable_closed_loop"]
    assert np.all(m_open < 1) and np.all(m_closed < 1)


def test_ci_overlap():
    assert ci_overlap((1.0, 0.1), (1.15, 0.06))
    assert not ci_overlap((1.0, 0.1), (1.2, 0.05))


@pytest.fixture(scope="module")
def full_study(duffing_run, unstable_orbit):
    return study_summary(perturbation_study(VirtualRig(), nearest(duffing_run, 0.015),
                                            unstable_orbit, repeats=10, seed=0,
                                            disturbance=NoiseConfig(0.02)))


@pytest.mark.parametrize("condition", CONDITIONS)
def test_ci_width_narrows_with_perturbation(full_study, condition):
    _, _, hw = full_study[condition]
    assert np.sum(np.diff(hw) > 0) <= 1


@pytest.mark.parametrize("condition", CONDITIONS)
def test_mean_modulus_plateau(full_study, condition):
    amps, means, _ = full_study[condition]
    tail = means[amps >= 0.2]
    assert (tail.max() - tail.min()) / tail.mean() < 0.05
