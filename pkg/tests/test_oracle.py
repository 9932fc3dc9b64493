import math

import numpy as np
import pytest

from conftest import OMEGA_DUFFING, OMEGA_LINEAR, nearest
from cbclab.errors import NotPeriodic, ShootingDiverged
from cbclab.oracle import (OrbitInput, _flow, _plant_args, period_steps, brute_force_monodromy, liouville_determinant,
                           linear_multipliers, period_map, refine_orbit_shooting,
                           settle_open_loop, variational_multipliers)
from cbclab.rig import RigParams

DUFFING = RigParams()


def _linear_orbit_state(params, omega, gamma=1.0):
    H = 1.0 / complex(params.natural_frequency**2 - omega**2, params.damping * omega)
    X = gamma * H
    return np.array([X.real, -omega * X.imag])


def test_linear_exact(linear_params):
    inp = OrbitInput(1.0, OMEGA_LINEAR)
    res = variational_multipliers(linear_params, inp, _linear_orbit_state(linear_params, OMEGA_LINEAR))
    np.testing.assert_allclose(np.sort_complex(res.multipliers),
                               np.sort_complex(linear_multipliers(linear_params, OMEGA_LINEAR)),
                               atol=1e-9)


def test_undamped_linear_on_unit_circle():
    params = RigParams(cubic_stiffness=0.0, damping_ratio=0.0)
    inp = OrbitInput(1.0, OMEGA_LINEAR)
    res = variational_multipliers(params, inp, _linear_orbit_state(params, OMEGA_LINEAR))
    np.testing.assert_allclose(res.moduli, 1.0, atol=1e-9)


@pytest.mark.parametrize("amplitude", [0.015, 0.035, 0.05])
def test_variational_matches_finite_differences(duffing_run, amplitude):
    p = nearest(duffing_run, amplitude)
    inp = OrbitInput.from_point(p)
    res = variational_multipliers(DUFFING, inp, p.state)
    M = brute_force_monodromy(DUFFING, inp, res.state)
    np.testing.assert_allclose(M, res.monodromy, atol=1e-5 * np.abs(res.monodromy).max())


@pytest.mark.parametrize("amplitude", [0.015, 0.035])
def test_determinant_is_liouville(duffing_run, amplitude):
    p = nearest(duffing_run, amplitude)
    res = variational_multipliers(DUFFING, OrbitInput.from_point(p), p.state)
    assert np.linalg.det(res.monodromy) == pytest.approx(
        liouville_determinant(DUFFING, OMEGA_DUFFING), rel=1e-8)


def test_finite_difference_step_halving(duffing_run):
    p = nearest(duffing_run, 0.035)
    inp = OrbitInput.from_point(p)
    s = refine_orbit_shooting(DUFFING, inp, p.state).state
    M1 = brute_force_monodromy(DUFFING, inp, s, 1e-4)
    M2 = brute_force_monodromy(DUFFING, inp, s, 5e-5)
    M3 = brute_force_monodromy(DUFFING, inp, s, 2.5e-5)
    # Second-order differences: the error drops about fourfold per halving.
    assert np.abs(M3 - M2).max() < 0.5 * np.abs(M2 - M1).max()


def test_shooting_from_orbit_needs_no_iteration(duffing_run):
    p = nearest(duffing_run, 0.035)
    inp = OrbitInput.from_point(p)
    s = refine_orbit_shooting(DUFFING, inp, p.state).state
    again = refine_orbit_shooting(DUFFING, inp, s)
    assert again.iterations == 0


@pytest.mark.parametrize("amplitude", [0.01, 0.035, 0.055])
def test_shooting_from_cbc_guess(duffing_run, amplitude):
    p = nearest(duffing_run, amplitude)
    res = refine_orbit_shooting(DUFFING, OrbitInput.from_point(p), p.state)
    assert res.iterations <= 5
    assert res.residual <= 1e-10


def test_shooting_diverges_from_bad_guess():
    inp = OrbitInput(0.5, OMEGA_DUFFING)
    with pytest.raises(ShootingDiverged):
        refine_orbit_shooting(DUFFING, inp, [0.07, 0.0], max_iter=1)


def test_not_periodic_without_refinement():
    with pytest.raises(NotPeriodic):
        variational_multipliers(DUFFING, OrbitInput(0.5, OMEGA_DUFFING), [0.02, 0.0], refine=False)


def _advance(inp, state, quarters):
    n = period_steps(DUFFING, inp.omega) // 4 * quarters
    y = _flow(float(state[0]), float(state[1]), n, quarters * inp.period / 4 / n, inp.gamma,
              inp.omega, inp.phase, *_plant_args(DUFFING))
    return np.array([y[0], y[1]])


def test_phase_shift_invariance(duffing_run):
    p = nearest(duffing_run, 0.035)
    inp = OrbitInput.from_point(p)
    base = variational_multipliers(DUFFING, inp, p.state)
    # Same orbit entered a quarter period later, with the forcing phase moved to match.
    state = _advance(inp, base.state, 1)
    shifted = OrbitInput(inp.gamma, inp.omega, inp.phase + math.pi / 2)
    other = variational_multipliers(DUFFING, shifted, state)
    np.testing.assert_allclose(np.sort(other.moduli), np.sort(base.moduli), atol=1e-10)


def test_stable_orbit_settles(duffing_run):
    p = nearest(duffing_run, 0.01)
    inp = OrbitInput.from_point(p)
    end = settle_open_loop(DUFFING, inp, [0.0, 0.0], 300)
    orbit = refine_orbit_shooting(DUFFING, inp, p.state).state
    np.testing.assert_allclose(end, orbit, atol=1e-6)


def test_classification(duffing_run):
    low = variational_multipliers(DUFFING, OrbitInput.from_point(nearest(duffing_run, 0.01)),
                                  nearest(duffing_run, 0.01).state)
    mid = nearest(duffing_run, 0.035)
    unstable = variational_multipliers(DUFFING, OrbitInput.from_point(mid), mid.state)
    assert low.stable and not unstable.stable
    assert unstable.to_floquet_result().source == "oracle"


def test_period_map_jacobian_identity_at_zero_periods():
    end, J = period_map(DUFFING, OrbitInput(0.1, OMEGA_DUFFING), [0.01, 0.0], n_periods=0)
    np.testing.assert_array_equal(J, np.eye(2))
    np.testing.assert_array_equal(end, [0.01, 0.0])


def test_equilibrium_monodromy_is_linear_flow():
    from scipy import linalg

    params = RigParams(cubic_stiffness=0.0, damping_ratio=0.0)
    inp = OrbitInput(0.0, OMEGA_LINEAR)
    res = variational_multipliers(params, inp, [0.0, 0.0])
    w0 = params.natural_frequency
    A = np.array([[0.0, 1.0], [-w0**2, 0.0]])
    np.testing.assert_allclose(res.monodromy, linalg.expm(A * inp.period), atol=1e-8)
