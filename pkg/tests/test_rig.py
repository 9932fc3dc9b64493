import math

import numpy as np
import pytest
from scipy import signal

from cbclab.errors import DisplacementLimitExceeded, PhaseMisaligned
from cbclab.oracle import linear_response
from cbclab.rig import (ControllerConfig, Forcing, NoiseConfig, RigParams, RigState,
                        SampledRecord, SpringGeometry, VirtualRig, gaussian_stream, noise_sample,
                        noise_sequence, run_segment, step)
from cbclab.signals import FourierSeries, fourier_coeffs, response_amplitude

OFF = ControllerConfig(enabled=False)


def test_equilibrium_stays_zero():
    target = FourierSeries.zeros(2 * math.pi * 2.5)
    state, rec = run_segment(RigState(), RigParams(), ControllerConfig(), target,
                             Forcing(0, 0, 2 * math.pi * 2.5), n_periods=3)
    assert state.x == 0 and state.xdot == 0
    assert not np.any(rec.x) and not np.any(rec.u)


def test_linear_steady_state_matches_receptance():
    params = RigParams(cubic_stiffness=0.0)
    omega = 2 * math.pi * 2.8
    forcing = Forcing(1.0, 0.0, omega)
    state, rec = run_segment(RigState(), params, OFF, None, forcing, n_periods=150)
    last = rec.tail(1)
    amp = response_amplitude(fourier_coeffs(last.x, last.t, omega))
    assert amp == pytest.approx(abs(linear_response(params, omega)), rel=1e-6)


def test_displacement_limit():
    with pytest.raises(DisplacementLimitExceeded):
        run_segment(RigState(), RigParams(), OFF, None, Forcing(50.0, 0, 2 * math.pi * 2.55),
                    n_periods=20)


def test_one_second_record():
    state, rec = run_segment(RigState(), RigParams(), OFF, None, Forcing(0.1, 0, 2 * math.pi))
    assert len(rec) == 1000
    assert rec.dt == pytest.approx(1e-3)
    assert state.t == pytest.approx(1.0)


def test_phase_misaligned():
    with pytest.raises(PhaseMisaligned):
        run_segment(RigState(t=0.0123), RigParams(), OFF, None, Forcing(0.1, 0, 2 * math.pi))


def test_same_seed_bitwise_identical():
    noise = NoiseConfig(0.3, seed=5)
    f = Forcing(0.2, 0.1, 2 * math.pi * 2.9)
    runs = [run_segment(RigState(), RigParams(), ControllerConfig(), None, f, noise, 5)[1]
            for _ in range(2)]
    for ch in ("x", "xdot", "u", "i", "eta"):
        assert np.array_equal(getattr(runs[0], ch), getattr(runs[1], ch))
    other = run_segment(RigState(), RigParams(), ControllerConfig(), None, f,
                        NoiseConfig(0.3, seed=6), 5)[1]
    assert not np.array_equal(other.eta, runs[0].eta)


def test_settled_periods_repeat():
    rig = VirtualRig(controller=OFF)
    f = Forcing(0.3, 0.0, 2 * math.pi * 2.2)
    rig.run(f, 250)
    a = rig.run(f, 1)
    b = rig.run(f, 1)
    np.testing.assert_allclose(a.x, b.x, atol=1e-8)


def test_zero_amplitude_noise_is_zero():
    assert np.all(noise_sequence(NoiseConfig(0.0), 1000.0, 100) == 0)
    value, _, counter = noise_sample(np.zeros(6), 0, NoiseConfig(0.0), 1000.0)
    assert value == 0.0


def test_box_muller_moments():
    z = 0.5 * gaussian_stream(11, 1_000_000)
    assert abs(z.mean()) < 0.01
    assert z.var() == pytest.approx(0.25, rel=0.02)


def test_noise_sample_matches_block():
    noise = NoiseConfig(0.4, seed=3)
    block = noise_sequence(noise, 1000.0, 50)
    zi, counter, seq = np.zeros(6), 0, []
    for _ in range(50):
        v, zi, counter = noise_sample(zi, counter, noise, 1000.0)
        seq.append(v)
    np.testing.assert_allclose(seq, block, rtol=0, atol=1e-15)


def test_filter_attenuation_at_twice_cutoff():
    noise = NoiseConfig(1.0, cutoff_frequency=10.0, filter_order=6, seed=1)
    x = noise_sequence(noise, 1000.0, 2**20)
    f, p = signal.welch(x, fs=1000.0, nperseg=8192)
    passband = np.mean(p[(f > 1) & (f < 5)])
    at = np.interp(20.0, f, p)
    assert 10 * np.log10(passband / at) >= 35.0


def test_filter_state_persists_between_segments():
    noise = NoiseConfig(0.3, seed=9)
    f = Forcing(0.0, 0.0, 2 * math.pi * 2.5)
    _, whole = run_segment(RigState(), RigParams(), OFF, None, f, noise, 4)
    s, a = run_segment(RigState(), RigParams(), OFF, None, f, noise, 2)
    _, b = run_segment(s, RigParams(), OFF, None, f, noise, 2)
    np.testing.assert_array_equal(np.concatenate((a.eta, b.eta)), whole.eta)


def test_step_matches_segment():
    p, c = RigParams(), ControllerConfig()
    target = FourierSeries(2 * math.pi * 2.9, 0.0, [[0.01, 0.0]])
    f = Forcing(0.0, 0.0, 2 * math.pi * 2.9)
    s1 = step(RigState(x=0.01), p, c, target, f)
    s2, _ = run_segment(RigState(x=0.01), p, c, target, f, n_periods=1)
    assert s1.t == pytest.approx(p.step_size(f.omega))
    assert s1.x != 0.01 and s2.x != s1.x


def test_input_decomposition():
    noise = NoiseConfig(0.2, seed=4)
    target = FourierSeries(2 * math.pi * 2.9, 0.0, [[0.02, 0.0]])
    f = Forcing(0.1, -0.05, 2 * math.pi * 2.9)
    _, rec = run_segment(RigState(), RigParams(), ControllerConfig(), target, f, noise, 3)
    np.testing.assert_allclose(rec.i, rec.forcing_signal + rec.u + rec.eta, atol=1e-14)


def test_controller_off_gives_zero_u():
    target = FourierSeries(2 * math.pi * 2.9, 0.0, [[0.02, 0.0]])
    _, rec = run_segment(RigState(), RigParams(), OFF, target, Forcing(0.1, 0, 2 * math.pi * 2.9),
                         NoiseConfig(0.2), 3)
    assert np.all(rec.u == 0)


def _energy(params, x, v):
    return 0.5 * v**2 + 0.5 * params.natural_frequency**2 * x**2 + 0.25 * params.cubic_stiffness * x**4


def test_free_decay_energy_monotone():
    params = RigParams()
    _, rec = run_segment(RigState(x=0.04), params, OFF, None, Forcing(0, 0, 2 * math.pi * 2.5),
                         n_periods=10)
    E = _energy(params, rec.x, rec.xdot)
    assert np.all(np.diff(E) <= 1e-12 * E[0])
    assert E[-1] < 0.5 * E[0]


def test_geometric_spring_is_odd_and_symmetric():
    geo = SpringGeometry(spring_constant=256.7, rest_length=0.05, mount_length=0.1)
    x = np.linspace(-0.05, 0.05, 11)
    np.testing.assert_allclose(geo.force(-x), -geo.force(x), atol=1e-15)
    params = RigParams(spring_geometry=geo)
    omega = 2 * math.pi * 2.0
    rig = VirtualRig(params=params, controller=OFF)
    rig.run(Forcing(1.0, 0.0, omega), 200)
    rec = rig.run(Forcing(1.0, 0.0, omega), 1)
    assert abs(rec.x.mean()) < 1e-6
    assert np.ptp(rec.x) > 1e-3


def test_record_csv_round_trip(tmp_path):
    f = Forcing(0.1, 0.0, 2 * math.pi * 2.9)
    _, rec = run_segment(RigState(), RigParams(), ControllerConfig(), None, f, NoiseConfig(0.1), 1)
    path = tmp_path / "rec.csv"
    rec.to_csv(path)
    back = SampledRecord.from_csv(path, f)
    for ch in ("t", "x", "xdot", "u", "i", "eta"):
        np.testing.assert_array_equal(getattr(back, ch), getattr(rec, ch))
    assert path.read_text().splitlines()[0] == "t,x,xdot,u,i,eta"


def test_invalid_parameters():
    with pytest.raises(ValueError):
        RigParams(natural_frequency=0.0)
    with pytest.raises(ValueError):
        RigParams(displacement_limit=-1.0)
    with pytest.raises(ValueError):
        ControllerConfig(proportional_gain=float("inf"))
