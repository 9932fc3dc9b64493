import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbclab.errors import DelayTooLong, NonIntegerPeriodSpan
from cbclab.signals import (FourierSeries, delay_embed, effective_forcing, fourier_coeffs,
                            response_amplitude, synthesize)

OMEGA = 2 * math.pi * 2.5


def grid(omega=OMEGA, periods=4, rate=1000.0):
    n = int(round(periods * 2 * math.pi / omega * rate))
    return np.arange(n) * (periods * 2 * math.pi / omega / n)


def test_constant_signal():
    t = grid()
    s = fourier_coeffs(np.full_like(t, 0.7), t, OMEGA)
    assert s.a0 == pytest.approx(1.4, abs=1e-12)
    assert np.max(np.abs(s.harmonics)) < 1e-12


def test_unit_cosine():
    t = grid()
    s = fourier_coeffs(np.cos(OMEGA * t), t, OMEGA)
    assert s.harmonics[0, 0] == pytest.approx(1.0, abs=1e-6)
    rest = np.concatenate(([s.a0], s.harmonics.ravel()[1:]))
    assert np.max(np.abs(rest)) <= 1e-6


def test_offset_second_harmonic():
    t = grid()
    s = fourier_coeffs(0.3 * np.sin(2 * OMEGA * t) + 0.1, t, OMEGA)
    assert s.a0 == pytest.approx(0.2, abs=1e-6)
    assert s.harmonics[1, 1] == pytest.approx(0.3, abs=1e-6)
    h = s.harmonics.copy()
    h[1, 1] = 0.0
    assert np.max(np.abs(h)) <= 1e-6


def test_non_integer_span_rejected():
    t = grid()[:-37]
    with pytest.raises(NonIntegerPeriodSpan):
        fourier_coeffs(np.cos(OMEGA * t), t, OMEGA)


def test_last_periods_only():
    t = grid(periods=4)
    x = np.where(t < 2 * 2 * math.pi / OMEGA, 5.0, 0.0) + np.cos(OMEGA * t)
    s = fourier_coeffs(x, t, OMEGA, periods=2)
    assert s.a0 == pytest.approx(0.0, abs=1e-9)
    assert s.harmonics[0, 0] == pytest.approx(1.0, abs=1e-9)


def test_synthesize_zero_and_cosine():
    t = np.linspace(0, 1, 17)
    v, d = synthesize(FourierSeries.zeros(OMEGA), t)
    assert np.all(v == 0) and np.all(d == 0)
    s = FourierSeries(OMEGA, 0.0, [[1.0, 0.0]])
    v, d = synthesize(s, t)
    np.testing.assert_allclose(v, np.cos(OMEGA * t), atol=1e-15)
    np.testing.assert_allclose(d, -OMEGA * np.sin(OMEGA * t), atol=1e-13)


def test_response_amplitude_and_forcing():
    assert response_amplitude(FourierSeries(OMEGA, 0, [[3.0, 4.0]])) == 5.0
    assert response_amplitude(FourierSeries.zeros(OMEGA)) == 0.0
    assert effective_forcing(3, 0, 0, 0)[0] == 3.0
    assert effective_forcing(0, 0, 3, 4)[0] == 5.0


def test_effective_forcing_phase_reproduces_input():
    gamma, phi = effective_forcing(0.4, -0.2, 0.3, 0.5)
    t = np.linspace(0, 1, 50)
    direct = 0.7 * np.cos(OMEGA * t) + 0.3 * np.sin(OMEGA * t)
    np.testing.assert_allclose(gamma * np.cos(OMEGA * t + phi), direct, atol=1e-14)


def test_delay_embed_pairs():
    e = delay_embed(np.array([1.0, 2.0, 3.0]), 1.0)
    np.testing.assert_array_equal(e.as_array(), [[2, 1], [3, 2]])
    with pytest.raises(DelayTooLong):
        delay_embed(np.array([1.0, 2.0]), 2.0)


def test_quarter_period_delay_is_circle():
    T = 2 * math.pi / OMEGA
    t = grid(periods=2)
    dt = t[1] - t[0]
    e = delay_embed(np.cos(OMEGA * t), T / 4, dt=dt)
    np.testing.assert_allclose(e.current**2 + e.delayed**2, 1.0, atol=1e-6)


def test_series_serialisation_round_trip():
    s = FourierSeries(OMEGA, 0.25, np.arange(14.0).reshape(7, 2))
    r = FourierSeries.from_json(s.to_json())
    assert r.omega == s.omega and r.a0 == s.a0
    np.testing.assert_array_equal(r.harmonics, s.harmonics)


coeff = st.floats(-2.0, 2.0, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(st.lists(coeff, min_size=15, max_size=15))
def test_round_trip_and_parseval(vec):
    s = FourierSeries.from_vector(OMEGA, vec)
    t = grid(periods=1)
    x, _ = synthesize(s, t)
    r = fourier_coeffs(x, t, OMEGA, n_harmonics=7)
    np.testing.assert_allclose(r.coefficient_vector(), s.coefficient_vector(), atol=1e-9)
    power = np.mean(x**2)
    expected = s.a0**2 / 4 + 0.5 * np.sum(s.harmonics**2)
    assert power == pytest.approx(expected, rel=1e-9, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(coeff, coeff, coeff, coeff, st.floats(-math.pi, math.pi))
def test_effective_forcing_rotation_invariant(a, b, au, bu, theta):
    c, s = math.cos(theta), math.sin(theta)
    rot = lambda p, q: (c * p - s * q, s * p + c * q)
    g0, _ = effective_forcing(a, b, au, bu)
    g1, _ = effective_forcing(*rot(a, b), *rot(au, bu))
    assert g1 == pytest.approx(g0, abs=1e-12)


def test_resonance_amplitude_on_linear_plant():
    from cbclab.cbc import continuation_sweep
    from cbclab.oracle import linear_response
    from cbclab.rig import RigParams, VirtualRig

    params = RigParams(cubic_stiffness=0.0)
    w0 = params.natural_frequency
    p = continuation_sweep(VirtualRig(params=params), w0, [0.01]).points[0]
    expected = abs(linear_response(params, w0)) * p.gamma
    assert response_amplitude(p.response) == pytest.approx(expected, rel=0.01)


def _winding_number(x, y):
    x, y = np.append(x, x[0]), np.append(y, y[0])
    ang = np.unwrap(np.arctan2(y - y.mean(), x - x.mean()))
    return (ang[-1] - ang[0]) / (2 * math.pi)


def test_fifth_period_delay_gives_a_single_loop(duffing_run):
    from conftest import nearest
    from cbclab.cbc import drive_to_orbit
    from cbclab.rig import VirtualRig

    p = nearest(duffing_run, 0.015)
    rec = drive_to_orbit(VirtualRig(), p).record.tail(2)
    T = 2 * math.pi / p.omega
    emb = delay_embed(rec.x, T / 5, rec.dt)
    # One period of the embedded curve after the delay has filled.
    n = len(rec.x) // 2
    w = _winding_number(emb.current[-n:], emb.delayed[-n:])
    assert abs(w) == pytest.approx(1.0, abs=1e-6)
