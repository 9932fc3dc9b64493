"""Fourier analysis/synthesis of periodic signals and delay embedding.

A periodic signal with fundamental ``omega`` is represented as::

    x(t) = a0/2 + sum_j A_j cos(j omega t) + B_j sin(j omega t)

which is the convention used for both control targets and measured
control actions.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DelayTooLong, NonIntegerPeriodSpan

DEFAULT_HARMONICS = 7
DEFAULT_AVERAGING_PERIODS = 10


@dataclass
class FourierSeries:
    """Truncated Fourier series of a periodic signal.

    Parameters
    ----------
    omega : float
        Fundamental angular frequency (rad/s).
    a0 : float
        Mean coefficient; the signal mean is ``a0 / 2``.
    harmonics : ndarray, shape (n_harmonics, 2)
        Rows are ``(A_j, B_j)`` for ``j = 1..n_harmonics``.
    """

    omega: float
    a0: float = 0.0
    harmonics: np.ndarray = field(default_factory=lambda: np.zeros((DEFAULT_HARMONICS, 2)))

    def __post_init__(self):
        self.harmonics = np.array(self.harmonics, dtype=float).reshape(-1, 2)
        if self.harmonics.shape[0] < 1:
            raise ValueError("a FourierSeries needs at least one harmonic")
        self.omega = float(self.omega)
        self.a0 = float(self.a0)

    @classmethod
    def zeros(cls, omega, n_harmonics=DEFAULT_HARMONICS):
        return cls(omega, 0.0, np.zeros((n_harmonics, 2)))

    @property
    def n_harmonics(self):
        return self.harmonics.shape[0]

    @property
    def period(self):
        return 2.0 * math.pi / self.omega

    def copy(self):
        return FourierSeries(self.omega, self.a0, self.harmonics.copy())

    def coefficient_vector(self):
        """Flatten to ``[a0, A1, B1, A2, B2, ...]``."""
        return np.concatenate(([self.a0], self.harmonics.ravel()))

    @classmethod
    def from_vector(cls, omega, vec):
        vec = np.asarray(vec, dtype=float)
        return cls(omega, vec[0], vec[1:].reshape(-1, 2))

    def __call__(self, t):
        return synthesize(self, t)[0]

    def to_dict(self):
        return {
            "omega": self.omega,
            "a0": self.a0,
            "harmonics": self.harmonics.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["omega"], d["a0"], np.asarray(d["harmonics"], dtype=float))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class DelayEmbedding:
    delay: float
    current: np.ndarray
    delayed: np.ndarray
    phase: np.ndarray = None

    def __len__(self):
        return len(self.current)

    def as_array(self):
        cols = [self.current, self.delayed]
        if self.phase is not None:
            cols.append(self.phase)
        return np.column_stack(cols)


def _harmonic_basis(t, omega, n_harmonics):
    j = np.arange(1, n_harmonics + 1)
    arg = np.multiply.outer(np.asarray(t, dtype=float) * omega, j)
    return np.cos(arg), np.sin(arg)


def synthesize(series, t):
    """Evaluate a series and its analytic time derivative at ``t``.

    Returns
    -------
    value, derivative : float or ndarray
    """
    scalar = np.ndim(t) == 0
    c, s = _harmonic_basis(np.atleast_1d(t), series.omega, series.n_harmonics)
    A = series.harmonics[:, 0]
    B = series.harmonics[:, 1]
    jw = series.omega * np.arange(1, series.n_harmonics + 1)
    value = 0.5 * series.a0 + c @ A + s @ B
    deriv = s @ (-jw * A) + c @ (jw * B)
    if scalar:
        return float(value[0]), float(deriv[0])
    return value, deriv


def periods_in_span(n_samples, dt, omega):
    """Number of whole forcing periods covered by ``n_samples`` at spacing ``dt``.

    Raises NonIntegerPeriodSpan if the span is not a whole number of periods
    to within half a sample.
    """
    period = 2.0 * math.pi / omega
    span = n_samples * dt
    n_periods = int(round(span / period))
    if n_periods < 1 or abs(span - n_periods * period) > 0.5 * dt:
        raise NonIntegerPeriodSpan(
            f"record of {n_samples} samples ({span:.6g} s) is not a whole number "
            f"of periods of {period:.6g} s"
        )
    return n_periods


def fourier_coeffs(values, t, omega, n_harmonics=DEFAULT_HARMONICS, periods=None):
    """Fourier coefficients of a sampled periodic signal.

    The record must cover a whole number of forcing periods on a uniform grid
    (endpoint excluded). The coefficient integrals are evaluated with the
    trapezoidal rule, which on a periodic uniform grid reduces to a plain
    mean. With ``periods`` set, only the final ``periods`` periods are used.
    """
    values = np.asarray(values, dtype=float)
    t = np.asarray(t, dtype=float)
    if values.shape != t.shape or values.ndim != 1:
        raise ValueError("values and t must be 1-D arrays of equal length")
    if len(t) < 2:
        raise NonIntegerPeriodSpan("need at least two samples")
    dt = t[1] - t[0]
    n_periods = periods_in_span(len(t), dt, omega)
    if periods is not None:
        if periods < 1 or periods > n_periods:
            raise ValueError(f"cannot average over {periods} of {n_periods} periods")
        keep = int(round(len(t) * periods / n_periods))
        values = values[-keep:]
        t = t[-keep:]
    c, s = _harmonic_basis(t, omega, n_harmonics)
    scale = 2.0 / len(t)
    a0 = scale * values.sum()
    harmonics = np.column_stack((scale * values @ c, scale * values @ s))
    return FourierSeries(omega, a0, harmonics)


def response_amplitude(series):
    """Magnitude of the fundamental, ``sqrt(A1**2 + B1**2)``."""
    return float(math.hypot(series.harmonics[0, 0], series.harmonics[0, 1]))


def effective_forcing(a, b, a1_u, b1_u):
    """Lump the fundamental control action into the forcing.

    Returns ``(gamma, phase)`` such that the total fundamental input is
    ``gamma * cos(omega t + phase)``.
    """
    c = a + a1_u
    s = b + b1_u
    return math.hypot(c, s), math.atan2(-s, c)


def delay_embed(values, tau, dt=1.0, t=None, period=None):
    """Pair each sample with the sample ``tau`` seconds earlier.

    ``tau / dt`` must be a positive whole number of samples. If ``t`` and
    ``period`` are given, the phase channel ``t mod period`` is included.
    """
    values = np.asarray(values, dtype=float)
    lag = tau / dt
    n_lag = int(round(lag))
    if n_lag < 1 or abs(lag - n_lag) > 1e-9 * max(1.0, lag):
        raise ValueError(f"delay {tau} is not a positive whole number of samples")
    if n_lag >= len(values):
        raise DelayTooLong(f"delay of {n_lag} samples exceeds record of {len(values)}")
    phase = None
    if t is not None and period is not None:
        phase = np.mod(np.asarray(t, dtype=float)[n_lag:], period)
    return DelayEmbedding(tau, values[n_lag:].copy(), values[:-n_lag].copy(), phase)
