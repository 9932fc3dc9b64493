"""Reference Floquet analysis of the simulated plant.

Everything here integrates the open-loop plant directly (its own RK4 loop
at ten times the rig's sample rate), independently of the rig, the CBC
engine and the identification code it is used to check.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numba
import numpy as np
from scipy import linalg

from .errors import NotPeriodic, ShootingDiverged
from .sysid import FloquetResult, _sorted_eig

OVERSAMPLE = 10


@dataclass(frozen=True)
class OrbitInput:
    """Open-loop forcing ``gamma * cos(omega t + phase)``."""

    gamma: float
    omega: float
    phase: float = 0.0

    @classmethod
    def from_coefficients(cls, a, b, omega):
        return cls(math.hypot(a, b), omega, math.atan2(-b, a))

    @classmethod
    def from_point(cls, point):
        f = point.effective_forcing
        return cls.from_coefficients(f.a, f.b, f.omega)

    @property
    def period(self):
        return 2.0 * math.pi / self.omega


@numba.njit(cache=True)
def _accel(x, v, t, gamma, omega, phase, w0sq, c, alpha, geo, gk, gl0, glm):
    if geo:
        f = 2.0 * gk * x * (1.0 - gl0 / math.sqrt(glm * glm + x * x))
    else:
        f = w0sq * x + alpha * x ** 3
    return gamma * math.cos(omega * t + phase) - c * v - f


@numba.njit(cache=True)
def _stiffness(x, w0sq, alpha, geo, gk, gl0, glm):
    if geo:
        r2 = glm * glm + x * x
        return 2.0 * gk * (1.0 - gl0 * glm * glm / r2 ** 1.5)
    return w0sq + 3.0 * alpha * x * x


@numba.njit(cache=True)
def _rhs(y, t, gamma, omega, phase, w0sq, c, alpha, geo, gk, gl0, glm, out):
    x = y[0]
    v = y[1]
    out[0] = v
    out[1] = _accel(x, v, t, gamma, omega, phase, w0sq, c, alpha, geo, gk, gl0, glm)
    kx = _stiffness(x, w0sq, alpha, geo, gk, gl0, glm)
    # Variational matrix columns (y[2], y[3]) and (y[4], y[5]).
    for col in range(2):
        p = y[2 + 2 * col]
        q = y[3 + 2 * col]
        out[2 + 2 * col] = q
        out[3 + 2 * col] = -kx * p - c * q


@numba.njit(cache=True)
def _flow(x0, v0, n_steps, h, gamma, omega, phase, w0sq, c, alpha, geo, gk, gl0, glm):
    y = np.array([x0, v0, 1.0, 0.0, 0.0, 1.0])
    k1 = np.empty(6)
    k2 = np.empty(6)
    k3 = np.empty(6)
    k4 = np.empty(6)
    tmp = np.empty(6)
    for i in range(n_steps):
        t = i * h
        _rhs(y, t, gamma, omega, phase, w0sq, c, alpha, geo, gk, gl0, glm, k1)
        for j in range(6):
            tmp[j] = y[j] + 0.5 * h * k1[j]
        _rhs(tmp, t + 0.5 * h, gamma, omega, phase, w0sq, c, alpha, geo, gk, gl0, glm, k2)
        for j in range(6):
            tmp[j] = y[j] + 0.5 * h * k2[j]
        _rhs(tmp, t + 0.5 * h, gamma, omega, phase, w0sq, c, alpha, geo, gk, gl0, glm, k3)
        for j in range(6):
            tmp[j] = y[j] + h * k3[j]
        _rhs(tmp, t + h, gamma, omega, phase, w0sq, c, alpha, geo, gk, gl0, glm, k4)
        for j in range(6):
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
    return y


def _plant_args(params):
    geo = params.spring_geometry
    if geo is None:
        return (params.natural_frequency**2, params.damping, params.cubic_stiffness,
                False, 0.0, 0.0, 1.0)
    return (params.natural_frequency**2, params.damping, 0.0, True,
            geo.spring_constant / geo.mass, geo.rest_length, geo.mount_length)


def period_steps(params, omega):
    return OVERSAMPLE * params.samples_per_period(omega)


def period_map(params, orbit_input, state, n_periods=1):
    """Open-loop state after ``n_periods`` and the accumulated Jacobian."""
    n = period_steps(params, orbit_input.omega)
    h = orbit_input.period / n
    x, v = float(state[0]), float(state[1])
    J = np.eye(2)
    for _ in range(n_periods):
        y = _flow(x, v, n, h, orbit_input.gamma, orbit_input.omega, orbit_input.phase,
                  *_plant_args(params))
        x, v = y[0], y[1]
        J = np.array([[y[2], y[4]], [y[3], y[5]]]) @ J
    return np.array([x, v]), J


def _return_distance(params, orbit_input, state):
    end, _ = period_map(params, orbit_input, state)
    d = end - np.asarray(state, dtype=float)
    return math.hypot(d[0], d[1] / orbit_input.omega)


class ShootingResult(NamedTuple):
    state: np.ndarray
    iterations: int
    residual: float


def refine_orbit_shooting(params, orbit_input, initial_guess, tol=1e-10, max_iter=8):
    """Newton iteration on the period-return map.

    The Jacobian is the monodromy from the variational equation. The
    residual is ``|(dx, dv/omega)|`` in metres.
    """
    s = np.array(initial_guess, dtype=float)
    w = orbit_input.omega
    for it in range(max_iter + 1):
        end, J = period_map(params, orbit_input, s)
        F = end - s
        residual = math.hypot(F[0], F[1] / w)
        if not np.isfinite(residual):
            break
        if residual <= tol:
            return ShootingResult(s, it, residual)
        if it == max_iter:
            break
        s = s - np.linalg.solve(J - np.eye(2), F)
        if not np.all(np.isfinite(s)) or abs(s[0]) > 10 * params.displacement_limit:
            break
    raise ShootingDiverged(f"shooting did not reach {tol:g} in {max_iter} iterations")


@dataclass
class VariationalResult:
    monodromy: np.ndarray
    multipliers: np.ndarray
    eigenvectors: np.ndarray
    state: np.ndarray
    orbit_input: OrbitInput
    return_residual: float

    @property
    def moduli(self):
        return np.abs(self.multipliers)

    @property
    def stable(self):
        return bool(np.max(self.moduli) < 1.0)

    def to_floquet_result(self):
        return FloquetResult(self.monodromy, self.multipliers, self.eigenvectors,
                             stable=self.stable, source="oracle")


def variational_multipliers(params, orbit_input, initial_state_on_orbit, tol=1e-8, refine=True):
    """Floquet multipliers from the first variational equation.

    If the supplied state does not return to within ``tol`` after one
    period it is refined by shooting (when ``refine`` is set); a state that
    cannot be made periodic raises :class:`NotPeriodic`.
    """
    state = np.array(initial_state_on_orbit, dtype=float)
    residual = _return_distance(params, orbit_input, state)
    if residual > tol:
        if not refine:
            raise NotPeriodic(f"return distance {residual:.3g} exceeds {tol:g}")
        try:
            state, _, residual = refine_orbit_shooting(params, orbit_input, state, tol=min(tol, 1e-10))
        except ShootingDiverged as exc:
            raise NotPeriodic(str(exc)) from exc
    _, M = period_map(params, orbit_input, state)
    vals, vecs = _sorted_eig(M)
    return VariationalResult(M, vals, vecs, state, orbit_input, residual)


def brute_force_monodromy(params, orbit_input, state_on_orbit, eps=1e-6):
    """Central-difference Jacobian of the one-period map.

    ``eps`` is relative: the position is perturbed by ``eps`` times the orbit
    size ``|(x, xdot/omega)|`` (at least 1 mm) and the velocity by ``omega``
    times that.
    """
    s = np.array(state_on_orbit, dtype=float)
    w = orbit_input.omega
    scale = max(math.hypot(s[0], s[1] / w), 1e-3)
    steps = (eps * scale, eps * scale * w)
    M = np.empty((2, 2))
    for col in range(2):
        d = np.zeros(2)
        d[col] = steps[col]
        plus, _ = period_map(params, orbit_input, s + d)
        minus, _ = period_map(params, orbit_input, s - d)
        M[:, col] = (plus - minus) / (2.0 * steps[col])
    return M


def linear_multipliers(params, omega):
    """Exact multipliers of the linear plant (``cubic_stiffness = 0``)."""
    w0 = params.natural_frequency
    z = params.damping_ratio
    T = 2.0 * math.pi / omega
    if z < 1.0:
        wd = w0 * math.sqrt(1.0 - z * z)
        mu = np.exp(complex(-z * w0, wd) * T)
        return np.array([mu, mu.conjugate()])
    A = np.array([[0.0, 1.0], [-w0**2, -2 * z * w0]])
    return np.sort_complex(np.linalg.eigvals(linalg.expm(A * T)))[::-1]


def liouville_determinant(params, omega):
    """det(monodromy) = exp(-2 zeta w0 T) for linear damping."""
    return math.exp(-params.damping * 2.0 * math.pi / omega)


def linear_response(params, omega):
    """Complex receptance H(i omega) of the linearised plant."""
    w0 = params.natural_frequency
    return 1.0 / complex(w0**2 - omega**2, params.damping * omega)


def settle_open_loop(params, orbit_input, state, n_periods=200):
    """Iterate the period map; used to land on stable orbits."""
    end, _ = period_map(params, orbit_input, state, n_periods)
    return end
