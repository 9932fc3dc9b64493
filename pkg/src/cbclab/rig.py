"""Simulated feedback-controlled forced oscillator.

The plant is a forced hardening oscillator

    x'' + 2 zeta w0 x' + f(x) = i(t) + w(t)

with ``f(x) = w0**2 x + alpha x**3`` (Duffing) or the restoring force of a
pair of springs mounted perpendicular to the direction of motion. The input
``i(t) = p(t) + u(t) + eta(t)`` is the sinusoidal forcing, the PD control
action and the injected perturbation; ``w(t)`` is an optional unmeasured
disturbance that never appears in the recorded input.

Integration is classical RK4 on a fixed grid. The step is chosen so that a
forcing period holds a whole number of samples (a multiple of
``RigParams.period_lock``) as close as possible to the nominal sample rate;
records are therefore period-locked. The control law is evaluated at every
RK4 stage, the perturbation is held constant across a step.

Random numbers come from a counter-based generator (SplitMix64 finaliser
applied to ``seed`` and a draw counter), so a rig state is fully described by
plain numbers and replays are bitwise identical.
"""

import csv
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy import signal

from .errors import DisplacementLimitExceeded, PhaseMisaligned
from .signals import FourierSeries

DEFAULT_NATURAL_FREQUENCY = 2.0 * math.pi * 2.55
DEFAULT_DAMPING_RATIO = 0.03
DEFAULT_CUBIC_STIFFNESS = 5.0e4
DEFAULT_LIMIT = 0.08

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO_M53 = 1.0 / 9007199254740992.0


@numba.njit(cache=True)
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _uniform(seed, counter):
    key = _mix64(np.uint64(seed) + _GOLDEN)
    z = _mix64(key + np.uint64(counter) * _GOLDEN)
    return float(z >> np.uint64(11)) * _TWO_M53


@numba.njit(cache=True)
def _gaussian(seed, counter):
    # Box-Muller: draw pair counter//2 uses uniforms 2p and 2p+1.
    pair = counter // 2
    u1 = 1.0 - _uniform(seed, 2 * pair)
    u2 = _uniform(seed, 2 * pair + 1)
    r = math.sqrt(-2.0 * math.log(u1))
    if counter % 2 == 0:
        return r * math.cos(2.0 * math.pi * u2)
    return r * math.sin(2.0 * math.pi * u2)


@numba.njit(cache=True)
def _sos_step(sos, zi, x):
    y = x
    for s in range(sos.shape[0]):
        b0 = sos[s, 0]
        b1 = sos[s, 1]
        b2 = sos[s, 2]
        a1 = sos[s, 4]
        a2 = sos[s, 5]
        out = b0 * y + zi[s, 0]
        zi[s, 0] = b1 * y - a1 * out + zi[s, 1]
        zi[s, 1] = b2 * y - a2 * out
        y = out
    return y


@numba.njit(cache=True)
def _gaussian_block(seed, counter, n, out):
    for k in range(n):
        out[k] = _gaussian(seed, counter + k)


@numba.njit(cache=True)
def _filter_block(sos, zi, xs, out):
    for k in range(xs.shape[0]):
        out[k] = _sos_step(sos, zi, xs[k])


@numba.njit(cache=True)
def _restoring(x, geometric, w0sq, alpha, gk, gl0, glm):
    if geometric:
        return 2.0 * gk * x * (1.0 - gl0 / math.sqrt(glm * glm + x * x))
    return w0sq * x + alpha * x * x * x


@numba.njit(cache=True)
def _drive(t, omega, fa, fb, ta0, ta, tb):
    """Forcing p(t), target x*(t) and its derivative at time t."""
    c1 = math.cos(omega * t)
    s1 = math.sin(omega * t)
    p = fa * c1 + fb * s1
    val = 0.5 * ta0
    der = 0.0
    c = c1
    s = s1
    for j in range(ta.shape[0]):
        jw = (j + 1) * omega
        val += ta[j] * c + tb[j] * s
        der += jw * (tb[j] * c - ta[j] * s)
        c, s = c * c1 - s * s1, s * c1 + c * s1
    return p, val, der


@numba.njit(cache=True)
def _simulate(x, v, t0, dt, n_steps, omega,
              w0sq, c_damp, alpha, geometric, gk, gl0, glm, limit,
              ctrl_on, kp, kd, ta0, ta, tb, fa, fb,
              n_amp, n_sos, n_zi, n_seed, n_ctr,
              d_amp, d_sos, d_zi, d_seed, d_ctr,
              out_t, out_x, out_v, out_u, out_i, out_eta):
    h = dt
    for k in range(n_steps):
        t = t0 + k * dt
        eta = 0.0
        if n_amp != 0.0:
            eta = _sos_step(n_sos, n_zi, n_amp * _gaussian(n_seed, n_ctr))
            n_ctr += 1
        dist = 0.0
        if d_amp != 0.0:
            dist = _sos_step(d_sos, d_zi, d_amp * _gaussian(d_seed, d_ctr))
            d_ctr += 1
        held = eta + dist

        p1, xs1, vs1 = _drive(t, omega, fa, fb, ta0, ta, tb)
        u1 = kp * (xs1 - x) + kd * (vs1 - v) if ctrl_on else 0.0
        out_t[k] = t
        out_x[k] = x
        out_v[k] = v
        out_u[k] = u1
        out_i[k] = p1 + u1 + eta
        out_eta[k] = eta

        a1 = p1 + u1 + held - c_damp * v - _restoring(x, geometric, w0sq, alpha, gk, gl0, glm)
        k1x = v
        k1v = a1

        p2, xs2, vs2 = _drive(t + 0.5 * h, omega, fa, fb, ta0, ta, tb)
        x2 = x + 0.5 * h * k1x
        v2 = v + 0.5 * h * k1v
        u2 = kp * (xs2 - x2) + kd * (vs2 - v2) if ctrl_on else 0.0
        k2x = v2
        k2v = p2 + u2 + held - c_damp * v2 - _restoring(x2, geometric, w0sq, alpha, gk, gl0, glm)

        x3 = x + 0.5 * h * k2x
        v3 = v + 0.5 * h * k2v
        u3 = kp * (xs2 - x3) + kd * (vs2 - v3) if ctrl_on else 0.0
        k3x = v3
        k3v = p2 + u3 + held - c_damp * v3 - _restoring(x3, geometric, w0sq, alpha, gk, gl0, glm)

        p4, xs4, vs4 = _drive(t + h, omega, fa, fb, ta0, ta, tb)
        x4 = x + h * k3x
        v4 = v + h * k3v
        u4 = kp * (xs4 - x4) + kd * (vs4 - v4) if ctrl_on else 0.0
        k4x = v4
        k4v = p4 + u4 + held - c_damp * v4 - _restoring(x4, geometric, w0sq, alpha, gk, gl0, glm)

        x = x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        v = v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        if not (abs(x) <= limit):
            return x, v, n_ctr, d_ctr, k + 1, 1
    return x, v, n_ctr, d_ctr, n_steps, 0


@dataclass(frozen=True)
class SpringGeometry:
    """Two springs mounted perpendicular to the motion.

    The restoring force is ``2 k x (1 - rest_length / sqrt(mount_length**2 + x**2))``,
    divided by ``mass`` to give an acceleration.
    """

    spring_constant: float
    rest_length: float
    mount_length: float
    mass: float = 1.0

    def force(self, x):
        return 2.0 * self.spring_constant * x * (
            1.0 - self.rest_length / np.sqrt(self.mount_length**2 + np.square(x))
        )


@dataclass(frozen=True)
class RigParams:
    natural_frequency: float = DEFAULT_NATURAL_FREQUENCY
    damping_ratio: float = DEFAULT_DAMPING_RATIO
    cubic_stiffness: float = DEFAULT_CUBIC_STIFFNESS
    spring_geometry: SpringGeometry = None
    displacement_limit: float = DEFAULT_LIMIT
    sample_rate: float = 1000.0
    period_lock: int = 20

    def __post_init__(self):
        if not self.natural_frequency > 0:
            raise ValueError("natural_frequency must be positive")
        if not self.damping_ratio >= 0:
            raise ValueError("damping_ratio must be non-negative")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if not self.displacement_limit > 0:
            raise ValueError("displacement_limit must be positive")
        if self.period_lock < 1:
            raise ValueError("period_lock must be a positive integer")

    def restoring(self, x):
        """Restoring acceleration f(x)."""
        if self.spring_geometry is not None:
            return self.spring_geometry.force(x) / self.spring_geometry.mass
        return self.natural_frequency**2 * x + self.cubic_stiffness * x**3

    def restoring_slope(self, x):
        """df/dx, used by the variational equation."""
        if self.spring_geometry is not None:
            g = self.spring_geometry
            r2 = g.mount_length**2 + x * x
            return 2.0 * g.spring_constant / g.mass * (
                1.0 - g.rest_length * g.mount_length**2 / r2**1.5
            )
        return self.natural_frequency**2 + 3.0 * self.cubic_stiffness * x * x

    @property
    def damping(self):
        return 2.0 * self.damping_ratio * self.natural_frequency

    def samples_per_period(self, omega):
        """Samples per forcing period: nearest multiple of ``period_lock``."""
        period = 2.0 * math.pi / omega
        lock = self.period_lock
        return max(lock, lock * int(round(self.sample_rate * period / lock)))

    def step_size(self, omega):
        return 2.0 * math.pi / omega / self.samples_per_period(omega)


@dataclass(frozen=True)
class ControllerConfig:
    proportional_gain: float = 60.0
    derivative_gain: float = 2.0
    enabled: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.proportional_gain) and math.isfinite(self.derivative_gain)):
            raise ValueError("controller gains must be finite")


@dataclass(frozen=True)
class NoiseConfig:
    """Gaussian white noise of std ``amplitude`` passed through a Butterworth low-pass."""

    amplitude: float = 0.0
    cutoff_frequency: float = 10.0
    filter_order: int = 6
    seed: int = 0

    def sos(self, sample_rate):
        if not 0 < self.cutoff_frequency < 0.5 * sample_rate:
            raise ValueError("noise cutoff must lie between 0 and the Nyquist frequency")
        return signal.butter(
            self.filter_order, self.cutoff_frequency, btype="low", fs=sample_rate, output="sos"
        )

    @property
    def n_sections(self):
        return (self.filter_order + 1) // 2


@dataclass(frozen=True)
class Forcing:
    """Sinusoidal forcing ``a cos(omega t) + b sin(omega t)``."""

    a: float
    b: float
    omega: float

    @property
    def period(self):
        return 2.0 * math.pi / self.omega


@dataclass
class RigState:
    x: float = 0.0
    xdot: float = 0.0
    t: float = 0.0
    noise_filter_state: np.ndarray = field(default_factory=lambda: np.zeros(6))
    noise_counter: int = 0
    disturbance_filter_state: np.ndarray = field(default_factory=lambda: np.zeros(6))
    disturbance_counter: int = 0

    def copy(self):
        return replace(
            self,
            noise_filter_state=np.array(self.noise_filter_state, dtype=float),
            disturbance_filter_state=np.array(self.disturbance_filter_state, dtype=float),
        )


CSV_HEADER = ("t", "x", "xdot", "u", "i", "eta")


@dataclass
class SampledRecord:
    t: np.ndarray
    x: np.ndarray
    xdot: np.ndarray
    u: np.ndarray
    i: np.ndarray
    eta: np.ndarray
    forcing: Forcing

    def __len__(self):
        return len(self.t)

    @property
    def dt(self):
        return self.t[1] - self.t[0] if len(self.t) > 1 else float("nan")

    @property
    def forcing_signal(self):
        """p(t) at the sample times."""
        f = self.forcing
        return f.a * np.cos(f.omega * self.t) + f.b * np.sin(f.omega * self.t)

    @property
    def samples_per_period(self):
        return int(round(self.forcing.period / self.dt))

    @property
    def n_periods(self):
        return len(self.t) // self.samples_per_period

    def tail(self, n_periods):
        """Sub-record holding the final ``n_periods`` periods."""
        k = n_periods * self.samples_per_period
        return SampledRecord(
            self.t[-k:], self.x[-k:], self.xdot[-k:], self.u[-k:], self.i[-k:],
            self.eta[-k:], self.forcing,
        )

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for row in zip(self.t, self.x, self.xdot, self.u, self.i, self.eta):
                w.writerow([f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path, forcing):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(*(data[:, k].copy() for k in range(6)), forcing=forcing)

    @staticmethod
    def concatenate(records):
        first = records[0]
        return SampledRecord(
            *(np.concatenate([getattr(r, name) for r in records]) for name in
              ("t", "x", "xdot", "u", "i", "eta")),
            forcing=first.forcing,
        )


_NO_SOS = np.zeros((1, 6))
_NO_SOS[0, 0] = 1.0
_NO_SOS[0, 3] = 1.0


def _filter_setup(noise, rate, state_vec):
    if noise is None or noise.amplitude == 0.0:
        return 0.0, _NO_SOS, np.zeros((1, 2)), 0
    sos = noise.sos(rate)
    zi = np.array(state_vec, dtype=float).reshape(-1)
    if zi.size != 2 * sos.shape[0]:
        zi = np.zeros(2 * sos.shape[0])
    return float(noise.amplitude), sos, zi.reshape(-1, 2).copy(), int(noise.seed)


def _target_arrays(target, n_min=1):
    if target is None:
        return 0.0, np.zeros(n_min), np.zeros(n_min)
    h = np.ascontiguousarray(target.harmonics)
    return float(target.a0), h[:, 0].copy(), h[:, 1].copy()


def _integrate(state, params, controller, target, forcing, noise, disturbance, n_steps, dt):
    rate = 1.0 / dt
    n_amp, n_sos, n_zi, n_seed = _filter_setup(noise, rate, state.noise_filter_state)
    d_amp, d_sos, d_zi, d_seed = _filter_setup(disturbance, rate, state.disturbance_filter_state)
    if target is not None and not math.isclose(target.omega, forcing.omega, rel_tol=1e-12):
        raise ValueError("control target and forcing must share the fundamental frequency")
    ta0, ta, tb = _target_arrays(target)
    geo = params.spring_geometry
    gk = geo.spring_constant / geo.mass if geo is not None else 0.0
    gl0 = geo.rest_length if geo is not None else 0.0
    glm = geo.mount_length if geo is not None else 1.0
    ctrl_on = controller is not None and controller.enabled
    kp = controller.proportional_gain if ctrl_on else 0.0
    kd = controller.derivative_gain if ctrl_on else 0.0

    out = [np.empty(n_steps) for _ in range(6)]
    x, v, n_ctr, d_ctr, n_done, status = _simulate(
        float(state.x), float(state.xdot), float(state.t), dt, n_steps, forcing.omega,
        params.natural_frequency**2, params.damping, params.cubic_stiffness,
        geo is not None, gk, gl0, glm, params.displacement_limit,
        ctrl_on, kp, kd, ta0, ta, tb, float(forcing.a), float(forcing.b),
        n_amp, n_sos, n_zi, n_seed, int(state.noise_counter),
        d_amp, d_sos, d_zi, d_seed, int(state.disturbance_counter),
        *out,
    )
    record = SampledRecord(*(arr[:n_done] for arr in out), forcing=forcing)
    new_state = RigState(
        x, v, float(state.t) + n_done * dt,
        n_zi.ravel().copy() if n_amp else np.array(state.noise_filter_state, dtype=float),
        n_ctr,
        d_zi.ravel().copy() if d_amp else np.array(state.disturbance_filter_state, dtype=float),
        d_ctr,
    )
    if status:
        raise DisplacementLimitExceeded(
            f"|x| exceeded {params.displacement_limit} m at t={new_state.t:.6g} s",
            record=record, time=new_state.t,
        )
    return new_state, record


def step(state, params, controller, target, forcing, noise=None, disturbance=None):
    """Advance the rig by one integration step.

    The step size is that used by :func:`run_segment` for ``forcing.omega``.
    """
    if abs(state.x) > params.displacement_limit:
        raise DisplacementLimitExceeded("state already outside the displacement limit")
    dt = params.step_size(forcing.omega)
    new_state, _ = _integrate(state, params, controller, target, forcing, noise, disturbance, 1, dt)
    return new_state


def run_segment(state, params, controller, target, forcing, noise=None, n_periods=1,
                disturbance=None):
    """Integrate ``n_periods`` whole forcing periods.

    ``state.t`` must sit on a forcing-period boundary; the returned state does
    too. Returns ``(new_state, record)``.
    """
    if n_periods < 1:
        raise ValueError("n_periods must be at least 1")
    if not forcing.omega > 0:
        raise ValueError("forcing frequency must be positive")
    period = forcing.period
    dt = params.step_size(forcing.omega)
    offset = state.t - round(state.t / period) * period
    if abs(offset) > 0.5 * dt:
        raise PhaseMisaligned(
            f"t={state.t} is not on a period boundary of T={period}; reset the clock first"
        )
    n_steps = n_periods * params.samples_per_period(forcing.omega)
    return _integrate(state, params, controller, target, forcing, noise, disturbance, n_steps, dt)


def gaussian_stream(seed, n, counter=0):
    """``n`` standard Gaussian draws starting at ``counter``."""
    out = np.empty(n)
    _gaussian_block(int(seed), int(counter), int(n), out)
    return out


def noise_sequence(noise, sample_rate, n, counter=0, filter_state=None, filtered=True):
    """Block version of :func:`noise_sample` (same stream, same order)."""
    raw = noise.amplitude * gaussian_stream(noise.seed, n, counter)
    if not filtered or noise.amplitude == 0.0:
        return raw
    sos = noise.sos(sample_rate)
    zi = np.zeros((sos.shape[0], 2)) if filter_state is None else \
        np.array(filter_state, dtype=float).reshape(-1, 2)
    out = np.empty(n)
    _filter_block(sos, zi, raw, out)
    return out


def noise_sample(noise_filter_state, rng_state, noise, sample_rate):
    """One filtered perturbation sample.

    Returns ``(value, new_filter_state, new_rng_state)``; ``rng_state`` is the
    draw counter of the generator seeded with ``noise.seed``.
    """
    if noise.amplitude == 0.0:
        return 0.0, np.array(noise_filter_state, dtype=float), rng_state
    sos = noise.sos(sample_rate)
    zi = np.array(noise_filter_state, dtype=float).reshape(sos.shape[0], 2).copy()
    raw = noise.amplitude * _gaussian(int(noise.seed), int(rng_state))
    value = _sos_step(sos, zi, raw)
    return value, zi.ravel(), rng_state + 1


class VirtualRig:
    """Stateful wrapper around :func:`run_segment`.

    Holds the plant parameters, controller, perturbation and disturbance
    settings and the current state, so that experiment code can simply call
    :meth:`run`.
    """

    def __init__(self, params=None, controller=None, noise=None, disturbance=None, state=None):
        self.params = params or RigParams()
        self.controller = controller or ControllerConfig()
        self.noise = noise or NoiseConfig()
        self.disturbance = disturbance
        self.state = state or RigState()

    def run(self, forcing, n_periods=1, target=None):
        self.state, record = run_segment(
            self.state, self.params, self.controller, target, forcing, self.noise,
            n_periods, self.disturbance,
        )
        return record

    def reset_clock(self):
        """Re-zero the time origin, keeping position and velocity."""
        self.state = replace(self.state.copy(), t=0.0)

    def reset(self):
        self.state = RigState()

    def set_controller(self, enabled):
        self.controller = replace(self.controller, enabled=enabled)

    def set_noise(self, amplitude=None, seed=None):
        changes = {}
        if amplitude is not None:
            changes["amplitude"] = amplitude
        if seed is not None:
            changes["seed"] = seed
        self.noise = replace(self.noise, **changes)

    def copy(self):
        return VirtualRig(self.params, self.controller, self.noise, self.disturbance,
                          self.state.copy())
