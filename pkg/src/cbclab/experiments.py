"""Multi-step experiments built on the rig, CBC engine and identification.

These are the routines behind the batch commands: stability along a
branch, open-loop escapes from an unstable orbit, and the perturbation-size
study.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .cbc import ContinuationRun, drive_to_orbit
from .errors import CbcError, EscapeTimeout
from .rig import RigState
from .sysid import FloquetConfig, confidence_interval, estimate_floquet

log = logging.getLogger(__name__)


# Stability along a branch ---------------------------------------------------

@dataclass
class BranchStability:
    run: ContinuationRun
    results: list
    failures: dict = field(default_factory=dict)

    @property
    def flags(self):
        """True where the point was classed unstable; None for failures."""
        return [None if r is None else not r.stable for r in self.results]


def floquet_branch(rig, run, config=None, seed_for=None):
    """Estimate multipliers at every point of a continuation run.

    ``seed_for(index)`` supplies the repeat seed for each point. Failures are
    recorded per point and the branch continues.
    """
    config = config or FloquetConfig()
    results, failures = [], {}
    for i, point in enumerate(run.points):
        cfg = config if seed_for is None else replace(config, seed=seed_for(i))
        try:
            results.append(estimate_floquet(rig, point, cfg))
        except CbcError as exc:
            log.warning("Floquet estimate failed at point %d: %s", i, exc)
            failures[i] = f"{type(exc).__name__}: {exc}"
            results.append(None)
    return BranchStability(run, results, failures)


FLOQUET_COLUMNS = ["omega", "response_amplitude", "mu_abs_1", "mu_abs_2", "stable",
                   "gamma", "residual", "mu1_re", "mu1_im", "mu1_half_width",
                   "mu2_re", "mu2_im", "mu2_half_width"]


def branch_rows(stability):
    """Rows for :data:`FLOQUET_COLUMNS`; ``stable`` is 1, 0, or empty on failure."""
    rows = []
    nan = float("nan")
    for p, r in zip(stability.run.points, stability.results):
        if r is None:
            rows.append([p.omega, p.response_amplitude, nan, nan, "", p.gamma, p.residual]
                        + [nan] * 6)
            continue
        mu, ci = r.multipliers, r.ci
        rows.append([p.omega, p.response_amplitude, ci["mean_abs"][0], ci["mean_abs"][1],
                     int(r.stable), p.gamma, p.residual,
                     mu[0].real, mu[0].imag, ci["half_width"][0],
                     mu[1].real, mu[1].imag, ci["half_width"][1]])
    return rows


# Escapes --------------------------------------------------------------------

@dataclass
class EscapeConfig:
    n_runs: int = 40
    noise_amplitude: float = 0.02
    max_periods: int = 400
    block_periods: int = 20
    settle_periods: int = 5
    settle_tol: float = 5e-3
    linear_band: tuple = (0.03, 0.2)
    m_samples: int = 10


@dataclass
class EscapeRun:
    seed: int
    attractor: str
    periods: int
    final_amplitude: float
    poincare: np.ndarray
    x: np.ndarray = field(repr=False, default=None)
    dt: float = 0.0


@dataclass
class EscapeResult:
    origin: np.ndarray
    direction: np.ndarray
    orbit_amplitude: float
    runs: list
    linear_band: tuple

    @property
    def attractor_counts(self):
        counts = {}
        for r in self.runs:
            counts[r.attractor] = counts.get(r.attractor, 0) + 1
        return counts

    def alignment(self):
        """Perpendicular distance of Poincare dots from the eigendirection,
        divided by their distance from the orbit, for dots in the linear band.
        """
        lo, hi = (b * self.orbit_amplitude for b in self.linear_band)
        ratios = []
        for r in self.runs:
            D = r.poincare - self.origin
            dist = np.hypot(D[:, 0], D[:, 1])
            perp = np.abs(D[:, 0] * self.direction[1] - D[:, 1] * self.direction[0])
            sel = (dist >= lo) & (dist <= hi)
            ratios.extend(perp[sel] / dist[sel])
        return np.asarray(ratios)


def unstable_direction(floquet_result):
    """Leading eigenvector projected onto ``(x(kT), x(kT - T/m))``, unit length."""
    v = np.real_if_close(floquet_result.eigenvectors[:2, 0])
    v = np.real(v)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("leading eigenvector has no delay-plane component")
    v = v / n
    return v if v[0] >= 0 else -v


def poincare_points(x, samples_per_period, m_samples, start_period=1):
    """Delay-plane points ``(x(kT), x(kT - T/m))`` for k >= start_period."""
    lag = samples_per_period // m_samples
    k = np.arange(start_period, len(x) // samples_per_period)
    idx = k * samples_per_period
    return np.column_stack((x[idx], x[idx - lag]))


def escape_once(rig, orbit, seed, config, origin, orbit_amplitude):
    """Release the rig from the orbit with the controller off.

    The lumped forcing replaces the controller's fundamental, noise stays on,
    and the run ends once the period-0 Poincare point has stopped moving for
    ``settle_periods`` periods away from the orbit.
    """
    work = rig.copy()
    work.set_noise(amplitude=0.0)
    work.disturbance = None
    meas = drive_to_orbit(work, orbit)
    Np = len(meas.record.tail(1))
    work.state = RigState(work.state.x, work.state.xdot, 0.0)
    work.set_controller(False)
    work.set_noise(amplitude=config.noise_amplitude, seed=seed)
    forcing = orbit.effective_forcing
    xs = []
    done = 0
    while done < config.max_periods:
        rec = work.run(forcing, config.block_periods)
        xs.append(rec.x)
        done += config.block_periods
        # Sample k * Np is t = kT; the final state closes the last period.
        x = np.concatenate(xs + [[work.state.x]])
        P = poincare_points(x, Np, config.m_samples)
        steps = np.hypot(*np.diff(P[-config.settle_periods - 1:], axis=0).T)
        away = np.hypot(*(P[-1] - origin)) > 0.2 * orbit_amplitude
        if away and len(steps) == config.settle_periods and np.all(
                steps < config.settle_tol * orbit_amplitude):
            tail = x[-Np:]
            amp = 0.5 * (tail.max() - tail.min())
            label = "high" if amp > orbit_amplitude else "low"
            return EscapeRun(seed, label, done, amp, P, x, rec.dt)
    raise EscapeTimeout(f"seed {seed}: no attractor reached in {config.max_periods} periods")


def run_escapes(rig, orbit, floquet_result, seeds, config=None):
    config = config or EscapeConfig()
    work = rig.copy()
    work.set_noise(amplitude=0.0)
    work.disturbance = None
    meas = drive_to_orbit(work, orbit)
    ref = meas.record.tail(1)
    lag = len(ref) // config.m_samples
    origin = np.array([work.state.x, ref.x[-lag]])
    amp = orbit.response_amplitude
    runs = [escape_once(rig, orbit, int(s), config, origin, amp) for s in seeds]
    return EscapeResult(origin, unstable_direction(floquet_result), amp, runs,
                        tuple(config.linear_band))


# Perturbation-size study ------------------------------------------------------

CONDITIONS = ("stable_open_loop", "stable_closed_loop", "unstable_closed_loop")
DEFAULT_AMPLITUDES = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass
class StudyRow:
    condition: str
    perturbation_amplitude: float
    mean_abs: float
    half_width: float
    moduli: np.ndarray


def study_cell(rig, orbit, condition, amplitude, repeats, seed, disturbance=None, config=None):
    """One (condition, perturbation size) cell of the study.

    ``seed`` is a sequence of integers (master, condition, amplitude index)
    from which the perturbation and disturbance streams are derived.
    """
    closed = condition != "stable_open_loop"
    seq = np.random.SeedSequence(list(seed))
    cfg = replace(config or FloquetConfig(), perturbation_amplitude=amplitude,
                  closed_loop=closed, repeats=repeats, seed=int(seq.generate_state(1)[0]))
    work = rig.copy()
    work.disturbance = None
    if disturbance is not None:
        work.disturbance = replace(disturbance, seed=int(seq.spawn(1)[0].generate_state(1)[0]))
    res = estimate_floquet(work, orbit, cfg)
    moduli = np.array([abs(r.multipliers[0]) for r in res.repeats])
    mean, hw = confidence_interval(moduli[:, None])
    return StudyRow(condition, float(amplitude), float(mean[0]), float(hw[0]), moduli)


def perturbation_study(rig, stable_orbit, unstable_orbit, amplitudes=DEFAULT_AMPLITUDES,
                       repeats=10, seed=0, disturbance=None, config=None):
    """Leading multiplier modulus and its 95% CI against perturbation size.

    ``disturbance`` (a :class:`NoiseConfig`) is an unmeasured input active
    only while perturbation data is recorded.
    """
    rows = []
    for ci_, cond in enumerate(CONDITIONS):
        orbit = unstable_orbit if cond == "unstable_closed_loop" else stable_orbit
        for ai, amp in enumerate(amplitudes):
            rows.append(study_cell(rig, orbit, cond, amp, repeats, (seed, ci_, ai),
                                   disturbance, config))
    return rows


def ci_overlap(a, b):
    """True if two (mean, half_width) intervals overlap."""
    return abs(a[0] - b[0]) <= a[1] + b[1]


def study_summary(rows):
    """Per-condition arrays of amplitude, mean and half-width."""
    out = {}
    for cond in CONDITIONS:
        sel = [r for r in rows if r.condition == cond]
        out[cond] = (np.array([r.perturbation_amplitude for r in sel]),
                     np.array([r.mean_abs for r in sel]),
                     np.array([r.half_width for r in sel]))
    return out
