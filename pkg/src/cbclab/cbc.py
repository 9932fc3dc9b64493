"""Control-based continuation of forced periodic orbits.

The continuation variable is the fundamental of the control target,
``x*(t) = A cos(omega t) + (higher harmonics)``. The higher harmonics and the
mean of the target are found by a fixed-point iteration that copies the
measured response into the target until the non-fundamental part of the
control action vanishes. Whatever the controller still injects at the
fundamental is lumped with the forcing into an effective amplitude Gamma, so
the tracked orbits are orbits of the open-loop system forced by
``Gamma cos(omega t + phi)``.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DisplacementLimitExceeded, FixedPointDiverged, NotSettled
from .rig import Forcing, RigState, SampledRecord
from .signals import (
    DEFAULT_AVERAGING_PERIODS,
    DEFAULT_HARMONICS,
    FourierSeries,
    effective_forcing,
    fourier_coeffs,
    response_amplitude,
)

log = logging.getLogger(__name__)


@dataclass
class ControlTarget:
    """Control target x*(t); the fundamental pair is the continuation variable."""

    series: FourierSeries

    @classmethod
    def from_fundamental(cls, omega, amplitude, n_harmonics=DEFAULT_HARMONICS, phase_b=0.0):
        s = FourierSeries.zeros(omega, n_harmonics)
        s.harmonics[0] = (amplitude, phase_b)
        return cls(s)

    @property
    def fundamental(self):
        return float(self.series.harmonics[0, 0]), float(self.series.harmonics[0, 1])

    def with_fundamental(self, a1, b1):
        s = self.series.copy()
        s.harmonics[0] = (a1, b1)
        return ControlTarget(s)

    def copy(self):
        return ControlTarget(self.series.copy())


class Measurement(NamedTuple):
    response: FourierSeries
    control_action: FourierSeries
    record: SampledRecord


@dataclass
class SettleConfig:
    """Settling and averaging used each time the target changes.

    After ``settle_periods`` the rig keeps running one period at a time until
    the per-period Fourier coefficients of x and u change by less than
    ``settle_rtol`` (relative, floor ``settle_atol``) twice in a row. Set
    ``settle_rtol`` to ``None`` to skip the check (noisy operation).
    """

    settle_periods: int = 10
    measure_periods: int = DEFAULT_AVERAGING_PERIODS
    settle_rtol: float = 1e-9
    settle_atol: float = 1e-13
    max_settle_periods: int = 400


def _period_coeffs(record, omega, n_harmonics):
    n = record.samples_per_period
    xs, us = [], []
    for p in range(len(record) // n):
        sl = slice(p * n, (p + 1) * n)
        xs.append(fourier_coeffs(record.x[sl], record.t[sl], omega, n_harmonics).coefficient_vector())
        us.append(fourier_coeffs(record.u[sl], record.t[sl], omega, n_harmonics).coefficient_vector())
    return np.array(xs), np.array(us)


def settle_and_measure(rig, target, forcing, settle=None):
    """Drive the closed loop to steady state and measure it.

    Returns a :class:`Measurement` holding the Fourier series of x(t) and
    u(t) averaged over ``settle.measure_periods`` periods, and the measured
    record.
    """
    settle = settle or SettleConfig()
    omega = forcing.omega
    n_h = target.series.n_harmonics
    series = target.series
    if settle.settle_periods > 0:
        rig.run(forcing, settle.settle_periods, series)

    if settle.settle_rtol is not None:
        prev = None
        quiet = 0
        for _ in range(settle.max_settle_periods):
            rec = rig.run(forcing, 1, series)
            cx, cu = _period_coeffs(rec, omega, n_h)
            if prev is not None:
                ok = all(
                    np.linalg.norm(c[0] - p) <= settle.settle_rtol * np.linalg.norm(c[0]) + settle.settle_atol
                    for c, p in ((cx, prev[0]), (cu, prev[1]))
                )
                quiet = quiet + 1 if ok else 0
                if quiet >= 2:
                    break
            prev = (cx[0], cu[0])
        else:
            raise NotSettled(f"no periodic steady state after {settle.max_settle_periods} periods")

    record = rig.run(forcing, settle.measure_periods, series)
    response = fourier_coeffs(record.x, record.t, omega, n_h)
    control = fourier_coeffs(record.u, record.t, omega, n_h)
    if settle.settle_rtol is not None and settle.measure_periods >= 2:
        cx, _ = _period_coeffs(record.tail(2), omega, n_h)
        drift = np.linalg.norm(cx[1] - cx[0])
        if drift > settle.settle_rtol * np.linalg.norm(cx[1]) * 10 + settle.settle_atol:
            raise NotSettled(f"response drifted by {drift:.3g} between the last two periods")
    return Measurement(response, control, record)


def noninvasiveness_residual(control_action):
    """Norm of the non-fundamental control action (mean and harmonics 2..n)."""
    parts = np.concatenate(([0.5 * control_action.a0], control_action.harmonics[1:].ravel()))
    return float(np.linalg.norm(parts))


def fixed_point_harmonics(rig, target, forcing, tol, max_iter=20, settle=None, rel_tol=None):
    """Make the controller non-invasive in every harmonic but the fundamental.

    Repeatedly measures the closed loop and copies the measured mean and
    harmonics 2..n of x(t) into the target. Stops once the residual is at
    most ``tol`` (plus ``rel_tol`` times the effective forcing amplitude when
    given).

    Returns ``(target, measurement, iterations)``.
    """
    if tol <= 0 and not rel_tol:
        raise ValueError("tolerance must be positive")
    a1, b1 = target.fundamental
    target = target.copy()
    for iteration in range(max_iter + 1):
        meas = settle_and_measure(rig, target, forcing, settle)
        residual = noninvasiveness_residual(meas.control_action)
        bound = tol
        if rel_tol:
            gamma, _ = effective_forcing(forcing.a, forcing.b, *meas.control_action.harmonics[0])
            bound = max(tol, rel_tol * gamma)
        if residual <= bound:
            return target, meas, iteration
        if iteration == max_iter:
            break
        s = target.series
        s.a0 = meas.response.a0
        s.harmonics[1:] = meas.response.harmonics[1:]
        s.harmonics[0] = (a1, b1)
    raise FixedPointDiverged(
        f"residual {residual:.3g} above {bound:.3g} after {max_iter} iterations",
        residual=residual,
    )


@dataclass
class ContinuationPoint:
    omega: float
    gamma: float
    phase: float
    response: FourierSeries
    control_action: FourierSeries
    residual: float
    target: FourierSeries
    forcing: Forcing
    iterations: int = 0
    state: tuple = (0.0, 0.0)
    record: SampledRecord = None
    stable: bool = None

    @property
    def response_amplitude(self):
        return response_amplitude(self.response)

    @property
    def relative_residual(self):
        return self.residual / self.gamma if self.gamma > 0 else self.residual

    @property
    def effective_forcing(self):
        """Open-loop forcing equivalent to the converged closed loop."""
        a1, b1 = self.control_action.harmonics[0]
        return Forcing(self.forcing.a + a1, self.forcing.b + b1, self.omega)

    def to_dict(self):
        return {
            "omega": self.omega,
            "gamma": self.gamma,
            "phase": self.phase,
            "response_amplitude": self.response_amplitude,
            "residual": self.residual,
            "iterations": self.iterations,
            "state": list(self.state),
            "forcing": [self.forcing.a, self.forcing.b],
            "target": self.target.to_dict(),
            "response": self.response.to_dict(),
            "control_action": self.control_action.to_dict(),
            "stable": self.stable,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            omega=d["omega"],
            gamma=d["gamma"],
            phase=d["phase"],
            response=FourierSeries.from_dict(d["response"]),
            control_action=FourierSeries.from_dict(d["control_action"]),
            residual=d["residual"],
            target=FourierSeries.from_dict(d["target"]),
            forcing=Forcing(d["forcing"][0], d["forcing"][1], d["omega"]),
            iterations=d.get("iterations", 0),
            state=tuple(d.get("state", (0.0, 0.0))),
            stable=d.get("stable"),
        )


@dataclass
class SweepConfig:
    forcing_a: float = 0.0
    forcing_b: float = 0.0
    n_harmonics: int = DEFAULT_HARMONICS
    rel_tol: float = 1e-6
    abs_tol: float = 1e-12
    max_iter: int = 20
    settle: SettleConfig = field(default_factory=SettleConfig)


@dataclass
class ContinuationRun:
    points: list
    metadata: dict = field(default_factory=dict)
    aborted: str = None

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    @property
    def omega(self):
        return self.metadata.get("omega")

    def gammas(self):
        return np.array([p.gamma for p in self.points])

    def amplitudes(self):
        return np.array([p.response_amplitude for p in self.points])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            with_flag = any(p.stable is not None for p in self.points)
            header = ["omega", "gamma", "response_amplitude", "residual"]
            if with_flag:
                header.append("stability_flag")
            w.writerow(header)
            for p in self.points:
                row = [f"{p.omega:.17g}", f"{p.gamma:.17g}", f"{p.response_amplitude:.17g}",
                       f"{p.residual:.17g}"]
                if with_flag:
                    row.append("" if p.stable is None else ("stable" if p.stable else "unstable"))
                w.writerow(row)

    def to_dict(self):
        return {"metadata": self.metadata, "aborted": self.aborted,
                "points": [p.to_dict() for p in self.points]}

    @classmethod
    def from_dict(cls, d):
        return cls([ContinuationPoint.from_dict(p) for p in d["points"]], d["metadata"],
                   d.get("aborted"))

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def point_from_measurement(meas, target, forcing, residual, iterations):
    omega = forcing.omega
    gamma, phase = effective_forcing(forcing.a, forcing.b, *meas.control_action.harmonics[0])
    rec = meas.record.tail(1)
    return ContinuationPoint(
        omega=omega, gamma=gamma, phase=phase, response=meas.response,
        control_action=meas.control_action, residual=residual, target=target.series.copy(),
        forcing=forcing, iterations=iterations, state=(float(rec.x[0]), float(rec.xdot[0])),
        record=rec,
    )


def continuation_sweep(rig, omega, amplitude_grid, config=None):
    """Sweep the fundamental target amplitude at fixed forcing frequency.

    Each grid value becomes the target fundamental ``(A, 0)``; the higher
    harmonics are warm-started from the previous point and made non-invasive
    by :func:`fixed_point_harmonics`. A :class:`ContinuationRun` is returned;
    if the rig hits its displacement limit the run stops and the points so
    far are kept (``run.aborted`` holds the reason).
    """
    config = config or SweepConfig()
    grid = np.asarray(amplitude_grid, dtype=float)
    d = np.diff(grid)
    if len(grid) > 1 and not (np.all(d > 0) or np.all(d < 0)):
        raise ValueError("amplitude grid must be strictly monotone")
    forcing = Forcing(config.forcing_a, config.forcing_b, omega)
    rig.reset_clock()
    target = ControlTarget.from_fundamental(omega, float(grid[0]), config.n_harmonics)
    run = ContinuationRun([], {
        "omega": omega,
        "amplitude_grid": grid.tolist(),
        "rel_tol": config.rel_tol,
        "abs_tol": config.abs_tol,
        "forcing": [config.forcing_a, config.forcing_b],
        "seed": rig.noise.seed,
    })
    for index, amp in enumerate(grid):
        target = target.with_fundamental(float(amp), 0.0)
        try:
            target, meas, iters = fixed_point_harmonics(
                rig, target, forcing, config.abs_tol, config.max_iter, config.settle,
                rel_tol=config.rel_tol,
            )
        except FixedPointDiverged as exc:
            exc.grid_index = index
            raise
        except DisplacementLimitExceeded as exc:
            log.warning("sweep at omega=%.4g aborted at grid index %d: %s", omega, index, exc)
            run.aborted = f"grid index {index}: {exc}"
            rig.reset()
            break
        residual = noninvasiveness_residual(meas.control_action)
        run.points.append(point_from_measurement(meas, target, forcing, residual, iters))
    return run


def drive_to_orbit(rig, point, settle=None):
    """Put the rig back on a stored continuation point (closed loop)."""
    settle = settle or SettleConfig()
    rig.state = RigState(point.state[0], point.state[1], 0.0)
    return settle_and_measure(rig, ControlTarget(point.target.copy()), point.forcing, settle)


def open_loop_replay(rig, point, n_periods=1):
    """Replay a stored orbit with the controller off and the lumped forcing.

    Returns the open-loop record started from the orbit's phase-0 state.
    """
    replay = rig.copy()
    replay.set_controller(False)
    replay.set_noise(amplitude=0.0)
    replay.disturbance = None
    replay.state = RigState(point.state[0], point.state[1], 0.0)
    return replay.run(point.effective_forcing, n_periods)


def geometric_unstable(run):
    """Points lying between geometric folds, where Gamma decreases with amplitude.

    Uses a central difference of Gamma against the response amplitude
    (one-sided at the ends).
    """
    g = run.gammas()
    a = run.amplitudes()
    slope = np.gradient(g, a)
    return slope < 0


def fold_indices(run):
    """Indices ``i`` such that a fold lies between points ``i`` and ``i+1``."""
    unstable = geometric_unstable(run)
    return [i for i in range(len(unstable) - 1) if unstable[i] != unstable[i + 1]]


def refine_grid_near_folds(run, points_per_fold=12, span=1):
    """Target-amplitude grid with extra points around each geometric fold.

    The original grid of ``run`` is kept; ``points_per_fold`` evenly spaced
    values are added between grid entries ``span`` either side of each fold.
    """
    grid = np.asarray(run.metadata["amplitude_grid"], dtype=float)[:len(run.points)]
    extra = []
    for i in fold_indices(run):
        lo = grid[max(i - span + 1, 0)]
        hi = grid[min(i + span, len(grid) - 1)]
        extra.append(np.linspace(lo, hi, points_per_fold + 2)[1:-1])
    merged = np.unique(np.concatenate([grid] + extra))
    if len(grid) > 1 and grid[0] > grid[-1]:
        merged = merged[::-1]
    return merged

