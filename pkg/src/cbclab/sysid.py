"""Closed-loop identification of a periodic ARX model around a periodic orbit.

One forcing period is sampled at ``m`` points and the deviation from the
reference orbit, ``y``, is modelled by a periodic ARX recursion in which the
sample at each phase depends on the previous ``n`` samples of ``y`` and the
current plus previous ``n`` samples of the input deviation ``k``::

    z_j + sum_{l=1..n} b_{r,l} z_{j-l} = sum_{l=0..n} a_{r,l} k_{j-l}

with one coefficient set per phase row ``r``. Stacking one period as
``[y(T), y(T-1/m), ..., y(T-(m-1)/m)]`` gives ``B(q^-1) y = A(q^-1) k`` with
``B(q^-1) = B0 + B1 q^-1``, unit diagonal on ``B0`` and the wrap-around terms
in ``B1``. Setting ``k = 0`` gives the period map ``y(T) = -B0^-1 B1 y(T-1)``
whose leading n-by-n block is the monodromy matrix in delay coordinates.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .cbc import ControlTarget, drive_to_orbit
from .errors import RankDeficient, SingularB0
from .rig import RigState

DEFAULT_M = 10
DEFAULT_N = 4
DEFAULT_PERIODS = 200
DEFAULT_REPEATS = 10


@dataclass
class PerturbationRecord:
    """Deviations from a reference orbit under random perturbation.

    ``y`` and ``k`` are stored at the full simulation rate; ``decimate``
    extracts the ``m``-point phase grid used by the ARX model.
    """

    omega: float
    samples_per_period: int
    reference_x: np.ndarray
    reference_i: np.ndarray
    y: np.ndarray
    k: np.ndarray
    eta: np.ndarray = None
    control_deviation: np.ndarray = None
    closed_loop: bool = True

    @property
    def n_periods(self):
        return len(self.y) // self.samples_per_period

    def decimate(self, m_samples):
        if self.samples_per_period % m_samples:
            raise ValueError(
                f"{self.samples_per_period} samples per period cannot be split into {m_samples} phases"
            )
        stride = self.samples_per_period // m_samples
        return self.y[::stride].copy(), self.k[::stride].copy()

    @classmethod
    def from_sequences(cls, z, k, m_samples, omega=2 * math.pi):
        """Wrap sequences that are already on the ARX phase grid."""
        z = np.asarray(z, dtype=float)
        k = np.asarray(k, dtype=float)
        n = (len(z) // m_samples) * m_samples
        return cls(omega, m_samples, np.zeros(m_samples), np.zeros(m_samples), z[:n], k[:n])


@dataclass
class ArxModel:
    """Fitted periodic ARX model.

    ``b[r, l-1]`` multiplies ``y`` at lag ``l`` and ``a[r, l]`` multiplies
    ``k`` at lag ``l`` in phase row ``r`` (row 0 is the sample at the end of
    the period, row r is ``r/m`` of a period earlier).
    """

    m_samples: int
    n_order: int
    b: np.ndarray
    a: np.ndarray
    rss: np.ndarray
    n_obs: np.ndarray

    def __post_init__(self):
        if not self.n_order < self.m_samples:
            raise ValueError("model order must be below the number of phase samples")

    @property
    def n_coefficients(self):
        return self.b.size + self.a.size

    def _banded(self, coeffs, first_lag, diagonal):
        m = self.m_samples
        P0 = np.zeros((m, m))
        P1 = np.zeros((m, m))
        if diagonal is not None:
            P0[np.diag_indices(m)] = diagonal
        for r in range(m):
            for idx in range(coeffs.shape[1]):
                lag = idx + first_lag
                col = r + lag
                if col < m:
                    P0[r, col] += coeffs[r, idx]
                else:
                    P1[r, col - m] += coeffs[r, idx]
        return P0, P1

    def B(self, q_inv):
        """B evaluated with the backward shift replaced by the scalar ``q_inv``."""
        B0, B1 = self._banded(self.b, 1, 1.0)
        return B0 + q_inv * B1

    def A(self, q_inv):
        A0, A1 = self._banded(self.a, 0, None)
        return A0 + q_inv * A1

    def predict(self, z, k):
        """One-step-ahead predictions for every sample with a full history."""
        m, n = self.m_samples, self.n_order
        pred = np.full(len(z), np.nan)
        for j in range(n, len(z)):
            r = (-j) % m
            pred[j] = -self.b[r] @ z[j - 1::-1][:n] + self.a[r] @ k[j::-1][: n + 1]
        return pred

    def aic(self):
        n_eff = self.n_obs.sum()
        return float(n_eff * math.log(self.rss.sum() / n_eff) + 2 * self.n_coefficients)

    def to_dict(self):
        return {"m": self.m_samples, "n": self.n_order, "b": self.b.tolist(),
                "a": self.a.tolist(), "rss": self.rss.tolist(), "n_obs": self.n_obs.tolist()}


@dataclass
class FloquetResult:
    monodromy: np.ndarray
    multipliers: np.ndarray
    eigenvectors: np.ndarray
    m_samples: int = None
    n_order: int = None
    rss: float = None
    condition_b0: float = None
    ci: dict = None
    stable: bool = None
    source: str = "sysid"
    repeats: list = field(default_factory=list, repr=False)

    @property
    def leading(self):
        return self.multipliers[0]

    @property
    def moduli(self):
        return np.abs(self.multipliers)

    def to_dict(self):
        d = {
            "multipliers": [{"re": float(z.real), "im": float(z.imag)} for z in self.multipliers],
            "monodromy": np.real_if_close(self.monodromy).tolist(),
            "m": self.m_samples,
            "n": self.n_order,
            "rss": self.rss,
            "ci": self.ci,
            "source": self.source,
        }
        if self.stable is not None:
            d["stable"] = bool(self.stable)
        return d

    def to_json(self):
        return json.dumps(self.to_dict())


def _sorted_eig(M):
    vals, vecs = np.linalg.eig(M)
    order = np.lexsort((-vals.imag, -np.abs(vals)))
    return vals[order], vecs[:, order]


def collect_perturbed_data(rig, orbit, perturbation_amplitude, n_periods=DEFAULT_PERIODS,
                           m_samples=DEFAULT_M, closed_loop=True, seed=None, settle=None):
    """Perturb a converged orbit with filtered noise and record deviations.

    The rig is first driven back onto the orbit (closed loop, perturbation
    off) to obtain the reference period; the perturbation is then switched on
    for ``n_periods`` periods. With ``closed_loop=False`` the controller is
    switched off and the lumped forcing applied instead.
    """
    if perturbation_amplitude < 0:
        raise ValueError("perturbation amplitude must be non-negative")
    omega = orbit.omega
    nyquist = m_samples * omega / (2 * 2 * math.pi)
    if perturbation_amplitude > 0 and not rig.noise.cutoff_frequency < nyquist:
        raise ValueError(
            f"noise cutoff {rig.noise.cutoff_frequency} Hz is not below the ARX Nyquist "
            f"frequency {nyquist:.3g} Hz"
        )
    work = rig.copy()
    work.set_noise(amplitude=0.0)
    disturbance = work.disturbance
    work.disturbance = None
    meas = drive_to_orbit(work, orbit, settle)
    reference = meas.record.tail(1)
    n_per = len(reference)

    if closed_loop:
        forcing = orbit.forcing
        target = ControlTarget(orbit.target.copy()).series
        ref_i = reference.i.copy()
        ref_u = reference.u.copy()
    else:
        work.set_controller(False)
        forcing = orbit.effective_forcing
        target = None
        ref_i = forcing.a * np.cos(omega * reference.t) + forcing.b * np.sin(omega * reference.t)
        ref_u = np.zeros(n_per)

    work.state = RigState(work.state.x, work.state.xdot, 0.0)
    work.noise = rig.noise
    if seed is not None:
        work.set_noise(seed=seed)
    work.set_noise(amplitude=perturbation_amplitude)
    work.disturbance = disturbance
    record = work.run(forcing, n_periods, target)
    rig.state = work.state

    tile = lambda ref: np.tile(ref, n_periods)
    y = record.x - tile(reference.x)
    k = record.i - tile(ref_i)
    return PerturbationRecord(
        omega=omega, samples_per_period=n_per, reference_x=reference.x.copy(),
        reference_i=ref_i, y=y, k=k, eta=record.eta.copy(),
        control_deviation=record.u - tile(ref_u), closed_loop=closed_loop,
    )


def _row_regression(z, k, m, n, r):
    """Regressor matrix and targets for phase row ``r``."""
    L = len(z)
    first = n + ((-r - n) % m)
    idx = np.arange(first, L, m)
    lags_y = idx[:, None] - np.arange(1, n + 1)[None, :]
    lags_k = idx[:, None] - np.arange(0, n + 1)[None, :]
    Phi = np.hstack((-z[lags_y], k[lags_k]))
    return Phi, z[idx]


def fit_arx(data, m_samples=DEFAULT_M, n_order=DEFAULT_N, ridge=False, max_condition=1e10):
    """Least-squares fit of the periodic ARX model, one phase row at a time.

    Each row is solved through a QR factorisation of its regressor matrix.
    A row whose triangular factor has condition number above
    ``max_condition`` raises :class:`RankDeficient`, unless ``ridge`` is set,
    in which case a ridge term ``1e-8 * trace(Phi^T Phi)`` is added.
    """
    if not 0 < n_order < m_samples:
        raise ValueError("need 0 < n_order < m_samples")
    z, k = data.decimate(m_samples)
    m, n = m_samples, n_order
    b = np.zeros((m, n))
    a = np.zeros((m, n + 1))
    rss = np.zeros(m)
    n_obs = np.zeros(m, dtype=int)
    for r in range(m):
        Phi, target = _row_regression(z, k, m, n, r)
        if Phi.shape[0] < Phi.shape[1]:
            raise RankDeficient(f"row {r}: {Phi.shape[0]} equations for {Phi.shape[1]} unknowns")
        Q, R = np.linalg.qr(Phi)
        diag = np.abs(np.diag(R))
        cond = np.inf if diag.min() == 0 else np.linalg.cond(R)
        if cond > max_condition:
            if not ridge:
                raise RankDeficient(f"row {r}: regressor condition number {cond:.3g}")
            G = Phi.T @ Phi
            lam = 1e-8 * np.trace(G) if np.trace(G) > 0 else 1e-300
            theta = linalg.solve(G + lam * np.eye(G.shape[0]), Phi.T @ target, assume_a="pos")
        else:
            theta = linalg.solve_triangular(R, Q.T @ target)
        resid = target - Phi @ theta
        b[r] = theta[:n]
        a[r] = theta[n:]
        rss[r] = resid @ resid
        n_obs[r] = len(target)
    return ArxModel(m, n, b, a, rss, n_obs)


def select_order(data, m_range, n_range):
    """Pick ``(m, n)`` minimising AIC = N ln(RSS/N) + 2 m (2n+1).

    Returns ``(m, n, table)`` where ``table`` maps each candidate pair to its
    score. Ties go to the smaller ``n`` and then the smaller ``m``.
    """
    table = {}
    for m in m_range:
        for n in n_range:
            if not 0 < n < m:
                raise ValueError(f"candidate (m={m}, n={n}) violates n < m")
            table[(m, n)] = fit_arx(data, m, n).aic()
    m, n = min(table, key=lambda mn: (table[mn], mn[1], mn[0]))
    return m, n, table


def monodromy(model, max_condition=1e12):
    """Monodromy matrix, multipliers and eigendirections of a fitted model.

    The period map is ``-B(0)^-1 (B(1) - B(0))``; its range only involves
    the first ``n`` delay coordinates, so the leading n-by-n block carries
    every nonzero multiplier. Eigenvectors are expressed in the coordinates
    ``(y(T), y(T - 1/m), ..., y(T - (n-1)/m))`` at the phase-0 section.
    Multipliers are sorted by decreasing modulus.
    """
    B0 = model.B(0.0)
    B1 = model.B(1.0) - B0
    cond = np.linalg.cond(B0)
    if not np.isfinite(cond) or cond > max_condition:
        raise SingularB0(f"B(0) is singular (condition number {cond:.3g})", cond)
    full = -np.linalg.solve(B0, B1)
    n = model.n_order
    M = full[:n, :n]
    vals, vecs = _sorted_eig(M)
    return FloquetResult(
        monodromy=M, multipliers=vals, eigenvectors=vecs, m_samples=model.m_samples,
        n_order=n, rss=float(model.rss.sum()), condition_b0=float(cond),
    )


@dataclass
class FloquetConfig:
    perturbation_amplitude: float = 0.5
    n_periods: int = DEFAULT_PERIODS
    m_samples: int = DEFAULT_M
    n_order: int = DEFAULT_N
    auto_order: bool = False
    m_range: tuple = (5, 10, 20)
    n_range: tuple = (1, 2, 3, 4)
    repeats: int = DEFAULT_REPEATS
    closed_loop: bool = True
    seed: int = 0
    margin_factor: float = 3.0


def confidence_interval(samples, level=0.95):
    """Mean and t-distribution half-width across repeats (axis 0)."""
    samples = np.asarray(samples, dtype=float)
    mean = samples.mean(axis=0)
    n = samples.shape[0]
    if n < 2:
        return mean, np.zeros_like(mean)
    sd = samples.std(axis=0, ddof=1)
    half = stats.t.ppf(0.5 + level / 2, n - 1) * sd / math.sqrt(n)
    return mean, half


def repeat_seeds(seed, repeats):
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1, np.uint64)[0] >> np.uint64(1)) for s in ss.spawn(repeats)]


def estimate_floquet(rig, orbit, config=None):
    """Repeated perturb-fit-extract cycle on one orbit.

    Returns a :class:`FloquetResult` built from the repeat-averaged
    monodromy, with mean and 95% confidence half-width of the sorted
    multiplier moduli in ``ci`` and the per-repeat results in ``repeats``.
    The orbit is classed unstable if the mean leading modulus exceeds
    ``1 + margin_factor * half_width``.
    """
    config = config or FloquetConfig()
    m, n = config.m_samples, config.n_order
    results = []
    for s in repeat_seeds(config.seed, config.repeats):
        data = collect_perturbed_data(
            rig, orbit, config.perturbation_amplitude, config.n_periods,
            m if not config.auto_order else max(config.m_range), config.closed_loop, seed=s,
        )
        if config.auto_order:
            m, n, _ = select_order(data, config.m_range, config.n_range)
        results.append(monodromy(fit_arx(data, m, n)))

    n_keep = min(len(r.multipliers) for r in results)
    moduli = np.array([np.abs(r.multipliers[:n_keep]) for r in results])
    mean, half = confidence_interval(moduli)
    if all(r.monodromy.shape == results[0].monodromy.shape for r in results):
        M = np.mean([r.monodromy for r in results], axis=0)
        vals, vecs = _sorted_eig(M)
    else:
        M, vals, vecs = results[0].monodromy, results[0].multipliers, results[0].eigenvectors
    stable = not mean[0] > 1.0 + config.margin_factor * half[0]
    return FloquetResult(
        monodromy=M, multipliers=vals, eigenvectors=vecs, m_samples=results[0].m_samples,
        n_order=results[0].n_order, rss=float(np.mean([r.rss for r in results])),
        condition_b0=max(r.condition_b0 for r in results),
        ci={"mean_abs": mean.tolist(), "half_width": half.tolist(), "repeats": len(results)},
        stable=stable, repeats=results,
    )
