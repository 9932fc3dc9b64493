"""Gaussian-process solution surface ``gamma = G(omega, A)`` and its folds.

The surface is regressed with forcing amplitude as the output so that the
folded response sheet is single valued. Frequency-response slices are level
sets ``G = gamma`` and the fold curve is the zero set of ``dG/dA``; both are
traced with the same pseudo-arclength contour follower.
"""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .errors import IllConditionedKernel, NoFold, NoIntersection, OptimFailed

log = logging.getLogger(__name__)

MIN_TRAINING_POINTS = 10
N_STARTS = 8
# Level sets are traced only where the posterior std is below this fraction
# of the prior std.
SUPPORT_TOL = 0.05
_LOG_BOUNDS = [(-6.0, 6.0), (-6.0, 3.0), (-6.0, 3.0), (math.log(1e-10), 0.0)]


@dataclass(frozen=True)
class SurfacePoint:
    omega: float
    amplitude: float
    gamma: float

    def __post_init__(self):
        vals = (self.omega, self.amplitude, self.gamma)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite surface point {vals}")
        if self.amplitude < 0 or self.gamma < 0:
            raise ValueError(f"negative amplitude in surface point {vals}")


@dataclass
class Hyperparameters:
    """Kernel hyperparameters in standardised units."""

    signal_variance: float
    length_scales: tuple
    noise_variance: float

    def __post_init__(self):
        self.length_scales = tuple(float(v) for v in self.length_scales)
        vals = (self.signal_variance, *self.length_scales, self.noise_variance)
        if len(self.length_scales) != 2 or not all(v > 0 and math.isfinite(v) for v in vals):
            raise ValueError(f"hyperparameters must be positive and finite, got {vals}")

    def to_log(self):
        return np.log([self.signal_variance, *self.length_scales, self.noise_variance])

    @classmethod
    def from_log(cls, theta):
        e = np.exp(theta)
        return cls(e[0], (e[1], e[2]), e[3])

    def to_dict(self):
        return {"signal_variance": self.signal_variance,
                "length_scales": list(self.length_scales),
                "noise_variance": self.noise_variance}


def _sqdist_parts(U, V):
    return U[:, None, :] - V[None, :, :]


def _kernel(U, V, hyp):
    D = _sqdist_parts(U, V) / np.asarray(hyp.length_scales)
    return hyp.signal_variance * np.exp(-0.5 * np.sum(D * D, axis=-1))


def _factor(K, max_jitter=1e-4):
    """Cholesky with escalating diagonal jitter; returns (L, jitter)."""
    scale = float(np.mean(np.diag(K)))
    jitter = 0.0
    while True:
        try:
            L = linalg.cholesky(K + jitter * scale * np.eye(len(K)), lower=True)
            return L, jitter * scale
        except linalg.LinAlgError:
            jitter = 1e-12 if jitter == 0.0 else jitter * 10.0
            if jitter > max_jitter:
                raise IllConditionedKernel(
                    f"kernel matrix not positive definite with jitter up to {max_jitter:g}"
                ) from None


@dataclass
class GpSurface:
    """Trained GP regression of gamma on (omega, A).

    Inputs and output are standardised internally; ``jitter`` records any
    diagonal term added to make the kernel factorisable.
    """

    points: list
    hyperparameters: Hyperparameters
    x_mean: np.ndarray = field(repr=False, default=None)
    x_scale: np.ndarray = field(repr=False, default=None)
    y_mean: float = 0.0
    y_scale: float = 1.0
    jitter: float = 0.0
    log_marginal_likelihood: float = float("nan")

    def __post_init__(self):
        X = np.array([[p.omega, p.amplitude] for p in self.points], dtype=float)
        y = np.array([p.gamma for p in self.points], dtype=float)
        if self.x_mean is None:
            self.x_mean, self.x_scale, self.y_mean, self.y_scale = _standardisation(X, y)
        self._U = (X - self.x_mean) / self.x_scale
        self._z = (y - self.y_mean) / self.y_scale
        hyp = self.hyperparameters
        K = _kernel(self._U, self._U, hyp) + hyp.noise_variance * np.eye(len(y))
        self._L, self.jitter = _factor(K)
        self._alpha = linalg.cho_solve((self._L, True), self._z)

    # Bounds of the training data, used by the contour tracers.
    @property
    def bounds(self):
        X = self._U * self.x_scale + self.x_mean
        return (X[:, 0].min(), X[:, 0].max()), (X[:, 1].min(), X[:, 1].max())

    @property
    def scales(self):
        return tuple(self.x_scale)

    @property
    def gradient_resolution(self):
        """The same bound carried through to ``(dG/domega, dG/dA)``."""
        ell = np.asarray(self.hyperparameters.length_scales)
        ratio = np.finfo(np.longdouble).eps / np.finfo(float).eps
        return ratio * self.resolution / (ell * self.x_scale)

    @property
    def prior_variance(self):
        return self.hyperparameters.signal_variance * self.y_scale**2

    @property
    def resolution(self):
        """Bound on the rounding error of the posterior mean.

        Nearly noise-free data gives large weights ``alpha`` whose products
        with the kernel cancel; level sets cannot be located more finely.
        """
        eps = np.finfo(float).eps
        return eps * self.y_scale * self.hyperparameters.signal_variance * np.abs(self._alpha).sum()

    def _prep(self, omega, amplitude):
        om, am = np.broadcast_arrays(np.asarray(omega, float), np.asarray(amplitude, float))
        shape = om.shape
        u = (np.column_stack((om.ravel(), am.ravel())) - self.x_mean) / self.x_scale
        return u, shape

    def predict(self, omega, amplitude):
        """Posterior mean and variance of gamma."""
        u, shape = self._prep(omega, amplitude)
        Ks = _kernel(u, self._U, self.hyperparameters)
        mean = self.y_mean + self.y_scale * (Ks @ self._alpha)
        v = linalg.solve_triangular(self._L, Ks.T, lower=True)
        var = self.hyperparameters.signal_variance - np.sum(v * v, axis=0)
        var = np.maximum(var, 0.0) * self.y_scale**2
        if shape == ():
            return float(mean[0]), float(var[0])
        return mean.reshape(shape), var.reshape(shape)

    def mean(self, omega, amplitude):
        return self.predict(omega, amplitude)[0]

    def _weights(self, omega, amplitude):
        # Extended precision: the weighted kernel terms cancel heavily and
        # the fold tracer works on their derivatives.
        u = (np.array([omega, amplitude], dtype=np.longdouble) - self.x_mean) / self.x_scale
        ell = np.asarray(self.hyperparameters.length_scales, dtype=np.longdouble)
        D = (u - self._U) / ell
        k = self.hyperparameters.signal_variance * np.exp(-0.5 * np.sum(D * D, axis=1))
        return D / ell, k * self._alpha, ell * ell

    def gradient(self, omega, amplitude):
        """``(dG/domega, dG/dA)`` of the posterior mean at a single point."""
        D, w, _ = self._weights(omega, amplitude)
        g = -(w @ D)
        return np.asarray(g, dtype=float) * self.y_scale / self.x_scale

    def hessian(self, omega, amplitude):
        D, w, ell2 = self._weights(omega, amplitude)
        H = (D * w[:, None]).T @ D - np.diag(w.sum() / ell2)
        return np.asarray(H, dtype=float) * self.y_scale / np.outer(self.x_scale, self.x_scale)

    def to_dict(self):
        return {"hyperparameters": self.hyperparameters.to_dict(), "jitter": self.jitter,
                "log_marginal_likelihood": self.log_marginal_likelihood,
                "n_points": len(self.points)}


def _standardisation(X, y):
    xm = X.mean(axis=0)
    xs = X.std(axis=0)
    xs[xs == 0] = 1.0
    ys = float(y.std()) or 1.0
    return xm, xs, float(y.mean()), ys


def _neg_log_marginal(theta, U, z, D2):
    """Negative log marginal likelihood and its gradient in log parameters."""
    s2, l1, l2, sn2 = np.exp(theta)
    Kf = s2 * np.exp(-0.5 * (D2[0] / l1**2 + D2[1] / l2**2))
    n = len(z)
    K = Kf + sn2 * np.eye(n)
    try:
        L = linalg.cholesky(K, lower=True)
    except linalg.LinAlgError:
        return 1e25, np.zeros(4)
    alpha = linalg.cho_solve((L, True), z)
    nll = 0.5 * z @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * n * math.log(2 * math.pi)
    W = np.outer(alpha, alpha) - linalg.cho_solve((L, True), np.eye(n))
    grads = (
        Kf,
        Kf * D2[0] / l1**2,
        Kf * D2[1] / l2**2,
        sn2 * np.eye(n),
    )
    g = np.array([-0.5 * np.sum(W * dK) for dK in grads])
    return nll, g


def gp_fit(points, init_hyperparameters=None, n_starts=N_STARTS, seed=0):
    """Fit the GP by multi-start maximisation of the log marginal likelihood.

    Starts are drawn log-uniformly; ``init_hyperparameters`` (if given) is
    used as the first start. Raises :class:`OptimFailed` if every start fails.
    """
    points = list(points)
    if len(points) < MIN_TRAINING_POINTS:
        raise ValueError(f"need at least {MIN_TRAINING_POINTS} points, got {len(points)}")
    X = np.array([[p.omega, p.amplitude] for p in points])
    y = np.array([p.gamma for p in points])
    xm, xs, ym, ys = _standardisation(X, y)
    U = (X - xm) / xs
    z = (y - ym) / ys
    P = _sqdist_parts(U, U)
    D2 = (P[..., 0] ** 2, P[..., 1] ** 2)

    rng = np.random.default_rng(seed)
    starts = []
    if init_hyperparameters is not None:
        starts.append(np.clip(init_hyperparameters.to_log(), *np.array(_LOG_BOUNDS).T))
    while len(starts) < n_starts:
        starts.append(np.array([
            rng.uniform(math.log(0.1), math.log(10.0)),
            rng.uniform(math.log(0.05), math.log(2.0)),
            rng.uniform(math.log(0.05), math.log(2.0)),
            rng.uniform(math.log(1e-8), math.log(1e-2)),
        ]))

    best = None
    for theta0 in starts:
        try:
            res = optimize.minimize(_neg_log_marginal, theta0, args=(U, z, D2), jac=True,
                                    method="L-BFGS-B", bounds=_LOG_BOUNDS)
        except (ValueError, FloatingPointError) as exc:
            log.debug("GP start failed: %s", exc)
            continue
        if not np.isfinite(res.fun) or res.fun >= 1e25:
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise OptimFailed("all hyperparameter starts failed")
    hyp = Hyperparameters.from_log(best.x)
    surf = GpSurface(points, hyp, xm, xs, ym, ys)
    surf.log_marginal_likelihood = -float(best.fun) - len(z) * math.log(ys)
    return surf


def gp_predict(surface, omega, amplitude):
    """Posterior ``(mean, variance)`` of gamma at ``(omega, A)``."""
    return surface.predict(omega, amplitude)


class AnalyticSurface:
    """Closed-form surface with the same interface as :class:`GpSurface`.

    ``func(omega, A)`` returns gamma; ``grad`` and ``hess`` return its
    first and second derivatives in ``(omega, A)`` order.
    """

    def __init__(self, func, grad, hess, omega_bounds, amplitude_bounds):
        self.func = func
        self.grad = grad
        self.hess = hess
        self.bounds = (tuple(omega_bounds), tuple(amplitude_bounds))
        self.scales = tuple(hi - lo for lo, hi in self.bounds)
        self.resolution = 0.0

    @classmethod
    def cubic(cls, omega_bounds=(0.0, 1.0), amplitude_bounds=(-1.5, 1.5)):
        """``G = A**3 - A + 2``, independent of omega; folds at ``A = +-1/sqrt(3)``."""
        return cls(
            lambda w, a: a**3 - a + 2.0,
            lambda w, a: np.array([0.0, 3.0 * a**2 - 1.0]),
            lambda w, a: np.array([[0.0, 0.0], [0.0, 6.0 * a]]),
            omega_bounds, amplitude_bounds,
        )

    def mean(self, omega, amplitude):
        return self.func(omega, amplitude)

    def predict(self, omega, amplitude):
        return self.func(omega, amplitude), 0.0

    def gradient(self, omega, amplitude):
        return np.asarray(self.grad(omega, amplitude), dtype=float)

    def hessian(self, omega, amplitude):
        return np.asarray(self.hess(omega, amplitude), dtype=float)


# Contour tracing ----------------------------------------------------------

@dataclass
class _Contour:
    """Scalar function F(p) with gradient, in scaled coordinates."""

    f: callable
    grad: callable
    scale: np.ndarray

    def value(self, q):
        return self.f(*(q * self.scale))

    def gradient(self, q):
        return self.grad(*(q * self.scale)) * self.scale


def _correct(contour, q, tol, max_iter=12):
    """Minimum-norm Newton projection onto F = 0."""
    for _ in range(max_iter):
        F = contour.value(q)
        if abs(F) <= tol:
            return q, True
        g = contour.gradient(q)
        gg = g @ g
        if gg == 0.0 or not np.isfinite(gg):
            return q, False
        q = q - F * g / gg
    return q, abs(contour.value(q)) <= tol


def _tangent(contour, q, previous=None):
    g = contour.gradient(q)
    t = np.array([-g[1], g[0]])
    nt = np.linalg.norm(t)
    if nt == 0:
        return None
    t /= nt
    if previous is not None and t @ previous < 0:
        t = -t
    return t


def _trace(contour, q0, direction, lo, hi, step, tol, max_steps, inside=None):
    path = []
    q = q0
    t = _tangent(contour, q, direction)
    h = step
    for _ in range(max_steps):
        if t is None:
            break
        qn, ok = _correct(contour, q + h * t, tol)
        tn = _tangent(contour, qn, t) if ok else None
        if not ok or tn is None or t @ tn < 0.9 or np.linalg.norm(qn - q) > 2 * h:
            h *= 0.5
            if h < step * 1e-4:
                break
            continue
        if np.any(qn < lo) or np.any(qn > hi) or (inside and not inside(qn)):
            break
        path.append(qn)
        if len(path) > 3 and np.linalg.norm(qn - q0) < 0.5 * step:
            break
        q, t = qn, tn
        h = min(step, 1.5 * h)
    return path


def _trace_from_seeds(contour, seeds, lo, hi, step, tol, max_steps, inside=None):
    branches = []
    for s in seeds:
        if inside and not inside(s):
            continue
        if any(np.min(np.linalg.norm(b - s, axis=1)) < 2 * step for b in branches):
            continue
        q0, ok = _correct(contour, s, tol)
        if not ok or (inside and not inside(q0)):
            continue
        t0 = _tangent(contour, q0)
        if t0 is None:
            continue
        fwd = _trace(contour, q0, t0, lo, hi, step, tol, max_steps, inside)
        back = _trace(contour, q0, -t0, lo, hi, step, tol, max_steps, inside)
        branch = np.array(back[::-1] + [q0] + fwd)
        branches.append(branch)
    return branches


def _seed_scan(f, omegas, amps):
    """Sign changes of ``f`` along A at each omega, as (omega, A) seeds."""
    seeds = []
    for w in omegas:
        vals = np.array([f(w, a) for a in amps])
        for j in np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)[0]:
            a = optimize.brentq(lambda x: f(w, x), amps[j], amps[j + 1])
            seeds.append((w, a))
    return seeds


def _box(surface, omega_range):
    (wlo, whi), (alo, ahi) = surface.bounds
    if omega_range is not None:
        wlo, whi = max(wlo, min(omega_range)), min(whi, max(omega_range))
    return np.array([wlo, alo]), np.array([whi, ahi])


def _support(surface, scale, support_tol):
    """Predicate on scaled points: posterior std within ``support_tol`` of the
    prior std. Outside the data the mean relaxes to a constant and grows
    level sets and folds that the data do not show."""
    if support_tol is None:
        return None
    prior = support_tol * np.sqrt(getattr(surface, "prior_variance", 0.0))
    if prior == 0.0:
        return None
    return lambda q: surface.predict(*(q * scale))[1] <= prior**2


@dataclass
class SliceBranch:
    omega: np.ndarray
    amplitude: np.ndarray
    is_fold_point: np.ndarray

    @property
    def fold_points(self):
        return np.column_stack((self.omega, self.amplitude))[self.is_fold_point]


def _refine_slice_fold(surface, gamma, p, tol=1e-10, max_iter=30):
    """Newton on ``(G - gamma, dG/dA) = 0`` in (omega, A)."""
    p = np.array(p, dtype=float)
    for _ in range(max_iter):
        g = surface.gradient(*p)
        H = surface.hessian(*p)
        F = np.array([surface.mean(*p) - gamma, g[1]])
        J = np.array([[g[0], g[1]], [H[1, 0], H[1, 1]]])
        try:
            dp = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return None
        p = p + dp
        if np.all(np.abs(dp) <= tol * np.maximum(np.abs(p), 1e-12)):
            return p
    return None


def frequency_response(surface, gamma, omega_grid, n_amplitudes=200, step=0.02, tol=1e-10,
                       max_steps=5000, support_tol=SUPPORT_TOL):
    """Trace the level set ``G(omega, A) = gamma`` over the span of ``omega_grid``.

    Returns a list of :class:`SliceBranch`; points where the branch tangent
    is vertical in omega are refined and flagged as fold points.
    """
    omega_grid = np.asarray(omega_grid, dtype=float)
    tol = max(tol, surface.resolution)
    lo, hi = _box(surface, omega_grid)
    scale = np.asarray(surface.scales, dtype=float)
    contour = _Contour(lambda w, a: surface.mean(w, a) - gamma,
                       lambda w, a: np.asarray(surface.gradient(w, a)), scale)
    amps = np.linspace(lo[1], hi[1], n_amplitudes)
    seeds = _seed_scan(lambda w, a: surface.mean(w, a) - gamma,
                       omega_grid[(omega_grid >= lo[0]) & (omega_grid <= hi[0])], amps)
    if not seeds:
        raise NoIntersection(f"no contour at gamma={gamma:g} on the grid")
    seeds = [np.array(s) / scale for s in seeds]
    branches = _trace_from_seeds(contour, seeds, lo / scale, hi / scale, step, tol, max_steps,
                                 _support(surface, scale, support_tol))
    if not branches:
        raise NoIntersection(f"no supported contour at gamma={gamma:g}")
    out = []
    for b in branches:
        P = b * scale
        if P[0, 0] > P[-1, 0]:
            P = P[::-1]
        pts = [P[0]]
        fl = [False]
        dw = np.diff(P[:, 0])
        for j in range(1, len(P)):
            if j < len(dw) and dw[j - 1] * dw[j] < 0:
                f = _refine_slice_fold(surface, gamma, P[j])
                if f is not None and np.linalg.norm((f - P[j]) / scale) < 2 * step:
                    pts.append(f)
                    fl.append(True)
                    continue
            pts.append(P[j])
            fl.append(False)
        pts = np.array(pts)
        flags = np.array(fl)
        out.append(SliceBranch(pts[:, 0], pts[:, 1], flags))
    return out


@dataclass
class FoldCurve:
    omega: np.ndarray
    amplitude: np.ndarray
    gamma: np.ndarray
    branch_id: np.ndarray
    residual: np.ndarray

    def __len__(self):
        return len(self.omega)

    def as_array(self):
        return np.column_stack((self.omega, self.amplitude, self.gamma))


def _polish_fold(surface, p, tol, max_iter=20):
    """Newton in A at fixed omega on dG/dA = 0, falling back to the
    minimum-norm projection where d2G/dA2 is small (near the cusp)."""
    w, a = float(p[0]), float(p[1])
    for _ in range(max_iter):
        r = surface.gradient(w, a)[1]
        if abs(r) <= tol:
            return np.array([w, a]), abs(r)
        h = surface.hessian(w, a)
        if abs(h[1, 1]) > 1e-6 * np.linalg.norm(h[1]):
            a -= r / h[1, 1]
        else:
            g = h[1]
            w, a = np.array([w, a]) - r * g / (g @ g)
    return np.array([w, a]), abs(surface.gradient(w, a)[1])


def fold_curve(surface, omega_range=None, n_omega=60, n_amplitudes=200, step=0.02, tol=1e-11,
               max_steps=5000, support_tol=SUPPORT_TOL):
    """Zero set of ``dG/dA`` traced through the cusp, with gamma on it."""
    lo, hi = _box(surface, omega_range)
    scale = np.asarray(surface.scales, dtype=float)
    # Trace at the rounding floor of dG/dA; the returned points are polished.
    tol = max(tol, 4 * float(np.asarray(getattr(surface, "gradient_resolution", 0.0)).max()))
    dGdA = lambda w, a: surface.gradient(w, a)[1]
    contour = _Contour(dGdA, lambda w, a: np.asarray(surface.hessian(w, a))[1], scale)
    omegas = np.linspace(lo[0], hi[0], n_omega)
    amps = np.linspace(lo[1], hi[1], n_amplitudes)
    seeds = [np.array(s) / scale for s in _seed_scan(dGdA, omegas, amps)]
    if not seeds:
        raise NoFold("dG/dA has no zero in range")
    branches = _trace_from_seeds(contour, seeds, lo / scale, hi / scale, step, tol, max_steps,
                                 _support(surface, scale, support_tol))
    rows = []
    for bid, b in enumerate(branches):
        for q in b:
            p, res = _polish_fold(surface, q * scale, 1e-9)
            rows.append((p[0], p[1], surface.mean(*p), bid, res))
    if not rows:
        raise NoFold("fold tracing produced no points")
    R = np.array(rows)
    return FoldCurve(R[:, 0], R[:, 1], R[:, 2], R[:, 3].astype(int), R[:, 4])


# File interfaces -----------------------------------------------------------

def load_sweep_points(paths):
    """SurfacePoints from sweep CSVs (``omega,gamma,response_amplitude,...``)."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    points = []
    for path in paths:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                points.append(SurfacePoint(float(row["omega"]), float(row["response_amplitude"]),
                                           float(row["gamma"])))
    return points


def write_fold_curve_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["omega", "A", "gamma"])
        for row in curve.as_array():
            w.writerow([repr(float(v)) for v in row])


def slice_filename(gamma):
    return f"slice_{gamma:g}.csv"


def write_slice_csv(path, branches):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["omega", "A", "branch_id", "is_fold_point"])
        for bid, b in enumerate(branches):
            for om, a, f in zip(b.omega, b.amplitude, b.is_fold_point):
                w.writerow([repr(float(om)), repr(float(a)), bid, int(f)])
