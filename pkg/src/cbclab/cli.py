"""Batch commands: sweep, floquet, escape, perturbation-study, surface, oracle.

Commands communicate only through files under the output directory. Each
writes a snapshot of its effective configuration next to its outputs.
Exit status is 0 on success, 1 if any failure was recorded and 2 for a bad
configuration.
"""

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import surface as surf
from .cbc import (ContinuationPoint, ContinuationRun, continuation_sweep, drive_to_orbit,
                  refine_grid_near_folds)
from .config import ExperimentConfig, reference_config, sub_seed
from .errors import CbcError, ConfigError
from .experiments import (CONDITIONS, FLOQUET_COLUMNS, branch_rows, escape_once,
                          floquet_branch, study_cell, unstable_direction)
from .oracle import OrbitInput, liouville_determinant, variational_multipliers
from .rig import NoiseConfig, VirtualRig
from .sysid import estimate_floquet

log = logging.getLogger("cbclab")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return f"{float(v):.17g}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _freq_label(f_hz):
    return f"{f_hz:.3f}Hz"


def _map(fn, items, jobs):
    """Ordered map, in worker processes when ``jobs > 1``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _make_rig(cfg, noise_seed=0):
    return VirtualRig(cfg.rig_params(), cfg.controller(), cfg.noise(noise_seed))


# sweep ----------------------------------------------------------------------

def _sweep_one(args):
    data, index, f_hz = args
    cfg = ExperimentConfig(data)
    rig = _make_rig(cfg, sub_seed(cfg.seed, "sweep", index))
    omega = 2 * math.pi * f_hz
    sweep_cfg = cfg.sweep_config()
    try:
        run = continuation_sweep(rig, omega, cfg.amplitude_grid(), sweep_cfg)
        extra = int(cfg["sweep"]["refine_folds"])
        if extra > 0 and run.aborted is None:
            run = continuation_sweep(rig, omega, refine_grid_near_folds(run, extra), sweep_cfg)
    except CbcError as exc:
        where = getattr(exc, "grid_index", None)
        return f_hz, None, f"omega={omega:.6g} (f={f_hz:g} Hz) grid index {where}: {type(exc).__name__}: {exc}"
    run.metadata["frequency_hz"] = f_hz
    error = None
    if run.aborted is not None:
        error = f"omega={omega:.6g} (f={f_hz:g} Hz) aborted at {run.aborted}"
    return f_hz, run, error


def cmd_sweep(cfg, out, jobs):
    d = out / "sweep"
    d.mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(d, "sweep")
    freqs = cfg.frequencies_hz()
    results = _map(_sweep_one, [(cfg.data, i, float(f)) for i, f in enumerate(freqs)], jobs)
    failures = []
    combined = []
    for f_hz, run, error in results:
        if error:
            log.error("sweep failed: %s", error)
            failures.append(error)
        if run is None:
            continue
        stem = f"sweep_{_freq_label(f_hz)}"
        run.to_csv(d / f"{stem}.csv")
        run.to_json(d / f"{stem}.json")
        combined += [[p.omega, f_hz, p.gamma, p.response_amplitude, p.residual] for p in run.points]
    _write_csv(d / "sweep_combined.csv",
               ["omega", "frequency_hz", "gamma", "response_amplitude", "residual"], combined)
    _write_failures(d, failures)
    return EXIT_FAILURE if failures else EXIT_OK


def _write_failures(directory, failures):
    path = directory / "failures.txt"
    if failures:
        path.write_text("\n".join(failures) + "\n")
    elif path.exists():
        path.unlink()


def _load_runs(out):
    d = out / "sweep"
    paths = sorted(d.glob("sweep_*Hz.json"))
    if not paths:
        raise ConfigError(f"no sweep outputs in {d}; run 'sweep' first")
    return [(float(p.stem[len("sweep_"):-2]), ContinuationRun.from_json(p)) for p in paths]


def _nearest_run(runs, f_hz):
    f, run = min(runs, key=lambda fr: abs(fr[0] - f_hz))
    if abs(f - f_hz) > 1e-6:
        raise ConfigError(f"no sweep at {f_hz} Hz (nearest {f} Hz)")
    return run


def _nearest_point(run, amplitude):
    return run.points[int(np.argmin(np.abs(run.amplitudes() - amplitude)))]


# floquet --------------------------------------------------------------------

def _floquet_one(args):
    data, fi, f_hz, rep, run_dict = args
    cfg = ExperimentConfig(data)
    run = ContinuationRun.from_dict(run_dict)
    rig = _make_rig(cfg)
    stab = floquet_branch(rig, run, cfg.floquet_config(),
                          seed_for=lambda i: sub_seed(cfg.seed, "floquet", fi, rep, i))
    return f_hz, rep, branch_rows(stab), stab.failures


def cmd_floquet(cfg, out, jobs):
    d = out / "floquet"
    d.mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(d, "floquet")
    runs = _load_runs(out)
    reps = int(cfg["sysid"]["branch_repeats"])
    tasks = [(cfg.data, fi, f, r, run.to_dict()) for fi, (f, run) in enumerate(runs)
             for r in range(reps)]
    failures = []
    for f_hz, rep, rows, fails in _map(_floquet_one, tasks, jobs):
        suffix = "" if reps == 1 else f"_r{rep}"
        _write_csv(d / f"floquet_{_freq_label(f_hz)}{suffix}.csv", FLOQUET_COLUMNS, rows)
        failures += [f"f={f_hz:g} Hz repeat {rep} point {i}: {msg}" for i, msg in fails.items()]
    _write_failures(d, failures)
    return EXIT_FAILURE if failures else EXIT_OK


# escape ---------------------------------------------------------------------

def _escape_rig(cfg):
    rig = _make_rig(cfg)
    rig.noise = NoiseConfig(cfg["escape"]["noise_amplitude"], rig.noise.cutoff_frequency,
                            rig.noise.filter_order, 0)
    return rig


def _escape_one(args):
    data, r, point_dict, origin, amp = args
    cfg = ExperimentConfig(data)
    point = ContinuationPoint.from_dict(point_dict)
    seed = sub_seed(cfg.seed, "escape", r)
    try:
        return r, escape_once(_escape_rig(cfg), point, seed, cfg.escape_config(),
                              np.asarray(origin), amp), None
    except CbcError as exc:
        return r, None, f"run {r} (seed {seed}): {type(exc).__name__}: {exc}"


def cmd_escape(cfg, out, jobs):
    d = out / "escape"
    d.mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(d, "escape")
    e = cfg["escape"]
    run = _nearest_run(_load_runs(out), float(e["frequency_hz"]))
    point = _nearest_point(run, float(e["orbit_amplitude"]))
    rig = _escape_rig(cfg)
    fres = estimate_floquet(rig, point, cfg.floquet_config(sub_seed(cfg.seed, "escape", 10**6)))
    if fres.stable:
        log.error("selected orbit (A=%.4g) is not unstable", point.response_amplitude)
        _write_failures(d, [f"orbit at A={point.response_amplitude:.6g} classed stable"])
        return EXIT_FAILURE
    esc = cfg.escape_config()
    ref_rig = rig.copy()
    ref_rig.set_noise(amplitude=0.0)
    ref = drive_to_orbit(ref_rig, point).record.tail(1)
    lag = len(ref) // esc.m_samples
    origin = [float(ref_rig.state.x), float(ref.x[-lag])]
    amp = point.response_amplitude
    results = _map(_escape_one, [(cfg.data, r, point.to_dict(), origin, amp)
                                 for r in range(esc.n_runs)], jobs)
    direction = unstable_direction(fres)
    failures, summary, dots, series = [], [], [], []
    stride = max(1, int(e["time_series_stride"]))
    for r, er, err in results:
        if err:
            failures.append(err)
            continue
        summary.append([r, er.seed, er.attractor, er.periods, er.final_amplitude])
        for k, (p0, p1) in enumerate(er.poincare, start=1):
            dots.append([r, k, p0, p1])
        t = np.arange(len(er.x)) * er.dt
        series += [[r, tt, xx] for tt, xx in zip(t[::stride], er.x[::stride])]
    _write_csv(d / "escape_summary.csv",
               ["run", "seed", "attractor", "periods", "final_amplitude"], summary)
    _write_csv(d / "poincare.csv", ["run", "k", "x_kT", "x_kT_minus_lag"], dots)
    _write_csv(d / "timeseries.csv", ["run", "t", "x"], series)
    eig = {
        "origin": origin, "direction": direction.tolist(),
        "orbit": {"omega": point.omega, "gamma": point.gamma, "response_amplitude": amp},
        "floquet": fres.to_dict(),
    }
    (d / "eigendirection.json").write_text(json.dumps(eig, indent=1))
    _write_failures(d, failures)
    return EXIT_FAILURE if failures else EXIT_OK


# perturbation study ---------------------------------------------------------

def _study_one(args):
    data, ci, ai, cond, amp, point_dict = args
    cfg = ExperimentConfig(data)
    p = cfg["perturbation_study"]
    point = ContinuationPoint.from_dict(point_dict)
    base = cfg.noise()
    dist = NoiseConfig(float(p["disturbance_amplitude"]), base.cutoff_frequency,
                       base.filter_order, 0)
    row = study_cell(_make_rig(cfg), point, cond, amp, int(p["repeats"]),
                     (cfg.seed, 3, ci, ai), dist if dist.amplitude > 0 else None,
                     cfg.floquet_config())
    return row


def cmd_perturbation_study(cfg, out, jobs):
    d = out / "perturbation_study"
    d.mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(d, "perturbation-study")
    p = cfg["perturbation_study"]
    run = _nearest_run(_load_runs(out), float(p["frequency_hz"]))
    stable = _nearest_point(run, float(p["stable_amplitude"]))
    unstable = _nearest_point(run, float(p["unstable_amplitude"]))
    tasks = []
    for ci, cond in enumerate(CONDITIONS):
        orbit = unstable if cond == "unstable_closed_loop" else stable
        for ai, amp in enumerate(p["amplitudes"]):
            tasks.append((cfg.data, ci, ai, cond, float(amp), orbit.to_dict()))
    rows = _map(_study_one, tasks, jobs)
    _write_csv(d / "perturbation_study.csv",
               ["condition", "perturbation_amplitude", "mean_abs", "ci_half_width", "repeats"],
               [[r.condition, r.perturbation_amplitude, r.mean_abs, r.half_width, len(r.moduli)]
                for r in rows])
    return EXIT_OK


# surface --------------------------------------------------------------------

def cmd_surface(cfg, out, jobs):
    d = out / "surface"
    d.mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(d, "surface")
    s = cfg["surface"]
    src = out / "sweep" / "sweep_combined.csv"
    if not src.exists():
        raise ConfigError(f"{src} not found; run 'sweep' first")
    points = surf.load_sweep_points(src)
    keep = int(s["max_training_points"])
    if len(points) > keep:
        idx = np.unique(np.round(np.linspace(0, len(points) - 1, keep)).astype(int))
        points = [points[i] for i in idx]
    failures = []
    try:
        gp = surf.gp_fit(points, n_starts=int(s["n_starts"]), seed=sub_seed(cfg.seed, "surface"))
    except (CbcError, ValueError) as exc:
        log.error("surface fit failed: %s", exc)
        _write_failures(d, [f"gp_fit on {len(points)} points: {type(exc).__name__}: {exc}"])
        return EXIT_FAILURE
    (d / "surface.json").write_text(json.dumps(gp.to_dict(), indent=1))
    fr = s["frequency_range_hz"]
    omega_range = None if fr is None else (2 * math.pi * fr[0], 2 * math.pi * fr[1])
    try:
        curve = surf.fold_curve(gp, omega_range)
        surf.write_fold_curve_csv(d / "fold_curve.csv", curve)
    except CbcError as exc:
        failures.append(f"fold curve: {type(exc).__name__}: {exc}")
    (wlo, whi), _ = gp.bounds
    if omega_range is not None:
        wlo, whi = max(wlo, omega_range[0]), min(whi, omega_range[1])
    grid = np.linspace(wlo, whi, 81)
    for g in s["slices"]:
        try:
            branches = surf.frequency_response(gp, float(g), grid)
            surf.write_slice_csv(d / surf.slice_filename(float(g)), branches)
        except CbcError as exc:
            failures.append(f"slice gamma={g}: {type(exc).__name__}: {exc}")
    for f in failures:
        log.error("%s", f)
    _write_failures(d, failures)
    return EXIT_FAILURE if failures else EXIT_OK


# oracle ---------------------------------------------------------------------

ORACLE_COLUMNS = ["omega", "gamma", "response_amplitude", "mu1_re", "mu1_im", "mu_abs_1",
                  "mu2_re", "mu2_im", "mu_abs_2", "det", "liouville", "stable"]


def _oracle_one(args):
    data, f_hz, run_dict = args
    cfg = ExperimentConfig(data)
    params = cfg.rig_params()
    run = ContinuationRun.from_dict(run_dict)
    rows, results, failures = [], [], []
    for i, p in enumerate(run.points):
        try:
            vr = variational_multipliers(params, OrbitInput.from_point(p), p.state)
        except CbcError as exc:
            failures.append(f"f={f_hz:g} Hz point {i}: {type(exc).__name__}: {exc}")
            continue
        mu = vr.multipliers
        rows.append([p.omega, p.gamma, p.response_amplitude, mu[0].real, mu[0].imag, abs(mu[0]),
                     mu[1].real, mu[1].imag, abs(mu[1]), float(np.linalg.det(vr.monodromy)),
                     liouville_determinant(params, p.omega), int(vr.stable)])
        results.append(vr.to_floquet_result().to_dict())
    return f_hz, rows, results, failures


def cmd_oracle(cfg, out, jobs):
    d = out / "oracle"
    d.mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(d, "oracle")
    runs = _load_runs(out)
    wanted = cfg["oracle"]["frequencies_hz"]
    if wanted is not None:
        runs = [(f, _nearest_run(runs, float(f))) for f in wanted]
    failures = []
    for f_hz, rows, results, fails in _map(
            _oracle_one, [(cfg.data, f, run.to_dict()) for f, run in runs], jobs):
        _write_csv(d / f"oracle_{_freq_label(f_hz)}.csv", ORACLE_COLUMNS, rows)
        (d / f"oracle_{_freq_label(f_hz)}.json").write_text(json.dumps(results, indent=1))
        failures += fails
    _write_failures(d, failures)
    return EXIT_FAILURE if failures else EXIT_OK


COMMANDS = {
    "sweep": cmd_sweep,
    "floquet": cmd_floquet,
    "escape": cmd_escape,
    "perturbation-study": cmd_perturbation_study,
    "surface": cmd_surface,
    "oracle": cmd_oracle,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="cbclab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("reference-config", help="print the documented default config")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "reference-config":
        sys.stdout.write(reference_config())
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {} if args.seed is None else {"seed": args.seed}
        cfg = ExperimentConfig.load(args.config, overrides)
        out = args.out if args.out is not None else Path(cfg["output_dir"])
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
