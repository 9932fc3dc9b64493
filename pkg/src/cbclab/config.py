"""Experiment configuration: one YAML file with a section per module.

Every value has a default (see :func:`reference_config`), so a config file
only needs the keys it changes. All randomness derives from ``seed`` through
:func:`sub_seed`.
"""

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from .cbc import SettleConfig, SweepConfig
from .errors import ConfigError
from .experiments import EscapeConfig
from .rig import ControllerConfig, NoiseConfig, RigParams, SpringGeometry
from .sysid import FloquetConfig

COMMAND_INDEX = {"sweep": 0, "floquet": 1, "escape": 2, "perturbation-study": 3,
                 "surface": 4, "oracle": 5}

DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "rig": {
        "natural_frequency_hz": 2.55,
        "damping_ratio": 0.03,
        "cubic_stiffness": 5.0e4,
        "spring_geometry": None,
        "displacement_limit": 0.08,
        "sample_rate": 1000.0,
        "period_lock": 20,
    },
    "controller": {"proportional_gain": 60.0, "derivative_gain": 2.0},
    "noise": {"amplitude": 0.0, "cutoff_frequency": 10.0, "filter_order": 6},
    "sweep": {
        # Forcing frequencies in Hz: start, stop (inclusive), step.
        "frequency_hz": {"start": 2.2, "stop": 3.2, "step": 0.025},
        "frequencies_hz": None,
        "amplitude": {"start": 0.002, "stop": 0.06, "num": 30},
        "refine_folds": 0,
        "forcing": [0.0, 0.0],
        "n_harmonics": 7,
        "rel_tol": 1.0e-6,
        "noisy_rel_tol": 1.0e-2,
        "max_iter": 20,
    },
    "sysid": {
        "m": 10,
        "n": 4,
        "auto_order": False,
        "perturbation_amplitude": 0.5,
        "n_periods": 200,
        "repeats": 10,
        "margin_factor": 3.0,
        "branch_repeats": 1,
    },
    "escape": {
        "frequency_hz": 2.9,
        "orbit_amplitude": 0.035,
        "n_runs": 40,
        "noise_amplitude": 0.02,
        "max_periods": 400,
        "linear_band": [0.03, 0.2],
        "time_series_stride": 1,
    },
    "perturbation_study": {
        "frequency_hz": 2.9,
        "stable_amplitude": 0.015,
        "unstable_amplitude": 0.035,
        "amplitudes": [0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
        "repeats": 10,
        "disturbance_amplitude": 0.02,
    },
    "surface": {
        "slices": [0.4, 0.6, 0.8, 1.0, 1.2],
        "n_starts": 8,
        "max_training_points": 600,
        "frequency_range_hz": None,
    },
    "oracle": {"frequencies_hz": None},
}


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for key, value in (over or {}).items():
        if key not in base:
            raise ConfigError(f"unknown config key '{path}{key}'")
        if isinstance(base[key], dict) and key not in ("spring_geometry",):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{path}{key}' must be a mapping")
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path=None, overrides=None):
        raw = {}
        if path is not None:
            try:
                with open(path) as fh:
                    raw = yaml.safe_load(fh) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a mapping")
        data = _merge(DEFAULTS, raw)
        if overrides:
            data = _merge(data, overrides)
        cfg = cls(data)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self):
        return int(self.data["seed"])

    def validate(self):
        try:
            self.rig_params()
            self.controller()
            self.noise()
            if len(self.frequencies_hz()) == 0:
                raise ConfigError("empty frequency list")
            grid = self.amplitude_grid()
            if np.any(grid <= 0):
                raise ConfigError("amplitude grid must be positive")
            self.floquet_config()
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    # Builders ---------------------------------------------------------------

    def rig_params(self):
        r = self.data["rig"]
        geo = r["spring_geometry"]
        return RigParams(
            natural_frequency=2 * math.pi * float(r["natural_frequency_hz"]),
            damping_ratio=float(r["damping_ratio"]),
            cubic_stiffness=float(r["cubic_stiffness"]),
            spring_geometry=None if geo is None else SpringGeometry(**geo),
            displacement_limit=float(r["displacement_limit"]),
            sample_rate=float(r["sample_rate"]),
            period_lock=int(r["period_lock"]),
        )

    def controller(self):
        c = self.data["controller"]
        return ControllerConfig(float(c["proportional_gain"]), float(c["derivative_gain"]))

    def noise(self, seed=0):
        n = self.data["noise"]
        return NoiseConfig(float(n["amplitude"]), float(n["cutoff_frequency"]),
                           int(n["filter_order"]), int(seed))

    def frequencies_hz(self):
        s = self.data["sweep"]
        if s["frequencies_hz"] is not None:
            return np.asarray(s["frequencies_hz"], dtype=float)
        f = s["frequency_hz"]
        n = int(round((f["stop"] - f["start"]) / f["step"])) + 1
        return np.round(f["start"] + f["step"] * np.arange(n), 10)

    def amplitude_grid(self):
        a = self.data["sweep"]["amplitude"]
        return np.linspace(float(a["start"]), float(a["stop"]), int(a["num"]))

    def sweep_config(self):
        """Sweep settings; with measurement noise on, the periodicity check is
        dropped and the looser ``noisy_rel_tol`` applies to the averaged data."""
        s = self.data["sweep"]
        noisy = float(self.data["noise"]["amplitude"]) > 0
        return SweepConfig(forcing_a=float(s["forcing"][0]), forcing_b=float(s["forcing"][1]),
                           n_harmonics=int(s["n_harmonics"]),
                           rel_tol=float(s["noisy_rel_tol"] if noisy else s["rel_tol"]),
                           max_iter=int(s["max_iter"]),
                           settle=SettleConfig(settle_rtol=None) if noisy else SettleConfig())

    def floquet_config(self, seed=0):
        s = self.data["sysid"]
        return FloquetConfig(
            perturbation_amplitude=float(s["perturbation_amplitude"]),
            n_periods=int(s["n_periods"]), m_samples=int(s["m"]), n_order=int(s["n"]),
            auto_order=bool(s["auto_order"]), repeats=int(s["repeats"]),
            margin_factor=float(s["margin_factor"]), seed=int(seed),
        )

    def escape_config(self):
        e = self.data["escape"]
        return EscapeConfig(n_runs=int(e["n_runs"]), noise_amplitude=float(e["noise_amplitude"]),
                            max_periods=int(e["max_periods"]),
                            linear_band=tuple(e["linear_band"]),
                            m_samples=int(self.data["sysid"]["m"]))

    # Output -----------------------------------------------------------------

    def to_yaml(self):
        return yaml.safe_dump(self.data, sort_keys=False)

    def write_snapshot(self, directory, command):
        path = directory / f"config_{command}.yaml"
        path.write_text(self.to_yaml())
        return path


def sub_seed(master, command, *indices):
    """Integer seed for ``(master seed, command, indices...)``.

    Seeds are drawn from ``numpy.random.SeedSequence([master, command index,
    *indices])`` so every repeat, frequency and run has its own stream.
    """
    entropy = [int(master), COMMAND_INDEX[command], *(int(i) for i in indices)]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0] >> 1)


COMMENTS = {
    "seed": "master seed; every random stream is derived from it",
    "output_dir": "default output directory (overridden by --out)",
    "rig.natural_frequency_hz": "linear natural frequency",
    "rig.damping_ratio": "viscous damping ratio",
    "rig.cubic_stiffness": "Duffing coefficient alpha, per m^2 per s^2",
    "rig.spring_geometry": "null, or {spring_constant, rest_length, mount_length, mass}",
    "rig.displacement_limit": "|x| above this aborts a run (m)",
    "rig.sample_rate": "integration and sampling rate (Hz), rounded to lock to the period",
    "rig.period_lock": "samples per period are a multiple of this",
    "controller.proportional_gain": "K_p",
    "controller.derivative_gain": "K_d",
    "noise.amplitude": "perturbation standard deviation before filtering",
    "noise.cutoff_frequency": "Butterworth cut-off (Hz)",
    "noise.filter_order": "Butterworth order",
    "sweep.frequency_hz": "forcing-frequency range, stop inclusive",
    "sweep.frequencies_hz": "explicit frequency list; overrides frequency_hz",
    "sweep.amplitude": "target amplitude grid (m), as numpy.linspace arguments",
    "sweep.refine_folds": "extra grid points inserted around each fold (0 = none)",
    "sweep.forcing": "open-loop forcing coefficients (a, b)",
    "sweep.n_harmonics": "harmonics in the control target",
    "sweep.rel_tol": "non-invasiveness tolerance relative to gamma",
    "sweep.noisy_rel_tol": "tolerance used instead when noise.amplitude > 0",
    "sweep.max_iter": "fixed-point iterations per point",
    "sysid.m": "samples per period in the ARX model",
    "sysid.n": "ARX order",
    "sysid.auto_order": "select (m, n) by AIC instead",
    "sysid.perturbation_amplitude": "identification perturbation size",
    "sysid.n_periods": "perturbed periods per estimate",
    "sysid.repeats": "estimates averaged per point",
    "sysid.margin_factor": "unstable if mean |mu| > 1 + factor * CI half-width",
    "sysid.branch_repeats": "repeat the floquet branch this many times",
    "escape.frequency_hz": "frequency of the unstable orbit (must be a swept frequency)",
    "escape.orbit_amplitude": "response amplitude of the orbit; nearest sweep point is used",
    "escape.n_runs": "independent escapes",
    "escape.noise_amplitude": "perturbation kept on during escapes",
    "escape.max_periods": "give up after this many periods",
    "escape.linear_band": "Poincare distances (fraction of amplitude) used for alignment",
    "escape.time_series_stride": "write every n-th sample of the escape time series",
    "perturbation_study.frequency_hz": "frequency of both orbits",
    "perturbation_study.stable_amplitude": "response amplitude of the stable orbit",
    "perturbation_study.unstable_amplitude": "response amplitude of the unstable orbit",
    "perturbation_study.amplitudes": "perturbation sizes",
    "perturbation_study.repeats": "estimates per size and condition",
    "perturbation_study.disturbance_amplitude": "unmeasured input disturbance level",
    "surface.slices": "gamma values of the frequency-response slices",
    "surface.n_starts": "hyperparameter optimiser starts",
    "surface.max_training_points": "evenly thinned to at most this many points",
    "surface.frequency_range_hz": "null for the swept range, or [lo, hi]",
    "oracle.frequencies_hz": "null for every swept frequency, or a list",
}


def _flow(value):
    return yaml.safe_dump(value, default_flow_style=True, width=1000).strip().removesuffix("...").strip()


def reference_config():
    """The full default configuration as YAML with every key commented."""
    lines = ["# cbclab reference configuration; every key is optional."]
    for key, value in DEFAULTS.items():
        if isinstance(value, dict):
            lines.append(f"{key}:")
            for sub, v in value.items():
                lines.append(f"  {sub}: {_flow(v)}  # {COMMENTS[key + '.' + sub]}")
        else:
            lines.append(f"{key}: {_flow(value)}  # {COMMENTS[key]}")
    return "\n".join(lines) + "\n"
