"""Trace one frequency-response branch of the simulated Duffing rig and
classify each orbit from identified Floquet multipliers.

Run with ``python3 demos/branch_stability.py``. Takes about ten seconds.
"""

import math

import numpy as np

from cbclab.cbc import continuation_sweep, fold_indices
from cbclab.oracle import OrbitInput, variational_multipliers
from cbclab.rig import VirtualRig
from cbclab.sysid import FloquetConfig, estimate_floquet

FREQ_HZ = 2.9

rig = VirtualRig()
run = continuation_sweep(rig, 2 * math.pi * FREQ_HZ, np.linspace(0.002, 0.06, 20))
folds = fold_indices(run)
print(f"{len(run)} orbits at {FREQ_HZ} Hz; gamma turns back after points {folds}")

# Each orbit is perturbed with filtered noise while the controller holds it,
# a periodic ARX model is fitted, and its monodromy matrix gives the
# multipliers. The oracle integrates the variational equation directly.
print(f"{'A':>8} {'gamma':>8} {'|mu| sysid':>11} {'|mu| oracle':>12}  stable")
for i, p in enumerate(run.points):
    est = estimate_floquet(rig, p, FloquetConfig(repeats=5, seed=i))
    ref = variational_multipliers(rig.params, OrbitInput.from_point(p), p.state)
    print(f"{p.response_amplitude:8.4f} {p.gamma:8.3f} {abs(est.leading):11.3f} "
          f"{ref.moduli.max():12.3f}  {'yes' if est.stable else 'NO'}")
