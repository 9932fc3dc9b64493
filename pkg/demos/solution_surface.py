"""Fit the forcing-amplitude surface G(omega, A) to CBC sweeps and extract
the fold curve and fixed-forcing response curves from it.

Run with ``python3 demos/solution_surface.py``. Takes about twenty seconds.
"""

import math

import numpy as np

from cbclab.cbc import continuation_sweep
from cbclab.rig import VirtualRig
from cbclab.surface import SurfacePoint, fold_curve, frequency_response, gp_fit

freqs = np.round(np.arange(2.3, 3.21, 0.1), 2)
points = []
for f in freqs:
    run = continuation_sweep(VirtualRig(), 2 * math.pi * f, np.linspace(0.002, 0.06, 20))
    points += [SurfacePoint(p.omega, p.response_amplitude, p.gamma) for p in run]
surface = gp_fit(points)
print(f"GP on {len(points)} points:", surface.hyperparameters.to_dict())

# Folds are where dG/dA vanishes. The two branches meet at the cusp, the
# lowest frequency with hysteresis.
curve = fold_curve(surface)
i = int(np.argmin(curve.omega))
print(f"fold curve: {len(curve)} points, cusp near {curve.omega[i] / (2 * math.pi):.3f} Hz, "
      f"A={curve.amplitude[i]:.4f}, gamma={curve.gamma[i]:.3f}")

grid = 2 * math.pi * np.linspace(2.3, 3.2, 81)
for gamma in (0.4, 1.0):
    branches = frequency_response(surface, gamma, grid)
    n_folds = sum(int(b.is_fold_point.sum()) for b in branches)
    peak = max(b.amplitude.max() for b in branches)
    print(f"gamma={gamma}: {len(branches)} branch(es), {n_folds} fold point(s), peak A={peak:.4f}")
