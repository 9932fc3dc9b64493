"""Hold the rig on an unstable orbit, switch the controller off and watch
where it goes.

Each run keeps a small noise input on, so the rig leaves along the unstable
eigendirection and settles on either the high- or the low-amplitude stable
orbit. Run with ``python3 demos/escapes.py``.
"""

import math

import numpy as np

from cbclab.cbc import continuation_sweep
from cbclab.experiments import EscapeConfig, run_escapes
from cbclab.rig import VirtualRig
from cbclab.sysid import FloquetConfig, estimate_floquet

rig = VirtualRig()
run = continuation_sweep(rig, 2 * math.pi * 2.9, np.linspace(0.002, 0.06, 16))
orbit = run.points[int(np.argmin(np.abs(run.amplitudes() - 0.035)))]
fres = estimate_floquet(rig, orbit, FloquetConfig(repeats=10, seed=0))
print(f"orbit A={orbit.response_amplitude:.4f}, leading multiplier {fres.leading.real:.3f}")

result = run_escapes(rig, orbit, fres, seeds=range(20), config=EscapeConfig())
print("attractors reached:", result.attractor_counts)

# Near the orbit the Poincare dots should sit on the identified eigendirection.
ratio = result.alignment()
print(f"{len(ratio)} dots in the linear band, perpendicular/distance "
      f"median {np.median(ratio):.3f}, max {ratio.max():.3f}")
for r in result.runs[:5]:
    print(f"  seed {r.seed:2d}: {r.attractor:>4} after {r.periods} periods, A={r.final_amplitude:.4f}")
