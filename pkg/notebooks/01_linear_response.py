# %% [markdown]
# # Far-field density under a radial3 external field
#
# Far from the perturbation the density is driven only by the external
# field.  Linearizing around the background gives
# rho r^5 -> -(3a / 4 pi) (1 - cos(w t)) with w^2 = 4 pi int F.
# This notebook runs a reduced problem and compares the outer shells with
# that formula.

# %%
import math

import numpy as np

from vpdecay import solver
from vpdecay.solver import GridSpec, SimConfig

cfg = SimConfig(T=1.0, dt=0.02, grid=GridSpec(n_r=96, r_max=1000.0), audit_samples=512)
rs = solver.run(cfg)

# %%
a = 0.1
w = math.sqrt(4 * math.pi * cfg.background.total())
r = rs.state.grid.r
far = r >= 100.0
print(" t      measured rho r^5   linear response")
for snap in rs.history.snapshots[::10]:
    measured = np.median(snap.rho[far] * r[far] ** 5)
    predicted = -(3 * a / (4 * math.pi)) * (1 - math.cos(w * snap.t))
    print(f"{snap.t:4.2f}   {measured:+.6e}      {predicted:+.6e}")

# %% [markdown]
# The outer shells follow the oscillation closely.  The density there is
# taken from the exact closure identity rather than from interpolated g,
# which is why values of order 1e-12 survive.
