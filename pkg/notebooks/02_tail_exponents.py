# %% [markdown]
# # Tail exponents with and without the radial external field
#
# With a radial3 field the far density decays like r^-5.  Without an
# external field the leading far term cancels and what is left decays
# like r^-6, with an amplitude small enough that the fit window
# [100, 1000] sits below the 1e-14 floor used by the exponent fit.

# %%
import numpy as np

from vpdecay import diagnostics as diag
from vpdecay import solver
from vpdecay.model import ExternalField
from vpdecay.solver import GridSpec, SimConfig

grid = GridSpec(n_r=96, r_max=1000.0)
runs = {
    "radial3": solver.run(SimConfig(T=1.0, dt=0.02, grid=grid, audit_samples=512)),
    "none": solver.run(SimConfig(T=1.0, dt=0.02, grid=grid, audit_samples=512,
                                 external=ExternalField())),
}

# %%
for name, rs in runs.items():
    r = rs.state.grid.r
    for window in ((10.0, 100.0), (100.0, 1000.0)):
        try:
            fit = diag.fit_tail_exponent(rs.rho, r, window)
            print(f"{name:8s} {window}: exponent {fit.exponent:.3f} from {fit.points} points")
        except ValueError as exc:
            print(f"{name:8s} {window}: {exc}")
        fit = diag.fit_tail_exponent(rs.rho, r, window, floor=0.0)
        print(f"{name:8s} {window}: exponent without floor {fit.exponent:.3f}")

# %%
rs = runs["none"]
r = rs.state.grid.r
sel = (r >= 10) & (r <= 1000)
print("r, rho r^6 for the run without external field")
for ri, v in zip(r[sel][::6], (rs.rho * r**6)[sel][::6]):
    print(f"{ri:9.2f}  {v:+.4e}")
