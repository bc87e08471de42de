# %% [markdown]
# # Radial field against direct lattice quadrature
#
# The uniform ball has an exact radial field.  The lattice quadrature of
# the Coulomb kernel is an independent evaluator, and the comparison
# below shows how its error behaves as the lattice is refined.

# %%
from vpdecay.field import uniform_ball_comparison

for h in (1 / 8, 1 / 16):
    res = uniform_ball_comparison(8, h=h)
    print(f"h = {h:.4f}: interior {res['interior_relerr']:.3e}, "
          f"exterior {res['exterior_relerr']:.3e}, "
          f"truncation estimate {res['truncation_estimate']:.2e}")
