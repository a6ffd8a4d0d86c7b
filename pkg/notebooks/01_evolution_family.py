# %% [markdown]
# # An evolution family with non-commuting coefficients
#
# The two-piece Example switches its coefficient matrix at t = 0. The two
# matrices do not commute, so the solution operator is a genuine time-ordered
# product and not the exponential of the integrated symbol.

# %%
import numpy as np

from evofam import (
    EvolutionOperator,
    GridField,
    check_cocycle,
    decay_exponent_fit,
    noncommuting_example,
    propagate_homogeneous,
)
from evofam.evolution_family import apply_S
from evofam.expm import expm
from evofam.operator_spec import principal_symbol

spec = noncommuting_example()
xi = np.array([1.5])
ordered = propagate_homogeneous(spec, xi, -1.0, 1.0)
naive = expm(-(principal_symbol(spec, -0.5, xi) + principal_symbol(spec, 0.5, xi)))
print("time-ordered product:\n", ordered.round(6))
print("exponential of the integral:\n", naive.round(6))
print("difference:", np.linalg.norm(ordered - naive, 2))

# %% [markdown]
# ## Cocycle on a periodic grid

# %%
rng = np.random.default_rng(0)
op = EvolutionOperator(spec, 64)
g = GridField.random_bandlimited(1, 64, 2 * np.pi, 2, rng)
for s, r, t in [(-1.0, 0.0, 1.0), (-0.3, 0.2, 0.9)]:
    print(f"S(t,r)S(r,s) vs S(t,s) at {(s, r, t)}: {check_cocycle(op, s, r, t, g):.1e}")
print("norm decay:", g.norm(), "->", apply_S(op, 1.0, -1.0, g).norm())

# %% [markdown]
# ## Smoothing: D^alpha S(t, s) decays like (t - s)^(-|alpha|/2)

# %%
op = EvolutionOperator(spec, 128)
for order in (1, 2):
    fit = decay_exponent_fit(op, (order,), 0.5, 0.5 + np.geomspace(5e-4, 0.5, 25))
    print(f"|alpha| = {order}: slope {fit.slope:.3f}, constant {fit.C:.3f}")
