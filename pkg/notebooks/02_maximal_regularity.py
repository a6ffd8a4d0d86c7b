# %% [markdown]
# # Maximal regularity in a lambda sweep
#
# Solve u' + (A(t) + lambda) u = f on a time window and compare the size of
# lambda u, u' and the top-order term with the size of f. The ratio should
# stay bounded as lambda grows.

# %%
import numpy as np

from evofam import SpaceTimeField, WeightSpec, ap_constant, lambda_sweep, noncommuting_example, solve_nondivergence
from evofam.mreg_lab import aligned_times

spec = noncommuting_example()
times = aligned_times(-1.0, 1.0, 1e-3, spec.breakpoints)
f = SpaceTimeField.random_bandlimited(times, 1, 16, 2 * np.pi, 2, np.random.default_rng(1), band=4)

table = lambda_sweep(spec, [1.0, 10.0, 100.0, 1000.0], f)
for row in table.rows:
    print(f"lambda = {row['lam']:7.1f}  ratio = {row['ratio']:.4f}  residual = {row['residual']:.1e}")
print("max/min:", round(table.spread, 4))

# %% [markdown]
# ## Power weights
#
# |t|^gamma belongs to A_p exactly when -1 < gamma < p - 1. Inside that range
# the dyadic estimate settles; outside it keeps growing.

# %%
for gamma in (0.5, 1.1):
    est = ap_constant(WeightSpec.power(gamma), 2.0, 12)
    print(f"gamma = {gamma}: estimate {est.value:.4f}, stable {est.stable}, diverging {est.diverging}")

for p, q in [(2, 2), (3, 2), (2, 3)]:
    _, rep = solve_nondivergence(spec, 10.0, f, p, q, WeightSpec.power(0.3 * (p - 1)), WeightSpec.power(0.3 * (q - 1)))
    print(f"(p, q) = ({p}, {q}): ratio {rep.ratio:.4f}")
