"""Monte Carlo estimates of the Neumann heat problem against its closed form.

The penalized estimate u^n(t, x) moves toward the exact value as n grows,
and the reflected scheme sits at the limit up to time-step bias.
"""

from penbsde import builtin
from penbsde.bsde import stream_levels
from penbsde.forward import TimeGrid

inst = builtin("neumann-heat-interval")
exact = inst.exact_value()[0]
grid = TimeGrid.for_instance(inst, dt=2e-3)
streams = stream_levels(inst, [4, 16, 64, 256, None], grid, path_count=20_000, seed=3)

print(f"exact u = {exact:.5f}")
for s in streams:
    u, se = s.summary()
    label = "reflected" if s.level is None else f"n={s.level}"
    print(f"{label:>10}: u = {u[0]:.5f} +- {se[0]:.5f}   error {abs(u[0] - exact):.5f}")
