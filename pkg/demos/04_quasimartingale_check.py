"""Conditional variation of the solution process across penalty levels.

A martingale has conditional variation near the estimator's noise floor, a
deterministic monotone path has variation equal to its total increase, and
the penalized solution processes stay bounded as the penalty grows.
"""

import numpy as np

from penbsde import builtin
from penbsde.bsde import SolverConfig, solve_lsmc
from penbsde.diagnostics import conditional_variation, cv_noise_floor, tightness_criterion
from penbsde.forward import TimeGrid, batch_simulate

gen = np.random.default_rng(0)
walk = np.vstack([np.zeros((1, 5000)), np.cumsum(0.1 * gen.standard_normal((64, 5000)), axis=0)])
print(f"random walk: cv = {conditional_variation(walk, walk):.4f}, "
      f"noise floor = {cv_noise_floor(walk, walk, replicates=10):.4f}")

inst = builtin("affine-flux-interval")
grid = TimeGrid.for_instance(inst, dt=4e-3)
for n in (4, 16, 64):
    ens = batch_simulate(inst, n, grid, 5000, seed=11)
    sol = solve_lsmc(inst, ens, SolverConfig(mode="lsmc-explicit", keep_paths=True))
    print(f"affine flux n={n:>3}: cv + sup|Y| = {tightness_criterion(sol.Y[..., 0], ens.X, domain=inst.domain):.3f}")
