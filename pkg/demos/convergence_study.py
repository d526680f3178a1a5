"""
Cauchy convergence on small meshes
==================================

Without an exact solution we compare each mesh with the next finer one.
The time step follows dt = 0.1 h, so with a second order scheme every
difference should drop by about a factor of four per level.
"""
import dataclasses
import sys

from chns.diagnostics import cauchy_convergence
from chns.experiments import CONVERGENCE, default_scenario

levels = [int(a) for a in sys.argv[1:]] or [3, 4, 5, 6]
s = dataclasses.replace(default_scenario(CONVERGENCE), T=0.05)

print(f"{'var':>4} {'levels':>7} {'difference':>12} {'rate':>6}")
for row in cauchy_convergence(s, levels):
    rate = "" if row.rate is None else f"{row.rate:6.3f}"
    print(f"{row.variable:>4} {row.levels[0]:>3}-{row.levels[1]:<3} {row.error:12.4e} {rate}")
