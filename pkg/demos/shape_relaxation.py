"""
A square drop becomes round
===========================

Surface tension pulls a square drop toward a disc.  We follow the
isoperimetric ratio 4 pi A / P^2 of the zero level set, which is pi/4 for a
square and 1 for a disc, along with the kinetic energy of the flow that the
capillary force sets up in an initially quiescent fluid.
"""
import dataclasses
import warnings

from chns.diagnostics import isoperimetric_ratio
from chns.experiments import RELAX_QUIESCENT, MeshSpec, default_scenario, run_scenario

s = default_scenario(RELAX_QUIESCENT)
# coarser mesh and a thicker interface than the 128^2 default
s = dataclasses.replace(s, mesh=MeshSpec(48, 48), phys=dataclasses.replace(s.phys, epsilon=0.04),
                        T=0.2)

history = []


def watch(state, report):
    if state.k % 5 == 0:
        history.append((state.t, isoperimetric_ratio(state.fe, state.phi)))


with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # 48^2 under-resolves eps = 0.04 by the four-cell rule
    res = run_scenario(s, callback=watch)

kinetic = {round(e.t, 6): e.kinetic for e in res.energies}
for t, ratio in history:
    print(f"t = {t:5.3f}   4 pi A / P^2 = {ratio:.4f}   kinetic = {kinetic[round(t, 6)]:.3e}")
