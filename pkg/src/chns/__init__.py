"""Second order energy-stable finite element solver for Cahn-Hilliard-Navier-Stokes."""
from .fespace import FeSystem, Field, eval_field, interpolate
from .mesh import Mesh, build_uniform_mesh
from .stepper import CHNSStepper, Mobility, PhysParams, SchemeParams, SimState

__all__ = [
    "CHNSStepper", "FeSystem", "Field", "Mesh", "Mobility", "PhysParams", "SchemeParams",
    "SimState", "build_uniform_mesh", "eval_field", "interpolate",
]
__version__ = "0.1.0"
