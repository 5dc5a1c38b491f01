"""Finite-volume solver for modified Poisson-Nernst-Planck equations with
steric and Born solvation effects."""

from .mesh import DualMesh, SimplicialMesh, build_dual, generate_structured, load_mesh, save_mesh
from .model import ModelSpec, SpeciesSpec, State, chemical_potential, discrete_energy, solvent_fraction
from .reconstruction import build_stencils, reconstruct_face_values
from .schemes import SCHEME_I, SCHEME_II, Discretization, ForcingData
from .solver import NewtonConfig, NonConvergence, minimize_J_oracle, solve_steady_pb, step

__version__ = "0.1.0"

__all__ = [
    "DualMesh", "SimplicialMesh", "build_dual", "generate_structured", "load_mesh", "save_mesh",
    "ModelSpec", "SpeciesSpec", "State", "chemical_potential", "discrete_energy", "solvent_fraction",
    "build_stencils", "reconstruct_face_values",
    "SCHEME_I", "SCHEME_II", "Discretization", "ForcingData",
    "NewtonConfig", "NonConvergence", "minimize_J_oracle", "solve_steady_pb", "step",
]
