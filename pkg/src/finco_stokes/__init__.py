"""Wavepacket reconstruction from complex classical trajectories.

A complex Lagrangian manifold of initial conditions is propagated under
Hamilton's equations, projected through a linear phase-space map, cleansed
of the divergent anti-Stokes sectors that emanate from the manifold's
caustics, and finally summed into a coherent-state reconstruction of the
time-evolved wavefunction.
"""

from .potentials import (PotentialSpec, benchmark_spec, potential_value,
                         potential_gradient, potential_hessian)
from .dynamics import (PhasePoint, TimeContour, StabilityMatrix,
                       TrajectoryRecord, propagate, batch_propagate)
from .manifold import (ProjectionParams, GaussianState, ManifoldGrid,
                       initial_conditions, build_and_propagate,
                       propagate_labels)
from .stokes import (CausticRecord, StokesField, find_caustics,
                     local_expansion, nu_tilde, stokes_value,
                     conjugate_root_search, berry_factor,
                     apply_stokes_treatment, treatment_factors)
from .finco import WavefunctionGrid, basis_gaussian, prefactor_branch, reconstruct
from .refine import (StripSet, resolution_angle, march_strips,
                     strip_wavefunction, reconstruct_refined)
from .qmref import (QmGridSpec, qm_propagate, overlap, normalized_overlap,
                    norm)

__version__ = "0.1.0"

__all__ = [
    "PotentialSpec", "benchmark_spec", "potential_value",
    "potential_gradient", "potential_hessian",
    "PhasePoint", "TimeContour", "StabilityMatrix", "TrajectoryRecord",
    "propagate", "batch_propagate",
    "ProjectionParams", "GaussianState", "ManifoldGrid",
    "initial_conditions", "build_and_propagate", "propagate_labels",
    "CausticRecord", "StokesField", "find_caustics", "local_expansion",
    "nu_tilde", "stokes_value", "conjugate_root_search", "berry_factor",
    "apply_stokes_treatment", "treatment_factors",
    "WavefunctionGrid", "basis_gaussian", "prefactor_branch", "reconstruct",
    "StripSet", "resolution_angle", "march_strips", "strip_wavefunction",
    "reconstruct_refined",
    "QmGridSpec", "qm_propagate", "overlap", "normalized_overlap", "norm",
    "__version__",
]
