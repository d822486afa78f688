"""Path-integral QMC escape dynamics for fully connected spin models.

Simulation (Metropolis replica dynamics, first-passage statistics) and
theory (exact diagonalization, discrete transfer-matrix saddles, the
continuous-time instanton, spin-coherent-state cross-check) live in
sibling modules; the cli module wires them into reproducible experiments.
"""

from .model import (
    Boundary,
    CostFunction,
    ModelSpec,
    QmcParams,
    SpinPath,
    binary_entropy,
    classical_free_energy,
    coupling_j,
    entropy_prime,
    p_spin,
    tilted_quadratic,
)

__version__ = "0.1.0"

__all__ = [
    "Boundary",
    "CostFunction",
    "ModelSpec",
    "QmcParams",
    "SpinPath",
    "binary_entropy",
    "classical_free_energy",
    "coupling_j",
    "entropy_prime",
    "p_spin",
    "tilted_quadratic",
    "__version__",
]
