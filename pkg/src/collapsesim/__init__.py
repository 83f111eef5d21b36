"""Collapse-model dephasing, entanglement and continuous-measurement trajectories for mass superpositions."""

from .model import (CSL, DP, Particle, ParticleSystem, PhysicalConstants, ModelError, NumericalError,
                    ValidationError, bmv_scenario, bmv_system, check_density_matrix, product_state)
from .overlaps import coulomb_overlap_oracle, ftilde, gaussian_overlap
from .generators import GeneratorTables, build_tables, dp_full_generator, monitoring_tables
from .evolution import evolve_exact, evolve_rk4, short_time_state
from .entanglement import Bipartition, first_order_pq, negativity, partial_transpose
from .trajectories import Scenario, build_noise_model, run_ensemble, run_trajectory

__all__ = [
    "CSL", "DP", "Particle", "ParticleSystem", "PhysicalConstants", "ModelError", "NumericalError",
    "ValidationError", "bmv_scenario", "bmv_system", "check_density_matrix", "product_state",
    "coulomb_overlap_oracle", "ftilde", "gaussian_overlap",
    "GeneratorTables", "build_tables", "dp_full_generator", "monitoring_tables",
    "evolve_exact", "evolve_rk4", "short_time_state",
    "Bipartition", "first_order_pq", "negativity", "partial_transpose",
    "Scenario", "build_noise_model", "run_ensemble", "run_trajectory",
]
__version__ = "0.1.0"
