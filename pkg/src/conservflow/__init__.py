"""Locally conservative Q^r pressure solver, Lagrangian-Eulerian transport and their coupling."""

from .errors import (
    CFLError,
    ConfigurationError,
    ModelError,
    NumericalFailure,
    RankDeficiencyError,
    SingularRatioError,
    SolverError,
    StateError,
)
from .grid import (
    DualMesh,
    FESpace,
    PrimalMesh,
    QrBasis,
    basis_eval,
    build_dual_mesh,
    build_primal_mesh,
)
from .elliptic import (
    MobilityField,
    PressureSolution,
    SaddleSystem,
    assemble_constraints,
    assemble_loads,
    assemble_stiffness,
    build_saddle_system,
    compare_methods,
    energy_indicator,
    error_norms,
    manufactured_solution,
    mass_indicator,
    recover_cv_fluxes,
    solve_fem,
    solve_pressure,
    solve_saddle,
)
from .hyperbolic import (
    BoundarySpec,
    CellField,
    FluxModel,
    ProjectionWeights,
    cfl_dt,
    convergence_table,
    edge_ratio,
    face_states,
    flux_form,
    le_step,
    run_problem,
    welge_front,
    welge_solution,
)
from .coupling import (
    SimulationConfig,
    TwoPhaseState,
    apply_slab_bcs,
    impes_advance,
    mass_balance_report,
    run_coupled,
    total_mobility,
)
from .fields_io import PermeabilityRaster, RunManifest, barrier_field, load_raster, write_outputs

__version__ = "0.1.0"
