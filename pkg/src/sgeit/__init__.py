"""Sparse-grid collocation surrogates and geometry-aware inversion for 2-D EIT.

The package builds a polynomial surrogate of the complete-electrode-model
forward map over a parameter hypercube (conductivity pixels, boundary shape,
electrode positions, contact resistances) and fits it to electrode voltage
data by regularized nonlinear least squares.
"""

from sgeit.geometry import (
    SetupConfig,
    ParameterVector,
    ConductivityPartition,
    ElectrodeArc,
    NonOverlapViolation,
    bspline_basis,
    boundary_radius,
    map_to_reference,
    map_from_reference,
    electrode_angles,
    electrode_arcs,
    conductivity_at,
    contact_resistances,
    sigma_values,
    build_partition,
)
from sgeit.meshing import TriMesh, MeshResolution, generate_mesh
from sgeit.forward import (
    ForwardSolution,
    SolverBreakdown,
    default_currents,
    validate_current_matrix,
    assemble,
    solve,
    change_current_basis,
    CemForwardSolver,
)
from sgeit.sparse_grid import (
    UnivariateRule,
    SmolyakRule,
    NodeBudgetExceeded,
    cc_nodes,
    cc_weights,
    smolyak_rule,
    smolyak_node_count,
    integrate,
)
from sgeit.surrogate import (
    MultiIndexSet,
    Surrogate,
    SurrogateBuildError,
    legendre_1d,
    build_surrogate,
)
from sgeit.inversion import (
    Regularizer,
    LMOptions,
    ReconstructionResult,
    build_regularizer,
    levenberg_marquardt,
    reconstruct,
    extract_reconstruction,
)
from sgeit.data_io import (
    Phantom,
    FourierBoundary,
    Inclusion,
    MeasurementFrame,
    simulate,
    load_measurements,
    save_measurements,
    convert_units,
)

__version__ = "0.1.0"
