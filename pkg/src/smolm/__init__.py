"""smolm: simulation and inversion of orientation-sensitive single-molecule images.

The package covers the full chain: six-image orientational basis models
(synthetic or loaded), exact scene rendering with Poisson noise, a
group-sparse constrained Poisson solver on a first-order sub-grid model,
gradient-consistency detection with channel-robust pooling, and
support-restricted maximum-likelihood refinement down to per-molecule
position, brightness, and orientation.
"""

from .basis import (
    BasisStack,
    SyntheticBasisParams,
    integrate_pixels,
    load_basis,
    synthetic_basis,
)
from .detect import (
    Detection,
    EmitterEstimate,
    RefineConfig,
    find_support,
    grad_map,
    grad_map_from_signal,
    pool_maps,
    refine_support,
)
from .forward import (
    Emitter,
    Frame,
    apply_channel_misalignment,
    render_scene,
    sample_poisson,
)
from .moments import (
    OrientationEstimate,
    cone_angle_to_gamma,
    cone_moments,
    gamma_to_cone_angle,
    moment_matrix,
    moment_vector,
    orientation_from_moments,
    project_physical,
)
from .operator import DesignOperator, GridSpec
from .solver import (
    JointSignal,
    SolveDiagnostics,
    SolverConfig,
    SolverError,
    cone_residual,
    deconvolve,
    group_norm,
    moreau_envelope,
    moreau_gradient,
    poisson_nll,
    poisson_nll_grad,
    project_soc,
    prox_group_norm,
)

__version__ = "0.1.0"
