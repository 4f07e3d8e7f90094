"""Sparse uniformization toolkit for continuous-time dynamic discrete choice models.

Modules
-------
sparse
    COO/CSR storage, SpMV, and reusable labelled sparsity patterns.
ctmc
    Generator validation, uniformization, Poisson truncation, and the
    truncated-series action of exp(delta Q) with parameter derivatives.
model
    Game primitives, aggregate generator assembly, and the built-in
    renewal and entry-exit models.
solver
    Bellman operator, value iteration, uniform policy representation,
    Newton-Kantorovich, and relative value iteration.
inference
    Trajectory simulation, snapshot likelihood with analytic gradient,
    bounded quasi-Newton MLE, and the Monte Carlo harness.
cli
    The ``ctddc`` command-line interface.
"""

from .sparse import (
    CooMatrix,
    CsrMatrix,
    SparsityPattern,
    coo_to_csr,
    csr_to_csc,
    spmv,
    update_values,
)
from .ctmc import (
    IntensityMatrix,
    TruncationBudget,
    UniformizedChain,
    UniformizedPropagator,
    dense_expm_oracle,
    expmv,
    expmvd,
    truncation_point,
    uniformize,
    validate_generator,
)
from .model import (
    CcpProfile,
    EntryExitFamily,
    GameSpec,
    ParameterVector,
    RenewalFamily,
    ShockSpec,
    activity_probability,
    assemble_q,
    assemble_q_derivatives,
    build_entry_exit,
    build_renewal,
    expected_shock,
    myopic_entry_exit_ccp,
)
from .solver import (
    ConvergenceReport,
    UniformRepresentation,
    bellman_apply,
    ccp_from_value,
    contraction_bounds,
    newton_kantorovich,
    policy_evaluate,
    relative_value_iterate,
    uniform_representation,
    value_iterate,
)
from .inference import (
    EstimationResult,
    McConfig,
    McSummary,
    SnapshotDataset,
    TransitionCounts,
    count_transitions,
    fit_mle,
    log_likelihood,
    log_likelihood_gradient,
    run_monte_carlo,
    sample_snapshots,
    simulate_trajectory,
)

__version__ = "0.1.0"
