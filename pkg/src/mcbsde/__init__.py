"""BSDE solvers driven by finite-state continuous-time Markov chains.

The library is organized around five pieces: the chain itself (`chain`),
the jump calculus of its martingale part (`calculus`), the martingale
representation (`representation`), the three-stage BSDE solvers with their
independent backward-ODE oracle (`solver`, `drivers`), and a batch CLI
(`cli`) with a Monte Carlo identity suite (`verification`).
"""

from .chain import (
    BadBreakpoints,
    ChainPath,
    ColumnSumNonzero,
    NegativeOffDiagonal,
    OutOfRange,
    RateSchedule,
    ScheduleError,
    simulate_path,
    simulate_paths,
    transition_matrix,
    validate_schedule,
)
from .calculus import (
    PathProcessSample,
    SeminormContext,
    compensated_jump,
    counting_process,
    inner_V,
    martingale_path,
    optional_qv,
    predictable_qv,
    qv_density,
    seminorm_sq_V,
)
from .representation import (
    IntegrandField,
    NotAMartingale,
    ReconstructionReport,
    StateFunction,
    conditional_expectation,
    integrability_diagnostic,
    reconstruct,
    representation_integrand,
)
from .solver import (
    ContractionSummary,
    DegenerateBox,
    Driver,
    LipschitzBox,
    LipschitzEstimate,
    NoConvergence,
    NonFiniteDriver,
    PicardReport,
    Solution,
    SolverError,
    TerminalCondition,
    contraction_diagnostics,
    estimate_lipschitz,
    fstar_inverse,
    fstar_transform,
    pathwise_residual,
    route_stage,
    solve,
    solve_general,
    solve_ode_oracle,
    solve_stage1,
    solve_stage2,
)
from .drivers import FAMILY_NAMES, UnknownFamily, build_driver

__version__ = "0.1.0"
