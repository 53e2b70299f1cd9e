"""odesplit: operator-splitting solver for coupled PDE-ODE systems with
exact discrete adjoint and tangent-linear models.

The library couples P1 finite-element diffusion steps with collections of
pointwise ODE systems stepped by Butcher-tableau multistage or Rush-Larsen
schemes, records solves on a tape, and derives the exact discrete adjoint
and tangent-linear models for functional-gradient computation.
"""

from .expr import (
    Abs,
    Add,
    Compare,
    Const,
    Cos,
    Div,
    Exp,
    Expr,
    Log,
    Mul,
    Neg,
    Param,
    Piecewise,
    Pow,
    RhsSystem,
    Sin,
    State,
    Time,
    differentiate,
    evaluate,
    is_linear_in,
    piecewise,
    simplify,
)
from .fem import (
    SparseOperator,
    StructuredTriMesh,
    assemble_mass,
    assemble_stiffness,
    cg_solve,
    lumped_mass_vector,
)
from .kernel import Kernel, Scratch, compile_kernel
from .linalg import SingularPivotError, lu_factor, lu_solve
from .multistage import (
    NewtonNonconvergenceError,
    NewtonParams,
    StageWorkspace,
    StepStats,
    newton_solve,
    step,
    step_batch,
)
from .parsing import format_system, parse_system
from .pointcloud import (
    PointOdeSolver,
    PointSet,
    StateField,
    apply_scalar_map,
    assemble_point_functional,
    load_field,
    save_field,
    step_all,
)
from .rushlarsen import RlScheme, make_rl_scheme, phi, phi_prime, rl_step_batch
from .sensitivity import (
    Control,
    Functional,
    Tape,
    adj_step_multistage,
    adj_step_rl,
    adjoint_sweep,
    reverse_sweep,
    taylor_test,
    tlm_step_multistage,
    tlm_step_rl,
    tlm_sweep,
)
from .splitting import (
    MitoPdeStep,
    MonodomainStep,
    SplitConfig,
    pde_step_mito,
    pde_step_monodomain,
    run_ode_only,
    run_split,
    split_step,
)
from .steppers import MultistageStepper, RushLarsenStepper, make_stepper
from .tableau import BUILTIN_NAMES, ButcherTableau, builtin, order_conditions, validate

__version__ = "0.1.0"
