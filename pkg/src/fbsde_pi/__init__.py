"""Policy iteration for stochastic optimal control with BSDE-based policy evaluation."""

__version__ = "0.1.0"

from .approximators import MlpModel, QuadGradModel, QuadValueModel, fd_grad, load_params, save_params
from .bml import (
    BsdeInstance,
    CriterionSet,
    GeneratorSpec,
    OptConfig,
    TrialSolution,
    build_offpolicy_instance,
    build_onpolicy_instance,
    criterion_grad,
    criterion_value,
    sgd_solve,
    tilde_y,
)
from .gpi import PIConfig, PIResult, off_policy_step, on_policy_step, run_gpi
from .oracles import closed_form_criterion, example1_oracle, example2_oracle, hopf_cole_v_star
from .paths import (
    BrownianBatch,
    DivergenceError,
    StatePathBatch,
    TimeGrid,
    TimeMeasure,
    integrate_sde,
    make_grid,
    quadrature,
    sample_brownian,
)
from .problems import (
    ControlProblem,
    ImprovedPolicy,
    LinearPolicy,
    ZeroPolicy,
    bsde_example_problem,
    improved_policy,
    lq_log_problem,
    mc_policy_cost,
)
