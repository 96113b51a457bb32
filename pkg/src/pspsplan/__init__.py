"""Proactive de-energization planning for wildfire-prone distribution grids.

A library and CLI for planning and evaluating public-safety power shutoff
switching policies on radial networks: a robust Markov decision process
with decision-dependent line-failure probabilities, an approximate dynamic
programming solver, myopic and exogenous-uncertainty baselines, and a
seeded Monte Carlo evaluation harness.
"""

from .adp import (
    AdpConfig,
    ConvergenceReport,
    ExactDpResult,
    FeatureVector,
    ValueFunction,
    exact_dp,
    features,
    greedy_policy,
    ridge_update,
    train,
)
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    ContractViolationError,
    ConvergenceError,
    DegenerateDistributionError,
    InfeasibleModelError,
    ModelBuildError,
    NetworkValidationError,
    PspsplanError,
    ScheduleError,
    SizeCapError,
    SolverError,
)
from .network import (
    Bus,
    CostConfig,
    FireSchedule,
    Line,
    Network,
    SystemState,
    check_state,
    initial_state,
    load_network,
    make_state,
    network_hash,
    parse_network,
    serialize_network,
)
from .simulate import (
    MetricsReport,
    Policy,
    ScenarioRecord,
    evaluate,
    rollout,
    shedding_histogram,
)
from .solvers import EnumerationBackend, MilpBackend, make_backend, write_lp
from .stage import (
    DispatchSolution,
    StageProblem,
    build_stage,
    dual_oracle,
    replay_constraints,
    solve_stage,
    stage_costs,
)
from .transition import (
    AmbiguitySet,
    CandidateModel,
    LinearizedTransition,
    TransitionPattern,
    build_candidates,
    enumerate_patterns,
    exact_transition_prob,
    expected_features,
    linearize,
    normalized_probs,
    pattern_probabilities,
    sample_successor,
    survival_prob,
    zero_beta_candidates,
)

__version__ = "0.1.0"
