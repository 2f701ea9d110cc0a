"""Monte-Carlo and regression tools for semilinear path-dependent PDEs."""
from .bsde import (
    BsdeSolution,
    Estimate,
    abs_driver,
    dpp_residual,
    estimate_z,
    nonlinear_expectation,
    solve_bsde,
    solve_many,
    value_functional,
)
from .errors import (
    AdaptednessError,
    ControlBoundError,
    GridError,
    NoContactError,
    NumericalError,
    PpdeError,
    PreconditionError,
    RegressionError,
    ValidationError,
)
from .paths import (
    AdaptedFunctional,
    DiscretePath,
    PathEnsemble,
    TimeGrid,
    concat,
    constant,
    load_ensemble,
    pseudo_distance,
    save_ensemble,
    shift_eval,
    sup_norm,
)
from .regression import ExactConditioner, RegressionBasis, regress
from .sde import (
    RngStream,
    conditional_ensemble,
    girsanov_weights,
    simulate_base,
    simulate_drifted,
    tree_ensemble,
)
from .snell import (
    FixedTime,
    LocalizingTime,
    SnellSolution,
    StoppingRule,
    brute_force_snell_tree,
    cross_fitted_value,
    optimal_stopping_rule,
    snell_envelope,
    stopped_value,
    upper_snell_envelope,
)
from .viscosity import (
    BsdeCandidate,
    JetEstimate,
    SmoothTest,
    TestJet,
    ViscosityReport,
    comparison_experiment,
    martingale_property_test,
    punctual_jet_estimate,
    subsolution_residual,
    submartingale_transform,
    tangency_point,
    test_process_gap,
)

__version__ = "0.1.0"
