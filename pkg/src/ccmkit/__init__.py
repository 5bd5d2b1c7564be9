"""Verification and feedback design for control contraction metrics.

Subpackage map:

* expr         -- expression parsing, evaluation, differentiation
* model        -- system/metric/grid types, spec files, raw evaluation
* differential -- A, Mdot, H_i, Q and the (a, b) feedback scalars
* verifier     -- grid checks, psi certificates, verification reports
* controller   -- rho feedback, path discretization, tracking control
* simulator    -- RK4 integration, closed-loop runs, convergence fits
* transforms   -- dual coordinates, convexity probe, input transforms
* cli          -- validate / verify / simulate / demo-counterexample
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    cli,
    controller,
    differential,
    expr,
    model,
    simulator,
    transforms,
    verifier,
)
from .controller import (  # noqa: F401
    ControllerConfig,
    Infeasible,
    PathDiscretization,
    build_path,
    differential_feedback,
    path_energy,
    rho,
    tracking_feedback,
)
from .differential import (  # noqa: F401
    DifferentialData,
    compute_A,
    compute_H,
    compute_Mdot,
    compute_Q,
    compute_ab,
    differential_data,
)
from .expr import (  # noqa: F401
    Expression,
    differentiate,
    evaluate,
    free_variables,
    jacobian,
    parse,
    to_text,
)
from .model import (  # noqa: F401
    EvalPoint,
    GridSpec,
    MetricSpec,
    RawEval,
    Scenario,
    SpecError,
    SpecFile,
    SystemSpec,
    bundled_spec_path,
    check_metric_bounds,
    evaluate_raw,
    load_spec,
    load_spec_file,
    plant_for,
    raw_slice,
)
from .simulator import (  # noqa: F401
    ConvergenceReport,
    NonFiniteStateError,
    Trajectory,
    convergence_metrics,
    integrate,
    simulate_closed_loop,
    tracking_cost,
    write_csv,
)
from .transforms import (  # noqa: F401
    DualPoint,
    FeedbackTransform,
    apply_feedback_transform,
    convexity_probe,
    dual_constraint_residual,
    dual_point,
    invariance_probe,
)
from .verifier import (  # noqa: F401
    CertificateInvalid,
    PsiCertificate,
    VerificationReport,
    check_ccm_point,
    check_condition1,
    check_contraction,
    check_orthogonality,
    check_strong_conditions,
    construct_psi,
    fit_psi_power_law,
    kernel_basis,
    verify,
)
