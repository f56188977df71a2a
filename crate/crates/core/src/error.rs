use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("callback `{callback}` panicked: {message}")]
    CallbackPanic { callback: String, message: String },

    #[error("callback `{callback}` has wrong output dimension: {detail}")]
    DimensionMismatch { callback: String, detail: String },

    #[error("unknown builtin example `{0}` (expected one of ex31, ex41, ex42, ex43, zero, gbm, sphere, counter)")]
    UnknownExample(String),

    #[error("unknown candidate `{candidate}` for problem `{problem}`")]
    UnknownCandidate { problem: String, candidate: String },

    #[error("non-finite state on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("fundamental matrix numerically singular on path {path} at step {step} (condition {condition:.3e})")]
    SingularMatrix {
        path: usize,
        step: usize,
        condition: f64,
    },

    #[error("unsupported norm exponents alpha={alpha}, beta={beta}")]
    UnsupportedExponent { alpha: String, beta: f64 },

    #[error("second derivatives are required but the problem does not supply them")]
    MissingSecondDerivatives,

    #[error("perturbed control leaves the control set at {} node(s); first offender: eps={eps}, step {step}, distance {distance:.3e}", count)]
    InadmissiblePerturbation {
        eps: f64,
        step: usize,
        distance: f64,
        count: usize,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("regression Gram matrix ill-conditioned at step {step} (condition {condition:.3e})")]
    RegressionIllConditioned { step: usize, condition: f64 },

    #[error("adjoint method not applicable: {0}")]
    MethodInapplicable(String),

    #[error("point is not a member of the set (distance {distance:.3e})")]
    NotMember { distance: f64 },

    #[error("Mangasarian-Fromowitz constraint qualification fails at the queried point")]
    MfcqFails,

    #[error("direction is not in the adjacent cone (violation {violation:.3e})")]
    NotTangent { violation: f64 },

    #[error("vector is not in the normal cone (max <xi, v> = {value:.3e})")]
    NotNormal { value: f64 },

    #[error("linear program failed: {0}")]
    LpFailure(String),

    #[error("linear independence of active constraint gradients fails at step {step}")]
    LicqFails { step: usize },

    #[error("multiplier decomposition residual {residual:.3e} exceeds tolerance at step {step}")]
    DecompositionResidual { step: usize, residual: f64 },

    #[error("direction `{direction}` is not tangent to the control set at step {step}")]
    DirectionNotTangent { direction: String, step: usize },

    #[error("second-order direction `{direction}` is not in the second-order adjacent set at step {step}")]
    DirectionNotSecondOrderTangent { direction: String, step: usize },

    #[error("direction `{direction}` fails the <H_u, v> = 0 gate at step {step} (value {value:.3e})")]
    UpsilonGateFailed {
        direction: String,
        step: usize,
        value: f64,
    },

    #[error("candidate is not partially singular")]
    NotSingular,

    #[error("Malliavin derivative of S is unavailable: {0}")]
    MalliavinUnavailable(String),

    #[error("control set is not declared convex")]
    NotConvexSet,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
