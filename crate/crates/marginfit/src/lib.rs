//! Maximum-likelihood fitting of marginal log-linear models for multi-way
//! contingency tables.
//!
//! A model is specified by a marginal log-linear parameterization
//! `eta = C log(M pi)` together with constraints on `eta` (linear
//! restrictions, a regression design, or smooth functions of other margins).
//! Fitting maximizes the multinomial likelihood subject to those
//! constraints, by a Lagrangian update with step control or by an
//! equivalent iterated regression scheme.  Extensions cover stratified
//! tables whose parameters depend on unit-level covariates and
//! lasso-penalized estimation over the marginal parameters.
//!
//! Cells are ordered lexicographically with the *last* variable fastest;
//! every vector and matrix in the crate follows that convention.

pub mod covariates;
pub mod error;
pub mod likelihood;
pub mod mllp;
pub mod penalty;
pub mod solver;
pub mod table;

pub use covariates::{
    covariate_update, fit_covariates, synthetic_study, CovariateFitResult, CovariateProposal,
    StratifiedData, Stratum, SyntheticCovariateStudy,
};
pub use error::{Error, Result};
pub use likelihood::{
    diag_action_jacobian, explicit_f_inverse, loglik, observed_info, observed_info_fd, omega,
    score_and_info, FisherSolver, LikelihoodParts, ObservedInfoContext,
};
pub use mllp::{
    validate_spec, Coding, CoordinateDescriptor, EffectBlock, MarginBlock, MllpMatrices,
    MllpSpec, SpecReport, SpecViolation, VarSet,
};
pub use penalty::{
    coordinate_ascent, penalized_fit, penalized_fit_with_design, penalty_path, soft_threshold,
    subgradient_violation, CoordinateAscentOutcome, PathPoint, PenalizedFitResult,
    PenaltyIterationRecord, PenaltySpec, QuadraticModel,
};
pub use solver::{
    as_update, constraint_values_and_jacobian, fit, fit_with_matrices, general_constraint_update,
    multi_start, null_space_x, regression_update, Algorithm, FitOptions, FitResult, FitState,
    IterationRecord, ModelConstraint, StartValue, UpdateProposal,
};
pub use table::{
    BasisKind, CanonicalBasis, CountVector, ProbVector, TableSchema, BOUNDARY_PI, MARGIN_FLOOR,
};
