//! Constrained maximization of the multinomial likelihood.
//!
//! Models restrict the marginal parameters `eta = C log(M pi)` either
//! linearly, by `K' eta = 0` (equivalently `eta = X beta` with `X` spanning
//! the complement of `K`), or through smooth functions `h(pi) = A log(Mc
//! pi) = 0` of a separate margin stack.  Two updates are implemented for
//! the linear case and kept deliberately independent of each other: a
//! Lagrangian step solving the stationarity system in `(theta, lambda)`,
//! and a regression step that refits `eta` onto the design by weighted
//! least squares.  They produce the same iterate from the same point, which
//! the test suite checks rather than assumes.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::likelihood::{observed_info, score_and_info, FisherSolver, LikelihoodParts, ObservedInfoContext};
use crate::mllp::{MllpMatrices, MllpSpec, VarSet};
use crate::table::{CanonicalBasis, CountVector, ProbVector, TableSchema, BOUNDARY_PI, MARGIN_FLOOR};

/// How the marginal parameters are restricted.
#[derive(Debug, Clone)]
pub enum ModelConstraint {
    /// `K' eta = 0`; `K` is `(t-1) x r` of full column rank.  `r = 0` means
    /// no restriction (the saturated model).
    LinearK { k: DMatrix<f64> },
    /// `eta = X beta`; `X` is `(t-1) x q` of full column rank.  Equivalent
    /// to `LinearK` with `K` spanning the orthogonal complement of `X`, but
    /// fitted coefficients are reported in the supplied columns.
    Design { x: DMatrix<f64> },
    /// `A log(Mc pi) = 0` for a 0/1 margin stack `Mc` that need not match
    /// the model's own margins.  No homogeneity is assumed of `A`, so the
    /// constraint Jacobian uses the full multinomial kernel.
    General { a: DMatrix<f64>, mc: DMatrix<f64> },
}

impl ModelConstraint {
    /// No restriction at all.
    pub fn saturated(t: usize) -> Self {
        ModelConstraint::LinearK {
            k: DMatrix::zeros(t - 1, 0),
        }
    }

    /// Sets all coordinates of the listed effects to zero.
    pub fn zero_effects(mats: &MllpMatrices, effects: &[VarSet]) -> Result<Self> {
        let mut cols = Vec::new();
        for effect in effects {
            let range = mats.effect_coordinates(*effect).ok_or_else(|| {
                Error::InvalidDimensions(format!(
                    "effect {effect} is not part of this parameterization"
                ))
            })?;
            cols.extend(range);
        }
        cols.sort_unstable();
        cols.dedup();
        let mut k = DMatrix::zeros(mats.eta_len(), cols.len());
        for (j, &row) in cols.iter().enumerate() {
            k[(row, j)] = 1.0;
        }
        Ok(ModelConstraint::LinearK { k })
    }
}

/// Which update to iterate for linear constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Algorithm {
    #[default]
    Lagrangian,
    Regression,
}

/// Where the iteration starts.
#[derive(Debug, Clone, Default)]
pub enum StartValue {
    /// `theta` of the smoothed table `(y + 1/2) / (n + t/2)`.
    #[default]
    EmpiricalSmoothed,
    /// `theta = 0`, the uniform distribution.
    Uniform,
    User(DVector<f64>),
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub algorithm: Algorithm,
    pub max_iter: usize,
    /// Convergence threshold on `max |h|`.
    pub tol_constraint: f64,
    /// Convergence threshold on the max-norm projected score.
    pub tol_score: f64,
    /// Step halvings to attempt before forcing the smallest step.
    pub max_halvings: usize,
    pub start: StartValue,
    pub capture_trace: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::default(),
            max_iter: 200,
            tol_constraint: 1e-8,
            tol_score: 1e-8,
            max_halvings: 20,
            start: StartValue::default(),
            capture_trace: false,
        }
    }
}

/// Likelihood pieces plus the marginal parameters at one `theta`.
#[derive(Debug, Clone)]
pub struct FitState {
    pub theta: DVector<f64>,
    pub eta: DVector<f64>,
    pub parts: LikelihoodParts,
    /// Total count of the table being fitted.
    pub n: f64,
}

impl FitState {
    pub fn evaluate(
        counts: &CountVector,
        mats: &MllpMatrices,
        basis: &CanonicalBasis,
        theta: &DVector<f64>,
    ) -> Result<Self> {
        let parts = score_and_info(counts, theta, basis)?;
        let eta = mats.eta(&parts.pi)?;
        Ok(Self {
            theta: theta.clone(),
            eta,
            parts,
            n: counts.total(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loglik: f64,
    pub constraint_norm: f64,
    pub score_norm: f64,
    pub step_scale: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: DVector<f64>,
    pub pi: ProbVector,
    pub eta: DVector<f64>,
    /// Coefficients in the user's design columns; only for
    /// [`ModelConstraint::Design`].
    pub beta: Option<DVector<f64>>,
    /// Multipliers of the last Lagrangian step, one per constraint row.
    pub lambda: Option<DVector<f64>>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub constraint_norm: f64,
    pub score_norm: f64,
    /// Eigenvalues of the observed information in the model's coordinates;
    /// available for linear constraints at a converged solution.
    pub observed_info_eigenvalues: Option<Vec<f64>>,
    /// Whether that observed information is positive definite.
    pub local_max: Option<bool>,
    pub trace: Vec<IterationRecord>,
    pub diagnostics: Vec<String>,
}

/// Orthonormal basis of the orthogonal complement of `col(K)` in `R^p`.
/// Built from the spectral decomposition of the projector `I - K (K'K)^-1
/// K'`: eigenvectors with eigenvalue above one half.  Column signs and
/// order are normalized so repeated calls agree.
pub fn null_space_x(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = k.nrows();
    if k.ncols() == 0 {
        return Ok(DMatrix::identity(p, p));
    }
    if k.ncols() > p {
        return Err(Error::RankDeficient {
            what: "constraint matrix".into(),
            expected: k.ncols(),
            found: p,
        });
    }
    let svd = k.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > smax * 1e-12)
        .count();
    if rank < k.ncols() {
        return Err(Error::RankDeficient {
            what: "constraint matrix".into(),
            expected: k.ncols(),
            found: rank,
        });
    }
    let ktk_inv = (k.transpose() * k)
        .try_inverse()
        .ok_or_else(|| Error::Singular("K'K".into()))?;
    let projector = DMatrix::identity(p, p) - k * ktk_inv * k.transpose();
    let eig = SymmetricEigen::new(projector);
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for j in 0..p {
        if eig.eigenvalues[j] > 0.5 {
            let mut col = eig.eigenvectors.column(j).clone_owned();
            // sign convention: largest-magnitude entry positive
            let lead = (0..p)
                .max_by(|&a, &b| col[a].abs().partial_cmp(&col[b].abs()).unwrap())
                .unwrap();
            if col[lead] < 0.0 {
                col = -col;
            }
            cols.push(col);
        }
    }
    if cols.len() != p - k.ncols() {
        return Err(Error::RankDeficient {
            what: "null space of K'".into(),
            expected: p - k.ncols(),
            found: cols.len(),
        });
    }
    cols.sort_by(|a, b| {
        for i in 0..p {
            match a[i].partial_cmp(&b[i]).unwrap() {
                std::cmp::Ordering::Equal => continue,
                ord => return ord,
            }
        }
        std::cmp::Ordering::Equal
    });
    let mut x = DMatrix::zeros(p, cols.len());
    for (j, col) in cols.iter().enumerate() {
        x.set_column(j, col);
    }
    Ok(x)
}

/// Per-fit constraint workspace.  For linear constraints `K'C` is cached
/// once; the general form keeps its own margin stack.
enum ConstraintWork {
    Linear {
        k: DMatrix<f64>,
        /// cached `K' C`, rows are within-margin contrasts
        kc: DMatrix<f64>,
        x: DMatrix<f64>,
        /// user supplied the design directly, so `beta` is reportable
        design: Option<DMatrix<f64>>,
    },
    General {
        a: DMatrix<f64>,
        mc: DMatrix<f64>,
    },
}

impl ConstraintWork {
    fn prepare(constraint: &ModelConstraint, mats: &MllpMatrices) -> Result<Self> {
        let p = mats.eta_len();
        match constraint {
            ModelConstraint::LinearK { k } => {
                if k.nrows() != p {
                    return Err(Error::DimensionMismatch {
                        what: "K".into(),
                        expected: (p, k.ncols()),
                        found: (k.nrows(), k.ncols()),
                    });
                }
                let x = null_space_x(k)?;
                Ok(ConstraintWork::Linear {
                    kc: k.transpose() * mats.c(),
                    k: k.clone(),
                    x,
                    design: None,
                })
            }
            ModelConstraint::Design { x } => {
                if x.nrows() != p {
                    return Err(Error::DimensionMismatch {
                        what: "X".into(),
                        expected: (p, x.ncols()),
                        found: (x.nrows(), x.ncols()),
                    });
                }
                if x.ncols() == 0 || x.ncols() > p {
                    return Err(Error::RankDeficient {
                        what: "design matrix".into(),
                        expected: x.ncols().max(1),
                        found: x.ncols().min(p),
                    });
                }
                // complement of the design is the constraint
                let k = null_space_x(x)?;
                Ok(ConstraintWork::Linear {
                    kc: k.transpose() * mats.c(),
                    k,
                    x: x.clone(),
                    design: Some(x.clone()),
                })
            }
            ModelConstraint::General { a, mc } => {
                if mc.ncols() != mats.num_cells() || a.ncols() != mc.nrows() {
                    return Err(Error::DimensionMismatch {
                        what: "A / Mc".into(),
                        expected: (a.nrows(), mc.nrows()),
                        found: (a.ncols(), mc.ncols()),
                    });
                }
                if mc.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidDimensions(
                        "Mc must contain only zeros and ones".into(),
                    ));
                }
                Ok(ConstraintWork::General {
                    a: a.clone(),
                    mc: mc.clone(),
                })
            }
        }
    }

    fn num_rows(&self) -> usize {
        match self {
            ConstraintWork::Linear { k, .. } => k.ncols(),
            ConstraintWork::General { a, .. } => a.nrows(),
        }
    }

    /// Constraint value at `pi`.
    fn h(&self, mats: &MllpMatrices, pi: &ProbVector) -> Result<DVector<f64>> {
        match self {
            ConstraintWork::Linear { kc, .. } => {
                let margins = mats.margins_of(pi)?;
                Ok(kc * margins.map(f64::ln))
            }
            ConstraintWork::General { a, mc } => {
                let margins = mc * pi.values();
                if let Some((i, &v)) =
                    margins.iter().enumerate().find(|(_, &v)| v < MARGIN_FLOOR)
                {
                    return Err(Error::MarginTooSmall { index: i, value: v });
                }
                Ok(a * margins.map(f64::ln))
            }
        }
    }

    /// Constraint Jacobian `H' = d h / d theta'`, `r x (t-1)`.
    ///
    /// Linear case: `K'C diag(M pi)^-1 M diag(pi) G`; `diag(pi)` replaces
    /// the multinomial kernel because rows of `K'C` are within-margin
    /// contrasts.  General case keeps the full kernel:
    /// `A diag(Mc pi)^-1 Mc Omega G`.
    fn jacobian_t(
        &self,
        mats: &MllpMatrices,
        basis: &CanonicalBasis,
        pi: &ProbVector,
    ) -> Result<DMatrix<f64>> {
        match self {
            ConstraintWork::Linear { kc, .. } => {
                let margins = mats.margins_of(pi)?;
                let m = mats.m();
                let mut scaled = m.clone();
                for i in 0..scaled.nrows() {
                    for j in 0..scaled.ncols() {
                        scaled[(i, j)] *= pi.values()[j] / margins[i];
                    }
                }
                Ok(kc * scaled * basis.g())
            }
            ConstraintWork::General { a, mc } => {
                let margins = mc * pi.values();
                if let Some((i, &v)) =
                    margins.iter().enumerate().find(|(_, &v)| v < MARGIN_FLOOR)
                {
                    return Err(Error::MarginTooSmall { index: i, value: v });
                }
                let mut scaled = mc.clone();
                for i in 0..scaled.nrows() {
                    for j in 0..scaled.ncols() {
                        scaled[(i, j)] /= margins[i];
                    }
                }
                Ok(a * scaled * crate::likelihood::omega(pi) * basis.g())
            }
        }
    }
}

/// One proposed move, before step control.
#[derive(Debug, Clone)]
pub struct UpdateProposal {
    /// The full `theta` step.
    pub delta: DVector<f64>,
    /// Lagrange multipliers, when the update solves for them.
    pub lambda: Option<DVector<f64>>,
    /// Design coefficients, when the update computes them.
    pub beta: Option<DVector<f64>>,
}

/// Lagrangian update: solves the blocked stationarity system with the
/// expected information,
/// `delta = F^-1 s - F^-1 H (H' F^-1 H)^-1 (H' F^-1 s + h)` and
/// `lambda = -(H' F^-1 H)^-1 (H' F^-1 s + h)`.
fn lagrangian_proposal(
    state: &FitState,
    work: &ConstraintWork,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
    solver: FisherSolver,
) -> Result<UpdateProposal> {
    let finv = solver.inverse(basis, &state.parts.pi, state.n)?;
    let s = &state.parts.score;
    if work.num_rows() == 0 {
        return Ok(UpdateProposal {
            delta: &finv * s,
            lambda: Some(DVector::zeros(0)),
            beta: None,
        });
    }
    let h = work.h(mats, &state.parts.pi)?;
    let ht = work.jacobian_t(mats, basis, &state.parts.pi)?;
    let hmat = ht.transpose();
    let finv_h = &finv * &hmat;
    let w = &ht * &finv_h;
    let w_inv = Cholesky::new(w.clone())
        .map(|c| c.inverse())
        .or_else(|| w.try_inverse())
        .ok_or_else(|| Error::Singular("H' F^-1 H".into()))?;
    let rhs = &ht * (&finv * s) + &h;
    let lambda = -(&w_inv * rhs);
    let delta = &finv * s + finv_h * &lambda;
    Ok(UpdateProposal {
        delta,
        lambda: Some(lambda),
        beta: None,
    })
}

/// Regression update: transforms to the `eta` scale with `R = [d eta /
/// d theta']^-1`, solves the weighted least-squares problem
/// `beta = (X' Fbar X)^-1 X' (Fbar eta0 + sbar)` with `Fbar = R'FR` and
/// `sbar = R's`, and maps back by `delta = R (X beta - eta0)`.
fn regression_proposal(
    state: &FitState,
    work: &ConstraintWork,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
) -> Result<UpdateProposal> {
    let x = match work {
        ConstraintWork::Linear { x, .. } => x,
        ConstraintWork::General { .. } => {
            return Err(Error::InvalidDimensions(
                "the regression update applies to linear constraints".into(),
            ))
        }
    };
    let r = mats.jacobian_r(basis, &state.parts.pi)?;
    let sbar = r.transpose() * &state.parts.score;
    let fbar = r.transpose() * &state.parts.expected_info * &r;
    let xtfx = x.transpose() * &fbar * x;
    let xtfx_inv = Cholesky::new(xtfx.clone())
        .map(|c| c.inverse())
        .or_else(|| xtfx.try_inverse())
        .ok_or_else(|| Error::Singular("X' Fbar X".into()))?;
    let beta = xtfx_inv * (x.transpose() * (&fbar * &state.eta + &sbar));
    let delta = &r * (x * &beta - &state.eta);
    Ok(UpdateProposal {
        delta,
        lambda: None,
        beta: Some(beta),
    })
}

/// Update for general constraints `h(pi) = 0`: with `K0` the constraint
/// Jacobian transposed, `X0` its complement, and `K0bar = K0 (K0'K0)^-1`,
/// move by `delta = X0 b - K0bar h` where
/// `b = (X0' F X0)^-1 X0' (s + F K0bar h)`.  The linearized constraint is
/// met exactly: `K0' delta = -h`.
fn general_proposal(
    state: &FitState,
    work: &ConstraintWork,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
) -> Result<UpdateProposal> {
    let h = work.h(mats, &state.parts.pi)?;
    let k0t = work.jacobian_t(mats, basis, &state.parts.pi)?;
    let k0 = k0t.transpose();
    let x0 = null_space_x(&k0)?;
    let k0bar = &k0
        * (k0.transpose() * &k0)
            .try_inverse()
            .ok_or_else(|| Error::Singular("K0'K0".into()))?;
    let f = &state.parts.expected_info;
    let s = &state.parts.score;
    let xtfx = x0.transpose() * f * &x0;
    let xtfx_inv = Cholesky::new(xtfx.clone())
        .map(|c| c.inverse())
        .or_else(|| xtfx.try_inverse())
        .ok_or_else(|| Error::Singular("X0' F X0".into()))?;
    let kh = &k0bar * &h;
    let b = xtfx_inv * (x0.transpose() * (s + f * &kh));
    let delta = &x0 * b - kh;
    Ok(UpdateProposal {
        delta,
        lambda: None,
        beta: None,
    })
}

/// Lagrangian single step for a linear constraint at the given state.
/// Fails for `ModelConstraint::General`, which has its own update.
pub fn as_update(
    state: &FitState,
    constraint: &ModelConstraint,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
) -> Result<UpdateProposal> {
    let work = ConstraintWork::prepare(constraint, mats)?;
    if matches!(work, ConstraintWork::General { .. }) {
        return Err(Error::InvalidDimensions(
            "as_update needs a linear constraint; use general_constraint_update".into(),
        ));
    }
    lagrangian_proposal(state, &work, mats, basis, FisherSolver::for_basis(basis))
}

/// Regression single step for a linear constraint at the given state.
/// The proposal carries the design coefficients it solved for.
pub fn regression_update(
    state: &FitState,
    constraint: &ModelConstraint,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
) -> Result<UpdateProposal> {
    let work = ConstraintWork::prepare(constraint, mats)?;
    if matches!(work, ConstraintWork::General { .. }) {
        return Err(Error::InvalidDimensions(
            "regression_update needs a linear constraint".into(),
        ));
    }
    regression_proposal(state, &work, mats, basis)
}

/// Single step for a general constraint `A log(Mc pi) = 0`.
pub fn general_constraint_update(
    state: &FitState,
    constraint: &ModelConstraint,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
) -> Result<UpdateProposal> {
    let work = ConstraintWork::prepare(constraint, mats)?;
    general_proposal(state, &work, mats, basis)
}

/// Constraint value `h` and its Jacobian transpose `H' = dh/dtheta'` at `pi`.
pub fn constraint_values_and_jacobian(
    constraint: &ModelConstraint,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
    pi: &ProbVector,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let work = ConstraintWork::prepare(constraint, mats)?;
    Ok((work.h(mats, pi)?, work.jacobian_t(mats, basis, pi)?))
}

/// Merit used by step control: log-likelihood with a quadratic infeasibility
/// penalty, `l(theta) - 10 n |h|^2`.
fn merit(loglik: f64, h: &DVector<f64>, n: f64) -> f64 {
    loglik - 10.0 * n * h.norm_squared()
}

/// Projected score norm used for convergence: for linear constraints the
/// score is mapped to the `eta` scale and projected onto the design; for
/// general constraints it is projected onto the tangent space in `theta`.
fn projected_score_norm(
    state: &FitState,
    work: &ConstraintWork,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
) -> Result<f64> {
    match work {
        ConstraintWork::Linear { x, .. } => {
            let r = mats.jacobian_r(basis, &state.parts.pi)?;
            let sbar = r.transpose() * &state.parts.score;
            Ok((x.transpose() * sbar).amax())
        }
        ConstraintWork::General { .. } => {
            let k0 = work.jacobian_t(mats, basis, &state.parts.pi)?.transpose();
            let x0 = null_space_x(&k0)?;
            Ok((x0.transpose() * &state.parts.score).amax())
        }
    }
}

fn start_theta(
    counts: &CountVector,
    basis: &CanonicalBasis,
    start: &StartValue,
) -> Result<DVector<f64>> {
    match start {
        StartValue::EmpiricalSmoothed => Ok(basis.pi_to_theta(&counts.smoothed_probs())),
        StartValue::Uniform => Ok(DVector::zeros(basis.dim())),
        StartValue::User(theta) => {
            if theta.len() != basis.dim() {
                return Err(Error::DimensionMismatch {
                    what: "starting theta".into(),
                    expected: (basis.dim(), 1),
                    found: (theta.len(), 1),
                });
            }
            Ok(theta.clone())
        }
    }
}

/// Fits the model defined by an MLLP spec and a constraint, building the
/// parameterization matrices first.
pub fn fit(
    counts: &CountVector,
    spec: &MllpSpec,
    schema: &TableSchema,
    constraint: &ModelConstraint,
    options: &FitOptions,
) -> Result<FitResult> {
    let mats = MllpMatrices::build(spec, schema)?;
    let basis = schema.default_basis();
    fit_with_matrices(counts, &mats, &basis, constraint, options)
}

/// Fits with pre-built matrices and an explicit canonical basis.
pub fn fit_with_matrices(
    counts: &CountVector,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
    constraint: &ModelConstraint,
    options: &FitOptions,
) -> Result<FitResult> {
    if counts.len() != mats.num_cells() || basis.num_cells() != mats.num_cells() {
        return Err(Error::DimensionMismatch {
            what: "counts".into(),
            expected: (mats.num_cells(), 1),
            found: (counts.len(), 1),
        });
    }
    let work = ConstraintWork::prepare(constraint, mats)?;
    let n = counts.total();
    let solver = FisherSolver::for_basis(basis);
    let mut diagnostics = Vec::new();
    let mut trace = Vec::new();

    let mut theta = start_theta(counts, basis, &options.start)?;
    let mut state = FitState::evaluate(counts, mats, basis, &theta)?;
    let mut lambda = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut h = work.h(mats, &state.parts.pi)?;
    let mut score_norm = projected_score_norm(&state, &work, mats, basis)?;

    for iter in 0..options.max_iter {
        if h.amax() <= options.tol_constraint && score_norm <= options.tol_score {
            converged = true;
            break;
        }
        iterations = iter + 1;

        let proposal = match (&work, options.algorithm) {
            (ConstraintWork::General { .. }, _) => general_proposal(&state, &work, mats, basis)?,
            (_, Algorithm::Lagrangian) => {
                lagrangian_proposal(&state, &work, mats, basis, solver)?
            }
            (_, Algorithm::Regression) => regression_proposal(&state, &work, mats, basis)?,
        };
        if let Some(l) = &proposal.lambda {
            lambda = Some(l.clone());
        }

        // step control: halve until the penalized merit improves
        let current_merit = merit(state.parts.loglik, &h, n);
        let mut alpha = 1.0;
        let mut accepted: Option<(DVector<f64>, FitState, DVector<f64>, f64)> = None;
        let mut full_eval: Option<(DVector<f64>, FitState, DVector<f64>, f64)> = None;
        let mut last_eval: Option<(DVector<f64>, FitState, DVector<f64>, f64)> = None;
        for _ in 0..=options.max_halvings {
            let cand_theta = &theta + &proposal.delta * alpha;
            match FitState::evaluate(counts, mats, basis, &cand_theta)
                .and_then(|st| work.h(mats, &st.parts.pi).map(|hh| (st, hh)))
            {
                Ok((st, hh)) => {
                    let m = merit(st.parts.loglik, &hh, n);
                    if m.is_finite() {
                        if alpha == 1.0 {
                            full_eval = Some((cand_theta.clone(), st.clone(), hh.clone(), alpha));
                        }
                        last_eval = Some((cand_theta.clone(), st.clone(), hh.clone(), alpha));
                        if m > current_merit {
                            accepted = Some((cand_theta, st, hh, alpha));
                            break;
                        }
                    }
                }
                Err(_) => {}
            }
            alpha *= 0.5;
        }
        // near the manifold the quadratic penalty undervalues the last
        // feasibility correction and can reject the Newton step outright;
        // a full step that collapses the constraint residual is taken
        // anyway rather than creeping along a rejected direction
        if accepted.is_none() {
            if let Some(full) = full_eval {
                if full.2.amax() <= 0.1 * h.amax() {
                    diagnostics.push(format!(
                        "iteration {iterations}: restoring step taken without merit improvement"
                    ));
                    accepted = Some(full);
                }
            }
        }
        let (new_theta, new_state, new_h, used_alpha) = match accepted.or(last_eval) {
            Some(v) => v,
            None => {
                return Err(Error::NonFinite(
                    "no evaluable point along the proposed direction".into(),
                ))
            }
        };
        if used_alpha < 1.0 && (1.0 / used_alpha).log2() as usize >= options.max_halvings {
            diagnostics.push(format!(
                "iteration {iterations}: step forced at scale {used_alpha:.3e} without merit improvement"
            ));
        }
        theta = new_theta;
        state = new_state;
        h = new_h;
        score_norm = projected_score_norm(&state, &work, mats, basis)?;

        if options.capture_trace {
            trace.push(IterationRecord {
                iteration: iterations,
                loglik: state.parts.loglik,
                constraint_norm: h.amax(),
                score_norm,
                step_scale: used_alpha,
            });
        }
    }
    if !converged && h.amax() <= options.tol_constraint && score_norm <= options.tol_score {
        converged = true;
    }

    if state.parts.pi.min() < BOUNDARY_PI {
        diagnostics.push(format!(
            "smallest fitted probability {:.3e} is near the boundary",
            state.parts.pi.min()
        ));
    }
    if !converged {
        diagnostics.push(format!(
            "not converged after {iterations} iterations: |h| = {:.3e}, projected score = {:.3e}",
            h.amax(),
            score_norm
        ));
    }

    // curvature at the solution, in the model's own coordinates
    let mut observed_info_eigenvalues = None;
    let mut local_max = None;
    if converged {
        if let ConstraintWork::Linear { x, design, .. } = &work {
            let design_mat = design.as_ref().unwrap_or(x);
            if design_mat.ncols() > 0 {
                let ctx = ObservedInfoContext {
                    matrices: mats,
                    basis,
                    design: design_mat,
                    counts,
                };
                if let Ok(j) = observed_info(&theta, &ctx) {
                    let sym = (j.clone() + j.transpose()) * 0.5;
                    let mut eig: Vec<f64> =
                        SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
                    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    local_max = Some(eig.iter().all(|&v| v > 0.0));
                    observed_info_eigenvalues = Some(eig);
                }
            } else {
                // zero-dimensional model: nothing to vary
                local_max = Some(true);
                observed_info_eigenvalues = Some(Vec::new());
            }
        }
    }

    // coefficients of the fitted eta in the user's design columns
    let beta = match &work {
        ConstraintWork::Linear {
            design: Some(x), ..
        } => x.clone().svd(true, true).solve(&state.eta, 1e-12).ok(),
        _ => None,
    };

    Ok(FitResult {
        pi: state.parts.pi.clone(),
        eta: state.eta.clone(),
        beta,
        lambda,
        loglik: state.parts.loglik,
        iterations,
        converged,
        constraint_norm: h.amax(),
        score_norm,
        observed_info_eigenvalues,
        local_max,
        trace,
        diagnostics,
        theta,
    })
}

/// Runs `fit` from the default start plus `extra_starts` perturbed starts
/// and keeps the best converged result (highest log-likelihood).  The
/// spread of converged log-likelihoods is recorded in the diagnostics as a
/// multimodality check.
///
/// Starts are drawn up front in run order and the runs are fanned out over
/// scoped threads, so the result does not depend on scheduling.
pub fn multi_start(
    counts: &CountVector,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
    constraint: &ModelConstraint,
    options: &FitOptions,
    extra_starts: usize,
    seed: u64,
) -> Result<FitResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_theta = basis.pi_to_theta(&counts.smoothed_probs());
    let mut runs: Vec<FitOptions> = Vec::with_capacity(extra_starts + 1);
    runs.push(options.clone());
    for _ in 0..extra_starts {
        let noise: DVector<f64> =
            DVector::from_fn(basis.dim(), |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
        let mut opts = options.clone();
        opts.start = StartValue::User(&base_theta + noise);
        runs.push(opts);
    }

    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let mut outcomes: Vec<Result<FitResult>> = Vec::with_capacity(runs.len());
    for chunk in runs.chunks(workers) {
        let chunk_outcomes: Vec<Result<FitResult>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|opts| {
                    scope.spawn(move || fit_with_matrices(counts, mats, basis, constraint, opts))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fit run panicked"))
                .collect()
        });
        outcomes.extend(chunk_outcomes);
    }

    let mut results: Vec<FitResult> = Vec::new();
    let mut first_err = None;
    for outcome in outcomes {
        match outcome {
            Ok(res) => results.push(res),
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    if results.is_empty() {
        return Err(first_err.unwrap_or_else(|| {
            Error::InvalidDimensions("no multi-start run produced a result".into())
        }));
    }

    let total = results.len();
    let converged: Vec<&FitResult> = results.iter().filter(|r| r.converged).collect();
    let summary = if converged.is_empty() {
        format!("multi-start: 0 of {total} runs converged")
    } else {
        let best = converged
            .iter()
            .map(|r| r.loglik)
            .fold(f64::NEG_INFINITY, f64::max);
        let worst = converged
            .iter()
            .map(|r| r.loglik)
            .fold(f64::INFINITY, f64::min);
        format!(
            "multi-start: {} of {} runs converged, log-likelihood spread {:.3e}",
            converged.len(),
            total,
            best - worst
        )
    };

    let mut best = results
        .into_iter()
        .max_by(|a, b| {
            (a.converged, a.loglik)
                .partial_cmp(&(b.converged, b.loglik))
                .unwrap()
        })
        .unwrap();
    best.diagnostics.push(summary);
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mllp::Coding;
    use approx::assert_abs_diff_eq;

    fn counts2x2() -> CountVector {
        CountVector::new(DVector::from_vec(vec![30.0, 10.0, 20.0, 40.0])).unwrap()
    }

    fn setup2x2() -> (MllpMatrices, CanonicalBasis, TableSchema) {
        let schema = TableSchema::new(&[2, 2]).unwrap();
        let spec = MllpSpec::hierarchical(VarSet::full(2).nonempty_subsets(), Coding::Baseline);
        let mats = MllpMatrices::build(&spec, &schema).unwrap();
        let basis = schema.default_basis();
        (mats, basis, schema)
    }

    /// Closed-form independence fit: outer product of the observed margins.
    fn independence_pi(y: &CountVector, rows: usize, cols: usize) -> DVector<f64> {
        let n = y.total();
        let mut row_m = vec![0.0; rows];
        let mut col_m = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                row_m[i] += y.values()[i * cols + j];
                col_m[j] += y.values()[i * cols + j];
            }
        }
        DVector::from_fn(rows * cols, |idx, _| {
            let (i, j) = (idx / cols, idx % cols);
            row_m[i] * col_m[j] / (n * n)
        })
    }

    #[test]
    fn null_space_of_ones_direction() {
        let k = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let x = null_space_x(&k).unwrap();
        assert_eq!(x.shape(), (2, 1));
        assert!((k.transpose() * &x).amax() < 1e-12);
        assert_abs_diff_eq!(x.column(0).norm(), 1.0, epsilon = 1e-12);
        // proportional to (1, -1)
        assert_abs_diff_eq!(x[(0, 0)] + x[(1, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn null_space_edge_cases() {
        // full K: empty complement
        let x = null_space_x(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(x.shape(), (3, 0));
        // empty K: identity complement
        let x = null_space_x(&DMatrix::zeros(3, 0)).unwrap();
        assert_eq!(x, DMatrix::identity(3, 3));
        // rank-deficient K rejected
        let k = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert!(matches!(
            null_space_x(&k),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn projector_identity_holds() {
        // W^-1 - W^-1 K (K' W^-1 K)^-1 K' W^-1 = X (X'WX)^-1 X'
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let p = 5;
            let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
            let w = &a * a.transpose() + DMatrix::identity(p, p) * 0.5;
            let k = DMatrix::from_fn(p, 2, |_, _| rng.random_range(-1.0..1.0));
            let x = null_space_x(&k).unwrap();
            let w_inv = w.clone().try_inverse().unwrap();
            let mid = (k.transpose() * &w_inv * &k).try_inverse().unwrap();
            let lhs = &w_inv - &w_inv * &k * mid * k.transpose() * &w_inv;
            let rhs = &x * (x.transpose() * &w * &x).try_inverse().unwrap() * x.transpose();
            assert!((lhs - rhs).amax() < 1e-10);
        }
    }

    #[test]
    fn independence_fit_matches_margin_product() {
        let (mats, basis, _) = setup2x2();
        let y = counts2x2();
        let constraint =
            ModelConstraint::zero_effects(&mats, &[VarSet::from_indices(&[0, 1])]).unwrap();
        let oracle = independence_pi(&y, 2, 2);
        for algorithm in [Algorithm::Lagrangian, Algorithm::Regression] {
            let options = FitOptions {
                algorithm,
                ..FitOptions::default()
            };
            let res = fit_with_matrices(&y, &mats, &basis, &constraint, &options).unwrap();
            assert!(res.converged, "{algorithm:?} did not converge");
            assert!(res.iterations <= 30);
            assert!((res.pi.values() - &oracle).amax() < 1e-8, "{algorithm:?}");
            // log-odds-ratio coordinate is zero at the fit
            assert!(res.eta[2].abs() < 1e-8);
            let ll: f64 = y
                .values()
                .iter()
                .zip(oracle.iter())
                .map(|(yi, pi)| yi * pi.ln())
                .sum();
            assert_abs_diff_eq!(res.loglik, ll, epsilon = 1e-6);
        }
    }

    #[test]
    fn lagrangian_and_regression_propose_the_same_step() {
        let (mats, basis, _) = setup2x2();
        let y = counts2x2();
        let constraint =
            ModelConstraint::zero_effects(&mats, &[VarSet::from_indices(&[0, 1])]).unwrap();
        let theta = basis.pi_to_theta(&y.smoothed_probs());
        let state = FitState::evaluate(&y, &mats, &basis, &theta).unwrap();
        let a = as_update(&state, &constraint, &mats, &basis).unwrap();
        let b = regression_update(&state, &constraint, &mats, &basis).unwrap();
        assert!(
            (&a.delta - &b.delta).amax() < 1e-9,
            "as {} vs regression {}",
            a.delta,
            b.delta
        );
        // the agreement survives a shared step scaling
        assert!((&a.delta * 0.5 - &b.delta * 0.5).amax() < 1e-9);
    }

    #[test]
    fn saturated_fit_reproduces_empirical_table() {
        let (mats, basis, _) = setup2x2();
        let y = counts2x2();
        let constraint = ModelConstraint::saturated(mats.eta_len() + 1);
        let res =
            fit_with_matrices(&y, &mats, &basis, &constraint, &FitOptions::default()).unwrap();
        assert!(res.converged);
        let expected = y.values() / y.total();
        assert!((res.pi.values() - expected).amax() < 1e-9);
        assert!(res.lambda.as_ref().unwrap().is_empty());
    }

    #[test]
    fn design_constraint_reports_beta_and_matches_zero_effect_form() {
        let (mats, basis, _) = setup2x2();
        let y = counts2x2();
        // span of the two main-effect coordinates; third coordinate zero
        let x = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let design = ModelConstraint::Design { x: x.clone() };
        let res_design =
            fit_with_matrices(&y, &mats, &basis, &design, &FitOptions::default()).unwrap();
        let zero =
            ModelConstraint::zero_effects(&mats, &[VarSet::from_indices(&[0, 1])]).unwrap();
        let res_zero =
            fit_with_matrices(&y, &mats, &basis, &zero, &FitOptions::default()).unwrap();
        assert!(res_design.converged && res_zero.converged);
        assert!((res_design.pi.values() - res_zero.pi.values()).amax() < 1e-9);
        let beta = res_design.beta.as_ref().expect("design fit reports beta");
        assert!((x * beta - &res_design.eta).amax() < 1e-8);
        assert!(res_zero.beta.is_none());
    }

    #[test]
    fn design_fit_invariant_to_column_reparameterization() {
        let (mats, basis, _) = setup2x2();
        let y = counts2x2();
        let x = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let a = DMatrix::from_column_slice(2, 2, &[2.0, 1.0, -1.0, 1.5]);
        let xa = &x * &a;
        let r1 = fit_with_matrices(
            &y,
            &mats,
            &basis,
            &ModelConstraint::Design { x },
            &FitOptions::default(),
        )
        .unwrap();
        let r2 = fit_with_matrices(
            &y,
            &mats,
            &basis,
            &ModelConstraint::Design { x: xa },
            &FitOptions::default(),
        )
        .unwrap();
        assert!((r1.pi.values() - r2.pi.values()).amax() < 1e-9);
        assert_abs_diff_eq!(r1.loglik, r2.loglik, epsilon = 1e-9);
    }

    #[test]
    fn general_constraint_reproduces_linear_fit() {
        let (mats, basis, _) = setup2x2();
        let y = counts2x2();
        let linear =
            ModelConstraint::zero_effects(&mats, &[VarSet::from_indices(&[0, 1])]).unwrap();
        let k = match &linear {
            ModelConstraint::LinearK { k } => k.clone(),
            _ => unreachable!(),
        };
        // same restriction written as A log(Mc pi) = 0 with A = K'C
        let general = ModelConstraint::General {
            a: k.transpose() * mats.c(),
            mc: mats.m().clone(),
        };
        let res_lin =
            fit_with_matrices(&y, &mats, &basis, &linear, &FitOptions::default()).unwrap();
        let res_gen =
            fit_with_matrices(&y, &mats, &basis, &general, &FitOptions::default()).unwrap();
        assert!(res_lin.converged && res_gen.converged);
        assert!((res_lin.pi.values() - res_gen.pi.values()).amax() < 1e-7);
        assert_abs_diff_eq!(res_lin.loglik, res_gen.loglik, epsilon = 1e-8);
    }

    #[test]
    fn start_values_agree_at_the_optimum() {
        let (mats, basis, _) = setup2x2();
        let y = counts2x2();
        let constraint =
            ModelConstraint::zero_effects(&mats, &[VarSet::from_indices(&[0, 1])]).unwrap();
        let mut pis = Vec::new();
        for start in [StartValue::EmpiricalSmoothed, StartValue::Uniform] {
            let options = FitOptions {
                start,
                ..FitOptions::default()
            };
            let res = fit_with_matrices(&y, &mats, &basis, &constraint, &options).unwrap();
            assert!(res.converged);
            pis.push(res.pi.values().clone_owned());
        }
        assert!((&pis[0] - &pis[1]).amax() < 1e-8);
    }

    #[test]
    fn multi_start_agrees_with_single_fit() {
        let (mats, basis, _) = setup2x2();
        let y = counts2x2();
        let constraint =
            ModelConstraint::zero_effects(&mats, &[VarSet::from_indices(&[0, 1])]).unwrap();
        let single =
            fit_with_matrices(&y, &mats, &basis, &constraint, &FitOptions::default()).unwrap();
        let multi =
            multi_start(&y, &mats, &basis, &constraint, &FitOptions::default(), 4, 7).unwrap();
        assert!(multi.converged);
        assert!((multi.pi.values() - single.pi.values()).amax() < 1e-8);
        assert!(multi
            .diagnostics
            .iter()
            .any(|d| d.contains("multi-start")));
    }

    #[test]
    fn trace_records_progress() {
        let (mats, basis, _) = setup2x2();
        let y = counts2x2();
        let constraint =
            ModelConstraint::zero_effects(&mats, &[VarSet::from_indices(&[0, 1])]).unwrap();
        let options = FitOptions {
            capture_trace: true,
            ..FitOptions::default()
        };
        let res = fit_with_matrices(&y, &mats, &basis, &constraint, &options).unwrap();
        assert_eq!(res.trace.len(), res.iterations);
        let last = res.trace.last().unwrap();
        assert!(last.constraint_norm <= 1e-8);
    }

    #[test]
    fn converged_fit_reports_curvature() {
        let (mats, basis, _) = setup2x2();
        let y = counts2x2();
        let constraint =
            ModelConstraint::zero_effects(&mats, &[VarSet::from_indices(&[0, 1])]).unwrap();
        let res =
            fit_with_matrices(&y, &mats, &basis, &constraint, &FitOptions::default()).unwrap();
        let eig = res.observed_info_eigenvalues.as_ref().unwrap();
        assert_eq!(eig.len(), 2);
        assert!(eig.iter().all(|&v| v > 0.0));
        assert_eq!(res.local_max, Some(true));
    }

    #[test]
    fn three_by_three_independence() {
        let schema = TableSchema::new(&[3, 3]).unwrap();
        let spec = MllpSpec::hierarchical(VarSet::full(2).nonempty_subsets(), Coding::Baseline);
        let mats = MllpMatrices::build(&spec, &schema).unwrap();
        let basis = schema.default_basis();
        let y = CountVector::new(DVector::from_vec(vec![
            12.0, 7.0, 21.0, 18.0, 9.0, 14.0, 6.0, 11.0, 16.0,
        ]))
        .unwrap();
        let constraint =
            ModelConstraint::zero_effects(&mats, &[VarSet::from_indices(&[0, 1])]).unwrap();
        let oracle = independence_pi(&y, 3, 3);
        for algorithm in [Algorithm::Lagrangian, Algorithm::Regression] {
            let options = FitOptions {
                algorithm,
                ..FitOptions::default()
            };
            let res = fit_with_matrices(&y, &mats, &basis, &constraint, &options).unwrap();
            assert!(res.converged);
            assert!((res.pi.values() - &oracle).amax() < 1e-8);
        }
    }
}
