//! Lasso-penalized estimation over the marginal parameters: maximize
//! `phi(theta) = l(theta) - sum nu_j |eta_j(theta)|` by repeatedly fitting
//! the regression algorithm's local quadratic and maximizing it, with the
//! separable penalty, by coordinate-wise ascent and soft-thresholding.
//!
//! Coordinates shrunk by the inner solver are exactly zero, which is the
//! point of the method: the zero pattern is the selected model.  Equality
//! constraints combine with the penalty by reparameterizing `eta = X beta`
//! and penalizing the free coordinates `beta`; the plain case is `X = I`,
//! `beta = eta`.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::likelihood::{loglik, score_and_info};
use crate::mllp::MllpMatrices;
use crate::solver::{FitOptions, StartValue};
use crate::table::{CanonicalBasis, CountVector, ProbVector, BOUNDARY_PI};

/// Minimum pilot magnitude used when forming adaptive weights, so that a
/// pilot coordinate at numerical zero yields a huge but finite penalty.
pub const ADAPTIVE_PILOT_FLOOR: f64 = 1e-8;

/// Maximum coordinate sweeps of the inner solver before giving up.
pub const MAX_SWEEPS: usize = 10_000;

/// `sign(x) * max(|x| - threshold, 0)`: exact zero inside the dead zone,
/// magnitude reduced by `threshold` outside it.
pub fn soft_threshold(x: f64, threshold: f64) -> f64 {
    debug_assert!(threshold >= 0.0);
    if x > threshold {
        x - threshold
    } else if x < -threshold {
        x + threshold
    } else {
        0.0
    }
}

/// Per-coordinate nonnegative penalty weights.
#[derive(Debug, Clone)]
pub struct PenaltySpec {
    nu: DVector<f64>,
}

impl PenaltySpec {
    pub fn uniform(len: usize, nu: f64) -> Result<Self> {
        Self::weighted(DVector::from_element(len, nu))
    }

    pub fn weighted(nu: DVector<f64>) -> Result<Self> {
        if nu.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidDimensions(
                "penalty weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { nu })
    }

    /// Adaptive weights `nu / |pilot_j|` from an unpenalized pilot
    /// estimate, with the pilot floored away from zero.
    pub fn adaptive(nu: f64, pilot: &DVector<f64>) -> Result<Self> {
        if !nu.is_finite() || nu < 0.0 {
            return Err(Error::InvalidDimensions(
                "the global penalty must be finite and nonnegative".into(),
            ));
        }
        Self::weighted(DVector::from_fn(pilot.len(), |j, _| {
            nu / pilot[j].abs().max(ADAPTIVE_PILOT_FLOOR)
        }))
    }

    pub fn nu(&self) -> &DVector<f64> {
        &self.nu
    }

    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.len() == 0
    }

    /// Same weights rescaled by a global factor, for path traversal.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::weighted(&self.nu * factor)
    }
}

/// The local quadratic `Q(v) = -1/2 (v - c)' B (v - c)` maximized by the
/// inner solver: `B` is the curvature of the log-likelihood in the free
/// coordinates and `c` the unpenalized maximizer.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    b: DMatrix<f64>,
    c: DVector<f64>,
}

impl QuadraticModel {
    pub fn new(b: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        if b.nrows() != b.ncols() || b.nrows() != c.len() {
            return Err(Error::DimensionMismatch {
                what: "quadratic model".into(),
                expected: (c.len(), c.len()),
                found: (b.nrows(), b.ncols()),
            });
        }
        if (&b - b.transpose()).amax() > 1e-8 * b.amax().max(1.0) {
            return Err(Error::InvalidDimensions(
                "curvature matrix must be symmetric".into(),
            ));
        }
        if Cholesky::new(b.clone()).is_none() {
            return Err(Error::Singular("curvature matrix is not positive definite".into()));
        }
        Ok(Self { b, c })
    }

    /// Builds the quadratic at `theta0` for free coordinates `beta` with
    /// `eta = X beta`: curvature `X' R'FR X` and center the weighted
    /// least-squares refit.  Also returns `eta0` and `R0` for the outer
    /// step.
    pub fn from_state(
        counts: &CountVector,
        mats: &MllpMatrices,
        basis: &CanonicalBasis,
        design: &DMatrix<f64>,
        theta0: &DVector<f64>,
    ) -> Result<(Self, DVector<f64>, DMatrix<f64>)> {
        let parts = score_and_info(counts, theta0, basis)?;
        let r = mats.jacobian_r(basis, &parts.pi)?;
        let eta0 = mats.eta(&parts.pi)?;
        let fbar = r.transpose() * &parts.expected_info * &r;
        let sbar = r.transpose() * &parts.score;
        let b = design.transpose() * &fbar * design;
        let rhs = design.transpose() * (&fbar * &eta0 + sbar);
        let c = Cholesky::new(b.clone())
            .ok_or_else(|| Error::Singular("X' Fbar X".into()))?
            .solve(&rhs);
        Ok((Self::new(b, c)?, eta0, r))
    }

    pub fn curvature(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// The unpenalized maximizer.
    pub fn center(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn value(&self, v: &DVector<f64>) -> f64 {
        let d = v - &self.c;
        -0.5 * (&self.b * &d).dot(&d)
    }

    /// `dQ/dv = -B (v - c)`.
    pub fn gradient(&self, v: &DVector<f64>) -> DVector<f64> {
        -(&self.b * (v - &self.c))
    }
}

#[derive(Debug, Clone)]
pub struct CoordinateAscentOutcome {
    pub solution: DVector<f64>,
    pub sweeps: usize,
    /// The sweep cap was reached before the per-sweep change fell below
    /// tolerance.
    pub capped: bool,
}

/// Maximizes `Q(v) - sum nu_j |v_j|` by cyclic coordinate ascent.  Each
/// coordinate's exact maximizer is the soft-thresholded unpenalized
/// coordinate minimizer, with the threshold scaled by the coordinate's
/// curvature; sweeps stop when no coordinate moves more than `1e-10`.
pub fn coordinate_ascent(
    quad: &QuadraticModel,
    penalty: &PenaltySpec,
    init: Option<&DVector<f64>>,
) -> Result<CoordinateAscentOutcome> {
    let p = quad.c.len();
    if penalty.len() != p {
        return Err(Error::DimensionMismatch {
            what: "penalty weights".into(),
            expected: (p, 1),
            found: (penalty.len(), 1),
        });
    }
    let mut v = match init {
        Some(v0) if v0.len() == p => v0.clone(),
        Some(v0) => {
            return Err(Error::DimensionMismatch {
                what: "warm start".into(),
                expected: (p, 1),
                found: (v0.len(), 1),
            })
        }
        None => quad.c.clone(),
    };
    // residual gradient bookkeeping: g = B (v - c), updated incrementally
    let mut g = &quad.b * (&v - &quad.c);
    let mut sweeps = 0;
    let mut capped = false;
    loop {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            let bjj = quad.b[(j, j)];
            // unpenalized maximizer along coordinate j
            let check = v[j] - g[j] / bjj;
            let new = soft_threshold(check, penalty.nu[j] / bjj);
            if new != v[j] {
                let delta = new - v[j];
                g += quad.b.column(j) * delta;
                v[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        sweeps += 1;
        if max_change < 1e-10 {
            break;
        }
        if sweeps >= MAX_SWEEPS {
            capped = true;
            break;
        }
    }
    Ok(CoordinateAscentOutcome {
        solution: v,
        sweeps,
        capped,
    })
}

/// Largest violation of the subgradient optimality conditions of
/// `Q - sum nu_j |v_j|` at `v`: zero at an exact maximizer.
pub fn subgradient_violation(
    quad: &QuadraticModel,
    penalty: &PenaltySpec,
    v: &DVector<f64>,
) -> f64 {
    let grad = quad.gradient(v);
    let mut worst: f64 = 0.0;
    for j in 0..v.len() {
        let viol = if v[j] != 0.0 {
            (grad[j] - penalty.nu[j] * v[j].signum()).abs()
        } else {
            (grad[j].abs() - penalty.nu[j]).max(0.0)
        };
        worst = worst.max(viol);
    }
    worst
}

#[derive(Debug, Clone)]
pub struct PenaltyIterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub loglik: f64,
    pub max_change: f64,
}

#[derive(Debug, Clone)]
pub struct PenalizedFitResult {
    /// Fitted marginal parameters `X beta`; for the plain fit these carry
    /// the exact zeros.
    pub eta: DVector<f64>,
    /// Fitted free coordinates (equal to `eta` for the plain fit).
    pub coeffs: DVector<f64>,
    /// Indices of exactly-zero coefficients.
    pub zero_pattern: Vec<usize>,
    pub theta: DVector<f64>,
    pub pi: ProbVector,
    pub loglik: f64,
    /// `loglik - sum nu_j |coeff_j|`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<PenaltyIterationRecord>,
    pub diagnostics: Vec<String>,
}

/// Penalized fit over all marginal parameters (`X = I`, `beta = eta`).
pub fn penalized_fit(
    counts: &CountVector,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
    penalty: &PenaltySpec,
    options: &FitOptions,
) -> Result<PenalizedFitResult> {
    let x = DMatrix::identity(mats.eta_len(), mats.eta_len());
    penalized_fit_with_design(counts, mats, basis, &x, penalty, options)
}

/// Penalized fit with equality constraints folded in: `eta = X beta` and
/// the penalty applies to the free coordinates `beta`.  This extends the
/// penalty to constrained models; the plain fit is the identity-design
/// case.
pub fn penalized_fit_with_design(
    counts: &CountVector,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
    design: &DMatrix<f64>,
    penalty: &PenaltySpec,
    options: &FitOptions,
) -> Result<PenalizedFitResult> {
    let p = mats.eta_len();
    if design.nrows() != p {
        return Err(Error::DimensionMismatch {
            what: "design".into(),
            expected: (p, design.ncols()),
            found: design.shape(),
        });
    }
    let q = design.ncols();
    if penalty.len() != q {
        return Err(Error::DimensionMismatch {
            what: "penalty weights".into(),
            expected: (q, 1),
            found: (penalty.len(), 1),
        });
    }
    let n = counts.total();
    let identity_design = q == p && *design == DMatrix::identity(p, p);

    let mut theta = match &options.start {
        StartValue::EmpiricalSmoothed => basis.pi_to_theta(&counts.smoothed_probs()),
        StartValue::Uniform => DVector::zeros(basis.dim()),
        StartValue::User(v) => v.clone(),
    };
    let mut diagnostics = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut prev_coeffs: Option<DVector<f64>> = None;
    let mut coeffs = DVector::zeros(q);
    let mut capped_any = false;

    // penalized merit of a candidate theta, measuring the coefficients by
    // least squares when the point is off the design manifold
    let design_svd = design.clone().svd(true, true);
    let merit_at = |theta: &DVector<f64>| -> Result<f64> {
        let pi = basis.theta_to_pi(theta)?;
        let eta = mats.eta(&pi)?;
        let b = if identity_design {
            eta.clone()
        } else {
            design_svd
                .solve(&eta, 1e-12)
                .map_err(|e| Error::Singular(format!("design least squares: {e}")))?
        };
        let gap = design * &b - &eta;
        let l = loglik(counts, theta, basis)?;
        Ok(l - penalty.nu().dot(&b.map(f64::abs)) - 10.0 * n * gap.norm_squared())
    };

    for iter in 0..options.max_iter {
        iterations = iter;
        let (quad, eta0, r0) = QuadraticModel::from_state(counts, mats, basis, design, &theta)?;
        let inner = coordinate_ascent(&quad, penalty, prev_coeffs.as_ref())?;
        if inner.capped {
            capped_any = true;
        }
        coeffs = inner.solution;
        let max_change = match &prev_coeffs {
            Some(prev) => (&coeffs - prev).amax(),
            None => f64::INFINITY,
        };
        prev_coeffs = Some(coeffs.clone());

        let target = design * &coeffs;
        let delta = &r0 * (&target - &eta0);
        if max_change < 1e-8 && delta.amax() < 1e-6 {
            converged = true;
            if options.capture_trace {
                let l = loglik(counts, &theta, basis)?;
                trace.push(PenaltyIterationRecord {
                    iteration: iter,
                    objective: l - penalty.nu().dot(&coeffs.map(f64::abs)),
                    loglik: l,
                    max_change,
                });
            }
            break;
        }

        // step halving on the penalized objective
        let current = merit_at(&theta)?;
        let mut alpha = 1.0;
        let mut accepted = None;
        let mut last_eval = None;
        for _ in 0..=options.max_halvings {
            let cand = &theta + &delta * alpha;
            if let Ok(m) = merit_at(&cand) {
                if m.is_finite() {
                    if last_eval.is_none() {
                        last_eval = Some(cand.clone());
                    }
                    if m > current {
                        accepted = Some(cand);
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        theta = match accepted.or(last_eval) {
            Some(t) => t,
            None => {
                return Err(Error::NonFinite(
                    "no evaluable point along the penalized update".into(),
                ))
            }
        };

        if options.capture_trace {
            let l = loglik(counts, &theta, basis)?;
            trace.push(PenaltyIterationRecord {
                iteration: iter,
                objective: l - penalty.nu().dot(&coeffs.map(f64::abs)),
                loglik: l,
                max_change,
            });
        }
    }

    if capped_any {
        diagnostics.push(format!(
            "inner coordinate ascent hit the {MAX_SWEEPS}-sweep cap at least once"
        ));
    }
    if !converged {
        diagnostics.push(format!(
            "not converged after {iterations} outer iterations"
        ));
    }

    // realize the selected eta exactly; its zeros are the chosen pattern
    let eta_hat = design * &coeffs;
    let theta_hat = match mats.theta_from_eta(basis, &eta_hat, Some(&theta)) {
        Ok(t) => t,
        Err(e) => {
            diagnostics.push(format!("could not realize the selected eta exactly: {e}"));
            theta.clone()
        }
    };
    let pi = basis.theta_to_pi(&theta_hat)?;
    let l = loglik(counts, &theta_hat, basis)?;
    if pi.min() < BOUNDARY_PI {
        diagnostics.push(format!(
            "smallest fitted probability {:.3e} is near the boundary",
            pi.min()
        ));
    }
    let zero_pattern = (0..q).filter(|&j| coeffs[j] == 0.0).collect();
    Ok(PenalizedFitResult {
        eta: eta_hat,
        zero_pattern,
        theta: theta_hat,
        pi,
        loglik: l,
        objective: l - penalty.nu().dot(&coeffs.map(f64::abs)),
        iterations,
        converged,
        trace,
        diagnostics,
        coeffs,
    })
}

/// One solved point of a penalty path.
#[derive(Debug, Clone)]
pub struct PathPoint {
    /// Global scale applied to the base weights at this point.
    pub nu: f64,
    pub result: PenalizedFitResult,
}

/// Solves the penalized fit along an ascending grid of global penalty
/// scales applied to `base` weights, warm-starting each point from the
/// previous solution.
pub fn penalty_path(
    counts: &CountVector,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
    base: &PenaltySpec,
    grid: &[f64],
    options: &FitOptions,
) -> Result<Vec<PathPoint>> {
    if grid.is_empty() {
        return Err(Error::InvalidDimensions("the penalty grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) || grid.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidDimensions(
            "the penalty grid must be nonnegative and ascending".into(),
        ));
    }
    let mut points = Vec::with_capacity(grid.len());
    let mut opts = options.clone();
    for &scale in grid {
        let penalty = base.scaled(scale)?;
        let result = penalized_fit(counts, mats, basis, &penalty, &opts)?;
        // warm start the next point from this solution
        opts.start = StartValue::User(result.theta.clone());
        points.push(PathPoint { nu: scale, result });
    }
    Ok(points)
}
