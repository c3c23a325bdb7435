//! Stratified fitting where each unit's marginal parameters follow a
//! unit-specific design: `eta_i = X_i beta` with one shared coefficient
//! vector.
//!
//! A unit is a stratum of any size; an individual is a stratum of size one
//! with a one-hot response, so both cases share this code path.  The
//! update accumulates q x q normal equations unit by unit and never builds
//! the stacked design, keeping the per-iteration cost linear in the number
//! of units.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::likelihood::{observed_info, score_and_info, LikelihoodParts, ObservedInfoContext};
use crate::mllp::{Coding, MllpMatrices, MllpSpec, VarSet};
use crate::solver::{FitOptions, IterationRecord, StartValue};
use crate::table::{CanonicalBasis, CountVector, ProbVector, TableSchema, BOUNDARY_PI};

/// One unit: a response table (or one-hot vector) and its design on the
/// `eta` scale.
#[derive(Debug, Clone)]
pub struct Stratum {
    pub counts: CountVector,
    /// `(t-1) x q`
    pub design: DMatrix<f64>,
}

/// All units of a stratified fit.  Individual designs need not have full
/// column rank; the stacked design must, which is checked through the
/// positive definiteness of `sum X_i' X_i`.
#[derive(Debug, Clone)]
pub struct StratifiedData {
    strata: Vec<Stratum>,
    q: usize,
}

impl StratifiedData {
    pub fn new(strata: Vec<Stratum>) -> Result<Self> {
        let first = strata.first().ok_or_else(|| {
            Error::InvalidDimensions("stratified data needs at least one unit".into())
        })?;
        let t = first.counts.len();
        let p = first.design.nrows();
        let q = first.design.ncols();
        if p != t - 1 {
            return Err(Error::DimensionMismatch {
                what: "design rows".into(),
                expected: (t - 1, q),
                found: (p, q),
            });
        }
        for (i, s) in strata.iter().enumerate() {
            if s.counts.len() != t || s.design.shape() != (p, q) {
                return Err(Error::DimensionMismatch {
                    what: format!("unit {i}"),
                    expected: (p, q),
                    found: s.design.shape(),
                });
            }
        }
        let mut xtx = DMatrix::zeros(q, q);
        for s in &strata {
            xtx += s.design.transpose() * &s.design;
        }
        check_normal_matrix(&xtx).map_err(|e| match e {
            Error::Collinear { columns } => Error::Collinear { columns },
            other => other,
        })?;
        Ok(Self { strata, q })
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn num_units(&self) -> usize {
        self.strata.len()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Cellwise sum of all unit counts.
    pub fn pooled_counts(&self) -> Result<CountVector> {
        let t = self.strata[0].counts.len();
        let mut total = DVector::zeros(t);
        for s in &self.strata {
            total += s.counts.values();
        }
        CountVector::new(total)
    }
}

/// Fails with a collinearity diagnostic naming the deficient columns when
/// the symmetric matrix is not positive definite.
fn check_normal_matrix(m: &DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Ok(ch);
    }
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut columns = Vec::new();
    for j in 0..m.ncols() {
        if eig.eigenvalues[j] <= scale * 1e-12 {
            let v = eig.eigenvectors.column(j);
            let lead = (0..m.ncols())
                .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap())
                .unwrap();
            columns.push(lead);
        }
    }
    columns.sort_unstable();
    columns.dedup();
    Err(Error::Collinear { columns })
}

/// Per-unit evaluation cache for one outer iteration.
struct UnitState {
    theta: DVector<f64>,
    eta: DVector<f64>,
    parts: LikelihoodParts,
    r: DMatrix<f64>,
}

fn evaluate_unit(
    stratum: &Stratum,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
    theta: &DVector<f64>,
) -> Result<UnitState> {
    let parts = score_and_info(&stratum.counts, theta, basis)?;
    let eta = mats.eta(&parts.pi)?;
    let r = mats.jacobian_r(basis, &parts.pi)?;
    Ok(UnitState {
        theta: theta.clone(),
        eta,
        parts,
        r,
    })
}

/// The shared-coefficient proposal and the per-unit moves realizing it.
#[derive(Debug, Clone)]
pub struct CovariateProposal {
    pub beta: DVector<f64>,
    /// `theta_i` increments `R_i (X_i beta - eta_i)`.
    pub deltas: Vec<DVector<f64>>,
    /// `max norm of sum X_i' R_i' s_i`, the stationarity measure.
    pub score_norm: f64,
    /// `max_i |eta_i - X_i beta|`, the feasibility gap.
    pub feasibility_norm: f64,
}

/// One accumulation pass: `beta = (sum X_i' W_i X_i)^-1 sum X_i'(W_i eta_i
/// + R_i' s_i)` with `W_i = R_i' F_i R_i`, followed by the per-unit moves
/// `R_i (X_i beta - eta_i)`.  Only `q x q` quantities are ever formed.
pub fn covariate_update(
    thetas: &[DVector<f64>],
    data: &StratifiedData,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
) -> Result<CovariateProposal> {
    let states = thetas
        .iter()
        .zip(data.strata())
        .map(|(theta, s)| evaluate_unit(s, mats, basis, theta))
        .collect::<Result<Vec<_>>>()?;
    propose(&states, data)
}

fn propose(states: &[UnitState], data: &StratifiedData) -> Result<CovariateProposal> {
    let q = data.q();
    let mut normal = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    let mut score_total = DVector::zeros(q);
    for (state, stratum) in states.iter().zip(data.strata()) {
        let x = &stratum.design;
        let w_x = state.r.transpose() * &state.parts.expected_info * &state.r * x;
        normal += x.transpose() * &w_x;
        rhs += w_x.transpose() * &state.eta + x.transpose() * (state.r.transpose() * &state.parts.score);
        score_total += x.transpose() * (state.r.transpose() * &state.parts.score);
    }
    let chol = check_normal_matrix(&normal)?;
    let beta = chol.solve(&rhs);

    let mut deltas = Vec::with_capacity(states.len());
    let mut feasibility_norm: f64 = 0.0;
    for (state, stratum) in states.iter().zip(data.strata()) {
        let gap = &stratum.design * &beta - &state.eta;
        feasibility_norm = feasibility_norm.max(gap.amax());
        deltas.push(&state.r * gap);
    }
    Ok(CovariateProposal {
        beta,
        deltas,
        score_norm: score_total.amax(),
        feasibility_norm,
    })
}

#[derive(Debug, Clone)]
pub struct CovariateFitResult {
    pub beta: DVector<f64>,
    pub thetas: Vec<DVector<f64>>,
    pub pis: Vec<ProbVector>,
    /// Summed log-likelihood over units.
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub score_norm: f64,
    pub feasibility_norm: f64,
    /// Eigenvalues of the summed observed information in `beta`.
    pub observed_info_eigenvalues: Option<Vec<f64>>,
    pub local_max: Option<bool>,
    pub trace: Vec<IterationRecord>,
    pub diagnostics: Vec<String>,
}

/// Fits the shared-coefficient model by iterating [`covariate_update`] with
/// the solver's step halving applied to the summed log-likelihood (with the
/// usual infeasibility penalty).  All units start from the pooled smoothed
/// table, since one-hot units admit no empirical start of their own.
pub fn fit_covariates(
    data: &StratifiedData,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
    options: &FitOptions,
) -> Result<CovariateFitResult> {
    if data.strata()[0].counts.len() != mats.num_cells() {
        return Err(Error::DimensionMismatch {
            what: "unit counts".into(),
            expected: (mats.num_cells(), 1),
            found: (data.strata()[0].counts.len(), 1),
        });
    }
    let n_total: f64 = data.strata().iter().map(|s| s.counts.total()).sum();
    let start = match &options.start {
        StartValue::EmpiricalSmoothed => basis.pi_to_theta(&data.pooled_counts()?.smoothed_probs()),
        StartValue::Uniform => DVector::zeros(basis.dim()),
        StartValue::User(theta) => theta.clone(),
    };
    let mut thetas: Vec<DVector<f64>> = vec![start; data.num_units()];
    let mut states = thetas
        .iter()
        .zip(data.strata())
        .map(|(theta, s)| evaluate_unit(s, mats, basis, theta))
        .collect::<Result<Vec<_>>>()?;

    let mut diagnostics = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut proposal = propose(&states, data)?;

    for iter in 0..options.max_iter {
        if proposal.feasibility_norm <= options.tol_constraint
            && proposal.score_norm <= options.tol_score
        {
            converged = true;
            break;
        }
        iterations = iter + 1;

        let current_merit = merit_of(&states, &proposal.beta, data, n_total);
        let mut alpha = 1.0;
        let mut accepted: Option<(Vec<DVector<f64>>, Vec<UnitState>, f64)> = None;
        let mut last_eval: Option<(Vec<DVector<f64>>, Vec<UnitState>, f64)> = None;
        for _ in 0..=options.max_halvings {
            let cand: Vec<DVector<f64>> = thetas
                .iter()
                .zip(&proposal.deltas)
                .map(|(th, d)| th + d * alpha)
                .collect();
            let cand_states: Result<Vec<UnitState>> = cand
                .iter()
                .zip(data.strata())
                .map(|(theta, s)| evaluate_unit(s, mats, basis, theta))
                .collect();
            if let Ok(cs) = cand_states {
                let m = merit_of(&cs, &proposal.beta, data, n_total);
                if m.is_finite() {
                    if last_eval.is_none() || m > last_eval.as_ref().unwrap().2 {
                        last_eval = Some((cand.clone(), clone_states(&cs), m));
                    }
                    if m > current_merit {
                        accepted = Some((cand, cs, alpha));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((cand, cs, _)) => {
                thetas = cand;
                states = cs;
            }
            None => match last_eval {
                Some((cand, cs, _)) => {
                    diagnostics.push(format!(
                        "iteration {iterations}: step forced without merit improvement"
                    ));
                    thetas = cand;
                    states = cs;
                }
                None => {
                    return Err(Error::NonFinite(
                        "no evaluable point along the proposed direction".into(),
                    ))
                }
            },
        }

        proposal = propose(&states, data)?;
        if options.capture_trace {
            trace.push(IterationRecord {
                iteration: iterations,
                loglik: states.iter().map(|s| s.parts.loglik).sum(),
                constraint_norm: proposal.feasibility_norm,
                score_norm: proposal.score_norm,
                step_scale: alpha.min(1.0),
            });
        }
    }
    if !converged
        && proposal.feasibility_norm <= options.tol_constraint
        && proposal.score_norm <= options.tol_score
    {
        converged = true;
    }

    let boundary_units = states
        .iter()
        .filter(|s| s.parts.pi.min() < BOUNDARY_PI)
        .count();
    if boundary_units > 0 {
        diagnostics.push(format!(
            "{boundary_units} of {} units have fitted probabilities near the boundary",
            data.num_units()
        ));
    }
    if !converged {
        diagnostics.push(format!(
            "not converged after {iterations} iterations: feasibility = {:.3e}, score = {:.3e}",
            proposal.feasibility_norm, proposal.score_norm
        ));
    }

    let mut observed_info_eigenvalues = None;
    let mut local_max = None;
    if converged {
        let mut total = DMatrix::zeros(data.q(), data.q());
        let mut ok = true;
        for (state, stratum) in states.iter().zip(data.strata()) {
            let ctx = ObservedInfoContext {
                matrices: mats,
                basis,
                design: &stratum.design,
                counts: &stratum.counts,
            };
            match observed_info(&state.theta, &ctx) {
                Ok(j) => total += j,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            let sym = (total.clone() + total.transpose()) * 0.5;
            let mut eig: Vec<f64> = SymmetricEigen::new(sym)
                .eigenvalues
                .iter()
                .copied()
                .collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            local_max = Some(eig.iter().all(|&v| v > 0.0));
            observed_info_eigenvalues = Some(eig);
        }
    }

    Ok(CovariateFitResult {
        beta: proposal.beta,
        pis: states.iter().map(|s| s.parts.pi.clone()).collect(),
        loglik: states.iter().map(|s| s.parts.loglik).sum(),
        iterations,
        converged,
        score_norm: proposal.score_norm,
        feasibility_norm: proposal.feasibility_norm,
        observed_info_eigenvalues,
        local_max,
        trace,
        diagnostics,
        thetas,
    })
}

fn clone_states(states: &[UnitState]) -> Vec<UnitState> {
    states
        .iter()
        .map(|s| UnitState {
            theta: s.theta.clone(),
            eta: s.eta.clone(),
            parts: s.parts.clone(),
            r: s.r.clone(),
        })
        .collect()
}

fn merit_of(states: &[UnitState], beta: &DVector<f64>, data: &StratifiedData, n_total: f64) -> f64 {
    let loglik: f64 = states.iter().map(|s| s.parts.loglik).sum();
    let gap: f64 = states
        .iter()
        .zip(data.strata())
        .map(|(s, stratum)| (&stratum.design * beta - &s.eta).norm_squared())
        .sum();
    loglik - 10.0 * n_total * gap
}

/// Synthetic stratified data shaped like a two-variable 3 x 3 response with
/// a dozen mixed continuous/binary covariates, for demonstrations and
/// recovery tests.  Returns the data, the generating coefficients, and the
/// parameterization they refer to.
pub struct SyntheticCovariateStudy {
    pub data: StratifiedData,
    pub beta: DVector<f64>,
    pub mats: MllpMatrices,
    pub basis: CanonicalBasis,
}

/// Generates `n_units` one-hot units.  Designs have an identity intercept
/// block (8 columns) followed by 12 covariate columns, six standard normal
/// and six Bernoulli(1/2), each loading on one `eta` coordinate in turn.
pub fn synthetic_study(n_units: usize, seed: u64) -> Result<SyntheticCovariateStudy> {
    let schema = TableSchema::new(&[3, 3])?;
    let spec = MllpSpec::hierarchical(VarSet::full(2).nonempty_subsets(), Coding::Baseline);
    let mats = MllpMatrices::build(&spec, &schema)?;
    let basis = schema.default_basis();
    let p = mats.eta_len();
    let q = p + 12;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // modest effects keep every cell probability well inside the simplex
    let mut beta = DVector::zeros(q);
    for j in 0..p {
        beta[j] = 0.2 * ((j % 3) as f64 - 1.0);
    }
    for j in 0..12 {
        beta[p + j] = if j % 2 == 0 { 0.3 } else { -0.25 };
    }

    let mut strata = Vec::with_capacity(n_units);
    let mut theta_guess = DVector::zeros(p);
    for _ in 0..n_units {
        let mut x = DMatrix::zeros(p, q);
        for j in 0..p {
            x[(j, j)] = 1.0;
        }
        for j in 0..12 {
            let z: f64 = if j < 6 {
                rng.sample(StandardNormal)
            } else if rng.random::<bool>() {
                1.0
            } else {
                0.0
            };
            x[(j % p, p + j)] = z;
        }
        let eta = &x * &beta;
        let theta = mats.theta_from_eta(&basis, &eta, Some(&theta_guess))?;
        theta_guess = theta.clone();
        let pi = basis.theta_to_pi(&theta)?;
        // one multinomial draw
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut cell = pi.len() - 1;
        for (idx, &pv) in pi.values().iter().enumerate() {
            acc += pv;
            if u < acc {
                cell = idx;
                break;
            }
        }
        let mut y = DVector::zeros(pi.len());
        y[cell] = 1.0;
        strata.push(Stratum {
            counts: CountVector::new(y)?,
            design: x,
        });
    }
    Ok(SyntheticCovariateStudy {
        data: StratifiedData::new(strata)?,
        beta,
        mats,
        basis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{fit_with_matrices, Algorithm, ModelConstraint};
    use approx::assert_abs_diff_eq;

    fn setup2x2() -> (MllpMatrices, CanonicalBasis) {
        let schema = TableSchema::new(&[2, 2]).unwrap();
        let spec = MllpSpec::hierarchical(VarSet::full(2).nonempty_subsets(), Coding::Baseline);
        let mats = MllpMatrices::build(&spec, &schema).unwrap();
        (mats, schema.default_basis())
    }

    fn design_main_effects() -> DMatrix<f64> {
        DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    #[test]
    fn stacked_rank_is_required() {
        let (_, _) = setup2x2();
        let y = CountVector::new(DVector::from_vec(vec![3.0, 1.0, 2.0, 4.0])).unwrap();
        // both units share a design whose second column is zero
        let x = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let strata = vec![
            Stratum {
                counts: y.clone(),
                design: x.clone(),
            },
            Stratum {
                counts: y,
                design: x,
            },
        ];
        match StratifiedData::new(strata) {
            Err(Error::Collinear { columns }) => assert_eq!(columns, vec![1]),
            other => panic!("expected collinearity, got {other:?}"),
        }
    }

    #[test]
    fn single_unit_matches_design_fit() {
        let (mats, basis) = setup2x2();
        let y = CountVector::new(DVector::from_vec(vec![30.0, 10.0, 20.0, 40.0])).unwrap();
        let x = design_main_effects();
        let data = StratifiedData::new(vec![Stratum {
            counts: y.clone(),
            design: x.clone(),
        }])
        .unwrap();
        let options = FitOptions::default();
        let cov = fit_covariates(&data, &mats, &basis, &options).unwrap();
        let single = fit_with_matrices(
            &y,
            &mats,
            &basis,
            &ModelConstraint::Design { x },
            &options,
        )
        .unwrap();
        assert!(cov.converged && single.converged);
        assert!((cov.pis[0].values() - single.pi.values()).amax() < 1e-8);
        assert!((cov.beta.clone() - single.beta.unwrap()).amax() < 1e-8);
        assert_abs_diff_eq!(cov.loglik, single.loglik, epsilon = 1e-8);
    }

    #[test]
    fn identity_design_proposal_reduces_to_regression_update() {
        // q = t-1 and X = I: the shared-coefficient proposal must equal the
        // single-table regression proposal
        let (mats, basis) = setup2x2();
        let y = CountVector::new(DVector::from_vec(vec![30.0, 10.0, 20.0, 40.0])).unwrap();
        let x = DMatrix::identity(3, 3);
        let data = StratifiedData::new(vec![Stratum {
            counts: y.clone(),
            design: x.clone(),
        }])
        .unwrap();
        let theta0 = basis.pi_to_theta(&y.smoothed_probs());
        let prop = covariate_update(&[theta0.clone()], &data, &mats, &basis).unwrap();
        // with X = I the least-squares refit returns eta of the saturated
        // next iterate: beta = eta0 + Fbar^-1 sbar
        let parts = score_and_info(&y, &theta0, &basis).unwrap();
        let r = mats.jacobian_r(&basis, &parts.pi).unwrap();
        let eta0 = mats.eta(&parts.pi).unwrap();
        let fbar = r.transpose() * &parts.expected_info * &r;
        let sbar = r.transpose() * &parts.score;
        let expected_beta = &eta0 + fbar.try_inverse().unwrap() * sbar;
        assert!((prop.beta.clone() - &expected_beta).amax() < 1e-9);
        // and the theta move is R (beta - eta0)
        let expected_delta = &r * (expected_beta - eta0);
        assert!((prop.deltas[0].clone() - expected_delta).amax() < 1e-9);
    }

    #[test]
    fn split_singletons_match_pooled_proposal() {
        let (mats, basis) = setup2x2();
        let pooled = CountVector::new(DVector::from_vec(vec![3.0, 1.0, 2.0, 4.0])).unwrap();
        let x = design_main_effects();
        // split the pooled table into one-hot singletons
        let mut strata = Vec::new();
        for (cell, &count) in pooled.values().iter().enumerate() {
            for _ in 0..count as usize {
                let mut y = DVector::zeros(4);
                y[cell] = 1.0;
                strata.push(Stratum {
                    counts: CountVector::new(y).unwrap(),
                    design: x.clone(),
                });
            }
        }
        let data = StratifiedData::new(strata).unwrap();
        let theta0 = basis.pi_to_theta(&pooled.smoothed_probs());
        let thetas = vec![theta0.clone(); data.num_units()];
        let prop = covariate_update(&thetas, &data, &mats, &basis).unwrap();

        // pooled regression proposal computed directly
        let parts = score_and_info(&pooled, &theta0, &basis).unwrap();
        let r = mats.jacobian_r(&basis, &parts.pi).unwrap();
        let eta0 = mats.eta(&parts.pi).unwrap();
        let fbar = r.transpose() * &parts.expected_info * &r;
        let sbar = r.transpose() * &parts.score;
        let xtfx = x.transpose() * &fbar * &x;
        let beta_pooled =
            xtfx.try_inverse().unwrap() * (x.transpose() * (&fbar * &eta0 + &sbar));
        assert!((prop.beta.clone() - beta_pooled).amax() < 1e-9);
    }

    #[test]
    fn identical_designs_match_pooled_fit() {
        let (mats, basis) = setup2x2();
        let x = design_main_effects();
        let y1 = CountVector::new(DVector::from_vec(vec![12.0, 5.0, 9.0, 14.0])).unwrap();
        let y2 = CountVector::new(DVector::from_vec(vec![18.0, 5.0, 11.0, 26.0])).unwrap();
        let data = StratifiedData::new(vec![
            Stratum {
                counts: y1.clone(),
                design: x.clone(),
            },
            Stratum {
                counts: y2.clone(),
                design: x.clone(),
            },
        ])
        .unwrap();
        let pooled = CountVector::new(y1.values() + y2.values()).unwrap();
        let options = FitOptions {
            algorithm: Algorithm::Regression,
            ..FitOptions::default()
        };
        let cov = fit_covariates(&data, &mats, &basis, &options).unwrap();
        let single = fit_with_matrices(
            &pooled,
            &mats,
            &basis,
            &ModelConstraint::Design { x },
            &options,
        )
        .unwrap();
        assert!(cov.converged && single.converged);
        assert!((cov.beta.clone() - single.beta.unwrap()).amax() < 1e-8);
        for pi in &cov.pis {
            assert!((pi.values() - single.pi.values()).amax() < 1e-8);
        }
    }

    #[test]
    fn doubling_counts_leaves_beta_unchanged() {
        let (mats, basis) = setup2x2();
        let x1 = design_main_effects();
        let mut x2 = x1.clone();
        x2[(2, 0)] = 0.5; // second unit loads the interaction on beta_1
        let y1 = CountVector::new(DVector::from_vec(vec![12.0, 5.0, 9.0, 14.0])).unwrap();
        let y2 = CountVector::new(DVector::from_vec(vec![18.0, 5.0, 11.0, 26.0])).unwrap();
        let make = |scale: f64| {
            StratifiedData::new(vec![
                Stratum {
                    counts: CountVector::new(y1.values() * scale).unwrap(),
                    design: x1.clone(),
                },
                Stratum {
                    counts: CountVector::new(y2.values() * scale).unwrap(),
                    design: x2.clone(),
                },
            ])
            .unwrap()
        };
        let options = FitOptions::default();
        let a = fit_covariates(&make(1.0), &mats, &basis, &options).unwrap();
        let b = fit_covariates(&make(2.0), &mats, &basis, &options).unwrap();
        assert!(a.converged && b.converged);
        assert!((a.beta - b.beta).amax() < 1e-10);
    }

    #[test]
    fn synthetic_recovery_within_sampling_error() {
        let study = synthetic_study(400, 20260814).unwrap();
        let options = FitOptions::default();
        let fit = fit_covariates(&study.data, &study.mats, &study.basis, &options).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.local_max, Some(true));
        // per-coordinate recovery within three standard errors from the
        // summed observed information
        let q = study.data.q();
        let mut total = DMatrix::zeros(q, q);
        for (theta, s) in fit.thetas.iter().zip(study.data.strata()) {
            let ctx = ObservedInfoContext {
                matrices: &study.mats,
                basis: &study.basis,
                design: &s.design,
                counts: &s.counts,
            };
            total += observed_info(theta, &ctx).unwrap();
        }
        let inv = total.try_inverse().unwrap();
        for j in 0..q {
            let se = inv[(j, j)].sqrt();
            assert!(
                (fit.beta[j] - study.beta[j]).abs() <= 3.0 * se,
                "coordinate {j}: est {} true {} se {se}",
                fit.beta[j],
                study.beta[j]
            );
        }
    }
}
