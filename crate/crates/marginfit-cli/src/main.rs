//! Command-line front end: reads a model file and count data, runs the
//! requested fit, writes a structured JSON report, and prints the same
//! numbers as text.
//!
//! Exit codes: 0 converged, 1 input error (message on stderr), 2 fit ran
//! but did not converge (the report is still written).

mod data;
mod model_file;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use nalgebra::{DMatrix, DVector};

use marginfit::{
    fit_covariates, fit_with_matrices, multi_start, penalized_fit, penalty_path, Algorithm,
    CanonicalBasis, CountVector, FitOptions, MllpMatrices, ModelConstraint, PenaltySpec,
    StartValue, StratifiedData, Stratum, TableSchema,
};

use model_file::{ModelFile, PenaltyBlock, StartSpec};
use report::Report;

/// One user-facing error; always exits with code 1.
#[derive(Debug)]
pub struct CliError(String);

impl CliError {
    pub fn input(message: String) -> Self {
        CliError(message)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CliError {}

impl From<marginfit::Error> for CliError {
    fn from(e: marginfit::Error) -> Self {
        CliError(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Lagrangian,
    Regression,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Lagrangian => Algorithm::Lagrangian,
            AlgorithmArg::Regression => Algorithm::Regression,
        }
    }
}

/// Fits marginal log-linear models to contingency tables by constrained
/// maximum likelihood.
#[derive(Debug, Parser)]
#[command(name = "marginfit", version)]
struct Cli {
    /// Model file (TOML: schema, margins, constraint, options).
    model: PathBuf,

    /// Counts CSV (one row of cell counts, or long format with a header).
    /// Omit when the model file declares per-stratum covariate data.
    data: Option<PathBuf>,

    /// Where the JSON report is written.
    #[arg(short, long, default_value = "report.json")]
    output: PathBuf,

    /// Override the algorithm chosen in the model file.
    #[arg(long, value_enum)]
    algorithm: Option<AlgorithmArg>,

    /// Override the iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,

    /// Convergence tolerance, applied to both the constraint and the
    /// projected-score norms.
    #[arg(long)]
    tol: Option<f64>,

    /// Extra randomized starts fitted concurrently; the best converged
    /// result is kept.
    #[arg(long, default_value_t = 0)]
    multi_start: usize,

    /// Seed for the randomized starts.
    #[arg(long, env = "MARGINFIT_SEED", default_value_t = 0)]
    seed: u64,

    /// Traverse the penalty grid of the model file instead of fitting a
    /// single penalized model.
    #[arg(long)]
    path: bool,

    /// Include the iteration trace in the report.
    #[arg(long)]
    trace: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn parse_algorithm(token: &str) -> Result<Algorithm, CliError> {
    match token {
        "lagrangian" => Ok(Algorithm::Lagrangian),
        "regression" => Ok(Algorithm::Regression),
        other => Err(CliError::input(format!(
            "unknown algorithm '{other}' (expected 'lagrangian' or 'regression')"
        ))),
    }
}

fn algorithm_name(a: Algorithm) -> &'static str {
    match a {
        Algorithm::Lagrangian => "lagrangian",
        Algorithm::Regression => "regression",
    }
}

/// Model-file options overridden by command-line flags.
fn fit_options(model: &ModelFile, cli: &Cli, free_params: usize) -> Result<FitOptions, CliError> {
    let mut opts = FitOptions::default();
    let mut trace = cli.trace;
    if let Some(block) = &model.options {
        if let Some(a) = &block.algorithm {
            opts.algorithm = parse_algorithm(a)?;
        }
        if let Some(m) = block.max_iter {
            opts.max_iter = m;
        }
        if let Some(t) = block.tol_constraint {
            opts.tol_constraint = t;
        }
        if let Some(t) = block.tol_score {
            opts.tol_score = t;
        }
        if let Some(h) = block.max_halvings {
            opts.max_halvings = h;
        }
        if let Some(s) = &block.start {
            opts.start = match s {
                StartSpec::Named(name) => match name.as_str() {
                    "smoothed" => StartValue::EmpiricalSmoothed,
                    "uniform" => StartValue::Uniform,
                    other => {
                        return Err(CliError::input(format!(
                            "unknown start '{other}' (expected 'smoothed', 'uniform', or a vector)"
                        )))
                    }
                },
                StartSpec::Theta(values) => {
                    if values.len() != free_params {
                        return Err(CliError::input(format!(
                            "start vector has {} entries; the model has {free_params} free parameters",
                            values.len()
                        )));
                    }
                    StartValue::User(DVector::from_vec(values.clone()))
                }
            };
        }
        if block.trace == Some(true) {
            trace = true;
        }
    }
    if let Some(a) = cli.algorithm {
        opts.algorithm = a.into();
    }
    if let Some(m) = cli.max_iter {
        opts.max_iter = m;
    }
    if let Some(t) = cli.tol {
        opts.tol_constraint = t;
        opts.tol_score = t;
    }
    opts.capture_trace = trace;
    Ok(opts)
}

/// `K` columns that pin whole effect blocks of `eta` to zero.
fn zero_effects_k(
    model: &ModelFile,
    mats: &MllpMatrices,
    tokens: &[String],
) -> Result<DMatrix<f64>, CliError> {
    let mut coords: Vec<usize> = Vec::new();
    for token in tokens {
        let effect = model.parse_var_set(token, "zero_effects")?;
        let range = mats.effect_coordinates(effect).ok_or_else(|| {
            CliError::input(format!("effect '{token}' is not in the parameterization"))
        })?;
        coords.extend(range);
    }
    coords.sort_unstable();
    coords.dedup();
    let mut k = DMatrix::zeros(mats.eta_len(), coords.len());
    for (j, &i) in coords.iter().enumerate() {
        k[(i, j)] = 1.0;
    }
    Ok(k)
}

fn constraint_from_model(
    model: &ModelFile,
    model_path: &Path,
    mats: &MllpMatrices,
) -> Result<ModelConstraint, CliError> {
    let Some(block) = &model.constraint else {
        return Ok(ModelConstraint::saturated(mats.num_cells()));
    };
    let set = [
        block.zero_effects.is_some(),
        block.k_matrix.is_some(),
        block.x_matrix.is_some(),
        block.general.is_some(),
    ]
    .iter()
    .filter(|&&s| s)
    .count();
    if set != 1 {
        return Err(CliError::input(
            "the constraint block must set exactly one of zero_effects, k_matrix, x_matrix, general"
                .into(),
        ));
    }
    if let Some(tokens) = &block.zero_effects {
        let k = zero_effects_k(model, mats, tokens)?;
        return Ok(ModelConstraint::LinearK { k });
    }
    if let Some(path) = &block.k_matrix {
        let k = data::read_matrix(&model.resolve(model_path, path))?;
        return Ok(ModelConstraint::LinearK { k });
    }
    if let Some(path) = &block.x_matrix {
        let x = data::read_matrix(&model.resolve(model_path, path))?;
        return Ok(ModelConstraint::Design { x });
    }
    let general = block.general.as_ref().unwrap();
    let a = data::read_matrix(&model.resolve(model_path, &general.a_matrix))?;
    let mc = data::read_matrix(&model.resolve(model_path, &general.margins))?;
    Ok(ModelConstraint::General { a, mc })
}

/// Penalty weights: global `nu`, optionally reweighted by the reciprocal
/// magnitudes of an unpenalized pilot fit, then per-effect overrides.
fn penalty_spec(
    model: &ModelFile,
    block: &PenaltyBlock,
    counts: &CountVector,
    mats: &MllpMatrices,
    basis: &CanonicalBasis,
    options: &FitOptions,
) -> Result<PenaltySpec, CliError> {
    if block.nu.is_none() && block.per_effect.is_none() {
        return Err(CliError::input(
            "the penalty block needs a global 'nu' or 'per_effect' weights".into(),
        ));
    }
    let global = block.nu.unwrap_or(0.0);
    let mut base = if block.adaptive == Some(true) {
        let saturated = ModelConstraint::saturated(mats.num_cells());
        let pilot = fit_with_matrices(counts, mats, basis, &saturated, options)?;
        PenaltySpec::adaptive(global, &pilot.eta)?
    } else {
        PenaltySpec::uniform(mats.eta_len(), global)?
    };
    if let Some(entries) = &block.per_effect {
        let mut weights = base.nu().clone();
        for entry in entries {
            let effect = model.parse_var_set(&entry.effect, "penalty per_effect")?;
            let range = mats.effect_coordinates(effect).ok_or_else(|| {
                CliError::input(format!(
                    "effect '{}' is not in the parameterization",
                    entry.effect
                ))
            })?;
            for i in range {
                weights[i] = entry.nu;
            }
        }
        base = PenaltySpec::weighted(weights)?;
    }
    Ok(base)
}

fn load_strata(
    model: &ModelFile,
    model_path: &Path,
    schema: &TableSchema,
) -> Result<StratifiedData, CliError> {
    let block = model.covariates.as_ref().unwrap();
    let mut strata = Vec::with_capacity(block.strata.len());
    for entry in &block.strata {
        let design = data::read_matrix(&model.resolve(model_path, &entry.design))?;
        let counts = data::read_counts(
            &model.resolve(model_path, &entry.counts),
            schema,
            &model.schema.variables,
        )?;
        strata.push(Stratum { counts, design });
    }
    Ok(StratifiedData::new(strata)?)
}

fn run(cli: &Cli) -> Result<ExitCode, CliError> {
    let model = ModelFile::load(&cli.model)?;
    let schema = model.table_schema()?;
    let spec = model.mllp_spec(&schema)?;
    let mats = MllpMatrices::build(&spec, &schema)?;
    let basis = schema.default_basis();
    let labels = report::eta_labels(&mats, &model.schema.variables);
    let options = fit_options(&model, cli, mats.eta_len())?;
    let with_trace = options.capture_trace;

    if cli.path && model.penalty.is_none() {
        return Err(CliError::input(
            "the --path flag needs a penalty block in the model file".into(),
        ));
    }

    let report = if model.covariates.is_some() {
        if cli.data.is_some() {
            return Err(CliError::input(
                "covariate runs take per-stratum counts from the model file; remove the data argument"
                    .into(),
            ));
        }
        if model.penalty.is_some() || model.constraint.is_some() {
            return Err(CliError::input(
                "covariate runs do not combine with constraint or penalty blocks".into(),
            ));
        }
        if cli.multi_start > 0 || cli.path {
            return Err(CliError::input(
                "the --multi-start and --path flags apply to single-table runs".into(),
            ));
        }
        let strata = load_strata(&model, &cli.model, &schema)?;
        let res = fit_covariates(&strata, &mats, &basis, &options)?;
        Report::from_covariates(&res, "regression", with_trace)
    } else {
        let data_path = cli.data.as_ref().ok_or_else(|| {
            CliError::input(
                "a counts CSV is required unless the model file declares covariate strata".into(),
            )
        })?;
        let counts = data::read_counts(data_path, &schema, &model.schema.variables)?;

        if let Some(block) = &model.penalty {
            if model.constraint.is_some() {
                return Err(CliError::input(
                    "penalized runs do not combine with a constraint block".into(),
                ));
            }
            if cli.multi_start > 0 {
                return Err(CliError::input(
                    "the --multi-start flag applies to unpenalized fits".into(),
                ));
            }
            let base = penalty_spec(&model, block, &counts, &mats, &basis, &options)?;
            if cli.path {
                let grid = block.grid.as_ref().ok_or_else(|| {
                    CliError::input("a --path run needs a grid in the penalty block".into())
                })?;
                let points = penalty_path(&counts, &mats, &basis, &base, grid, &options)?;
                Report::from_path(&points, &labels)
            } else {
                let res = penalized_fit(&counts, &mats, &basis, &base, &options)?;
                Report::from_penalized(&res, &labels, with_trace)
            }
        } else {
            let constraint = constraint_from_model(&model, &cli.model, &mats)?;
            let res = if cli.multi_start > 0 {
                multi_start(
                    &counts,
                    &mats,
                    &basis,
                    &constraint,
                    &options,
                    cli.multi_start,
                    cli.seed,
                )?
            } else {
                fit_with_matrices(&counts, &mats, &basis, &constraint, &options)?
            };
            Report::from_fit(&res, algorithm_name(options.algorithm), &labels, with_trace)
        }
    };

    std::fs::write(&cli.output, report.to_json())
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", cli.output.display())))?;
    print!("{}", report.to_text());
    Ok(if report.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
