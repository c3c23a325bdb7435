//! Report assembly.  Every floating-point value is rendered once, at 17
//! significant digits, and that exact string is what lands in both the
//! structured (JSON) and the human-readable outputs, so the two can never
//! disagree.

use serde::ser::SerializeSeq;
use serde::{Serialize, Serializer};

use marginfit::{
    CovariateFitResult, FitResult, IterationRecord, MllpMatrices, PathPoint,
    PenalizedFitResult, PenaltyIterationRecord,
};

/// One f64 serialized as a raw JSON number with 17 significant digits.
#[derive(Debug, Clone, Copy)]
pub struct Num(pub f64);

pub fn sig(x: f64) -> String {
    format!("{:.16e}", x)
}

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let raw = serde_json::value::RawValue::from_string(sig(self.0))
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

fn nums<'a, I: IntoIterator<Item = &'a f64>>(values: I) -> Vec<Num> {
    values.into_iter().map(|&v| Num(v)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Labeled {
    pub label: String,
    pub value: Num,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loglik: Num,
    pub constraint_norm: Num,
    pub score_norm: Num,
    pub step_scale: Num,
}

#[derive(Debug, Clone, Serialize)]
pub struct PenaltyTraceRow {
    pub iteration: usize,
    pub objective: Num,
    pub loglik: Num,
    pub max_change: Num,
}

#[derive(Debug, Clone, Serialize)]
pub struct StratumReport {
    pub index: usize,
    pub pi: Vec<Num>,
    pub theta: Vec<Num>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PathRow {
    pub nu: Num,
    pub loglik: Num,
    pub objective: Num,
    pub converged: bool,
    pub zero_pattern: Vec<usize>,
    pub eta: Vec<Num>,
}

/// Serializes `Option<Vec<f64>>` without wrapping present values.
fn opt_nums<S: Serializer>(v: &Option<Vec<Num>>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        None => s.serialize_none(),
        Some(values) => {
            let mut seq = s.serialize_seq(Some(values.len()))?;
            for value in values {
                seq.serialize_element(value)?;
            }
            seq.end()
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub mode: String,
    pub algorithm: String,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: Num,
    pub constraint_norm: Num,
    pub score_norm: Num,
    pub eta: Vec<Labeled>,
    pub theta: Vec<Num>,
    pub pi: Vec<Num>,
    #[serde(serialize_with = "opt_nums")]
    pub beta: Option<Vec<Num>>,
    #[serde(serialize_with = "opt_nums")]
    pub lambda: Option<Vec<Num>>,
    #[serde(serialize_with = "opt_nums")]
    pub observed_info_eigenvalues: Option<Vec<Num>>,
    pub local_max: Option<bool>,
    pub zero_pattern: Option<Vec<usize>>,
    pub strata: Option<Vec<StratumReport>>,
    pub path: Option<Vec<PathRow>>,
    pub trace: Option<Vec<TraceRow>>,
    pub penalty_trace: Option<Vec<PenaltyTraceRow>>,
    pub diagnostics: Vec<String>,
}

/// Coordinate labels such as `sex=1:age=2`, one per eta entry.
pub fn eta_labels(mats: &MllpMatrices, variables: &[String]) -> Vec<String> {
    mats.coordinate_descriptors()
        .iter()
        .map(|d| {
            d.levels
                .iter()
                .map(|&(var, level)| format!("{}={level}", variables[var]))
                .collect::<Vec<_>>()
                .join(":")
        })
        .collect()
}

fn labeled(values: &nalgebra::DVector<f64>, labels: &[String]) -> Vec<Labeled> {
    values
        .iter()
        .zip(labels)
        .map(|(&value, label)| Labeled {
            label: label.clone(),
            value: Num(value),
        })
        .collect()
}

fn trace_rows(trace: &[IterationRecord]) -> Vec<TraceRow> {
    trace
        .iter()
        .map(|r| TraceRow {
            iteration: r.iteration,
            loglik: Num(r.loglik),
            constraint_norm: Num(r.constraint_norm),
            score_norm: Num(r.score_norm),
            step_scale: Num(r.step_scale),
        })
        .collect()
}

impl Report {
    pub fn from_fit(
        res: &FitResult,
        algorithm: &str,
        labels: &[String],
        with_trace: bool,
    ) -> Self {
        Report {
            mode: "fit".into(),
            algorithm: algorithm.into(),
            converged: res.converged,
            iterations: res.iterations,
            loglik: Num(res.loglik),
            constraint_norm: Num(res.constraint_norm),
            score_norm: Num(res.score_norm),
            eta: labeled(&res.eta, labels),
            theta: nums(res.theta.iter()),
            pi: nums(res.pi.values().iter()),
            beta: res.beta.as_ref().map(|b| nums(b.iter())),
            lambda: res.lambda.as_ref().map(|l| nums(l.iter())),
            observed_info_eigenvalues: res
                .observed_info_eigenvalues
                .as_ref()
                .map(|e| nums(e.iter())),
            local_max: res.local_max,
            zero_pattern: None,
            strata: None,
            path: None,
            trace: with_trace.then(|| trace_rows(&res.trace)),
            penalty_trace: None,
            diagnostics: res.diagnostics.clone(),
        }
    }

    pub fn from_covariates(
        res: &CovariateFitResult,
        algorithm: &str,
        with_trace: bool,
    ) -> Self {
        Report {
            mode: "covariates".into(),
            algorithm: algorithm.into(),
            converged: res.converged,
            iterations: res.iterations,
            loglik: Num(res.loglik),
            constraint_norm: Num(res.feasibility_norm),
            score_norm: Num(res.score_norm),
            eta: Vec::new(),
            theta: Vec::new(),
            pi: Vec::new(),
            beta: Some(nums(res.beta.iter())),
            lambda: None,
            observed_info_eigenvalues: res
                .observed_info_eigenvalues
                .as_ref()
                .map(|e| nums(e.iter())),
            local_max: res.local_max,
            zero_pattern: None,
            strata: Some(
                res.thetas
                    .iter()
                    .zip(&res.pis)
                    .enumerate()
                    .map(|(index, (theta, pi))| StratumReport {
                        index,
                        pi: nums(pi.values().iter()),
                        theta: nums(theta.iter()),
                    })
                    .collect(),
            ),
            path: None,
            trace: with_trace.then(|| trace_rows(&res.trace)),
            penalty_trace: None,
            diagnostics: res.diagnostics.clone(),
        }
    }

    pub fn from_penalized(
        res: &PenalizedFitResult,
        labels: &[String],
        with_trace: bool,
    ) -> Self {
        Report {
            mode: "penalized".into(),
            algorithm: "regression".into(),
            converged: res.converged,
            iterations: res.iterations,
            loglik: Num(res.loglik),
            constraint_norm: Num(0.0),
            score_norm: Num(res.objective),
            eta: labeled(&res.eta, labels),
            theta: nums(res.theta.iter()),
            pi: nums(res.pi.values().iter()),
            beta: Some(nums(res.coeffs.iter())),
            lambda: None,
            observed_info_eigenvalues: None,
            local_max: None,
            zero_pattern: Some(res.zero_pattern.clone()),
            strata: None,
            path: None,
            trace: None,
            penalty_trace: with_trace.then(|| {
                res.trace
                    .iter()
                    .map(|r: &PenaltyIterationRecord| PenaltyTraceRow {
                        iteration: r.iteration,
                        objective: Num(r.objective),
                        loglik: Num(r.loglik),
                        max_change: Num(r.max_change),
                    })
                    .collect()
            }),
            diagnostics: res.diagnostics.clone(),
        }
    }

    pub fn from_path(points: &[PathPoint], labels: &[String]) -> Self {
        let last = &points[points.len() - 1].result;
        let all_converged = points.iter().all(|p| p.result.converged);
        Report {
            mode: "path".into(),
            algorithm: "regression".into(),
            converged: all_converged,
            iterations: points.iter().map(|p| p.result.iterations).sum(),
            loglik: Num(last.loglik),
            constraint_norm: Num(0.0),
            score_norm: Num(last.objective),
            eta: labeled(&last.eta, labels),
            theta: nums(last.theta.iter()),
            pi: nums(last.pi.values().iter()),
            beta: None,
            lambda: None,
            observed_info_eigenvalues: None,
            local_max: None,
            zero_pattern: Some(last.zero_pattern.clone()),
            strata: None,
            path: Some(
                points
                    .iter()
                    .map(|p| PathRow {
                        nu: Num(p.nu),
                        loglik: Num(p.result.loglik),
                        objective: Num(p.result.objective),
                        converged: p.result.converged,
                        zero_pattern: p.result.zero_pattern.clone(),
                        eta: nums(p.result.eta.iter()),
                    })
                    .collect(),
            ),
            trace: None,
            penalty_trace: None,
            diagnostics: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serialization");
        out.push('\n');
        out
    }

    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        lines.push(format!("mode: {}", self.mode));
        lines.push(format!("algorithm: {}", self.algorithm));
        lines.push(format!(
            "converged: {} after {} iterations",
            self.converged, self.iterations
        ));
        lines.push(format!("loglik: {}", sig(self.loglik.0)));
        lines.push(format!("constraint norm: {}", sig(self.constraint_norm.0)));
        lines.push(format!("score norm: {}", sig(self.score_norm.0)));
        if !self.eta.is_empty() {
            lines.push("eta:".into());
            for entry in &self.eta {
                lines.push(format!("  {:<24} {}", entry.label, sig(entry.value.0)));
            }
        }
        if !self.theta.is_empty() {
            lines.push("theta:".into());
            for (i, v) in self.theta.iter().enumerate() {
                lines.push(format!("  {i}: {}", sig(v.0)));
            }
        }
        if !self.pi.is_empty() {
            lines.push("pi:".into());
            for (i, v) in self.pi.iter().enumerate() {
                lines.push(format!("  cell {i}: {}", sig(v.0)));
            }
        }
        if let Some(beta) = &self.beta {
            lines.push("beta:".into());
            for (i, v) in beta.iter().enumerate() {
                lines.push(format!("  {i}: {}", sig(v.0)));
            }
        }
        if let Some(lambda) = &self.lambda {
            lines.push("lambda:".into());
            for (i, v) in lambda.iter().enumerate() {
                lines.push(format!("  {i}: {}", sig(v.0)));
            }
        }
        if let Some(eigs) = &self.observed_info_eigenvalues {
            lines.push(format!(
                "observed information eigenvalues ({}):",
                match self.local_max {
                    Some(true) => "local maximum",
                    Some(false) => "not a local maximum",
                    None => "verdict unavailable",
                }
            ));
            for v in eigs {
                lines.push(format!("  {}", sig(v.0)));
            }
        }
        if let Some(zeros) = &self.zero_pattern {
            lines.push(format!("zero pattern: {zeros:?}"));
        }
        if let Some(strata) = &self.strata {
            lines.push(format!("strata: {}", strata.len()));
            for s in strata {
                let cells: Vec<String> = s.pi.iter().map(|v| sig(v.0)).collect();
                lines.push(format!("  stratum {}: pi = [{}]", s.index, cells.join(", ")));
                let coords: Vec<String> = s.theta.iter().map(|v| sig(v.0)).collect();
                lines.push(format!("  stratum {}: theta = [{}]", s.index, coords.join(", ")));
            }
        }
        if let Some(path) = &self.path {
            lines.push("path:".into());
            for row in path {
                let eta: Vec<String> = row.eta.iter().map(|v| sig(v.0)).collect();
                lines.push(format!(
                    "  nu {}: loglik {} objective {} zeros {:?} converged {} eta [{}]",
                    sig(row.nu.0),
                    sig(row.loglik.0),
                    sig(row.objective.0),
                    row.zero_pattern,
                    row.converged,
                    eta.join(", ")
                ));
            }
        }
        if let Some(trace) = &self.trace {
            lines.push("trace:".into());
            for row in trace {
                lines.push(format!(
                    "  it {}: loglik {} |h| {} score {} scale {}",
                    row.iteration,
                    sig(row.loglik.0),
                    sig(row.constraint_norm.0),
                    sig(row.score_norm.0),
                    sig(row.step_scale.0)
                ));
            }
        }
        if let Some(trace) = &self.penalty_trace {
            lines.push("trace:".into());
            for row in trace {
                lines.push(format!(
                    "  it {}: objective {} loglik {} change {}",
                    row.iteration,
                    sig(row.objective.0),
                    sig(row.loglik.0),
                    sig(row.max_change.0)
                ));
            }
        }
        for d in &self.diagnostics {
            lines.push(format!("note: {d}"));
        }
        lines.push(String::new());
        lines.join("\n")
    }
}
