//! The model file: one TOML document describing the table, the marginal
//! parameterization, and what to fit.  Unknown keys are rejected so typos
//! surface as parse errors with a line number instead of silently changing
//! the model.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use marginfit::{Coding, MllpSpec, TableSchema, VarSet};

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema: SchemaBlock,
    pub mllp: MllpBlock,
    pub constraint: Option<ConstraintBlock>,
    pub covariates: Option<CovariateBlock>,
    pub penalty: Option<PenaltyBlock>,
    pub options: Option<OptionsBlock>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaBlock {
    /// Variable names, slowest-varying first.
    pub variables: Vec<String>,
    /// Level counts, aligned with `variables`.
    pub levels: Vec<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MllpBlock {
    /// Margins in fitting order, e.g. `["a", "b", "a:b"]`.
    pub margins: Vec<String>,
    /// "baseline" (default) or "effect".
    pub coding: Option<String>,
    /// Explicit effect-to-margin assignment; omitted means each effect
    /// goes to the first margin containing it.
    pub assignment: Option<Vec<AssignmentEntry>>,
    pub coding_overrides: Option<Vec<CodingOverride>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentEntry {
    pub effect: String,
    pub margin: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodingOverride {
    pub effect: String,
    pub coding: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintBlock {
    /// Effects whose coordinates are constrained to zero.
    pub zero_effects: Option<Vec<String>>,
    /// CSV path, (t-1) x r constraint matrix K.
    pub k_matrix: Option<String>,
    /// CSV path, (t-1) x q design matrix X.
    pub x_matrix: Option<String>,
    pub general: Option<GeneralBlock>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralBlock {
    /// CSV path, r x u contrast matrix A.
    pub a_matrix: String,
    /// CSV path, u x t zero/one margin selector.
    pub margins: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateBlock {
    pub strata: Vec<StratumEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratumEntry {
    /// CSV path, (t-1) x q design for this stratum.
    pub design: String,
    /// CSV path, counts for this stratum.
    pub counts: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyBlock {
    /// Global weight applied to every coordinate.
    pub nu: Option<f64>,
    /// Per-effect overrides of the global weight.
    pub per_effect: Option<Vec<EffectWeight>>,
    /// Reweight by the reciprocal magnitudes of a pilot fit.
    pub adaptive: Option<bool>,
    /// Ascending scale grid for `--path` runs.
    pub grid: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectWeight {
    pub effect: String,
    pub nu: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionsBlock {
    pub algorithm: Option<String>,
    pub max_iter: Option<usize>,
    pub tol_constraint: Option<f64>,
    pub tol_score: Option<f64>,
    pub max_halvings: Option<usize>,
    /// "smoothed", "uniform", or an explicit theta vector.
    pub start: Option<StartSpec>,
    pub trace: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum StartSpec {
    Named(String),
    Theta(Vec<f64>),
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
        let parsed: ModelFile = toml::from_str(&text).map_err(|e| {
            CliError::input(format!("{}: {}", path.display(), e.message_with_span()))
        })?;
        if parsed.schema.variables.len() != parsed.schema.levels.len() {
            return Err(CliError::input(format!(
                "schema lists {} variables but {} level counts",
                parsed.schema.variables.len(),
                parsed.schema.levels.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for v in &parsed.schema.variables {
            if !seen.insert(v.clone()) {
                return Err(CliError::input(format!("duplicate variable name '{v}'")));
            }
        }
        Ok(parsed)
    }

    pub fn table_schema(&self) -> Result<TableSchema, CliError> {
        TableSchema::new(&self.schema.levels)
            .map_err(|e| CliError::input(format!("schema: {e}")))
    }

    /// Index of a variable name, with the offending token in the error.
    fn var_index(&self, name: &str, context: &str) -> Result<usize, CliError> {
        self.schema
            .variables
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| {
                CliError::input(format!("unknown variable '{name}' in {context}"))
            })
    }

    /// Parses an effect or margin written as variable names joined by
    /// colons, e.g. "sex:age".
    pub fn parse_var_set(&self, token: &str, context: &str) -> Result<VarSet, CliError> {
        if token.trim().is_empty() {
            return Err(CliError::input(format!("empty variable set in {context}")));
        }
        let mut vars = Vec::new();
        for part in token.split(':') {
            let part = part.trim();
            if part.is_empty() {
                return Err(CliError::input(format!(
                    "malformed variable set '{token}' in {context}"
                )));
            }
            let idx = self.var_index(part, &format!("{context} '{token}'"))?;
            if vars.contains(&idx) {
                return Err(CliError::input(format!(
                    "variable '{part}' repeats in {context} '{token}'"
                )));
            }
            vars.push(idx);
        }
        Ok(VarSet::from_indices(&vars))
    }

    fn parse_coding(token: &str) -> Result<Coding, CliError> {
        match token {
            "baseline" => Ok(Coding::Baseline),
            "effect" => Ok(Coding::Effect),
            other => Err(CliError::input(format!(
                "unknown coding '{other}' (expected 'baseline' or 'effect')"
            ))),
        }
    }

    /// Builds the marginal parameterization spec and validates it against
    /// the schema, so completeness violations are reported before fitting.
    pub fn mllp_spec(&self, schema: &TableSchema) -> Result<MllpSpec, CliError> {
        let mut margins = Vec::new();
        for m in &self.mllp.margins {
            margins.push(self.parse_var_set(m, "margin")?);
        }
        let coding = match &self.mllp.coding {
            Some(c) => Self::parse_coding(c)?,
            None => Coding::Baseline,
        };
        let mut spec = match &self.mllp.assignment {
            None => MllpSpec::hierarchical(margins, coding),
            Some(entries) => {
                let mut assignment = Vec::new();
                for entry in entries {
                    let effect = self.parse_var_set(&entry.effect, "assignment effect")?;
                    let margin_set = self.parse_var_set(&entry.margin, "assignment margin")?;
                    let index = margins
                        .iter()
                        .position(|m| *m == margin_set)
                        .ok_or_else(|| {
                            CliError::input(format!(
                                "assignment points effect '{}' at margin '{}', which is not in the margin list",
                                entry.effect, entry.margin
                            ))
                        })?;
                    assignment.push((effect, index));
                }
                MllpSpec::with_assignment(margins, assignment, coding)
            }
        };
        if let Some(overrides) = &self.mllp.coding_overrides {
            for o in overrides {
                let effect = self.parse_var_set(&o.effect, "coding override")?;
                spec.set_coding_override(effect, Self::parse_coding(&o.coding)?);
            }
        }
        let report = marginfit::validate_spec(&spec, schema);
        if !report.complete || !report.fit_ready() {
            let mut lines = vec![
                "the margin list is not a complete parameterization: every nonempty effect must belong to exactly one margin, in non-decreasing inclusion order".to_string(),
            ];
            lines.extend(report.violation_strings());
            return Err(CliError::input(lines.join("\n  ")));
        }
        Ok(spec)
    }

    /// Resolves a path in the model file relative to the model file itself.
    pub fn resolve(&self, base: &Path, relative: &str) -> PathBuf {
        let p = Path::new(relative);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}

trait TomlErrorExt {
    fn message_with_span(&self) -> String;
}

impl TomlErrorExt for toml::de::Error {
    fn message_with_span(&self) -> String {
        // toml's Display already carries "line N, column M"
        self.to_string().replace('\n', " ").trim().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(name: &str, content: &str) -> Result<ModelFile, CliError> {
        let path = std::env::temp_dir().join(format!("marginfit_model_{}_{name}", std::process::id()));
        std::fs::write(&path, content).unwrap();
        ModelFile::load(&path)
    }

    const MINIMAL: &str = "[schema]\nvariables = [\"a\", \"b\"]\nlevels = [2, 2]\n\n[mllp]\nmargins = [\"a\", \"b\", \"a:b\"]\n";

    #[test]
    fn minimal_model_parses_and_validates() {
        let model = load_str("minimal.toml", MINIMAL).unwrap();
        let schema = model.table_schema().unwrap();
        let spec = model.mllp_spec(&schema).unwrap();
        assert_eq!(spec.margins().len(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_location() {
        let err = load_str("unknown.toml", &format!("{MINIMAL}\n[options]\nmax_iters = 5\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("max_iters") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn incomplete_margin_list_cites_the_completeness_requirement() {
        let model = load_str(
            "incomplete.toml",
            "[schema]\nvariables = [\"a\", \"b\"]\nlevels = [2, 2]\n\n[mllp]\nmargins = [\"a\", \"b\"]\n",
        )
        .unwrap();
        let schema = model.table_schema().unwrap();
        let err = model.mllp_spec(&schema).unwrap_err();
        assert!(err.to_string().contains("complete parameterization"), "{err}");
    }

    #[test]
    fn unknown_variable_errors_name_the_token() {
        let model = load_str("badvar.toml", MINIMAL).unwrap();
        let err = model.parse_var_set("a:c", "margin 'a:c'").unwrap_err();
        assert!(err.to_string().contains("'c'"), "{err}");
    }
}
