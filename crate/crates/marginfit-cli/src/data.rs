//! CSV ingestion.  Counts come either as a bare numeric table in cell
//! order (last variable fastest) or in long form with one level column per
//! variable plus a final count column; matrices are bare numeric
//! rectangles.  All complaints carry the file and line they refer to.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use marginfit::{CountVector, TableSchema};

use crate::CliError;

fn read_records(path: &Path) -> Result<Vec<(u64, Vec<String>)>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let fields: Vec<String> = record.iter().map(|f| f.to_string()).collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push((line, fields));
    }
    if rows.is_empty() {
        return Err(CliError::input(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

/// Table counts.  A file whose every field is numeric is taken as the
/// whole table in cell order; otherwise the first row must name each
/// schema variable plus `count`, and level combinations map to cells
/// (duplicates are summed).
pub fn read_counts(
    path: &Path,
    schema: &TableSchema,
    variables: &[String],
) -> Result<CountVector, CliError> {
    let rows = read_records(path)?;
    let all_numeric = rows
        .iter()
        .flat_map(|(_, fields)| fields.iter())
        .all(|f| f.parse::<f64>().is_ok());
    let t = schema.num_cells();

    let values = if all_numeric {
        let mut flat = Vec::new();
        for (line, fields) in &rows {
            for field in fields {
                let v: f64 = field.parse().unwrap();
                if v < 0.0 || !v.is_finite() {
                    return Err(CliError::input(format!(
                        "{} line {line}: count {field} is not a nonnegative number",
                        path.display()
                    )));
                }
                flat.push(v);
            }
        }
        if flat.len() != t {
            return Err(CliError::input(format!(
                "{}: expected {t} cell counts, found {}",
                path.display(),
                flat.len()
            )));
        }
        DVector::from_vec(flat)
    } else {
        read_long_counts(path, &rows, schema, variables)?
    };
    CountVector::new(values)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn read_long_counts(
    path: &Path,
    rows: &[(u64, Vec<String>)],
    schema: &TableSchema,
    variables: &[String],
) -> Result<DVector<f64>, CliError> {
    let (header_line, header) = &rows[0];
    let mut var_cols = Vec::with_capacity(variables.len());
    for name in variables {
        let col = header.iter().position(|h| h == name).ok_or_else(|| {
            CliError::input(format!(
                "{} line {header_line}: header is missing variable column '{name}'",
                path.display()
            ))
        })?;
        var_cols.push(col);
    }
    let count_col = header.iter().position(|h| h == "count").ok_or_else(|| {
        CliError::input(format!(
            "{} line {header_line}: header is missing a 'count' column",
            path.display()
        ))
    })?;

    let mut values = DVector::zeros(schema.num_cells());
    for (line, fields) in &rows[1..] {
        let mut levels = Vec::with_capacity(variables.len());
        for (name, &col) in variables.iter().zip(&var_cols) {
            let raw = fields.get(col).map(String::as_str).unwrap_or("");
            let level: usize = raw.parse().map_err(|_| {
                CliError::input(format!(
                    "{} line {line}: level '{raw}' of variable '{name}' is not an integer",
                    path.display()
                ))
            })?;
            let bound = schema.dims()[levels.len()];
            if level >= bound {
                return Err(CliError::input(format!(
                    "{} line {line}: level {level} out of range for variable '{name}' ({bound} levels, numbered from 0)",
                    path.display()
                )));
            }
            levels.push(level);
        }
        let raw = fields.get(count_col).map(String::as_str).unwrap_or("");
        let count: f64 = raw.parse().map_err(|_| {
            CliError::input(format!(
                "{} line {line}: count '{raw}' is not a number",
                path.display()
            ))
        })?;
        if count < 0.0 || !count.is_finite() {
            return Err(CliError::input(format!(
                "{} line {line}: count {count} is negative",
                path.display()
            )));
        }
        values[schema.cell_index(&levels)] += count;
    }
    Ok(values)
}

/// Bare numeric rectangle, no header.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let rows = read_records(path)?;
    let ncols = rows[0].1.len();
    let mut data = Vec::with_capacity(rows.len() * ncols);
    for (line, fields) in &rows {
        if fields.len() != ncols {
            return Err(CliError::input(format!(
                "{} line {line}: expected {ncols} columns, found {}",
                path.display(),
                fields.len()
            )));
        }
        for field in fields {
            let v: f64 = field.parse().map_err(|_| {
                CliError::input(format!(
                    "{} line {line}: '{field}' is not a number",
                    path.display()
                ))
            })?;
            data.push(v);
        }
    }
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &data))
}
