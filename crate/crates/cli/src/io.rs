//! CSV input, atomic output.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::CliError;

/// Reads a headerless numeric CSV with one row per observation.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let shown = path.display();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{shown}: {e}")))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let row = index + 1;
        let record = record.map_err(|e| CliError::Input(format!("{shown}: row {row}: {e}")))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(col, field)| {
                field.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    CliError::Input(format!(
                        "{shown}: row {row}, column {}: `{field}` is not a finite number",
                        col + 1
                    ))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if values.len() != first.len() {
                return Err(CliError::Input(format!(
                    "{shown}: row {row} has {} columns, expected {}",
                    values.len(),
                    first.len()
                )));
            }
        }
        rows.push(values);
    }
    let Some(first) = rows.first() else {
        return Err(CliError::Input(format!("{shown}: no data rows")));
    };
    let cols = first.len();
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Reads a single-column CSV.
pub fn read_vector(path: &Path) -> Result<DVector<f64>, CliError> {
    let m = read_matrix(path)?;
    if m.ncols() != 1 {
        return Err(CliError::Input(format!(
            "{}: expected one column, found {}",
            path.display(),
            m.ncols()
        )));
    }
    Ok(m.column(0).into_owned())
}

/// One value per line under `header`.
pub fn vector_csv(header: &str, v: &DVector<f64>) -> String {
    let mut out = format!("{header}\n");
    for x in v.iter() {
        out.push_str(&format!("{x}\n"));
    }
    out
}

/// Rows of `m` under the header `prefix1,...,prefixk`.
pub fn matrix_csv(prefix: &str, m: &DMatrix<f64>) -> String {
    let header: Vec<String> = (1..=m.ncols()).map(|j| format!("{prefix}{j}")).collect();
    let mut out = header.join(",") + "\n";
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let io_err = |e: std::io::Error| CliError::Input(format!("{}: {e}", path.display()));
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("output");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let mut file = fs::File::create(&tmp).map_err(io_err)?;
    file.write_all(contents.as_bytes()).map_err(io_err)?;
    file.sync_all().map_err(io_err)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(e)
    })
}
