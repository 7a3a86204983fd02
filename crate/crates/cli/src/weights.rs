//! Weight matrix specifications on the command line.
//!
//! `identity`, `zero`, `scaled:K`, `diag:a,b,...` or `file:PATH`, where the
//! file holds a full square matrix or a single column read as a diagonal.

use std::path::Path;

use nalgebra::DMatrix;
use tunedreg::PsdMatrix;

use crate::io::read_matrix;
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum WeightSpec {
    Identity,
    Zero,
    Scaled(f64),
    Diagonal(Vec<f64>),
    File(String),
}

impl std::str::FromStr for WeightSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let number = |v: &str| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("`{v}` is not a finite number"))
        };
        match s.split_once(':') {
            None if s == "identity" => Ok(WeightSpec::Identity),
            None if s == "zero" => Ok(WeightSpec::Zero),
            Some(("scaled", k)) => number(k).map(WeightSpec::Scaled),
            Some(("diag", list)) => list.split(',').map(number).collect::<Result<_, _>>().map(WeightSpec::Diagonal),
            Some(("file", path)) if !path.is_empty() => Ok(WeightSpec::File(path.to_string())),
            _ => Err(format!(
                "unknown weight `{s}` (expected identity, zero, scaled:K, diag:a,b,... or file:PATH)"
            )),
        }
    }
}

impl WeightSpec {
    /// The `dim x dim` matrix, checking the size of explicit entries.
    pub fn build(&self, dim: usize, what: &str) -> Result<PsdMatrix, CliError> {
        let matrix = match self {
            WeightSpec::Identity => DMatrix::identity(dim, dim),
            WeightSpec::Zero => DMatrix::zeros(dim, dim),
            WeightSpec::Scaled(k) => DMatrix::identity(dim, dim) * *k,
            WeightSpec::Diagonal(values) => {
                check_len(what, dim, values.len())?;
                DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(values))
            }
            WeightSpec::File(path) => {
                let m = read_matrix(Path::new(path))?;
                if m.ncols() == 1 {
                    check_len(what, dim, m.nrows())?;
                    DMatrix::from_diagonal(&m.column(0).into_owned())
                } else if m.nrows() == dim && m.ncols() == dim {
                    m
                } else {
                    return Err(CliError::Input(format!(
                        "{what} weight from {path} is {}x{}, expected {dim}x{dim} or a column of {dim}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
            }
        };
        PsdMatrix::new(matrix).map_err(|e| CliError::Input(format!("{what} weight: {e}")))
    }
}

fn check_len(what: &str, expected: usize, found: usize) -> Result<(), CliError> {
    if expected == found {
        Ok(())
    } else {
        Err(CliError::Input(format!("{what} weight has {found} entries, expected {expected}")))
    }
}
