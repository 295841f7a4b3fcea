use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{GgmError, Result};
use crate::numkit::matrix::DenseMatrix;
use crate::scalar::Real;

fn csv_err(path: &Path, e: impl std::fmt::Display) -> GgmError {
    GgmError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Headerless CSV, one matrix row per line.
pub fn write_matrix_csv<T: Real, W: Write>(m: &DenseMatrix<T>, out: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<T: Real, R: Read>(input: R) -> std::result::Result<DenseMatrix<T>, String> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows: Vec<Vec<T>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map(T::lit)
                    .map_err(|e| format!("bad number {f:?}: {e}"))
            })
            .collect::<std::result::Result<Vec<T>, String>>()?;
        rows.push(row);
    }
    let m = DenseMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
    if !m.is_finite() {
        return Err("non-finite entry".into());
    }
    Ok(m)
}

pub fn save_matrix<T: Real>(m: &DenseMatrix<T>, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|source| GgmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_matrix_csv(m, f).map_err(|e| csv_err(path, e))
}

pub fn load_matrix<T: Real>(path: &Path) -> Result<DenseMatrix<T>> {
    let f = File::open(path).map_err(|source| GgmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_matrix_csv(f).map_err(|e| csv_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let m = DenseMatrix::from_fn(rows, cols, |i, j| {
                let x = (seed ^ ((i * 31 + j) as u64)).wrapping_mul(0x9E3779B97F4A7C15) as f64;
                x / 7.0e17 - 3.3
            });
            let mut buf = Vec::new();
            write_matrix_csv(&m, &mut buf).unwrap();
            let back: DenseMatrix<f64> = read_matrix_csv(&buf[..]).unwrap();
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn ragged_rows_are_an_error() {
        let r: std::result::Result<DenseMatrix<f64>, _> = read_matrix_csv("1,2\n3\n".as_bytes());
        assert!(r.is_err());
    }
}
