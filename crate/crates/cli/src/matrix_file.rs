//! Plain-text matrix files: a `rows cols` line followed by one line of
//! row-major values per row. Values use the shortest round-trip decimal form,
//! so a write followed by a read is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use pglqg::Mat;

use crate::CliError;

pub fn format_matrix(m: &Mat) -> String {
    let mut s = format!("{} {}\n", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn parse_matrix(text: &str) -> Result<Mat, String> {
    let mut tokens = text.split_whitespace();
    let mut dim = |what: &str| -> Result<usize, String> {
        tokens
            .next()
            .ok_or_else(|| format!("missing {what} count"))?
            .parse::<usize>()
            .map_err(|e| format!("bad {what} count: {e}"))
    };
    let rows = dim("row")?;
    let cols = dim("column")?;
    let values = tokens
        .map(|t| t.parse::<f64>().map_err(|e| format!("bad value {t:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != rows * cols {
        return Err(format!("expected {} values for a {rows}x{cols} matrix, found {}", rows * cols, values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err("non-finite value".into());
    }
    Ok(Mat::from_row_slice(rows, cols, &values))
}

pub fn write_matrix(path: &Path, m: &Mat) -> Result<(), CliError> {
    std::fs::write(path, format_matrix(m)).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_matrix(path: &Path) -> Result<Mat, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_matrix(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Mat::from_row_slice(2, 3, &[0.1, -1.0 / 3.0, 1e-300, f64::MAX, -0.0, 5e-324]);
        let back = parse_matrix(&format_matrix(&m)).unwrap();
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_wrong_count() {
        assert!(parse_matrix("2 2\n1 2 3\n").is_err());
        assert!(parse_matrix("").is_err());
    }
}
