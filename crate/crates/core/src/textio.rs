//! Shared helpers for the line-oriented text formats.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};

/// 17 significant digits, enough for an exact `f64` round trip.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Non-empty, non-comment lines with 1-based line numbers.
pub fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            None
        } else {
            Some((i + 1, l.split_whitespace().collect()))
        }
    })
}

pub fn field<T: FromStr>(fields: &[&str], idx: usize, line: usize, name: &str) -> Result<T> {
    let raw = fields
        .get(idx)
        .ok_or_else(|| Error::parse(line, format!("missing field `{name}`")))?;
    raw.parse()
        .map_err(|_| Error::parse(line, format!("cannot parse `{name}` from `{raw}`")))
}

pub fn expect_arity(fields: &[&str], n: usize, line: usize) -> Result<()> {
    if fields.len() != n {
        return Err(Error::parse(
            line,
            format!("expected {n} fields for `{}`, found {}", fields[0], fields.len()),
        ));
    }
    Ok(())
}

/// `MAT <rows> <cols>` followed by one line per row.
pub fn write_matrix(m: &Array2<f64>) -> String {
    let mut out = format!("MAT {} {}\n", m.nrows(), m.ncols());
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn read_matrix(text: &str) -> Result<Array2<f64>> {
    let mut recs = records(text);
    let (line, header) = recs
        .next()
        .ok_or_else(|| Error::parse(1, "empty matrix file"))?;
    if header[0] != "MAT" {
        return Err(Error::parse(line, "expected `MAT <rows> <cols>` header"));
    }
    expect_arity(&header, 3, line)?;
    let rows: usize = field(&header, 1, line, "rows")?;
    let cols: usize = field(&header, 2, line, "cols")?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (line, fields) in recs {
        if fields.len() != cols {
            return Err(Error::parse(
                line,
                format!("expected {cols} values, found {}", fields.len()),
            ));
        }
        for (k, _) in fields.iter().enumerate() {
            let v: f64 = field(&fields, k, line, "value")?;
            if !v.is_finite() {
                return Err(Error::parse(line, "non-finite matrix entry"));
            }
            data.push(v);
        }
        seen += 1;
    }
    if seen != rows {
        return Err(Error::parse(
            text.lines().count(),
            format!("expected {rows} rows, found {seen}"),
        ));
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matrix_roundtrip_is_exact() {
        let m = array![[0.1, -2.5e-300], [1.0 / 3.0, 7.0]];
        let back = read_matrix(&write_matrix(&m)).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn matrix_row_count_checked() {
        let err = read_matrix("MAT 2 1\n0.5\n").unwrap_err();
        assert!(err.to_string().contains("expected 2 rows"));
    }

    #[test]
    fn ragged_row_reports_line() {
        let err = read_matrix("MAT 2 2\n1 2\n3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }
}
