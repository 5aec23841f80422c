//! Plain-text matrix files and CSV emission.
//!
//! Matrix format: first line `rows cols`, then row-major whitespace-separated
//! values, extension `.mtx.txt`. All numbers are written with 17 significant
//! digits so files round-trip f64 exactly and reruns diff clean.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lti::StateSpaceModel;

/// 17 significant digits, enough to reproduce any f64 bit pattern.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| fmt_num(m[(r, c)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let loc = || path.display().to_string();
    let mut tokens = text.split_whitespace();
    let rows: usize = tokens
        .next()
        .ok_or_else(|| Error::parse(loc(), "empty file"))?
        .parse()
        .map_err(|_| Error::parse(loc(), "header must start with the row count"))?;
    let cols: usize = tokens
        .next()
        .ok_or_else(|| Error::parse(loc(), "header missing the column count"))?
        .parse()
        .map_err(|_| Error::parse(loc(), "header must end with the column count"))?;
    let mut values = Vec::with_capacity(rows * cols);
    for tok in tokens.by_ref().take(rows * cols) {
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::parse(loc(), format!("not a number: {tok:?}")))?;
        values.push(v);
    }
    if values.len() != rows * cols {
        return Err(Error::parse(
            loc(),
            format!("expected {} values, found {}", rows * cols, values.len()),
        ));
    }
    if tokens.next().is_some() {
        return Err(Error::parse(loc(), "trailing data after the last value"));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_vector(path: impl AsRef<Path>, v: &DVector<f64>) -> Result<()> {
    write_matrix(path, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<DVector<f64>> {
    let m = read_matrix(&path)?;
    if m.ncols() != 1 && m.nrows() != 1 {
        return Err(Error::parse(
            path.as_ref().display().to_string(),
            format!("expected a vector, got {}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(DVector::from_iterator(m.len(), m.iter().cloned()))
}

fn triple_path(prefix: &Path, part: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push('.');
    name.push_str(part);
    name.push_str(".mtx.txt");
    prefix.with_file_name(name)
}

/// Writes `<prefix>.a.mtx.txt`, `<prefix>.b.mtx.txt`, `<prefix>.c.mtx.txt`.
pub fn write_plant_triple(prefix: impl AsRef<Path>, model: &StateSpaceModel) -> Result<()> {
    let prefix = prefix.as_ref();
    write_matrix(triple_path(prefix, "a"), model.a())?;
    write_matrix(triple_path(prefix, "b"), model.b())?;
    write_matrix(triple_path(prefix, "c"), model.c())
}

/// Reads a plant from a `.a/.b/.c.mtx.txt` triple. A `.d.mtx.txt` alongside
/// is rejected: the simulation has no feedthrough path and ignoring the file
/// would silently change the model.
pub fn read_plant_triple(prefix: impl AsRef<Path>) -> Result<StateSpaceModel> {
    let prefix = prefix.as_ref();
    let d_path = triple_path(prefix, "d");
    if d_path.exists() {
        return Err(Error::parse(
            d_path.display().to_string(),
            "feedthrough matrices are not supported; remove the .d.mtx.txt file",
        ));
    }
    let a = read_matrix(triple_path(prefix, "a"))?;
    let b = read_matrix(triple_path(prefix, "b"))?;
    let c = read_matrix(triple_path(prefix, "c"))?;
    StateSpaceModel::new(a, b, c)
}

/// Writes a CSV with a header row; every cell rendered by `fmt_num`.
pub fn write_csv<I>(path: impl AsRef<Path>, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let path = path.as_ref();
    let mut out = String::new();
    let _ = writeln!(out, "{}", header.join(","));
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&x| fmt_num(x)).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes a CSV whose rows mix preformatted text cells and numbers.
pub fn write_csv_text<I>(path: impl AsRef<Path>, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let path = path.as_ref();
    let mut out = String::new();
    let _ = writeln!(out, "{}", header.join(","));
    for row in rows {
        let _ = writeln!(out, "{}", row.join(","));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a numeric CSV. The first line is taken as a header if any of its
/// fields fails to parse as a number; otherwise it is data and column names
/// are synthesized. Returns (column names, column-major data).
pub fn read_csv_columns(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let loc = || path.display().to_string();
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
    let first = lines.peek().ok_or_else(|| Error::parse(loc(), "empty file"))?;
    let first_fields: Vec<&str> = first.split(',').map(str::trim).collect();
    let has_header = first_fields.iter().any(|f| f.parse::<f64>().is_err());
    let names: Vec<String> = if has_header {
        let names = first_fields.iter().map(|s| s.to_string()).collect();
        lines.next();
        names
    } else {
        (0..first_fields.len()).map(|i| format!("c{i}")).collect()
    };
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != names.len() {
            return Err(Error::parse(
                loc(),
                format!(
                    "row {} has {} fields, header has {}",
                    lineno + 1,
                    fields.len(),
                    names.len()
                ),
            ));
        }
        for (col, field) in fields.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(loc(), format!("not a number: {field:?}")))?;
            columns[col].push(v);
        }
    }
    if columns.iter().any(|c| c.is_empty()) {
        return Err(Error::parse(loc(), "no data rows"));
    }
    Ok((names, columns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("modal-alloc-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn matrix_round_trip_is_exact() {
        let m = dmatrix![
            1.0, -2.5e-17, std::f64::consts::PI;
            f64::MIN_POSITIVE, 4.0 / 3.0, -1e300;
        ];
        let path = tmp("round.mtx.txt");
        write_matrix(&path, &m).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(m, back);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("2 3\n"));
    }

    #[test]
    fn malformed_matrix_files_are_named_in_errors() {
        let path = tmp("bad.mtx.txt");
        fs::write(&path, "2 2\n1 2 3\n").unwrap();
        match read_matrix(&path) {
            Err(Error::Parse { path: p, .. }) => assert!(p.contains("bad.mtx.txt")),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&path, "2 2\n1 2 3 nope\n").unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Parse { .. })));
        fs::write(&path, "2 2\n1 2 3 4 5\n").unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn plant_triple_round_trip_and_feedthrough_rejection() {
        let model = StateSpaceModel::new(
            dmatrix![-1.0, 0.5; 0.0, -2.0],
            dmatrix![1.0; 0.3],
            dmatrix![1.0, 0.0],
        )
        .unwrap();
        let prefix = tmp("plant");
        write_plant_triple(&prefix, &model).unwrap();
        let back = read_plant_triple(&prefix).unwrap();
        assert_eq!(model.a(), back.a());
        assert_eq!(model.b(), back.b());
        assert_eq!(model.c(), back.c());

        write_matrix(tmp("plant.d.mtx.txt"), &dmatrix![0.0]).unwrap();
        match read_plant_triple(&prefix) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("feedthrough")),
            other => panic!("expected rejection, got {other:?}"),
        }
        fs::remove_file(tmp("plant.d.mtx.txt")).unwrap();
    }

    #[test]
    fn csv_header_detection() {
        let path = tmp("sig.csv");
        fs::write(&path, "t,value\n0.0,1.0\n0.1,0.5\n").unwrap();
        let (names, cols) = read_csv_columns(&path).unwrap();
        assert_eq!(names, vec!["t", "value"]);
        assert_eq!(cols[1], vec![1.0, 0.5]);

        fs::write(&path, "0.0,1.0\n0.1,0.5\n").unwrap();
        let (names, cols) = read_csv_columns(&path).unwrap();
        assert_eq!(names, vec!["c0", "c1"]);
        assert_eq!(cols[0], vec![0.0, 0.1]);
    }

    #[test]
    fn csv_written_numbers_parse_back() {
        let path = tmp("nums.csv");
        write_csv(
            &path,
            &["a".into(), "b".into()],
            vec![vec![1.0 / 3.0, -2e-9], vec![0.0, 1e17]],
        )
        .unwrap();
        let (_, cols) = read_csv_columns(&path).unwrap();
        assert_eq!(cols[0], vec![1.0 / 3.0, 0.0]);
        assert_eq!(cols[1], vec![-2e-9, 1e17]);
    }

    #[test]
    fn ragged_csv_rejected() {
        let path = tmp("ragged.csv");
        fs::write(&path, "a,b\n1.0,2.0\n3.0\n").unwrap();
        assert!(matches!(read_csv_columns(&path), Err(Error::Parse { .. })));
    }
}
