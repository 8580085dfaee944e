//! Plain-text dataset container.
//!
//! ```text
//! # ocs-dataset v1
//! name hierarchy-d3-b2
//! bias_augmented false
//! slices 0:1 1:3 3:7 7:15
//! x 8 8
//! 1 0 0 0 0 0 0 0
//! ...
//! y 15 8
//! ...
//! ```
//!
//! Matrices are row-major, whitespace separated. Values are written with the
//! shortest representation that round-trips, so save/load is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Dataset, LevelSlice};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const HEADER: &str = "# ocs-dataset v1";

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_dataset(d))?;
    Ok(())
}

pub fn format_dataset(d: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER}");
    let _ = writeln!(out, "name {}", d.name);
    let _ = writeln!(out, "bias_augmented {}", d.bias_augmented);
    let slices: Vec<String> = d
        .level_slices
        .iter()
        .map(|(s, e)| format!("{s}:{e}"))
        .collect();
    let _ = writeln!(out, "slices {}", slices.join(" "));
    write_matrix(&mut out, "x", &d.x);
    write_matrix(&mut out, "y", &d.y);
    out
}

fn write_matrix(out: &mut String, tag: &str, m: &Matrix) {
    let _ = writeln!(out, "{tag} {} {}", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

/// Load a dataset file. `slices`, when given, replaces the slices stored in
/// the file; a file without slices and no override gets a single level.
pub fn load_dataset(path: impl AsRef<Path>, slices: Option<&[LevelSlice]>) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, slices)
}

pub fn parse_dataset(text: &str, slices: Option<&[LevelSlice]>) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .peekable();

    let mut name = String::from("unnamed");
    let mut bias_augmented = false;
    let mut file_slices: Option<Vec<LevelSlice>> = None;
    let mut x: Option<Matrix> = None;
    let mut y: Option<Matrix> = None;

    while let Some((line_no, line)) = lines.next() {
        let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        match key {
            "name" => name = rest.to_string(),
            "bias_augmented" => {
                bias_augmented = rest.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("expected true/false, got `{rest}`"),
                })?
            }
            "slices" => file_slices = Some(parse_slices(rest, line_no)?),
            "x" | "y" => {
                let (rows, cols) = parse_shape(rest, line_no)?;
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let (row_line, row) = lines.next().ok_or_else(|| Error::Parse {
                        line: line_no,
                        message: format!("matrix {key} ends after {r} of {rows} rows"),
                    })?;
                    let values = row
                        .split_whitespace()
                        .map(|tok| {
                            tok.parse::<f64>().map_err(|_| Error::Parse {
                                line: row_line,
                                message: format!("invalid number `{tok}`"),
                            })
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    if values.len() != cols {
                        return Err(Error::Parse {
                            line: row_line,
                            message: format!(
                                "ragged row in matrix {key}: {} values, expected {cols}",
                                values.len()
                            ),
                        });
                    }
                    data.extend(values);
                }
                let m = Matrix::from_row_slice(rows, cols, &data);
                if key == "x" {
                    x = Some(m);
                } else {
                    y = Some(m);
                }
            }
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unknown key `{other}`"),
                })
            }
        }
    }

    let x = x.ok_or_else(|| Error::Parse {
        line: 0,
        message: "missing matrix x".into(),
    })?;
    let y = y.ok_or_else(|| Error::Parse {
        line: 0,
        message: "missing matrix y".into(),
    })?;
    let slices = match (slices, file_slices) {
        (Some(s), _) => s.to_vec(),
        (None, Some(s)) => s,
        (None, None) => vec![(0, y.nrows())],
    };
    Dataset::new(name, x, y, slices, bias_augmented)
}

fn parse_shape(rest: &str, line: usize) -> Result<(usize, usize)> {
    let dims: Vec<&str> = rest.split_whitespace().collect();
    let parse = |s: &str| {
        s.parse::<usize>().map_err(|_| Error::Parse {
            line,
            message: format!("invalid dimension `{s}`"),
        })
    };
    match dims.as_slice() {
        [r, c] => Ok((parse(r)?, parse(c)?)),
        _ => Err(Error::Parse {
            line,
            message: "matrix header needs `<rows> <cols>`".into(),
        }),
    }
}

pub(crate) fn parse_slices(rest: &str, line: usize) -> Result<Vec<LevelSlice>> {
    rest.split_whitespace()
        .map(|tok| {
            let parsed = tok
                .split_once(':')
                .and_then(|(s, e)| Some((s.parse().ok()?, e.parse().ok()?)));
            parsed.ok_or_else(|| Error::Parse {
                line,
                message: format!("invalid slice `{tok}`, expected start:end"),
            })
        })
        .collect()
}

/// Write a matrix as CSV, one matrix row per record.
pub fn write_matrix_csv(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}
