//! Best-effort converters from simple exported matrices into the canonical
//! signal layouts.
//!
//! - WiFi CSI: a `60 x 180` amplitude matrix is used as is.
//! - UWB: `35 x 40` amplitude and phase matrices are stacked into `70 x 40`.
//! - mmWave: a list of 5-dimensional points becomes a `5 x 493` matrix,
//!   zero-padded over points, with the real point count kept.

use std::path::Path;

use super::MMWAVE_MAX_POINTS;
use crate::error::{Error, Result};

/// Parses rows of whitespace or comma separated numbers; `#` starts a comment.
/// Returns `(rows, cols, row-major values)`.
pub fn parse_matrix_text(text: &str, path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f32> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f32>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("`{t}` is not a finite number"),
                })
            })
            .collect::<Result<_>>()?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("row has {} values, earlier rows have {}", row.len(), cols.unwrap_or(0)),
            });
        }
        values.extend(row);
        rows += 1;
    }
    Ok((rows, cols.unwrap_or(0), values))
}

/// Stacks amplitude rows above phase rows.
pub fn import_uwb_amplitude_phase(amplitude: (usize, usize, &[f32]), phase: (usize, usize, &[f32])) -> Result<Vec<f32>> {
    if (amplitude.0, amplitude.1) != (35, 40) || (phase.0, phase.1) != (35, 40) {
        return Err(Error::Validation(format!(
            "UWB amplitude and phase must both be 35x40, got {}x{} and {}x{}",
            amplitude.0, amplitude.1, phase.0, phase.1
        )));
    }
    Ok(amplitude.2.iter().chain(phase.2).copied().collect())
}

/// Transposes `P` points of `(x, y, z, doppler, intensity)` into a padded
/// `5 x 493` matrix; returns the matrix and `P`.
pub fn import_mmwave_points(points: &[[f32; 5]]) -> Result<(Vec<f32>, usize)> {
    if points.len() > MMWAVE_MAX_POINTS {
        return Err(Error::Validation(format!(
            "{} mmWave points exceed the maximum of {MMWAVE_MAX_POINTS}",
            points.len()
        )));
    }
    let mut out = vec![0.0f32; 5 * MMWAVE_MAX_POINTS];
    for (p, point) in points.iter().enumerate() {
        for (d, &v) in point.iter().enumerate() {
            out[d * MMWAVE_MAX_POINTS + p] = v;
        }
    }
    Ok((out, points.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_mixed_separators() {
        let (r, c, v) = parse_matrix_text("1, 2 3\n# note\n4 5,6 # tail\n", Path::new("m.txt")).unwrap();
        assert_eq!((r, c, v), (2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    }

    #[test]
    fn ragged_rows_name_file_and_line() {
        match parse_matrix_text("1 2\n3\n", Path::new("m.txt")) {
            Err(Error::Parse { path, line, .. }) => assert_eq!((path.to_str().unwrap(), line), ("m.txt", 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn uwb_stacks_to_70_rows() {
        let a = vec![1.0; 35 * 40];
        let p = vec![2.0; 35 * 40];
        let out = import_uwb_amplitude_phase((35, 40, &a), (35, 40, &p)).unwrap();
        assert_eq!(out.len(), 70 * 40);
        assert_eq!((out[35 * 40 - 1], out[35 * 40]), (1.0, 2.0));
        assert!(import_uwb_amplitude_phase((35, 41, &a), (35, 40, &p)).is_err());
    }

    #[test]
    fn mmwave_points_are_transposed_and_padded() {
        let (m, n) = import_mmwave_points(&[[1.0, 2.0, 3.0, 4.0, 5.0], [6.0, 7.0, 8.0, 9.0, 10.0]]).unwrap();
        assert_eq!(n, 2);
        assert_eq!((m[0], m[1], m[2]), (1.0, 6.0, 0.0));
        assert_eq!(m[4 * MMWAVE_MAX_POINTS + 1], 10.0);
        assert!(import_mmwave_points(&vec![[0.0; 5]; 494]).is_err());
    }
}
