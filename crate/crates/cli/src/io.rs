//! Locale-independent CSV with full double precision, and pretty JSON.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use phred::phcore::Trajectory;
use serde::Serialize;

use crate::CliError;

/// Scientific notation with 17 significant digits; round-trips every f64.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn csv_string(header: &[String], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    std::fs::write(path, csv_string(header, rows)).map_err(|e| io_err(path, e))
}

/// One row per matrix row, columns `c0, c1, …`.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<(), CliError> {
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("c{j}")).collect();
    let rows: Vec<Vec<String>> = m.row_iter().map(|r| r.iter().map(|&v| num(v)).collect()).collect();
    write_csv(path, &header, &rows)
}

/// Columns `t, x0…, y0…, u0…`, one row per grid point.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut header = vec!["t".to_string()];
    header.extend((0..traj.states.nrows()).map(|i| format!("x{i}")));
    header.extend((0..traj.outputs.nrows()).map(|i| format!("y{i}")));
    header.extend((0..traj.inputs.nrows()).map(|i| format!("u{i}")));
    let mut s = header.join(",");
    s.push('\n');
    for (k, &t) in traj.times.iter().enumerate() {
        s.push_str(&num(t));
        for m in [&traj.states, &traj.outputs, &traj.inputs] {
            for v in m.column(k).iter() {
                let _ = write!(s, ",{}", num(*v));
            }
        }
        s.push('\n');
    }
    s
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), CliError> {
    std::fs::write(path, trajectory_csv(traj)).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, 0.0] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(1.5), "1.5000000000000000e0");
    }

    #[test]
    fn csv_layout() {
        let s = csv_string(&["a".into(), "b".into()], &[vec!["1".into(), "2".into()]]);
        assert_eq!(s, "a,b\n1,2\n");
    }
}
