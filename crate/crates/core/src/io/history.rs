use std::fmt::Write as _;
use std::path::Path;

use super::{write_atomic, IoError};
use crate::optimizer::{HistoryRecord, OptimizationHistory};

pub const HISTORY_HEADER: &str = "iter,objective,energy,penalized_energy,volume,volume_error,gummel_iters,wall_time_s";

/// One row per record. Floats use the shortest plain decimal that parses
/// back to the same value.
pub fn write_history_csv(path: &Path, history: &OptimizationHistory) -> Result<(), IoError> {
    if history.is_empty() {
        return Err(IoError::EmptyHistory);
    }
    let mut s = String::with_capacity(96 * (history.len() + 1));
    s.push_str(HISTORY_HEADER);
    s.push('\n');
    for r in &history.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.iter, r.objective, r.energy, r.penalized_energy, r.volume, r.volume_error, r.gummel_iters, r.wall_time_s
        );
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_history_csv(path: &Path) -> Result<OptimizationHistory, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let bad = |line: usize, message: String| IoError::Format { path: path.to_path_buf(), message: format!("line {line}: {message}") };
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(bad(1, "unexpected header".into()));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(bad(i + 2, format!("expected 8 columns, found {}", cols.len())));
        }
        let f = |k: usize| cols[k].parse::<f64>().map_err(|e| bad(i + 2, format!("column {}: {e}", k + 1)));
        let u = |k: usize| cols[k].parse::<usize>().map_err(|e| bad(i + 2, format!("column {}: {e}", k + 1)));
        records.push(HistoryRecord {
            iter: u(0)?,
            objective: f(1)?,
            energy: f(2)?,
            penalized_energy: f(3)?,
            volume: f(4)?,
            volume_error: f(5)?,
            gummel_iters: u(6)?,
            wall_time_s: f(7)?,
        });
    }
    Ok(OptimizationHistory { records })
}
