use std::path::Path;

use modal_core::signal_model::MeasurementWindow;
use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};

/// Maximum deviation of any timestamp step from the median step.
pub const SPACING_TOLERANCE: f64 = 1e-6;

/// Reads a `t,ch0,ch1,…` file into a window, inferring `fs` from the median
/// spacing. The raw timestamps come back alongside.
pub fn read_window(path: &Path) -> CliResult<(MeasurementWindow, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::csv(path, e))?;
    let header = reader.headers().map_err(|e| CliError::csv(path, e))?.clone();
    if header.len() < 2 || header.get(0) != Some("t") {
        return Err(CliError::validation(format!(
            "{}: header must start with \"t\" followed by at least one channel",
            path.display()
        )));
    }
    let channels = header.len() - 1;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::csv(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        for (i, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| CliError::validation(format!("{}:{line}: bad number {field:?}", path.display())))?;
            if i == 0 {
                times.push(v);
            } else {
                values.push(v);
            }
        }
    }
    if times.len() < 2 {
        return Err(CliError::validation(format!("{}: need at least two samples", path.display())));
    }
    let fs = 1.0 / uniform_step(&times).map_err(|m| CliError::validation(format!("{}: {m}", path.display())))?;
    let samples = DMatrix::from_fn(channels, times.len(), |c, k| values[k * channels + c]);
    let window = MeasurementWindow::new(samples, fs, times[0])?;
    Ok((window, times))
}

fn uniform_step(times: &[f64]) -> Result<f64, String> {
    let mut steps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let mut sorted = steps.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    if median <= 0.0 {
        return Err("timestamps must increase".into());
    }
    if let Some((k, step)) = steps
        .drain(..)
        .enumerate()
        .find(|(_, s)| (s - median).abs() > SPACING_TOLERANCE)
    {
        return Err(format!(
            "non-uniform timestamps: step {k} is {step} s, median spacing {median} s"
        ));
    }
    Ok(median)
}

/// Writes one `t,ch0,…` row per column of `curves`.
pub fn write_curves(path: &Path, times: &[f64], curves: &DMatrix<f64>) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let mut header = vec!["t".to_string()];
    header.extend((0..curves.nrows()).map(|c| format!("ch{c}")));
    writer.write_record(&header).map_err(|e| CliError::csv(path, e))?;
    for (k, t) in times.iter().enumerate().take(curves.ncols()) {
        let mut row = vec![t.to_string()];
        row.extend(curves.column(k).iter().map(|v| v.to_string()));
        writer.write_record(&row).map_err(|e| CliError::csv(path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_is_median_spacing() {
        let t: Vec<f64> = (0..10).map(|k| k as f64 / 30.0).collect();
        assert!((uniform_step(&t).unwrap() - 1.0 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn gaps_are_rejected() {
        let mut t: Vec<f64> = (0..10).map(|k| k as f64 / 30.0).collect();
        t[5] += 1e-3;
        assert!(uniform_step(&t).is_err());
        assert!(uniform_step(&[1.0, 0.5, 0.0]).is_err());
    }
}
