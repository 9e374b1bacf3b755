//! Sweep rows and their CSV / JSON encodings.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::AppError;

/// CSV column order; fixed.
pub const CSV_HEADER: [&str; 11] =
    ["sweep_var", "value", "loss_theory", "loss_mc_mean", "loss_mc_stderr", "init", "n", "d", "k", "sigma", "seed"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub sweep_var: String,
    pub value: f64,
    /// Empty when no formula covers the configuration.
    pub loss_theory: Option<f64>,
    pub loss_mc_mean: f64,
    pub loss_mc_stderr: f64,
    /// Initialisation, or the curve label in figure sweeps.
    pub init: String,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = AppError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(AppError::Usage(format!("unknown format `{s}` (csv or json)"))),
        }
    }
}

/// 17 significant digits.
fn float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv<W: Write>(out: W, records: &[SweepRecord]) -> Result<(), AppError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let csv_err = |e: csv::Error| AppError::Usage(format!("writing CSV: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.sweep_var.clone(),
            float(r.value),
            r.loss_theory.map(float).unwrap_or_default(),
            float(r.loss_mc_mean),
            float(r.loss_mc_stderr),
            r.init.clone(),
            r.n.to_string(),
            r.d.to_string(),
            r.k.to_string(),
            float(r.sigma),
            r.seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(mut out: W, records: &[SweepRecord]) -> Result<(), AppError> {
    serde_json::to_writer_pretty(&mut out, records).map_err(|e| AppError::Usage(format!("writing JSON: {e}")))?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_records<W: Write>(out: W, records: &[SweepRecord], format: Format) -> Result<(), AppError> {
    match format {
        Format::Csv => write_csv(out, records),
        Format::Json => write_json(out, records),
    }
}

/// Writes to `path`, or stdout when `path` is `None`.
pub fn emit(path: Option<&Path>, records: &[SweepRecord], format: Format) -> Result<(), AppError> {
    match path {
        Some(p) => {
            let file = std::fs::File::create(p).map_err(|e| AppError::Usage(format!("cannot write {}: {e}", p.display())))?;
            write_records(std::io::BufWriter::new(file), records, format)
        }
        None => write_records(std::io::stdout().lock(), records, format),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(theory: Option<f64>) -> SweepRecord {
        SweepRecord {
            sweep_var: "k".into(),
            value: 2.0,
            loss_theory: theory,
            loss_mc_mean: 0.1,
            loss_mc_stderr: 0.0,
            init: "zero".into(),
            n: 4,
            d: 3,
            k: 2,
            sigma: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn csv_round_trips_floats() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[rec(Some(1.0 / 3.0)), rec(None)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.split('\n').collect();
        assert_eq!(lines[0], CSV_HEADER.join(","));
        let theory: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(theory, 1.0 / 3.0);
        assert_eq!(lines[2].split(',').nth(2).unwrap(), "");
        assert!(!text.contains('\r'));
    }

    #[test]
    fn json_uses_null_for_missing_theory() {
        let mut buf = Vec::new();
        write_json(&mut buf, &[rec(None)]).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert!(v[0]["loss_theory"].is_null());
        assert_eq!(v[0]["seed"], 7);
    }
}
