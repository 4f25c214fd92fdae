use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::experiment::{run_experiment, ExperimentReport, SeedFailure};
use super::metrics::RecordWriter;

/// One swept config key and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl SweepAxis {
    pub fn new(key: &str, values: &[&str]) -> Self {
        SweepAxis {
            key: key.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }

    /// Parses `key=v1,v2,...`.
    pub fn parse(text: &str) -> Result<Self> {
        let (key, values) = text
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("axis `{text}` is not key=v1,v2")))?;
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(Error::Config(format!("axis `{key}` has no values")));
        }
        Ok(SweepAxis { key: key.trim().to_string(), values })
    }
}

/// Cartesian product of the axes; the first axis varies slowest.
pub fn sweep_points(base: &ExperimentConfig, axes: &[SweepAxis]) -> Result<Vec<ExperimentConfig>> {
    if axes.is_empty() {
        return Err(Error::Config("sweep needs at least one axis".into()));
    }
    let mut points = vec![base.clone()];
    for axis in axes {
        if axis.values.is_empty() {
            return Err(Error::Config(format!("axis `{}` has no values", axis.key)));
        }
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for p in &points {
            for v in &axis.values {
                let mut cfg = p.clone();
                cfg.set(&axis.key, v)?;
                next.push(cfg);
            }
        }
        points = next;
    }
    for p in &points {
        p.validate()?;
    }
    Ok(points)
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub rows: usize,
    pub failures: Vec<(usize, SeedFailure)>,
}

/// Runs every point and seed, writing rows in point order. Points are
/// evaluated in parallel batches and each batch is flushed before the next
/// starts, so an abort keeps every completed batch on disk.
pub fn run_sweep<W: Write>(base: &ExperimentConfig, axes: &[SweepAxis], out: W) -> Result<SweepReport> {
    let points = sweep_points(base, axes)?;
    let mut writer = RecordWriter::new(out)?;
    let batch = rayon::current_num_threads().max(1);
    let mut report = SweepReport::default();
    for (b, chunk) in points.chunks(batch).enumerate() {
        let results: Vec<Result<ExperimentReport>> = chunk.par_iter().map(run_experiment).collect();
        for (i, r) in results.into_iter().enumerate() {
            let r = r?;
            for rec in &r.records {
                writer.write(rec)?;
                report.rows += 1;
            }
            report
                .failures
                .extend(r.failures.into_iter().map(|f| (b * batch + i, f)));
        }
        writer.flush()?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        let a = SweepAxis::parse("zeta=0.0625, 0.125,0.25").unwrap();
        assert_eq!(a.key, "zeta");
        assert_eq!(a.values.len(), 3);
        assert!(SweepAxis::parse("zeta").is_err());
        assert!(SweepAxis::parse("zeta=").is_err());
    }

    #[test]
    fn product_order_and_size() {
        let axes = [
            SweepAxis::new("zeta", &["0.0625", "0.125", "0.25", "0.5"]),
            SweepAxis::new("method", &["federated", "first_k", "top_k", "multilink"]),
        ];
        let pts = sweep_points(&ExperimentConfig::default(), &axes).unwrap();
        assert_eq!(pts.len(), 16);
        assert_eq!(pts[0].zeta, 0.0625);
        assert_eq!(pts[1].zeta, 0.0625);
        assert_eq!(pts[4].zeta, 0.125);
        assert!(sweep_points(&ExperimentConfig::default(), &[]).is_err());
        assert!(sweep_points(&ExperimentConfig::default(), &[SweepAxis::new("bogus", &["1"])]).is_err());
    }
}
