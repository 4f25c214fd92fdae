use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::semantic::Heterogeneity;

use super::config::Method;
use super::metrics::MetricsRecord;

/// Mean and sample standard deviation across seeds of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    #[serde(rename = "L")]
    pub users: usize,
    #[serde(rename = "K")]
    pub uses: usize,
    #[serde(rename = "N_T")]
    pub n_t: usize,
    #[serde(rename = "N_R")]
    pub n_r: usize,
    pub snr_db: f64,
    pub zeta: f64,
    pub pilot_fraction: f64,
    pub heterogeneity: Heterogeneity,
    pub count: usize,
    pub network_mse_mean: f64,
    pub network_mse_sd: f64,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
}

type GroupKey = (Method, usize, usize, usize, usize, u64, u64, u64, Heterogeneity);

fn key(r: &MetricsRecord) -> GroupKey {
    (
        r.method,
        r.users,
        r.uses,
        r.n_t,
        r.n_r,
        r.snr_db.to_bits(),
        r.zeta.to_bits(),
        r.pilot_fraction.to_bits(),
        r.heterogeneity,
    )
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups records by everything except seed and measurements, in order of
/// first appearance.
pub fn emit_summary(records: &[MetricsRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::invalid("summary needs at least one record"));
    }
    let mut groups: Vec<(GroupKey, Vec<&MetricsRecord>)> = Vec::new();
    for r in records {
        let k = key(r);
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, members)) => members.push(r),
            None => groups.push((k, vec![r])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(_, members)| {
            let first = members[0];
            let mse: Vec<f64> = members.iter().map(|r| r.network_mse).collect();
            let acc: Vec<f64> = members.iter().map(|r| r.accuracy).collect();
            let (network_mse_mean, network_mse_sd) = mean_sd(&mse);
            let (accuracy_mean, accuracy_sd) = mean_sd(&acc);
            SummaryRow {
                method: first.method,
                users: first.users,
                uses: first.uses,
                n_t: first.n_t,
                n_r: first.n_r,
                snr_db: first.snr_db,
                zeta: first.zeta,
                pilot_fraction: first.pilot_fraction,
                heterogeneity: first.heterogeneity,
                count: members.len(),
                network_mse_mean,
                network_mse_sd,
                accuracy_mean,
                accuracy_sd,
            }
        })
        .collect())
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn summary_text(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>3} {:>3} {:>3} {:>3} {:>6} {:>7} {:>6} {:<14} {:>3} {:>21} {:>17}",
        "method", "L", "K", "N_T", "N_R", "snr_db", "zeta", "pilots", "heterogeneity", "n", "network_mse", "accuracy"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>3} {:>3} {:>3} {:>3} {:>6} {:>7.4} {:>6} {:<14} {:>3} {:>10.4e} ± {:<8.2e} {:>7.4} ± {:<6.4}",
            r.method.to_string(),
            r.users,
            r.uses,
            r.n_t,
            r.n_r,
            r.snr_db,
            r.zeta,
            r.pilot_fraction,
            r.heterogeneity.to_string(),
            r.count,
            r.network_mse_mean,
            r.network_mse_sd,
            r.accuracy_mean,
            r.accuracy_sd
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seed: u64, acc: f64) -> MetricsRecord {
        MetricsRecord {
            seed,
            method: Method::Federated,
            users: 10,
            uses: 8,
            n_t: 4,
            n_r: 4,
            snr_db: 20.0,
            zeta: 0.25,
            pilot_fraction: 1.0,
            heterogeneity: Heterogeneity::Heterogeneous,
            network_mse: acc * 2.0,
            accuracy: acc,
            downlink_payload: 0,
            uplink_payload: 0,
            wall_ms: 0,
            iterations_run: 30,
        }
    }

    #[test]
    fn single_and_pair() {
        let s = emit_summary(&[rec(1, 0.7)]).unwrap();
        assert_eq!((s[0].accuracy_mean, s[0].accuracy_sd, s[0].count), (0.7, 0.0, 1));
        let s = emit_summary(&[rec(1, 0.4), rec(2, 0.6)]).unwrap();
        assert!((s[0].accuracy_mean - 0.5).abs() < 1e-15);
        assert!(emit_summary(&[]).is_err());
    }

    #[test]
    fn groups_by_configuration() {
        let mut other = rec(1, 0.1);
        other.zeta = 0.5;
        let s = emit_summary(&[rec(1, 0.2), other, rec(2, 0.3)]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].count, 2);
        assert!(summary_text(&s).lines().count() == 3);
        let mut buf = Vec::new();
        write_summary_csv(&s, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("method,L,K"));
    }
}
