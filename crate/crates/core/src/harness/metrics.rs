use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::RealMatrix;
use crate::semantic::{Heterogeneity, RealLatentSet};

use super::config::Method;

/// Fixed column order of result CSV files.
pub const CSV_HEADER: [&str; 16] = [
    "seed",
    "method",
    "L",
    "K",
    "N_T",
    "N_R",
    "snr_db",
    "zeta",
    "pilot_fraction",
    "heterogeneity",
    "network_mse",
    "accuracy",
    "downlink_payload",
    "uplink_payload",
    "wall_ms",
    "iterations_run",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
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
    pub network_mse: f64,
    pub accuracy: f64,
    pub downlink_payload: usize,
    pub uplink_payload: usize,
    pub wall_ms: u64,
    pub iterations_run: usize,
}

/// CSV writer that emits the header up front and one row per call.
pub struct RecordWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        inner.write_record(CSV_HEADER)?;
        inner.flush()?;
        Ok(RecordWriter { inner })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        self.inner.serialize(r)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_records<W: Write>(records: &[MetricsRecord], w: W) -> Result<()> {
    let mut out = RecordWriter::new(w)?;
    for r in records {
        out.write(r)?;
    }
    out.flush()
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header {}", header.join(",")),
        });
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// `1/L Σ_l 1/n ‖Y_l − Ŷ_l‖²_F`.
pub fn network_mse(targets: &[RealMatrix], estimates: &[RealMatrix]) -> Result<f64> {
    if targets.is_empty() || targets.len() != estimates.len() {
        return Err(Error::invalid(format!(
            "{} targets for {} estimates",
            targets.len(),
            estimates.len()
        )));
    }
    let mut total = 0.0;
    for (y, yh) in targets.iter().zip(estimates) {
        if y.shape() != yh.shape() {
            return Err(Error::shape("network_mse estimate", y.shape(), yh.shape()));
        }
        if y.ncols() == 0 {
            return Err(Error::invalid("network_mse needs at least one sample"));
        }
        total += (y - yh).norm_squared() / y.ncols() as f64;
    }
    Ok(total / targets.len() as f64)
}

/// Nearest-centroid classifier in a user's native latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidClassifier {
    /// `dim × C`, column `c` is the mean of class `c`.
    pub centroids: RealMatrix,
}

pub fn centroid_fit(set: &RealLatentSet) -> Result<CentroidClassifier> {
    let c = set.num_classes;
    let mut centroids = RealMatrix::zeros(set.dim(), c);
    let mut counts = vec![0usize; c];
    for (j, &label) in set.labels.iter().enumerate() {
        let mut col = centroids.column_mut(label);
        col += set.features.column(j);
        counts[label] += 1;
    }
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::MissingClass(k));
        }
        centroids.column_mut(k).scale_mut(1.0 / n as f64);
    }
    Ok(CentroidClassifier { centroids })
}

impl CentroidClassifier {
    pub fn num_classes(&self) -> usize {
        self.centroids.ncols()
    }

    /// Closest centroid; ties go to the lowest class id.
    pub fn predict(&self, s: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.centroids.column_iter().enumerate() {
            let d: f64 = c.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    pub fn predict_all(&self, x: &RealMatrix) -> Result<Vec<usize>> {
        if x.nrows() != self.centroids.nrows() {
            return Err(Error::shape("centroid_predict", (self.centroids.nrows(), x.ncols()), x.shape()));
        }
        Ok(x.column_iter().map(|c| self.predict(c.as_slice())).collect())
    }
}

pub fn centroid_predict(classifier: &CentroidClassifier, s: &[f64]) -> usize {
    classifier.predict(s)
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("accuracy needs equal, non-empty label lists"));
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}
