//! Comparison schemes: disjoint equalization plus least-squares alignment
//! with First-K or Top-K feature selection, and independent per-link
//! precoders.

use std::fmt;
use std::str::FromStr;

use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::admm::{
    run_centralized, run_frozen_g, AdmmOptions, AdmmState, Aggregation, AlignmentProblem,
    NoiseWeighting,
};
use crate::channel::MimoChannel;
use crate::error::{Error, Result};
use crate::federation::{expected_payload, PayloadLedger};
use crate::linalg::{ensure_finite_real, matmul, ComplexMatrix, RealMatrix};
use crate::rng::{self, substream};
use crate::semantic::{pair_matrix, unpair_matrix};

/// Ridge used for the least-squares aligners.
pub const LSQ_RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EqualizerLayout {
    /// `I_K ⊗ M`: one equalized symbol vector per channel use.
    #[default]
    PerUse,
    /// `1_K^T ⊗ M`: received uses summed into a single `N_T` vector.
    Summed,
}

/// MMSE equalizer from the SVD `H̄ = U Σ V^H`.
///
/// The per-use block is `M = (Σ^H Σ + I/SNR)^{-1} (U Σ)^H` of shape
/// `N_T × N_R`; it estimates `V^H x` from `H̄ x + n`.
pub fn svd_mmse_block(base: &ComplexMatrix, snr_db: f64) -> Result<ComplexMatrix> {
    crate::linalg::ensure_finite(base, "channel for SVD equalizer")?;
    let (n_r, n_t) = base.shape();
    let snr = 10f64.powf(snr_db / 10.0);
    let svd = SVD::new(base.clone(), true, false);
    let u = svd.u.ok_or(Error::Singular("SVD of channel"))?;
    let mut m = ComplexMatrix::zeros(n_t, n_r);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        let w = s / (s * s + 1.0 / snr);
        for j in 0..n_r {
            m[(i, j)] = u[(j, i)].conj() * w;
        }
    }
    Ok(m)
}

pub fn svd_mmse_equalizer(
    base: &ComplexMatrix,
    snr_db: f64,
    uses: usize,
    layout: EqualizerLayout,
) -> Result<ComplexMatrix> {
    if uses == 0 {
        return Err(Error::invalid("channel uses must be at least 1"));
    }
    let m = svd_mmse_block(base, snr_db)?;
    let (r, c) = m.shape();
    Ok(match layout {
        EqualizerLayout::PerUse => crate::channel::lift(&m, uses)?,
        EqualizerLayout::Summed => {
            let mut g = ComplexMatrix::zeros(r, uses * c);
            for k in 0..uses {
                g.view_mut((0, k * c), (r, c)).copy_from(&m);
            }
            g
        }
    })
}

/// Least-squares alignment matrix `Q` (`m_l × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct AlignerQ {
    pub matrix: RealMatrix,
}

impl AlignerQ {
    pub fn apply(&self, x: &RealMatrix) -> Result<RealMatrix> {
        if x.nrows() != self.matrix.ncols() {
            return Err(Error::shape("aligner input", (self.matrix.ncols(), x.ncols()), x.shape()));
        }
        Ok(&self.matrix * x)
    }
}

/// `Q = Y X^T (X X^T + ridge I)^{-1}`, evaluated through the thin SVD
/// `X = U S V^T` as `Q = Y V S (S² + ridge)^{-1} U^T`.
pub fn lsq_align(x: &RealMatrix, y: &RealMatrix, ridge: f64) -> Result<AlignerQ> {
    if x.ncols() == 0 || x.ncols() != y.ncols() {
        return Err(Error::shape("lsq_align Y", (y.nrows(), x.ncols()), y.shape()));
    }
    if !(ridge > 0.0) {
        return Err(Error::invalid(format!("ridge must be positive, got {ridge}")));
    }
    ensure_finite_real(x, "lsq_align X")?;
    ensure_finite_real(y, "lsq_align Y")?;
    let svd = SVD::new(x.clone(), true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Singular("SVD of pilot matrix")),
    };
    let mut yv = y * v_t.transpose();
    for (j, &s) in svd.singular_values.iter().enumerate() {
        yv.column_mut(j).scale_mut(s / (s * s + ridge));
    }
    Ok(AlignerQ { matrix: yv * u.transpose() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    FirstK,
    TopK,
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selection::FirstK => "first_k",
            Selection::TopK => "top_k",
        })
    }
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_k" => Ok(Selection::FirstK),
            "top_k" => Ok(Selection::TopK),
            other => Err(Error::invalid(format!("unknown selection `{other}`"))),
        }
    }
}

fn kept_count(d: usize, uses: usize, n_t: usize) -> Result<usize> {
    let keep = 2 * uses * n_t;
    if keep > d {
        return Err(Error::invalid(format!("cannot keep {keep} of {d} features")));
    }
    Ok(keep)
}

pub fn first_k_encode(s: &[f64], uses: usize, n_t: usize) -> Result<Vec<f64>> {
    let keep = kept_count(s.len(), uses, n_t)?;
    Ok(s[..keep].to_vec())
}

pub fn first_k_decode(values: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    let n = values.len().min(d);
    out[..n].copy_from_slice(&values[..n]);
    out
}

/// Indices of the `keep` largest magnitudes, ties to the lower index,
/// returned in ascending index order.
pub fn top_indices(s: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].abs().total_cmp(&s[a].abs()).then(a.cmp(&b)));
    let mut kept = order[..keep.min(s.len())].to_vec();
    kept.sort_unstable();
    kept
}

pub fn top_k_encode(s: &[f64], uses: usize, n_t: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let keep = kept_count(s.len(), uses, n_t)?;
    let idx = top_indices(s, keep);
    Ok((idx.iter().map(|&i| s[i]).collect(), idx))
}

pub fn top_k_decode(values: &[f64], indices: &[usize], d: usize) -> Result<Vec<f64>> {
    if values.len() != indices.len() {
        return Err(Error::invalid("value and index counts differ"));
    }
    let mut out = vec![0.0; d];
    for (&v, &i) in values.iter().zip(indices) {
        if i >= d {
            return Err(Error::invalid(format!("index {i} out of range for dimension {d}")));
        }
        out[i] = v;
    }
    Ok(out)
}

/// Column-wise selection of a whole latent matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionCode {
    pub kind: Selection,
    pub dim: usize,
    /// `keep × n` transmitted real features.
    pub values: RealMatrix,
    /// Per-sample kept indices; `None` for First-K, whose kept set is the
    /// prefix of length `values.nrows()`.
    pub indices: Option<Vec<Vec<usize>>>,
}

impl SelectionCode {
    pub fn keep(&self) -> usize {
        self.values.nrows()
    }

    pub fn encode(kind: Selection, x: &RealMatrix, keep: usize) -> Result<Self> {
        let d = x.nrows();
        if keep > d {
            return Err(Error::invalid(format!("cannot keep {keep} of {d} features")));
        }
        match kind {
            Selection::FirstK => Ok(SelectionCode {
                kind,
                dim: d,
                values: x.rows(0, keep).into_owned(),
                indices: None,
            }),
            Selection::TopK => {
                let mut values = RealMatrix::zeros(keep, x.ncols());
                let mut indices = Vec::with_capacity(x.ncols());
                for (j, col) in x.column_iter().enumerate() {
                    let idx = top_indices(col.as_slice(), keep);
                    for (r, &i) in idx.iter().enumerate() {
                        values[(r, j)] = col[i];
                    }
                    indices.push(idx);
                }
                Ok(SelectionCode { kind, dim: d, values, indices: Some(indices) })
            }
        }
    }

    /// Zero-filled reconstruction from (possibly corrupted) `values`.
    pub fn decode(&self, values: &RealMatrix) -> Result<RealMatrix> {
        if values.shape() != self.values.shape() {
            return Err(Error::shape("selection decode", self.values.shape(), values.shape()));
        }
        let mut out = RealMatrix::zeros(self.dim, values.ncols());
        match &self.indices {
            None => out.rows_mut(0, self.keep()).copy_from(values),
            Some(idx) => {
                for (j, kept) in idx.iter().enumerate() {
                    for (r, &i) in kept.iter().enumerate() {
                        out[(i, j)] = values[(r, j)];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Shared inputs for one method run.
#[derive(Debug, Clone)]
pub struct MethodInputs<'a> {
    /// Whitened AP pilots and test latents, `d × n`.
    pub x_train: &'a RealMatrix,
    pub x_test: &'a RealMatrix,
    /// Whitened user pilots, `m_l × n`.
    pub y_train: &'a [RealMatrix],
    pub channels: &'a [MimoChannel],
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodParams {
    pub uses: usize,
    pub p_t: f64,
    pub rho: f64,
    pub iterations: usize,
    pub aggregation: Aggregation,
    pub weighting: NoiseWeighting,
    pub csi: bool,
    pub snr_db: f64,
    pub stop_tol: Option<f64>,
}

impl MethodParams {
    pub fn admm_options(&self) -> AdmmOptions {
        AdmmOptions {
            iterations: self.iterations,
            stop_tol: self.stop_tol,
            aggregation: self.aggregation,
            weighting: self.weighting,
            track_lagrangian: false,
        }
    }
}

/// Whitened predictions of every user's test latents plus run statistics.
#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub predictions: Vec<RealMatrix>,
    pub downlink_payload: usize,
    pub uplink_payload: usize,
    pub iterations_run: usize,
    /// `tr(F F^H)` of each deployed precoder.
    pub precoder_power: Vec<f64>,
    /// Message ledger of a federated run.
    pub ledger: Option<PayloadLedger>,
}

/// Test-time link: `G (H F X + N)` with noise from the user's stream.
pub fn equalized_output(
    g: &ComplexMatrix,
    f: &ComplexMatrix,
    channel: &MimoChannel,
    x: &ComplexMatrix,
    seed: u64,
    user: usize,
) -> Result<ComplexMatrix> {
    let mut rng = substream(seed, rng::ROLE_NOISE, user as u64);
    let rx = channel.transmit(&matmul(f, x), &mut rng)?;
    Ok(matmul(g, &rx))
}

fn zero_pad_rows(m: ComplexMatrix, rows: usize) -> ComplexMatrix {
    if m.nrows() >= rows {
        return m;
    }
    let mut out = ComplexMatrix::zeros(rows, m.ncols());
    out.rows_mut(0, m.nrows()).copy_from(&m);
    out
}

/// Number of real features a selection baseline sends per sample:
/// `2·K·N_T`, capped at the latent dimension.
pub fn selection_budget(d: usize, uses: usize, n_t: usize) -> usize {
    (2 * uses * n_t).min(d)
}

/// Precoder for fixed equalizers with every user's target equal to the
/// transmitted symbols, solved by F-block ADMM iterations.
pub fn baseline_precoder(
    xs: &ComplexMatrix,
    channels: &[MimoChannel],
    gs: &[ComplexMatrix],
    params: &MethodParams,
    seed: u64,
) -> Result<AdmmState> {
    let targets = vec![xs.clone(); channels.len()];
    let problem = AlignmentProblem::new(xs.clone(), targets, channels.to_vec(), params.p_t, params.rho)?;
    let options = AdmmOptions {
        aggregation: Aggregation::Exact,
        ..params.admm_options()
    };
    run_frozen_g(&problem, gs, &options, AdmmState::initial(&problem, seed))
}

/// Selection baseline pipeline: select, pair, precode, transmit, SVD-MMSE
/// equalize, unpair, zero-fill, and align with `Q_l` fit on the clean
/// pilots.
pub fn run_baseline(kind: Selection, inputs: &MethodInputs<'_>, params: &MethodParams) -> Result<MethodOutput> {
    let d = inputs.x_train.nrows();
    let channels = inputs.channels;
    let n_t = channels
        .first()
        .map(MimoChannel::n_t)
        .ok_or_else(|| Error::invalid("baseline needs at least one user"))?;
    let tx_rows = params.uses * n_t;
    let keep = selection_budget(d, params.uses, n_t);

    let code_train = SelectionCode::encode(kind, inputs.x_train, keep)?;
    let code_test = SelectionCode::encode(kind, inputs.x_test, keep)?;
    let xs_train = zero_pad_rows(pair_matrix(&code_train.values)?, tx_rows);
    let xs_test = zero_pad_rows(pair_matrix(&code_test.values)?, tx_rows);

    let gs = channels
        .iter()
        .map(|ch| svd_mmse_equalizer(ch.base(), params.snr_db, params.uses, EqualizerLayout::PerUse))
        .collect::<Result<Vec<_>>>()?;
    let state = baseline_precoder(&xs_train, channels, &gs, params, inputs.seed)?;
    let f = state.deployed_precoder(params.p_t)?;
    let power = crate::linalg::frobenius_sq(&f);

    let mut predictions = Vec::with_capacity(channels.len());
    for (l, (ch, g)) in channels.iter().zip(&gs).enumerate() {
        let q = lsq_align(inputs.x_train, &inputs.y_train[l], LSQ_RIDGE)?;
        let est = equalized_output(g, &f, ch, &xs_test, inputs.seed, l)?;
        let est = est.rows(0, keep / 2).into_owned();
        let recon = code_test.decode(&unpair_matrix(&est))?;
        predictions.push(q.apply(&recon)?);
    }
    Ok(MethodOutput {
        predictions,
        downlink_payload: 0,
        uplink_payload: 0,
        iterations_run: state.t,
        precoder_power: vec![power],
        ledger: None,
    })
}

/// Independent single-user alignment per link, each with the full power
/// budget and no interference.
pub fn run_multilink(inputs: &MethodInputs<'_>, params: &MethodParams) -> Result<MethodOutput> {
    let x = pair_matrix(inputs.x_train)?;
    let x_test = pair_matrix(inputs.x_test)?;
    let opts = params.admm_options();
    let n = x.ncols();
    let mut out = MethodOutput {
        predictions: Vec::new(),
        downlink_payload: 0,
        uplink_payload: 0,
        iterations_run: 0,
        precoder_power: Vec::new(),
        ledger: None,
    };
    for (l, ch) in inputs.channels.iter().enumerate() {
        let y = pair_matrix(&inputs.y_train[l])?;
        let problem = AlignmentProblem::new(x.clone(), vec![y], vec![ch.clone()], params.p_t, params.rho)?;
        let state = run_centralized(&problem, &opts, AdmmState::initial(&problem, inputs.seed))?;
        let f = state.deployed_precoder(params.p_t)?;
        let est = equalized_output(&state.gs[0], &f, ch, &x_test, inputs.seed, l)?;
        out.predictions.push(unpair_matrix(&est));
        out.precoder_power.push(crate::linalg::frobenius_sq(&f));
        let (down, up) = expected_payload(state.t, 1, ch.rx_dim(), ch.tx_dim(), n, params.csi);
        out.downlink_payload += down;
        out.uplink_payload += up;
        out.iterations_run = out.iterations_run.max(state.t);
    }
    Ok(out)
}

/// `(Σ^HΣ + I/SNR)^{-1}` weights as a complex diagonal, for tests and audits.
pub fn mmse_weights(base: &ComplexMatrix, snr_db: f64) -> Vec<f64> {
    let snr = 10f64.powf(snr_db / 10.0);
    SVD::new(base.clone(), false, false)
        .singular_values
        .iter()
        .map(|&s| s / (s * s + 1.0 / snr))
        .collect()
}
