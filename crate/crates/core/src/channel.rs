//! Flat Rayleigh MIMO channel, lifted over `K` channel uses.
//!
//! Base matrices are `N_R × N_T` (receive rows, transmit columns). One base
//! matrix stays fixed for all uses of a transmission, so the lifted channel
//! is the block diagonal `I_K ⊗ H̄`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{complex_gaussian, frobenius_sq, matmul, ComplexMatrix};

/// Noise variance per complex receive dimension for a given SNR.
///
/// The convention is `σ² = 10^(−snr_db/10) · P_T`, so `P_T = 1` at 20 dB
/// gives `σ² = 0.01`.
pub fn noise_sigma_from_snr(snr_db: f64, p_t: f64) -> Result<f64> {
    if !(p_t > 0.0) || !p_t.is_finite() {
        return Err(Error::invalid(format!("power budget must be positive, got {p_t}")));
    }
    Ok(10f64.powf(-snr_db / 10.0) * p_t)
}

/// `N_R × N_T` matrix of i.i.d. CN(0, 1) entries.
pub fn sample_rayleigh<R: Rng + ?Sized>(n_r: usize, n_t: usize, rng: &mut R) -> ComplexMatrix {
    complex_gaussian(n_r, n_t, 1.0, rng)
}

/// Block-diagonal `I_K ⊗ base`.
pub fn lift(base: &ComplexMatrix, uses: usize) -> Result<ComplexMatrix> {
    if uses == 0 {
        return Err(Error::invalid("channel uses must be at least 1"));
    }
    let (r, c) = base.shape();
    let mut out = ComplexMatrix::zeros(uses * r, uses * c);
    for k in 0..uses {
        out.view_mut((k * r, k * c), (r, c)).copy_from(base);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MimoChannel {
    base: ComplexMatrix,
    uses: usize,
    lifted: ComplexMatrix,
    noise_variance: f64,
}

/// Per-column received signal and noise power, for auditing SNR conventions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub signal_power: f64,
    pub noise_power: f64,
}

impl MimoChannel {
    pub fn new(base: ComplexMatrix, uses: usize, noise_variance: f64) -> Result<Self> {
        if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
            return Err(Error::invalid(format!(
                "noise variance must be finite and non-negative, got {noise_variance}"
            )));
        }
        crate::linalg::ensure_finite(&base, "channel matrix")?;
        let lifted = lift(&base, uses)?;
        Ok(MimoChannel {
            base,
            uses,
            lifted,
            noise_variance,
        })
    }

    pub fn rayleigh<R: Rng + ?Sized>(
        n_r: usize,
        n_t: usize,
        uses: usize,
        noise_variance: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_r == 0 || n_t == 0 {
            return Err(Error::invalid("antenna counts must be at least 1"));
        }
        MimoChannel::new(sample_rayleigh(n_r, n_t, rng), uses, noise_variance)
    }

    pub fn base(&self) -> &ComplexMatrix {
        &self.base
    }

    pub fn lifted(&self) -> &ComplexMatrix {
        &self.lifted
    }

    pub fn uses(&self) -> usize {
        self.uses
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn n_r(&self) -> usize {
        self.base.nrows()
    }

    pub fn n_t(&self) -> usize {
        self.base.ncols()
    }

    /// `K·N_R`.
    pub fn rx_dim(&self) -> usize {
        self.lifted.nrows()
    }

    /// `K·N_T`.
    pub fn tx_dim(&self) -> usize {
        self.lifted.ncols()
    }

    /// `Σ_n = σ² I` over the lifted receive dimension.
    pub fn noise_covariance(&self) -> ComplexMatrix {
        ComplexMatrix::identity(self.rx_dim(), self.rx_dim()).map(|z| z * self.noise_variance)
    }

    /// Noiseless channel output `H X`.
    pub fn apply(&self, x_tx: &ComplexMatrix) -> Result<ComplexMatrix> {
        if x_tx.nrows() != self.tx_dim() {
            return Err(Error::shape("transmit", (self.tx_dim(), x_tx.ncols()), x_tx.shape()));
        }
        Ok(matmul(&self.lifted, x_tx))
    }

    /// `H X + N` with i.i.d. CN(0, σ²) noise entries.
    pub fn transmit<R: Rng + ?Sized>(&self, x_tx: &ComplexMatrix, rng: &mut R) -> Result<ComplexMatrix> {
        let mut y = self.apply(x_tx)?;
        if self.noise_variance > 0.0 {
            y += complex_gaussian(y.nrows(), y.ncols(), self.noise_variance, rng);
        }
        Ok(y)
    }

    /// Empirical `E‖H F x‖²` over the columns of `x` and the matching noise
    /// power `K·N_R·σ²`.
    pub fn link_budget(&self, precoder: &ComplexMatrix, x: &ComplexMatrix) -> Result<LinkBudget> {
        let sent = matmul(precoder, x);
        let rx = self.apply(&sent)?;
        Ok(LinkBudget {
            signal_power: frobenius_sq(&rx) / x.ncols().max(1) as f64,
            noise_power: self.rx_dim() as f64 * self.noise_variance,
        })
    }
}

/// Free-function form of [`MimoChannel::transmit`].
pub fn transmit<R: Rng + ?Sized>(
    channel: &MimoChannel,
    x_tx: &ComplexMatrix,
    rng: &mut R,
) -> Result<ComplexMatrix> {
    channel.transmit(x_tx, rng)
}
