//! Dense complex linear-algebra kernels.
//!
//! All matrices are nalgebra column-major `DMatrix` values. The Sylvester
//! solver works through two Hermitian eigendecompositions, which is enough
//! for the shifted PSD systems that occur in the alignment problem. The
//! Kronecker-vectorized solver is kept as an independent brute-force check.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type ComplexMatrix = DMatrix<Complex64>;
pub type RealMatrix = DMatrix<f64>;

/// Products with at least this many scalar multiply-adds go through the
/// split real/imaginary path, which uses the blocked f64 kernel.
const SPLIT_GEMM_MIN_WORK: usize = 16 * 1024;

/// Largest unknown count accepted by [`kron_vec_solve`].
pub const KRON_MAX_UNKNOWNS: usize = 4096;

/// Default regularization for [`whiten`].
pub const WHITEN_EPS: f64 = 1e-8;

pub fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn ensure_finite(m: &ComplexMatrix, what: &str) -> Result<()> {
    if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn ensure_finite_real(m: &RealMatrix, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Squared Frobenius norm, i.e. `tr(M M^H)`.
pub fn frobenius_sq(m: &ComplexMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

pub fn max_abs_diff(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape");
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

/// Largest entry of `|M - M^H|`.
pub fn hermitian_deviation(m: &ComplexMatrix) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    max_abs_diff(m, &m.adjoint())
}

pub fn to_complex(m: &RealMatrix) -> ComplexMatrix {
    m.map(|x| c64(x, 0.0))
}

/// `a * b`.
pub fn matmul(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension");
    if a.nrows() * a.ncols() * b.ncols() < SPLIT_GEMM_MIN_WORK {
        return a * b;
    }
    let (ar, ai) = (a.map(|z| z.re), a.map(|z| z.im));
    let (br, bi) = (b.map(|z| z.re), b.map(|z| z.im));
    let re = &ar * &br - &ai * &bi;
    let im = &ar * &bi + &ai * &br;
    re.zip_map(&im, c64)
}

/// `a * b^H`.
pub fn matmul_adj(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    matmul(a, &b.adjoint())
}

/// `a^H * b`.
pub fn adj_matmul(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    matmul(&a.adjoint(), b)
}

/// Gram matrix `m * m^H`, made exactly Hermitian.
pub fn gram(m: &ComplexMatrix) -> ComplexMatrix {
    hermitian_part(&matmul_adj(m, m))
}

pub fn hermitian_part(m: &ComplexMatrix) -> ComplexMatrix {
    (m + m.adjoint()).map(|z| z * 0.5)
}

/// I.i.d. circularly-symmetric complex Gaussian entries with the given
/// per-entry variance (real and imaginary parts each carry half).
pub fn complex_gaussian<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    variance: f64,
    rng: &mut R,
) -> ComplexMatrix {
    let s = (variance / 2.0).sqrt();
    // Column-major fill order is part of the reproducibility contract.
    DMatrix::from_iterator(
        rows,
        cols,
        (0..rows * cols).map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            c64(s * re, s * im)
        }),
    )
}

/// Eigendecomposition `M = U diag(λ) U^H` of a Hermitian matrix with
/// eigenvalues in ascending order.
#[derive(Debug, Clone)]
pub struct HermitianEig {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: ComplexMatrix,
}

impl HermitianEig {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn reconstruct(&self) -> ComplexMatrix {
        let u = &self.eigenvectors;
        let mut scaled = u.clone();
        for (j, &l) in self.eigenvalues.iter().enumerate() {
            scaled.column_mut(j).scale_mut(l);
        }
        matmul_adj(&scaled, u)
    }

    /// `(M + loading I)^{-1}`, rejecting non-positive shifted eigenvalues.
    pub fn shifted_inverse(&self, loading: f64) -> Result<ComplexMatrix> {
        let u = &self.eigenvectors;
        let mut scaled = u.clone();
        for (j, &l) in self.eigenvalues.iter().enumerate() {
            let d = l + loading;
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Singular("hermitian inverse"));
            }
            scaled.column_mut(j).scale_mut(1.0 / d);
        }
        Ok(hermitian_part(&matmul_adj(&scaled, u)))
    }

    /// Inverse on the eigenvectors whose eigenvalue exceeds `floor`, zero on
    /// the rest.
    pub fn pseudo_inverse(&self, floor: f64) -> ComplexMatrix {
        let u = &self.eigenvectors;
        let mut scaled = u.clone();
        for (j, &l) in self.eigenvalues.iter().enumerate() {
            let w = if l > floor { 1.0 / l } else { 0.0 };
            scaled.column_mut(j).scale_mut(w);
        }
        hermitian_part(&matmul_adj(&scaled, u))
    }
}

pub fn hermitian_eig(m: &ComplexMatrix) -> Result<HermitianEig> {
    if !m.is_square() {
        return Err(Error::shape("hermitian_eig", (m.nrows(), m.nrows()), m.shape()));
    }
    ensure_finite(m, "hermitian_eig input")?;
    let eig = SymmetricEigen::new(hermitian_part(m));
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors = ComplexMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(HermitianEig {
        eigenvalues,
        eigenvectors,
    })
}

fn check_sylvester_shapes(
    a: (usize, usize),
    b: (usize, usize),
    c: (usize, usize),
    shift: f64,
) -> Result<()> {
    if a.0 != a.1 {
        return Err(Error::shape("sylvester A", (a.0, a.0), a));
    }
    if b.0 != b.1 {
        return Err(Error::shape("sylvester B", (b.0, b.0), b));
    }
    if c != (a.0, b.0) {
        return Err(Error::shape("sylvester C", (a.0, b.0), c));
    }
    if !(shift > 0.0) || !shift.is_finite() {
        return Err(Error::invalid(format!("sylvester shift must be positive, got {shift}")));
    }
    Ok(())
}

/// Solves `A F B + shift F = C` for Hermitian PSD `A` (p×p) and `B` (q×q).
pub fn sylvester_solve(
    a: &ComplexMatrix,
    b: &ComplexMatrix,
    shift: f64,
    c: &ComplexMatrix,
) -> Result<ComplexMatrix> {
    check_sylvester_shapes(a.shape(), b.shape(), c.shape(), shift)?;
    ensure_finite(c, "sylvester C")?;
    let ea = hermitian_eig(a)?;
    let eb = hermitian_eig(b)?;
    sylvester_solve_eig(&ea, &eb, shift, c)
}

/// [`sylvester_solve`] with both eigendecompositions supplied, so a fixed
/// `B` can be factored once and reused across many right-hand sides.
pub fn sylvester_solve_eig(
    ea: &HermitianEig,
    eb: &HermitianEig,
    shift: f64,
    c: &ComplexMatrix,
) -> Result<ComplexMatrix> {
    let (p, q) = (ea.dim(), eb.dim());
    check_sylvester_shapes((p, p), (q, q), c.shape(), shift)?;
    let ua = &ea.eigenvectors;
    let ub = &eb.eigenvectors;
    let mut t = matmul(&adj_matmul(ua, c), ub);
    for j in 0..q {
        for i in 0..p {
            let d = ea.eigenvalues[i] * eb.eigenvalues[j] + shift;
            if !(d > 0.0) {
                return Err(Error::Singular("sylvester_solve"));
            }
            t[(i, j)] /= d;
        }
    }
    let f = matmul_adj(&matmul(ua, &t), ub);
    ensure_finite(&f, "sylvester solution")?;
    Ok(f)
}

/// Brute-force solve of `A F B + shift F = C` through
/// `(B^T ⊗ A + shift I) vec(F) = vec(C)`. Only meant for small systems.
pub fn kron_vec_solve(
    a: &ComplexMatrix,
    b: &ComplexMatrix,
    shift: f64,
    c: &ComplexMatrix,
) -> Result<ComplexMatrix> {
    check_sylvester_shapes(a.shape(), b.shape(), c.shape(), shift)?;
    let (p, q) = (a.nrows(), b.nrows());
    let n = p * q;
    if n > KRON_MAX_UNKNOWNS {
        return Err(Error::invalid(format!(
            "kron_vec_solve limited to {KRON_MAX_UNKNOWNS} unknowns, got {n}"
        )));
    }
    // vec() is column-major: F[(i, j)] sits at j * p + i.
    let mut system = ComplexMatrix::zeros(n, n);
    for j in 0..q {
        for l in 0..q {
            let blj = b[(l, j)];
            for i in 0..p {
                for k in 0..p {
                    system[(j * p + i, l * p + k)] = blj * a[(i, k)];
                }
            }
        }
    }
    for d in 0..n {
        system[(d, d)] += c64(shift, 0.0);
    }
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("kron_vec_solve"))?;
    let f = ComplexMatrix::from_column_slice(p, q, sol.as_slice());
    ensure_finite(&f, "kron_vec_solve solution")?;
    Ok(f)
}

/// Nearest point to `zhat` in the set `{Z : tr(Z Z^H) <= p_t}`.
///
/// Points already within a few ulps of the boundary are returned unchanged,
/// which makes the projection exactly idempotent.
pub fn trace_ball_project(zhat: &ComplexMatrix, p_t: f64) -> Result<ComplexMatrix> {
    if !(p_t > 0.0) || !p_t.is_finite() {
        return Err(Error::invalid(format!("power budget must be positive, got {p_t}")));
    }
    ensure_finite(zhat, "projection input")?;
    let tr = frobenius_sq(zhat);
    if tr <= p_t * (1.0 + 8.0 * f64::EPSILON) {
        return Ok(zhat.clone());
    }
    let lambda = (tr / p_t).sqrt() - 1.0;
    Ok(zhat.map(|z| z / (1.0 + lambda)))
}

/// Affine standardization fitted on a d×n sample matrix.
#[derive(Debug, Clone)]
pub struct Whitener {
    mean: DVector<f64>,
    transform: RealMatrix,
    inverse: RealMatrix,
}

impl Whitener {
    /// Fits `W = (Cov + eps I)^{-1/2}` with the 1/n sample covariance.
    pub fn fit(s: &RealMatrix, eps: f64) -> Result<Self> {
        let (d, n) = s.shape();
        if n < 2 {
            return Err(Error::invalid(format!("whitening needs at least 2 samples, got {n}")));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("whitening eps must be positive, got {eps}")));
        }
        ensure_finite_real(s, "whitening input")?;
        let mean = s.column_mean();
        let mut centered = s.clone();
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        let cov = (&centered * centered.transpose()) / n as f64;
        let cov = (&cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(cov);
        let u = &eig.eigenvectors;
        let mut fwd = u.clone();
        let mut inv = u.clone();
        for j in 0..d {
            let l = eig.eigenvalues[j].max(0.0) + eps;
            fwd.column_mut(j).scale_mut(l.powf(-0.5));
            inv.column_mut(j).scale_mut(l.sqrt());
        }
        Ok(Whitener {
            mean,
            transform: &fwd * u.transpose(),
            inverse: &inv * u.transpose(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn transform(&self) -> &RealMatrix {
        &self.transform
    }

    pub fn apply(&self, s: &RealMatrix) -> Result<RealMatrix> {
        if s.nrows() != self.dim() {
            return Err(Error::shape("whiten apply", (self.dim(), s.ncols()), s.shape()));
        }
        let mut centered = s.clone();
        for mut col in centered.column_iter_mut() {
            col -= &self.mean;
        }
        Ok(&self.transform * centered)
    }

    pub fn invert(&self, w: &RealMatrix) -> Result<RealMatrix> {
        if w.nrows() != self.dim() {
            return Err(Error::shape("whiten invert", (self.dim(), w.ncols()), w.shape()));
        }
        let mut out = &self.inverse * w;
        for mut col in out.column_iter_mut() {
            col += &self.mean;
        }
        Ok(out)
    }
}

/// Whitens `s` and returns the standardized data with the fitted map.
pub fn whiten(s: &RealMatrix, eps: f64) -> Result<(RealMatrix, Whitener)> {
    let w = Whitener::fit(s, eps)?;
    let out = w.apply(s)?;
    Ok((out, w))
}

/// `1/n` sample covariance of the columns of `s`.
pub fn sample_covariance(s: &RealMatrix) -> RealMatrix {
    let n = s.ncols() as f64;
    let mean = s.column_mean();
    let mut centered = s.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    (&centered * centered.transpose()) / n
}
