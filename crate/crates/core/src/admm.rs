//! ADMM for the shared pre-equalizer `F` and per-user equalizers `G_l`.
//!
//! The problem is
//!
//! ```text
//! min  1/L Σ_l [ 1/n ‖Y_l − G_l H_l F X‖² + tr(G_l Σ_l G_l^H) ]
//! s.t. tr(F F^H) ≤ P_T
//! ```
//!
//! split as `F = Z` with `Z` in the trace ball and a scaled dual `U`.
//! One iteration runs the G-step for every user, a local Sylvester solve per
//! user, the aggregation of those local solutions, the projection that
//! yields `Z`, and the dual update.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::MimoChannel;
use crate::error::{Error, Result};
use crate::linalg::{
    adj_matmul, complex_gaussian, ensure_finite, frobenius_sq, gram, hermitian_eig,
    hermitian_part, matmul, matmul_adj, sylvester_solve_eig, trace_ball_project, ComplexMatrix,
    HermitianEig,
};
use crate::rng::{self, substream};

/// Relative eigenvalue floor below which `M M^H` counts as rank-deficient.
const RANK_TOL: f64 = 1e-12;

/// Residual-based early stop threshold used when early stopping is enabled.
pub const DEFAULT_STOP_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of the per-user local solutions.
    #[default]
    FedAvg,
    /// Joint minimizer `(Σ A_l) F B + L n ρ F = Σ C_l`.
    Exact,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::FedAvg => "fedavg",
            Aggregation::Exact => "exact",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Aggregation::FedAvg),
            "exact" => Ok(Aggregation::Exact),
            other => Err(Error::Config(format!("unknown aggregation mode `{other}`"))),
        }
    }
}

/// Where the noise trace sits relative to the `1/L` user average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseWeighting {
    /// `1/L Σ [1/n ‖·‖² + tr(GΣG^H)]`, consistent with the G-step
    /// `G = Y M^H (M M^H + n Σ)^{-1}`.
    #[default]
    PerUser,
    /// `1/(Ln) Σ ‖·‖² + Σ tr(GΣG^H)`; the G-step then loads with `n L Σ`.
    Literal,
}

impl fmt::Display for NoiseWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseWeighting::PerUser => "per_user",
            NoiseWeighting::Literal => "literal",
        })
    }
}

impl FromStr for NoiseWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_user" => Ok(NoiseWeighting::PerUser),
            "literal" => Ok(NoiseWeighting::Literal),
            other => Err(Error::Config(format!("unknown noise weighting `{other}`"))),
        }
    }
}

impl NoiseWeighting {
    fn g_step_scale(self, n: usize, users: usize) -> f64 {
        match self {
            NoiseWeighting::PerUser => n as f64,
            NoiseWeighting::Literal => (n * users) as f64,
        }
    }
}

/// `B = X X^H` together with its eigendecomposition.
#[derive(Debug, Clone)]
pub struct PilotGram {
    pub matrix: ComplexMatrix,
    pub eig: HermitianEig,
}

impl PilotGram {
    pub fn new(x: &ComplexMatrix) -> Result<Self> {
        let matrix = gram(x);
        let eig = hermitian_eig(&matrix)?;
        Ok(PilotGram { matrix, eig })
    }
}

/// Pilots, targets, and channels for one alignment run.
#[derive(Debug, Clone)]
pub struct AlignmentProblem {
    x: ComplexMatrix,
    targets: Vec<ComplexMatrix>,
    channels: Vec<MimoChannel>,
    p_t: f64,
    rho: f64,
    pilot_gram: PilotGram,
}

impl AlignmentProblem {
    pub fn new(
        x: ComplexMatrix,
        targets: Vec<ComplexMatrix>,
        channels: Vec<MimoChannel>,
        p_t: f64,
        rho: f64,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::invalid("alignment problem needs at least one user"));
        }
        if targets.len() != channels.len() {
            return Err(Error::invalid(format!(
                "{} targets for {} channels",
                targets.len(),
                channels.len()
            )));
        }
        if !(p_t > 0.0) || !(rho > 0.0) {
            return Err(Error::invalid(format!("need P_T > 0 and rho > 0, got {p_t} and {rho}")));
        }
        ensure_finite(&x, "pilot matrix X")?;
        let n = x.ncols();
        if n == 0 {
            return Err(Error::invalid("pilot matrix has no columns"));
        }
        let tx = channels[0].tx_dim();
        for (l, (y, ch)) in targets.iter().zip(&channels).enumerate() {
            if y.ncols() != n {
                return Err(Error::shape("target Y_l", (y.nrows(), n), y.shape()));
            }
            if ch.tx_dim() != tx {
                return Err(Error::invalid(format!(
                    "user {l} channel has {} transmit dims, expected {tx}",
                    ch.tx_dim()
                )));
            }
            ensure_finite(y, "target Y_l")?;
        }
        let pilot_gram = PilotGram::new(&x)?;
        Ok(AlignmentProblem {
            x,
            targets,
            channels,
            p_t,
            rho,
            pilot_gram,
        })
    }

    pub fn x(&self) -> &ComplexMatrix {
        &self.x
    }

    pub fn targets(&self) -> &[ComplexMatrix] {
        &self.targets
    }

    pub fn channels(&self) -> &[MimoChannel] {
        &self.channels
    }

    pub fn pilot_gram(&self) -> &PilotGram {
        &self.pilot_gram
    }

    pub fn p_t(&self) -> f64 {
        self.p_t
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn num_users(&self) -> usize {
        self.targets.len()
    }

    /// Complex source dimension `d/2`.
    pub fn source_dim(&self) -> usize {
        self.x.nrows()
    }

    /// `K·N_T`, the row count of `F`.
    pub fn tx_dim(&self) -> usize {
        self.channels[0].tx_dim()
    }

    /// Restriction to a single user, as used by the multi-link scheme.
    pub fn single_user(&self, l: usize) -> Result<AlignmentProblem> {
        AlignmentProblem::new(
            self.x.clone(),
            vec![self.targets[l].clone()],
            vec![self.channels[l].clone()],
            self.p_t,
            self.rho,
        )
    }
}

/// `(1/n)‖Y − G M‖² + tr(G Σ G^H)` for one user.
pub fn user_objective(
    y: &ComplexMatrix,
    m: &ComplexMatrix,
    g: &ComplexMatrix,
    noise_cov: &ComplexMatrix,
) -> f64 {
    let n = m.ncols() as f64;
    let resid = y - matmul(g, m);
    frobenius_sq(&resid) / n + noise_trace(g, noise_cov)
}

fn noise_trace(g: &ComplexMatrix, noise_cov: &ComplexMatrix) -> f64 {
    matmul_adj(&(g * noise_cov), g).trace().re
}

/// Value of the alignment objective for `(F, {G_l})`.
pub fn objective_value(
    problem: &AlignmentProblem,
    f: &ComplexMatrix,
    gs: &[ComplexMatrix],
    weighting: NoiseWeighting,
) -> Result<f64> {
    let l_count = problem.num_users();
    if gs.len() != l_count {
        return Err(Error::invalid(format!("{} equalizers for {l_count} users", gs.len())));
    }
    if f.shape() != (problem.tx_dim(), problem.source_dim()) {
        return Err(Error::shape("objective F", (problem.tx_dim(), problem.source_dim()), f.shape()));
    }
    let n = problem.n() as f64;
    let mut data = 0.0;
    let mut noise = 0.0;
    for ((y, ch), g) in problem.targets.iter().zip(&problem.channels).zip(gs) {
        if g.shape() != (y.nrows(), ch.rx_dim()) {
            return Err(Error::shape("objective G_l", (y.nrows(), ch.rx_dim()), g.shape()));
        }
        let ghf = matmul(&matmul(g, ch.lifted()), f);
        data += frobenius_sq(&(y - matmul(&ghf, &problem.x)));
        noise += noise_trace(g, &ch.noise_covariance());
    }
    let lf = l_count as f64;
    Ok(match weighting {
        NoiseWeighting::PerUser => (data / n + noise) / lf,
        NoiseWeighting::Literal => data / (lf * n) + noise,
    })
}

/// Scaled augmented Lagrangian with per-user weighting. Returns infinity
/// when `Z` lies outside the trace ball.
pub fn augmented_lagrangian(
    problem: &AlignmentProblem,
    f: &ComplexMatrix,
    gs: &[ComplexMatrix],
    z: &ComplexMatrix,
    u: &ComplexMatrix,
) -> Result<f64> {
    if frobenius_sq(z) > problem.p_t * (1.0 + 1e-12) {
        return Ok(f64::INFINITY);
    }
    let obj = objective_value(problem, f, gs, NoiseWeighting::PerUser)?;
    Ok(obj + problem.rho * frobenius_sq(&(f - z + u)))
}

/// G-step: `G = Y M^H (M M^H + n Σ)^{-1}`, where `n` is the column count of
/// `M`. With a zero noise covariance and rank-deficient `M M^H` the
/// minimum-norm solution is returned.
pub fn g_update(y: &ComplexMatrix, m: &ComplexMatrix, noise_cov: &ComplexMatrix) -> Result<ComplexMatrix> {
    g_update_scaled(y, m, noise_cov, m.ncols() as f64)
}

fn g_update_scaled(
    y: &ComplexMatrix,
    m: &ComplexMatrix,
    noise_cov: &ComplexMatrix,
    noise_scale: f64,
) -> Result<ComplexMatrix> {
    if y.ncols() != m.ncols() {
        return Err(Error::shape("g_update Y", (y.nrows(), m.ncols()), y.shape()));
    }
    let r = m.nrows();
    if noise_cov.shape() != (r, r) {
        return Err(Error::shape("g_update noise covariance", (r, r), noise_cov.shape()));
    }
    let system = hermitian_part(&(gram(m) + noise_cov.map(|z| z * noise_scale)));
    let eig = hermitian_eig(&system)?;
    let lmax = eig.eigenvalues.last().copied().unwrap_or(0.0);
    let lmin = eig.eigenvalues.first().copied().unwrap_or(0.0);
    let noiseless = noise_cov.iter().all(|z| z.norm() == 0.0);
    let floor = RANK_TOL * lmax.max(0.0);
    let inv = if noiseless && lmin <= floor {
        // Minimum-norm fit: null directions of `M M^H` carry only round-off
        // in `Y M^H`, so they are dropped rather than amplified.
        eig.pseudo_inverse(floor)
    } else {
        eig.shifted_inverse(0.0)?
    };
    let g = matmul(&matmul_adj(y, m), &inv);
    ensure_finite(&g, "G-step")?;
    Ok(g)
}

/// Uplink quantities `A_l = (G H)^H (G H)` and `P_l = (G H)^H Y`.
pub fn user_shares(
    g: &ComplexMatrix,
    channel: &MimoChannel,
    y: &ComplexMatrix,
) -> (ComplexMatrix, ComplexMatrix) {
    let gh = matmul(g, channel.lifted());
    let a = hermitian_part(&adj_matmul(&gh, &gh));
    let p = adj_matmul(&gh, y);
    (a, p)
}

/// Downlink product `H F X` (or `F X` when `channel` is `None`).
pub fn downlink_signal(channel: Option<&MimoChannel>, f: &ComplexMatrix, x: &ComplexMatrix) -> ComplexMatrix {
    match channel {
        Some(ch) => matmul(&matmul(ch.lifted(), f), x),
        None => matmul(f, x),
    }
}

/// Terms of the local Sylvester system `A_l F B + n ρ F = C_l`.
#[derive(Debug, Clone)]
pub struct LocalFIngredients<'a> {
    pub a: ComplexMatrix,
    pub b: &'a PilotGram,
    pub c: ComplexMatrix,
}

impl<'a> LocalFIngredients<'a> {
    /// `C_l = n ρ (Z − U) + P_l X^H`.
    pub fn from_shares(
        a: ComplexMatrix,
        p: &ComplexMatrix,
        x: &ComplexMatrix,
        b: &'a PilotGram,
        z: &ComplexMatrix,
        u: &ComplexMatrix,
        rho: f64,
    ) -> Result<Self> {
        let n = x.ncols() as f64;
        if p.ncols() != x.ncols() || p.nrows() != z.nrows() {
            return Err(Error::shape("uplink P_l", (z.nrows(), x.ncols()), p.shape()));
        }
        if a.shape() != (z.nrows(), z.nrows()) {
            return Err(Error::shape("uplink A_l", (z.nrows(), z.nrows()), a.shape()));
        }
        let c = (z - u).map(|v| v * (n * rho)) + matmul_adj(p, x);
        Ok(LocalFIngredients { a, b, c })
    }
}

/// Local F solution `F̂_l` of `A_l F B + n ρ F = C_l`.
pub fn local_f_solve(ing: &LocalFIngredients<'_>, n: usize, rho: f64) -> Result<ComplexMatrix> {
    let ea = hermitian_eig(&ing.a)?;
    sylvester_solve_eig(&ea, &ing.b.eig, n as f64 * rho, &ing.c)
}

/// Mean of the local solutions.
pub fn f_aggregate(locals: &[ComplexMatrix]) -> Result<ComplexMatrix> {
    let first = locals
        .first()
        .ok_or_else(|| Error::invalid("aggregation needs at least one local solution"))?;
    let mut sum = first.clone();
    for f in &locals[1..] {
        if f.shape() != first.shape() {
            return Err(Error::shape("f_aggregate", first.shape(), f.shape()));
        }
        sum += f;
    }
    Ok(sum.map(|z| z / locals.len() as f64))
}

/// Joint F-block minimizer `(Σ A_l) F B + L n ρ F = Σ C_l`.
pub fn f_aggregate_exact(ings: &[LocalFIngredients<'_>], n: usize, rho: f64) -> Result<ComplexMatrix> {
    let first = ings
        .first()
        .ok_or_else(|| Error::invalid("aggregation needs at least one user"))?;
    let mut a = first.a.clone();
    let mut c = first.c.clone();
    for ing in &ings[1..] {
        a += &ing.a;
        c += &ing.c;
    }
    let ea = hermitian_eig(&a)?;
    sylvester_solve_eig(&ea, &first.b.eig, (ings.len() * n) as f64 * rho, &c)
}

/// F-step from the per-user ingredients under the chosen aggregation.
pub fn f_step(ings: &[LocalFIngredients<'_>], n: usize, rho: f64, mode: Aggregation) -> Result<ComplexMatrix> {
    let f = match mode {
        Aggregation::FedAvg => {
            let locals = ings
                .par_iter()
                .map(|ing| local_f_solve(ing, n, rho))
                .collect::<Result<Vec<_>>>()?;
            f_aggregate(&locals)?
        }
        Aggregation::Exact => f_aggregate_exact(ings, n, rho)?,
    };
    ensure_finite(&f, "F-step")?;
    Ok(f)
}

/// Z-step: projection of `F + U` onto the trace ball.
pub fn z_update(f: &ComplexMatrix, u: &ComplexMatrix, p_t: f64) -> Result<ComplexMatrix> {
    trace_ball_project(&(f + u), p_t)
}

/// Scaled dual update `U + F − Z`.
pub fn u_update(u: &ComplexMatrix, f: &ComplexMatrix, z: &ComplexMatrix) -> ComplexMatrix {
    u + f - z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Iteration index, starting at 1.
    pub t: usize,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub power_f: f64,
    pub power_z: f64,
    /// Augmented Lagrangian before the G-step, after it, and after the
    /// F-step (dual fixed). Only filled when tracking is enabled.
    pub lagrangian: Option<[f64; 3]>,
}

#[derive(Debug, Clone)]
pub struct AdmmState {
    pub f: ComplexMatrix,
    pub z: ComplexMatrix,
    pub u: ComplexMatrix,
    pub gs: Vec<ComplexMatrix>,
    pub t: usize,
    pub trace: Vec<IterationRecord>,
}

impl AdmmState {
    /// `F⁽⁰⁾` with i.i.d. CN(0,1) entries rescaled so `tr(F F^H) = P_T`,
    /// `Z⁽⁰⁾ = U⁽⁰⁾ = 0`, and zero equalizers.
    pub fn initial(problem: &AlignmentProblem, seed: u64) -> Self {
        let mut rng = substream(seed, rng::ROLE_INIT, 0);
        let (rows, cols) = (problem.tx_dim(), problem.source_dim());
        let raw = complex_gaussian(rows, cols, 1.0, &mut rng);
        let scale = (problem.p_t / frobenius_sq(&raw)).sqrt();
        let f = raw.map(|z| z * scale);
        let gs = problem
            .targets
            .iter()
            .zip(&problem.channels)
            .map(|(y, ch)| ComplexMatrix::zeros(y.nrows(), ch.rx_dim()))
            .collect();
        AdmmState {
            z: ComplexMatrix::zeros(rows, cols),
            u: ComplexMatrix::zeros(rows, cols),
            f,
            gs,
            t: 0,
            trace: Vec::new(),
        }
    }

    /// Pre-equalizer actually deployed: the last `F` projected onto the
    /// power budget.
    pub fn deployed_precoder(&self, p_t: f64) -> Result<ComplexMatrix> {
        trace_ball_project(&self.f, p_t)
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.trace.last().map(|r| r.objective)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmOptions {
    pub iterations: usize,
    /// Stop once both residuals fall below this value.
    pub stop_tol: Option<f64>,
    pub aggregation: Aggregation,
    pub weighting: NoiseWeighting,
    pub track_lagrangian: bool,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        AdmmOptions {
            iterations: 30,
            stop_tol: None,
            aggregation: Aggregation::FedAvg,
            weighting: NoiseWeighting::PerUser,
            track_lagrangian: false,
        }
    }
}

/// G-step shared by the centralized runner and the user nodes.
pub fn user_g_step(
    m: &ComplexMatrix,
    y: &ComplexMatrix,
    channel: &MimoChannel,
    users: usize,
    weighting: NoiseWeighting,
) -> Result<ComplexMatrix> {
    let scale = weighting.g_step_scale(m.ncols(), users);
    g_update_scaled(y, m, &channel.noise_covariance(), scale)
}

/// Applies the Z and U steps and appends the iteration record.
pub(crate) fn finish_iteration(
    problem: &AlignmentProblem,
    state: &mut AdmmState,
    f_new: ComplexMatrix,
    gs_new: Vec<ComplexMatrix>,
    options: &AdmmOptions,
    lagrangian: Option<[f64; 3]>,
) -> Result<()> {
    let z_new = z_update(&f_new, &state.u, problem.p_t)
        .map_err(|e| step_error(e, "Z-step", state.t + 1))?;
    let u_new = u_update(&state.u, &f_new, &z_new);
    ensure_finite(&u_new, &format!("U-step at iteration {}", state.t + 1))?;
    let dual_residual = problem.rho * frobenius_sq(&(&z_new - &state.z)).sqrt();
    let primal_residual = frobenius_sq(&(&f_new - &z_new)).sqrt();
    let objective = objective_value(problem, &f_new, &gs_new, options.weighting)?;
    state.t += 1;
    state.trace.push(IterationRecord {
        t: state.t,
        objective,
        primal_residual,
        dual_residual,
        power_f: frobenius_sq(&f_new),
        power_z: frobenius_sq(&z_new),
        lagrangian,
    });
    state.f = f_new;
    state.z = z_new;
    state.u = u_new;
    state.gs = gs_new;
    Ok(())
}

fn step_error(e: Error, step: &str, t: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{step} at iteration {t}: {what}")),
        other => other,
    }
}

pub(crate) fn converged(state: &AdmmState, options: &AdmmOptions) -> bool {
    match (options.stop_tol, state.trace.last()) {
        (Some(tol), Some(r)) => r.primal_residual < tol && r.dual_residual < tol,
        _ => false,
    }
}

/// One centralized ADMM iteration.
pub fn centralized_step(problem: &AlignmentProblem, state: &mut AdmmState, options: &AdmmOptions) -> Result<()> {
    let t = state.t + 1;
    let users = problem.num_users();
    let f = &state.f;
    let l_before = if options.track_lagrangian {
        Some(augmented_lagrangian(problem, f, &state.gs, &state.z, &state.u)?)
    } else {
        None
    };

    let per_user = (0..users)
        .into_par_iter()
        .map(|l| {
            let ch = &problem.channels[l];
            let y = &problem.targets[l];
            let m = downlink_signal(Some(ch), f, &problem.x);
            let g = user_g_step(&m, y, ch, users, options.weighting)?;
            let (a, p) = user_shares(&g, ch, y);
            Ok((g, a, p))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| step_error(e, "G-step", t))?;

    let gs_new: Vec<ComplexMatrix> = per_user.iter().map(|(g, _, _)| g.clone()).collect();
    let l_after_g = if options.track_lagrangian {
        Some(augmented_lagrangian(problem, f, &gs_new, &state.z, &state.u)?)
    } else {
        None
    };

    let ings = per_user
        .into_iter()
        .map(|(_, a, p)| {
            LocalFIngredients::from_shares(a, &p, &problem.x, &problem.pilot_gram, &state.z, &state.u, problem.rho)
        })
        .collect::<Result<Vec<_>>>()?;
    let f_new = f_step(&ings, problem.n(), problem.rho, options.aggregation)
        .map_err(|e| step_error(e, "F-step", t))?;

    let lagrangian = match (l_before, l_after_g) {
        (Some(b), Some(g)) => {
            let after_f = augmented_lagrangian(problem, &f_new, &gs_new, &state.z, &state.u)?;
            Some([b, g, after_f])
        }
        _ => None,
    };
    finish_iteration(problem, state, f_new, gs_new, options, lagrangian)
}

/// Reference ADMM loop with every block update computed in one place.
pub fn run_centralized(problem: &AlignmentProblem, options: &AdmmOptions, init: AdmmState) -> Result<AdmmState> {
    if options.iterations == 0 {
        return Err(Error::invalid("iteration count must be at least 1"));
    }
    let mut state = init;
    for _ in 0..options.iterations {
        centralized_step(problem, &mut state, options)?;
        if converged(&state, options) {
            break;
        }
    }
    Ok(state)
}

/// F-block iterations with frozen equalizers: repeated F, Z and U steps.
/// This solves the power-constrained precoder problem for fixed `{G_l}`.
pub fn run_frozen_g(
    problem: &AlignmentProblem,
    gs: &[ComplexMatrix],
    options: &AdmmOptions,
    init: AdmmState,
) -> Result<AdmmState> {
    if gs.len() != problem.num_users() {
        return Err(Error::invalid(format!("{} equalizers for {} users", gs.len(), problem.num_users())));
    }
    let shares: Vec<(ComplexMatrix, ComplexMatrix)> = gs
        .iter()
        .zip(problem.channels.iter().zip(&problem.targets))
        .map(|(g, (ch, y))| user_shares(g, ch, y))
        .collect();
    let mut state = init;
    state.gs = gs.to_vec();
    for _ in 0..options.iterations.max(1) {
        let ings = shares
            .iter()
            .map(|(a, p)| {
                LocalFIngredients::from_shares(a.clone(), p, &problem.x, &problem.pilot_gram, &state.z, &state.u, problem.rho)
            })
            .collect::<Result<Vec<_>>>()?;
        let f_new = f_step(&ings, problem.n(), problem.rho, options.aggregation)?;
        finish_iteration(problem, &mut state, f_new, gs.to_vec(), options, None)?;
        if converged(&state, options) {
            break;
        }
    }
    Ok(state)
}

/// Largest `tr(Z Z^H)` seen across the trace.
pub fn max_power_z(trace: &[IterationRecord]) -> f64 {
    trace.iter().map(|r| r.power_z).fold(0.0, f64::max)
}



#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c64, kron_vec_solve, max_abs_diff};
    use approx::assert_abs_diff_eq;

    fn scalar(v: f64) -> ComplexMatrix {
        ComplexMatrix::from_element(1, 1, c64(v, 0.0))
    }

    #[test]
    fn g_update_scalar_and_identity() {
        let g = g_update(&scalar(2.0), &scalar(1.0), &scalar(1.0)).unwrap();
        assert_abs_diff_eq!(g[(0, 0)].re, 1.0, epsilon = 1e-14);

        let mut rng = substream(1, "g", 0);
        let m = complex_gaussian(3, 3, 1.0, &mut rng);
        let g = g_update(&m, &m, &ComplexMatrix::zeros(3, 3)).unwrap();
        assert!(max_abs_diff(&g, &ComplexMatrix::identity(3, 3)) < 1e-8);
    }

    fn g_gradient(y: &ComplexMatrix, m: &ComplexMatrix, g: &ComplexMatrix, sigma: &ComplexMatrix) -> ComplexMatrix {
        // d/dG* of (1/n)‖Y − GM‖² + tr(GΣG^H)
        let n = m.ncols() as f64;
        (matmul_adj(&(matmul(g, m) - y), m)).map(|z| z / n) + g * sigma
    }

    #[test]
    fn g_update_is_first_order_optimal() {
        let mut rng = substream(2, "g", 0);
        let m = complex_gaussian(4, 30, 1.0, &mut rng);
        let y = complex_gaussian(3, 30, 1.0, &mut rng);
        let sigma = ComplexMatrix::identity(4, 4).map(|z| z * 0.05);
        let g = g_update(&y, &m, &sigma).unwrap();
        assert!(frobenius_sq(&g_gradient(&y, &m, &g, &sigma)).sqrt() < 1e-8);
        let worse = &g + ComplexMatrix::from_element(3, 4, c64(1e-3, 0.0));
        assert!(user_objective(&y, &m, &g, &sigma) < user_objective(&y, &m, &worse, &sigma));
    }

    #[test]
    fn noiseless_rank_deficient_g_step_uses_pseudo_inverse() {
        let mut rng = substream(3, "g", 0);
        let m = complex_gaussian(4, 2, 1.0, &mut rng);
        let y = complex_gaussian(2, 2, 1.0, &mut rng);
        let g = g_update(&y, &m, &ComplexMatrix::zeros(4, 4)).unwrap();
        assert!(max_abs_diff(&matmul(&g, &m), &y) < 1e-6);
    }

    fn psd(n: usize, rng: &mut crate::rng::SimRng) -> ComplexMatrix {
        gram(&complex_gaussian(n, n + 1, 1.0, rng))
    }

    #[test]
    fn local_solve_examples() {
        // G H = I, X = I_p, Z − U = 0: F̂ = Y / (1 + p ρ)
        let p = 3;
        let rho = 0.5;
        let x = ComplexMatrix::identity(p, p);
        let mut rng = substream(4, "f", 0);
        let y = complex_gaussian(p, p, 1.0, &mut rng);
        let b = PilotGram::new(&x).unwrap();
        let zero = ComplexMatrix::zeros(p, p);
        let ing = LocalFIngredients::from_shares(ComplexMatrix::identity(p, p), &y, &x, &b, &zero, &zero, rho).unwrap();
        let f = local_f_solve(&ing, p, rho).unwrap();
        assert!(max_abs_diff(&f, &y.map(|z| z / (1.0 + p as f64 * rho))) < 1e-12);

        // A = 0, P = 0: F̂ = Z − U
        let z = complex_gaussian(p, p, 1.0, &mut rng);
        let u = complex_gaussian(p, p, 1.0, &mut rng);
        let ing = LocalFIngredients::from_shares(zero.clone(), &zero, &x, &b, &z, &u, rho).unwrap();
        let f = local_f_solve(&ing, p, rho).unwrap();
        assert!(max_abs_diff(&f, &(&z - &u)) < 1e-12);
    }

    #[test]
    fn local_solve_matches_kron_and_is_stationary() {
        let mut rng = substream(5, "f", 0);
        let (rows, cols, n, rho) = (3, 2, 6, 0.7);
        let x = complex_gaussian(cols, n, 1.0, &mut rng);
        let gh = complex_gaussian(2, rows, 1.0, &mut rng);
        let y = complex_gaussian(2, n, 1.0, &mut rng);
        let z = complex_gaussian(rows, cols, 0.2, &mut rng);
        let u = complex_gaussian(rows, cols, 0.2, &mut rng);
        let a = hermitian_part(&adj_matmul(&gh, &gh));
        let p = adj_matmul(&gh, &y);
        let b = PilotGram::new(&x).unwrap();
        let ing = LocalFIngredients::from_shares(a.clone(), &p, &x, &b, &z, &u, rho).unwrap();
        let f = local_f_solve(&ing, n, rho).unwrap();
        let oracle = kron_vec_solve(&a, &b.matrix, n as f64 * rho, &ing.c).unwrap();
        assert!(max_abs_diff(&f, &oracle) < 1e-10);
        // gradient of (1/n)‖Y − GH F X‖² + ρ‖F − Z + U‖² with respect to F*
        let grad = adj_matmul(&gh, &(matmul(&matmul(&gh, &f), &x) - &y)) * x.adjoint() / c64(n as f64, 0.0)
            + (&f - &z + &u).map(|v| v * rho);
        assert!(frobenius_sq(&grad).sqrt() < 1e-7);
        let resid = &a * &f * &b.matrix + f.map(|v| v * n as f64 * rho) - &ing.c;
        assert!(frobenius_sq(&resid).sqrt() < 1e-9 * (1.0 + frobenius_sq(&ing.c).sqrt()));
        let _ = psd(2, &mut rng);
    }

    #[test]
    fn aggregation_examples() {
        let f = scalar(5.0);
        assert_eq!(f_aggregate(&[f.clone(), f.clone()]).unwrap(), f);
        assert_abs_diff_eq!(f_aggregate(&[scalar(2.0), scalar(4.0)]).unwrap()[(0, 0)].re, 3.0);
        assert!(f_aggregate(&[]).is_err());
        assert!(f_aggregate(&[scalar(1.0), ComplexMatrix::zeros(2, 1)]).is_err());
    }

    #[test]
    fn single_user_aggregation_modes_coincide() {
        let mut rng = substream(6, "agg", 0);
        let x = complex_gaussian(3, 10, 1.0, &mut rng);
        let b = PilotGram::new(&x).unwrap();
        let a = psd(4, &mut rng);
        let p = complex_gaussian(4, 10, 1.0, &mut rng);
        let z = complex_gaussian(4, 3, 1.0, &mut rng);
        let u = complex_gaussian(4, 3, 1.0, &mut rng);
        let ing = LocalFIngredients::from_shares(a, &p, &x, &b, &z, &u, 1.0).unwrap();
        let avg = f_step(std::slice::from_ref(&ing), 10, 1.0, Aggregation::FedAvg).unwrap();
        let exact = f_step(std::slice::from_ref(&ing), 10, 1.0, Aggregation::Exact).unwrap();
        assert!(max_abs_diff(&avg, &exact) < 1e-10);
    }

    #[test]
    fn dual_update_examples() {
        let u = scalar(0.3);
        assert!(max_abs_diff(&u_update(&u, &scalar(2.0), &scalar(2.0)), &u) < 1e-15);
        let i2 = ComplexMatrix::identity(2, 2);
        assert_eq!(u_update(&ComplexMatrix::zeros(2, 2), &i2, &ComplexMatrix::zeros(2, 2)), i2);
    }

    #[test]
    fn objective_with_zero_equalizers() {
        let mut rng = substream(7, "obj", 0);
        let x = complex_gaussian(2, 5, 1.0, &mut rng);
        let ys = vec![complex_gaussian(3, 5, 1.0, &mut rng), complex_gaussian(2, 5, 1.0, &mut rng)];
        let chs = vec![
            MimoChannel::rayleigh(2, 2, 1, 0.1, &mut rng).unwrap(),
            MimoChannel::rayleigh(2, 2, 1, 0.1, &mut rng).unwrap(),
        ];
        let prob = AlignmentProblem::new(x, ys.clone(), chs, 1.0, 1.0).unwrap();
        let gs = vec![ComplexMatrix::zeros(3, 2), ComplexMatrix::zeros(2, 2)];
        let f = complex_gaussian(2, 2, 1.0, &mut rng);
        let expected = (frobenius_sq(&ys[0]) + frobenius_sq(&ys[1])) / 10.0;
        for w in [NoiseWeighting::PerUser, NoiseWeighting::Literal] {
            assert_abs_diff_eq!(objective_value(&prob, &f, &gs, w).unwrap(), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn problem_validation() {
        let mut rng = substream(8, "p", 0);
        let x = complex_gaussian(2, 5, 1.0, &mut rng);
        let ch = MimoChannel::rayleigh(2, 2, 1, 0.1, &mut rng).unwrap();
        let y = complex_gaussian(2, 4, 1.0, &mut rng);
        assert!(AlignmentProblem::new(x.clone(), vec![y], vec![ch.clone()], 1.0, 1.0).is_err());
        let y = complex_gaussian(2, 5, 1.0, &mut rng);
        assert!(AlignmentProblem::new(x.clone(), vec![y.clone()], vec![ch.clone()], 0.0, 1.0).is_err());
        assert!(AlignmentProblem::new(x.clone(), vec![y.clone()], vec![ch.clone()], 1.0, -1.0).is_err());
        assert!(AlignmentProblem::new(x, vec![], vec![], 1.0, 1.0).is_err());
    }

    #[test]
    fn zero_iterations_rejected() {
        let mut rng = substream(9, "p", 0);
        let x = complex_gaussian(2, 5, 1.0, &mut rng);
        let ch = MimoChannel::rayleigh(2, 2, 1, 0.1, &mut rng).unwrap();
        let y = complex_gaussian(2, 5, 1.0, &mut rng);
        let prob = AlignmentProblem::new(x, vec![y], vec![ch], 1.0, 1.0).unwrap();
        let opts = AdmmOptions { iterations: 0, ..AdmmOptions::default() };
        assert!(run_centralized(&prob, &opts, AdmmState::initial(&prob, 1)).is_err());
    }

    #[test]
    fn initial_state_respects_budget() {
        let mut rng = substream(10, "p", 0);
        let x = complex_gaussian(3, 5, 1.0, &mut rng);
        let ch = MimoChannel::rayleigh(2, 2, 2, 0.1, &mut rng).unwrap();
        let y = complex_gaussian(2, 5, 1.0, &mut rng);
        let prob = AlignmentProblem::new(x, vec![y], vec![ch], 0.7, 1.0).unwrap();
        let s = AdmmState::initial(&prob, 3);
        assert_eq!(s.f.shape(), (4, 3));
        assert_abs_diff_eq!(frobenius_sq(&s.f), 0.7, epsilon = 1e-12);
        assert!(s.z.iter().all(|z| z.norm() == 0.0));
    }
}
