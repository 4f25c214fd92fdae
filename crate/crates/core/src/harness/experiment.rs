use std::time::Instant;

use rayon::prelude::*;

use crate::admm::AdmmState;
use crate::baselines::{equalized_output, run_baseline, run_multilink, MethodInputs, MethodOutput, MethodParams};
use crate::channel::{noise_sigma_from_snr, MimoChannel};
use crate::error::{Error, Result};
use crate::federation::{build_nodes, run_federated};
use crate::linalg::{frobenius_sq, RealMatrix, Whitener, WHITEN_EPS};
use crate::rng::{self, substream};
use crate::semantic::{generate_population, pair_matrix, pilot_indices, unpair_matrix, Population, RealLatentSet};

use super::config::{ExperimentConfig, Method};
use super::metrics::{accuracy, centroid_fit, network_mse, CentroidClassifier, MetricsRecord};

/// One seed's data: whitened pilots and test columns, channels, and the
/// native-space classifiers used for the accuracy proxy.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub uses: usize,
    pub x_train: RealMatrix,
    pub x_test: RealMatrix,
    pub y_train: Vec<RealMatrix>,
    pub y_test: Vec<RealMatrix>,
    pub user_whiteners: Vec<Whitener>,
    pub classifiers: Vec<CentroidClassifier>,
    pub test_labels: Vec<usize>,
    pub channels: Vec<MimoChannel>,
}

impl Scenario {
    pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Scenario> {
        let pop = generate_population(&cfg.population(seed))?;
        Scenario::from_population(cfg, &pop, seed)
    }

    pub fn from_population(cfg: &ExperimentConfig, pop: &Population, seed: u64) -> Result<Scenario> {
        Scenario::from_sets(cfg, &pop.ap, &pop.users, seed)
    }

    /// Splits columns into train and test, keeps a pilot subset of the train
    /// columns, and whitens every agent with pilot statistics.
    pub fn from_sets(cfg: &ExperimentConfig, ap: &RealLatentSet, users: &[RealLatentSet], seed: u64) -> Result<Scenario> {
        cfg.validate()?;
        let n = ap.n();
        if users.is_empty() || users.iter().any(|u| u.n() != n || u.labels != ap.labels) {
            return Err(Error::invalid("user sets must share the AP's samples and labels"));
        }
        let n_train = (cfg.train_fraction * n as f64).round() as usize;
        if n_train < 2 || n_train >= n {
            return Err(Error::Config(format!("train_fraction leaves {n_train} of {n} columns")));
        }
        let train_idx: Vec<usize> = (0..n_train).collect();
        let test_idx: Vec<usize> = (n_train..n).collect();
        let pilot_idx: Vec<usize> = pilot_indices(&ap.labels[..n_train], cfg.pilot_fraction, seed, cfg.pilot_sampling)?;
        if pilot_idx.len() < 2 {
            return Err(Error::Config("fewer than two pilots".into()));
        }
        let ap_pilots = ap.select_columns(&pilot_idx);
        let ap_white = Whitener::fit(&ap_pilots.features, WHITEN_EPS)?;
        let x_train = ap_white.apply(&ap_pilots.features)?;
        let x_test = ap_white.apply(&ap.select_columns(&test_idx).features)?;

        let mut y_train = Vec::new();
        let mut y_test = Vec::new();
        let mut user_whiteners = Vec::new();
        let mut classifiers = Vec::new();
        for u in users {
            let pilots = u.select_columns(&pilot_idx);
            let w = Whitener::fit(&pilots.features, WHITEN_EPS)?;
            y_train.push(w.apply(&pilots.features)?);
            y_test.push(w.apply(&u.select_columns(&test_idx).features)?);
            user_whiteners.push(w);
            classifiers.push(centroid_fit(&u.select_columns(&train_idx))?);
        }

        let uses = cfg.resolved_uses()?;
        let sigma2 = noise_sigma_from_snr(cfg.snr_db, cfg.p_t)?;
        let channels = (0..users.len())
            .map(|l| {
                let mut rng = substream(seed, rng::ROLE_CHANNEL, l as u64);
                MimoChannel::rayleigh(cfg.n_r, cfg.n_t, uses, sigma2, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Scenario {
            seed,
            uses,
            x_train,
            x_test,
            y_train,
            y_test,
            user_whiteners,
            classifiers,
            test_labels: test_idx.iter().map(|&i| ap.labels[i]).collect(),
            channels,
        })
    }

    pub fn inputs(&self) -> MethodInputs<'_> {
        MethodInputs {
            x_train: &self.x_train,
            x_test: &self.x_test,
            y_train: &self.y_train,
            channels: &self.channels,
            seed: self.seed,
        }
    }

    /// Mean nearest-centroid accuracy over users, after mapping whitened
    /// estimates back to each user's native space.
    pub fn accuracy(&self, predictions: &[RealMatrix]) -> Result<f64> {
        let mut total = 0.0;
        for (l, p) in predictions.iter().enumerate() {
            let native = self.user_whiteners[l].invert(p)?;
            let labels = self.classifiers[l].predict_all(&native)?;
            total += accuracy(&labels, &self.test_labels)?;
        }
        Ok(total / predictions.len() as f64)
    }

    /// Network MSE in the users' native latent coordinates, after undoing
    /// each user's whitening on both targets and predictions.
    pub fn native_mse(&self, predictions: &[RealMatrix]) -> Result<f64> {
        if predictions.len() != self.y_test.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} users",
                predictions.len(),
                self.y_test.len()
            )));
        }
        let mut targets = Vec::with_capacity(predictions.len());
        let mut native = Vec::with_capacity(predictions.len());
        for (l, p) in predictions.iter().enumerate() {
            targets.push(self.user_whiteners[l].invert(&self.y_test[l])?);
            native.push(self.user_whiteners[l].invert(p)?);
        }
        network_mse(&targets, &native)
    }

    /// Accuracy when every user receives its own test latents unchanged.
    pub fn native_accuracy(&self) -> Result<f64> {
        self.accuracy(&self.y_test)
    }
}

pub fn method_params(cfg: &ExperimentConfig, uses: usize) -> MethodParams {
    MethodParams {
        uses,
        p_t: cfg.p_t,
        rho: cfg.rho,
        iterations: cfg.iterations,
        aggregation: cfg.aggregation,
        weighting: cfg.weighting,
        csi: cfg.csi,
        snr_db: cfg.snr_db,
        stop_tol: cfg.stop_tol,
    }
}

/// Proposed scheme: message-level federated ADMM, then the deployed
/// precoder and learned equalizers on the test columns.
pub fn run_proposed(inputs: &MethodInputs<'_>, params: &MethodParams) -> Result<MethodOutput> {
    let x = pair_matrix(inputs.x_train)?;
    let targets = inputs.y_train.iter().map(pair_matrix).collect::<Result<Vec<_>>>()?;
    let problem = crate::admm::AlignmentProblem::new(x, targets, inputs.channels.to_vec(), params.p_t, params.rho)?;
    let init = AdmmState::initial(&problem, inputs.seed);
    let (mut ap, mut users) = build_nodes(&problem, &init, params.aggregation, params.csi)?;
    let run = run_federated(&mut ap, &mut users, &params.admm_options(), &problem)?;
    let f = run.state.deployed_precoder(params.p_t)?;
    let x_test = pair_matrix(inputs.x_test)?;
    let predictions = inputs
        .channels
        .iter()
        .zip(&run.state.gs)
        .enumerate()
        .map(|(l, (ch, g))| equalized_output(g, &f, ch, &x_test, inputs.seed, l).map(|e| unpair_matrix(&e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MethodOutput {
        predictions,
        downlink_payload: run.ledger.total_downlink(),
        uplink_payload: run.ledger.total_uplink(),
        iterations_run: run.state.t,
        precoder_power: vec![frobenius_sq(&f)],
        ledger: Some(run.ledger),
    })
}

pub fn run_method(method: Method, scenario: &Scenario, params: &MethodParams) -> Result<MethodOutput> {
    let inputs = scenario.inputs();
    match method {
        Method::Federated => run_proposed(&inputs, params),
        Method::Multilink => run_multilink(&inputs, params),
        Method::FirstK | Method::TopK => run_baseline(method.selection().expect("selection method"), &inputs, params),
    }
}

/// Full pipeline for one `(config, seed)` pair.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<MetricsRecord> {
    run_seed_detailed(cfg, seed).map(|(r, _)| r)
}

/// [`run_seed`] plus the raw method output.
pub fn run_seed_detailed(cfg: &ExperimentConfig, seed: u64) -> Result<(MetricsRecord, MethodOutput)> {
    let start = Instant::now();
    let scenario = Scenario::prepare(cfg, seed)?;
    evaluate(cfg, &scenario, start)
}

/// Runs the configured method on a prepared scenario and scores it.
pub fn evaluate(cfg: &ExperimentConfig, scenario: &Scenario, start: Instant) -> Result<(MetricsRecord, MethodOutput)> {
    let params = method_params(cfg, scenario.uses);
    let out = run_method(cfg.method, scenario, &params)?;
    let mse = scenario.native_mse(&out.predictions)?;
    let acc = scenario.accuracy(&out.predictions)?;
    let record = MetricsRecord {
        seed: scenario.seed,
        method: cfg.method,
        users: scenario.channels.len(),
        uses: scenario.uses,
        n_t: cfg.n_t,
        n_r: cfg.n_r,
        snr_db: cfg.snr_db,
        zeta: cfg.effective_zeta()?,
        pilot_fraction: cfg.pilot_fraction,
        heterogeneity: cfg.heterogeneity,
        network_mse: mse,
        accuracy: acc,
        downlink_payload: out.downlink_payload,
        uplink_payload: out.uplink_payload,
        wall_ms: start.elapsed().as_millis() as u64,
        iterations_run: out.iterations_run,
    };
    Ok((record, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedFailure {
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<SeedFailure>,
}

/// Runs every seed; a failing seed is reported and the others proceed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let results: Vec<(u64, Result<MetricsRecord>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(cfg, seed)))
        .collect();
    let mut report = ExperimentReport::default();
    for (seed, r) in results {
        match r {
            Ok(rec) => report.records.push(rec),
            Err(e) => report.failures.push(SeedFailure { seed, message: e.to_string() }),
        }
    }
    Ok(report)
}
