use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::admm::{Aggregation, NoiseWeighting};
use crate::baselines::Selection;
use crate::error::{Error, Result};
use crate::semantic::{Heterogeneity, PilotSampling, PopulationConfig};

/// Default seed list.
pub const DEFAULT_SEEDS: [u64; 6] = [27, 42, 100, 123, 144, 200];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Federated,
    Multilink,
    FirstK,
    TopK,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Federated, Method::Multilink, Method::FirstK, Method::TopK];

    pub fn selection(self) -> Option<Selection> {
        match self {
            Method::FirstK => Some(Selection::FirstK),
            Method::TopK => Some(Selection::TopK),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Federated => "federated",
            Method::Multilink => "multilink",
            Method::FirstK => "first_k",
            Method::TopK => "top_k",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "federated" => Ok(Method::Federated),
            "multilink" => Ok(Method::Multilink),
            "first_k" => Ok(Method::FirstK),
            "top_k" => Ok(Method::TopK),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// One experiment. Config files use `key = value` lines whose keys are the
/// field names below.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub users: usize,
    pub source_dim: usize,
    pub ap_dim: usize,
    pub user_dims: Vec<usize>,
    pub num_classes: usize,
    pub samples: usize,
    pub heterogeneity: Heterogeneity,
    pub perturbation: f64,
    pub nonlinear: bool,
    pub class_radius: f64,
    pub within_class_std: f64,
    pub n_t: usize,
    pub n_r: usize,
    /// Channel uses `K`; when unset, `K = round(zeta · d/2)`.
    pub uses: Option<usize>,
    pub zeta: f64,
    pub snr_db: f64,
    pub p_t: f64,
    pub rho: f64,
    pub iterations: usize,
    pub stop_tol: Option<f64>,
    pub aggregation: Aggregation,
    pub weighting: NoiseWeighting,
    pub csi: bool,
    pub pilot_fraction: f64,
    pub pilot_sampling: PilotSampling,
    pub train_fraction: f64,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let pop = PopulationConfig::default();
        ExperimentConfig {
            method: Method::Federated,
            users: pop.num_users,
            source_dim: pop.source_dim,
            ap_dim: pop.ap_dim,
            user_dims: pop.user_dims,
            num_classes: pop.num_classes,
            samples: pop.samples,
            heterogeneity: pop.heterogeneity,
            perturbation: pop.perturbation,
            nonlinear: pop.nonlinear,
            class_radius: pop.class_radius,
            within_class_std: pop.within_class_std,
            n_t: 4,
            n_r: 4,
            uses: None,
            zeta: 0.25,
            snr_db: 20.0,
            p_t: 1.0,
            rho: 1.0,
            iterations: 30,
            stop_tol: None,
            aggregation: Aggregation::FedAvg,
            weighting: NoiseWeighting::PerUser,
            csi: true,
            pilot_fraction: 1.0,
            pilot_sampling: PilotSampling::Uniform,
            train_fraction: 0.8,
            seeds: DEFAULT_SEEDS.to_vec(),
            output: None,
        }
    }
}

pub const CONFIG_KEYS: [&str; 29] = [
    "method",
    "users",
    "source_dim",
    "ap_dim",
    "user_dims",
    "num_classes",
    "samples",
    "heterogeneity",
    "perturbation",
    "nonlinear",
    "class_radius",
    "within_class_std",
    "n_t",
    "n_r",
    "uses",
    "zeta",
    "snr_db",
    "p_t",
    "rho",
    "iterations",
    "stop_tol",
    "aggregation",
    "weighting",
    "csi",
    "pilot_fraction",
    "pilot_sampling",
    "train_fraction",
    "seeds",
    "output",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    match value {
        "" | "auto" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "method" => self.method = parse(key, v)?,
            "users" => self.users = parse(key, v)?,
            "source_dim" => self.source_dim = parse(key, v)?,
            "ap_dim" => self.ap_dim = parse(key, v)?,
            "user_dims" => self.user_dims = parse_list(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "heterogeneity" => self.heterogeneity = parse(key, v)?,
            "perturbation" => self.perturbation = parse(key, v)?,
            "nonlinear" => self.nonlinear = parse(key, v)?,
            "class_radius" => self.class_radius = parse(key, v)?,
            "within_class_std" => self.within_class_std = parse(key, v)?,
            "n_t" => self.n_t = parse(key, v)?,
            "n_r" => self.n_r = parse(key, v)?,
            "uses" => self.uses = parse_optional(key, v)?,
            "zeta" => self.zeta = parse(key, v)?,
            "snr_db" => self.snr_db = parse(key, v)?,
            "p_t" => self.p_t = parse(key, v)?,
            "rho" => self.rho = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "stop_tol" => self.stop_tol = parse_optional(key, v)?,
            "aggregation" => self.aggregation = parse(key, v)?,
            "weighting" => self.weighting = parse(key, v)?,
            "csi" => self.csi = parse(key, v)?,
            "pilot_fraction" => self.pilot_fraction = parse(key, v)?,
            "pilot_sampling" => self.pilot_sampling = parse(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "output" => self.output = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "method" => self.method.to_string(),
            "users" => self.users.to_string(),
            "source_dim" => self.source_dim.to_string(),
            "ap_dim" => self.ap_dim.to_string(),
            "user_dims" => join(&self.user_dims),
            "num_classes" => self.num_classes.to_string(),
            "samples" => self.samples.to_string(),
            "heterogeneity" => self.heterogeneity.to_string(),
            "perturbation" => self.perturbation.to_string(),
            "nonlinear" => self.nonlinear.to_string(),
            "class_radius" => self.class_radius.to_string(),
            "within_class_std" => self.within_class_std.to_string(),
            "n_t" => self.n_t.to_string(),
            "n_r" => self.n_r.to_string(),
            "uses" => self.uses.map_or_else(|| "auto".into(), |k| k.to_string()),
            "zeta" => self.zeta.to_string(),
            "snr_db" => self.snr_db.to_string(),
            "p_t" => self.p_t.to_string(),
            "rho" => self.rho.to_string(),
            "iterations" => self.iterations.to_string(),
            "stop_tol" => self.stop_tol.map_or_else(|| "none".into(), |t| t.to_string()),
            "aggregation" => self.aggregation.to_string(),
            "weighting" => self.weighting.to_string(),
            "csi" => self.csi.to_string(),
            "pilot_fraction" => self.pilot_fraction.to_string(),
            "pilot_sampling" => self.pilot_sampling.to_string(),
            "train_fraction" => self.train_fraction.to_string(),
            "seeds" => join(&self.seeds),
            "output" => self.output.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ExperimentConfig::from_text(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn population(&self, seed: u64) -> PopulationConfig {
        PopulationConfig {
            num_users: self.users,
            source_dim: self.source_dim,
            ap_dim: self.ap_dim,
            user_dims: self.user_dims.clone(),
            num_classes: self.num_classes,
            samples: self.samples,
            heterogeneity: self.heterogeneity,
            perturbation: self.perturbation,
            nonlinear: self.nonlinear,
            class_radius: self.class_radius,
            within_class_std: self.within_class_std,
            seed,
        }
    }

    /// Even AP dimension after padding.
    pub fn padded_ap_dim(&self) -> usize {
        self.ap_dim + self.ap_dim % 2
    }

    pub fn resolved_uses(&self) -> Result<usize> {
        let k = match self.uses {
            Some(k) => k,
            None => (self.zeta * (self.padded_ap_dim() / 2) as f64).round() as usize,
        };
        if k == 0 {
            return Err(Error::Config(format!(
                "zeta {} gives zero channel uses for d = {}",
                self.zeta,
                self.padded_ap_dim()
            )));
        }
        Ok(k)
    }

    /// `K/(d/2)` for the `K` actually used.
    pub fn effective_zeta(&self) -> Result<f64> {
        Ok(self.resolved_uses()? as f64 / (self.padded_ap_dim() / 2) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        self.population(0).validate()?;
        if self.n_t == 0 || self.n_r == 0 {
            return Err(Error::Config("antenna counts must be at least 1".into()));
        }
        if !(self.p_t > 0.0 && self.rho > 0.0) {
            return Err(Error::Config("p_t and rho must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.pilot_fraction > 0.0 && self.pilot_fraction <= 1.0) {
            return Err(Error::Config(format!("pilot_fraction {} outside (0, 1]", self.pilot_fraction)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction {} outside (0, 1)", self.train_fraction)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        self.resolved_uses()?;
        Ok(())
    }
}
