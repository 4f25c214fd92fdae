//! Latent-space data model.
//!
//! Real latent sets are `dim × n` matrices (one column per sample) with a
//! class label per column. Pairing folds the first half of the rows into the
//! real part and the second half into the imaginary part of a complex set.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c64, ComplexMatrix, RealMatrix};
use crate::rng::{self, substream};

/// Real semantic features, one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RealLatentSet {
    pub agent_id: String,
    pub features: RealMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Row count before any zero padding.
    pub original_dim: usize,
}

impl RealLatentSet {
    pub fn new(
        agent_id: impl Into<String>,
        features: RealMatrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.len() != features.ncols() {
            return Err(Error::invalid(format!(
                "{} labels for {} samples",
                labels.len(),
                features.ncols()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        let original_dim = features.nrows();
        Ok(RealLatentSet {
            agent_id: agent_id.into(),
            features,
            labels,
            num_classes,
            original_dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn n(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_padded(&self) -> bool {
        self.dim() != self.original_dim
    }

    /// Appends a zero row when the dimension is odd.
    pub fn padded_to_even(mut self) -> Self {
        if self.dim() % 2 == 1 {
            let d = self.dim();
            self.features = self.features.insert_row(d, 0.0);
        }
        self
    }

    /// Columns at `idx`, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Self {
        RealLatentSet {
            agent_id: self.agent_id.clone(),
            features: self.features.select_columns(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            original_dim: self.original_dim,
        }
    }

    pub fn with_features(&self, features: RealMatrix) -> Self {
        RealLatentSet {
            features,
            ..self.clone()
        }
    }
}

/// Complex form of a paired latent set.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexLatentSet {
    pub agent_id: String,
    pub features: ComplexMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub original_dim: usize,
}

impl ComplexLatentSet {
    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn n(&self) -> usize {
        self.features.ncols()
    }
}

/// Row `i` of the result is `s[i] + j s[i + dim/2]`.
pub fn pair_matrix(s: &RealMatrix) -> Result<ComplexMatrix> {
    let d = s.nrows();
    if d % 2 != 0 {
        return Err(Error::invalid(format!("cannot pair odd dimension {d}; pad first")));
    }
    let h = d / 2;
    Ok(ComplexMatrix::from_fn(h, s.ncols(), |i, j| c64(s[(i, j)], s[(i + h, j)])))
}

pub fn unpair_matrix(c: &ComplexMatrix) -> RealMatrix {
    let h = c.nrows();
    RealMatrix::from_fn(2 * h, c.ncols(), |i, j| {
        if i < h {
            c[(i, j)].re
        } else {
            c[(i - h, j)].im
        }
    })
}

pub fn pair_to_complex(s: &RealLatentSet) -> Result<ComplexLatentSet> {
    Ok(ComplexLatentSet {
        agent_id: s.agent_id.clone(),
        features: pair_matrix(&s.features)?,
        labels: s.labels.clone(),
        num_classes: s.num_classes,
        original_dim: s.original_dim,
    })
}

pub fn unpair_to_real(c: &ComplexLatentSet) -> RealLatentSet {
    RealLatentSet {
        agent_id: c.agent_id.clone(),
        features: unpair_matrix(&c.features),
        labels: c.labels.clone(),
        num_classes: c.num_classes,
        original_dim: c.original_dim,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heterogeneity {
    /// Every user encoder is a small perturbation of the AP encoder.
    Homogeneous,
    /// Every user draws an independent encoder.
    Heterogeneous,
    /// Even users perturb the AP encoder, odd users perturb an unrelated one.
    Mixed,
}

impl fmt::Display for Heterogeneity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Heterogeneity::Homogeneous => "homogeneous",
            Heterogeneity::Heterogeneous => "heterogeneous",
            Heterogeneity::Mixed => "mixed",
        })
    }
}

impl FromStr for Heterogeneity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homogeneous" => Ok(Heterogeneity::Homogeneous),
            "heterogeneous" => Ok(Heterogeneity::Heterogeneous),
            "mixed" => Ok(Heterogeneity::Mixed),
            other => Err(Error::Config(format!("unknown heterogeneity mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub num_users: usize,
    pub source_dim: usize,
    pub ap_dim: usize,
    /// One entry per user, or a single entry shared by all users.
    pub user_dims: Vec<usize>,
    pub num_classes: usize,
    pub samples: usize,
    pub heterogeneity: Heterogeneity,
    pub perturbation: f64,
    pub nonlinear: bool,
    pub class_radius: f64,
    pub within_class_std: f64,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            num_users: 10,
            source_dim: 32,
            ap_dim: 64,
            user_dims: vec![32, 48, 64, 80, 96],
            num_classes: 10,
            samples: 1000,
            heterogeneity: Heterogeneity::Heterogeneous,
            perturbation: 0.1,
            nonlinear: true,
            class_radius: 3.0,
            within_class_std: 1.0,
            seed: 27,
        }
    }
}

impl PopulationConfig {
    pub fn user_dim(&self, l: usize) -> usize {
        if self.user_dims.len() == 1 {
            self.user_dims[0]
        } else {
            self.user_dims[l % self.user_dims.len()]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_users < 1 {
            return bad("num_users must be at least 1".into());
        }
        if self.source_dim < 2 || self.ap_dim < 2 {
            return bad("source_dim and ap_dim must be at least 2".into());
        }
        if self.user_dims.is_empty() {
            return bad("user_dims must not be empty".into());
        }
        if let Some(d) = self.user_dims.iter().find(|&&d| d < 2) {
            return bad(format!("user dimension {d} below 2"));
        }
        if self.num_classes < 1 || self.samples < self.num_classes {
            return bad(format!(
                "need samples >= num_classes >= 1, got {} and {}",
                self.samples, self.num_classes
            ));
        }
        if !(self.perturbation >= 0.0) || !(self.class_radius >= 0.0) || !(self.within_class_std >= 0.0) {
            return bad("perturbation, class_radius and within_class_std must be non-negative".into());
        }
        Ok(())
    }
}

/// Affine encoder `s -> M s + b`, optionally followed by `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentMap {
    pub matrix: RealMatrix,
    pub offset: DVector<f64>,
}

impl AgentMap {
    fn encode(&self, sources: &RealMatrix, nonlinear: bool) -> RealMatrix {
        let mut z = &self.matrix * sources;
        for mut col in z.column_iter_mut() {
            col += &self.offset;
        }
        if nonlinear {
            z.apply(|x| *x = x.tanh());
        }
        z
    }
}

/// A synthetic AP plus user population observing the same samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub ap: RealLatentSet,
    pub users: Vec<RealLatentSet>,
    pub ap_map: AgentMap,
    pub user_maps: Vec<AgentMap>,
}

/// Disjoint column partitions of one population.
#[derive(Debug, Clone)]
pub struct PopulationSplit {
    pub train: Population,
    pub val: Population,
    pub test: Population,
}

impl Population {
    pub fn n(&self) -> usize {
        self.ap.n()
    }

    /// Same columns for the AP and every user.
    pub fn select_columns(&self, idx: &[usize]) -> Population {
        Population {
            ap: self.ap.select_columns(idx),
            users: self.users.iter().map(|u| u.select_columns(idx)).collect(),
            ap_map: self.ap_map.clone(),
            user_maps: self.user_maps.clone(),
        }
    }

    /// Leading `train` and following `val` fractions of the columns, the
    /// rest as test. Generated samples are already in random order.
    pub fn split(&self, train: f64, val: f64) -> Result<PopulationSplit> {
        if !(train > 0.0 && val >= 0.0 && train + val < 1.0) {
            return Err(Error::invalid(format!("bad split fractions {train}/{val}")));
        }
        let n = self.n();
        let n_train = (train * n as f64).round() as usize;
        let n_val = (val * n as f64).round() as usize;
        if n_train == 0 || n_train + n_val >= n {
            return Err(Error::invalid(format!("split of {n} samples leaves an empty part")));
        }
        let cols = |r: std::ops::Range<usize>| self.select_columns(&r.collect::<Vec<_>>());
        Ok(PopulationSplit {
            train: cols(0..n_train),
            val: cols(n_train..n_train + n_val),
            test: cols(n_train + n_val..n),
        })
    }
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> RealMatrix {
    RealMatrix::from_iterator(
        rows,
        cols,
        (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)),
    )
}

fn draw_map(rows: usize, source_dim: usize, seed: u64, role: &str, index: u64) -> AgentMap {
    let mut rng = substream(seed, role, index);
    let matrix = gaussian_matrix(rows, source_dim, (1.0 / source_dim as f64).sqrt(), &mut rng);
    let offset = gaussian_matrix(rows, 1, 0.5, &mut rng).column(0).into_owned();
    AgentMap { matrix, offset }
}

fn perturbed(base: &AgentMap, rows: usize, eps: f64, seed: u64, l: usize) -> AgentMap {
    let delta = draw_map(rows, base.matrix.ncols(), seed, rng::ROLE_USER_MAP, l as u64);
    AgentMap {
        matrix: base.matrix.rows(0, rows) + delta.matrix * eps,
        offset: base.offset.rows(0, rows) + delta.offset * eps,
    }
}

/// Draws a Gaussian-mixture source population and encodes it through one
/// map per agent.
pub fn generate_population(cfg: &PopulationConfig) -> Result<Population> {
    cfg.validate()?;
    let (p, c, n, seed) = (cfg.source_dim, cfg.num_classes, cfg.samples, cfg.seed);

    let mut rng = substream(seed, rng::ROLE_CLASS_MEANS, 0);
    let mut means = gaussian_matrix(p, c, 1.0, &mut rng);
    for mut col in means.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col *= cfg.class_radius / norm;
        }
    }

    let mut rng = substream(seed, rng::ROLE_SAMPLES, 0);
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);
    let mut sources = gaussian_matrix(p, n, cfg.within_class_std, &mut rng);
    for (j, &l) in labels.iter().enumerate() {
        let mut col = sources.column_mut(j);
        col += means.column(l);
    }

    let max_dim = (0..cfg.num_users).map(|l| cfg.user_dim(l)).max().unwrap_or(2);
    let ap_base = draw_map(max_dim.max(cfg.ap_dim), p, seed, rng::ROLE_AP_MAP, 0);
    let ap_map = perturbed(&ap_base, cfg.ap_dim, 0.0, seed, 0);
    let user_maps: Vec<AgentMap> = (0..cfg.num_users)
        .map(|l| {
            let rows = cfg.user_dim(l);
            match cfg.heterogeneity {
                Heterogeneity::Homogeneous => perturbed(&ap_base, rows, cfg.perturbation, seed, l),
                Heterogeneity::Mixed if l % 2 == 0 => perturbed(&ap_base, rows, cfg.perturbation, seed, l),
                Heterogeneity::Mixed => {
                    let base = draw_map(max_dim, p, seed, rng::ROLE_BASE_MAP, 0);
                    perturbed(&base, rows, cfg.perturbation, seed, l)
                }
                Heterogeneity::Heterogeneous => draw_map(rows, p, seed, rng::ROLE_USER_MAP, l as u64),
            }
        })
        .collect();

    let encode = |id: String, map: &AgentMap| {
        RealLatentSet::new(id, map.encode(&sources, cfg.nonlinear), labels.clone(), c)
            .map(RealLatentSet::padded_to_even)
    };
    let ap = encode("ap".into(), &ap_map)?;
    let users = user_maps
        .iter()
        .enumerate()
        .map(|(l, m)| encode(format!("user{l}"), m))
        .collect::<Result<Vec<_>>>()?;
    Ok(Population {
        ap,
        users,
        ap_map,
        user_maps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotSampling {
    Uniform,
    /// Per-class uniform draws of `ceil(fraction * n_class)` columns.
    Stratified,
}

impl FromStr for PilotSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PilotSampling::Uniform),
            "stratified" => Ok(PilotSampling::Stratified),
            other => Err(Error::Config(format!("unknown pilot sampling `{other}`"))),
        }
    }
}

impl fmt::Display for PilotSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PilotSampling::Uniform => "uniform",
            PilotSampling::Stratified => "stratified",
        })
    }
}

fn keep_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("pilot fraction {fraction} outside (0, 1]")));
    }
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    if k == 0 {
        return Err(Error::invalid("pilot subsampling produced an empty set"));
    }
    Ok(k)
}

/// Sorted column indices kept by pilot subsampling. The same indices are
/// meant to be applied to the AP and every user set of an experiment.
pub fn pilot_indices(
    labels: &[usize],
    fraction: f64,
    seed: u64,
    sampling: PilotSampling,
) -> Result<Vec<usize>> {
    let n = labels.len();
    let k = keep_count(n, fraction)?;
    if k == n {
        return Ok((0..n).collect());
    }
    let mut rng = substream(seed, rng::ROLE_PILOTS, 0);
    let mut idx = match sampling {
        PilotSampling::Uniform => index::sample(&mut rng, n, k).into_vec(),
        PilotSampling::Stratified => {
            let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
            let mut out = Vec::new();
            for c in 0..classes {
                let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
                if members.is_empty() {
                    continue;
                }
                let kc = keep_count(members.len(), fraction)?;
                out.extend(index::sample(&mut rng, members.len(), kc).into_iter().map(|i| members[i]));
            }
            out
        }
    };
    idx.sort_unstable();
    Ok(idx)
}

pub fn subsample_pilots(set: &RealLatentSet, fraction: f64, seed: u64) -> Result<RealLatentSet> {
    let idx = pilot_indices(&set.labels, fraction, seed, PilotSampling::Uniform)?;
    Ok(set.select_columns(&idx))
}

/// Writes the `SEMLAT v1` text format: a header line, a label line, then one
/// line of `n` values per feature row. Zero padding rows are not written.
pub fn save_latent_set(set: &RealLatentSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_latent_set(set, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_latent_set<W: Write>(set: &RealLatentSet, w: &mut W) -> Result<()> {
    let dim = set.original_dim;
    writeln!(w, "SEMLAT v1 {} {} {}", dim, set.n(), set.num_classes)?;
    write_joined(w, set.labels.iter())?;
    for r in 0..dim {
        write_joined(w, set.features.row(r).iter())?;
    }
    Ok(())
}

fn write_joined<W: Write, T: fmt::Display>(w: &mut W, items: impl Iterator<Item = T>) -> Result<()> {
    let mut first = true;
    for x in items {
        if !first {
            w.write_all(b" ")?;
        }
        // f64 Display prints the shortest text that parses back exactly.
        write!(w, "{x}")?;
        first = false;
    }
    w.write_all(b"\n")?;
    Ok(())
}

pub fn load_latent_set(path: impl AsRef<Path>) -> Result<RealLatentSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_latent_set(&text, id)
}

pub fn parse_latent_set(text: &str, agent_id: impl Into<String>) -> Result<RealLatentSet> {
    let err = |line: usize, message: String| Error::Parse { line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (ln, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let fields: Vec<&str> = header.split_ascii_whitespace().collect();
    if fields.len() != 5 || fields[0] != "SEMLAT" || fields[1] != "v1" {
        return Err(err(ln, format!("expected `SEMLAT v1 <dim> <n> <num_classes>`, got `{header}`")));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| err(ln, format!("bad {what} `{s}`")))
    };
    let (dim, n, num_classes) = (num(fields[2], "dim")?, num(fields[3], "n")?, num(fields[4], "num_classes")?);

    let (ln, label_line) = lines
        .next()
        .ok_or_else(|| err(2, "missing label line".into()))?;
    let labels = label_line
        .split_ascii_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| err(ln, format!("bad label `{t}`"))))
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != n {
        return Err(err(ln, format!("expected {n} labels, found {}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(err(ln, format!("label {bad} outside [0, {num_classes})")));
    }

    let mut data = vec![0.0; dim * n];
    for r in 0..dim {
        let (ln, row) = lines
            .next()
            .ok_or_else(|| err(r + 3, format!("missing feature row {r} of {dim}")))?;
        let mut count = 0;
        for (j, tok) in row.split_ascii_whitespace().enumerate() {
            if j >= n {
                return Err(err(ln, format!("row has more than {n} values")));
            }
            let x: f64 = tok
                .parse()
                .map_err(|_| err(ln, format!("bad value `{tok}`")))?;
            if !x.is_finite() {
                return Err(err(ln, format!("non-finite value `{tok}`")));
            }
            // Column-major storage.
            data[j * dim + r] = x;
            count += 1;
        }
        if count != n {
            return Err(err(ln, format!("expected {n} values, found {count}")));
        }
    }
    if let Some((ln, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(err(ln, format!("unexpected content after {dim} feature rows")));
    }
    RealLatentSet::new(agent_id, RealMatrix::from_vec(dim, n, data), labels, num_classes)
        .map(RealLatentSet::padded_to_even)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::lsq_align;
    use proptest::prelude::*;
    use rand::Rng;

    fn column_set(col: &[f64]) -> RealLatentSet {
        RealLatentSet::new("t", RealMatrix::from_column_slice(col.len(), 1, col), vec![0], 1).unwrap()
    }

    #[test]
    fn pairing_examples() {
        let c = pair_to_complex(&column_set(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(c.features[(0, 0)], c64(1.0, 3.0));
        assert_eq!(c.features[(1, 0)], c64(2.0, 4.0));
        let z = pair_to_complex(&column_set(&[0.0; 6])).unwrap();
        assert!(z.features.iter().all(|v| *v == c64(0.0, 0.0)));
        assert_eq!(unpair_to_real(&c).features.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unpair_real_column_has_zero_second_half() {
        let c = ComplexMatrix::from_column_slice(2, 1, &[c64(5.0, 0.0), c64(-1.0, 0.0)]);
        assert_eq!(unpair_matrix(&c).as_slice(), &[5.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn odd_dims_are_rejected_then_padded() {
        let s = column_set(&[1.0, 2.0, 3.0]);
        assert!(pair_to_complex(&s).is_err());
        let p = s.padded_to_even();
        assert_eq!(p.dim(), 4);
        assert_eq!(p.original_dim, 3);
        assert!(p.is_padded());
        assert_eq!(pair_to_complex(&p).unwrap().features[(1, 0)], c64(2.0, 0.0));
    }

    proptest! {
        #[test]
        fn pairing_round_trips(half in 1usize..8, cols in 1usize..40, seed in any::<u64>()) {
            let mut rng = substream(seed, "pair", 0);
            let m = gaussian_matrix(2 * half, cols, 3.0, &mut rng);
            let back = unpair_matrix(&pair_matrix(&m).unwrap());
            prop_assert_eq!(&back, &m);
            let c = pair_matrix(&m).unwrap();
            prop_assert_eq!(pair_matrix(&unpair_matrix(&c)).unwrap(), c);
        }
    }

    #[test]
    fn pairing_round_trips_on_1000_columns() {
        let mut rng = substream(0, "pair1000", 0);
        let m = gaussian_matrix(10, 1000, 1.0, &mut rng);
        assert_eq!(unpair_matrix(&pair_matrix(&m).unwrap()), m);
    }

    fn small_cfg() -> PopulationConfig {
        PopulationConfig {
            num_users: 3,
            source_dim: 6,
            ap_dim: 12,
            user_dims: vec![8, 10, 7],
            num_classes: 4,
            samples: 200,
            ..PopulationConfig::default()
        }
    }

    #[test]
    fn zero_perturbation_homogeneous_users_coincide() {
        let cfg = PopulationConfig {
            user_dims: vec![10],
            heterogeneity: Heterogeneity::Homogeneous,
            perturbation: 0.0,
            ..small_cfg()
        };
        let pop = generate_population(&cfg).unwrap();
        for u in &pop.users[1..] {
            assert_eq!(u.features, pop.users[0].features);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_population(&small_cfg()).unwrap();
        let b = generate_population(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = generate_population(&PopulationConfig { seed: 28, ..small_cfg() }).unwrap();
        assert_ne!(a.ap.features, c.ap.features);
    }

    #[test]
    fn odd_user_dim_is_padded() {
        let pop = generate_population(&small_cfg()).unwrap();
        assert_eq!(pop.users[2].dim(), 8);
        assert_eq!(pop.users[2].original_dim, 7);
        assert!(pop.users[2].features.row(7).iter().all(|&x| x == 0.0));
    }

    fn centered(m: &RealMatrix) -> RealMatrix {
        let mean = m.column_mean();
        let mut c = m.clone();
        for mut col in c.column_iter_mut() {
            col -= &mean;
        }
        c
    }

    #[test]
    fn linear_population_is_exactly_alignable() {
        let cfg = PopulationConfig {
            nonlinear: false,
            ..small_cfg()
        };
        let pop = generate_population(&cfg).unwrap();
        let x = centered(&pop.ap.features);
        for u in &pop.users {
            let y = centered(&u.features);
            let q = lsq_align(&x, &y, 1e-10).unwrap();
            let resid = (&q.matrix * &x - &y).norm() / y.norm();
            assert!(resid < 1e-8, "residual {resid}");
        }
    }

    #[test]
    fn perturbation_controls_map_spread() {
        let spread = |eps: f64| {
            (0..10u64)
                .map(|seed| {
                    let cfg = PopulationConfig {
                        user_dims: vec![10],
                        heterogeneity: Heterogeneity::Homogeneous,
                        perturbation: eps,
                        seed,
                        ..small_cfg()
                    };
                    let maps = generate_population(&cfg).unwrap().user_maps;
                    let mut total = 0.0;
                    let mut pairs = 0;
                    for i in 0..maps.len() {
                        for j in i + 1..maps.len() {
                            total += (&maps[i].matrix - &maps[j].matrix).norm();
                            pairs += 1;
                        }
                    }
                    total / pairs as f64
                })
                .sum::<f64>()
                / 10.0
        };
        let (a, b, c) = (spread(0.05), spread(0.2), spread(0.5));
        assert!(a < b && b < c);
    }

    #[test]
    fn subsample_counts_and_order() {
        let set = RealLatentSet::new("s", RealMatrix::from_fn(2, 100, |i, j| (i * 100 + j) as f64), vec![0; 100], 1)
            .unwrap();
        assert_eq!(subsample_pilots(&set, 1.0, 3).unwrap(), set);
        let half = subsample_pilots(&set, 0.5, 3).unwrap();
        assert_eq!(half.n(), 50);
        let cols: Vec<f64> = half.features.row(0).iter().copied().collect();
        assert!(cols.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(half, subsample_pilots(&set, 0.5, 3).unwrap());
        assert!(subsample_pilots(&set, 0.0, 3).is_err());
        assert!(subsample_pilots(&set, 1.5, 3).is_err());
    }

    #[test]
    fn subsample_keeps_class_frequencies() {
        let mut rng = substream(99, "labels", 0);
        let labels: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..10)).collect();
        let freq = |idx: &[usize], c: usize| idx.iter().filter(|&&i| labels[i] == c).count() as f64 / idx.len() as f64;
        let all: Vec<usize> = (0..labels.len()).collect();
        for sampling in [PilotSampling::Uniform, PilotSampling::Stratified] {
            let idx = pilot_indices(&labels, 0.1, 5, sampling).unwrap();
            assert!((idx.len() as i64 - 1000).abs() <= 10);
            let tv: f64 = (0..10).map(|c| (freq(&idx, c) - freq(&all, c)).abs()).sum::<f64>() / 2.0;
            assert!(tv < 0.1, "{sampling}: total variation {tv}");
            if sampling == PilotSampling::Stratified {
                for c in 0..10 {
                    let rel = (freq(&idx, c) - freq(&all, c)).abs() / freq(&all, c);
                    assert!(rel < 0.1, "class {c}: relative deviation {rel}");
                }
            }
        }
    }

    #[test]
    fn stratified_sampling_takes_each_class() {
        let labels: Vec<usize> = (0..100).map(|i| if i < 90 { 0 } else { 1 }).collect();
        let idx = pilot_indices(&labels, 0.1, 1, PilotSampling::Stratified).unwrap();
        assert_eq!(idx.iter().filter(|&&i| labels[i] == 0).count(), 9);
        assert_eq!(idx.iter().filter(|&&i| labels[i] == 1).count(), 1);
    }

    #[test]
    fn file_round_trip() {
        let set = RealLatentSet::new(
            "a",
            RealMatrix::from_row_slice(2, 3, &[0.1, -2.5e-300, 3.0, 1.0 / 3.0, 7.0, -0.0]),
            vec![0, 1, 0],
            2,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_latent_set(&set, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("SEMLAT v1 2 3 2\n0 1 0\n"));
        let back = parse_latent_set(&text, "a").unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn file_errors_name_the_line() {
        let bad_header = "SEMLAT v2 2 3 2\n0 1 0\n1 2 3\n4 5 6\n";
        assert!(matches!(parse_latent_set(bad_header, "x"), Err(Error::Parse { line: 1, .. })));
        let short_row = "SEMLAT v1 2 3 2\n0 1 0\n1 2 3\n4 5\n";
        assert!(matches!(parse_latent_set(short_row, "x"), Err(Error::Parse { line: 4, .. })));
        let missing_row = "SEMLAT v1 3 3 2\n0 1 0\n1 2 3\n4 5 6\n";
        assert!(matches!(parse_latent_set(missing_row, "x"), Err(Error::Parse { line: 5, .. })));
        let labels = "SEMLAT v1 2 3 2\n0 1\n1 2 3\n4 5 6\n";
        assert!(matches!(parse_latent_set(labels, "x"), Err(Error::Parse { line: 2, .. })));
        let extra = "SEMLAT v1 1 3 2\n0 1 0\n1 2 3\n4 5 6\n";
        assert!(matches!(parse_latent_set(extra, "x"), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn file_load_is_fast_enough() {
        let mut rng = substream(1, "big", 0);
        let n = 10_000;
        let set = RealLatentSet::new(
            "big",
            gaussian_matrix(192, n, 1.0, &mut rng),
            (0..n).map(|i| i % 10).collect(),
            10,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.semlat");
        save_latent_set(&set, &path).unwrap();
        let t = std::time::Instant::now();
        let back = load_latent_set(&path).unwrap();
        assert!(t.elapsed().as_secs_f64() < 5.0);
        assert_eq!(back.features, set.features);
        assert_eq!(back.agent_id, "big");
    }
}
