//! Dataset construction, CSV persistence, and controlled label corruption.
//!
//! Every injector starts from the true labels and rewrites the given labels
//! only; features and true labels are never touched. Each sample draws from
//! its own child RNG stream, so the result does not depend on evaluation
//! order.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::nn::ParamSet;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub features: Mat,
    pub true_labels: Vec<usize>,
    pub given_labels: Vec<usize>,
    pub classes: usize,
    pub noise_spec: Option<NoiseSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseKind {
    #[serde(rename = "sym")]
    Symmetric,
    #[serde(rename = "asym")]
    Asymmetric,
    #[serde(rename = "instance")]
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<(usize, usize)>>,
}

/// Realized label-transition table: row = true class, column = given class.
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    pub counts: Vec<Vec<usize>>,
    /// Row-normalized fractions; rows with no samples are all NaN.
    pub probs: Mat,
    /// False for true classes that have no samples.
    pub defined: Vec<bool>,
}

impl LabeledDataset {
    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Fraction of samples whose given label disagrees with the true one.
    pub fn noise_fraction(&self) -> f64 {
        let wrong = self
            .true_labels
            .iter()
            .zip(&self.given_labels)
            .filter(|(t, g)| t != g)
            .count();
        wrong as f64 / self.n() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n() == 0 {
            return Err(Error::contract("dataset has no samples"));
        }
        if self.classes < 2 {
            return Err(Error::contract(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.true_labels.len() != self.n() || self.given_labels.len() != self.n() {
            return Err(Error::shape("label count does not match feature rows"));
        }
        for labels in [&self.true_labels, &self.given_labels] {
            if let Some(&bad) = labels.iter().find(|&&y| y >= self.classes) {
                return Err(Error::contract(format!(
                    "label {bad} out of range for {} classes",
                    self.classes
                )));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            name: self.name.clone(),
            features: self.features.select_rows(indices),
            true_labels: indices.iter().map(|&i| self.true_labels[i]).collect(),
            given_labels: indices.iter().map(|&i| self.given_labels[i]).collect(),
            classes: self.classes,
            noise_spec: self.noise_spec.clone(),
        }
    }

    /// Writes `f0,...,f{d-1},true_label,given_label` rows plus a JSON sidecar
    /// (same path with a `.json` extension) holding name, shape, and the
    /// noise spec.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut out = BufWriter::new(File::create(path)?);
        let mut header = String::new();
        for j in 0..self.dim() {
            let _ = write!(header, "f{j},");
        }
        header.push_str("true_label,given_label");
        writeln!(out, "{header}")?;
        let mut line = String::new();
        for i in 0..self.n() {
            line.clear();
            for v in self.features.row(i) {
                let _ = write!(line, "{v},");
            }
            let _ = write!(line, "{},{}", self.true_labels[i], self.given_labels[i]);
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        let sidecar = Sidecar {
            name: self.name.clone(),
            n: self.n(),
            d: self.dim(),
            classes: self.classes,
            noise_spec: self.noise_spec.clone(),
        };
        let file = File::create(sidecar_path(path))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &sidecar)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    name: String,
    n: usize,
    d: usize,
    classes: usize,
    #[serde(default)]
    noise_spec: Option<NoiseSpec>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Reads a dataset saved by [`LabeledDataset::save`]. The sidecar is
/// optional; without it the class count is inferred from the labels.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let headers = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let width = headers.len();
    if width < 3 || headers.get(width - 2) != Some("true_label") || headers.get(width - 1) != Some("given_label") {
        return Err(Error::Parse {
            line: 1,
            message: "expected header f0,...,true_label,given_label".into(),
        });
    }
    let d = width - 2;
    let mut features = Vec::new();
    let mut true_labels = Vec::new();
    let mut given_labels = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} fields, got {}", record.len()),
            });
        }
        for j in 0..d {
            let v: f64 = record[j].parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad float in column f{j}: {:?}", &record[j]),
            })?;
            features.push(v);
        }
        for (col, dst) in [(d, &mut true_labels), (d + 1, &mut given_labels)] {
            let y: usize = record[col].parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad label: {:?}", &record[col]),
            })?;
            dst.push(y);
        }
    }
    if true_labels.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no samples".into(),
        });
    }
    let n = true_labels.len();
    let sidecar: Option<Sidecar> = match File::open(sidecar_path(path)) {
        Ok(file) => Some(serde_json::from_reader(BufReader::new(file))?),
        Err(_) => None,
    };
    let (name, classes, noise_spec) = match sidecar {
        Some(s) => {
            if s.n != n || s.d != d {
                return Err(Error::contract(format!(
                    "sidecar says {}x{}, file has {n}x{d}",
                    s.n, s.d
                )));
            }
            (s.name, s.classes, s.noise_spec)
        }
        None => {
            let max = true_labels.iter().chain(&given_labels).copied().max().unwrap();
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into());
            (name, (max + 1).max(2), None)
        }
    };
    for (i, labels) in [&true_labels, &given_labels].into_iter().enumerate() {
        if let Some(pos) = labels.iter().position(|&y| y >= classes) {
            return Err(Error::Parse {
                line: pos + 2,
                message: format!(
                    "{} label {} out of range for {classes} classes",
                    if i == 0 { "true" } else { "given" },
                    labels[pos]
                ),
            });
        }
    }
    Ok(LabeledDataset {
        name,
        features: Mat::from_vec(n, d, features),
        true_labels,
        given_labels,
        classes,
        noise_spec,
    })
}

/// Unit-variance Gaussian blobs, one per class, `per_class` samples each.
/// Class means sit on scaled standard basis vectors so every pair of means
/// is exactly `separation` apart; this needs `dim >= classes`.
pub fn make_synthetic(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {classes}")));
    }
    if per_class == 0 {
        return Err(Error::config("per_class must be at least 1"));
    }
    if dim < 2 {
        return Err(Error::config(format!("need dim >= 2, got {dim}")));
    }
    if !(separation > 0.0) {
        return Err(Error::config(format!("separation must be positive, got {separation}")));
    }
    if dim < classes {
        return Err(Error::config(format!(
            "cannot place {classes} equidistant class means in {dim} dimensions; need dim >= classes"
        )));
    }
    let scale = separation / std::f64::consts::SQRT_2;
    let n = classes * per_class;
    let mut features = Mat::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    let mut rng = rng::stream(rng::child(seed, rng::tag::DATASET));
    for c in 0..classes {
        for s in 0..per_class {
            let row = features.row_mut(c * per_class + s);
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            row[c] += scale;
            labels.push(c);
        }
    }
    Ok(LabeledDataset {
        name: format!("synthetic-{classes}x{per_class}-d{dim}"),
        features,
        true_labels: labels.clone(),
        given_labels: labels,
        classes,
        noise_spec: None,
    })
}

fn sample_rng(seed: u64, i: usize) -> impl Rng {
    rng::stream(rng::child(rng::child(seed, rng::tag::NOISE), i as u64))
}

/// With probability `rate`, reassigns each given label uniformly over the
/// wrong classes (relative to the true label).
pub fn inject_symmetric(ds: &LabeledDataset, rate: f64, seed: u64) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config(format!("noise rate must be in [0,1], got {rate}")));
    }
    let mut out = ds.clone();
    for (i, (&truth, given)) in ds.true_labels.iter().zip(&mut out.given_labels).enumerate() {
        let mut rng = sample_rng(seed, i);
        *given = if rng.gen::<f64>() < rate {
            let k = rng.gen_range(0..ds.classes - 1);
            if k < truth {
                k
            } else {
                k + 1
            }
        } else {
            truth
        };
    }
    out.noise_spec = Some(NoiseSpec {
        kind: NoiseKind::Symmetric,
        rate,
        seed,
        pairs: None,
    });
    Ok(out)
}

/// Flips samples of each mapped source class to its target with probability
/// `rate`; classes outside the map keep their true label.
pub fn inject_asymmetric(
    ds: &LabeledDataset,
    pair_map: &[(usize, usize)],
    rate: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config(format!("noise rate must be in [0,1], got {rate}")));
    }
    let mut target_of = vec![None; ds.classes];
    for &(src, dst) in pair_map {
        if src >= ds.classes || dst >= ds.classes {
            return Err(Error::config(format!(
                "pair {src}:{dst} out of range for {} classes",
                ds.classes
            )));
        }
        if target_of[src].is_some() {
            return Err(Error::config(format!("class {src} mapped twice")));
        }
        target_of[src] = Some(dst);
    }
    let mut out = ds.clone();
    for (i, (&truth, given)) in ds.true_labels.iter().zip(&mut out.given_labels).enumerate() {
        *given = truth;
        if let Some(target) = target_of[truth] {
            if sample_rng(seed, i).gen::<f64>() < rate {
                *given = target;
            }
        }
    }
    out.noise_spec = Some(NoiseSpec {
        kind: NoiseKind::Asymmetric,
        rate,
        seed,
        pairs: Some(pair_map.to_vec()),
    });
    Ok(out)
}

/// Small fixed-architecture classifier fit on the true labels with
/// full-batch SGD. Callers that have no model of their own pass this to
/// [`inject_instance`] so flips still track input difficulty.
pub fn default_auxiliary(ds: &LabeledDataset, seed: u64) -> Result<ParamSet> {
    use crate::nn::{self, Head, LossSpec, OptimState};
    ds.validate()?;
    let mut net = ParamSet::new(
        &[ds.dim(), 16, ds.classes],
        Head::Classifier,
        rng::child(seed, rng::tag::INIT),
    )?;
    let mut opt = OptimState::new(0.2, 0.9, 0.0, &net);
    let targets = nn::one_hot(&ds.true_labels, ds.classes)?;
    for _ in 0..30 {
        let loss = LossSpec::CeRegularized { targets: &targets, lambda_r: 0.0 };
        let (_, grads) = net.grad(&ds.features, &loss)?;
        opt.step(&mut net, &grads);
    }
    Ok(net)
}

/// Ranks samples by the auxiliary classifier's confidence in its strongest
/// wrong class and flips the top `ceil(rate * N)` of them to that class.
/// Ranking ties break by index, so the flipped set is a pure function of the
/// dataset and auxiliary; `_seed` is accepted for injector-API symmetry and
/// recorded in the spec.
pub fn inject_instance(
    ds: &LabeledDataset,
    auxiliary: &ParamSet,
    rate: f64,
    _seed: u64,
) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config(format!("noise rate must be in [0,1], got {rate}")));
    }
    if auxiliary.in_dim() != ds.dim() || auxiliary.out_dim() != ds.classes {
        return Err(Error::config(format!(
            "auxiliary model is {}->{}, dataset is {}d with {} classes",
            auxiliary.in_dim(),
            auxiliary.out_dim(),
            ds.dim(),
            ds.classes
        )));
    }
    let probs = auxiliary.predict_proba(&ds.features)?;
    let mut ranked: Vec<(usize, usize, f64)> = Vec::with_capacity(ds.n());
    for i in 0..ds.n() {
        let truth = ds.true_labels[i];
        let row = probs.row(i);
        let mut best = usize::MAX;
        let mut conf = f64::NEG_INFINITY;
        for (j, &p) in row.iter().enumerate() {
            if j != truth && p > conf {
                best = j;
                conf = p;
            }
        }
        ranked.push((i, best, conf));
    }
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let flips = ((rate * ds.n() as f64).ceil() as usize).min(ds.n());
    let mut out = ds.clone();
    out.given_labels.copy_from_slice(&ds.true_labels);
    for &(i, target, _) in ranked.iter().take(flips) {
        out.given_labels[i] = target;
    }
    out.noise_spec = Some(NoiseSpec {
        kind: NoiseKind::Instance,
        rate,
        seed: _seed,
        pairs: None,
    });
    Ok(out)
}

/// Dispatches on the spec kind; instance noise needs the auxiliary model.
pub fn apply_noise(
    ds: &LabeledDataset,
    spec: &NoiseSpec,
    auxiliary: Option<&ParamSet>,
) -> Result<LabeledDataset> {
    match spec.kind {
        NoiseKind::Symmetric => inject_symmetric(ds, spec.rate, spec.seed),
        NoiseKind::Asymmetric => {
            let pairs = spec
                .pairs
                .as_deref()
                .ok_or_else(|| Error::config("asymmetric noise needs a pair map"))?;
            inject_asymmetric(ds, pairs, spec.rate, spec.seed)
        }
        NoiseKind::Instance => {
            let aux = auxiliary
                .ok_or_else(|| Error::config("instance noise needs an auxiliary classifier"))?;
            inject_instance(ds, aux, spec.rate, spec.seed)
        }
    }
}

/// Counts realized true-to-given transitions. Rows without samples are
/// marked undefined and hold NaN probabilities.
pub fn audit_transition(ds: &LabeledDataset) -> TransitionMatrix {
    let c = ds.classes;
    let mut counts = vec![vec![0usize; c]; c];
    for (&truth, &given) in ds.true_labels.iter().zip(&ds.given_labels) {
        counts[truth][given] += 1;
    }
    let mut probs = Mat::zeros(c, c);
    let mut defined = Vec::with_capacity(c);
    for (row, count_row) in counts.iter().enumerate() {
        let total: usize = count_row.iter().sum();
        defined.push(total > 0);
        let prow = probs.row_mut(row);
        if total == 0 {
            for v in prow.iter_mut() {
                *v = f64::NAN;
            }
        } else {
            for (v, &cnt) in prow.iter_mut().zip(count_row) {
                *v = cnt as f64 / total as f64;
            }
        }
    }
    TransitionMatrix { counts, probs, defined }
}
