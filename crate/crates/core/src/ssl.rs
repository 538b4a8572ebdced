//! Label-free encoder pretraining in two stages: contrastive training over
//! augmented view pairs, then neighbor mining and cluster-head training with
//! the neighbor-consistency objective. Labels never enter this module; the
//! entry point takes a feature matrix only.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::nn::{self, Head, LossSpec, OptimState, ParamSet};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Standard,
    Strong,
}

/// Feature-space view generation: Gaussian jitter per coordinate, and in
/// strong mode an additional cyclic contiguous block of zeroed coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub mode: AugmentMode,
    pub jitter_sigma: f64,
    pub mask_fraction: f64,
}

impl AugmentSpec {
    pub fn standard(jitter_sigma: f64) -> Self {
        AugmentSpec {
            mode: AugmentMode::Standard,
            jitter_sigma,
            mask_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::config(format!(
                "jitter_sigma must be nonnegative, got {}",
                self.jitter_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::config(format!(
                "mask_fraction must lie in [0,1), got {}",
                self.mask_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Anchors per step; each contributes two augmented views.
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: AugmentSpec,
    pub embed_dim: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.5,
            batch_size: 128,
            epochs: 30,
            augment: AugmentSpec::standard(0.25),
            embed_dim: 32,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScanConfig {
    pub lambda_e: f64,
    pub epochs: usize,
    pub k_neighbors: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            lambda_e: 5.0,
            epochs: 15,
            k_neighbors: 20,
            batch_size: 128,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// K nearest neighbors per sample under cosine similarity, self excluded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborTable {
    indices: Vec<usize>,
    n: usize,
    k: usize,
}

impl NeighborTable {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

/// Applies `spec` to one feature vector using its own seeded stream.
pub fn augment(x: &[f64], spec: &AugmentSpec, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(rng::child(seed, rng::tag::AUGMENT));
    augment_with(x, spec, &mut rng)
}

pub(crate) fn augment_with(x: &[f64], spec: &AugmentSpec, rng: &mut impl Rng) -> Vec<f64> {
    let d = x.len();
    let mut out: Vec<f64> = if spec.jitter_sigma > 0.0 {
        x.iter()
            .map(|&v| {
                let noise: f64 = StandardNormal.sample(rng);
                v + spec.jitter_sigma * noise
            })
            .collect()
    } else {
        x.to_vec()
    };
    if spec.mode == AugmentMode::Strong {
        let width = (spec.mask_fraction * d as f64).round() as usize;
        if width > 0 {
            let start = rng.gen_range(0..d);
            for offset in 0..width {
                out[(start + offset) % d] = 0.0;
            }
        }
    }
    out
}

pub use crate::nn::contrastive_loss;

/// Neighbor-consistency objective over full-dataset probabilities: delegates
/// to the batch form with one pair per (anchor, neighbor) edge.
pub fn scan_loss(cluster_probs: &Mat, neighbors: &NeighborTable, lambda_e: f64) -> Result<f64> {
    if neighbors.n() != cluster_probs.rows() {
        return Err(Error::shape(format!(
            "neighbor table covers {} samples, probabilities cover {}",
            neighbors.n(),
            cluster_probs.rows()
        )));
    }
    let mut pairs = Vec::with_capacity(neighbors.n() * neighbors.k());
    for i in 0..neighbors.n() {
        for &j in neighbors.neighbors(i) {
            pairs.push((i, j));
        }
    }
    nn::cluster_objective(cluster_probs, &pairs, lambda_e)
}

/// Top-K rows by cosine similarity for every row, self excluded, ties broken
/// by lower index. Cosine makes the result invariant to per-row scaling.
pub fn mine_knn(embeddings: &Mat, k: usize) -> Result<NeighborTable> {
    let n = embeddings.rows();
    if k == 0 {
        return Err(Error::config("need at least one neighbor"));
    }
    if k >= n {
        return Err(Error::config(format!("k = {k} must be smaller than the {n} samples")));
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            embeddings
                .row(i)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(1e-12)
        })
        .collect();
    let mut indices = Vec::with_capacity(n * k);
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        sims.clear();
        let ri = embeddings.row(i);
        for j in 0..n {
            if j == i {
                continue;
            }
            let dot: f64 = ri.iter().zip(embeddings.row(j)).map(|(a, b)| a * b).sum();
            sims.push((dot / (norms[i] * norms[j]), j));
        }
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        indices.extend(sims[..k].iter().map(|&(_, j)| j));
    }
    Ok(NeighborTable { indices, n, k })
}

/// Output of [`pretrain`]: the contrastive encoder, the cluster head over
/// the same trunk, and the mined neighbor table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainArtifacts {
    pub encoder: ParamSet,
    pub cluster: ParamSet,
    pub neighbors: NeighborTable,
}

/// Two-stage label-free pretraining. Stage 1 trains an embedder on
/// contrastive view pairs; neighbors are then mined from its embeddings;
/// stage 2 swaps the projection layer for a `classes`-way head and trains
/// with the neighbor-consistency objective, updating the trunk as well.
/// With zero epochs in both stages this returns the initialized models and
/// a table mined from the untrained encoder.
pub fn pretrain(
    features: &Mat,
    classes: usize,
    hidden: &[usize],
    cc: &ContrastiveConfig,
    sc: &ScanConfig,
    seed: u64,
) -> Result<PretrainArtifacts> {
    if cc.batch_size < 2 || sc.batch_size < 2 {
        return Err(Error::config("pretraining batch size must be at least 2"));
    }
    if cc.temperature <= 0.0 {
        return Err(Error::config(format!(
            "temperature must be positive, got {}",
            cc.temperature
        )));
    }
    cc.augment.validate()?;
    if hidden.is_empty() {
        return Err(Error::config("encoder needs at least one hidden layer"));
    }
    let n = features.rows();
    let mut dims = vec![features.cols()];
    dims.extend_from_slice(hidden);
    dims.push(cc.embed_dim);
    let mut encoder = ParamSet::new(&dims, Head::Embedder, rng::child(seed, rng::tag::INIT))?;

    // Stage 1: contrastive training over two augmented views per anchor.
    let mut opt = OptimState::new(cc.lr, cc.momentum, cc.weight_decay, &encoder);
    let stage1_seed = rng::child(seed, rng::tag::CONTRASTIVE);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cc.epochs {
        let epoch_seed = rng::child(stage1_seed, epoch as u64);
        order.shuffle(&mut rng::stream(rng::child(epoch_seed, rng::tag::SHUFFLE)));
        let mut aug_rng = rng::stream(rng::child(epoch_seed, rng::tag::AUGMENT));
        for anchors in order.chunks(cc.batch_size) {
            if anchors.len() < 2 {
                continue;
            }
            let mut views = Mat::zeros(anchors.len() * 2, features.cols());
            for (t, &i) in anchors.iter().enumerate() {
                for view in 0..2 {
                    let v = augment_with(features.row(i), &cc.augment, &mut aug_rng);
                    views.row_mut(2 * t + view).copy_from_slice(&v);
                }
            }
            let loss = LossSpec::Contrastive {
                temperature: cc.temperature,
            };
            let (_, grads) = encoder.grad(&views, &loss)?;
            opt.step(&mut encoder, &grads);
        }
    }

    let embeddings = encoder.forward(features)?;
    let neighbors = mine_knn(&embeddings, sc.k_neighbors)?;

    // Stage 2: replace the projection layer with a classifier head over the
    // same trunk; consistency gradients keep flowing into the trunk.
    let mut cluster = encoder.clone();
    cluster.head = Head::Classifier;
    let trunk_out = hidden[hidden.len() - 1];
    let mut head_rng = rng::stream(rng::child(seed, rng::tag::CLUSTER));
    *cluster.layers.last_mut().unwrap() = crate::nn::Layer::random(trunk_out, classes, &mut head_rng);
    let mut opt = OptimState::new(sc.lr, sc.momentum, sc.weight_decay, &cluster);
    let stage2_seed = rng::child(seed, rng::tag::CLUSTER);
    for epoch in 0..sc.epochs {
        let epoch_seed = rng::child(stage2_seed, epoch as u64);
        order.shuffle(&mut rng::stream(rng::child(epoch_seed, rng::tag::SHUFFLE)));
        let mut pick = rng::stream(rng::child(epoch_seed, rng::tag::CLUSTER));
        for anchors in order.chunks(sc.batch_size) {
            // Rows: anchors first, then one sampled neighbor per anchor.
            let mut rows: Vec<usize> = anchors.to_vec();
            let mut pairs = Vec::with_capacity(anchors.len());
            for (t, &i) in anchors.iter().enumerate() {
                let nbrs = neighbors.neighbors(i);
                rows.push(nbrs[pick.gen_range(0..nbrs.len())]);
                pairs.push((t, anchors.len() + t));
            }
            let batch = features.select_rows(&rows);
            let loss = LossSpec::Cluster {
                pairs: &pairs,
                lambda_e: sc.lambda_e,
            };
            let (_, grads) = cluster.grad(&batch, &loss)?;
            opt.step(&mut cluster, &grads);
        }
    }

    Ok(PretrainArtifacts {
        encoder,
        cluster,
        neighbors,
    })
}
