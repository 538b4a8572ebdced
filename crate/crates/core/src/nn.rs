//! Small fully connected network with hand-written backprop.
//!
//! The model is a stack of linear layers with ReLU between them (none after
//! the last). Two head variants: `Classifier` leaves the final layer output
//! as logits, `Embedder` normalizes each output row to unit length. Three
//! objectives are supported, each with an exact analytic gradient:
//!
//! * cross-entropy against soft targets plus a uniform-prior regularizer on
//!   the batch-mean prediction,
//! * a temperature-scaled contrastive loss over paired rows (2k, 2k+1),
//! * a neighbor-consistency clustering objective with an entropy term.
//!
//! Gradients are checked against central finite differences in the tests;
//! keep any new loss wired through `loss_with_delta` so the same value code
//! backs both `loss_value` and `grad`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

const LOG_EPS: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Final layer output is logits; pair with `CeRegularized` or `Cluster`.
    Classifier,
    /// Final layer output is L2-normalized per row; pair with `Contrastive`.
    Embedder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Row o holds the input weights of output unit o (shape out x in).
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Layer {
    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases.
    pub fn random(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Layer {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut w = Mat::zeros(out_dim, in_dim);
        for v in w.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        Layer {
            w,
            b: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<Layer>,
    pub head: Head,
}

impl ParamSet {
    /// `dims` lists layer widths input-first, e.g. `[32, 128, 128, 10]`.
    pub fn new(dims: &[usize], head: Head, seed: u64) -> Result<ParamSet> {
        if dims.len() < 2 {
            return Err(Error::config(format!(
                "need at least input and output widths, got {} dims",
                dims.len()
            )));
        }
        if let Some(&bad) = dims.iter().find(|&&d| d == 0) {
            return Err(Error::config(format!("layer width must be positive, got {bad}")));
        }
        let mut rng = crate::rng::stream(seed);
        let layers = dims
            .windows(2)
            .map(|io| Layer::random(io[0], io[1], &mut rng))
            .collect();
        Ok(ParamSet { layers, head })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("no layers").out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.in_dim()];
        dims.extend(self.layers.iter().map(Layer::out_dim));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.rows() * l.w.cols() + l.b.len())
            .sum()
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        Ok(self.forward_cached(x)?.out)
    }

    /// Softmax probabilities; requires the classifier head.
    pub fn predict_proba(&self, x: &Mat) -> Result<Mat> {
        if self.head != Head::Classifier {
            return Err(Error::contract("predict_proba needs a classifier head"));
        }
        Ok(softmax(&self.forward(x)?))
    }

    /// Per-row cross-entropy of the prediction against an integer label.
    pub fn per_sample_ce(&self, x: &Mat, labels: &[usize]) -> Result<Vec<f64>> {
        if labels.len() != x.rows() {
            return Err(Error::shape(format!(
                "{} labels for {} rows",
                labels.len(),
                x.rows()
            )));
        }
        let probs = self.predict_proba(x)?;
        let classes = probs.cols();
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                if y >= classes {
                    return Err(Error::shape(format!("label {y} out of range for {classes} classes")));
                }
                Ok(-probs.get(i, y).max(LOG_EPS).ln())
            })
            .collect()
    }

    pub fn loss_value(&self, x: &Mat, loss: &LossSpec) -> Result<f64> {
        let cache = self.forward_cached(x)?;
        Ok(self.loss_with_delta(&cache, loss)?.0)
    }

    pub fn grad(&self, x: &Mat, loss: &LossSpec) -> Result<(f64, Grads)> {
        let cache = self.forward_cached(x)?;
        let (value, delta) = self.loss_with_delta(&cache, loss)?;
        Ok((value, self.backprop(&cache, delta)))
    }

    fn forward_cached(&self, x: &Mat) -> Result<ForwardCache> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.in_dim()
            )));
        }
        let depth = self.layers.len();
        let mut acts = Vec::with_capacity(depth + 1);
        let mut pres = Vec::with_capacity(depth);
        acts.push(x.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = linear(acts.last().unwrap(), layer);
            let a = if l + 1 < depth {
                let mut a = z.clone();
                for v in a.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                a
            } else {
                z.clone()
            };
            pres.push(z);
            acts.push(a);
        }
        let raw = acts.last().unwrap();
        let (out, norms) = match self.head {
            Head::Classifier => (raw.clone(), None),
            Head::Embedder => {
                let mut out = raw.clone();
                let mut norms = Vec::with_capacity(out.rows());
                for i in 0..out.rows() {
                    let row = out.row_mut(i);
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                    for v in row.iter_mut() {
                        *v /= n;
                    }
                    norms.push(n);
                }
                (out, Some(norms))
            }
        };
        Ok(ForwardCache { acts, pres, norms, out })
    }

    /// Returns the loss value and d(loss)/d(final-layer output), i.e. the
    /// gradient in logit space for the classifier head or pre-normalization
    /// space for the embedder head.
    fn loss_with_delta(&self, cache: &ForwardCache, loss: &LossSpec) -> Result<(f64, Mat)> {
        match loss {
            LossSpec::CeRegularized { targets, lambda_r } => {
                if self.head != Head::Classifier {
                    return Err(Error::contract("cross-entropy needs a classifier head"));
                }
                let logits = &cache.out;
                if targets.rows() != logits.rows() || targets.cols() != logits.cols() {
                    return Err(Error::shape(format!(
                        "targets {}x{} vs logits {}x{}",
                        targets.rows(),
                        targets.cols(),
                        logits.rows(),
                        logits.cols()
                    )));
                }
                if logits.rows() == 0 {
                    return Err(Error::shape("empty batch"));
                }
                let b = logits.rows() as f64;
                let classes = logits.cols();
                let p = softmax(logits);
                let p_bar = p.mean_rows();
                let value = cross_entropy(&p, targets) + lambda_r * kl_uniform(&p_bar);
                let mut delta = Mat::zeros(p.rows(), classes);
                // Regularizer gradient wrt probabilities: same vector on
                // every row, pushed through each row's softmax Jacobian.
                let pi = 1.0 / classes as f64;
                let g_reg: Vec<f64> = p_bar
                    .iter()
                    .map(|&pb| -lambda_r * pi / (b * pb.max(LOG_EPS)))
                    .collect();
                for i in 0..p.rows() {
                    let prow = p.row(i);
                    let trow = targets.row(i);
                    let drow = delta.row_mut(i);
                    let dot: f64 = prow.iter().zip(&g_reg).map(|(p, g)| p * g).sum();
                    for c in 0..classes {
                        drow[c] = (prow[c] - trow[c]) / b + prow[c] * (g_reg[c] - dot);
                    }
                }
                Ok((value, delta))
            }
            LossSpec::Contrastive { temperature } => {
                if self.head != Head::Embedder {
                    return Err(Error::contract("contrastive loss needs an embedder head"));
                }
                let z = &cache.out;
                let (value, g_z) = contrastive_value_grad(z, *temperature)?;
                let norms = cache.norms.as_ref().expect("embedder caches norms");
                // Through z = h / ||h||: g_h = (g - (g.z) z) / ||h||.
                let mut delta = Mat::zeros(z.rows(), z.cols());
                for i in 0..z.rows() {
                    let zrow = z.row(i);
                    let grow = g_z.row(i);
                    let dot: f64 = grow.iter().zip(zrow).map(|(g, z)| g * z).sum();
                    let drow = delta.row_mut(i);
                    for c in 0..zrow.len() {
                        drow[c] = (grow[c] - dot * zrow[c]) / norms[i];
                    }
                }
                Ok((value, delta))
            }
            LossSpec::Cluster { pairs, lambda_e } => {
                if self.head != Head::Classifier {
                    return Err(Error::contract("cluster objective needs a classifier head"));
                }
                if cache.out.rows() == 0 {
                    return Err(Error::shape("empty batch"));
                }
                let p = softmax(&cache.out);
                let (value, g_p) = cluster_value_gradp(&p, pairs, *lambda_e)?;
                let mut delta = Mat::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let prow = p.row(i);
                    let grow = g_p.row(i);
                    let dot: f64 = grow.iter().zip(prow).map(|(g, p)| g * p).sum();
                    let drow = delta.row_mut(i);
                    for c in 0..prow.len() {
                        drow[c] = prow[c] * (grow[c] - dot);
                    }
                }
                Ok((value, delta))
            }
        }
    }

    fn backprop(&self, cache: &ForwardCache, delta_out: Mat) -> Grads {
        let depth = self.layers.len();
        let mut layers: Vec<LayerGrad> = self
            .layers
            .iter()
            .map(|l| LayerGrad {
                w: Mat::zeros(l.w.rows(), l.w.cols()),
                b: vec![0.0; l.b.len()],
            })
            .collect();
        let mut delta = delta_out;
        for l in (0..depth).rev() {
            let a_prev = &cache.acts[l];
            {
                let g = &mut layers[l];
                for bi in 0..delta.rows() {
                    let drow = delta.row(bi);
                    let arow = a_prev.row(bi);
                    for (o, &d) in drow.iter().enumerate() {
                        g.b[o] += d;
                        if d != 0.0 {
                            let wrow = g.w.row_mut(o);
                            for (wi, &a) in wrow.iter_mut().zip(arow) {
                                *wi += d * a;
                            }
                        }
                    }
                }
            }
            if l > 0 {
                let w = &self.layers[l].w;
                let mut prev = Mat::zeros(delta.rows(), w.cols());
                for bi in 0..delta.rows() {
                    let drow = delta.row(bi);
                    let prow = prev.row_mut(bi);
                    for (o, &d) in drow.iter().enumerate() {
                        if d != 0.0 {
                            for (pi, &wv) in prow.iter_mut().zip(w.row(o)) {
                                *pi += d * wv;
                            }
                        }
                    }
                }
                let pre = &cache.pres[l - 1];
                for bi in 0..prev.rows() {
                    let prow = prev.row_mut(bi);
                    for (pv, &zv) in prow.iter_mut().zip(pre.row(bi)) {
                        if zv <= 0.0 {
                            *pv = 0.0;
                        }
                    }
                }
                delta = prev;
            }
        }
        Grads { layers }
    }
}

struct ForwardCache {
    /// acts[0] is the input; acts[l+1] is layer l output after ReLU (last
    /// layer skips the ReLU, so acts[depth] equals pres[depth-1]).
    acts: Vec<Mat>,
    pres: Vec<Mat>,
    /// Pre-normalization row norms, embedder head only.
    norms: Option<Vec<f64>>,
    out: Mat,
}

#[derive(Debug, Clone)]
pub enum LossSpec<'a> {
    /// Mean cross-entropy against soft target rows plus
    /// `lambda_r * KL(uniform || batch-mean prediction)`.
    CeRegularized { targets: &'a Mat, lambda_r: f64 },
    /// Rows are paired (2k, 2k+1); each row is an anchor whose positive is
    /// its partner and whose negatives are every other row.
    Contrastive { temperature: f64 },
    /// `pairs` index rows of the batch; loss is the mean over pairs of
    /// `-ln(p_a . p_b)` gated to pairs whose argmax classes agree, plus
    /// `lambda_e * sum_c pbar_c ln pbar_c` over the batch-mean prediction.
    Cluster {
        pairs: &'a [(usize, usize)],
        lambda_e: f64,
    },
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub w: Mat,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub layers: Vec<LayerGrad>,
}

/// SGD with momentum and coupled weight decay:
/// `buf = momentum * buf + grad + wd * param; param -= lr * buf`.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OptimState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, params: &ParamSet) -> OptimState {
        let buffers = params
            .layers
            .iter()
            .map(|l| (vec![0.0; l.w.rows() * l.w.cols()], vec![0.0; l.b.len()]))
            .collect();
        OptimState {
            lr,
            momentum,
            weight_decay,
            buffers,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        assert_eq!(params.layers.len(), grads.layers.len(), "grad/param layer mismatch");
        assert_eq!(params.layers.len(), self.buffers.len(), "optimizer built for another model");
        for ((layer, grad), (bw, bb)) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.buffers)
        {
            let wd = self.weight_decay;
            for ((p, &g), buf) in layer
                .w
                .data_mut()
                .iter_mut()
                .zip(grad.w.data())
                .zip(bw.iter_mut())
            {
                *buf = self.momentum * *buf + g + wd * *p;
                *p -= self.lr * *buf;
            }
            for ((p, &g), buf) in layer.b.iter_mut().zip(&grad.b).zip(bb.iter_mut()) {
                *buf = self.momentum * *buf + g + wd * *p;
                *p -= self.lr * *buf;
            }
        }
    }
}

fn linear(a: &Mat, layer: &Layer) -> Mat {
    let mut z = Mat::zeros(a.rows(), layer.out_dim());
    for bi in 0..a.rows() {
        let arow = a.row(bi);
        let zrow = z.row_mut(bi);
        for o in 0..layer.out_dim() {
            let wrow = layer.w.row(o);
            let mut acc = layer.b[o];
            for (w, x) in wrow.iter().zip(arow) {
                acc += w * x;
            }
            zrow[o] = acc;
        }
    }
    z
}

/// Row-wise stable softmax.
pub fn softmax(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Mean over rows of `-sum_c target_c ln(prob_c)`; probabilities are clamped
/// at 1e-12 before the log.
pub fn cross_entropy(probs: &Mat, targets: &Mat) -> f64 {
    assert_eq!(probs.rows(), targets.rows());
    assert_eq!(probs.cols(), targets.cols());
    assert!(probs.rows() > 0, "empty batch");
    let mut total = 0.0;
    for (prow, trow) in probs.iter_rows().zip(targets.iter_rows()) {
        for (&p, &t) in prow.iter().zip(trow) {
            if t != 0.0 {
                total -= t * p.max(LOG_EPS).ln();
            }
        }
    }
    total / probs.rows() as f64
}

/// `KL(uniform || p_bar)` over a mean prediction vector.
pub fn kl_uniform(p_bar: &[f64]) -> f64 {
    let pi = 1.0 / p_bar.len() as f64;
    p_bar
        .iter()
        .map(|&pb| pi * (pi / pb.max(LOG_EPS)).ln())
        .sum()
}

/// Contrastive loss over unit-normalized embedding rows paired (2k, 2k+1).
/// With all rows mutually orthogonal the value is `ln(n - 1)` for `n` rows,
/// independent of the temperature.
pub fn contrastive_loss(z: &Mat, temperature: f64) -> Result<f64> {
    Ok(contrastive_value_grad(z, temperature)?.0)
}

fn contrastive_value_grad(z: &Mat, temperature: f64) -> Result<(f64, Mat)> {
    if temperature <= 0.0 {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    let n = z.rows();
    if n < 4 || n % 2 != 0 {
        return Err(Error::shape(format!("contrastive batch needs an even row count >= 4, got {n}")));
    }
    for i in 0..n {
        let norm: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("embedding row {i} has norm {norm}, expected 1")));
        }
    }
    let mut sims = Mat::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            let dot: f64 = z.row(i).iter().zip(z.row(k)).map(|(a, b)| a * b).sum();
            sims.set(i, k, dot / temperature);
        }
    }
    let mut value = 0.0;
    let mut g_z = Mat::zeros(n, z.cols());
    for i in 0..n {
        let partner = i ^ 1;
        let srow = sims.row(i);
        let mut max = f64::NEG_INFINITY;
        for (k, &s) in srow.iter().enumerate() {
            if k != i && s > max {
                max = s;
            }
        }
        let mut sum = 0.0;
        for (k, &s) in srow.iter().enumerate() {
            if k != i {
                sum += (s - max).exp();
            }
        }
        let lse = max + sum.ln();
        value += lse - srow[partner];
        // d(value_i)/d(sim_ik) = softmax_k - [k == partner]; fold the 1/n
        // batch mean and 1/temperature in while accumulating.
        let scale = 1.0 / (n as f64 * temperature);
        for k in 0..n {
            if k == i {
                continue;
            }
            let soft = (srow[k] - lse).exp();
            let coeff = (soft - if k == partner { 1.0 } else { 0.0 }) * scale;
            if coeff != 0.0 {
                let (zi, zk) = (z.row(i), z.row(k));
                let gi = g_z.row_mut(i);
                for (g, &v) in gi.iter_mut().zip(zk) {
                    *g += coeff * v;
                }
                let gk = g_z.row_mut(k);
                for (g, &v) in gk.iter_mut().zip(zi) {
                    *g += coeff * v;
                }
            }
        }
    }
    let value = value / n as f64;
    // Each anchor term is -log of a ratio <= 1.
    debug_assert!(value >= -1e-12, "contrastive loss came out negative: {value}");
    Ok((value, g_z))
}

/// Neighbor-consistency objective on probability rows: mean over pairs of
/// `-ln(p_a . p_b)`, counting only pairs whose argmax classes agree (the
/// others contribute zero but stay in the denominator), plus
/// `lambda_e * sum_c pbar_c ln(pbar_c)`. An empty pair list contributes zero
/// consistency; the entropy term always applies.
pub fn cluster_objective(probs: &Mat, pairs: &[(usize, usize)], lambda_e: f64) -> Result<f64> {
    Ok(cluster_value_gradp(probs, pairs, lambda_e)?.0)
}

fn cluster_value_gradp(p: &Mat, pairs: &[(usize, usize)], lambda_e: f64) -> Result<(f64, Mat)> {
    let rows = p.rows();
    if rows == 0 {
        return Err(Error::shape("empty batch"));
    }
    for &(a, b) in pairs {
        if a >= rows || b >= rows {
            return Err(Error::shape(format!("pair ({a}, {b}) out of range for {rows} rows")));
        }
    }
    let mut value = 0.0;
    let mut g_p = Mat::zeros(rows, p.cols());
    if !pairs.is_empty() {
        let top: Vec<usize> = (0..rows).map(|i| argmax(p.row(i))).collect();
        let inv_pairs = 1.0 / pairs.len() as f64;
        for &(a, b) in pairs {
            // Agreement gate: treated as a constant, so disagreeing pairs
            // receive no gradient either.
            if top[a] != top[b] {
                continue;
            }
            let (pa, pb) = (p.row(a), p.row(b));
            let dot: f64 = pa.iter().zip(pb).map(|(x, y)| x * y).sum::<f64>().max(LOG_EPS);
            value -= inv_pairs * dot.ln();
            let coeff = inv_pairs / dot;
            let ga = g_p.row_mut(a);
            for (g, &v) in ga.iter_mut().zip(pb) {
                *g -= coeff * v;
            }
            let gb = g_p.row_mut(b);
            for (g, &v) in gb.iter_mut().zip(pa) {
                *g -= coeff * v;
            }
        }
    }
    let p_bar = p.mean_rows();
    let entropy: f64 = p_bar.iter().map(|&pb| pb * pb.max(LOG_EPS).ln()).sum();
    value += lambda_e * entropy;
    let inv_rows = 1.0 / rows as f64;
    for i in 0..rows {
        let grow = g_p.row_mut(i);
        for (g, &pb) in grow.iter_mut().zip(&p_bar) {
            *g += lambda_e * (pb.max(LOG_EPS).ln() + 1.0) * inv_rows;
        }
    }
    Ok((value, g_p))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Mat> {
    let mut m = Mat::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::shape(format!("label {y} out of range for {classes} classes")));
        }
        m.set(i, y, 1.0);
    }
    Ok(m)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    let file = File::create(path)?;
    serde_json::to_writer(BufWriter::new(file), params)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let file = File::open(path)?;
    let params: ParamSet = serde_json::from_reader(BufReader::new(file))?;
    if params.layers.is_empty() {
        return Err(Error::contract(format!("checkpoint {} has no layers", path.display())));
    }
    let mut prev_out = params.layers[0].out_dim();
    for layer in &params.layers[1..] {
        if layer.in_dim() != prev_out {
            return Err(Error::contract(format!(
                "checkpoint {} has mismatched layer widths",
                path.display()
            )));
        }
        prev_out = layer.out_dim();
    }
    Ok(params)
}
