//! Co-trained robust learning loop: warm-up on the given labels, per-epoch
//! two-stage filtering, label refinement for the clean set, relabeling for
//! easy noisy samples, proportional mixing, and regularized-CE updates.
//! Two networks are maintained throughout; each trains on the partition its
//! peer produced, and evaluation ensembles both.

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::filter::{self, FilterConfig, FilterMetrics, Partition};
use crate::mat::Mat;
use crate::nn::{self, Head, LossSpec, OptimState, ParamSet};
use crate::rng;
use crate::ssl::{AugmentMode, AugmentSpec};

const NET_TAGS: [u64; 2] = [rng::tag::NET_A, rng::tag::NET_B];

#[derive(Debug, Clone)]
pub struct MixConfig {
    /// Augmented views generated per pooled sample.
    pub m: usize,
    /// Sharpening temperature applied to refined and relabeled targets.
    pub temperature: f64,
    /// Beta(alpha, alpha) parameter for the mixing coefficient.
    pub alpha: f64,
    /// Weight of the uniform-prior regularizer.
    pub lambda_r: f64,
    pub warmup_epochs: usize,
    /// Total post-warm-up epochs; the learning rate drops x0.1 halfway.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub jitter_sigma: f64,
    /// Coordinate fraction zeroed by strong augmentation.
    pub mask_fraction: f64,
    /// Estimated noise rate above which strong augmentation kicks in.
    pub strong_threshold: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            m: 2,
            temperature: 0.5,
            alpha: 4.0,
            lambda_r: 1.0,
            warmup_epochs: 10,
            epochs: 30,
            batch_size: 64,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            jitter_sigma: 0.25,
            mask_fraction: 0.25,
            strong_threshold: 0.5,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::config("need at least one augmented view per sample"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!(
                "sharpening temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config(format!(
                "mixing alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.lambda_r >= 0.0) {
            return Err(Error::config(format!(
                "regularizer weight must be nonnegative, got {}",
                self.lambda_r
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.strong_threshold) {
            return Err(Error::config(format!(
                "strong-augmentation threshold must lie in [0,1], got {}",
                self.strong_threshold
            )));
        }
        let aug = AugmentSpec {
            mode: AugmentMode::Strong,
            jitter_sigma: self.jitter_sigma,
            mask_fraction: self.mask_fraction,
        };
        aug.validate()
    }

    fn augment_spec(&self, strong: bool) -> AugmentSpec {
        AugmentSpec {
            mode: if strong { AugmentMode::Strong } else { AugmentMode::Standard },
            jitter_sigma: self.jitter_sigma,
            mask_fraction: self.mask_fraction,
        }
    }
}

/// The two co-trained networks with their optimizer state. Index 0/1 order
/// is fixed by construction and part of the determinism contract.
#[derive(Debug, Clone)]
pub struct CoModels {
    pub nets: [ParamSet; 2],
    pub opts: [OptimState; 2],
}

impl CoModels {
    /// Two identically shaped classifiers with independent seeded inits.
    pub fn fresh(dims: &[usize], cfg: &MixConfig, seed: u64) -> Result<CoModels> {
        cfg.validate()?;
        let make = |tag| ParamSet::new(dims, Head::Classifier, rng::child(seed, tag));
        let nets = [make(rng::tag::NET_A)?, make(rng::tag::NET_B)?];
        let opts = [
            OptimState::new(cfg.lr, cfg.momentum, cfg.weight_decay, &nets[0]),
            OptimState::new(cfg.lr, cfg.momentum, cfg.weight_decay, &nets[1]),
        ];
        Ok(CoModels { nets, opts })
    }

    /// Both networks share the pretrained trunk; each gets a freshly
    /// initialized classifier layer so they still diverge under training.
    pub fn from_pretrained(
        encoder: &ParamSet,
        classes: usize,
        cfg: &MixConfig,
        seed: u64,
    ) -> Result<CoModels> {
        cfg.validate()?;
        if encoder.layers.len() < 2 {
            return Err(Error::config("pretrained encoder needs a trunk to reuse"));
        }
        let trunk_out = encoder.layers[encoder.layers.len() - 2].out_dim();
        let make = |tag| -> ParamSet {
            let mut net = encoder.clone();
            net.head = Head::Classifier;
            let mut head_rng = rng::stream(rng::child(rng::child(seed, tag), rng::tag::INIT));
            *net.layers.last_mut().unwrap() = nn::Layer::random(trunk_out, classes, &mut head_rng);
            net
        };
        let nets = [make(rng::tag::NET_A), make(rng::tag::NET_B)];
        let opts = [
            OptimState::new(cfg.lr, cfg.momentum, cfg.weight_decay, &nets[0]),
            OptimState::new(cfg.lr, cfg.momentum, cfg.weight_decay, &nets[1]),
        ];
        Ok(CoModels { nets, opts })
    }
}

/// One epoch's diagnostics. Counts are averaged over the two networks'
/// partitions, so they may be fractional; optional metrics are `None` when
/// both networks had an empty denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Filled in by the caller after evaluating on a held-out set.
    pub test_acc: Option<f64>,
    pub est_noise_rate: f64,
    pub n_clean: f64,
    pub n_easy: f64,
    pub n_hard: f64,
    pub clean_precision: Option<f64>,
    pub clean_recall: Option<f64>,
    pub hard_precision: Option<f64>,
    pub hard_recall: Option<f64>,
    pub relabel_acc: Option<f64>,
    pub train_loss: f64,
}

impl EpochStats {
    /// Fraction of the mixing pool contributed by relabeled noisy samples,
    /// always recomputed from the stored counts.
    pub fn zeta(&self) -> f64 {
        let den = self.n_clean + self.n_easy;
        if den > 0.0 {
            self.n_easy / den
        } else {
            0.0
        }
    }
}

/// Records exactly which dataset rows fed each network's gradient steps in
/// one epoch, so the hard-sample exclusion is auditable.
#[derive(Debug, Clone)]
pub struct ContributionLog {
    /// Dataset index behind each pool row (pre-mixing), per network.
    pub pool_sources: [Vec<usize>; 2],
    /// Dataset indices dropped as hard this epoch, per network.
    pub hard: [Vec<usize>; 2],
    pub n_clean: [usize; 2],
    pub n_easy: [usize; 2],
}

/// Plain cross-entropy training of both networks on the given labels.
/// Each network shuffles independently so they stay decorrelated.
/// Returns the mean minibatch loss across both networks (0 when no steps ran).
pub fn warmup(
    models: &mut CoModels,
    ds: &LabeledDataset,
    cfg: &MixConfig,
    epochs: usize,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    if ds.n() == 0 {
        return Err(Error::InsufficientData("cannot warm up on an empty dataset".into()));
    }
    let targets = nn::one_hot(&ds.given_labels, ds.classes)?;
    let (mut loss_sum, mut steps) = (0.0, 0usize);
    for k in 0..2 {
        let base = rng::child(rng::child(seed, rng::tag::WARMUP), NET_TAGS[k]);
        models.opts[k].set_lr(cfg.lr);
        let mut order: Vec<usize> = (0..ds.n()).collect();
        for epoch in 0..epochs {
            let mut shuffle =
                rng::stream(rng::child(rng::child(base, epoch as u64), rng::tag::SHUFFLE));
            order.shuffle(&mut shuffle);
            for chunk in order.chunks(cfg.batch_size) {
                let x = ds.features.select_rows(chunk);
                let t = targets.select_rows(chunk);
                let loss = LossSpec::CeRegularized { targets: &t, lambda_r: 0.0 };
                let (loss_val, grads) = models.nets[k].grad(&x, &loss)?;
                let (net, opt) = (&mut models.nets[k], &mut models.opts[k]);
                opt.step(net, &grads);
                loss_sum += loss_val;
                steps += 1;
            }
        }
    }
    Ok(if steps == 0 { 0.0 } else { loss_sum / steps as f64 })
}

/// Raises each probability to 1/t and renormalizes. Dividing by the max
/// first keeps tiny temperatures out of the underflow region.
pub fn temp_sharpen(p: &[f64], t: f64) -> Vec<f64> {
    debug_assert!(t > 0.0);
    debug_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6, "not a probability vector");
    let max = p.iter().cloned().fold(f64::MIN, f64::max);
    let powered: Vec<f64> = p.iter().map(|&v| (v / max).powf(1.0 / t)).collect();
    let sum: f64 = powered.iter().sum();
    powered.iter().map(|v| v / sum).collect()
}

/// Convex blend of the given one-hot label (weight `w`, the clean
/// posterior) with the averaged model prediction, then sharpened.
pub fn refine_clean_label(y: &[f64], w: f64, p_b: &[f64], t: f64) -> Vec<f64> {
    debug_assert!((0.0..=1.0).contains(&w));
    debug_assert_eq!(y.len(), p_b.len());
    let blended: Vec<f64> = y
        .iter()
        .zip(p_b)
        .map(|(&yi, &pi)| w * yi + (1.0 - w) * pi)
        .collect();
    temp_sharpen(&blended, t)
}

/// Mean softmax over every view row and both networks: with M view rows the
/// average runs over 2M predictions.
pub fn avg_prediction(models: &CoModels, views: &Mat) -> Result<Vec<f64>> {
    if views.rows() == 0 {
        return Err(Error::InsufficientData("no views to average".into()));
    }
    let pa = models.nets[0].predict_proba(views)?;
    let pb = models.nets[1].predict_proba(views)?;
    let classes = pa.cols();
    let mut mean = vec![0.0; classes];
    for i in 0..views.rows() {
        for c in 0..classes {
            mean[c] += pa.get(i, c) + pb.get(i, c);
        }
    }
    let scale = (2 * views.rows()) as f64;
    for v in &mut mean {
        *v /= scale;
    }
    Ok(mean)
}

fn mix_rows(x: &Mat, y: &Mat, perm: &[usize], lambdas: &[f64]) -> (Mat, Mat) {
    let n = x.rows();
    let mut mx = Mat::zeros(n, x.cols());
    let mut my = Mat::zeros(n, y.cols());
    for i in 0..n {
        let l = lambdas[i].max(1.0 - lambdas[i]);
        let j = perm[i];
        for (c, v) in mx.row_mut(i).iter_mut().enumerate() {
            *v = l * x.get(i, c) + (1.0 - l) * x.get(j, c);
        }
        for (c, v) in my.row_mut(i).iter_mut().enumerate() {
            *v = l * y.get(i, c) + (1.0 - l) * y.get(j, c);
        }
    }
    (mx, my)
}

/// Mixes every pool entry with a partner drawn by a seeded permutation,
/// using lambda' = max(lambda, 1-lambda) so each output stays anchored to
/// its own sample. Output size equals the pool size: the noisy side is
/// never capped to the clean-set size.
pub fn proportional_mixup(x: &Mat, y: &Mat, alpha: f64, seed: u64) -> Result<(Mat, Mat)> {
    if x.rows() == 0 {
        return Err(Error::InsufficientData("mixing pool is empty".into()));
    }
    if x.rows() != y.rows() {
        return Err(Error::shape(format!(
            "{} feature rows vs {} label rows",
            x.rows(),
            y.rows()
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::config(format!("mixing alpha must be positive, got {alpha}")));
    }
    let mut rng = rng::stream(seed);
    let mut perm: Vec<usize> = (0..x.rows()).collect();
    perm.shuffle(&mut rng);
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::config(e.to_string()))?;
    let lambdas: Vec<f64> = (0..x.rows()).map(|_| beta.sample(&mut rng)).collect();
    Ok(mix_rows(x, y, &perm, &lambdas))
}

/// Mean cross-entropy plus `lambda_r` times the divergence of the batch
/// mean prediction from uniform.
pub fn regularized_loss(probs: &Mat, targets: &Mat, lambda_r: f64) -> f64 {
    let p_bar = probs.mean_rows();
    nn::cross_entropy(probs, targets) + lambda_r * nn::kl_uniform(&p_bar)
}

/// Learning rate for a given epoch: the base rate for the first half of
/// training, then one tenth of it.
pub fn effective_lr(cfg: &MixConfig, epoch: usize) -> f64 {
    if epoch >= cfg.epochs.div_ceil(2) {
        cfg.lr * 0.1
    } else {
        cfg.lr
    }
}

struct PoolPlan {
    views: Mat,
    targets: Mat,
    sources: Vec<usize>,
    hard: Vec<usize>,
    metrics: FilterMetrics,
}

fn build_pool(
    models: &CoModels,
    ds: &LabeledDataset,
    cfg: &MixConfig,
    fcfg: &FilterConfig,
    peer_losses: &[f64],
    peer_probs: &Mat,
    net_seed: u64,
) -> Result<PoolPlan> {
    let n = ds.n();
    let (clean, noisy) = filter::split_clean_noisy(peer_losses, fcfg, rng::child(net_seed, rng::tag::GMM))?;
    let confidences: Vec<f64> = noisy
        .iter()
        .map(|&i| peer_probs.row(i).iter().cloned().fold(f64::MIN, f64::max))
        .collect();
    let (easy_pos, hard_pos) =
        filter::split_easy_hard(&confidences, fcfg, rng::child(rng::child(net_seed, rng::tag::GMM), 1))?;
    let part = Partition {
        clean,
        easy: easy_pos.iter().map(|&p| noisy[p]).collect(),
        hard: hard_pos.iter().map(|&p| noisy[p]).collect(),
    };
    part.validate(n)?;
    let peer_preds: Vec<usize> = (0..n).map(|i| nn::argmax(peer_probs.row(i))).collect();
    let metrics = filter::filter_metrics(&part, ds, &peer_preds)?;
    pool_from_partition(models, ds, cfg, part, metrics, net_seed)
}

fn pool_from_partition(
    models: &CoModels,
    ds: &LabeledDataset,
    cfg: &MixConfig,
    part: Partition,
    metrics: FilterMetrics,
    net_seed: u64,
) -> Result<PoolPlan> {
    let kept = part.clean.len() + part.easy.len();
    if kept == 0 {
        return Err(Error::InsufficientData(
            "filtering left no clean or easy samples to train on".into(),
        ));
    }
    let aug = cfg.augment_spec(metrics.est_noise_rate > cfg.strong_threshold);
    let mut views = Mat::zeros(cfg.m * kept, ds.dim());
    let mut sources = Vec::with_capacity(cfg.m * kept);
    let mut aug_rng = rng::stream(rng::child(net_seed, rng::tag::AUGMENT));
    let pooled: Vec<usize> = part
        .clean
        .iter()
        .map(|&(i, _)| i)
        .chain(part.easy.iter().cloned())
        .collect();
    for (t, &i) in pooled.iter().enumerate() {
        for v in 0..cfg.m {
            let row = crate::ssl::augment_with(ds.features.row(i), &aug, &mut aug_rng);
            views.row_mut(cfg.m * t + v).copy_from_slice(&row);
            sources.push(i);
        }
    }

    // Frozen-parameter predictions on the views; each pooled sample's
    // average runs over its M views and both networks.
    let pa = models.nets[0].predict_proba(&views)?;
    let pb = models.nets[1].predict_proba(&views)?;
    let classes = ds.classes;
    let mut targets = Mat::zeros(views.rows(), classes);
    let given = nn::one_hot(&ds.given_labels, classes)?;
    for (t, &i) in pooled.iter().enumerate() {
        let mut mean = vec![0.0; classes];
        for v in 0..cfg.m {
            for c in 0..classes {
                mean[c] += pa.get(cfg.m * t + v, c) + pb.get(cfg.m * t + v, c);
            }
        }
        for m in &mut mean {
            *m /= (2 * cfg.m) as f64;
        }
        let target = if t < part.clean.len() {
            refine_clean_label(given.row(i), part.clean[t].1, &mean, cfg.temperature)
        } else {
            temp_sharpen(&mean, cfg.temperature)
        };
        for v in 0..cfg.m {
            targets.row_mut(cfg.m * t + v).copy_from_slice(&target);
        }
    }
    Ok(PoolPlan {
        views,
        targets,
        sources,
        hard: part.hard,
        metrics,
    })
}

/// MixUp over the plan's view pool, then SGD minibatches on network `k`.
/// Returns the summed minibatch loss and the step count.
fn sgd_on_plan(
    models: &mut CoModels,
    k: usize,
    plan: &PoolPlan,
    cfg: &MixConfig,
    lr: f64,
    ns: u64,
) -> Result<(f64, usize)> {
    let (mx, my) =
        proportional_mixup(&plan.views, &plan.targets, cfg.alpha, rng::child(ns, rng::tag::MIXUP))?;
    let mut order: Vec<usize> = (0..mx.rows()).collect();
    order.shuffle(&mut rng::stream(rng::child(ns, rng::tag::SHUFFLE)));
    models.opts[k].set_lr(lr);
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let x = mx.select_rows(chunk);
        let t = my.select_rows(chunk);
        debug_assert!(t
            .iter_rows()
            .all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9 && r.iter().all(|&v| v >= 0.0)));
        let loss = LossSpec::CeRegularized {
            targets: &t,
            lambda_r: cfg.lambda_r,
        };
        let (value, grads) = models.nets[k].grad(&x, &loss)?;
        let (net, opt) = (&mut models.nets[k], &mut models.opts[k]);
        opt.step(net, &grads);
        loss_sum += value;
        steps += 1;
    }
    Ok((loss_sum, steps))
}

fn mean_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(0.5 * (x + y)),
        (Some(x), None) | (None, Some(x)) => Some(x),
        (None, None) => None,
    }
}

/// One full training epoch, returning the diagnostics plus the
/// contribution audit trail.
///
/// Both pools are constructed from the start-of-epoch parameters before
/// either network takes a gradient step, and network k's partition comes
/// from its peer's losses and confidences.
pub fn train_epoch_logged(
    models: &mut CoModels,
    ds: &LabeledDataset,
    cfg: &MixConfig,
    fcfg: &FilterConfig,
    epoch: usize,
    seed: u64,
) -> Result<(EpochStats, ContributionLog)> {
    cfg.validate()?;
    fcfg.validate()?;
    if ds.n() == 0 {
        return Err(Error::InsufficientData("cannot train on an empty dataset".into()));
    }
    let es = rng::child(rng::child(seed, rng::tag::TRAIN), epoch as u64);

    let mut losses = Vec::with_capacity(2);
    let mut probs = Vec::with_capacity(2);
    for k in 0..2 {
        losses.push(models.nets[k].per_sample_ce(&ds.features, &ds.given_labels)?);
        probs.push(models.nets[k].predict_proba(&ds.features)?);
    }
    let plans: Vec<PoolPlan> = (0..2)
        .map(|k| {
            let peer = 1 - k;
            build_pool(
                models,
                ds,
                cfg,
                fcfg,
                &losses[peer],
                &probs[peer],
                rng::child(es, NET_TAGS[k]),
            )
        })
        .collect::<Result<_>>()?;

    let lr = effective_lr(cfg, epoch);
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for (k, plan) in plans.iter().enumerate() {
        let (s, c) = sgd_on_plan(models, k, plan, cfg, lr, rng::child(es, NET_TAGS[k]))?;
        loss_sum += s;
        steps += c;
    }

    let (ma, mb) = (&plans[0].metrics, &plans[1].metrics);
    let stats = EpochStats {
        epoch,
        test_acc: None,
        est_noise_rate: 0.5 * (ma.est_noise_rate + mb.est_noise_rate),
        n_clean: 0.5 * (ma.n_clean + mb.n_clean) as f64,
        n_easy: 0.5 * (ma.n_easy + mb.n_easy) as f64,
        n_hard: 0.5 * (ma.n_hard + mb.n_hard) as f64,
        clean_precision: mean_opt(ma.clean_precision, mb.clean_precision),
        clean_recall: mean_opt(ma.clean_recall, mb.clean_recall),
        hard_precision: mean_opt(ma.hard_precision, mb.hard_precision),
        hard_recall: mean_opt(ma.hard_recall, mb.hard_recall),
        relabel_acc: mean_opt(ma.relabel_acc, mb.relabel_acc),
        train_loss: loss_sum / steps.max(1) as f64,
    };
    let [pa, pb] = match &plans[..] {
        [a, b] => [a, b],
        _ => unreachable!(),
    };
    let log = ContributionLog {
        pool_sources: [pa.sources.clone(), pb.sources.clone()],
        hard: [pa.hard.clone(), pb.hard.clone()],
        n_clean: [ma.n_clean, mb.n_clean],
        n_easy: [ma.n_easy, mb.n_easy],
    };
    Ok((stats, log))
}

pub fn train_epoch(
    models: &mut CoModels,
    ds: &LabeledDataset,
    cfg: &MixConfig,
    fcfg: &FilterConfig,
    epoch: usize,
    seed: u64,
) -> Result<EpochStats> {
    Ok(train_epoch_logged(models, ds, cfg, fcfg, epoch, seed)?.0)
}

/// Ablation epoch that skips the loss model entirely: every sample is kept
/// with full label weight, so the pool is built from the given labels while
/// augmentation, MixUp, and co-training run unchanged.
pub fn train_epoch_unfiltered(
    models: &mut CoModels,
    ds: &LabeledDataset,
    cfg: &MixConfig,
    epoch: usize,
    seed: u64,
) -> Result<EpochStats> {
    cfg.validate()?;
    if ds.n() == 0 {
        return Err(Error::InsufficientData("cannot train on an empty dataset".into()));
    }
    let es = rng::child(rng::child(seed, rng::tag::TRAIN), epoch as u64);
    let plans: Vec<PoolPlan> = (0..2)
        .map(|k| {
            let part = Partition {
                clean: (0..ds.n()).map(|i| (i, 1.0)).collect(),
                easy: Vec::new(),
                hard: Vec::new(),
            };
            let peer_probs = models.nets[1 - k].predict_proba(&ds.features)?;
            let peer_preds: Vec<usize> =
                (0..ds.n()).map(|i| nn::argmax(peer_probs.row(i))).collect();
            let metrics = filter::filter_metrics(&part, ds, &peer_preds)?;
            pool_from_partition(models, ds, cfg, part, metrics, rng::child(es, NET_TAGS[k]))
        })
        .collect::<Result<_>>()?;

    let lr = effective_lr(cfg, epoch);
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for (k, plan) in plans.iter().enumerate() {
        let (s, c) = sgd_on_plan(models, k, plan, cfg, lr, rng::child(es, NET_TAGS[k]))?;
        loss_sum += s;
        steps += c;
    }
    let (ma, mb) = (&plans[0].metrics, &plans[1].metrics);
    Ok(EpochStats {
        epoch,
        test_acc: None,
        est_noise_rate: 0.0,
        n_clean: ds.n() as f64,
        n_easy: 0.0,
        n_hard: 0.0,
        clean_precision: mean_opt(ma.clean_precision, mb.clean_precision),
        clean_recall: mean_opt(ma.clean_recall, mb.clean_recall),
        hard_precision: None,
        hard_recall: None,
        relabel_acc: None,
        train_loss: loss_sum / steps.max(1) as f64,
    })
}

/// Ensemble accuracy: argmax of the two networks' mean softmax against the
/// true labels, ties to the lowest class index.
pub fn evaluate(models: &CoModels, test: &LabeledDataset) -> Result<f64> {
    if test.n() == 0 {
        return Err(Error::InsufficientData("cannot evaluate on an empty dataset".into()));
    }
    let pa = models.nets[0].predict_proba(&test.features)?;
    let pb = models.nets[1].predict_proba(&test.features)?;
    let mut hits = 0usize;
    let mut mean = vec![0.0; pa.cols()];
    for i in 0..test.n() {
        for c in 0..pa.cols() {
            mean[c] = 0.5 * (pa.get(i, c) + pb.get(i, c));
        }
        if nn::argmax(&mean) == test.true_labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{inject_symmetric, make_synthetic};

    fn small_cfg() -> MixConfig {
        MixConfig {
            warmup_epochs: 5,
            epochs: 6,
            batch_size: 32,
            ..MixConfig::default()
        }
    }

    fn small_models(ds: &LabeledDataset, cfg: &MixConfig, seed: u64) -> CoModels {
        CoModels::fresh(&[ds.dim(), 16, ds.classes], cfg, seed).unwrap()
    }

    #[test]
    fn sharpen_identity_at_unit_temperature() {
        let p = vec![0.3, 0.5, 0.2];
        let s = temp_sharpen(&p, 1.0);
        for (a, b) in p.iter().zip(&s) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sharpen_low_temperature_approaches_one_hot() {
        let s = temp_sharpen(&[0.6, 0.3, 0.1], 0.01);
        assert!((s[0] - 1.0).abs() < 1e-3, "{s:?}");
        assert!(s[1] < 1e-3 && s[2] < 1e-3);
    }

    #[test]
    fn sharpen_half_temperature_known_value() {
        let s = temp_sharpen(&[0.8, 0.2], 0.5);
        // 0.64 / 0.68 and 0.04 / 0.68
        assert!((s[0] - 16.0 / 17.0).abs() < 1e-12);
        assert!((s[1] - 1.0 / 17.0).abs() < 1e-12);
    }

    #[test]
    fn sharpen_preserves_argmax() {
        let p = vec![0.15, 0.4, 0.25, 0.2];
        for t in [0.05, 0.3, 1.0, 3.0, 10.0] {
            assert_eq!(nn::argmax(&temp_sharpen(&p, t)), 1, "t = {t}");
        }
    }

    #[test]
    fn refine_reduces_to_endpoints() {
        let y = vec![1.0, 0.0];
        let p_b = vec![0.6, 0.4];
        let full_trust = refine_clean_label(&y, 1.0, &p_b, 1.0);
        assert_eq!(full_trust, y);
        let no_trust = refine_clean_label(&y, 0.0, &p_b, 0.5);
        assert_eq!(no_trust, temp_sharpen(&p_b, 0.5));
    }

    #[test]
    fn refine_even_blend_known_value() {
        let out = refine_clean_label(&[1.0, 0.0], 0.5, &[0.6, 0.4], 1.0);
        assert!((out[0] - 0.8).abs() < 1e-12);
        assert!((out[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn avg_prediction_matches_hand_average() {
        let cfg = small_cfg();
        let models = CoModels::fresh(&[3, 8, 4], &cfg, 11).unwrap();
        let views = Mat::from_rows(&[vec![0.2, -0.5, 1.0], vec![0.3, -0.4, 0.9]]);
        let got = avg_prediction(&models, &views).unwrap();
        let pa = models.nets[0].predict_proba(&views).unwrap();
        let pb = models.nets[1].predict_proba(&views).unwrap();
        for c in 0..4 {
            let want =
                (pa.get(0, c) + pa.get(1, c) + pb.get(0, c) + pb.get(1, c)) / 4.0;
            assert!((got[c] - want).abs() < 1e-12);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn avg_prediction_identical_nets_is_single_net() {
        let cfg = small_cfg();
        let mut models = CoModels::fresh(&[3, 8, 4], &cfg, 11).unwrap();
        models.nets[1] = models.nets[0].clone();
        let views = Mat::from_rows(&[vec![0.1, 0.2, 0.3]]);
        let got = avg_prediction(&models, &views).unwrap();
        let solo = models.nets[0].predict_proba(&views).unwrap();
        for c in 0..4 {
            assert!((got[c] - solo.get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn mixup_identity_when_lambda_is_one() {
        let x = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let y = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]);
        let (mx, my) = mix_rows(&x, &y, &[2, 0, 1], &[1.0, 1.0, 1.0]);
        assert_eq!(mx, x);
        assert_eq!(my, y);
    }

    #[test]
    fn mixup_outputs_stay_convex() {
        let n = 50;
        let x = Mat::from_rows(
            &(0..n)
                .map(|i| vec![i as f64, (n - i) as f64])
                .collect::<Vec<_>>(),
        );
        let y = Mat::from_rows(
            &(0..n)
                .map(|i| {
                    let p = i as f64 / n as f64;
                    vec![p, 1.0 - p]
                })
                .collect::<Vec<_>>(),
        );
        let (mx, my) = proportional_mixup(&x, &y, 4.0, 99).unwrap();
        assert_eq!(mx.rows(), n);
        for i in 0..n {
            let sum: f64 = my.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "labels stay on the simplex");
        }
        // Seeded: the same call reproduces bit for bit.
        let again = proportional_mixup(&x, &y, 4.0, 99).unwrap();
        assert_eq!((mx, my), again);
    }

    #[test]
    fn mixup_anchors_each_row_to_its_own_source() {
        let x = Mat::from_rows(&[vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]]);
        let y = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]);
        let perm = [1, 2, 0];
        // Raw lambdas below 0.5 must flip so the first argument dominates.
        let (mx, _) = mix_rows(&x, &y, &perm, &[0.2, 0.5, 0.9]);
        for i in 0..3 {
            let d = |a: &[f64], b: &[f64]| -> f64 {
                a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum()
            };
            let d_self = d(mx.row(i), x.row(i));
            let d_partner = d(mx.row(i), x.row(perm[i]));
            assert!(d_self <= d_partner + 1e-12, "row {i} drifted to its partner");
        }
    }

    #[test]
    fn mixup_rejects_empty_pool() {
        let x = Mat::zeros(0, 3);
        let y = Mat::zeros(0, 2);
        assert!(proportional_mixup(&x, &y, 4.0, 0).is_err());
    }

    #[test]
    fn regularized_loss_reductions() {
        let probs = Mat::from_rows(&[vec![0.8, 0.2], vec![0.8, 0.2]]);
        let targets = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let plain = nn::cross_entropy(&probs, &targets);
        assert_eq!(regularized_loss(&probs, &targets, 0.0), plain);
        let reg = regularized_loss(&probs, &targets, 1.0) - plain;
        assert!((reg - 0.22314355131420976).abs() < 1e-12);
        // Uniform mean prediction carries no penalty.
        let balanced = Mat::from_rows(&[vec![0.8, 0.2], vec![0.2, 0.8]]);
        assert!(
            (regularized_loss(&balanced, &targets, 5.0) - nn::cross_entropy(&balanced, &targets))
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn lr_drops_by_ten_at_midpoint() {
        let cfg = MixConfig {
            epochs: 10,
            lr: 0.02,
            ..MixConfig::default()
        };
        assert_eq!(effective_lr(&cfg, 0), 0.02);
        assert_eq!(effective_lr(&cfg, 4), 0.02);
        assert_eq!(effective_lr(&cfg, 5), 0.002);
        assert_eq!(effective_lr(&cfg, 9), 0.002);
    }

    #[test]
    fn zeta_recomputed_from_counts() {
        let stats = EpochStats {
            epoch: 0,
            test_acc: None,
            est_noise_rate: 0.8,
            n_clean: 200.0,
            n_easy: 600.0,
            n_hard: 100.0,
            clean_precision: None,
            clean_recall: None,
            hard_precision: None,
            hard_recall: None,
            relabel_acc: None,
            train_loss: 0.0,
        };
        assert_eq!(stats.zeta(), 0.75);
    }

    #[test]
    fn warmup_zero_epochs_is_identity() {
        let ds = make_synthetic(3, 20, 6, 8.0, 1).unwrap();
        let cfg = small_cfg();
        let mut models = small_models(&ds, &cfg, 5);
        let before = models.nets.clone();
        warmup(&mut models, &ds, &cfg, 0, 7).unwrap();
        assert_eq!(models.nets, before);
    }

    #[test]
    fn warmup_networks_diverge() {
        let ds = make_synthetic(3, 20, 6, 8.0, 1).unwrap();
        let cfg = small_cfg();
        let mut models = small_models(&ds, &cfg, 5);
        assert_ne!(models.nets[0], models.nets[1], "independent inits");
        warmup(&mut models, &ds, &cfg, 2, 7).unwrap();
        assert_ne!(models.nets[0], models.nets[1]);
    }

    #[test]
    fn warmup_separates_loss_groups_under_planted_noise() {
        let clean = make_synthetic(4, 50, 8, 8.0, 3).unwrap();
        let ds = inject_symmetric(&clean, 0.5, 21).unwrap();
        let cfg = MixConfig {
            batch_size: 32,
            ..MixConfig::default()
        };
        let mut models = small_models(&ds, &cfg, 9);
        warmup(&mut models, &ds, &cfg, 8, 13).unwrap();
        let losses = models.nets[0]
            .per_sample_ce(&ds.features, &ds.given_labels)
            .unwrap();
        let (mut clean_sum, mut clean_n, mut noisy_sum, mut noisy_n) = (0.0, 0, 0.0, 0);
        for i in 0..ds.n() {
            if ds.given_labels[i] == ds.true_labels[i] {
                clean_sum += losses[i];
                clean_n += 1;
            } else {
                noisy_sum += losses[i];
                noisy_n += 1;
            }
        }
        let (clean_mean, noisy_mean) = (clean_sum / clean_n as f64, noisy_sum / noisy_n as f64);
        assert!(
            clean_mean < noisy_mean,
            "clean {clean_mean:.3} vs corrupted {noisy_mean:.3}"
        );
    }

    #[test]
    fn train_epoch_zero_lr_keeps_parameters() {
        let clean = make_synthetic(3, 30, 6, 8.0, 2).unwrap();
        let ds = inject_symmetric(&clean, 0.3, 4).unwrap();
        let cfg = MixConfig {
            lr: 0.0,
            batch_size: 32,
            epochs: 2,
            ..MixConfig::default()
        };
        let mut models = small_models(&ds, &cfg, 17);
        let before = models.nets.clone();
        let stats = train_epoch(&mut models, &ds, &cfg, &FilterConfig::default(), 0, 3).unwrap();
        assert_eq!(models.nets, before);
        assert!(stats.train_loss.is_finite());
        assert!(stats.n_clean + stats.n_easy > 0.0);
    }

    #[test]
    fn train_epoch_is_deterministic() {
        let clean = make_synthetic(3, 30, 6, 8.0, 2).unwrap();
        let ds = inject_symmetric(&clean, 0.4, 4).unwrap();
        let cfg = MixConfig {
            batch_size: 32,
            epochs: 4,
            ..MixConfig::default()
        };
        let run = || {
            let mut models = small_models(&ds, &cfg, 17);
            warmup(&mut models, &ds, &cfg, 2, 3).unwrap();
            let stats = train_epoch(&mut models, &ds, &cfg, &FilterConfig::default(), 0, 3).unwrap();
            (models, stats)
        };
        let (m1, s1) = run();
        let (m2, s2) = run();
        assert_eq!(m1.nets, m2.nets);
        assert_eq!(s1, s2);
    }

    #[test]
    fn clean_data_estimated_noise_stays_low() {
        let ds = make_synthetic(4, 50, 8, 8.0, 6).unwrap();
        let cfg = MixConfig {
            batch_size: 32,
            epochs: 4,
            ..MixConfig::default()
        };
        let mut models = small_models(&ds, &cfg, 23);
        warmup(&mut models, &ds, &cfg, 8, 31).unwrap();
        let stats = train_epoch(&mut models, &ds, &cfg, &FilterConfig::default(), 0, 31).unwrap();
        assert!(
            stats.est_noise_rate < 0.15,
            "noise-free data estimated at {:.3}",
            stats.est_noise_rate
        );
    }

    #[test]
    fn hard_samples_never_reach_the_pool() {
        let clean = make_synthetic(4, 60, 8, 6.0, 8).unwrap();
        let ds = inject_symmetric(&clean, 0.6, 14).unwrap();
        let cfg = MixConfig {
            batch_size: 32,
            epochs: 4,
            ..MixConfig::default()
        };
        let mut models = small_models(&ds, &cfg, 29);
        warmup(&mut models, &ds, &cfg, 6, 37).unwrap();
        let (_, log) =
            train_epoch_logged(&mut models, &ds, &cfg, &FilterConfig::default(), 0, 37).unwrap();
        for k in 0..2 {
            let hard: std::collections::HashSet<usize> = log.hard[k].iter().cloned().collect();
            assert!(log.pool_sources[k].iter().all(|i| !hard.contains(i)));
            assert_eq!(
                log.pool_sources[k].len(),
                cfg.m * (log.n_clean[k] + log.n_easy[k]),
                "pool holds every view of every kept sample, uncapped"
            );
        }
    }

    #[test]
    fn unfiltered_epoch_keeps_every_sample() {
        let clean = make_synthetic(4, 40, 8, 6.0, 8).unwrap();
        let ds = inject_symmetric(&clean, 0.5, 14).unwrap();
        let cfg = MixConfig {
            batch_size: 32,
            epochs: 4,
            ..MixConfig::default()
        };
        let mut models = small_models(&ds, &cfg, 29);
        warmup(&mut models, &ds, &cfg, 2, 37).unwrap();
        let before = models.nets[0].clone();
        let stats = train_epoch_unfiltered(&mut models, &ds, &cfg, 0, 37).unwrap();
        assert_eq!(stats.est_noise_rate, 0.0);
        assert_eq!(stats.n_clean, ds.n() as f64);
        assert_eq!(stats.n_easy, 0.0);
        assert_eq!(stats.n_hard, 0.0);
        assert!(stats.hard_precision.is_none() && stats.relabel_acc.is_none());
        let truly_clean = (0..ds.n())
            .filter(|&i| ds.given_labels[i] == ds.true_labels[i])
            .count() as f64
            / ds.n() as f64;
        assert!((stats.clean_precision.unwrap() - truly_clean).abs() < 1e-12);
        assert_ne!(models.nets[0], before, "an SGD pass must have run");
    }

    #[test]
    fn unfiltered_epoch_is_deterministic() {
        let clean = make_synthetic(3, 30, 6, 8.0, 2).unwrap();
        let ds = inject_symmetric(&clean, 0.4, 4).unwrap();
        let cfg = MixConfig {
            batch_size: 32,
            epochs: 4,
            ..MixConfig::default()
        };
        let run = || {
            let mut models = small_models(&ds, &cfg, 17);
            warmup(&mut models, &ds, &cfg, 2, 3).unwrap();
            train_epoch_unfiltered(&mut models, &ds, &cfg, 0, 3).unwrap();
            models
        };
        assert_eq!(run().nets, run().nets);
    }

    #[test]
    fn warmup_reports_mean_minibatch_loss() {
        let ds = make_synthetic(3, 20, 6, 8.0, 2).unwrap();
        let cfg = small_cfg();
        let mut models = small_models(&ds, &cfg, 3);
        let untouched = warmup(&mut models, &ds, &cfg, 0, 5).unwrap();
        assert_eq!(untouched, 0.0, "no steps, no loss");
        let loss = warmup(&mut models, &ds, &cfg, 3, 5).unwrap();
        // Random 3-class predictions start near ln 3; training brings the
        // average below that.
        assert!(loss > 0.0 && loss < 3.0_f64.ln() + 0.5, "loss = {loss}");
    }

    #[test]
    fn evaluate_matches_single_net_when_identical() {
        let ds = make_synthetic(3, 20, 6, 8.0, 2).unwrap();
        let cfg = small_cfg();
        let mut models = small_models(&ds, &cfg, 3);
        models.nets[1] = models.nets[0].clone();
        let acc = evaluate(&models, &ds).unwrap();
        let probs = models.nets[0].predict_proba(&ds.features).unwrap();
        let solo = (0..ds.n())
            .filter(|&i| nn::argmax(probs.row(i)) == ds.true_labels[i])
            .count() as f64
            / ds.n() as f64;
        assert_eq!(acc, solo);
    }

    #[test]
    fn evaluate_hand_averaged_oracle() {
        let ds = make_synthetic(3, 15, 6, 8.0, 2).unwrap();
        let cfg = small_cfg();
        let models = small_models(&ds, &cfg, 3);
        let pa = models.nets[0].predict_proba(&ds.features).unwrap();
        let pb = models.nets[1].predict_proba(&ds.features).unwrap();
        let mut hits = 0;
        for i in 0..ds.n() {
            let mean: Vec<f64> = (0..3)
                .map(|c| 0.5 * (pa.get(i, c) + pb.get(i, c)))
                .collect();
            if nn::argmax(&mean) == ds.true_labels[i] {
                hits += 1;
            }
        }
        let want = hits as f64 / ds.n() as f64;
        assert_eq!(evaluate(&models, &ds).unwrap(), want);
    }

    #[test]
    fn evaluate_rejects_empty_set() {
        let ds = make_synthetic(3, 15, 6, 8.0, 2).unwrap();
        let cfg = small_cfg();
        let models = small_models(&ds, &cfg, 3);
        let empty = ds.subset(&[]);
        assert!(evaluate(&models, &empty).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        for bad in [
            MixConfig { m: 0, ..MixConfig::default() },
            MixConfig { temperature: 0.0, ..MixConfig::default() },
            MixConfig { alpha: -1.0, ..MixConfig::default() },
            MixConfig { lambda_r: -0.1, ..MixConfig::default() },
            MixConfig { mask_fraction: 1.0, ..MixConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
