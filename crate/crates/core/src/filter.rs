//! Unsupervised sample triage. A two-component 1-D Gaussian mixture fitted
//! on per-sample losses splits the data into clean and noisy; a second
//! mixture on top-class confidence over the noisy set splits easy from hard.
//! Hard samples carry both a wrong label and a wrong prediction, so the
//! trainer drops them.
//!
//! EM initialization is data-driven (10th/90th percentile means, pooled
//! variance, equal weights), so fits are deterministic; the seed only
//! perturbs the init when both percentiles coincide on non-constant data.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;

const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Gmm1D {
    /// Sorted ascending; index 0 is the low-mean component.
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood at the start of each EM iteration; nondecreasing.
    pub log_likelihood: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct FilterConfig {
    /// Minimum clean posterior w_i for a sample to join the clean set.
    pub tau_clean: f64,
    /// Minimum hard posterior for a noisy sample to be dropped.
    pub tau_hard: f64,
    pub em_tol: f64,
    pub em_max_iters: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            tau_clean: 0.5,
            tau_hard: 0.5,
            em_tol: 1e-6,
            em_max_iters: 100,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_clean", self.tau_clean), ("tau_hard", self.tau_hard)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("{name} must lie strictly in (0,1), got {v}")));
            }
        }
        if !(self.em_tol > 0.0) {
            return Err(Error::config(format!("em_tol must be positive, got {}", self.em_tol)));
        }
        if self.em_max_iters == 0 {
            return Err(Error::config("em_max_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Index partition of one epoch; clean entries carry their clean posterior.
#[derive(Debug, Clone)]
pub struct Partition {
    pub clean: Vec<(usize, f64)>,
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
}

impl Partition {
    pub fn total(&self) -> usize {
        self.clean.len() + self.easy.len() + self.hard.len()
    }

    pub fn noisy_count(&self) -> usize {
        self.easy.len() + self.hard.len()
    }

    /// Checks the three sets are disjoint and cover [0, n).
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.total() != n {
            return Err(Error::contract(format!(
                "partition covers {} of {n} samples",
                self.total()
            )));
        }
        let mut seen = vec![false; n];
        let clean_iter = self.clean.iter().map(|&(i, _)| i);
        for i in clean_iter.chain(self.easy.iter().copied()).chain(self.hard.iter().copied()) {
            if i >= n || seen[i] {
                return Err(Error::contract(format!("index {i} out of range or duplicated")));
            }
            seen[i] = true;
        }
        if self.clean.iter().any(|&(_, w)| !(0.0..=1.0).contains(&w)) {
            return Err(Error::contract("clean posterior outside [0,1]"));
        }
        Ok(())
    }

    /// Debug dump: `index,set,w` rows, w blank outside the clean set.
    pub fn dump_csv(&self, path: &Path) -> Result<()> {
        let mut body = String::from("index,set,w\n");
        let mut rows: Vec<(usize, &str, Option<f64>)> = Vec::with_capacity(self.total());
        rows.extend(self.clean.iter().map(|&(i, w)| (i, "clean", Some(w))));
        rows.extend(self.easy.iter().map(|&i| (i, "easy", None)));
        rows.extend(self.hard.iter().map(|&i| (i, "hard", None)));
        rows.sort_by_key(|&(i, _, _)| i);
        for (i, set, w) in rows {
            match w {
                Some(w) => {
                    let _ = writeln!(body, "{i},{set},{w}");
                }
                None => {
                    let _ = writeln!(body, "{i},{set},");
                }
            }
        }
        std::fs::write(path, body)?;
        Ok(())
    }
}

/// Affine rescale to [0,1]; constant input maps to all 0.5.
pub fn normalize01(values: &[f64]) -> Vec<f64> {
    assert!(!values.is_empty(), "normalize01 needs at least one value");
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![0.5; values.len()];
    }
    let inv = 1.0 / (max - min);
    values.iter().map(|&v| (v - min) * inv).collect()
}

fn log_normal_pdf(v: f64, mean: f64, var: f64) -> f64 {
    let d = v - mean;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

/// EM fit of a two-component mixture. Components come back sorted by mean;
/// variances are floored at 1e-6.
pub fn fit_gmm1d(values: &[f64], cfg: &FilterConfig, seed: u64) -> Result<Gmm1D> {
    cfg.validate()?;
    let n = values.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!("GMM fit needs at least 4 values, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("GMM fit on non-finite values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let grand_mean = values.iter().sum::<f64>() / n as f64;
    let pooled_var = (values.iter().map(|v| (v - grand_mean).powi(2)).sum::<f64>() / n as f64)
        .max(VAR_FLOOR);
    let mut means = [percentile(&sorted, 0.1), percentile(&sorted, 0.9)];
    if (means[1] - means[0]).abs() < 1e-12 && hi > lo {
        // Percentiles collapsed on skewed data; nudge them apart so EM can
        // tell the components apart.
        let mut jitter_rng = rng::stream(rng::child(seed, rng::tag::GMM));
        let eps = (0.01 + 0.04 * jitter_rng.gen::<f64>()) * (hi - lo);
        means[0] -= eps;
        means[1] += eps;
    }
    let mut variances = [pooled_var, pooled_var];
    let mut weights: [f64; 2] = [0.5, 0.5];
    let mut log_likelihood: Vec<f64> = Vec::new();
    let mut resp0 = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.em_max_iters {
        // E-step: responsibilities of the low component plus the data
        // log-likelihood under the current parameters.
        let mut ll = 0.0;
        for (i, &v) in values.iter().enumerate() {
            let a = weights[0].max(0.0).ln() + log_normal_pdf(v, means[0], variances[0]);
            let b = weights[1].max(0.0).ln() + log_normal_pdf(v, means[1], variances[1]);
            let max = a.max(b);
            let lse = max + ((a - max).exp() + (b - max).exp()).ln();
            ll += lse;
            resp0[i] = (a - lse).exp();
        }
        if let Some(&prev) = log_likelihood.last() {
            debug_assert!(
                ll >= prev - 1e-9 * prev.abs().max(1.0),
                "EM log-likelihood decreased: {prev} -> {ll}"
            );
            if (ll - prev).abs() < cfg.em_tol {
                log_likelihood.push(ll);
                converged = true;
                break;
            }
        }
        log_likelihood.push(ll);
        // M-step.
        iterations += 1;
        let sum0: f64 = resp0.iter().sum();
        let sum1 = n as f64 - sum0;
        for (k, sum) in [(0, sum0), (1, sum1)] {
            if sum < 1e-12 {
                // Dead component: keep its shape, zero its weight.
                weights[k] = 0.0;
                continue;
            }
            let r = |i: usize| if k == 0 { resp0[i] } else { 1.0 - resp0[i] };
            let mean = values
                .iter()
                .enumerate()
                .map(|(i, &v)| r(i) * v)
                .sum::<f64>()
                / sum;
            let var = values
                .iter()
                .enumerate()
                .map(|(i, &v)| r(i) * (v - mean).powi(2))
                .sum::<f64>()
                / sum;
            means[k] = mean;
            variances[k] = var.max(VAR_FLOOR);
            weights[k] = sum / n as f64;
        }
    }
    if means[0] > means[1] {
        means.swap(0, 1);
        variances.swap(0, 1);
        weights.swap(0, 1);
    }
    Ok(Gmm1D {
        means,
        variances,
        weights,
        iterations,
        converged,
        log_likelihood,
    })
}

/// Bayes posterior of the low-mean component at `v`, computed in log space.
pub fn posterior_low(g: &Gmm1D, v: f64) -> f64 {
    let a = g.weights[0].max(0.0).ln() + log_normal_pdf(v, g.means[0], g.variances[0]);
    let b = g.weights[1].max(0.0).ln() + log_normal_pdf(v, g.means[1], g.variances[1]);
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return 0.5;
    }
    1.0 / (1.0 + (b - a).exp())
}

pub fn posterior_high(g: &Gmm1D, v: f64) -> f64 {
    1.0 - posterior_low(g, v)
}

/// Minimum Ashman separation `sqrt(2)|m1-m0| / sqrt(v0+v1)` for two fitted
/// components to count as distinct modes. Below this, EM has merely carved
/// a single mode in two and the posterior boundary lands at an arbitrary
/// spot inside one population.
const MODE_SEPARATION_MIN: f64 = 2.0;

fn ashman_separation(g: &Gmm1D) -> f64 {
    std::f64::consts::SQRT_2 * (g.means[1] - g.means[0])
        / (g.variances[0] + g.variances[1]).sqrt()
}

/// Median per-sample loss below which the model is considered to already
/// fit the bulk of the data (p(given label) > 0.9).
const FITTED_MEDIAN_LOSS: f64 = 0.1;

/// Splits by clean posterior over min-max-normalized losses. Low loss means
/// clean, so w_i is the low-component posterior; clean iff w_i >= tau_clean.
/// Returns (clean indices with w, noisy indices).
///
/// One override: when the fit is single-mode AND the raw losses say the
/// model already fits almost everything, there is no noise mode to find —
/// normalization has merely stretched a straggler tail — so every index is
/// kept clean, still carrying its fitted w. A single mid-scale mode (early,
/// underfit training) splits normally: the soft boundary is what lets the
/// loss separation bootstrap over epochs.
pub fn split_clean_noisy(
    losses: &[f64],
    cfg: &FilterConfig,
    seed: u64,
) -> Result<(Vec<(usize, f64)>, Vec<usize>)> {
    let norm = normalize01(losses);
    let g = fit_gmm1d(&norm, cfg, seed)?;
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let noise_free =
        ashman_separation(&g) < MODE_SEPARATION_MIN && median < FITTED_MEDIAN_LOSS;
    if noise_free {
        log::warn!(
            "loss mixture is single-mode (separation {:.2}) at near-zero scale \
             (median {median:.4}); treating all {} samples as clean",
            ashman_separation(&g),
            losses.len()
        );
    }
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    for (i, &v) in norm.iter().enumerate() {
        let w = posterior_low(&g, v);
        if noise_free || w >= cfg.tau_clean {
            clean.push((i, w));
        } else {
            noisy.push(i);
        }
    }
    Ok((clean, noisy))
}

/// Splits the noisy set by top-class confidence: the low-confidence
/// component is hard, and a sample is dropped iff its hard posterior is at
/// least tau_hard. Returns (easy, hard) as indices into `confidences`.
///
/// Two fallbacks keep the filter conservative: fewer than 4 noisy samples
/// disables the split, and a fit whose components are not separated enough
/// to be genuine modes classifies everything easy.
pub fn split_easy_hard(
    confidences: &[f64],
    cfg: &FilterConfig,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    cfg.validate()?;
    if confidences.len() < 4 {
        log::warn!(
            "only {} noisy samples; easy/hard split disabled for this epoch",
            confidences.len()
        );
        return Ok(((0..confidences.len()).collect(), Vec::new()));
    }
    let g = fit_gmm1d(confidences, cfg, seed)?;
    let separation = ashman_separation(&g);
    if separation < MODE_SEPARATION_MIN {
        log::warn!(
            "confidence mixture is single-mode (separation {separation:.2}); \
             keeping all {} noisy samples as easy",
            confidences.len()
        );
        return Ok(((0..confidences.len()).collect(), Vec::new()));
    }
    let mut easy = Vec::new();
    let mut hard = Vec::new();
    for (i, &c) in confidences.iter().enumerate() {
        if posterior_low(&g, c) >= cfg.tau_hard {
            hard.push(i);
        } else {
            easy.push(i);
        }
    }
    Ok((easy, hard))
}

/// Per-epoch filter diagnostics. Metrics with an empty denominator are
/// `None` rather than 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterMetrics {
    pub n_clean: usize,
    pub n_easy: usize,
    pub n_hard: usize,
    /// Noisy fraction |U|/|D| as estimated by the loss split.
    pub est_noise_rate: f64,
    pub clean_precision: Option<f64>,
    pub clean_recall: Option<f64>,
    pub hard_precision: Option<f64>,
    pub hard_recall: Option<f64>,
    /// Fraction of the easy set whose current prediction hits the true
    /// label, i.e. accuracy the relabeling step would achieve.
    pub relabel_acc: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Scores a partition against ground truth. A sample is truly hard when its
/// given label and the model prediction are both wrong.
pub fn filter_metrics(part: &Partition, ds: &LabeledDataset, preds: &[usize]) -> Result<FilterMetrics> {
    let n = ds.n();
    if preds.len() != n {
        return Err(Error::shape(format!("{} predictions for {n} samples", preds.len())));
    }
    part.validate(n)?;
    let truly_clean: Vec<bool> = ds
        .true_labels
        .iter()
        .zip(&ds.given_labels)
        .map(|(t, g)| t == g)
        .collect();
    let truly_hard: Vec<bool> = (0..n)
        .map(|i| !truly_clean[i] && preds[i] != ds.true_labels[i])
        .collect();
    let clean_tp = part.clean.iter().filter(|&&(i, _)| truly_clean[i]).count();
    let hard_tp = part.hard.iter().filter(|&&i| truly_hard[i]).count();
    let relabel_hits = part.easy.iter().filter(|&&i| preds[i] == ds.true_labels[i]).count();
    Ok(FilterMetrics {
        n_clean: part.clean.len(),
        n_easy: part.easy.len(),
        n_hard: part.hard.len(),
        est_noise_rate: part.noisy_count() as f64 / n as f64,
        clean_precision: ratio(clean_tp, part.clean.len()),
        clean_recall: ratio(clean_tp, truly_clean.iter().filter(|&&b| b).count()),
        hard_precision: ratio(hard_tp, part.hard.len()),
        hard_recall: ratio(hard_tp, truly_hard.iter().filter(|&&b| b).count()),
        relabel_acc: ratio(relabel_hits, part.easy.len()),
    })
}
