//! Executes configured runs: dataset assembly, the pipeline variants, and
//! artifact emission.
//!
//! Every run is a pure function of (config, seed). Per-seed streams are
//! derived from the run seed so that all variants sharing a config see the
//! same dataset and the same noise realization, which is what makes the
//! paired comparisons in the ablation meaningful.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use propmix::data::{self, LabeledDataset, NoiseKind};
use propmix::nn::{self, OptimState, ParamSet};
use propmix::rng;
use propmix::ssl;
use propmix::train::{self, CoModels, MixConfig};
use propmix::{Error, Result};

use crate::config::{RunConfig, Variant};
use crate::metrics::{
    accuracy_digest, write_failure_marker, write_summary, MetricsRow, MetricsWriter, Summary,
};

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config_hash: String,
    pub rows: Vec<MetricsRow>,
    pub best_acc: f64,
    pub last10_acc: f64,
    pub epochs: usize,
    pub seed: u64,
    pub wall_clock_s: f64,
    pub artifacts: Vec<PathBuf>,
}

pub fn run_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Seeds for dataset draw, test draw, and noise realization. Mixing the
/// config-level seeds back in lets one run seed host distinct datasets.
fn derived_seeds(cfg: &RunConfig, run_seed: u64) -> (u64, u64, u64) {
    (
        rng::child(rng::child(run_seed, rng::tag::DATASET), cfg.dataset.seed),
        rng::child(rng::child(run_seed, rng::tag::TEST_SET), cfg.dataset.seed),
        rng::child(rng::child(run_seed, rng::tag::NOISE), cfg.noise.seed),
    )
}

/// Builds the (train, test) pair: either loaded from CSV or synthesized,
/// then label noise applied to the training split only. Features and true
/// labels are unaffected by the noise section.
pub fn assemble_data(cfg: &RunConfig, run_seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let (dseed, tseed, nseed) = derived_seeds(cfg, run_seed);
    let (clean_train, test) = match (&cfg.dataset.path, &cfg.dataset.test_path) {
        (Some(train_path), Some(test_path)) => (
            data::load_dataset(train_path)?,
            data::load_dataset(test_path)?,
        ),
        _ => {
            let d = &cfg.dataset;
            (
                data::make_synthetic(d.classes, d.per_class, d.dim, d.separation, dseed)?,
                data::make_synthetic(d.classes, d.test_per_class, d.dim, d.separation, tseed)?,
            )
        }
    };
    let train = match cfg.noise.to_spec() {
        None => clean_train,
        Some(mut spec) => {
            spec.seed = nseed;
            let aux = match spec.kind {
                NoiseKind::Instance => Some(data::default_auxiliary(&clean_train, nseed)?),
                _ => None,
            };
            data::apply_noise(&clean_train, &spec, aux.as_ref())?
        }
    };
    Ok((train, test))
}

/// Runs `cfg.run.variant` for one seed into `dir`. On success the metrics
/// CSV, summary, and checkpoints land there; on failure the partial CSV
/// stays behind alongside a failure marker.
pub fn run_experiment(cfg: &RunConfig, run_seed: u64, dir: &Path) -> Result<RunReport> {
    let hash = cfg.hash();
    std::fs::create_dir_all(dir)?;
    let start = Instant::now();
    let mut sink = MetricsWriter::create(dir)?;
    let mut artifacts = Vec::new();
    match execute(cfg, cfg.run.variant, run_seed, dir, &mut sink, &mut artifacts) {
        Ok(rows) => {
            artifacts.push(sink.finish()?);
            let (best_acc, last10_acc) = accuracy_digest(&rows);
            let wall_clock_s = start.elapsed().as_secs_f64();
            let summary = Summary {
                config_hash: hash.clone(),
                best_acc,
                last10_acc,
                epochs: rows.len(),
                seed: run_seed,
                wall_clock_s,
            };
            artifacts.push(write_summary(dir, &summary)?);
            Ok(RunReport {
                config_hash: hash,
                epochs: rows.len(),
                rows,
                best_acc,
                last10_acc,
                seed: run_seed,
                wall_clock_s,
                artifacts,
            })
        }
        Err(e) => {
            drop(sink); // keep the partial CSV as evidence
            let _ = write_failure_marker(dir, &hash, run_seed, &e);
            Err(e)
        }
    }
}

/// One run per configured seed, each in its own `seed_<n>` subdirectory.
pub fn train_all(cfg: &RunConfig) -> Result<Vec<RunReport>> {
    cfg.run
        .seeds
        .iter()
        .map(|&seed| run_experiment(cfg, seed, &run_dir(&cfg.run.out_dir, seed)))
        .collect()
}

fn execute(
    cfg: &RunConfig,
    variant: Variant,
    run_seed: u64,
    dir: &Path,
    sink: &mut MetricsWriter,
    artifacts: &mut Vec<PathBuf>,
) -> Result<Vec<MetricsRow>> {
    let (train_ds, test_ds) = assemble_data(cfg, run_seed)?;
    info!(
        "{variant} seed {run_seed}: {} train / {} test, realized noise {:.3}",
        train_ds.n(),
        test_ds.n(),
        train_ds.noise_fraction()
    );
    match variant {
        Variant::PretrainOnly => pretrain_only(cfg, &train_ds, &test_ds, run_seed, dir, sink, artifacts),
        Variant::CeBaseline => ce_run(cfg, &train_ds, &test_ds, run_seed, dir, sink, artifacts, false),
        Variant::CeOracle => ce_run(cfg, &train_ds, &test_ds, run_seed, dir, sink, artifacts, true),
        Variant::Full | Variant::NoFilter | Variant::NoPretrain => {
            pipeline_run(cfg, variant, &train_ds, &test_ds, run_seed, dir, sink, artifacts)
        }
    }
}

/// Loads or trains the encoder used to warm-start the two networks.
fn obtain_encoder(
    cfg: &RunConfig,
    ds: &LabeledDataset,
    run_seed: u64,
    dir: &Path,
    artifacts: &mut Vec<PathBuf>,
) -> Result<Option<ParamSet>> {
    if let Some(ckpt) = &cfg.pretrain.checkpoint {
        return Ok(Some(nn::load_params(ckpt)?));
    }
    if !cfg.pretrain.enabled {
        return Ok(None);
    }
    let art = ssl::pretrain(
        &ds.features,
        ds.classes,
        &cfg.pretrain.hidden,
        &cfg.pretrain.to_contrastive(),
        &cfg.pretrain.to_scan(),
        run_seed,
    )?;
    let path = dir.join("encoder.json");
    nn::save_params(&path, &art.encoder)?;
    artifacts.push(path);
    Ok(Some(art.encoder))
}

fn fresh_dims(cfg: &RunConfig, ds: &LabeledDataset) -> Vec<usize> {
    let mut dims = vec![ds.dim()];
    dims.extend_from_slice(&cfg.pretrain.hidden);
    dims.push(ds.classes);
    dims
}

#[allow(clippy::too_many_arguments)]
fn pipeline_run(
    cfg: &RunConfig,
    variant: Variant,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    run_seed: u64,
    dir: &Path,
    sink: &mut MetricsWriter,
    artifacts: &mut Vec<PathBuf>,
) -> Result<Vec<MetricsRow>> {
    let mix = cfg.train.to_mix_config();
    let fcfg = cfg.filter.to_filter_config();
    let encoder = match variant {
        Variant::NoPretrain => None,
        _ => obtain_encoder(cfg, train_ds, run_seed, dir, artifacts)?,
    };
    let mut models = match &encoder {
        Some(enc) => CoModels::from_pretrained(enc, train_ds.classes, &mix, run_seed)?,
        None => CoModels::fresh(&fresh_dims(cfg, train_ds), &mix, run_seed)?,
    };
    train::warmup(&mut models, train_ds, &mix, mix.warmup_epochs, run_seed)?;

    let mut rows = Vec::with_capacity(mix.epochs);
    for epoch in 0..mix.epochs {
        let stats = match variant {
            Variant::NoFilter => {
                train::train_epoch_unfiltered(&mut models, train_ds, &mix, epoch, run_seed)?
            }
            _ => train::train_epoch(&mut models, train_ds, &mix, &fcfg, epoch, run_seed)?,
        };
        let acc = train::evaluate(&models, test_ds)?;
        let row = MetricsRow::from_stats(&stats, acc);
        sink.append(&row)?;
        rows.push(row);
    }
    save_nets(&models, dir, artifacts)?;
    Ok(rows)
}

/// Plain cross-entropy for the same total epoch budget as the pipeline,
/// with the same halfway learning-rate drop. The oracle flavor trains on
/// the true labels to give a noise-free ceiling.
#[allow(clippy::too_many_arguments)]
fn ce_run(
    cfg: &RunConfig,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    run_seed: u64,
    dir: &Path,
    sink: &mut MetricsWriter,
    artifacts: &mut Vec<PathBuf>,
    oracle: bool,
) -> Result<Vec<MetricsRow>> {
    let mix = cfg.train.to_mix_config();
    let ds = if oracle {
        LabeledDataset {
            given_labels: train_ds.true_labels.clone(),
            noise_spec: None,
            ..train_ds.clone()
        }
    } else {
        train_ds.clone()
    };
    let mut models = CoModels::fresh(&fresh_dims(cfg, &ds), &mix, run_seed)?;
    let total = mix.warmup_epochs + mix.epochs;
    let mut rows = Vec::with_capacity(total);
    for epoch in 0..total {
        let lr = if epoch >= total.div_ceil(2) {
            mix.lr * 0.1
        } else {
            mix.lr
        };
        let epoch_cfg = MixConfig { lr, ..mix.clone() };
        let seed = rng::child(rng::child(run_seed, rng::tag::WARMUP), epoch as u64);
        let loss = train::warmup(&mut models, &ds, &epoch_cfg, 1, seed)?;
        let acc = train::evaluate(&models, test_ds)?;
        let row = MetricsRow::plain(epoch, acc, ds.n(), loss);
        sink.append(&row)?;
        rows.push(row);
    }
    save_nets(&models, dir, artifacts)?;
    Ok(rows)
}

fn pretrain_only(
    cfg: &RunConfig,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    run_seed: u64,
    dir: &Path,
    sink: &mut MetricsWriter,
    artifacts: &mut Vec<PathBuf>,
) -> Result<Vec<MetricsRow>> {
    let art = ssl::pretrain(
        &train_ds.features,
        train_ds.classes,
        &cfg.pretrain.hidden,
        &cfg.pretrain.to_contrastive(),
        &cfg.pretrain.to_scan(),
        run_seed,
    )?;
    for (name, params) in [("encoder.json", &art.encoder), ("cluster.json", &art.cluster)] {
        let path = dir.join(name);
        nn::save_params(&path, params)?;
        artifacts.push(path);
    }
    let acc = cluster_purity(&art.cluster, test_ds)?;
    let row = MetricsRow::plain(0, acc, 0, 0.0);
    sink.append(&row)?;
    Ok(vec![row])
}

/// Accuracy of the cluster head under the majority-vote mapping from
/// clusters to classes. Labels are only read here, on the test split, to
/// score the mapping — the head itself never saw any.
pub fn cluster_purity(cluster: &ParamSet, test: &LabeledDataset) -> Result<f64> {
    if test.n() == 0 {
        return Err(Error::InsufficientData("cannot score clusters on an empty set".into()));
    }
    let probs = cluster.predict_proba(&test.features)?;
    let mut counts = vec![vec![0usize; test.classes]; probs.cols()];
    for i in 0..test.n() {
        counts[nn::argmax(probs.row(i))][test.true_labels[i]] += 1;
    }
    let correct: usize = counts
        .iter()
        .map(|per_class| per_class.iter().max().copied().unwrap_or(0))
        .sum();
    Ok(correct as f64 / test.n() as f64)
}

fn save_nets(models: &CoModels, dir: &Path, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    for (name, net) in [("net_a.json", &models.nets[0]), ("net_b.json", &models.nets[1])] {
        let path = dir.join(name);
        nn::save_params(&path, net)?;
        artifacts.push(path);
    }
    Ok(())
}

/// Pretrains for each configured seed and saves the artifacts, so later
/// runs can point `pretrain.checkpoint` at the encoder.
pub fn pretrain_all(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut encoders = Vec::new();
    for &seed in &cfg.run.seeds {
        let dir = run_dir(&cfg.run.out_dir, seed);
        std::fs::create_dir_all(&dir)?;
        let (train_ds, _) = assemble_data(cfg, seed)?;
        let art = ssl::pretrain(
            &train_ds.features,
            train_ds.classes,
            &cfg.pretrain.hidden,
            &cfg.pretrain.to_contrastive(),
            &cfg.pretrain.to_scan(),
            seed,
        )?;
        for (name, params) in [("encoder.json", &art.encoder), ("cluster.json", &art.cluster)] {
            nn::save_params(&dir.join(name), params)?;
        }
        encoders.push(dir.join("encoder.json"));
    }
    Ok(encoders)
}

/// Rebuilds the test split for `seed` and scores the checkpoints trained
/// under the same seed. Must be pointed at a finished training directory.
pub fn eval_run(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<f64> {
    let (_, test_ds) = assemble_data(cfg, seed)?;
    let mix = cfg.train.to_mix_config();
    let nets = [
        nn::load_params(&dir.join("net_a.json"))?,
        nn::load_params(&dir.join("net_b.json"))?,
    ];
    let opts = [
        OptimState::new(mix.lr, mix.momentum, mix.weight_decay, &nets[0]),
        OptimState::new(mix.lr, mix.momentum, mix.weight_decay, &nets[1]),
    ];
    train::evaluate(&CoModels { nets, opts }, &test_ds)
}

/// Materializes the configured dataset (noise applied) as CSV files.
pub fn inject_and_save(cfg: &RunConfig, seed: u64, out: &Path) -> Result<(PathBuf, PathBuf, f64)> {
    let (train_ds, test_ds) = assemble_data(cfg, seed)?;
    std::fs::create_dir_all(out)?;
    let train_path = out.join("train.csv");
    let test_path = out.join("test.csv");
    train_ds.save(&train_path)?;
    test_ds.save(&test_path)?;
    Ok((train_path, test_path, train_ds.noise_fraction()))
}
