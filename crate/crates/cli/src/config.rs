//! Declarative run configuration: TOML schema, validation, and the
//! semantic hash that names a run.
//!
//! Every knob lives in the file; the only CLI overrides are `--seed`
//! (replaces the seed list) and `--out` (replaces the output directory).
//! All randomness anywhere downstream derives from the seeds recorded
//! here — nothing reads the clock or OS entropy.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use propmix::data::{NoiseKind, NoiseSpec};
use propmix::filter::FilterConfig;
use propmix::ssl::{AugmentSpec, ContrastiveConfig, ScanConfig};
use propmix::train::MixConfig;
use propmix::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub filter: FilterSection,
    pub run: RunSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSection>,
}

/// Either a pair of CSV files or synthetic Gaussian blobs. When `path` is
/// set it wins and the synthetic fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub test_per_class: usize,
    /// Mixed into the run seed, so one config can host several datasets.
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: None,
            test_path: None,
            classes: 10,
            per_class: 100,
            dim: 32,
            separation: 6.0,
            test_per_class: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseChoice {
    #[default]
    None,
    Sym,
    Asym,
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub kind: NoiseChoice,
    pub rate: f64,
    pub seed: u64,
    /// Class flip map for `asym`, e.g. `pairs = [[0, 1], [1, 0]]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<(usize, usize)>>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            kind: NoiseChoice::None,
            rate: 0.0,
            seed: 0,
            pairs: None,
        }
    }
}

impl NoiseSection {
    pub fn to_spec(&self) -> Option<NoiseSpec> {
        let kind = match self.kind {
            NoiseChoice::None => return None,
            NoiseChoice::Sym => NoiseKind::Symmetric,
            NoiseChoice::Asym => NoiseKind::Asymmetric,
            NoiseChoice::Instance => NoiseKind::Instance,
        };
        Some(NoiseSpec {
            kind,
            rate: self.rate,
            seed: self.seed,
            pairs: self.pairs.clone(),
        })
    }
}

/// Label-free pretraining stage. `hidden` doubles as the trunk for
/// variants that skip pretraining, so the architectures stay comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub enabled: bool,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub temperature: f64,
    pub contrastive_epochs: usize,
    pub scan_epochs: usize,
    pub lambda_e: f64,
    pub k_neighbors: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub jitter_sigma: f64,
    /// Reuse a saved encoder instead of pretraining from scratch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            enabled: true,
            hidden: vec![64, 32],
            embed_dim: 16,
            temperature: 0.5,
            contrastive_epochs: 15,
            scan_epochs: 8,
            lambda_e: 5.0,
            k_neighbors: 20,
            batch_size: 128,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            jitter_sigma: 0.25,
            checkpoint: None,
        }
    }
}

impl PretrainSection {
    pub fn to_contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            batch_size: self.batch_size,
            epochs: self.contrastive_epochs,
            augment: AugmentSpec::standard(self.jitter_sigma),
            embed_dim: self.embed_dim,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn to_scan(&self) -> ScanConfig {
        ScanConfig {
            lambda_e: self.lambda_e,
            epochs: self.scan_epochs,
            k_neighbors: self.k_neighbors,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub m: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub lambda_r: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub jitter_sigma: f64,
    pub mask_fraction: f64,
    pub strong_threshold: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let m = MixConfig::default();
        TrainSection {
            m: m.m,
            temperature: m.temperature,
            alpha: m.alpha,
            lambda_r: m.lambda_r,
            warmup_epochs: m.warmup_epochs,
            epochs: m.epochs,
            batch_size: m.batch_size,
            lr: m.lr,
            momentum: m.momentum,
            weight_decay: m.weight_decay,
            jitter_sigma: m.jitter_sigma,
            mask_fraction: m.mask_fraction,
            strong_threshold: m.strong_threshold,
        }
    }
}

impl TrainSection {
    pub fn to_mix_config(&self) -> MixConfig {
        MixConfig {
            m: self.m,
            temperature: self.temperature,
            alpha: self.alpha,
            lambda_r: self.lambda_r,
            warmup_epochs: self.warmup_epochs,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            jitter_sigma: self.jitter_sigma,
            mask_fraction: self.mask_fraction,
            strong_threshold: self.strong_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub tau_clean: f64,
    pub tau_hard: f64,
    pub em_tol: f64,
    pub em_max_iters: usize,
}

impl Default for FilterSection {
    fn default() -> Self {
        let f = FilterConfig::default();
        FilterSection {
            tau_clean: f.tau_clean,
            tau_hard: f.tau_hard,
            em_tol: f.em_tol,
            em_max_iters: f.em_max_iters,
        }
    }
}

impl FilterSection {
    pub fn to_filter_config(&self) -> FilterConfig {
        FilterConfig {
            tau_clean: self.tau_clean,
            tau_hard: self.tau_hard,
            em_tol: self.em_tol,
            em_max_iters: self.em_max_iters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Pretrain, warm up, then filtered proportional-MixUp co-training.
    #[default]
    Full,
    /// Same pipeline but every sample is kept with full label weight.
    NoFilter,
    /// Full pipeline from randomly initialized networks.
    NoPretrain,
    /// Pretraining alone; accuracy via majority-vote cluster purity.
    PretrainOnly,
    /// Plain cross-entropy on the given labels for the same epoch budget.
    CeBaseline,
    /// Plain cross-entropy on the true labels — the noise-free ceiling.
    CeOracle,
}

pub const ALL_VARIANTS: [Variant; 6] = [
    Variant::Full,
    Variant::NoFilter,
    Variant::NoPretrain,
    Variant::PretrainOnly,
    Variant::CeBaseline,
    Variant::CeOracle,
];

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::NoFilter => "no-filter",
            Variant::NoPretrain => "no-pretrain",
            Variant::PretrainOnly => "pretrain-only",
            Variant::CeBaseline => "ce-baseline",
            Variant::CeOracle => "ce-oracle",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub tau_clean: Vec<f64>,
    pub tau_hard: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub variants: Vec<Variant>,
    pub noise_rates: Vec<f64>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds must not be empty"));
        }
        if self.run.out_dir.as_os_str().is_empty() {
            return Err(Error::config("run.out_dir must not be empty"));
        }
        match (&self.dataset.path, &self.dataset.test_path) {
            (Some(train), Some(test)) => {
                require_file(train, "dataset.path")?;
                require_file(test, "dataset.test_path")?;
            }
            (Some(_), None) => {
                return Err(Error::config("dataset.path needs dataset.test_path alongside it"))
            }
            (None, Some(_)) => {
                return Err(Error::config("dataset.test_path without dataset.path"))
            }
            (None, None) => {
                if self.dataset.per_class == 0 || self.dataset.test_per_class == 0 {
                    return Err(Error::config(
                        "synthetic dataset needs per_class and test_per_class >= 1",
                    ));
                }
            }
        }
        match self.noise.kind {
            NoiseChoice::None => {}
            kind => {
                if !(0.0..=1.0).contains(&self.noise.rate) {
                    return Err(Error::config(format!(
                        "noise.rate must be in [0,1], got {}",
                        self.noise.rate
                    )));
                }
                if kind == NoiseChoice::Asym
                    && self.noise.pairs.as_ref().map_or(true, |p| p.is_empty())
                {
                    return Err(Error::config("asym noise needs a nonempty noise.pairs map"));
                }
            }
        }
        if let Some(ckpt) = &self.pretrain.checkpoint {
            require_file(ckpt, "pretrain.checkpoint")?;
        }
        if self.pretrain.hidden.is_empty() {
            return Err(Error::config("pretrain.hidden must list at least one layer width"));
        }
        self.train.to_mix_config().validate()?;
        self.filter.to_filter_config().validate()?;
        if let Some(sweep) = &self.sweep {
            if sweep.tau_clean.is_empty() || sweep.tau_hard.is_empty() {
                return Err(Error::config("sweep grids must not be empty"));
            }
        }
        if let Some(ab) = &self.ablation {
            if ab.variants.is_empty() || ab.noise_rates.is_empty() {
                return Err(Error::config("ablation needs variants and noise_rates"));
            }
            if let Some(bad) = ab.noise_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                return Err(Error::config(format!("ablation noise rate {bad} outside [0,1]")));
            }
        }
        Ok(())
    }

    /// Hash of every semantically meaningful field: the whole config with
    /// the output directory blanked, so runs that differ only in where
    /// they write share a hash.
    pub fn hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.run.out_dir = PathBuf::new();
        let json = serde_json::to_string(&semantic)
            .expect("config serialization is infallible");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn require_file(path: &Path, field: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::config(format!("{field}: no such file: {}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    Train,
    Inject,
    Eval,
    Sweep,
    Ablation,
}

/// Mode-specific requirements checked up front, so a grid run never fails
/// halfway through for a reason visible in the config.
pub fn mode_preflight(cfg: &RunConfig, mode: Mode) -> Result<()> {
    match mode {
        Mode::Sweep if cfg.sweep.is_none() => {
            Err(Error::config("sweep mode needs a [sweep] section"))
        }
        Mode::Ablation => {
            let grid = cfg
                .ablation
                .as_ref()
                .ok_or_else(|| Error::config("ablation mode needs an [ablation] section"))?;
            if cfg.noise.kind == NoiseChoice::None && grid.noise_rates.iter().any(|&r| r > 0.0) {
                return Err(Error::config(
                    "ablation with nonzero noise rates needs noise.kind set",
                ));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Parses and validates a config file, applying the CLI overrides first so
/// validation and the hash see the effective values.
pub fn load_config(
    path: &Path,
    seed_override: Option<u64>,
    out_override: Option<&Path>,
) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg: RunConfig = toml::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed_override {
        cfg.run.seeds = vec![seed];
    }
    if let Some(out) = out_override {
        cfg.run.out_dir = out.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> RunConfig {
        toml::from_str(
            r#"
            [dataset]
            classes = 3
            per_class = 10
            dim = 4

            [run]
            seeds = [1]
            out_dir = "runs/x"
            "#,
        )
        .unwrap()
    }

    #[test]
    fn minimal_config_fills_defaults_and_validates() {
        let cfg = minimal();
        assert_eq!(cfg.train.epochs, MixConfig::default().epochs);
        assert_eq!(cfg.filter.tau_clean, 0.5);
        assert_eq!(cfg.run.variant, Variant::Full);
        assert!(cfg.noise.to_spec().is_none());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = toml::from_str::<RunConfig>(
            r#"
            [dataset]
            classes = 3
            typo_field = 1

            [run]
            seeds = [1]
            out_dir = "x"
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("typo_field"), "{err}");
    }

    #[test]
    fn unknown_variant_error_lists_valid_ids() {
        let err = toml::from_str::<RunConfig>(
            r#"
            [dataset]
            [run]
            seeds = [1]
            out_dir = "x"
            variant = "bogus"
            "#,
        )
        .unwrap_err();
        let msg = err.to_string();
        for id in ["full", "no-filter", "no-pretrain", "pretrain-only"] {
            assert!(msg.contains(id), "error should list `{id}`: {msg}");
        }
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = minimal();
        let mut b = a.clone();
        b.run.out_dir = PathBuf::from("elsewhere/y");
        assert_eq!(a.hash(), b.hash());

        let mut c = a.clone();
        c.run.seeds = vec![2];
        assert_ne!(a.hash(), c.hash());

        let mut d = a.clone();
        d.train.lr = 0.05;
        assert_ne!(a.hash(), d.hash());

        let mut e = a.clone();
        e.noise.rate = 0.5;
        e.noise.kind = NoiseChoice::Sym;
        assert_ne!(a.hash(), e.hash());
    }

    #[test]
    fn hash_is_sixteen_hex_chars() {
        let h = minimal().hash();
        assert_eq!(h.len(), 16);
        assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn config_survives_a_toml_round_trip() {
        let mut cfg = minimal();
        cfg.noise.kind = NoiseChoice::Sym;
        cfg.noise.rate = 0.8;
        cfg.sweep = Some(SweepSection {
            tau_clean: vec![0.5],
            tau_hard: vec![0.3, 0.7],
        });
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let mut cfg = minimal();
        cfg.run.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn asym_noise_requires_pairs() {
        let mut cfg = minimal();
        cfg.noise.kind = NoiseChoice::Asym;
        cfg.noise.rate = 0.3;
        assert!(cfg.validate().is_err());
        cfg.noise.pairs = Some(vec![(0, 1), (1, 0)]);
        cfg.validate().unwrap();
    }

    #[test]
    fn dataset_path_requires_test_path() {
        let mut cfg = minimal();
        cfg.dataset.path = Some(PathBuf::from("nope.csv"));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pairs_parse_from_toml_arrays() {
        let cfg: RunConfig = toml::from_str(
            r#"
            [dataset]
            [noise]
            kind = "asym"
            rate = 0.3
            pairs = [[0, 1], [1, 0]]
            [run]
            seeds = [1]
            out_dir = "x"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.noise.pairs, Some(vec![(0, 1), (1, 0)]));
        let spec = cfg.noise.to_spec().unwrap();
        assert_eq!(spec.kind, NoiseKind::Asymmetric);
    }

    #[test]
    fn seed_and_out_overrides_apply_before_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "[dataset]\nclasses = 3\n[run]\nseeds = [1, 2, 3]\nout_dir = \"a\"\n",
        )
        .unwrap();
        let cfg = load_config(&path, Some(9), Some(Path::new("b"))).unwrap();
        assert_eq!(cfg.run.seeds, vec![9]);
        assert_eq!(cfg.run.out_dir, PathBuf::from("b"));
    }
}
