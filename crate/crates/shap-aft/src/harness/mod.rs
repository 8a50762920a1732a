//! Experiment configuration and the deterministic run harness.
//!
//! One TOML document fully specifies a run: dataset geometry, model widths
//! and training budgets, the attack grid, attribution settings, and the
//! defense comparison. Unknown keys are rejected. The configuration hash
//! (which deliberately excludes the output directory) stamps every
//! artifact so stages from different configurations cannot be mixed.

pub mod report;
pub mod schemes;
pub mod stages;

use crate::attacks::{AttackKind, AttackSpec};
use crate::error::{Error, Result};
use crate::signal::{DatasetConfig, Fading};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

fn default_frame_len() -> usize {
    128
}
fn default_frames_per_cell() -> usize {
    100
}
fn default_snr_min() -> i32 {
    4
}
fn default_snr_max() -> i32 {
    18
}
fn default_split_train() -> f64 {
    0.6
}
fn default_split_val() -> f64 {
    0.2
}
fn default_split_test() -> f64 {
    0.2
}
fn default_fading() -> String {
    "block".into()
}
fn default_freq_offset() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default = "default_frame_len")]
    pub frame_len: usize,
    #[serde(default = "default_frames_per_cell")]
    pub frames_per_class_per_snr: usize,
    #[serde(default = "default_snr_min")]
    pub snr_min_db: i32,
    #[serde(default = "default_snr_max")]
    pub snr_max_db: i32,
    #[serde(default = "default_split_train")]
    pub split_train: f64,
    #[serde(default = "default_split_val")]
    pub split_val: f64,
    #[serde(default = "default_split_test")]
    pub split_test: f64,
    /// "none", "block", or "per-sample".
    #[serde(default = "default_fading")]
    pub fading: String,
    #[serde(default = "default_freq_offset")]
    pub max_freq_offset_cycles: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl DatasetSection {
    pub fn to_dataset_config(&self, seed: u64) -> Result<DatasetConfig> {
        let fading = match self.fading.as_str() {
            "none" => Fading::None,
            "block" => Fading::Block,
            "per-sample" => Fading::PerSample,
            other => {
                return Err(Error::Config(format!(
                    "unknown fading model {other:?} (expected none, block, or per-sample)"
                )))
            }
        };
        if self.snr_min_db > self.snr_max_db {
            return Err(Error::Config("snr_min_db exceeds snr_max_db".into()));
        }
        let cfg = DatasetConfig {
            frame_len: self.frame_len,
            frames_per_class_per_snr: self.frames_per_class_per_snr,
            snr_grid_db: (self.snr_min_db..=self.snr_max_db).step_by(2).collect(),
            split_ratios: (self.split_train, self.split_val, self.split_test),
            seed,
            fading,
            max_freq_offset_cycles: self.max_freq_offset_cycles,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

fn default_width() -> f64 {
    0.25
}
fn default_epochs() -> usize {
    40
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}
fn default_patience() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn default_detector_epochs() -> usize {
    30
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    #[serde(default = "default_detector_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn default_kinds() -> Vec<String> {
    vec!["fgsm".into(), "bim".into(), "pgd".into(), "cw".into()]
}
fn default_epsilons() -> Vec<f64> {
    vec![0.025, 0.05, 0.075, 0.1]
}
fn default_bim_alphas() -> Vec<f64> {
    vec![0.001, 0.002, 0.003, 0.004]
}
fn default_pgd_alpha() -> f64 {
    0.0
}
fn default_attack_iters() -> usize {
    10
}
fn default_cw_iters() -> Vec<usize> {
    vec![5, 10, 15, 20]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "default_kinds")]
    pub kinds: Vec<String>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    /// Per-level step sizes for the iterative clipped attack; must align
    /// with `epsilons`.
    #[serde(default = "default_bim_alphas")]
    pub bim_alphas: Vec<f64>,
    /// Absolute projected-attack step; 0 derives it from the budget
    /// (epsilon / 4), which keeps the attack able to fill its ball on
    /// unit-power frames.
    #[serde(default = "default_pgd_alpha")]
    pub pgd_alpha: f64,
    #[serde(default = "default_attack_iters")]
    pub iters: usize,
    /// Iteration budgets that play the role of attack levels for C&W.
    #[serde(default = "default_cw_iters")]
    pub cw_iters: Vec<usize>,
    /// Cap on evaluated frames per cell; 0 means the whole subset.
    #[serde(default)]
    pub eval_count: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl AttackSection {
    pub fn parsed_kinds(&self) -> Result<Vec<AttackKind>> {
        self.kinds
            .iter()
            .map(|s| {
                AttackKind::parse(s)
                    .ok_or_else(|| Error::Config(format!("unknown attack kind {s:?}")))
            })
            .collect()
    }

    /// Attack levels for a kind: perturbation budgets, or iteration counts
    /// for the optimization attack.
    pub fn levels(&self, kind: AttackKind) -> Vec<f64> {
        match kind {
            AttackKind::Cw => self.cw_iters.iter().map(|&i| i as f64).collect(),
            _ => self.epsilons.clone(),
        }
    }

    pub fn spec_for(&self, kind: AttackKind, level_idx: usize) -> Result<AttackSpec> {
        let spec = match kind {
            AttackKind::Fgsm => AttackSpec::fgsm(self.level_value(kind, level_idx)?),
            AttackKind::Bim => {
                let eps = self.level_value(kind, level_idx)?;
                let alpha = *self.bim_alphas.get(level_idx).ok_or_else(|| {
                    Error::Config("bim_alphas must align with epsilons".into())
                })?;
                AttackSpec::bim(eps, alpha, self.iters)
            }
            AttackKind::Pgd => {
                let eps = self.level_value(kind, level_idx)?;
                AttackSpec::pgd(eps, self.pgd_step(eps), self.iters)
            }
            AttackKind::Cw => {
                let iters = *self.cw_iters.get(level_idx).ok_or_else(|| {
                    Error::Config(format!("C&W level index {level_idx} out of range"))
                })?;
                AttackSpec::cw(iters)
            }
        };
        Ok(spec)
    }

    /// Step size for the projected attack at a given budget.
    pub fn pgd_step(&self, epsilon: f64) -> f64 {
        if self.pgd_alpha > 0.0 {
            self.pgd_alpha
        } else {
            epsilon / 4.0
        }
    }

    fn level_value(&self, kind: AttackKind, level_idx: usize) -> Result<f64> {
        self.levels(kind)
            .get(level_idx)
            .copied()
            .ok_or_else(|| Error::Config(format!("attack level index {level_idx} out of range")))
    }

    /// The spec used to generate adaptation samples: the given kind at the
    /// adaptation budget (or iteration count for C&W).
    pub fn adaptation_spec(
        &self,
        kind: AttackKind,
        ft_epsilon: f64,
        ft_cw_iters: usize,
    ) -> AttackSpec {
        match kind {
            AttackKind::Fgsm => AttackSpec::fgsm(ft_epsilon),
            // The smallest-budget step size pairs with the adaptation budget.
            AttackKind::Bim => AttackSpec::bim(
                ft_epsilon,
                self.bim_alphas.first().copied().unwrap_or(0.001),
                self.iters,
            ),
            AttackKind::Pgd => AttackSpec::pgd(ft_epsilon, self.pgd_step(ft_epsilon), self.iters),
            AttackKind::Cw => AttackSpec::cw(ft_cw_iters),
        }
    }
}

fn default_eg_samples() -> usize {
    200
}
fn default_ig_steps() -> usize {
    64
}
fn default_m() -> usize {
    12
}
fn default_labeled_count() -> usize {
    330
}
fn default_background_count() -> usize {
    330
}
fn default_explain_kind() -> String {
    "pgd".into()
}
fn default_heatmap_level() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionSection {
    #[serde(default = "default_eg_samples")]
    pub eg_samples: usize,
    #[serde(default = "default_ig_steps")]
    pub ig_steps: usize,
    /// Destructive positions removed from attacked frames.
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_labeled_count")]
    pub labeled_count: usize,
    #[serde(default = "default_background_count")]
    pub background_count: usize,
    /// Attack kind whose levels the explain stage sweeps.
    #[serde(default = "default_explain_kind")]
    pub explain_kind: String,
    /// Budget at which the class-pair heatmap and consistency confusions
    /// are computed.
    #[serde(default = "default_heatmap_level")]
    pub heatmap_level: f64,
}

impl Default for AttributionSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn default_defense_kinds() -> Vec<String> {
    vec!["pgd".into()]
}
fn default_ft_train_count() -> usize {
    2000
}
fn default_ft_val_count() -> usize {
    400
}
fn default_ft_epochs() -> usize {
    60
}
fn default_ft_batch() -> usize {
    20
}
fn default_ft_dense_units() -> usize {
    32
}
fn default_ft_epsilon() -> f64 {
    0.025
}
fn default_ft_cw_iters() -> usize {
    5
}
fn default_rs_samples() -> usize {
    20
}
fn default_snr_floor() -> i32 {
    7
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    /// Attack kinds the defense comparison sweeps.
    #[serde(default = "default_defense_kinds")]
    pub kinds: Vec<String>,
    #[serde(default = "default_ft_train_count")]
    pub ft_train_count: usize,
    #[serde(default = "default_ft_val_count")]
    pub ft_val_count: usize,
    #[serde(default = "default_ft_epochs")]
    pub ft_epochs: usize,
    #[serde(default = "default_ft_batch")]
    pub ft_batch: usize,
    #[serde(default = "default_ft_dense_units")]
    pub ft_dense_units: usize,
    #[serde(default = "default_lr")]
    pub ft_lr: f64,
    #[serde(default = "default_true")]
    pub early_stopping: bool,
    /// Budget for generating adaptation samples.
    #[serde(default = "default_ft_epsilon")]
    pub ft_epsilon: f64,
    #[serde(default = "default_ft_cw_iters")]
    pub ft_cw_iters: usize,
    #[serde(default = "default_rs_samples")]
    pub rs_samples: usize,
    #[serde(default = "default_snr_floor")]
    pub snr_floor_db: i32,
    #[serde(default)]
    pub refine_clean_routed: bool,
}

impl Default for DefenseSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub attribution: AttributionSection,
    #[serde(default)]
    pub defense: DefenseSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// All-defaults configuration, for library callers that do not have a
    /// config file.
    pub fn builtin(seed: u64, output_dir: &str) -> ExperimentConfig {
        Self::parse(&format!("seed = {seed}\noutput_dir = \"{output_dir}\"\n"))
            .expect("builtin config")
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.to_dataset_config(self.seed)?;
        self.attack.parsed_kinds()?;
        for k in &self.defense.kinds {
            AttackKind::parse(k).ok_or_else(|| Error::Config(format!("unknown defense kind {k:?}")))?;
        }
        AttackKind::parse(&self.attribution.explain_kind).ok_or_else(|| {
            Error::Config(format!(
                "unknown explain kind {:?}",
                self.attribution.explain_kind
            ))
        })?;
        if self.attack.bim_alphas.len() != self.attack.epsilons.len() {
            return Err(Error::Config(
                "bim_alphas must have one entry per epsilon".into(),
            ));
        }
        if self.model.width <= 0.0 {
            return Err(Error::Config("model width must be positive".into()));
        }
        Ok(())
    }

    /// Hash of the canonical serialization with the output directory
    /// blanked, so the same experiment written to two places (or reruns for
    /// determinism checks) shares one identity.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = String::new();
        let text = toml::to_string(&canonical).expect("serialize config");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
