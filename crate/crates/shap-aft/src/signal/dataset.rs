//! Corpus generation: stratified by (class, SNR), deterministically seeded,
//! split train/val/test, every frame normalized to unit average power.

use super::channel::{apply_channel, ChannelParams, Fading};
use super::modulate::modulate;
use super::{DatasetBundle, IQFrame, ModulationScheme, Split};
use crate::error::{Error, Result};
use crate::seeds::{child_seed, rng_from};
use rand::Rng;
use rayon::prelude::*;
use std::f64::consts::PI;

/// The legal SNR grid for generation: even decibel steps from -20 to 18.
pub fn legal_snr(db: i32) -> bool {
    (-20..=18).contains(&db) && db % 2 == 0
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub frame_len: usize,
    pub frames_per_class_per_snr: usize,
    pub snr_grid_db: Vec<i32>,
    /// (train, val, test); must sum to 1.
    pub split_ratios: (f64, f64, f64),
    pub seed: u64,
    pub fading: Fading,
    /// Frequency offsets are drawn uniformly from +/- this many
    /// cycles per sample.
    pub max_freq_offset_cycles: f64,
}

impl DatasetConfig {
    /// Small corpus that trains in minutes on a CPU: 11 classes x 8 SNRs
    /// (4..18 dB) x 100 frames = 8,800 frames.
    pub fn desk_scale(seed: u64) -> Self {
        DatasetConfig {
            frame_len: 128,
            frames_per_class_per_snr: 100,
            snr_grid_db: (4..=18).step_by(2).collect(),
            split_ratios: (0.6, 0.2, 0.2),
            seed,
            fading: Fading::Block,
            max_freq_offset_cycles: 1e-3,
        }
    }

    /// Full-size geometry: 11 classes x 20 SNRs (-20..18 dB) x 1,000 frames
    /// = 220,000 frames.
    pub fn paper_scale(seed: u64) -> Self {
        DatasetConfig {
            frame_len: 128,
            frames_per_class_per_snr: 1000,
            snr_grid_db: (-20..=18).step_by(2).collect(),
            split_ratios: (0.6, 0.2, 0.2),
            seed,
            fading: Fading::Block,
            max_freq_offset_cycles: 1e-3,
        }
    }

    pub fn total_frames(&self) -> usize {
        ModulationScheme::ALL.len() * self.snr_grid_db.len() * self.frames_per_class_per_snr
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split_ratios;
        if (a + b + c - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "split ratios ({a}, {b}, {c}) must be nonnegative and sum to 1"
            )));
        }
        if self.frame_len == 0 || self.frames_per_class_per_snr == 0 {
            return Err(Error::InvalidArgument(
                "frame length and per-cell count must be positive".into(),
            ));
        }
        if self.snr_grid_db.is_empty() {
            return Err(Error::InvalidArgument("empty SNR grid".into()));
        }
        if let Some(&bad) = self.snr_grid_db.iter().find(|&&s| !legal_snr(s)) {
            return Err(Error::InvalidArgument(format!(
                "SNR {bad} dB outside the legal grid (-20..18 dB, 2 dB steps)"
            )));
        }
        Ok(())
    }

    /// Split sizes for one (class, SNR) cell: val and test round down, the
    /// remainder goes to training.
    pub fn cell_split_counts(&self) -> (usize, usize, usize) {
        let n = self.frames_per_class_per_snr;
        let n_val = (self.split_ratios.1 * n as f64).floor() as usize;
        let n_test = (self.split_ratios.2 * n as f64).floor() as usize;
        (n - n_val - n_test, n_val, n_test)
    }
}

/// Normalize a frame (in place) to unit average power.
pub fn normalize_power(data: &mut [f64]) {
    let l = data.len() / 2;
    let power = data.iter().map(|v| v * v).sum::<f64>() / l as f64;
    if power > 0.0 {
        let scale = 1.0 / power.sqrt();
        data.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Generate one frame for the given cell.
fn generate_frame(cfg: &DatasetConfig, class: usize, snr_db: i32, index: usize) -> IQFrame {
    let seed = child_seed(
        cfg.seed,
        &[class as u64, (snr_db + 100) as u64, index as u64],
    );
    let mut rng = rng_from(seed);
    let scheme = ModulationScheme::from_index(class).expect("class index");
    let modulated = modulate(scheme, &mut rng, cfg.frame_len);
    let params = ChannelParams {
        snr_db: Some(snr_db as f64),
        freq_offset_cycles: rng.gen_range(-cfg.max_freq_offset_cycles..cfg.max_freq_offset_cycles),
        phase_offset: rng.gen_range(0.0..2.0 * PI),
        fading: cfg.fading,
    };
    let received = apply_channel(&modulated.samples, &params, &mut rng);

    let mut data = Vec::with_capacity(cfg.frame_len * 2);
    for c in &received {
        data.push(c.re);
        data.push(c.im);
    }
    normalize_power(&mut data);

    let (n_train, n_val, _) = cfg.cell_split_counts();
    let split = if index < n_train {
        Split::Train
    } else if index < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    };
    IQFrame {
        data,
        label: class,
        snr_db,
        attacked: false,
        split,
    }
}

/// Generate the full corpus. Deterministic for a given config.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for class in 0..ModulationScheme::ALL.len() {
        for &snr in &cfg.snr_grid_db {
            for index in 0..cfg.frames_per_class_per_snr {
                cells.push((class, snr, index));
            }
        }
    }
    let frames: Vec<IQFrame> = cells
        .par_iter()
        .map(|&(class, snr, index)| generate_frame(cfg, class, snr, index))
        .collect();
    Ok(DatasetBundle {
        frame_len: cfg.frame_len,
        num_classes: ModulationScheme::ALL.len(),
        snr_grid_db: cfg.snr_grid_db.clone(),
        frames,
    })
}
