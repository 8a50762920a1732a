//! Synthetic IQ frame generation.
//!
//! Frames are length-L complex baseband sequences stored as L x 2 real
//! matrices (column 0 in-phase, column 1 quadrature). Eleven modulation
//! schemes (eight digital, three analog) pass through a single-tap fading
//! channel with frequency and phase offsets plus AWGN scaled to a target
//! SNR. Every stored frame is normalized to unit average power so that
//! perturbation budgets are meaningful across the corpus.

pub mod channel;
pub mod dataset;
pub mod io;
pub mod modulate;

pub use channel::{apply_channel, ChannelParams, Fading};
pub use dataset::{generate_dataset, DatasetConfig};
pub use modulate::{modulate, ModulatedSignal, SAMPLES_PER_SYMBOL};

use crate::tensor::Tensor;

/// The candidate modulation set, in canonical label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModulationScheme {
    Psk8,
    Bpsk,
    Cpfsk,
    Gfsk,
    Pam4,
    Qam16,
    Qam64,
    Qpsk,
    AmDsb,
    AmSsb,
    Wbfm,
}

impl ModulationScheme {
    pub const ALL: [ModulationScheme; 11] = [
        ModulationScheme::Psk8,
        ModulationScheme::Bpsk,
        ModulationScheme::Cpfsk,
        ModulationScheme::Gfsk,
        ModulationScheme::Pam4,
        ModulationScheme::Qam16,
        ModulationScheme::Qam64,
        ModulationScheme::Qpsk,
        ModulationScheme::AmDsb,
        ModulationScheme::AmSsb,
        ModulationScheme::Wbfm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModulationScheme::Psk8 => "8PSK",
            ModulationScheme::Bpsk => "BPSK",
            ModulationScheme::Cpfsk => "CPFSK",
            ModulationScheme::Gfsk => "GFSK",
            ModulationScheme::Pam4 => "PAM4",
            ModulationScheme::Qam16 => "16QAM",
            ModulationScheme::Qam64 => "64QAM",
            ModulationScheme::Qpsk => "QPSK",
            ModulationScheme::AmDsb => "AM-DSB",
            ModulationScheme::AmSsb => "AM-SSB",
            ModulationScheme::Wbfm => "WBFM",
        }
    }

    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|s| s == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_digital(&self) -> bool {
        !matches!(
            self,
            ModulationScheme::AmDsb | ModulationScheme::AmSsb | ModulationScheme::Wbfm
        )
    }
}

/// Which split of the corpus a frame belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One labeled IQ frame: L x 2 real matrix plus metadata.
#[derive(Debug, Clone)]
pub struct IQFrame {
    /// Row-major L x 2 data; row l holds (re, im) of sample l.
    pub data: Vec<f64>,
    pub label: usize,
    pub snr_db: i32,
    pub attacked: bool,
    pub split: Split,
}

impl IQFrame {
    pub fn len(&self) -> usize {
        self.data.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), 2, self.data.clone())
    }

    /// Mean per-sample power: average of re^2 + im^2 over the frame.
    pub fn average_power(&self) -> f64 {
        let l = self.len();
        self.data.iter().map(|v| v * v).sum::<f64>() / l as f64
    }
}

/// A generated corpus with its geometry.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub frame_len: usize,
    pub num_classes: usize,
    pub snr_grid_db: Vec<i32>,
    pub frames: Vec<IQFrame>,
}

impl DatasetBundle {
    pub fn split_frames(&self, split: Split) -> Vec<&IQFrame> {
        self.frames.iter().filter(|f| f.split == split).collect()
    }

    /// Frames with SNR strictly above the floor (the high-SNR subset used
    /// for attribution experiments).
    pub fn high_snr(&self, split: Split, floor_db: i32) -> Vec<&IQFrame> {
        self.frames
            .iter()
            .filter(|f| f.split == split && f.snr_db > floor_db)
            .collect()
    }
}

#[cfg(test)]
mod tests;
