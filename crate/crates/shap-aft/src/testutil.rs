//! Shared fixtures for unit tests: a miniature corpus and a small trained
//! classifier, built once per test binary.

#![cfg(test)]

use crate::nets::train::{train_amc, TrainConfig};
use crate::nets::AmcNetwork;
use crate::signal::{generate_dataset, DatasetBundle, DatasetConfig, Fading, IQFrame, Split};
use std::sync::OnceLock;

pub const TINY_LEN: usize = 32;

pub fn tiny_dataset() -> &'static DatasetBundle {
    static DS: OnceLock<DatasetBundle> = OnceLock::new();
    DS.get_or_init(|| {
        let cfg = DatasetConfig {
            frame_len: TINY_LEN,
            frames_per_class_per_snr: 30,
            snr_grid_db: vec![14],
            split_ratios: (0.6, 0.2, 0.2),
            seed: 1234,
            fading: Fading::Block,
            max_freq_offset_cycles: 1e-3,
        };
        generate_dataset(&cfg).unwrap()
    })
}

/// A small classifier trained enough to have meaningful gradients and
/// above-chance accuracy; not meant to hit any accuracy bar.
pub fn tiny_net() -> &'static AmcNetwork {
    static NET: OnceLock<AmcNetwork> = OnceLock::new();
    NET.get_or_init(|| {
        let bundle = tiny_dataset();
        let mut net =
            AmcNetwork::with_dims(TINY_LEN, bundle.num_classes, 12, 12, 16, 0.1, 55).unwrap();
        let train = bundle.split_frames(Split::Train);
        let val = bundle.split_frames(Split::Val);
        let tc = TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 3e-3,
            patience: 0,
            seed: 55,
        };
        train_amc(&mut net, &train, &val, &tc).unwrap();
        net
    })
}

pub fn tiny_test_frames() -> Vec<&'static IQFrame> {
    tiny_dataset().split_frames(Split::Test)
}
