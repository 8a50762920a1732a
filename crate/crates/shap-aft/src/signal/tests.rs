use super::channel::{apply_channel, ChannelParams, Fading};
use super::dataset::{generate_dataset, normalize_power, DatasetConfig};
use super::io::{read_dataset, write_dataset};
use super::modulate::{alphabet, modulate, rrc_taps, RRC_ROLLOFF, RRC_SPAN};
use super::{ModulationScheme, Split};
use crate::seeds::rng_from;
use num_complex::Complex64;

#[test]
fn bpsk_alphabet_is_plus_minus_one() {
    let pts = alphabet(ModulationScheme::Bpsk).unwrap();
    assert_eq!(pts, vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)]);
}

#[test]
fn qam16_has_sixteen_distinct_unit_power_points() {
    let pts = alphabet(ModulationScheme::Qam16).unwrap();
    assert_eq!(pts.len(), 16);
    for i in 0..16 {
        for j in 0..i {
            assert!((pts[i] - pts[j]).norm() > 1e-9);
        }
    }
    let mean_power: f64 = pts.iter().map(|p| p.norm_sqr()).sum::<f64>() / 16.0;
    assert!((mean_power - 1.0).abs() < 1e-12);
}

#[test]
fn modulated_power_is_unit_within_one_percent() {
    // High-order QAM has enough symbol-power variance that a single 10k
    // draw sits near the bound; average several draws per scheme.
    for scheme in ModulationScheme::ALL {
        let mut rng = rng_from(17);
        let mut power = 0.0;
        let draws = 20;
        for _ in 0..draws {
            let out = modulate(scheme, &mut rng, 10_000);
            power +=
                out.samples.iter().map(|c| c.norm_sqr()).sum::<f64>() / out.samples.len() as f64;
        }
        power /= draws as f64;
        assert!(
            (power - 1.0).abs() < 0.01,
            "{}: power {power}",
            scheme.name()
        );
    }
}

#[test]
fn channel_identity_without_impairments() {
    let mut rng = rng_from(3);
    let s: Vec<Complex64> = (0..32)
        .map(|i| Complex64::new((i as f64).cos(), (i as f64).sin()))
        .collect();
    let x = apply_channel(&s, &ChannelParams::clean(), &mut rng);
    assert_eq!(x, s);
}

#[test]
fn half_cycle_phase_offset_flips_sign() {
    let mut rng = rng_from(3);
    let s: Vec<Complex64> = (0..16).map(|i| Complex64::new(i as f64, -1.0)).collect();
    let params = ChannelParams {
        phase_offset: 0.5,
        ..ChannelParams::clean()
    };
    let x = apply_channel(&s, &params, &mut rng);
    for (a, b) in x.iter().zip(&s) {
        assert!((a + b).norm() < 1e-9);
    }
}

#[test]
fn realized_snr_matches_target_within_half_db() {
    let mut rng = rng_from(5);
    let params = ChannelParams {
        snr_db: Some(10.0),
        ..ChannelParams::clean()
    };
    let mut sig_power = 0.0;
    let mut noise_power = 0.0;
    for _ in 0..10_000 {
        let s = modulate(ModulationScheme::Qpsk, &mut rng, 128).samples;
        let x = apply_channel(&s, &params, &mut rng);
        // With unit gain and no rotation the noise is exactly x - s.
        sig_power += s.iter().map(|c| c.norm_sqr()).sum::<f64>();
        noise_power += x
            .iter()
            .zip(&s)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>();
    }
    let snr_db = 10.0 * (sig_power / noise_power).log10();
    assert!((snr_db - 10.0).abs() < 0.5, "measured {snr_db}");
}

#[test]
fn desk_scale_counts_and_splits() {
    let cfg = DatasetConfig::desk_scale(1);
    assert_eq!(cfg.total_frames(), 8800);
    // 3:1:1 of 100 frames per cell.
    assert_eq!(cfg.cell_split_counts(), (60, 20, 20));
    let bundle = generate_dataset(&cfg).unwrap();
    assert_eq!(bundle.frames.len(), 8800);
    assert_eq!(bundle.split_frames(Split::Train).len(), 5280);
    assert_eq!(bundle.split_frames(Split::Val).len(), 1760);
    assert_eq!(bundle.split_frames(Split::Test).len(), 1760);
}

#[test]
fn paper_scale_geometry() {
    let cfg = DatasetConfig::paper_scale(1);
    assert_eq!(cfg.total_frames(), 220_000);
    assert_eq!(cfg.snr_grid_db.len(), 20);
    assert_eq!(ModulationScheme::ALL.len(), 11);
}

#[test]
fn uneven_cell_count_floors_with_remainder_to_training() {
    let cfg = DatasetConfig {
        frames_per_class_per_snr: 7,
        ..DatasetConfig::desk_scale(1)
    };
    // val = floor(1.4) = 1, test = floor(1.4) = 1, remainder to train.
    assert_eq!(cfg.cell_split_counts(), (5, 1, 1));
}

#[test]
fn generation_is_deterministic_and_files_are_byte_identical() {
    let cfg = DatasetConfig {
        frames_per_class_per_snr: 4,
        snr_grid_db: vec![10, 12],
        ..DatasetConfig::desk_scale(9)
    };
    let a = generate_dataset(&cfg).unwrap();
    let b = generate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let pa = dir.path().join("a.iqf");
    let pb = dir.path().join("b.iqf");
    write_dataset(&pa, &a).unwrap();
    write_dataset(&pb, &b).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a.index.csv")).unwrap(),
        std::fs::read(dir.path().join("b.index.csv")).unwrap()
    );
}

#[test]
fn stored_frames_have_unit_power_within_tolerance() {
    let cfg = DatasetConfig {
        frames_per_class_per_snr: 3,
        snr_grid_db: vec![4, 18],
        ..DatasetConfig::desk_scale(2)
    };
    let bundle = generate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.iqf");
    write_dataset(&path, &bundle).unwrap();
    let loaded = read_dataset(&path).unwrap();
    assert_eq!(loaded.frames.len(), bundle.frames.len());
    for f in &loaded.frames {
        assert!(
            (f.average_power() - 1.0).abs() < 1e-6,
            "power {}",
            f.average_power()
        );
    }
}

#[test]
fn rejects_snr_outside_legal_grid() {
    let cfg = DatasetConfig {
        snr_grid_db: vec![7],
        ..DatasetConfig::desk_scale(1)
    };
    assert!(generate_dataset(&cfg).is_err());
    let cfg = DatasetConfig {
        snr_grid_db: vec![20],
        ..DatasetConfig::desk_scale(1)
    };
    assert!(generate_dataset(&cfg).is_err());
}

#[test]
fn rejects_bad_split_ratios() {
    let cfg = DatasetConfig {
        split_ratios: (0.5, 0.2, 0.2),
        ..DatasetConfig::desk_scale(1)
    };
    assert!(generate_dataset(&cfg).is_err());
}

#[test]
fn normalize_power_is_exact() {
    let mut data = vec![3.0, 4.0, 1.0, -2.0];
    normalize_power(&mut data);
    let power = data.iter().map(|v| v * v).sum::<f64>() / 2.0;
    assert!((power - 1.0).abs() < 1e-12);
}

/// Matched-filter demodulation oracle: with no impairments and high SNR,
/// pulse-shaped BPSK recovers nearly all symbols.
#[test]
fn bpsk_demodulates_at_high_snr() {
    let sps = super::SAMPLES_PER_SYMBOL;
    let taps = rrc_taps(sps, RRC_SPAN, RRC_ROLLOFF);
    let center = RRC_SPAN * sps / 2;
    let mut rng = rng_from(77);
    let params = ChannelParams {
        snr_db: Some(18.0),
        ..ChannelParams::clean()
    };
    let mut total = 0usize;
    let mut correct = 0usize;
    for _ in 0..50 {
        let modulated = modulate(ModulationScheme::Bpsk, &mut rng, 128);
        let received = apply_channel(&modulated.samples, &params, &mut rng);
        // Matched filter; symbol k peaks at k*sps + center in the filtered
        // signal.
        let mut filtered = vec![Complex64::new(0.0, 0.0); received.len() + taps.len() - 1];
        for (n, &x) in received.iter().enumerate() {
            for (m, &g) in taps.iter().enumerate() {
                filtered[n + m] += x * g;
            }
        }
        for (k, &sym) in modulated.symbols.iter().enumerate() {
            let at = k * sps + center;
            if at < filtered.len() {
                let decided = if filtered[at].re >= 0.0 { 1.0 } else { -1.0 };
                total += 1;
                if decided == sym.re {
                    correct += 1;
                }
            }
        }
    }
    let rate = correct as f64 / total as f64;
    assert!(rate >= 0.99, "symbol recovery rate {rate}");
}
