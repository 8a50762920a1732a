//! Baseband modulators.
//!
//! Digital schemes draw uniform random symbols from unit-average-power
//! alphabets and are pulse-shaped with a root-raised-cosine filter at
//! 8 samples per symbol. Frequency-modulated schemes integrate phase
//! directly. Analog schemes modulate a synthetic three-tone message, which
//! keeps the generator self-contained.

use super::ModulationScheme;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

pub const SAMPLES_PER_SYMBOL: usize = 8;
/// Root-raised-cosine span in symbols (filter length span*sps + 1).
pub const RRC_SPAN: usize = 8;
pub const RRC_ROLLOFF: f64 = 0.35;
/// Gaussian frequency-pulse bandwidth-time product for GFSK.
const GFSK_BT: f64 = 0.35;
/// Modulation index for the FSK family.
const FSK_MOD_INDEX: f64 = 0.5;
/// AM modulation depth.
const AM_DEPTH: f64 = 0.8;
/// Message tones: count, frequency band (cycles/sample), amplitude range.
const TONES: usize = 3;
const TONE_FREQ_LO: f64 = 0.005;
const TONE_FREQ_HI: f64 = 0.03;
/// FM deviation as a multiple of the message bandwidth.
const FM_DEVIATION_RATIO: f64 = 5.0;

/// A modulated baseband sequence with the symbols that produced it.
/// `symbols[k]` is centered at `samples[k * SAMPLES_PER_SYMBOL]` for digital
/// schemes; analog schemes leave it empty.
pub struct ModulatedSignal {
    pub samples: Vec<Complex64>,
    pub symbols: Vec<Complex64>,
}

/// Unit-average-power symbol alphabet for a digital linear scheme.
pub fn alphabet(scheme: ModulationScheme) -> Option<Vec<Complex64>> {
    let pts: Vec<Complex64> = match scheme {
        ModulationScheme::Bpsk => vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
        ModulationScheme::Qpsk => (0..4)
            .map(|k| Complex64::from_polar(1.0, PI / 4.0 + k as f64 * PI / 2.0))
            .collect(),
        ModulationScheme::Psk8 => (0..8)
            .map(|k| Complex64::from_polar(1.0, k as f64 * PI / 4.0))
            .collect(),
        ModulationScheme::Pam4 => {
            let scale = (5.0f64).sqrt();
            [-3.0, -1.0, 1.0, 3.0]
                .iter()
                .map(|&a| Complex64::new(a / scale, 0.0))
                .collect()
        }
        ModulationScheme::Qam16 => square_qam(4),
        ModulationScheme::Qam64 => square_qam(8),
        _ => return None,
    };
    Some(pts)
}

fn square_qam(side: usize) -> Vec<Complex64> {
    let levels: Vec<f64> = (0..side).map(|i| 2.0 * i as f64 - (side - 1) as f64).collect();
    let mean_sq = 2.0 * levels.iter().map(|v| v * v).sum::<f64>() / side as f64;
    let scale = mean_sq.sqrt();
    let mut pts = Vec::with_capacity(side * side);
    for &re in &levels {
        for &im in &levels {
            pts.push(Complex64::new(re / scale, im / scale));
        }
    }
    pts
}

/// Root-raised-cosine taps scaled so that pulse-shaping an impulse train at
/// `sps` samples per symbol preserves average power (sum of squares = sps).
pub fn rrc_taps(sps: usize, span: usize, beta: f64) -> Vec<f64> {
    let n = span * sps + 1;
    let center = (span * sps) as f64 / 2.0;
    let mut taps = Vec::with_capacity(n);
    for m in 0..n {
        let t = (m as f64 - center) / sps as f64;
        taps.push(rrc_point(t, beta));
    }
    let energy: f64 = taps.iter().map(|v| v * v).sum();
    let scale = (sps as f64 / energy).sqrt();
    taps.iter_mut().for_each(|v| *v *= scale);
    taps
}

fn rrc_point(t: f64, beta: f64) -> f64 {
    let eps = 1e-9;
    if t.abs() < eps {
        return 1.0 - beta + 4.0 * beta / PI;
    }
    let singular = 1.0 / (4.0 * beta);
    if (t.abs() - singular).abs() < eps {
        let a = (1.0 + 2.0 / PI) * (PI / (4.0 * beta)).sin();
        let b = (1.0 - 2.0 / PI) * (PI / (4.0 * beta)).cos();
        return beta / (2.0f64).sqrt() * (a + b);
    }
    let num = (PI * t * (1.0 - beta)).sin() + 4.0 * beta * t * (PI * t * (1.0 + beta)).cos();
    let den = PI * t * (1.0 - 4.0 * beta * beta * t * t);
    num / den
}

/// Generate `len` baseband samples of the given scheme.
pub fn modulate(scheme: ModulationScheme, rng: &mut ChaCha8Rng, len: usize) -> ModulatedSignal {
    assert!(len >= 1);
    match scheme {
        ModulationScheme::Bpsk
        | ModulationScheme::Qpsk
        | ModulationScheme::Psk8
        | ModulationScheme::Pam4
        | ModulationScheme::Qam16
        | ModulationScheme::Qam64 => linear_digital(scheme, rng, len),
        ModulationScheme::Cpfsk => cpfsk(rng, len),
        ModulationScheme::Gfsk => gfsk(rng, len),
        ModulationScheme::AmDsb | ModulationScheme::AmSsb | ModulationScheme::Wbfm => {
            analog(scheme, rng, len)
        }
    }
}

fn linear_digital(scheme: ModulationScheme, rng: &mut ChaCha8Rng, len: usize) -> ModulatedSignal {
    let sps = SAMPLES_PER_SYMBOL;
    let points = alphabet(scheme).expect("linear scheme has an alphabet");
    let taps = rrc_taps(sps, RRC_SPAN, RRC_ROLLOFF);
    let center = RRC_SPAN * sps / 2;

    // Extra symbols on both sides keep the taken segment in filter
    // steady state.
    let n_sym = len.div_ceil(sps) + 2 * RRC_SPAN;
    let syms: Vec<Complex64> = (0..n_sym)
        .map(|_| points[rng.gen_range(0..points.len())])
        .collect();

    // Full convolution of the upsampled impulse train with the taps;
    // output index n = k*sps + m for symbol k, tap m.
    let out_len = n_sym * sps + taps.len() - 1;
    let mut shaped = vec![Complex64::new(0.0, 0.0); out_len];
    for (k, &s) in syms.iter().enumerate() {
        let base = k * sps;
        for (m, &g) in taps.iter().enumerate() {
            shaped[base + m] += s * g;
        }
    }

    // Take the segment starting at the peak of symbol `RRC_SPAN`, so sample
    // i carries symbol RRC_SPAN + i/sps at full filter support.
    let start = RRC_SPAN * sps + center;
    let samples = shaped[start..start + len].to_vec();
    let symbols = syms[RRC_SPAN..RRC_SPAN + len.div_ceil(sps)].to_vec();
    ModulatedSignal { samples, symbols }
}

fn cpfsk(rng: &mut ChaCha8Rng, len: usize) -> ModulatedSignal {
    let sps = SAMPLES_PER_SYMBOL;
    let n_sym = len.div_ceil(sps);
    let bits: Vec<f64> = (0..n_sym)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let mut samples = Vec::with_capacity(len);
    let mut phase = 0.0;
    for n in 0..len {
        phase += PI * FSK_MOD_INDEX * bits[n / sps] / sps as f64;
        samples.push(Complex64::from_polar(1.0, phase));
    }
    let symbols = bits.iter().map(|&b| Complex64::new(b, 0.0)).collect();
    ModulatedSignal { samples, symbols }
}

fn gfsk(rng: &mut ChaCha8Rng, len: usize) -> ModulatedSignal {
    let sps = SAMPLES_PER_SYMBOL;
    let span = 4;
    // Gaussian window with std derived from the bandwidth-time product.
    let sigma = sps as f64 * (2.0f64.ln()).sqrt() / (2.0 * PI * GFSK_BT);
    let half = span * sps / 2;
    let mut window: Vec<f64> = (0..=2 * half)
        .map(|m| {
            let t = m as f64 - half as f64;
            (-t * t / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let wsum: f64 = window.iter().sum();
    window.iter_mut().for_each(|v| *v /= wsum);

    let n_sym = len.div_ceil(sps) + 2 * span;
    let bits: Vec<f64> = (0..n_sym)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let nrz_len = n_sym * sps;
    let smooth_len = nrz_len + window.len() - 1;
    let mut freq = vec![0.0; smooth_len];
    for n in 0..nrz_len {
        let b = bits[n / sps];
        for (m, &w) in window.iter().enumerate() {
            freq[n + m] += b * w;
        }
    }

    let start = span * sps + half;
    let mut samples = Vec::with_capacity(len);
    let mut phase = 0.0;
    for n in 0..len {
        phase += PI * FSK_MOD_INDEX * freq[start + n] / sps as f64;
        samples.push(Complex64::from_polar(1.0, phase));
    }
    let symbols = bits[span..span + len.div_ceil(sps)]
        .iter()
        .map(|&b| Complex64::new(b, 0.0))
        .collect();
    ModulatedSignal { samples, symbols }
}

struct Tone {
    freq: f64,
    amp: f64,
    phase: f64,
}

fn draw_tones(rng: &mut ChaCha8Rng) -> Vec<Tone> {
    (0..TONES)
        .map(|_| Tone {
            freq: rng.gen_range(TONE_FREQ_LO..TONE_FREQ_HI),
            amp: rng.gen_range(0.5..1.0),
            phase: rng.gen_range(0.0..2.0 * PI),
        })
        .collect()
}

fn analog(scheme: ModulationScheme, rng: &mut ChaCha8Rng, len: usize) -> ModulatedSignal {
    let tones = draw_tones(rng);
    let message: Vec<f64> = (0..len)
        .map(|n| {
            tones
                .iter()
                .map(|t| t.amp * (2.0 * PI * t.freq * n as f64 + t.phase).cos())
                .sum()
        })
        .collect();
    let peak = message.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);

    let mut samples: Vec<Complex64> = match scheme {
        ModulationScheme::AmDsb => message
            .iter()
            .map(|&m| Complex64::new(1.0 + AM_DEPTH * m / peak, 0.0))
            .collect(),
        ModulationScheme::AmSsb => {
            // Analytic signal of the tone sum: exact single-sideband.
            (0..len)
                .map(|n| {
                    tones
                        .iter()
                        .map(|t| {
                            Complex64::from_polar(
                                t.amp / peak,
                                2.0 * PI * t.freq * n as f64 + t.phase,
                            )
                        })
                        .sum()
                })
                .collect()
        }
        ModulationScheme::Wbfm => {
            let deviation = FM_DEVIATION_RATIO * TONE_FREQ_HI;
            let mut phase = 0.0;
            message
                .iter()
                .map(|&m| {
                    phase += 2.0 * PI * deviation * m / peak;
                    Complex64::from_polar(1.0, phase)
                })
                .collect()
        }
        _ => unreachable!(),
    };

    let power: f64 = samples.iter().map(|c| c.norm_sqr()).sum::<f64>() / len as f64;
    let scale = 1.0 / power.sqrt().max(1e-12);
    samples.iter_mut().for_each(|c| *c *= scale);
    ModulatedSignal {
        samples,
        symbols: Vec::new(),
    }
}
