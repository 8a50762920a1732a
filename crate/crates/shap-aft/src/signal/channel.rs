//! Single-tap channel: fading gain, frequency/phase rotation, and AWGN.
//!
//! Sample l of the output is
//! `h[l] * exp(-j*2*pi*(v*Ts*l + theta)) * s[l] + z[l]`
//! with the phase offset inside the 2*pi factor taken literally, so a
//! theta of 0.5 flips the sign of the signal. Noise power is set against
//! the measured (post-fading) signal power so the realized SNR matches the
//! target.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

/// Fading model for the per-frame channel gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fading {
    /// Unit gain.
    None,
    /// One complex Rayleigh draw per frame.
    Block,
    /// Independent Rayleigh draw per sample.
    PerSample,
}

#[derive(Debug, Clone)]
pub struct ChannelParams {
    /// Target SNR in dB; `None` disables noise.
    pub snr_db: Option<f64>,
    /// Frequency offset in cycles per sample (v * Ts).
    pub freq_offset_cycles: f64,
    /// Phase offset theta; enters the rotation as exp(-j*2*pi*theta).
    pub phase_offset: f64,
    pub fading: Fading,
}

impl ChannelParams {
    pub fn clean() -> Self {
        ChannelParams {
            snr_db: None,
            freq_offset_cycles: 0.0,
            phase_offset: 0.0,
            fading: Fading::None,
        }
    }
}

fn rayleigh_gain(rng: &mut ChaCha8Rng) -> Complex64 {
    loop {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        let h = Complex64::new(re, im) / (2.0f64).sqrt();
        if h.norm_sqr() > 1e-12 {
            return h;
        }
    }
}

/// Push a baseband sequence through the channel.
pub fn apply_channel(
    s: &[Complex64],
    params: &ChannelParams,
    rng: &mut ChaCha8Rng,
) -> Vec<Complex64> {
    assert!(!s.is_empty());
    let block_gain = match params.fading {
        Fading::Block => Some(rayleigh_gain(rng)),
        _ => None,
    };
    let mut x: Vec<Complex64> = s
        .iter()
        .enumerate()
        .map(|(l, &sl)| {
            let h = match params.fading {
                Fading::None => Complex64::new(1.0, 0.0),
                Fading::Block => block_gain.unwrap(),
                Fading::PerSample => rayleigh_gain(rng),
            };
            let angle = -2.0 * PI * (params.freq_offset_cycles * l as f64 + params.phase_offset);
            h * Complex64::from_polar(1.0, angle) * sl
        })
        .collect();

    if let Some(snr_db) = params.snr_db {
        let sig_power = x.iter().map(|c| c.norm_sqr()).sum::<f64>() / x.len() as f64;
        let noise_power = sig_power / 10f64.powf(snr_db / 10.0);
        let per_component = (noise_power / 2.0).sqrt();
        for c in &mut x {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *c += Complex64::new(re * per_component, im * per_component);
        }
    }
    x
}
