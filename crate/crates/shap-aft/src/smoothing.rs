//! Randomized-smoothing baseline: average the classifier's output over
//! Gaussian-perturbed copies of the frame.

use crate::error::{Error, Result};
use crate::nets::AmcNetwork;
use crate::seeds::{child_seed, rng_from};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// Noise variance used by the comparison scheme.
pub const RS_VARIANCE: f64 = 0.02;

/// Mean prediction over `samples` noisy copies with per-coordinate noise
/// N(0, sigma^2). With sigma = 0 this equals the plain forward pass.
pub fn smoothed_predict(
    net: &AmcNetwork,
    frame: &Tensor,
    sigma: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples < 1 {
        return Err(Error::InvalidArgument(
            "smoothing needs at least one sample".into(),
        ));
    }
    let mut mean = vec![0.0; net.meta.num_classes];
    for k in 0..samples {
        let mut noisy = frame.clone();
        if sigma != 0.0 {
            let mut rng = rng_from(child_seed(seed, &[0x55, k as u64]));
            for v in &mut noisy.data {
                let n: f64 = rng.sample(StandardNormal);
                *v += sigma * n;
            }
        }
        let probs = net.predict(&noisy)?;
        for (a, p) in mean.iter_mut().zip(&probs) {
            *a += p;
        }
    }
    mean.iter_mut().for_each(|v| *v /= samples as f64);
    Ok(mean)
}
