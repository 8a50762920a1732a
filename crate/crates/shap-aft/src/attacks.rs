//! White-box adversarial frame synthesis against a frozen classifier.
//!
//! The gradient attacks (FGSM, BIM, PGD) take signed steps along the input
//! gradient of the cross-entropy loss and stay inside an L-infinity ball of
//! radius epsilon around the clean frame; sign(0) is 0 throughout. The
//! optimization attack (C&W) minimizes squared L2 distortion plus a
//! weighted logit-margin hinge, with the weight found by binary search,
//! and the perturbation left unconstrained in the normalized-signal domain.
//! All attacks operate on unit-power-normalized frames, which is what makes
//! the epsilon budgets comparable across the corpus.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nets::{argmax, AmcNetwork};
use crate::seeds::{child_seed, rng_from};
use crate::signal::IQFrame;
use crate::tensor::Tensor;
use rand::Rng;
use rayon::prelude::*;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
    Cw,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::Fgsm,
        AttackKind::Bim,
        AttackKind::Pgd,
        AttackKind::Cw,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
            AttackKind::Cw => "cw",
        }
    }

    pub fn parse(s: &str) -> Option<AttackKind> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Some(AttackKind::Fgsm),
            "bim" => Some(AttackKind::Bim),
            "pgd" => Some(AttackKind::Pgd),
            "cw" | "c&w" => Some(AttackKind::Cw),
            _ => None,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// C&W search parameters.
#[derive(Debug, Clone)]
pub struct CwParams {
    pub initial_c: f64,
    pub binary_search_steps: usize,
    pub confidence: f64,
    pub lr: f64,
    pub max_iters: usize,
    /// Untargeted by default; a target class flips the margin.
    pub target: Option<usize>,
}

impl Default for CwParams {
    fn default() -> Self {
        CwParams {
            initial_c: 0.5,
            binary_search_steps: 5,
            confidence: 0.0,
            lr: 0.03,
            max_iters: 10,
            target: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// L-infinity budget in normalized-signal units (unused by C&W).
    pub epsilon: f64,
    /// Per-iteration step for the iterative gradient attacks.
    pub step_alpha: f64,
    pub iters: usize,
    pub cw: CwParams,
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            kind: AttackKind::Fgsm,
            epsilon,
            step_alpha: epsilon,
            iters: 1,
            cw: CwParams::default(),
        }
    }

    pub fn bim(epsilon: f64, step_alpha: f64, iters: usize) -> Self {
        AttackSpec {
            kind: AttackKind::Bim,
            epsilon,
            step_alpha,
            iters,
            cw: CwParams::default(),
        }
    }

    pub fn pgd(epsilon: f64, step_alpha: f64, iters: usize) -> Self {
        AttackSpec {
            kind: AttackKind::Pgd,
            epsilon,
            step_alpha,
            iters,
            cw: CwParams::default(),
        }
    }

    pub fn cw(max_iters: usize) -> Self {
        AttackSpec {
            kind: AttackKind::Cw,
            epsilon: 0.0,
            step_alpha: 0.0,
            iters: max_iters,
            cw: CwParams {
                max_iters,
                ..CwParams::default()
            },
        }
    }

    /// Random-start radius for PGD: min(0.3 * epsilon, 0.03).
    pub fn pgd_init_radius(&self) -> f64 {
        (0.3 * self.epsilon).min(0.03)
    }

    /// Attack level for reporting: epsilon for the gradient attacks,
    /// iteration count for C&W.
    pub fn level(&self) -> f64 {
        match self.kind {
            AttackKind::Cw => self.cw.max_iters as f64,
            _ => self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::InvalidArgument(
                "perturbation budget must be nonnegative".into(),
            ));
        }
        match self.kind {
            AttackKind::Bim | AttackKind::Pgd => {
                if self.iters < 1 {
                    return Err(Error::InvalidArgument(
                        "iterative attacks need at least one iteration".into(),
                    ));
                }
                if self.step_alpha <= 0.0 {
                    return Err(Error::InvalidArgument("step size must be positive".into()));
                }
            }
            AttackKind::Cw => {
                if self.cw.max_iters < 1 || self.cw.binary_search_steps < 1 {
                    return Err(Error::InvalidArgument(
                        "C&W needs at least one iteration and one search step".into(),
                    ));
                }
            }
            AttackKind::Fgsm => {}
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Input gradient of the cross-entropy loss at the given label.
fn loss_input_grad(net: &AmcNetwork, frame: &Tensor, label: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = net.forward(&mut g, frame, true, false)?;
    let loss = g.softmax_cross_entropy(vars.logits, &[label])?;
    g.backward(loss)?;
    Ok(g.grad(vars.input))
}

/// One signed-gradient step followed by projection into the epsilon ball.
fn step_and_clip(x_adv: &mut Tensor, grad: &Tensor, clean: &Tensor, alpha: f64, eps: f64) {
    for i in 0..x_adv.data.len() {
        let stepped = x_adv.data[i] + alpha * sign(grad.data[i]);
        x_adv.data[i] = stepped.clamp(clean.data[i] - eps, clean.data[i] + eps);
    }
}

/// Single-step signed-gradient attack: x + epsilon * sign(grad).
pub fn fgsm(net: &AmcNetwork, frame: &Tensor, label: usize, epsilon: f64) -> Result<Tensor> {
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(
            "perturbation budget must be nonnegative".into(),
        ));
    }
    let grad = loss_input_grad(net, frame, label)?;
    let data = frame
        .data
        .iter()
        .zip(&grad.data)
        .map(|(&x, &g)| x + epsilon * sign(g))
        .collect();
    Ok(Tensor::new(data, frame.shape.clone()))
}

/// Iterative signed-gradient attack with per-step clipping; no random start.
pub fn bim(
    net: &AmcNetwork,
    frame: &Tensor,
    label: usize,
    epsilon: f64,
    alpha: f64,
    iters: usize,
) -> Result<Tensor> {
    let mut x_adv = frame.clone();
    for _ in 0..iters {
        let grad = loss_input_grad(net, &x_adv, label)?;
        step_and_clip(&mut x_adv, &grad, frame, alpha, epsilon);
    }
    Ok(x_adv)
}

/// Projected iterative attack with a uniform random start.
pub fn pgd(
    net: &AmcNetwork,
    frame: &Tensor,
    label: usize,
    spec: &AttackSpec,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = rng_from(seed);
    let r = spec.pgd_init_radius();
    let mut x_adv = frame.clone();
    if r > 0.0 {
        for v in &mut x_adv.data {
            *v += rng.gen_range(-r..r);
        }
    }
    for _ in 0..spec.iters {
        let grad = loss_input_grad(net, &x_adv, label)?;
        step_and_clip(&mut x_adv, &grad, frame, spec.step_alpha, spec.epsilon);
    }
    Ok(x_adv)
}

/// Objective gradient for one C&W iterate: d/dx of ||x - clean||^2
/// + c * max(z_y - max_{j != y} z_j, -confidence). Returns the gradient,
/// the logits at the current iterate, and the squared distortion.
fn cw_iterate(
    net: &AmcNetwork,
    clean: &Tensor,
    x_adv: &Tensor,
    label: usize,
    c: f64,
    params: &CwParams,
) -> Result<(Tensor, Vec<f64>, f64)> {
    let mut g = Graph::new();
    let vars = net.forward(&mut g, x_adv, true, false)?;
    let logits = g.value(vars.logits).data.clone();

    let clean_var = g.constant(clean.clone());
    let eta = g.sub(vars.input, clean_var)?;
    let eta_sq = g.mul(eta, eta)?;
    let l2 = g.sum_all(eta_sq);

    // The hinge pushes the protected class below the strongest competitor
    // (or the target above everything else, in targeted mode). The argmax
    // choice is piecewise constant, so fixing it per iterate yields the
    // standard subgradient.
    let (hi_idx, lo_idx) = match params.target {
        None => (label, strongest_other(&logits, label)),
        Some(t) => (strongest_other(&logits, t), t),
    };
    let z_hi = g.select(vars.logits, hi_idx)?;
    let z_lo = g.select(vars.logits, lo_idx)?;
    let diff = g.sub(z_hi, z_lo)?;
    let shifted = g.add_scalar(diff, params.confidence);
    let hinge = g.relu(shifted);
    let weighted = g.scale(hinge, c);
    let obj = g.add(l2, weighted)?;

    let l2_value = g.value(l2).item();
    g.backward(obj)?;
    Ok((g.grad(vars.input), logits, l2_value))
}

fn strongest_other(logits: &[f64], excluded: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &z) in logits.iter().enumerate() {
        if j != excluded && (best == usize::MAX || z > logits[best]) {
            best = j;
        }
    }
    best
}

fn cw_success(scores: &[f64], label: usize, target: Option<usize>) -> bool {
    match target {
        None => argmax(scores) != label,
        Some(t) => argmax(scores) == t,
    }
}

/// Optimization attack: gradient descent on squared distortion plus the
/// weighted margin hinge, binary-searching the weight (doubling on failure,
/// bisecting on success). Returns the lowest-distortion successful iterate,
/// or the final iterate when nothing succeeds; failure to flip the label is
/// reported through the outcome metadata, not an error.
pub fn cw(net: &AmcNetwork, frame: &Tensor, label: usize, params: &CwParams) -> Result<Tensor> {
    let mut c = params.initial_c;
    let mut lo = 0.0f64;
    let mut hi: Option<f64> = None;
    let mut best: Option<(f64, Tensor)> = None;
    let mut last = frame.clone();

    for _ in 0..params.binary_search_steps {
        let mut x_adv = frame.clone();
        let mut found = false;
        for _ in 0..params.max_iters {
            let (grad, logits, l2) = cw_iterate(net, frame, &x_adv, label, c, params)?;
            if cw_success(&logits, label, params.target) {
                found = true;
                if best.as_ref().is_none_or(|(b, _)| l2 < *b) {
                    best = Some((l2, x_adv.clone()));
                }
            }
            for (v, d) in x_adv.data.iter_mut().zip(&grad.data) {
                *v -= params.lr * d;
            }
        }
        // Success is checked before each step; cover the final iterate too.
        let probs = net.predict(&x_adv)?;
        if cw_success(&probs, label, params.target) {
            found = true;
            let l2 = x_adv
                .data
                .iter()
                .zip(&frame.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            if best.as_ref().is_none_or(|(b, _)| l2 < *b) {
                best = Some((l2, x_adv.clone()));
            }
        }
        last = x_adv;

        if found {
            hi = Some(c);
            c = (lo + c) / 2.0;
        } else {
            lo = c;
            c = match hi {
                Some(h) => (lo + h) / 2.0,
                None => c * 2.0,
            };
        }
    }

    Ok(match best {
        Some((_, x)) => x,
        None => last,
    })
}

/// Result of attacking one frame.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub data: Tensor,
    pub success: bool,
}

/// Dispatch one frame through the configured attack. Deterministic for a
/// given (weights, frame, spec, seed).
pub fn attack_frame(
    net: &AmcNetwork,
    frame: &Tensor,
    label: usize,
    spec: &AttackSpec,
    seed: u64,
) -> Result<AttackOutcome> {
    spec.validate()?;
    let data = match spec.kind {
        AttackKind::Fgsm => fgsm(net, frame, label, spec.epsilon)?,
        AttackKind::Bim => bim(net, frame, label, spec.epsilon, spec.step_alpha, spec.iters)?,
        AttackKind::Pgd => pgd(net, frame, label, spec, seed)?,
        AttackKind::Cw => cw(net, frame, label, &spec.cw)?,
    };
    if matches!(
        spec.kind,
        AttackKind::Fgsm | AttackKind::Bim | AttackKind::Pgd
    ) {
        debug_assert!(linf_distance(&data, frame) <= spec.epsilon + 1e-12);
    }
    let success = argmax(&net.predict(&data)?) != label;
    Ok(AttackOutcome { data, success })
}

pub fn linf_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

/// Attack metadata recorded alongside an attacked corpus.
#[derive(Debug, Clone)]
pub struct FrameAttackMeta {
    pub kind: AttackKind,
    pub level: f64,
    pub seed: u64,
    pub success: bool,
}

/// An attacked corpus plus its per-frame metadata.
#[derive(Debug, Clone)]
pub struct AttackedSet {
    pub frames: Vec<IQFrame>,
    pub meta: Vec<FrameAttackMeta>,
}

/// Attack a set of frames in parallel with per-frame child seeds.
pub fn attack_frames(
    net: &AmcNetwork,
    frames: &[&IQFrame],
    spec: &AttackSpec,
    base_seed: u64,
) -> Result<AttackedSet> {
    spec.validate()?;
    let results: Result<Vec<(IQFrame, FrameAttackMeta)>> = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let seed = child_seed(base_seed, &[0xa77c, i as u64]);
            let out = attack_frame(net, &f.tensor(), f.label, spec, seed)?;
            let frame = IQFrame {
                data: out.data.data,
                label: f.label,
                snr_db: f.snr_db,
                attacked: true,
                split: f.split,
            };
            let meta = FrameAttackMeta {
                kind: spec.kind,
                level: spec.level(),
                seed,
                success: out.success,
            };
            Ok((frame, meta))
        })
        .collect();
    let (frames, meta) = results?.into_iter().unzip();
    Ok(AttackedSet { frames, meta })
}

pub fn attack_meta_path(frames_path: &Path) -> PathBuf {
    frames_path.with_extension("attack.csv")
}

/// Sidecar: `frame,kind,level,seed,success` per attacked frame.
pub fn write_attack_meta(frames_path: &Path, meta: &[FrameAttackMeta]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(attack_meta_path(frames_path))?);
    writeln!(w, "frame,kind,level,seed,success")?;
    for (i, m) in meta.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{}",
            i,
            m.kind,
            m.level,
            m.seed,
            u8::from(m.success)
        )?;
    }
    w.flush()?;
    Ok(())
}
