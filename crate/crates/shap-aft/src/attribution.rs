//! Shapley-style attribution of the classifier's output to individual
//! received samples.
//!
//! Integrated gradients approximate the path integral of the class-output
//! gradient from a reference frame to the explained frame (midpoint rule);
//! expected gradients replace the single reference with draws from a
//! background set and a uniform path position, giving a Monte-Carlo Shapley
//! estimate. The in-phase and quadrature attributions of each sample point
//! are summed, averaged across a labeled set, and the most negative entries
//! form the destructive index set.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nets::{argmax, AmcNetwork};
use crate::seeds::{child_seed, rng_from};
use crate::signal::{IQFrame, ModulationScheme};
use crate::tensor::Tensor;
use rand::Rng;
use rayon::prelude::*;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

/// Which class output a frame's attribution targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetClass {
    /// The frame's true label.
    TrueLabel,
    /// The classifier's prediction for the frame.
    Predicted,
    /// Every class (one attribution map per class).
    All,
}

#[derive(Debug, Clone)]
pub struct AttributionConfig {
    /// Quadrature steps for integrated gradients.
    pub ig_steps: usize,
    /// Monte-Carlo draws for expected gradients.
    pub eg_samples: usize,
    pub target: TargetClass,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            ig_steps: 64,
            eg_samples: 200,
            target: TargetClass::TrueLabel,
        }
    }
}

/// Anything attributions can be computed against: a full output vector per
/// frame and the input gradient of one output coordinate.
pub trait AttributionModel: Sync {
    fn num_outputs(&self) -> usize;
    /// Model outputs for a frame (class probabilities for classifiers).
    fn outputs(&self, x: &Tensor) -> Result<Vec<f64>>;
    /// Gradient of output `class` with respect to the input.
    fn output_grad(&self, x: &Tensor, class: usize) -> Result<Tensor>;
}

impl AttributionModel for AmcNetwork {
    fn num_outputs(&self) -> usize {
        self.meta.num_classes
    }

    fn outputs(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.predict(x)
    }

    fn output_grad(&self, x: &Tensor, class: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, x, true, false)?;
        let probs = g.softmax(vars.logits)?;
        let p = g.select(probs, class)?;
        g.backward(p)?;
        Ok(g.grad(vars.input))
    }
}

fn lerp(a: &Tensor, b: &Tensor, alpha: f64) -> Tensor {
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x0, &x1)| x0 + alpha * (x1 - x0))
        .collect();
    Tensor::new(data, a.shape.clone())
}

/// Integrated gradients from `baseline` to `x` for one class output, using
/// a midpoint Riemann sum over the straight path. The result has the shape
/// of the frame (L x 2). Attributions sum to f(x) - f(baseline) as the step
/// count grows.
pub fn integrated_gradients<M: AttributionModel>(
    net: &M,
    x: &Tensor,
    baseline: &Tensor,
    class: usize,
    steps: usize,
) -> Result<Tensor> {
    if x.shape != baseline.shape {
        return Err(Error::shape(
            "integrated_gradients",
            format!("frame {:?} vs reference {:?}", x.shape, baseline.shape),
        ));
    }
    if steps < 1 {
        return Err(Error::InvalidArgument(
            "integrated gradients need at least one step".into(),
        ));
    }
    let grads: Result<Vec<Tensor>> = (0..steps)
        .into_par_iter()
        .map(|s| {
            let alpha = (s as f64 + 0.5) / steps as f64;
            net.output_grad(&lerp(baseline, x, alpha), class)
        })
        .collect();
    let grads = grads?;
    let mut acc = vec![0.0; x.numel()];
    for g in &grads {
        for (a, v) in acc.iter_mut().zip(&g.data) {
            *a += v;
        }
    }
    let data = acc
        .iter()
        .zip(&x.data)
        .zip(&baseline.data)
        .map(|((&s, &xi), &bi)| (xi - bi) * s / steps as f64)
        .collect();
    Ok(Tensor::new(data, x.shape.clone()))
}

/// Expected gradients: Monte-Carlo mean over (reference, path position)
/// draws of the pointwise product (x - x') * grad f(x' + alpha (x - x')).
pub fn expected_gradients<M: AttributionModel>(
    net: &M,
    x: &Tensor,
    background: &[Tensor],
    samples: usize,
    class: usize,
    seed: u64,
) -> Result<Tensor> {
    if background.is_empty() {
        return Err(Error::InvalidArgument("empty background set".into()));
    }
    if samples < 1 {
        return Err(Error::InvalidArgument(
            "expected gradients need at least one draw".into(),
        ));
    }
    let draws: Vec<(usize, f64)> = {
        let mut rng = rng_from(seed);
        (0..samples)
            .map(|_| (rng.gen_range(0..background.len()), rng.gen::<f64>()))
            .collect()
    };
    let contribs: Result<Vec<Vec<f64>>> = draws
        .par_iter()
        .map(|&(ref_idx, alpha)| {
            let reference = &background[ref_idx];
            if reference.shape != x.shape {
                return Err(Error::shape(
                    "expected_gradients",
                    format!("frame {:?} vs reference {:?}", x.shape, reference.shape),
                ));
            }
            let grad = net.output_grad(&lerp(reference, x, alpha), class)?;
            Ok(grad
                .data
                .iter()
                .zip(&x.data)
                .zip(&reference.data)
                .map(|((&g, &xi), &ri)| (xi - ri) * g)
                .collect())
        })
        .collect();
    let contribs = contribs?;
    let mut acc = vec![0.0; x.numel()];
    for c in &contribs {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|v| *v /= samples as f64);
    Ok(Tensor::new(acc, x.shape.clone()))
}

/// Sum the in-phase and quadrature attributions of each sample point.
pub fn combine_iq(per_point: &Tensor) -> Vec<f64> {
    per_point
        .data
        .chunks_exact(2)
        .map(|c| c[0] + c[1])
        .collect()
}

/// Mean of combined attribution vectors across frames, keeping the
/// sample-point dimension: the averaged contribution vector.
pub fn combine_and_average(per_frame: &[Tensor]) -> Result<Vec<f64>> {
    if per_frame.is_empty() {
        return Err(Error::InvalidArgument("no attributions to average".into()));
    }
    let l = per_frame[0].shape[0];
    let mut phi_bar = vec![0.0; l];
    for t in per_frame {
        if t.shape != per_frame[0].shape {
            return Err(Error::shape(
                "combine_and_average",
                format!("mixed frame shapes {:?} vs {:?}", t.shape, per_frame[0].shape),
            ));
        }
        for (acc, v) in phi_bar.iter_mut().zip(combine_iq(t)) {
            *acc += v;
        }
    }
    phi_bar.iter_mut().for_each(|v| *v /= per_frame.len() as f64);
    Ok(phi_bar)
}

/// The destructive index set: positions of the most negative averaged
/// contributions.
#[derive(Debug, Clone)]
pub struct DestructiveSet {
    /// Indices ordered most destructive first; all entries have negative
    /// averaged contribution.
    pub indices: Vec<usize>,
    /// How many of the requested positions had no negative value available.
    pub shortfall: usize,
}

/// Pick the `m` most negative entries. Only negative entries qualify; if
/// fewer than `m` exist, all of them are returned and the shortfall
/// reported.
pub fn select_destructive(phi_bar: &[f64], m: usize) -> DestructiveSet {
    let mut negatives: Vec<(usize, f64)> = phi_bar
        .iter()
        .enumerate()
        .filter(|(_, &v)| v < 0.0)
        .map(|(i, &v)| (i, v))
        .collect();
    negatives.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let take = m.min(negatives.len());
    DestructiveSet {
        indices: negatives[..take].iter().map(|&(i, _)| i).collect(),
        shortfall: m - take,
    }
}

/// Full attribution report over a labeled attacked set.
#[derive(Debug, Clone)]
pub struct ShapleyReport {
    /// Per-frame per-point attributions (each L x 2).
    pub per_frame: Vec<Tensor>,
    /// Per-frame combined (I+Q) vectors, each length L.
    pub combined: Vec<Vec<f64>>,
    /// Averaged contribution vector, length L.
    pub phi_bar: Vec<f64>,
    /// Expected model output over the background set, one entry per class.
    pub baseline_phi0: Vec<f64>,
    pub m_des: DestructiveSet,
    /// Class-pair attribution sums (rows true, columns predicted), present
    /// when requested.
    pub heatmap: Option<Vec<Vec<f64>>>,
}

/// Attributions of a labeled set at each frame's true label, averaged into
/// the contribution vector, plus the destructive selection.
pub fn build_report<M: AttributionModel>(
    net: &M,
    labeled: &[&IQFrame],
    background: &[Tensor],
    cfg: &AttributionConfig,
    m: usize,
    seed: u64,
) -> Result<ShapleyReport> {
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("empty labeled set".into()));
    }
    let per_frame: Result<Vec<Tensor>> = labeled
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let class = match cfg.target {
                TargetClass::TrueLabel => f.label,
                TargetClass::Predicted => argmax(&net.outputs(&f.tensor())?),
                TargetClass::All => {
                    return Err(Error::InvalidArgument(
                        "per-class reports are built with attribute_all_classes".into(),
                    ))
                }
            };
            expected_gradients(
                net,
                &f.tensor(),
                background,
                cfg.eg_samples,
                class,
                child_seed(seed, &[0x5e6, i as u64]),
            )
        })
        .collect();
    let per_frame = per_frame?;
    let combined: Vec<Vec<f64>> = per_frame.iter().map(combine_iq).collect();
    let phi_bar = combine_and_average(&per_frame)?;
    let m_des = select_destructive(&phi_bar, m);
    let baseline_phi0 = expected_output(net, background)?;
    Ok(ShapleyReport {
        per_frame,
        combined,
        phi_bar,
        baseline_phi0,
        m_des,
        heatmap: None,
    })
}

/// Mean class distribution the model assigns to the background set (the
/// additive baseline of the attribution decomposition).
pub fn expected_output<M: AttributionModel>(net: &M, background: &[Tensor]) -> Result<Vec<f64>> {
    if background.is_empty() {
        return Err(Error::InvalidArgument("empty background set".into()));
    }
    let outputs: Result<Vec<Vec<f64>>> =
        background.par_iter().map(|b| net.outputs(b)).collect();
    let outputs = outputs?;
    let m = outputs[0].len();
    let mut mean = vec![0.0; m];
    for o in &outputs {
        for (a, v) in mean.iter_mut().zip(o) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= outputs.len() as f64);
    Ok(mean)
}

/// One attribution map per class for a single frame (the raw explainer
/// output before class extraction).
pub fn attribute_all_classes<M: AttributionModel>(
    net: &M,
    frame: &Tensor,
    background: &[Tensor],
    samples: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    (0..num_classes)
        .map(|k| expected_gradients(net, frame, background, samples, k, child_seed(seed, &[k as u64])))
        .collect()
}

/// Class-pair heatmap: cell (i, j) accumulates the summed attribution
/// (computed at the predicted class j) of every frame with true class i
/// predicted as j.
pub fn shapley_heatmap<M: AttributionModel>(
    net: &M,
    labeled: &[&IQFrame],
    background: &[Tensor],
    num_classes: usize,
    eg_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let cells: Result<Vec<(usize, usize, f64)>> = labeled
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let pred = argmax(&net.outputs(&f.tensor())?);
            let att = expected_gradients(
                net,
                &f.tensor(),
                background,
                eg_samples,
                pred,
                child_seed(seed, &[0x4ea7, i as u64]),
            )?;
            Ok((f.label, pred, att.data.iter().sum()))
        })
        .collect();
    let mut heatmap = vec![vec![0.0; num_classes]; num_classes];
    for (t, p, v) in cells? {
        heatmap[t][p] += v;
    }
    Ok(heatmap)
}

/// Write the averaged contribution vector as `index,phi` CSV.
pub fn write_phi_bar(path: &Path, phi_bar: &[f64]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "index,phi")?;
    for (i, v) in phi_bar.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_phi_bar(path: &Path) -> Result<Vec<f64>> {
    let raw = fs::read_to_string(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    raw.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Format {
                    path: path.display().to_string(),
                    detail: format!("bad line: {l}"),
                })
        })
        .collect()
}

/// Write a class-pair matrix with scheme names as row and column headers.
pub fn write_class_matrix(path: &Path, matrix: &[Vec<f64>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let names: Vec<&str> = ModulationScheme::ALL.iter().map(|s| s.name()).collect();
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "true\\pred,{}", names.join(","))?;
    for (i, row) in matrix.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{},{}", names[i], cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Binary sidecar for per-frame attributions: magic "ATT1", then N, L as
/// u32 LE, then N frames of L x 2 f32 LE values.
pub fn write_attributions(path: &Path, per_frame: &[Tensor]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(b"ATT1")?;
    let l = per_frame.first().map_or(0, |t| t.shape[0]);
    w.write_all(&(per_frame.len() as u32).to_le_bytes())?;
    w.write_all(&(l as u32).to_le_bytes())?;
    for t in per_frame {
        for &v in &t.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_attributions(path: &Path) -> Result<Vec<Tensor>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?
        .read_to_end(&mut buf)?;
    let bad = |detail: &str| Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    };
    if buf.len() < 12 || &buf[0..4] != b"ATT1" {
        return Err(bad("missing ATT1 magic"));
    }
    let n = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let l = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if buf.len() != 12 + n * l * 2 * 4 {
        return Err(bad("truncated payload"));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let base = 12 + i * l * 2 * 4;
        let data: Vec<f64> = (0..l * 2)
            .map(|j| {
                f32::from_le_bytes(buf[base + 4 * j..base + 4 * j + 4].try_into().unwrap()) as f64
            })
            .collect();
        out.push(Tensor::matrix(l, 2, data));
    }
    Ok(out)
}
