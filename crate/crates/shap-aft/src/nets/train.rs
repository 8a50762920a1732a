//! Training loops for both networks.
//!
//! A batch step runs in three phases so that frames fan out across threads
//! while batch normalization still sees real batch statistics:
//!
//! 1. per frame, in parallel: a private graph computes the pooled feature
//!    vector through conv + LSTM (+ attention);
//! 2. one head graph stacks the pooled vectors, applies training-mode batch
//!    normalization and the dense layers, computes the loss, and
//!    backpropagates to head parameters and the stacked features;
//! 3. per frame, in parallel: the feature graphs backpropagate from their
//!    pooled output seeded with the matching row of the head gradient.
//!
//! Backbone gradients are reduced over frames in index order, so a fixed
//! seed reproduces training bit for bit regardless of thread count.

use super::{
    argmax, bn_constants, dense_head, features, register_backbone, register_head, AmcNetwork,
    DetectionNetwork, NetParams,
};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::seeds::{child_seed, rng_from};
use crate::signal::IQFrame;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Early-stopping patience on validation loss; 0 disables early stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            lr: 1e-3,
            patience: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone)]
pub enum Labels {
    Classes(Vec<usize>),
    Binary(Vec<f64>),
}

impl Labels {
    fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Binary(v) => v.len(),
        }
    }

    fn subset(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes(v) => Labels::Classes(idx.iter().map(|&i| v[i]).collect()),
            Labels::Binary(v) => Labels::Binary(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
    lr: f64,
}

impl Adam {
    fn new(params: &[&Tensor], lr: f64) -> Self {
        Adam {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = &grads[k].data;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

struct BatchOut {
    loss: f64,
    grads: Vec<Tensor>,
    bn_mean: Vec<f64>,
    bn_var: Vec<f64>,
}

#[cfg(test)]
pub(crate) fn batch_step_for_tests(
    p: &NetParams,
    attention: bool,
    frames: &[&Tensor],
    labels: &Labels,
) -> Result<Vec<Tensor>> {
    batch_step(p, attention, frames, labels).map(|o| o.grads)
}

fn batch_step(
    p: &NetParams,
    attention: bool,
    frames: &[&Tensor],
    labels: &Labels,
) -> Result<BatchOut> {
    let (_, eps) = bn_constants();

    // Phase 1: per-frame feature subgraphs, forward only.
    let phase1: Result<Vec<(Graph, crate::autodiff::Var, super::BackboneVars)>> = frames
        .par_iter()
        .map(|frame| {
            let mut g = Graph::new();
            let bb = register_backbone(&mut g, p, true);
            let input = g.constant((*frame).clone());
            let pooled = features(&mut g, &bb, input, attention)?;
            Ok((g, pooled, bb))
        })
        .collect();
    let mut phase1 = phase1?;

    // Phase 2: one head graph over the stacked pooled features.
    let hidden = p.hidden();
    let mut pooled_data = Vec::with_capacity(frames.len() * hidden);
    for (g, v, _) in &phase1 {
        pooled_data.extend_from_slice(&g.value(*v).data);
    }
    let mut hg = Graph::new();
    let stacked = hg.leaf(Tensor::matrix(frames.len(), hidden, pooled_data));
    let hv = register_head(&mut hg, p, true);
    let normed = hg.batchnorm_train(stacked, hv.gamma, hv.beta, eps)?;
    let logits = dense_head(&mut hg, &hv, normed)?;
    let loss = match labels {
        Labels::Classes(y) => hg.softmax_cross_entropy(logits, y)?,
        Labels::Binary(y) => hg.bce_with_logits(logits, y)?,
    };
    let loss_value = hg.value(loss).item();
    hg.backward(loss)?;

    let (bn_mean, bn_var) = {
        let (m, v) = hg.batchnorm_stats(normed).expect("train-mode node");
        (m.to_vec(), v.to_vec())
    };
    let head_grads: Vec<Tensor> = hv.ordered().iter().map(|&v| hg.grad(v)).collect();
    let d_pooled = hg.grad(stacked);

    // Phase 3: seed each feature graph with its row of the head gradient.
    let rows: Vec<&[f64]> = d_pooled.data.chunks_exact(hidden).collect();
    phase1
        .par_iter_mut()
        .zip(rows.par_iter())
        .try_for_each(|((g, pooled, _), row)| g.backward_seeded(*pooled, row))?;

    // Reduce backbone gradients over frames in index order.
    let mut grads: Vec<Tensor> = Vec::with_capacity(20);
    {
        let (g0, _, bb0) = &phase1[0];
        for &v in &bb0.ordered() {
            grads.push(g0.grad(v));
        }
        for (g, _, bb) in phase1.iter().skip(1) {
            for (acc, &v) in grads.iter_mut().zip(&bb.ordered()) {
                let gt = g.grad(v);
                for (a, b) in acc.data.iter_mut().zip(&gt.data) {
                    *a += b;
                }
            }
        }
    }
    grads.extend(head_grads);

    Ok(BatchOut {
        loss: loss_value,
        grads,
        bn_mean,
        bn_var,
    })
}

fn inference_loss(
    p: &NetParams,
    attention: bool,
    bn: &super::BnParams,
    frames: &[Tensor],
    labels: &Labels,
) -> Result<(f64, f64)> {
    let per_frame: Result<Vec<(f64, bool)>> = frames
        .par_iter()
        .enumerate()
        .map(|(i, frame)| {
            let mut g = Graph::new();
            let bb = register_backbone(&mut g, p, false);
            let hv = register_head(&mut g, p, false);
            let input = g.constant(frame.clone());
            let pooled = features(&mut g, &bb, input, attention)?;
            let normed = super::bn_inference(&mut g, &hv, bn, pooled)?;
            let logits = dense_head(&mut g, &hv, normed)?;
            match labels {
                Labels::Classes(y) => {
                    let loss = g.softmax_cross_entropy(logits, &[y[i]])?;
                    let probs = g.softmax(logits)?;
                    let correct = argmax(&g.value(probs).data) == y[i];
                    Ok((g.value(loss).item(), correct))
                }
                Labels::Binary(y) => {
                    let loss = g.bce_with_logits(logits, &y[i..=i])?;
                    let p_hat = g.sigmoid(logits);
                    let decided = g.value(p_hat).data[0] >= 0.5;
                    Ok((g.value(loss).item(), decided == (y[i] >= 0.5)))
                }
            }
        })
        .collect();
    let per_frame = per_frame?;
    let n = per_frame.len() as f64;
    let loss = per_frame.iter().map(|(l, _)| l).sum::<f64>() / n;
    let acc = per_frame.iter().filter(|(_, c)| *c).count() as f64 / n;
    Ok((loss, acc))
}

/// Core loop: Adam over shuffled batches, best-validation-loss weights kept,
/// optional early stopping. Batches of fewer than 2 frames are dropped
/// because batch statistics degenerate.
fn fit(
    p: &mut NetParams,
    attention: bool,
    train_frames: &[Tensor],
    train_labels: &Labels,
    val_frames: &[Tensor],
    val_labels: &Labels,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train_frames.is_empty() || val_frames.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation sets must be nonempty".into(),
        ));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "epochs and batch size must be at least 1".into(),
        ));
    }
    assert_eq!(train_frames.len(), train_labels.len());
    assert_eq!(val_frames.len(), val_labels.len());

    let (momentum, _) = bn_constants();
    let mut adam = {
        let refs: Vec<&Tensor> = p.trainable().iter().map(|(_, t)| *t).collect();
        Adam::new(&refs, cfg.lr)
    };

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
    };
    let mut best: Option<NetParams> = None;
    let mut since_best = 0usize;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_frames.len()).collect();
        let mut rng = rng_from(child_seed(cfg.seed, &[0xe90c, epoch as u64]));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let frames: Vec<&Tensor> = chunk.iter().map(|&i| &train_frames[i]).collect();
            let labels = train_labels.subset(chunk);
            let out = batch_step(p, attention, &frames, &labels)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    seed: cfg.seed,
                });
            }
            {
                let mut params = p.trainable_mut();
                adam.step(&mut params, &out.grads);
            }
            for j in 0..p.bn.run_mean.numel() {
                p.bn.run_mean.data[j] =
                    (1.0 - momentum) * p.bn.run_mean.data[j] + momentum * out.bn_mean[j];
                p.bn.run_var.data[j] =
                    (1.0 - momentum) * p.bn.run_var.data[j] + momentum * out.bn_var[j];
            }
            loss_sum += out.loss * chunk.len() as f64;
            loss_count += chunk.len();
            step += 1;
        }

        let (val_loss, val_accuracy) = inference_loss(p, attention, &p.bn, val_frames, val_labels)?;
        let train_loss = loss_sum / loss_count.max(1) as f64;
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.4} val_loss {val_loss:.4} val_acc {val_accuracy:.4}"
        );
        report.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });

        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
            best = Some(p.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }

    if let Some(b) = best {
        *p = b;
    }
    Ok(report)
}

fn frames_to_tensors(frames: &[&IQFrame]) -> (Vec<Tensor>, Vec<usize>) {
    let tensors = frames.iter().map(|f| f.tensor()).collect();
    let labels = frames.iter().map(|f| f.label).collect();
    (tensors, labels)
}

/// Train the classifier on labeled frames, keeping best-validation weights.
pub fn train_amc(
    net: &mut AmcNetwork,
    train: &[&IQFrame],
    val: &[&IQFrame],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let (tx, ty) = frames_to_tensors(train);
    let (vx, vy) = frames_to_tensors(val);
    fit(
        &mut net.p,
        false,
        &tx,
        &Labels::Classes(ty),
        &vx,
        &Labels::Classes(vy),
        cfg,
    )
}

/// One labeled detector example.
#[derive(Debug, Clone)]
pub struct DetectorSample {
    pub frame: Tensor,
    pub attacked: bool,
}

/// Train the detector on a mixed clean/attacked corpus.
pub fn train_detector(
    net: &mut DetectionNetwork,
    train: &[DetectorSample],
    val: &[DetectorSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let tx: Vec<Tensor> = train.iter().map(|s| s.frame.clone()).collect();
    let ty: Vec<f64> = train.iter().map(|s| f64::from(s.attacked)).collect();
    let vx: Vec<Tensor> = val.iter().map(|s| s.frame.clone()).collect();
    let vy: Vec<f64> = val.iter().map(|s| f64::from(s.attacked)).collect();
    fit(
        &mut net.p,
        true,
        &tx,
        &Labels::Binary(ty),
        &vx,
        &Labels::Binary(vy),
        cfg,
    )
}

/// Accuracy plus the full confusion matrix (rows true, columns predicted).
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

impl EvalResult {
    pub fn from_pairs(num_classes: usize, pairs: &[(usize, usize)]) -> EvalResult {
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for &(t, p) in pairs {
            confusion[t][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|i| confusion[i][i]).sum();
        EvalResult {
            accuracy: correct as f64 / pairs.len().max(1) as f64,
            confusion,
            total: pairs.len(),
        }
    }
}

/// Classify every frame and tabulate the confusion matrix.
pub fn evaluate(net: &AmcNetwork, frames: &[&IQFrame]) -> Result<EvalResult> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("evaluate on empty set".into()));
    }
    let pairs: Result<Vec<(usize, usize)>> = frames
        .par_iter()
        .map(|f| Ok((f.label, net.predict_label(&f.tensor())?)))
        .collect();
    Ok(EvalResult::from_pairs(net.meta.num_classes, &pairs?))
}

/// Fraction of samples the detector routes correctly.
pub fn detector_accuracy(net: &DetectionNetwork, samples: &[DetectorSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty detector sample set".into()));
    }
    let correct: Result<Vec<bool>> = samples
        .par_iter()
        .map(|s| Ok(net.is_attacked(&s.frame)? == s.attacked))
        .collect();
    let correct = correct?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}
