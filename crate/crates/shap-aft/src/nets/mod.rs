//! The two networks: a modulation classifier and an attack detector.
//!
//! Both share a backbone of valid 1-D convolution (kernel length 8, ReLU),
//! a single LSTM layer returning the full sequence, and a sum over time
//! steps; the detector inserts scaled dot-product self-attention after the
//! LSTM. The pooled feature vector passes through batch normalization and
//! two dense layers. The classifier head emits a softmax distribution over
//! the candidate schemes; the detector head emits one logit whose sigmoid
//! is the attack probability, decided attacked at 0.5 or above.
//!
//! The backbone is length-agnostic, so a classifier trained at one frame
//! length accepts refined (shortened) frames without structural changes.

pub mod checkpoint;
pub mod train;

pub use train::{evaluate, train_amc, train_detector, EvalResult, TrainConfig, TrainReport};

use crate::autodiff::{Graph, LstmGateVars, Var};
use crate::error::{Error, Result};
use crate::seeds::{child_seed, rng_from};
use crate::tensor::Tensor;

/// Convolution kernel length shared by both architectures.
pub const KERNEL_LEN: usize = 8;
/// Input channels: in-phase and quadrature.
pub const IN_CHANNELS: usize = 2;
const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ConvParams {
    /// C_out x K x C_in.
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct LstmParams {
    /// Input weights per gate (input, forget, candidate, output), each C x H.
    pub w: [Tensor; 4],
    /// Recurrent weights per gate, each H x H.
    pub u: [Tensor; 4],
    /// Biases per gate, each length H.
    pub b: [Tensor; 4],
}

#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub run_mean: Tensor,
    pub run_var: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenseParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// Shared parameter bundle for both architectures.
#[derive(Debug, Clone)]
pub struct NetParams {
    pub conv: ConvParams,
    pub lstm: LstmParams,
    pub bn: BnParams,
    pub dense1: DenseParams,
    pub dense2: DenseParams,
}

/// Architecture geometry and provenance, stored in checkpoints.
#[derive(Debug, Clone)]
pub struct NetMeta {
    pub arch: Arch,
    pub width: f64,
    pub input_len: usize,
    pub num_classes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Amc,
    Detector,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::Amc => "amc-v1",
            Arch::Detector => "detector-v1",
        }
    }
}

pub(crate) fn scaled(base: usize, width: f64) -> usize {
    ((base as f64 * width).round() as usize).max(1)
}

impl NetParams {
    fn init(
        conv_filters: usize,
        hidden: usize,
        dense_units: usize,
        out_units: usize,
        seed: u64,
    ) -> NetParams {
        let mut rng = rng_from(child_seed(seed, &[0x6e65_7473]));
        let k = KERNEL_LEN;
        let c_in = IN_CHANNELS;
        let conv = ConvParams {
            w: Tensor::glorot(&[conv_filters, k, c_in], k * c_in, k * conv_filters, &mut rng),
            b: Tensor::zeros(&[conv_filters]),
        };
        let mut w = Vec::with_capacity(4);
        let mut u = Vec::with_capacity(4);
        let mut b = Vec::with_capacity(4);
        for gate in 0..4 {
            w.push(Tensor::glorot(
                &[conv_filters, hidden],
                conv_filters,
                hidden,
                &mut rng,
            ));
            u.push(Tensor::glorot(&[hidden, hidden], hidden, hidden, &mut rng));
            // Forget-gate bias starts at 1 so early training retains state.
            let bias = if gate == 1 {
                Tensor::new(vec![1.0; hidden], vec![hidden])
            } else {
                Tensor::zeros(&[hidden])
            };
            b.push(bias);
        }
        let lstm = LstmParams {
            w: w.try_into().unwrap(),
            u: u.try_into().unwrap(),
            b: b.try_into().unwrap(),
        };
        let bn = BnParams {
            gamma: Tensor::new(vec![1.0; hidden], vec![hidden]),
            beta: Tensor::zeros(&[hidden]),
            run_mean: Tensor::zeros(&[hidden]),
            run_var: Tensor::new(vec![1.0; hidden], vec![hidden]),
        };
        let dense1 = DenseParams {
            w: Tensor::glorot(&[hidden, dense_units], hidden, dense_units, &mut rng),
            b: Tensor::zeros(&[dense_units]),
        };
        let dense2 = DenseParams {
            w: Tensor::glorot(&[dense_units, out_units], dense_units, out_units, &mut rng),
            b: Tensor::zeros(&[out_units]),
        };
        NetParams {
            conv,
            lstm,
            bn,
            dense1,
            dense2,
        }
    }

    /// Trainable tensors in canonical order (running statistics excluded).
    pub fn trainable(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv.w", &self.conv.w),
            ("conv.b", &self.conv.b),
            ("lstm.w_i", &self.lstm.w[0]),
            ("lstm.w_f", &self.lstm.w[1]),
            ("lstm.w_g", &self.lstm.w[2]),
            ("lstm.w_o", &self.lstm.w[3]),
            ("lstm.u_i", &self.lstm.u[0]),
            ("lstm.u_f", &self.lstm.u[1]),
            ("lstm.u_g", &self.lstm.u[2]),
            ("lstm.u_o", &self.lstm.u[3]),
            ("lstm.b_i", &self.lstm.b[0]),
            ("lstm.b_f", &self.lstm.b[1]),
            ("lstm.b_g", &self.lstm.b[2]),
            ("lstm.b_o", &self.lstm.b[3]),
            ("bn.gamma", &self.bn.gamma),
            ("bn.beta", &self.bn.beta),
            ("dense1.w", &self.dense1.w),
            ("dense1.b", &self.dense1.b),
            ("dense2.w", &self.dense2.w),
            ("dense2.b", &self.dense2.b),
        ]
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let NetParams {
            conv,
            lstm,
            bn,
            dense1,
            dense2,
        } = self;
        let [wi, wf, wg, wo] = &mut lstm.w;
        let [ui, uf, ug, uo] = &mut lstm.u;
        let [bi, bf, bg, bo] = &mut lstm.b;
        vec![
            &mut conv.w,
            &mut conv.b,
            wi,
            wf,
            wg,
            wo,
            ui,
            uf,
            ug,
            uo,
            bi,
            bf,
            bg,
            bo,
            &mut bn.gamma,
            &mut bn.beta,
            &mut dense1.w,
            &mut dense1.b,
            &mut dense2.w,
            &mut dense2.b,
        ]
    }

    pub fn hidden(&self) -> usize {
        self.bn.gamma.numel()
    }
}

/// Graph handles to the backbone parameters (conv + LSTM).
#[derive(Debug, Clone, Copy)]
pub struct BackboneVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub lstm: LstmGateVars,
}

impl BackboneVars {
    pub fn ordered(&self) -> Vec<Var> {
        let mut v = vec![self.conv_w, self.conv_b];
        v.extend(self.lstm.w);
        v.extend(self.lstm.u);
        v.extend(self.lstm.b);
        v
    }
}

/// Graph handles to the head parameters (normalization + dense layers).
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub gamma: Var,
    pub beta: Var,
    pub d1w: Var,
    pub d1b: Var,
    pub d2w: Var,
    pub d2b: Var,
}

impl HeadVars {
    pub fn ordered(&self) -> Vec<Var> {
        vec![
            self.gamma, self.beta, self.d1w, self.d1b, self.d2w, self.d2b,
        ]
    }
}

/// Graph handles to one full registration of the parameters.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub bb: BackboneVars,
    pub head: HeadVars,
}

impl ParamVars {
    /// Same order as [`NetParams::trainable`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut v = self.bb.ordered();
        v.extend(self.head.ordered());
        v
    }
}

fn reg(g: &mut Graph, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        g.leaf(t.clone())
    } else {
        g.constant(t.clone())
    }
}

pub(crate) fn register_backbone(g: &mut Graph, p: &NetParams, trainable: bool) -> BackboneVars {
    let conv_w = reg(g, &p.conv.w, trainable);
    let conv_b = reg(g, &p.conv.b, trainable);
    let w = [
        reg(g, &p.lstm.w[0], trainable),
        reg(g, &p.lstm.w[1], trainable),
        reg(g, &p.lstm.w[2], trainable),
        reg(g, &p.lstm.w[3], trainable),
    ];
    let u = [
        reg(g, &p.lstm.u[0], trainable),
        reg(g, &p.lstm.u[1], trainable),
        reg(g, &p.lstm.u[2], trainable),
        reg(g, &p.lstm.u[3], trainable),
    ];
    let b = [
        reg(g, &p.lstm.b[0], trainable),
        reg(g, &p.lstm.b[1], trainable),
        reg(g, &p.lstm.b[2], trainable),
        reg(g, &p.lstm.b[3], trainable),
    ];
    BackboneVars {
        conv_w,
        conv_b,
        lstm: LstmGateVars { w, u, b },
    }
}

pub(crate) fn register_head(g: &mut Graph, p: &NetParams, trainable: bool) -> HeadVars {
    HeadVars {
        gamma: reg(g, &p.bn.gamma, trainable),
        beta: reg(g, &p.bn.beta, trainable),
        d1w: reg(g, &p.dense1.w, trainable),
        d1b: reg(g, &p.dense1.b, trainable),
        d2w: reg(g, &p.dense2.w, trainable),
        d2b: reg(g, &p.dense2.b, trainable),
    }
}

pub(crate) fn register_params(g: &mut Graph, p: &NetParams, trainable: bool) -> ParamVars {
    ParamVars {
        bb: register_backbone(g, p, trainable),
        head: register_head(g, p, trainable),
    }
}

/// Backbone: conv + ReLU + LSTM (+ optional self-attention) + sum over time.
pub(crate) fn features(
    g: &mut Graph,
    bb: &BackboneVars,
    input: Var,
    attention: bool,
) -> Result<Var> {
    let conv = g.conv1d(input, bb.conv_w, bb.conv_b)?;
    let act = g.relu(conv);
    let seq = g.lstm(act, bb.lstm)?;
    let seq = if attention { g.self_attention(seq)? } else { seq };
    g.sum_over_time(seq)
}

/// Inference-mode batch normalization: affine map using running statistics.
pub(crate) fn bn_inference(g: &mut Graph, hv: &HeadVars, bn: &BnParams, x: Var) -> Result<Var> {
    let inv_std: Vec<f64> = bn
        .run_var
        .data
        .iter()
        .map(|&v| 1.0 / (v + BN_EPS).sqrt())
        .collect();
    let mean = g.constant(bn.run_mean.clone());
    let inv = g.constant(Tensor::vector(inv_std));
    let centered = g.sub_row(x, mean)?;
    let scale = g.mul(hv.gamma, inv)?;
    let scaled = g.mul_row(centered, scale)?;
    g.add_row(scaled, hv.beta)
}

/// Dense head after normalization: dense + ReLU + dense, returning logits.
pub(crate) fn dense_head(g: &mut Graph, hv: &HeadVars, x: Var) -> Result<Var> {
    let a1 = g.matmul(x, hv.d1w)?;
    let a1 = g.add_row(a1, hv.d1b)?;
    let a1 = g.relu(a1);
    let a2 = g.matmul(a1, hv.d2w)?;
    g.add_row(a2, hv.d2b)
}

/// Handles to one full single-frame forward pass.
pub struct FrameVars {
    pub input: Var,
    pub logits: Var,
    pub params: ParamVars,
}

pub(crate) fn frame_forward(
    g: &mut Graph,
    p: &NetParams,
    attention: bool,
    frame: &Tensor,
    track_input: bool,
    track_params: bool,
) -> Result<FrameVars> {
    if frame.shape.len() != 2 || frame.shape[1] != IN_CHANNELS {
        return Err(Error::shape(
            "frame_forward",
            format!("frame must be L x 2, got {:?}", frame.shape),
        ));
    }
    if frame.shape[0] < KERNEL_LEN {
        return Err(Error::shape(
            "frame_forward",
            format!(
                "frame length {} shorter than kernel length {KERNEL_LEN}",
                frame.shape[0]
            ),
        ));
    }
    let pv = register_params(g, p, track_params);
    let input = if track_input {
        g.leaf(frame.clone())
    } else {
        g.constant(frame.clone())
    };
    let pooled = features(g, &pv.bb, input, attention)?;
    let normed = bn_inference(g, &pv.head, &p.bn, pooled)?;
    let logits = dense_head(g, &pv.head, normed)?;
    Ok(FrameVars {
        input,
        logits,
        params: pv,
    })
}

/// The modulation classifier.
#[derive(Debug, Clone)]
pub struct AmcNetwork {
    pub p: NetParams,
    pub meta: NetMeta,
}

impl AmcNetwork {
    /// Width-scaled geometry: conv and LSTM width 128 * width, first dense
    /// layer 256 * width.
    pub fn new(input_len: usize, num_classes: usize, width: f64, seed: u64) -> Result<Self> {
        Self::with_dims(
            input_len,
            num_classes,
            scaled(128, width),
            scaled(128, width),
            scaled(256, width),
            width,
            seed,
        )
    }

    pub fn with_dims(
        input_len: usize,
        num_classes: usize,
        conv_filters: usize,
        hidden: usize,
        dense_units: usize,
        width: f64,
        seed: u64,
    ) -> Result<Self> {
        if input_len < KERNEL_LEN {
            return Err(Error::InvalidArgument(format!(
                "input length {input_len} shorter than kernel length {KERNEL_LEN}"
            )));
        }
        if conv_filters != hidden {
            return Err(Error::InvalidArgument(
                "LSTM width must match convolution filter count".into(),
            ));
        }
        Ok(AmcNetwork {
            p: NetParams::init(conv_filters, hidden, dense_units, num_classes, seed),
            meta: NetMeta {
                arch: Arch::Amc,
                width,
                input_len,
                num_classes,
                seed,
            },
        })
    }

    /// Record a forward pass on `g`, returning graph handles.
    pub fn forward(
        &self,
        g: &mut Graph,
        frame: &Tensor,
        track_input: bool,
        track_params: bool,
    ) -> Result<FrameVars> {
        frame_forward(g, &self.p, false, frame, track_input, track_params)
    }

    /// Class probabilities for one frame (inference mode).
    pub fn predict(&self, frame: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, frame, false, false)?;
        let probs = g.softmax(vars.logits)?;
        Ok(g.value(probs).data.clone())
    }

    pub fn predict_label(&self, frame: &Tensor) -> Result<usize> {
        Ok(argmax(&self.predict(frame)?))
    }
}

/// The attack detector.
#[derive(Debug, Clone)]
pub struct DetectionNetwork {
    pub p: NetParams,
    pub meta: NetMeta,
}

impl DetectionNetwork {
    pub fn new(input_len: usize, width: f64, seed: u64) -> Result<Self> {
        if input_len < KERNEL_LEN {
            return Err(Error::InvalidArgument(format!(
                "input length {input_len} shorter than kernel length {KERNEL_LEN}"
            )));
        }
        let conv_filters = scaled(128, width);
        let hidden = conv_filters;
        let dense_units = scaled(256, width);
        Ok(DetectionNetwork {
            p: NetParams::init(conv_filters, hidden, dense_units, 1, seed),
            meta: NetMeta {
                arch: Arch::Detector,
                width,
                input_len,
                num_classes: 2,
                seed,
            },
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        frame: &Tensor,
        track_input: bool,
        track_params: bool,
    ) -> Result<FrameVars> {
        if frame.shape.first() != Some(&self.meta.input_len) {
            return Err(Error::shape(
                "detect_forward",
                format!(
                    "detector expects length {} frames, got {:?}",
                    self.meta.input_len, frame.shape
                ),
            ));
        }
        frame_forward(g, &self.p, true, frame, track_input, track_params)
    }

    /// Attack probability for one frame.
    pub fn predict(&self, frame: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, frame, false, false)?;
        let p = g.sigmoid(vars.logits);
        Ok(g.value(p).data[0])
    }

    /// Decision rule: attacked when the probability reaches 0.5.
    pub fn is_attacked(&self, frame: &Tensor) -> Result<bool> {
        Ok(self.predict(frame)? >= 0.5)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn bn_constants() -> (f64, f64) {
    (BN_MOMENTUM, BN_EPS)
}

#[cfg(test)]
mod tests;
