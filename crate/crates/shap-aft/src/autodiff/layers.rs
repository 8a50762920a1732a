//! Network layers recorded as single tape nodes with hand-derived backward
//! passes: valid 1-D convolution, LSTM over the full sequence, scaled
//! dot-product self-attention, and training-mode batch normalization.

use super::ops::{matmul_acc, stable_sigmoid};
use super::{accumulate, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gate parameter handles in fixed order: input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmGateVars {
    pub w: [Var; 4],
    pub u: [Var; 4],
    pub b: [Var; 4],
}

/// Per-step activations saved by the LSTM forward pass for backpropagation
/// through time. All arrays are T x H, flattened row-major.
pub struct LstmCache {
    pub(crate) i: Vec<f64>,
    pub(crate) f: Vec<f64>,
    pub(crate) g: Vec<f64>,
    pub(crate) o: Vec<f64>,
    pub(crate) c: Vec<f64>,
    pub(crate) tanh_c: Vec<f64>,
}

/// Softmax attention weights saved for the backward pass (T x T).
pub struct AttnCache {
    pub(crate) weights: Vec<f64>,
}

/// Batch statistics and normalized activations saved by training-mode
/// batch normalization.
pub struct BnCache {
    pub(crate) xhat: Vec<f64>,
    pub(crate) inv_std: Vec<f64>,
    pub(crate) mean: Vec<f64>,
    pub(crate) var: Vec<f64>,
}

impl Graph {
    /// Valid (no padding) 1-D convolution.
    ///
    /// `x` is T x C_in, `w` is C_out x K x C_in, `b` is length C_out.
    /// Output row t is the affine map of input rows t..t+K-1, giving
    /// (T-K+1) x C_out.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        if vx.shape.len() != 2 {
            return Err(Error::shape(
                "conv1d",
                format!("input must be T x C_in, got {:?}", vx.shape),
            ));
        }
        if vw.shape.len() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("weights must be C_out x K x C_in, got {:?}", vw.shape),
            ));
        }
        let (t, c_in) = (vx.shape[0], vx.shape[1]);
        let (c_out, k, wc_in) = (vw.shape[0], vw.shape[1], vw.shape[2]);
        if wc_in != c_in {
            return Err(Error::shape(
                "conv1d",
                format!("input has {c_in} channels but kernels expect {wc_in}"),
            ));
        }
        if vb.shape != [c_out] {
            return Err(Error::shape(
                "conv1d",
                format!("bias shape {:?} != [{c_out}]", vb.shape),
            ));
        }
        if t < k {
            return Err(Error::shape(
                "conv1d",
                format!("sequence length {t} shorter than kernel length {k}"),
            ));
        }
        let t_out = t - k + 1;
        let mut out = vec![0.0; t_out * c_out];
        for ti in 0..t_out {
            let orow = &mut out[ti * c_out..(ti + 1) * c_out];
            orow.copy_from_slice(&vb.data);
            for kk in 0..k {
                let xrow = &vx.data[(ti + kk) * c_in..(ti + kk + 1) * c_in];
                for (co, ov) in orow.iter_mut().enumerate() {
                    let wrow = &vw.data[(co * k + kk) * c_in..(co * k + kk + 1) * c_in];
                    let mut s = 0.0;
                    for (wv, xv) in wrow.iter().zip(xrow) {
                        s += wv * xv;
                    }
                    *ov += s;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push_node(
            Tensor::matrix(t_out, c_out, out),
            Op::Conv1d { x, w, b },
            needs,
        ))
    }

    pub(crate) fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        g: &[f64],
        adjoint: &mut [Option<Vec<f64>>],
    ) {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        let (t, c_in) = (vx.shape[0], vx.shape[1]);
        let (c_out, k) = (vw.shape[0], vw.shape[1]);
        let t_out = t - k + 1;

        if self.needs(x) {
            let acc = accumulate(adjoint, x.0, t * c_in);
            for ti in 0..t_out {
                let grow = &g[ti * c_out..(ti + 1) * c_out];
                for kk in 0..k {
                    let arow = &mut acc[(ti + kk) * c_in..(ti + kk + 1) * c_in];
                    for (co, &gv) in grow.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let wrow = &vw.data[(co * k + kk) * c_in..(co * k + kk + 1) * c_in];
                        for (av, &wv) in arow.iter_mut().zip(wrow) {
                            *av += gv * wv;
                        }
                    }
                }
            }
        }
        if self.needs(w) {
            let acc = accumulate(adjoint, w.0, c_out * k * c_in);
            for ti in 0..t_out {
                let grow = &g[ti * c_out..(ti + 1) * c_out];
                for kk in 0..k {
                    let xrow = &vx.data[(ti + kk) * c_in..(ti + kk + 1) * c_in];
                    for (co, &gv) in grow.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let arow = &mut acc[(co * k + kk) * c_in..(co * k + kk + 1) * c_in];
                        for (av, &xv) in arow.iter_mut().zip(xrow) {
                            *av += gv * xv;
                        }
                    }
                }
            }
        }
        if self.needs(b) {
            let acc = accumulate(adjoint, b.0, c_out);
            for grow in g.chunks_exact(c_out) {
                for (av, &gv) in acc.iter_mut().zip(grow) {
                    *av += gv;
                }
            }
        }
    }

    /// Single-layer LSTM with zero initial state, returning the hidden state
    /// of every time step (T x H). Gate order is input, forget, candidate,
    /// output with sigmoid/sigmoid/tanh/sigmoid activations.
    ///
    /// `x` is T x C; each `w` gate matrix is C x H, each `u` is H x H, each
    /// bias has length H. Errors if any step produces a non-finite hidden or
    /// cell state, which signals exploding weights.
    pub fn lstm(&mut self, x: Var, gates: LstmGateVars) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape.len() != 2 {
            return Err(Error::shape(
                "lstm",
                format!("input must be T x C, got {:?}", vx.shape),
            ));
        }
        let (t, c) = (vx.shape[0], vx.shape[1]);
        let h = self.value(gates.w[0]).shape.get(1).copied().unwrap_or(0);
        for gi in 0..4 {
            if self.value(gates.w[gi]).shape != [c, h] {
                return Err(Error::shape(
                    "lstm",
                    format!(
                        "gate {gi} input weights {:?}, expected [{c}, {h}]",
                        self.value(gates.w[gi]).shape
                    ),
                ));
            }
            if self.value(gates.u[gi]).shape != [h, h] {
                return Err(Error::shape(
                    "lstm",
                    format!(
                        "gate {gi} recurrent weights {:?}, expected [{h}, {h}]",
                        self.value(gates.u[gi]).shape
                    ),
                ));
            }
            if self.value(gates.b[gi]).shape != [h] {
                return Err(Error::shape(
                    "lstm",
                    format!(
                        "gate {gi} bias {:?}, expected [{h}]",
                        self.value(gates.b[gi]).shape
                    ),
                ));
            }
        }

        let mut cache = Box::new(LstmCache {
            i: vec![0.0; t * h],
            f: vec![0.0; t * h],
            g: vec![0.0; t * h],
            o: vec![0.0; t * h],
            c: vec![0.0; t * h],
            tanh_c: vec![0.0; t * h],
        });
        let mut out = vec![0.0; t * h];
        let mut pre = vec![0.0; 4 * h];

        for ti in 0..t {
            let xrow = &self.nodes[x.0].value.data[ti * c..(ti + 1) * c];
            pre.iter_mut().for_each(|v| *v = 0.0);
            for gi in 0..4 {
                let dst = &mut pre[gi * h..(gi + 1) * h];
                dst.copy_from_slice(&self.nodes[gates.b[gi].0].value.data);
                matmul_acc(xrow, &self.nodes[gates.w[gi].0].value.data, 1, c, h, dst);
                if ti > 0 {
                    let hprev = &out[(ti - 1) * h..ti * h];
                    matmul_acc(hprev, &self.nodes[gates.u[gi].0].value.data, 1, h, h, dst);
                }
            }
            let mut finite = true;
            for j in 0..h {
                let iv = stable_sigmoid(pre[j]);
                let fv = stable_sigmoid(pre[h + j]);
                let gv = pre[2 * h + j].tanh();
                let ov = stable_sigmoid(pre[3 * h + j]);
                let c_prev = if ti > 0 { cache.c[(ti - 1) * h + j] } else { 0.0 };
                let cv = fv * c_prev + iv * gv;
                let tc = cv.tanh();
                let hv = ov * tc;
                let at = ti * h + j;
                cache.i[at] = iv;
                cache.f[at] = fv;
                cache.g[at] = gv;
                cache.o[at] = ov;
                cache.c[at] = cv;
                cache.tanh_c[at] = tc;
                out[at] = hv;
                finite &= cv.is_finite() && hv.is_finite();
            }
            if !finite {
                return Err(Error::NonFinite(format!("lstm state at step {ti}")));
            }
        }

        let needs = self.needs(x)
            || gates.w.iter().any(|&v| self.needs(v))
            || gates.u.iter().any(|&v| self.needs(v))
            || gates.b.iter().any(|&v| self.needs(v));
        Ok(self.push_node(
            Tensor::matrix(t, h, out),
            Op::Lstm { x, gates, cache },
            needs,
        ))
    }

    pub(crate) fn lstm_backward(
        &self,
        x: Var,
        gates: &LstmGateVars,
        cache: &LstmCache,
        g_out: &[f64],
        adjoint: &mut [Option<Vec<f64>>],
    ) {
        let vx = &self.nodes[x.0].value;
        let (t, c) = (vx.shape[0], vx.shape[1]);
        let h = self.nodes[gates.b[0].0].value.numel();
        let out = {
            // Hidden sequence equals this node's forward value; reconstruct
            // h_{t-1} rows from o and tanh_c to avoid threading the node id.
            let mut o = vec![0.0; t * h];
            for idx in 0..t * h {
                o[idx] = cache.o[idx] * cache.tanh_c[idx];
            }
            o
        };

        let needs_x = self.needs(x);
        let needs_w: Vec<bool> = gates.w.iter().map(|&v| self.needs(v)).collect();
        let needs_u: Vec<bool> = gates.u.iter().map(|&v| self.needs(v)).collect();
        let needs_b: Vec<bool> = gates.b.iter().map(|&v| self.needs(v)).collect();

        let mut dw = vec![vec![0.0; c * h]; 4];
        let mut du = vec![vec![0.0; h * h]; 4];
        let mut db = vec![vec![0.0; h]; 4];
        let mut dx = vec![0.0; if needs_x { t * c } else { 0 }];

        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut da = vec![0.0; 4 * h];

        for ti in (0..t).rev() {
            for j in 0..h {
                let at = ti * h + j;
                let dh = g_out[at] + dh_next[j];
                let (iv, fv, gv, ov) = (cache.i[at], cache.f[at], cache.g[at], cache.o[at]);
                let tc = cache.tanh_c[at];
                let dct = dh * ov * (1.0 - tc * tc) + dc_next[j];
                let c_prev = if ti > 0 { cache.c[(ti - 1) * h + j] } else { 0.0 };
                da[j] = dct * gv * iv * (1.0 - iv);
                da[h + j] = dct * c_prev * fv * (1.0 - fv);
                da[2 * h + j] = dct * iv * (1.0 - gv * gv);
                da[3 * h + j] = dh * tc * ov * (1.0 - ov);
                dc_next[j] = dct * fv;
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);

            let xrow = &vx.data[ti * c..(ti + 1) * c];
            for gi in 0..4 {
                let dag = &da[gi * h..(gi + 1) * h];
                if needs_w[gi] {
                    let dwg = &mut dw[gi];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let row = &mut dwg[ci * h..(ci + 1) * h];
                        for (o, &d) in row.iter_mut().zip(dag) {
                            *o += xv * d;
                        }
                    }
                }
                if ti > 0 && needs_u[gi] {
                    let hprev = &out[(ti - 1) * h..ti * h];
                    let dug = &mut du[gi];
                    for (hi, &hv) in hprev.iter().enumerate() {
                        if hv == 0.0 {
                            continue;
                        }
                        let row = &mut dug[hi * h..(hi + 1) * h];
                        for (o, &d) in row.iter_mut().zip(dag) {
                            *o += hv * d;
                        }
                    }
                }
                if needs_b[gi] {
                    for (o, &d) in db[gi].iter_mut().zip(dag) {
                        *o += d;
                    }
                }
                if needs_x {
                    // dx_t += da_g * W_g^T
                    let wg = &self.nodes[gates.w[gi].0].value.data;
                    let dst = &mut dx[ti * c..(ti + 1) * c];
                    for (ci, o) in dst.iter_mut().enumerate() {
                        let wrow = &wg[ci * h..(ci + 1) * h];
                        let mut s = 0.0;
                        for (&wv, &d) in wrow.iter().zip(dag) {
                            s += wv * d;
                        }
                        *o += s;
                    }
                }
                if ti > 0 {
                    // dh_{t-1} += da_g * U_g^T
                    let ug = &self.nodes[gates.u[gi].0].value.data;
                    for (hi, o) in dh_next.iter_mut().enumerate() {
                        let urow = &ug[hi * h..(hi + 1) * h];
                        let mut s = 0.0;
                        for (&uv, &d) in urow.iter().zip(dag) {
                            s += uv * d;
                        }
                        *o += s;
                    }
                }
            }
        }

        if needs_x {
            let acc = accumulate(adjoint, x.0, t * c);
            for (o, d) in acc.iter_mut().zip(&dx) {
                *o += d;
            }
        }
        for gi in 0..4 {
            if needs_w[gi] {
                let acc = accumulate(adjoint, gates.w[gi].0, c * h);
                for (o, d) in acc.iter_mut().zip(&dw[gi]) {
                    *o += d;
                }
            }
            if needs_u[gi] {
                let acc = accumulate(adjoint, gates.u[gi].0, h * h);
                for (o, d) in acc.iter_mut().zip(&du[gi]) {
                    *o += d;
                }
            }
            if needs_b[gi] {
                let acc = accumulate(adjoint, gates.b[gi].0, h);
                for (o, d) in acc.iter_mut().zip(&db[gi]) {
                    *o += d;
                }
            }
        }
    }

    /// Single-head scaled dot-product self-attention where query, key, and
    /// value all equal the input sequence. The weight matrix is the row-wise
    /// softmax of X X^T / sqrt(H); output is weights * X.
    pub fn self_attention(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape.len() != 2 {
            return Err(Error::shape(
                "self_attention",
                format!("input must be T x H, got {:?}", vx.shape),
            ));
        }
        let (t, h) = (vx.shape[0], vx.shape[1]);
        let scale = 1.0 / (h as f64).sqrt();
        let mut scores = vec![0.0; t * t];
        for i in 0..t {
            let xi = &vx.data[i * h..(i + 1) * h];
            for j in 0..t {
                let xj = &vx.data[j * h..(j + 1) * h];
                let mut s = 0.0;
                for (a, b) in xi.iter().zip(xj) {
                    s += a * b;
                }
                scores[i * t + j] = s * scale;
            }
        }
        let mut weights = vec![0.0; t * t];
        for i in 0..t {
            let row = &scores[i * t..(i + 1) * t];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (wv, &sv) in weights[i * t..(i + 1) * t].iter_mut().zip(row) {
                let e = (sv - m).exp();
                *wv = e;
                sum += e;
            }
            for wv in &mut weights[i * t..(i + 1) * t] {
                *wv /= sum;
            }
        }
        let mut out = vec![0.0; t * h];
        matmul_acc(&weights, &vx.data, t, t, h, &mut out);
        let needs = self.needs(x);
        Ok(self.push_node(
            Tensor::matrix(t, h, out),
            Op::SelfAttention {
                x,
                cache: Box::new(AttnCache { weights }),
            },
            needs,
        ))
    }

    pub(crate) fn attention_backward(
        &self,
        x: Var,
        cache: &AttnCache,
        g: &[f64],
        adjoint: &mut [Option<Vec<f64>>],
    ) {
        if !self.needs(x) {
            return;
        }
        let vx = &self.nodes[x.0].value;
        let (t, h) = (vx.shape[0], vx.shape[1]);
        let scale = 1.0 / (h as f64).sqrt();
        let m = &cache.weights;

        // Value path: dX += M^T G.
        let mut dx = vec![0.0; t * h];
        for i in 0..t {
            let grow = &g[i * h..(i + 1) * h];
            for j in 0..t {
                let mij = m[i * t + j];
                if mij == 0.0 {
                    continue;
                }
                let dst = &mut dx[j * h..(j + 1) * h];
                for (o, &gv) in dst.iter_mut().zip(grow) {
                    *o += mij * gv;
                }
            }
        }

        // Score path: dM = G X^T, then softmax backward to dS.
        let mut ds = vec![0.0; t * t];
        for i in 0..t {
            let grow = &g[i * h..(i + 1) * h];
            let mrow = &m[i * t..(i + 1) * t];
            let dm_row = &mut ds[i * t..(i + 1) * t];
            for j in 0..t {
                let xj = &vx.data[j * h..(j + 1) * h];
                let mut s = 0.0;
                for (&gv, &xv) in grow.iter().zip(xj) {
                    s += gv * xv;
                }
                dm_row[j] = s;
            }
            let dot: f64 = dm_row.iter().zip(mrow).map(|(d, w)| d * w).sum();
            for (d, &w) in dm_row.iter_mut().zip(mrow) {
                *d = w * (*d - dot);
            }
        }

        // Query and key paths: dX += scale * (dS + dS^T) X.
        for i in 0..t {
            let dst = &mut dx[i * h..(i + 1) * h];
            for j in 0..t {
                let coeff = scale * (ds[i * t + j] + ds[j * t + i]);
                if coeff == 0.0 {
                    continue;
                }
                let xj = &vx.data[j * h..(j + 1) * h];
                for (o, &xv) in dst.iter_mut().zip(xj) {
                    *o += coeff * xv;
                }
            }
        }

        let acc = accumulate(adjoint, x.0, t * h);
        for (o, d) in acc.iter_mut().zip(&dx) {
            *o += d;
        }
    }

    /// Training-mode batch normalization over the batch dimension of a
    /// B x H matrix, using biased batch variance. Gradients flow through the
    /// batch statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let (b, h) = vx.rows_cols("batchnorm_train")?;
        if self.value(gamma).shape != [h] || self.value(beta).shape != [h] {
            return Err(Error::shape(
                "batchnorm_train",
                format!(
                    "scale/shift must be [{h}], got {:?} and {:?}",
                    self.value(gamma).shape,
                    self.value(beta).shape
                ),
            ));
        }
        let bf = b as f64;
        let mut mean = vec![0.0; h];
        for row in vx.data.chunks_exact(h) {
            for (mv, &xv) in mean.iter_mut().zip(row) {
                *mv += xv;
            }
        }
        mean.iter_mut().for_each(|v| *v /= bf);
        let mut var = vec![0.0; h];
        for row in vx.data.chunks_exact(h) {
            for ((vv, &xv), &mv) in var.iter_mut().zip(row).zip(&mean) {
                let d = xv - mv;
                *vv += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= bf);
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        let vgamma = &self.nodes[gamma.0].value.data;
        let vbeta = &self.nodes[beta.0].value.data;
        let mut xhat = vec![0.0; b * h];
        let mut out = vec![0.0; b * h];
        for (bi, row) in vx.data.chunks_exact(h).enumerate() {
            for j in 0..h {
                let xh = (row[j] - mean[j]) * inv_std[j];
                xhat[bi * h + j] = xh;
                out[bi * h + j] = vgamma[j] * xh + vbeta[j];
            }
        }
        let shape = vx.shape.clone();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push_node(
            Tensor::new(out, shape),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                cache: Box::new(BnCache {
                    xhat,
                    inv_std,
                    mean,
                    var,
                }),
            },
            needs,
        ))
    }

    pub(crate) fn batchnorm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        cache: &BnCache,
        g: &[f64],
        adjoint: &mut [Option<Vec<f64>>],
    ) {
        let vx = &self.nodes[x.0].value;
        let (b, h) = vx.rows_cols("batchnorm_train").expect("checked");
        let bf = b as f64;
        let vgamma = &self.nodes[gamma.0].value.data;

        if self.needs(beta) {
            let acc = accumulate(adjoint, beta.0, h);
            for grow in g.chunks_exact(h) {
                for (o, &gv) in acc.iter_mut().zip(grow) {
                    *o += gv;
                }
            }
        }
        if self.needs(gamma) {
            let acc = accumulate(adjoint, gamma.0, h);
            for (bi, grow) in g.chunks_exact(h).enumerate() {
                for (j, (o, &gv)) in acc.iter_mut().zip(grow).enumerate() {
                    *o += gv * cache.xhat[bi * h + j];
                }
            }
        }
        if self.needs(x) {
            // dxhat = g * gamma; dx = inv_std/B * (B dxhat - sum(dxhat)
            //         - xhat * sum(dxhat . xhat))
            let mut sum_dxhat = vec![0.0; h];
            let mut sum_dxhat_xhat = vec![0.0; h];
            for (bi, grow) in g.chunks_exact(h).enumerate() {
                for j in 0..h {
                    let dxh = grow[j] * vgamma[j];
                    sum_dxhat[j] += dxh;
                    sum_dxhat_xhat[j] += dxh * cache.xhat[bi * h + j];
                }
            }
            let acc = accumulate(adjoint, x.0, b * h);
            for bi in 0..b {
                for j in 0..h {
                    let dxh = g[bi * h + j] * vgamma[j];
                    let term = bf * dxh - sum_dxhat[j] - cache.xhat[bi * h + j] * sum_dxhat_xhat[j];
                    acc[bi * h + j] += cache.inv_std[j] / bf * term;
                }
            }
        }
    }
}
