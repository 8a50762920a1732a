//! Elementwise, linear-algebra, reduction, and loss operations.

use super::{accumulate, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(
            op,
            format!("operand shapes {:?} and {:?} differ", a.shape, b.shape),
        ));
    }
    Ok(())
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction, writing into `out`.
fn softmax_rows(data: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            let e = (v - m).exp();
            *o = e;
            sum += e;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= sum;
        }
    }
}

impl Graph {
    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, op: Op) -> Result<Var> {
        same_shape(op_name, self.value(a), self.value(b))?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data: Vec<f64> = match &op {
            Op::Add(..) => va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect(),
            Op::Sub(..) => va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect(),
            Op::Mul(..) => va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
            _ => unreachable!(),
        };
        let shape = va.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push_node(Tensor::new(data, shape), op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.data.iter().map(|x| x * c).collect(), v.shape.clone());
        let needs = self.needs(a);
        self.push_node(t, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.data.iter().map(|x| x + c).collect(), v.shape.clone());
        let needs = self.needs(a);
        self.push_node(t, Op::AddScalar(a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.data.iter().map(|x| x.max(0.0)).collect(), v.shape.clone());
        let needs = self.needs(a);
        self.push_node(t, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(
            v.data.iter().map(|&x| stable_sigmoid(x)).collect(),
            v.shape.clone(),
        );
        let needs = self.needs(a);
        self.push_node(t, Op::Sigmoid(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.data.iter().map(|x| x.tanh()).collect(), v.shape.clone());
        let needs = self.needs(a);
        self.push_node(t, Op::Tanh(a), needs)
    }

    /// Matrix product. The left operand may be a vector (treated as one row,
    /// yielding a vector); the right operand must be a matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let (r, k) = va.rows_cols("matmul")?;
        if vb.shape.len() != 2 || vb.shape[0] != k {
            return Err(Error::shape(
                "matmul",
                format!("lhs {:?} incompatible with rhs {:?}", va.shape, vb.shape),
            ));
        }
        let c = vb.shape[1];
        let mut out = vec![0.0; r * c];
        matmul_acc(&va.data, &vb.data, r, k, c, &mut out);
        let shape = if va.shape.len() == 1 { vec![c] } else { vec![r, c] };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push_node(Tensor::new(out, shape), Op::MatMul(a, b), needs))
    }

    fn rowwise(&mut self, name: &'static str, m: Var, v: Var, op: Op) -> Result<Var> {
        let vm = self.value(m);
        let vv = self.value(v);
        let (r, c) = vm.rows_cols(name)?;
        if vv.shape.len() != 1 || vv.shape[0] != c {
            return Err(Error::shape(
                name,
                format!("matrix {:?} vs row vector {:?}", vm.shape, vv.shape),
            ));
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = vm.data[i * c + j];
                let y = vv.data[j];
                data.push(match &op {
                    Op::AddRow(..) => x + y,
                    Op::SubRow(..) => x - y,
                    Op::MulRow(..) => x * y,
                    _ => unreachable!(),
                });
            }
        }
        let shape = vm.shape.clone();
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push_node(Tensor::new(data, shape), op, needs))
    }

    /// Add a length-C vector to every row of an R x C matrix (bias add).
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        self.rowwise("add_row", m, v, Op::AddRow(m, v))
    }

    pub fn sub_row(&mut self, m: Var, v: Var) -> Result<Var> {
        self.rowwise("sub_row", m, v, Op::SubRow(m, v))
    }

    pub fn mul_row(&mut self, m: Var, v: Var) -> Result<Var> {
        self.rowwise("mul_row", m, v, Op::MulRow(m, v))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        let needs = self.needs(a);
        self.push_node(Tensor::scalar(s), Op::SumAll(a), needs)
    }

    /// Collapse a T x H sequence to a length-H vector by summing over time.
    pub fn sum_over_time(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (t, h) = v.rows_cols("sum_over_time")?;
        let mut out = vec![0.0; h];
        for row in v.data.chunks_exact(h) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let _ = t;
        let needs = self.needs(a);
        Ok(self.push_node(Tensor::vector(out), Op::SumOverTime(a), needs))
    }

    /// Row-wise softmax. A vector is treated as a single row.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.rows_cols("softmax")?;
        if c == 0 {
            return Err(Error::shape("softmax", "empty axis".to_string()));
        }
        let mut out = vec![0.0; r * c];
        softmax_rows(&v.data, r, c, &mut out);
        let shape = v.shape.clone();
        let needs = self.needs(a);
        Ok(self.push_node(Tensor::new(out, shape), Op::Softmax(a), needs))
    }

    /// Extract one element (by flat index) as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a);
        if index >= v.numel() {
            return Err(Error::shape(
                "select",
                format!("index {} out of range for {} elements", index, v.numel()),
            ));
        }
        let t = Tensor::scalar(v.data[index]);
        let needs = self.needs(a);
        Ok(self.push_node(t, Op::Select(a, index), needs))
    }

    /// Stack B length-H vectors into a B x H matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows", "no rows given".to_string()));
        }
        let h = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * h);
        let mut needs = false;
        for &r in rows {
            let v = self.value(r);
            if v.numel() != h {
                return Err(Error::shape(
                    "stack_rows",
                    format!("row sizes differ: {} vs {}", v.numel(), h),
                ));
            }
            data.extend_from_slice(&v.data);
            needs |= self.needs(r);
        }
        let t = Tensor::matrix(rows.len(), h, data);
        Ok(self.push_node(t, Op::StackRows(rows.to_vec()), needs))
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (b, m) = v.rows_cols("softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {} rows", labels.len(), b),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {m} classes"),
            ));
        }
        let mut probs = vec![0.0; b * m];
        let mut loss = 0.0;
        for (i, row) in v.data.chunks_exact(m).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            for (p, &z) in probs[i * m..(i + 1) * m].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        loss /= b as f64;
        let needs = self.needs(logits);
        Ok(self.push_node(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Mean binary cross-entropy on logits (numerically stable form).
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let v = self.value(logits);
        if v.numel() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} targets", v.numel(), targets.len()),
            ));
        }
        let n = targets.len() as f64;
        let loss = v
            .data
            .iter()
            .zip(targets)
            .map(|(&z, &p)| z.max(0.0) - z * p + (1.0 + (-z.abs()).exp()).ln())
            .sum::<f64>()
            / n;
        let needs = self.needs(logits);
        Ok(self.push_node(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Backward dispatch: add the contribution of node `idx` (with upstream
    /// adjoint `g`) into the adjoints of its inputs.
    pub(crate) fn propagate(&self, idx: usize, g: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b].iter() {
                    if self.needs(*v) {
                        let acc = accumulate(adjoint, v.0, g.len());
                        for (o, gi) in acc.iter_mut().zip(g) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    let acc = accumulate(adjoint, a.0, g.len());
                    for (o, gi) in acc.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                if self.needs(*b) {
                    let acc = accumulate(adjoint, b.0, g.len());
                    for (o, gi) in acc.iter_mut().zip(g) {
                        *o -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = &self.nodes[b.0].value.data;
                    let acc = accumulate(adjoint, a.0, g.len());
                    for ((o, gi), y) in acc.iter_mut().zip(g).zip(vb) {
                        *o += gi * y;
                    }
                }
                if self.needs(*b) {
                    let va = &self.nodes[a.0].value.data;
                    let acc = accumulate(adjoint, b.0, g.len());
                    for ((o, gi), x) in acc.iter_mut().zip(g).zip(va) {
                        *o += gi * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let acc = accumulate(adjoint, a.0, g.len());
                    for (o, gi) in acc.iter_mut().zip(g) {
                        *o += gi * c;
                    }
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    let acc = accumulate(adjoint, a.0, g.len());
                    for (o, gi) in acc.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let x = &self.nodes[a.0].value.data;
                    let acc = accumulate(adjoint, a.0, g.len());
                    for ((o, gi), &xi) in acc.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let y = &node.value.data;
                    let acc = accumulate(adjoint, a.0, g.len());
                    for ((o, gi), &yi) in acc.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let y = &node.value.data;
                    let acc = accumulate(adjoint, a.0, g.len());
                    for ((o, gi), &yi) in acc.iter_mut().zip(g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (r, k) = va.rows_cols("matmul").expect("checked at record time");
                let c = vb.shape[1];
                if self.needs(*a) {
                    // dA = G * B^T
                    let acc = accumulate(adjoint, a.0, r * k);
                    for i in 0..r {
                        for p in 0..k {
                            let mut s = 0.0;
                            let brow = &vb.data[p * c..(p + 1) * c];
                            let grow = &g[i * c..(i + 1) * c];
                            for (bv, gv) in brow.iter().zip(grow) {
                                s += bv * gv;
                            }
                            acc[i * k + p] += s;
                        }
                    }
                }
                if self.needs(*b) {
                    // dB = A^T * G
                    let acc = accumulate(adjoint, b.0, k * c);
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        for p in 0..k {
                            let aip = va.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let dst = &mut acc[p * c..(p + 1) * c];
                            for (o, gv) in dst.iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::AddRow(m, v) | Op::SubRow(m, v) | Op::MulRow(m, v) => {
                let sign = if matches!(node.op, Op::SubRow(..)) { -1.0 } else { 1.0 };
                let vm = &self.nodes[m.0].value;
                let (r, c) = vm.rows_cols("rowwise").expect("checked at record time");
                let is_mul = matches!(node.op, Op::MulRow(..));
                if self.needs(*m) {
                    let vv = &self.nodes[v.0].value.data;
                    let acc = accumulate(adjoint, m.0, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            let gi = g[i * c + j];
                            acc[i * c + j] += if is_mul { gi * vv[j] } else { gi };
                        }
                    }
                }
                if self.needs(*v) {
                    let acc = accumulate(adjoint, v.0, c);
                    if is_mul {
                        let md = &vm.data;
                        for i in 0..r {
                            for j in 0..c {
                                acc[j] += g[i * c + j] * md[i * c + j];
                            }
                        }
                    } else {
                        for i in 0..r {
                            for j in 0..c {
                                acc[j] += sign * g[i * c + j];
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].value.numel();
                    let acc = accumulate(adjoint, a.0, n);
                    for o in acc.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::SumOverTime(a) => {
                if self.needs(*a) {
                    let va = &self.nodes[a.0].value;
                    let (t, h) = va.rows_cols("sum_over_time").expect("checked");
                    let acc = accumulate(adjoint, a.0, t * h);
                    for row in acc.chunks_exact_mut(h) {
                        for (o, gi) in row.iter_mut().zip(g) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = &node.value;
                    let (r, c) = y.rows_cols("softmax").expect("checked");
                    let acc = accumulate(adjoint, a.0, r * c);
                    for i in 0..r {
                        let yr = &y.data[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..c {
                            acc[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Select(a, index) => {
                if self.needs(*a) {
                    let n = self.nodes[a.0].value.numel();
                    let acc = accumulate(adjoint, a.0, n);
                    acc[*index] += g[0];
                }
            }
            Op::StackRows(rows) => {
                let h = self.nodes[rows[0].0].value.numel();
                for (f, &r) in rows.iter().enumerate() {
                    if self.needs(r) {
                        let acc = accumulate(adjoint, r.0, h);
                        for (o, gi) in acc.iter_mut().zip(&g[f * h..(f + 1) * h]) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let b = labels.len();
                    let m = probs.len() / b;
                    let scale = g[0] / b as f64;
                    let acc = accumulate(adjoint, logits.0, b * m);
                    for i in 0..b {
                        for j in 0..m {
                            let indicator = if j == labels[i] { 1.0 } else { 0.0 };
                            acc[i * m + j] += scale * (probs[i * m + j] - indicator);
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if self.needs(*logits) {
                    let z = &self.nodes[logits.0].value.data;
                    let scale = g[0] / targets.len() as f64;
                    let acc = accumulate(adjoint, logits.0, z.len());
                    for ((o, &zi), &pi) in acc.iter_mut().zip(z).zip(targets) {
                        *o += scale * (stable_sigmoid(zi) - pi);
                    }
                }
            }
            Op::Conv1d { x, w, b } => self.conv1d_backward(*x, *w, *b, g, adjoint),
            Op::Lstm { x, gates, cache } => self.lstm_backward(*x, gates, cache, g, adjoint),
            Op::SelfAttention { x, cache } => self.attention_backward(*x, cache, g, adjoint),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                cache,
            } => self.batchnorm_backward(*x, *gamma, *beta, cache, g, adjoint),
        }
    }
}

/// C += A(r x k) * B(k x c), accumulating over the inner dimension with a
/// contiguous inner loop so LLVM can vectorize it.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], r: usize, k: usize, c: usize, out: &mut [f64]) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
