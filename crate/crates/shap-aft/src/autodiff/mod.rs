//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Graph`] owns every intermediate value of one computation. Operations
//! are recorded eagerly: each call computes the forward value and appends a
//! node referencing its inputs by index, so the tape is a DAG by
//! construction and reverse iteration is a valid topological order.
//! [`Graph::backward`] seeds a scalar output with gradient 1 and accumulates
//! exact derivatives into every reachable node, including leaves that hold
//! network inputs. Input gradients are first-class because attack synthesis
//! and attribution differentiate with respect to the received signal, not
//! just the weights.
//!
//! The layer set is exactly what the two classifier networks need:
//! valid 1-D convolution, a single LSTM layer returning the full sequence,
//! scaled dot-product self-attention, batch normalization, dense affine
//! maps, the usual activations, and fused classification losses. Large
//! layers are recorded as single nodes with hand-derived backward passes;
//! all of them are validated against central finite differences in the
//! test suite.

mod layers;
mod ops;

pub use layers::{AttnCache, BnCache, LstmCache, LstmGateVars};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    SumAll(Var),
    SumOverTime(Var),
    Softmax(Var),
    Select(Var, usize),
    StackRows(Vec<Var>),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Lstm {
        x: Var,
        gates: LstmGateVars,
        cache: Box<LstmCache>,
    },
    SelfAttention {
        x: Var,
        cache: Box<AttnCache>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: Box<BnCache>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub op: Op,
    pub needs_grad: bool,
}

/// A recorded computation: values, operations, and (after backward) gradients.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push(value, op, needs_grad)
    }

    /// Differentiable input: gradients are accumulated here by `backward`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable input; backward skips anything only it feeds.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of `v`, zero-filled if backward never reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(g.clone(), node.value.shape.clone()),
            None => Tensor::zeros(&node.value.shape),
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Batch statistics (mean, biased variance) recorded by a training-mode
    /// batch normalization node; used to update running estimates.
    pub fn batchnorm_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNormTrain { cache, .. } => Some((&cache.mean, &cache.var)),
            _ => None,
        }
    }

    /// Reverse pass from a scalar loss, seeding its gradient with 1.
    ///
    /// Gradients accumulate across repeated calls until `zero_grads`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape
                ),
            ));
        }
        self.backward_seeded(loss, &[1.0])
    }

    /// Reverse pass seeding `out` with an arbitrary adjoint of matching size.
    pub fn backward_seeded(&mut self, out: Var, seed: &[f64]) -> Result<()> {
        let n_out = self.nodes[out.0].value.numel();
        if seed.len() != n_out {
            return Err(Error::shape(
                "backward_seeded",
                format!("seed length {} != output numel {}", seed.len(), n_out),
            ));
        }
        if !self.nodes[out.0].needs_grad {
            return Ok(());
        }

        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoint[out.0] = Some(seed.to_vec());
        let mut settled: Vec<(usize, Vec<f64>)> = Vec::new();

        for idx in (0..=out.0).rev() {
            let Some(g) = adjoint[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut adjoint);
            settled.push((idx, g));
        }

        for (idx, g) in settled {
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        *a += gi;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

pub(crate) fn accumulate<'a>(
    adjoint: &'a mut [Option<Vec<f64>>],
    idx: usize,
    numel: usize,
) -> &'a mut [f64] {
    adjoint[idx]
        .get_or_insert_with(|| vec![0.0; numel])
        .as_mut_slice()
}

#[cfg(test)]
mod tests;
