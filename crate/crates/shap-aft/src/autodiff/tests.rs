use super::*;
use crate::gradcheck::{finite_diff_grad, max_rel_err, FD_STEP, FD_TOL};
use crate::seeds::rng_from;
use crate::tensor::Tensor;
use rand::Rng;

fn random_tensor(shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape.to_vec())
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
    let s = g.sum_all(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data, vec![1.0, 1.0, 1.0]);
}

#[test]
fn elementwise_product_grads_swap() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![2.0, 3.0]));
    let y = g.leaf(Tensor::vector(vec![5.0, 7.0]));
    let p = g.mul(x, y).unwrap();
    let s = g.sum_all(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data, vec![5.0, 7.0]);
    assert_eq!(g.grad(y).data, vec![2.0, 3.0]);
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 1.0]));
    let s = g.sum_all(x);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data, vec![2.0, 2.0]);
    g.zero_grads();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data, vec![1.0, 1.0]);
}

#[test]
fn ignored_coordinate_has_exactly_zero_grad() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![0.3, -0.4, 0.9]));
    let first = g.select(x, 0).unwrap();
    let t = g.tanh(first);
    g.backward(t).unwrap();
    let grad = g.grad(x);
    assert_ne!(grad.data[0], 0.0);
    assert_eq!(grad.data[1], 0.0);
    assert_eq!(grad.data[2], 0.0);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = rng_from(7);
    let mut g = Graph::new();
    let x = g.leaf(random_tensor(&[7, 4], &mut rng));
    let y = g.softmax(x).unwrap();
    for row in g.value(y).data.chunks_exact(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_on_empty_axis_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![], vec![0]));
    assert!(g.softmax(x).is_err());
}

#[test]
fn sum_over_time_of_identical_rows() {
    let mut g = Graph::new();
    let row = [0.5, -1.5, 2.0];
    let data: Vec<f64> = row.iter().cycle().take(12).cloned().collect();
    let x = g.leaf(Tensor::matrix(4, 3, data));
    let s = g.sum_over_time(x).unwrap();
    for (a, b) in g.value(s).data.iter().zip(row.iter()) {
        assert!((a - 4.0 * b).abs() < 1e-12);
    }
}

#[test]
fn conv1d_kernel_of_one_is_identity() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::matrix(5, 1, vec![1.0, -2.0, 3.0, 0.5, 4.0]));
    let w = g.leaf(Tensor::new(vec![1.0], vec![1, 1, 1]));
    let b = g.leaf(Tensor::vector(vec![0.0]));
    let y = g.conv1d(x, w, b).unwrap();
    assert_eq!(g.value(y).data, vec![1.0, -2.0, 3.0, 0.5, 4.0]);
}

#[test]
fn conv1d_output_shape_matches_valid_convolution() {
    let mut rng = rng_from(3);
    let mut g = Graph::new();
    let x = g.leaf(random_tensor(&[128, 2], &mut rng));
    let w = g.leaf(random_tensor(&[128, 8, 2], &mut rng));
    let b = g.leaf(random_tensor(&[128], &mut rng));
    let y = g.conv1d(x, w, b).unwrap();
    assert_eq!(g.value(y).shape, vec![121, 128]);
}

#[test]
fn conv1d_rejects_short_input() {
    let mut rng = rng_from(4);
    let mut g = Graph::new();
    let x = g.leaf(random_tensor(&[3, 2], &mut rng));
    let w = g.leaf(random_tensor(&[4, 8, 2], &mut rng));
    let b = g.leaf(random_tensor(&[4], &mut rng));
    assert!(g.conv1d(x, w, b).is_err());
}

#[test]
fn lstm_zero_weights_and_input_give_zero_output() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[6, 3]));
    let gates = LstmGateVars {
        w: core::array::from_fn(|_| g.leaf(Tensor::zeros(&[3, 4]))),
        u: core::array::from_fn(|_| g.leaf(Tensor::zeros(&[4, 4]))),
        b: core::array::from_fn(|_| g.leaf(Tensor::zeros(&[4]))),
    };
    let y = g.lstm(x, gates).unwrap();
    assert!(g.value(y).data.iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_full_sequence_shape() {
    let mut rng = rng_from(5);
    let mut g = Graph::new();
    let x = g.leaf(random_tensor(&[121, 128], &mut rng));
    let scale = 0.05;
    let mk = |g: &mut Graph, shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
        let mut t = random_tensor(shape, rng);
        t.data.iter_mut().for_each(|v| *v *= scale);
        g.leaf(t)
    };
    let gates = LstmGateVars {
        w: core::array::from_fn(|_| mk(&mut g, &[128, 128], &mut rng)),
        u: core::array::from_fn(|_| mk(&mut g, &[128, 128], &mut rng)),
        b: core::array::from_fn(|_| mk(&mut g, &[128], &mut rng)),
    };
    let y = g.lstm(x, gates).unwrap();
    assert_eq!(g.value(y).shape, vec![121, 128]);
}

#[test]
fn lstm_detects_non_finite_state() {
    // Gates saturate, so plain overflow cannot explode the state; the check
    // exists to catch NaN weights left behind by diverged training.
    let mut g = Graph::new();
    let x = g.leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]));
    let gates = LstmGateVars {
        w: core::array::from_fn(|_| g.leaf(Tensor::matrix(1, 2, vec![f64::NAN, 0.0]))),
        u: core::array::from_fn(|_| g.leaf(Tensor::zeros(&[2, 2]))),
        b: core::array::from_fn(|_| g.leaf(Tensor::zeros(&[2]))),
    };
    let r = g.lstm(x, gates);
    assert!(matches!(r, Err(crate::error::Error::NonFinite(_))));
}

#[test]
fn self_attention_single_step_passes_value_through() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::matrix(1, 3, vec![0.2, -0.7, 1.1]));
    let y = g.self_attention(x).unwrap();
    assert_eq!(g.value(y).data, vec![0.2, -0.7, 1.1]);
}

#[test]
fn self_attention_weight_rows_sum_to_one() {
    let mut rng = rng_from(11);
    let mut g = Graph::new();
    let x = g.leaf(random_tensor(&[7, 4], &mut rng));
    let y = g.self_attention(x).unwrap();
    match &g.nodes[y.0].op {
        Op::SelfAttention { cache, .. } => {
            for row in cache.weights.chunks_exact(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        _ => panic!("expected attention node"),
    }
}

#[test]
fn batchnorm_constant_batch_collapses_to_shift() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::matrix(4, 2, vec![3.0, -1.0].repeat(4)));
    let gamma = g.leaf(Tensor::vector(vec![2.0, 2.0]));
    let beta = g.leaf(Tensor::vector(vec![0.25, -0.75]));
    let y = g.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
    // Variance is zero, so the normalized value is zero and only the shift
    // survives.
    for row in g.value(y).data.chunks_exact(2) {
        assert!((row[0] - 0.25).abs() < 1e-9);
        assert!((row[1] + 0.75).abs() < 1e-9);
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = rng_from(23);
    let x_t = random_tensor(&[9, 2], &mut rng);
    let w_t = random_tensor(&[5, 3, 2], &mut rng);
    let b_t = random_tensor(&[5], &mut rng);
    let run = || {
        let mut g = Graph::new();
        let x = g.leaf(x_t.clone());
        let w = g.leaf(w_t.clone());
        let b = g.leaf(b_t.clone());
        let c = g.conv1d(x, w, b).unwrap();
        let a = g.self_attention(c).unwrap();
        let s = g.sum_over_time(a).unwrap();
        let soft = g.softmax(s).unwrap();
        g.value(soft).data.clone()
    };
    assert_eq!(run(), run());
}

// Finite-difference checks. Each closure rebuilds the graph from a flat
// parameter vector so the oracle only exercises forward passes.

fn fd_check<F>(x0: &[f64], mut eval: F, analytic: &[f64])
where
    F: FnMut(&[f64]) -> f64,
{
    let numeric = finite_diff_grad(&mut eval, x0, FD_STEP);
    let err = max_rel_err(analytic, &numeric);
    assert!(
        err < FD_TOL,
        "finite-difference mismatch: max rel err {err:.3e}"
    );
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    let mut rng = rng_from(31);
    let x0 = random_tensor(&[10, 2], &mut rng);
    let w0 = random_tensor(&[3, 4, 2], &mut rng);
    let b0 = random_tensor(&[3], &mut rng);

    let forward = |x: &Tensor, w: &Tensor, b: &Tensor| -> (Graph, Var, Var, Var, Var) {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.leaf(w.clone());
        let bv = g.leaf(b.clone());
        let c = g.conv1d(xv, wv, bv).unwrap();
        let t = g.tanh(c);
        let loss = g.sum_all(t);
        (g, xv, wv, bv, loss)
    };
    let (mut g, xv, wv, bv, loss) = forward(&x0, &w0, &b0);
    g.backward(loss).unwrap();

    fd_check(
        &x0.data,
        |d| {
            let x = Tensor::new(d.to_vec(), x0.shape.clone());
            let (g, _, _, _, l) = forward(&x, &w0, &b0);
            g.value(l).item()
        },
        &g.grad(xv).data,
    );
    fd_check(
        &w0.data,
        |d| {
            let w = Tensor::new(d.to_vec(), w0.shape.clone());
            let (g, _, _, _, l) = forward(&x0, &w, &b0);
            g.value(l).item()
        },
        &g.grad(wv).data,
    );
    fd_check(
        &b0.data,
        |d| {
            let b = Tensor::new(d.to_vec(), b0.shape.clone());
            let (g, _, _, _, l) = forward(&x0, &w0, &b);
            g.value(l).item()
        },
        &g.grad(bv).data,
    );
}

struct LstmFixture {
    x: Tensor,
    params: Vec<Tensor>, // w0..w3, u0..u3, b0..b3
}

impl LstmFixture {
    fn new(t: usize, c: usize, h: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let x = random_tensor(&[t, c], &mut rng);
        let mut params = Vec::new();
        for _ in 0..4 {
            params.push(random_tensor(&[c, h], &mut rng));
        }
        for _ in 0..4 {
            params.push(random_tensor(&[h, h], &mut rng));
        }
        for _ in 0..4 {
            params.push(random_tensor(&[h], &mut rng));
        }
        LstmFixture { x, params }
    }

    fn run(&self, x: &Tensor, params: &[Tensor]) -> (Graph, Var, Vec<Var>, Var) {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let gates = LstmGateVars {
            w: [vars[0], vars[1], vars[2], vars[3]],
            u: [vars[4], vars[5], vars[6], vars[7]],
            b: [vars[8], vars[9], vars[10], vars[11]],
        };
        let y = g.lstm(xv, gates).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.sum_all(sq);
        (g, xv, vars, loss)
    }
}

#[test]
fn lstm_gradients_match_finite_differences() {
    let fx = LstmFixture::new(5, 3, 4, 41);
    let (mut g, xv, vars, loss) = fx.run(&fx.x, &fx.params);
    g.backward(loss).unwrap();

    fd_check(
        &fx.x.data,
        |d| {
            let x = Tensor::new(d.to_vec(), fx.x.shape.clone());
            let (g, _, _, l) = fx.run(&x, &fx.params);
            g.value(l).item()
        },
        &g.grad(xv).data,
    );
    for k in 0..12 {
        let analytic = g.grad(vars[k]);
        fd_check(
            &fx.params[k].data,
            |d| {
                let mut params = fx.params.clone();
                params[k] = Tensor::new(d.to_vec(), fx.params[k].shape.clone());
                let (g, _, _, l) = fx.run(&fx.x, &params);
                g.value(l).item()
            },
            &analytic.data,
        );
    }
}

#[test]
fn self_attention_gradients_match_finite_differences() {
    let mut rng = rng_from(47);
    let x0 = random_tensor(&[4, 3], &mut rng);
    let run = |x: &Tensor| -> (Graph, Var, Var) {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let a = g.self_attention(xv).unwrap();
        let t = g.tanh(a);
        let loss = g.sum_all(t);
        (g, xv, loss)
    };
    let (mut g, xv, loss) = run(&x0);
    g.backward(loss).unwrap();
    fd_check(
        &x0.data,
        |d| {
            let x = Tensor::new(d.to_vec(), x0.shape.clone());
            let (g, _, l) = run(&x);
            g.value(l).item()
        },
        &g.grad(xv).data,
    );
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut rng = rng_from(53);
    let x0 = random_tensor(&[6, 3], &mut rng);
    let gamma0 = random_tensor(&[3], &mut rng);
    let beta0 = random_tensor(&[3], &mut rng);
    let run = |x: &Tensor, gamma: &Tensor, beta: &Tensor| -> (Graph, Var, Var, Var, Var) {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let gv = g.leaf(gamma.clone());
        let bv = g.leaf(beta.clone());
        let y = g.batchnorm_train(xv, gv, bv, 1e-5).unwrap();
        let t = g.tanh(y);
        let loss = g.sum_all(t);
        (g, xv, gv, bv, loss)
    };
    let (mut g, xv, gv, bv, loss) = run(&x0, &gamma0, &beta0);
    g.backward(loss).unwrap();

    fd_check(
        &x0.data,
        |d| {
            let x = Tensor::new(d.to_vec(), x0.shape.clone());
            let (g, _, _, _, l) = run(&x, &gamma0, &beta0);
            g.value(l).item()
        },
        &g.grad(xv).data,
    );
    fd_check(
        &gamma0.data,
        |d| {
            let t = Tensor::new(d.to_vec(), gamma0.shape.clone());
            let (g, _, _, _, l) = run(&x0, &t, &beta0);
            g.value(l).item()
        },
        &g.grad(gv).data,
    );
    fd_check(
        &beta0.data,
        |d| {
            let t = Tensor::new(d.to_vec(), beta0.shape.clone());
            let (g, _, _, _, l) = run(&x0, &gamma0, &t);
            g.value(l).item()
        },
        &g.grad(bv).data,
    );
}

#[test]
fn losses_match_finite_differences() {
    let mut rng = rng_from(59);
    let logits0 = random_tensor(&[3, 5], &mut rng);
    let labels = vec![0usize, 3, 2];
    let run_ce = |z: &Tensor| {
        let mut g = Graph::new();
        let zv = g.leaf(z.clone());
        let l = g.softmax_cross_entropy(zv, &labels).unwrap();
        (g, zv, l)
    };
    let (mut g, zv, l) = run_ce(&logits0);
    g.backward(l).unwrap();
    fd_check(
        &logits0.data,
        |d| {
            let z = Tensor::new(d.to_vec(), logits0.shape.clone());
            let (g, _, l) = run_ce(&z);
            g.value(l).item()
        },
        &g.grad(zv).data,
    );

    let z0 = random_tensor(&[4], &mut rng);
    let targets = vec![1.0, 0.0, 1.0, 0.0];
    let run_bce = |z: &Tensor| {
        let mut g = Graph::new();
        let zv = g.leaf(z.clone());
        let l = g.bce_with_logits(zv, &targets).unwrap();
        (g, zv, l)
    };
    let (mut g, zv, l) = run_bce(&z0);
    g.backward(l).unwrap();
    fd_check(
        &z0.data,
        |d| {
            let z = Tensor::new(d.to_vec(), z0.shape.clone());
            let (g, _, l) = run_bce(&z);
            g.value(l).item()
        },
        &g.grad(zv).data,
    );
}

#[test]
fn dense_chain_gradients_match_finite_differences() {
    let mut rng = rng_from(61);
    let x0 = random_tensor(&[6], &mut rng);
    let w0 = random_tensor(&[6, 4], &mut rng);
    let b0 = random_tensor(&[4], &mut rng);
    let run = |x: &Tensor, w: &Tensor, b: &Tensor| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.leaf(w.clone());
        let bv = g.leaf(b.clone());
        let y = g.matmul(xv, wv).unwrap();
        let y = g.add_row(y, bv).unwrap();
        let y = g.sigmoid(y);
        let l = g.sum_all(y);
        (g, xv, wv, bv, l)
    };
    let (mut g, xv, wv, bv, l) = run(&x0, &w0, &b0);
    g.backward(l).unwrap();
    fd_check(
        &x0.data,
        |d| {
            let x = Tensor::new(d.to_vec(), x0.shape.clone());
            let (g, _, _, _, l) = run(&x, &w0, &b0);
            g.value(l).item()
        },
        &g.grad(xv).data,
    );
    fd_check(
        &w0.data,
        |d| {
            let w = Tensor::new(d.to_vec(), w0.shape.clone());
            let (g, _, _, _, l) = run(&x0, &w, &b0);
            g.value(l).item()
        },
        &g.grad(wv).data,
    );
    fd_check(
        &b0.data,
        |d| {
            let b = Tensor::new(d.to_vec(), b0.shape.clone());
            let (g, _, _, _, l) = run(&x0, &w0, &b);
            g.value(l).item()
        },
        &g.grad(bv).data,
    );
}
