use super::train::{evaluate, train_amc, Labels, TrainConfig};
use super::{AmcNetwork, DetectionNetwork};
use crate::seeds::rng_from;
use crate::signal::{IQFrame, Split};
use crate::tensor::Tensor;
use crate::testutil::{tiny_dataset, tiny_net, tiny_test_frames, TINY_LEN};
use rand::Rng;

fn random_frame(len: usize, seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    Tensor::matrix(len, 2, (0..len * 2).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

#[test]
fn output_is_a_probability_vector() {
    let net = AmcNetwork::new(128, 11, 0.1, 3).unwrap();
    let probs = net.predict(&random_frame(128, 9)).unwrap();
    assert_eq!(probs.len(), 11);
    assert!(probs.iter().all(|&p| p >= 0.0));
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn untrained_accuracy_is_near_chance() {
    let bundle = tiny_dataset();
    let net = AmcNetwork::with_dims(TINY_LEN, 11, 12, 12, 16, 0.1, 321).unwrap();
    let frames: Vec<&IQFrame> = bundle.frames.iter().collect();
    let eval = evaluate(&net, &frames).unwrap();
    // Chance level for 11 balanced classes, within three points.
    assert!(
        (eval.accuracy - 1.0 / 11.0).abs() < 0.03,
        "untrained accuracy {}",
        eval.accuracy
    );
}

#[test]
fn short_frames_are_rejected() {
    let net = AmcNetwork::new(128, 11, 0.1, 3).unwrap();
    assert!(net.predict(&random_frame(7, 1)).is_err());
    assert!(AmcNetwork::new(7, 11, 0.1, 3).is_err());
}

#[test]
fn shorter_refined_frames_are_accepted() {
    // The backbone is length-agnostic: a 128-trained net classifies
    // 116-sample frames.
    let net = AmcNetwork::new(128, 11, 0.1, 3).unwrap();
    let probs = net.predict(&random_frame(116, 4)).unwrap();
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn zero_weight_detector_sits_on_the_attacked_side_of_the_boundary() {
    let mut det = DetectionNetwork::new(TINY_LEN, 0.1, 9).unwrap();
    for t in det.p.trainable_mut() {
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let p = det.predict(&random_frame(TINY_LEN, 2)).unwrap();
    assert!((p - 0.5).abs() < 1e-12);
    // p = 0.5 exactly: the decision rule is inclusive.
    assert!(det.is_attacked(&random_frame(TINY_LEN, 2)).unwrap());
}

#[test]
fn detector_checks_frame_length() {
    let det = DetectionNetwork::new(128, 0.1, 9).unwrap();
    assert!(det.predict(&random_frame(64, 3)).is_err());
}

#[test]
fn two_copies_of_one_sample_are_memorized() {
    let bundle = tiny_dataset();
    let frame = bundle.frames[0].clone();
    let copies = vec![frame.clone(), frame.clone()];
    let refs: Vec<&IQFrame> = copies.iter().collect();
    let mut net = AmcNetwork::with_dims(TINY_LEN, 11, 8, 8, 8, 0.06, 77).unwrap();
    // Adam moves logits about lr per step, so driving the loss below 1e-3
    // needs a few thousand steps.
    let tc = TrainConfig {
        epochs: 4000,
        batch_size: 2,
        lr: 1e-2,
        patience: 0,
        seed: 77,
    };
    let report = train_amc(&mut net, &refs, &refs, &tc).unwrap();
    assert!(
        report.best_val_loss < 1e-3,
        "memorization loss {}",
        report.best_val_loss
    );
}

#[test]
fn relabeled_predictions_give_a_diagonal_confusion_matrix() {
    let net = tiny_net();
    let frames = tiny_test_frames();
    let relabeled: Vec<IQFrame> = frames
        .iter()
        .take(40)
        .map(|f| {
            let mut c = (*f).clone();
            c.label = net.predict_label(&f.tensor()).unwrap();
            c
        })
        .collect();
    let refs: Vec<&IQFrame> = relabeled.iter().collect();
    let eval = evaluate(net, &refs).unwrap();
    assert_eq!(eval.accuracy, 1.0);
    for (i, row) in eval.confusion.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if i != j {
                assert_eq!(c, 0);
            }
        }
    }
}

#[test]
fn accuracy_equals_trace_over_total() {
    let net = tiny_net();
    let frames = tiny_test_frames();
    let eval = evaluate(net, &frames).unwrap();
    let trace: usize = (0..11).map(|i| eval.confusion[i][i]).sum();
    let total: usize = eval.confusion.iter().flatten().sum();
    assert_eq!(total, frames.len());
    assert!((eval.accuracy - trace as f64 / total as f64).abs() < 1e-15);
}

#[test]
fn evaluation_is_order_invariant() {
    let net = tiny_net();
    let mut frames = tiny_test_frames();
    let a = evaluate(net, &frames).unwrap();
    frames.reverse();
    let b = evaluate(net, &frames).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(a.confusion, b.confusion);
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let bundle = tiny_dataset();
    let train = bundle.split_frames(Split::Train);
    let val = bundle.split_frames(Split::Val);
    let run = || {
        let mut net = AmcNetwork::with_dims(TINY_LEN, 11, 8, 8, 8, 0.06, 5).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 32,
            lr: 1e-3,
            patience: 0,
            seed: 5,
        };
        let report = train_amc(&mut net, &train, &val, &tc).unwrap();
        (report.epochs.last().unwrap().val_loss, net.p.conv.w.data[0])
    };
    let (loss_a, w_a) = run();
    let (loss_b, w_b) = run();
    assert_eq!(loss_a, loss_b);
    assert_eq!(w_a, w_b);
}

#[test]
fn batch_step_gradients_match_a_single_graph() {
    // The three-phase batch step must agree with one monolithic graph that
    // stacks the per-frame features directly.
    use crate::autodiff::Graph;
    use crate::nets::{dense_head, features, register_backbone, register_head};

    let bundle = tiny_dataset();
    let net = AmcNetwork::with_dims(TINY_LEN, 11, 6, 6, 8, 0.05, 31).unwrap();
    let frames: Vec<&Tensor> = Vec::new();
    drop(frames);
    let batch: Vec<Tensor> = bundle.frames.iter().take(3).map(|f| f.tensor()).collect();
    let labels: Vec<usize> = bundle.frames.iter().take(3).map(|f| f.label).collect();

    // Monolithic reference graph.
    let mut g = Graph::new();
    let bb = register_backbone(&mut g, &net.p, true);
    let hv = register_head(&mut g, &net.p, true);
    let pooled: Vec<crate::autodiff::Var> = batch
        .iter()
        .map(|frame| {
            let input = g.constant(frame.clone());
            features(&mut g, &bb, input, false).unwrap()
        })
        .collect();
    let stacked = g.stack_rows(&pooled).unwrap();
    let normed = g.batchnorm_train(stacked, hv.gamma, hv.beta, 1e-5).unwrap();
    let logits = dense_head(&mut g, &hv, normed).unwrap();
    let loss = g.softmax_cross_entropy(logits, &labels).unwrap();
    g.backward(loss).unwrap();
    let mut reference: Vec<Tensor> = bb.ordered().iter().map(|&v| g.grad(v)).collect();
    reference.extend(hv.ordered().iter().map(|&v| g.grad(v)));

    // Three-phase step.
    let frames_ref: Vec<&Tensor> = batch.iter().collect();
    let out = super::train::batch_step_for_tests(
        &net.p,
        false,
        &frames_ref,
        &Labels::Classes(labels),
    )
    .unwrap();

    assert_eq!(reference.len(), out.len());
    for (r, o) in reference.iter().zip(&out) {
        assert_eq!(r.shape, o.shape);
        for (a, b) in r.data.iter().zip(&o.data) {
            assert!((a - b).abs() < 1e-10, "batch gradient mismatch: {a} vs {b}");
        }
    }
}
