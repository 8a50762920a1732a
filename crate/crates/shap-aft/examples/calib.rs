// Scratch calibration phase 4: detector training and detection rates.

use shap_aft::attacks::{attack_frames, AttackSpec};
use shap_aft::harness::stages::build_detector_corpus;
use shap_aft::harness::ExperimentConfig;
use shap_aft::nets::checkpoint::{load_amc, load_detector, save_detector};
use shap_aft::nets::train::{detector_accuracy, train_detector, DetectorSample, TrainConfig};
use shap_aft::nets::DetectionNetwork;
use shap_aft::signal::{generate_dataset, DatasetConfig, Split};
use std::path::Path;
use std::time::Instant;

fn main() {
    let cfg = ExperimentConfig::builtin(42, "/tmp/calib_ws");
    let ds = DatasetConfig::desk_scale(42);
    let bundle = generate_dataset(&ds).unwrap();
    let amc = load_amc(Path::new("/tmp/calib_amc2.nnw")).unwrap();

    let ckpt = Path::new("/tmp/calib_det.nnw");
    let det = if ckpt.exists() {
        println!("loading cached detector");
        load_detector(ckpt).unwrap()
    } else {
        let t = Instant::now();
        let train = build_detector_corpus(&cfg, &amc, &bundle.high_snr(Split::Train, 7), 1001).unwrap();
        let val = build_detector_corpus(&cfg, &amc, &bundle.high_snr(Split::Val, 7), 1002).unwrap();
        println!("detector corpus built in {:.1}s ({} train)", t.elapsed().as_secs_f64(), train.len());
        let mut det = DetectionNetwork::new(bundle.frame_len, 0.25, 11).unwrap();
        let tc = TrainConfig { epochs: 60, batch_size: 64, lr: 1e-3, patience: 10, seed: 11 };
        let t = Instant::now();
        let report = train_detector(&mut det, &train, &val, &tc).unwrap();
        println!(
            "detector: {} epochs in {:.1}s best val loss {:.4} acc {:.3}",
            report.epochs.len(), t.elapsed().as_secs_f64(), report.best_val_loss,
            report.epochs[report.best_epoch].val_accuracy
        );
        save_detector(ckpt, &det).unwrap();
        det
    };

    let test_hi = bundle.high_snr(Split::Test, 7);
    let subset: Vec<_> = test_hi.iter().take(400).copied().collect();
    let clean_samples: Vec<DetectorSample> = subset.iter()
        .map(|f| DetectorSample { frame: f.tensor(), attacked: false })
        .collect();
    println!("clean specificity {:.3}", detector_accuracy(&det, &clean_samples).unwrap());

    for (name, spec) in [
        ("fgsm 0.025", AttackSpec::fgsm(0.025)),
        ("pgd 0.025", AttackSpec::pgd(0.025, 0.025/4.0, 10)),
        ("pgd 0.05", AttackSpec::pgd(0.05, 0.05/4.0, 10)),
        ("pgd 0.075", AttackSpec::pgd(0.075, 0.075/4.0, 10)),
        ("pgd 0.1", AttackSpec::pgd(0.1, 0.1/4.0, 10)),
        ("bim 0.1", AttackSpec::bim(0.1, 0.004, 10)),
        ("cw 5", AttackSpec::cw(5)),
        ("cw 15", AttackSpec::cw(15)),
        ("cw 20", AttackSpec::cw(20)),
    ] {
        let t = Instant::now();
        let atk = attack_frames(&amc, &subset, &spec, 99).unwrap();
        let samples: Vec<DetectorSample> = atk.frames.iter()
            .map(|f| DetectorSample { frame: f.tensor(), attacked: true })
            .collect();
        println!(
            "detection {name}: {:.3} ({:.1}s)",
            detector_accuracy(&det, &samples).unwrap(),
            t.elapsed().as_secs_f64()
        );
    }
}
