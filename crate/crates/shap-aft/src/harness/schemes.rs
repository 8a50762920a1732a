//! The defense comparison: Baseline, randomized smoothing, adversarial
//! training variants, the pure fine-tuning ablation, and the full
//! Shapley-guided pipeline, all scored on the same mixed streams.
//!
//! Flat schemes (no detector) report ground-truth clean/attacked
//! proportions as their routing weights; pipeline schemes report weights
//! measured from detector routing. Every row satisfies the exact
//! weighted-sum identity between its branch accuracies and its overall
//! accuracy.

use super::stages::{eval_subset, Workspace};
use super::ExperimentConfig;
use crate::attacks::{attack_frames, AttackKind};
use crate::defense::{
    overall_accuracy, route_stream, run_pipeline, PipelineConfig, PipelineInputs, PipelineResult,
    RefineMode,
};
use crate::error::{Error, Result};
use crate::nets::checkpoint::save_amc;
use crate::nets::train::{train_amc, EvalResult, TrainConfig};
use crate::nets::{argmax, AmcNetwork, DetectionNetwork};
use crate::seeds::{child_seed, rng_from};
use crate::signal::{DatasetBundle, IQFrame, ModulationScheme, Split};
use crate::smoothing::{smoothed_predict, RS_VARIANCE};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::collections::HashMap;
use std::fs;

/// One row of the defense comparison.
#[derive(Debug, Clone)]
pub struct DefenseRow {
    pub scheme: String,
    pub attack: AttackKind,
    pub level: f64,
    pub beta_clean: f64,
    pub beta_adv: f64,
    pub a_clean: f64,
    pub a_adv: f64,
    pub a_oa: f64,
}

pub fn defense_csv_header() -> &'static str {
    "scheme,attack,level,beta_clean,beta_adv,a_clean,a_adv,a_oa"
}

pub fn defense_row_csv(r: &DefenseRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.scheme, r.attack, r.level, r.beta_clean, r.beta_adv, r.a_clean, r.a_adv, r.a_oa
    )
}

pub fn parse_defense_row(line: &str) -> Option<DefenseRow> {
    let p: Vec<&str> = line.split(',').collect();
    if p.len() != 8 {
        return None;
    }
    Some(DefenseRow {
        scheme: p[0].to_string(),
        attack: AttackKind::parse(p[1])?,
        level: p[2].parse().ok()?,
        beta_clean: p[3].parse().ok()?,
        beta_adv: p[4].parse().ok()?,
        a_clean: p[5].parse().ok()?,
        a_adv: p[6].parse().ok()?,
        a_oa: p[7].parse().ok()?,
    })
}

/// A mixed evaluation stream: every frame of the subset once clean and once
/// attacked, in a deterministic shuffled order.
pub(crate) fn build_stream(clean: &[&IQFrame], attacked: &[IQFrame], seed: u64) -> Vec<IQFrame> {
    let mut stream: Vec<IQFrame> = clean.iter().map(|f| (*f).clone()).collect();
    stream.extend(attacked.iter().cloned());
    let mut rng = rng_from(seed);
    stream.shuffle(&mut rng);
    stream
}

/// Score a predictor without routing: ground-truth proportions serve as the
/// weights and each branch is scored separately.
fn score_flat<P>(stream: &[IQFrame], num_classes: usize, predict: P) -> Result<DefenseRowParts>
where
    P: Fn(&IQFrame) -> Result<usize> + Sync,
{
    let preds: Result<Vec<(bool, usize, usize)>> = stream
        .par_iter()
        .map(|f| Ok((f.attacked, f.label, predict(f)?)))
        .collect();
    let preds = preds?;
    let clean_pairs: Vec<(usize, usize)> = preds
        .iter()
        .filter(|(a, _, _)| !a)
        .map(|&(_, t, p)| (t, p))
        .collect();
    let adv_pairs: Vec<(usize, usize)> = preds
        .iter()
        .filter(|(a, _, _)| *a)
        .map(|&(_, t, p)| (t, p))
        .collect();
    let total = preds.len() as f64;
    let beta_clean = clean_pairs.len() as f64 / total;
    let beta_adv = adv_pairs.len() as f64 / total;
    let a_clean = if clean_pairs.is_empty() {
        0.0
    } else {
        EvalResult::from_pairs(num_classes, &clean_pairs).accuracy
    };
    let a_adv = if adv_pairs.is_empty() {
        0.0
    } else {
        EvalResult::from_pairs(num_classes, &adv_pairs).accuracy
    };
    let a_oa = overall_accuracy(a_clean, a_adv, beta_clean, beta_adv)?;
    Ok(DefenseRowParts {
        beta_clean,
        beta_adv,
        a_clean,
        a_adv,
        a_oa,
    })
}

struct DefenseRowParts {
    beta_clean: f64,
    beta_adv: f64,
    a_clean: f64,
    a_adv: f64,
    a_oa: f64,
}

fn row(scheme: String, attack: AttackKind, level: f64, p: DefenseRowParts) -> DefenseRow {
    DefenseRow {
        scheme,
        attack,
        level,
        beta_clean: p.beta_clean,
        beta_adv: p.beta_adv,
        a_clean: p.a_clean,
        a_adv: p.a_adv,
        a_oa: p.a_oa,
    }
}

fn pipeline_parts(r: &PipelineResult) -> DefenseRowParts {
    DefenseRowParts {
        beta_clean: r.beta_clean,
        beta_adv: r.beta_adv,
        a_clean: r.a_clean,
        a_adv: r.a_adv,
        a_oa: r.a_oa,
    }
}

/// Warm-started fine-tuning of the full-width base network on unrefined
/// adversarial samples (the adversarial-training comparison scheme).
fn train_at_variant(
    base: &AmcNetwork,
    train: &[IQFrame],
    val: &[IQFrame],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<AmcNetwork> {
    let mut net = base.clone();
    let tc = TrainConfig {
        epochs: cfg.defense.ft_epochs,
        batch_size: cfg.defense.ft_batch,
        lr: cfg.defense.ft_lr,
        patience: if cfg.defense.early_stopping { 5 } else { 0 },
        seed,
    };
    let train_refs: Vec<&IQFrame> = train.iter().collect();
    let val_refs: Vec<&IQFrame> = val.iter().collect();
    train_amc(&mut net, &train_refs, &val_refs, &tc)?;
    Ok(net)
}

fn pipeline_config(cfg: &ExperimentConfig) -> PipelineConfig {
    PipelineConfig {
        labeled_count: cfg.attribution.labeled_count,
        background_count: cfg.attribution.background_count,
        ft_train_count: cfg.defense.ft_train_count,
        ft_val_count: cfg.defense.ft_val_count,
        ft_epochs: cfg.defense.ft_epochs,
        ft_batch: cfg.defense.ft_batch,
        ft_dense_units: cfg.defense.ft_dense_units,
        ft_lr: cfg.defense.ft_lr,
        early_stopping: cfg.defense.early_stopping,
        m_destructive: cfg.attribution.m,
        snr_floor_db: cfg.defense.snr_floor_db,
        eg_samples: cfg.attribution.eg_samples,
        refine_clean_routed: cfg.defense.refine_clean_routed,
    }
}

fn write_confusion(
    ws: &mut Workspace,
    scheme: &str,
    kind: AttackKind,
    level: f64,
    branch: &str,
    confusion: &[Vec<usize>],
) -> Result<()> {
    let names: Vec<&str> = ModulationScheme::ALL.iter().map(|s| s.name()).collect();
    let mut out = format!("true\\pred,{}\n", names.join(","));
    for (i, r) in confusion.iter().enumerate() {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("{},{}\n", names[i], cells.join(",")));
    }
    let rel = format!("reports/confusion_{scheme}_{kind}_{level}_{branch}.csv");
    fs::write(ws.path(&rel), out)?;
    ws.declare(&rel, "defend")?;
    Ok(())
}

pub fn run_defense_comparison(
    cfg: &ExperimentConfig,
    ws: &mut Workspace,
    bundle: &DatasetBundle,
    base: &AmcNetwork,
    detector: &DetectionNetwork,
) -> Result<Vec<DefenseRow>> {
    let kinds: Vec<AttackKind> = cfg
        .defense
        .kinds
        .iter()
        .map(|s| AttackKind::parse(s).ok_or_else(|| Error::Config(format!("bad kind {s}"))))
        .collect::<Result<_>>()?;
    let floor = cfg.defense.snr_floor_db;
    let subset = eval_subset(cfg, bundle);
    if subset.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation subset".into()));
    }

    // Adaptation pools: fine-tuning sets come from training data,
    // attribution sets from validation data, streams from test data.
    let train_pool = bundle.high_snr(Split::Train, floor);
    let val_pool = bundle.high_snr(Split::Val, floor);
    let ft_train_clean = super::stages::pick(
        &train_pool,
        cfg.defense.ft_train_count,
        child_seed(cfg.seed, &[0xdf, 0]),
    );
    let remaining: Vec<&IQFrame> = train_pool
        .iter()
        .filter(|f| !ft_train_clean.iter().any(|u| std::ptr::eq(**f, *u)))
        .copied()
        .collect();
    let ft_val_clean = super::stages::pick(
        &remaining,
        cfg.defense.ft_val_count,
        child_seed(cfg.seed, &[0xdf, 1]),
    );
    let labeled_clean = super::stages::pick_stratified(
        &val_pool,
        cfg.attribution.labeled_count,
        bundle.num_classes,
        child_seed(cfg.seed, &[0xdf, 2]),
    );
    let bg_pool: Vec<&IQFrame> = val_pool
        .iter()
        .filter(|f| !labeled_clean.iter().any(|u| std::ptr::eq(**f, *u)))
        .copied()
        .collect();
    let background_clean = super::stages::pick(
        &bg_pool,
        cfg.attribution.background_count,
        child_seed(cfg.seed, &[0xdf, 3]),
    );

    let pcfg = pipeline_config(cfg);
    let rs_sigma = RS_VARIANCE.sqrt();
    let mut at_nets: HashMap<AttackKind, AmcNetwork> = HashMap::new();
    let mut aft_nets: HashMap<AttackKind, AmcNetwork> = HashMap::new();
    let mut rows: Vec<DefenseRow> = Vec::new();

    for &kind in &kinds {
        // Adaptation sets for this kind (fixed small budget).
        let ft_spec =
            cfg.attack
                .adaptation_spec(kind, cfg.defense.ft_epsilon, cfg.defense.ft_cw_iters);
        let ft_train = attack_frames(
            base,
            &ft_train_clean,
            &ft_spec,
            child_seed(cfg.seed, &[0xdf, 4]),
        )?
        .frames;
        let ft_val = attack_frames(
            base,
            &ft_val_clean,
            &ft_spec,
            child_seed(cfg.seed, &[0xdf, 5]),
        )?
        .frames;

        // The pure fine-tuning ablation shares one adapted network across
        // levels because it never looks at attributions.
        if !aft_nets.contains_key(&kind) {
            let (net, _) = crate::defense::adversarial_fine_tune(
                base,
                &ft_train,
                &ft_val,
                &pcfg,
                child_seed(cfg.seed, &[0xdf, 6, kind.name().len() as u64]),
            )?;
            let rel = format!("models/aft_{}.nnw", kind.name());
            save_amc(&ws.path(&rel), &net)?;
            ws.declare(&rel, "defend")?;
            aft_nets.insert(kind, net);
        }

        for (idx, &level) in cfg.attack.levels(kind).iter().enumerate() {
            let spec = cfg.attack.spec_for(kind, idx)?;
            let attacked = attack_frames(
                base,
                &subset,
                &spec,
                child_seed(cfg.seed, &[0xdf, 7, idx as u64]),
            )?;
            let stream = build_stream(
                &subset,
                &attacked.frames,
                child_seed(cfg.seed, &[0xdf, 8, idx as u64]),
            );

            // Baseline: the unprotected classifier.
            let parts = score_flat(&stream, bundle.num_classes, |f| {
                base.predict_label(&f.tensor())
            })?;
            rows.push(row("baseline".into(), kind, level, parts));

            // Randomized smoothing on the unprotected classifier.
            let rs_samples = cfg.defense.rs_samples;
            let rs_seed = child_seed(cfg.seed, &[0xdf, 9, idx as u64]);
            let parts = score_flat(&stream, bundle.num_classes, |f| {
                let probs = smoothed_predict(base, &f.tensor(), rs_sigma, rs_samples, rs_seed)?;
                Ok(argmax(&probs))
            })?;
            rows.push(row("rs".into(), kind, level, parts));

            // Adversarial-training variants, each trained once on its own
            // generating attack at the adaptation budget.
            for g in [AttackKind::Fgsm, AttackKind::Bim, AttackKind::Pgd] {
                if !at_nets.contains_key(&g) {
                    let g_spec = cfg.attack.adaptation_spec(
                        g,
                        cfg.defense.ft_epsilon,
                        cfg.defense.ft_cw_iters,
                    );
                    let at_train = attack_frames(
                        base,
                        &ft_train_clean,
                        &g_spec,
                        child_seed(cfg.seed, &[0xdf, 10]),
                    )?
                    .frames;
                    let at_val = attack_frames(
                        base,
                        &ft_val_clean,
                        &g_spec,
                        child_seed(cfg.seed, &[0xdf, 11]),
                    )?
                    .frames;
                    let net = train_at_variant(
                        base,
                        &at_train,
                        &at_val,
                        cfg,
                        child_seed(cfg.seed, &[0xdf, 12, g.name().len() as u64]),
                    )?;
                    let rel = format!("models/at_{}.nnw", g.name());
                    save_amc(&ws.path(&rel), &net)?;
                    ws.declare(&rel, "defend")?;
                    at_nets.insert(g, net);
                }
                let at_net = &at_nets[&g];
                let parts = score_flat(&stream, bundle.num_classes, |f| {
                    at_net.predict_label(&f.tensor())
                })?;
                rows.push(row(format!("at-{}", g.name()), kind, level, parts));
            }

            // Pure fine-tuning ablation: detector routing, no refinement.
            let aft_net = &aft_nets[&kind];
            let aft_result = route_stream(base, detector, aft_net, &[], &stream, false)?;
            write_confusion(
                ws,
                &format!("aft-{}", kind.name()),
                kind,
                level,
                "clean",
                &aft_result.confusion_clean,
            )?;
            write_confusion(
                ws,
                &format!("aft-{}", kind.name()),
                kind,
                level,
                "adv",
                &aft_result.confusion_adv,
            )?;
            rows.push(row(
                format!("aft-{}", kind.name()),
                kind,
                level,
                pipeline_parts(&aft_result),
            ));

            // Full pipeline: attribution over the labeled set attacked at
            // this level, refinement, fine-tuning, detector routing.
            let labeled_attacked = attack_frames(
                base,
                &labeled_clean,
                &spec,
                child_seed(cfg.seed, &[0xdf, 13, idx as u64]),
            )?
            .frames;
            let background_attacked = attack_frames(
                base,
                &background_clean,
                &spec,
                child_seed(cfg.seed, &[0xdf, 14, idx as u64]),
            )?;
            let background_tensors: Vec<Tensor> = background_attacked
                .frames
                .iter()
                .map(|f| f.tensor())
                .collect();
            let inputs = PipelineInputs {
                stream: &stream,
                labeled_attacked: &labeled_attacked,
                background: &background_tensors,
                ft_train: &ft_train,
                ft_val: &ft_val,
            };
            let out = run_pipeline(
                base,
                detector,
                &inputs,
                &pcfg,
                RefineMode::ShapGuided,
                child_seed(cfg.seed, &[0xdf, 15, idx as u64]),
            )?;
            let scheme = format!("shap-aft-{}", kind.name());
            let rel = format!("models/shapaft_{}_{}.nnw", kind.name(), level);
            save_amc(&ws.path(&rel), &out.adapted_net)?;
            ws.declare(&rel, "defend")?;
            write_confusion(ws, &scheme, kind, level, "clean", &out.result.confusion_clean)?;
            write_confusion(ws, &scheme, kind, level, "adv", &out.result.confusion_adv)?;
            rows.push(row(scheme, kind, level, pipeline_parts(&out.result)));
        }
    }

    let mut csv = String::from(defense_csv_header());
    csv.push('\n');
    for r in &rows {
        csv.push_str(&defense_row_csv(r));
        csv.push('\n');
    }
    fs::create_dir_all(ws.path("reports"))?;
    fs::write(ws.path(super::stages::DEFENSE_CSV), csv)?;
    ws.declare(super::stages::DEFENSE_CSV, "defend")?;
    Ok(rows)
}
