//! Stage commands and the run workspace.
//!
//! Every stage writes its artifacts under the output directory, records
//! them in `manifest.txt` (sha256, relative path, stage, config hash), and
//! only reads upstream files that an earlier stage declared. A lock file
//! gives the process exclusive ownership of the directory. Completed
//! stages are skipped on rerun unless forced; artifacts from a different
//! configuration are refused.

use super::report::write_reports;
use super::schemes::run_defense_comparison;
use super::{hex, ExperimentConfig};
use crate::attacks::{attack_frames, write_attack_meta, AttackKind, AttackSpec};
use crate::attribution::{
    build_report, shapley_heatmap, write_attributions, write_class_matrix, write_phi_bar,
    AttributionConfig, TargetClass,
};
use crate::error::{Error, Result};
use crate::nets::checkpoint::{load_amc, load_detector, save_amc, save_detector};
use crate::nets::train::{
    detector_accuracy, evaluate, train_amc, train_detector, DetectorSample, TrainConfig,
    TrainReport,
};
use crate::nets::{AmcNetwork, DetectionNetwork};
use crate::seeds::{child_seed, rng_from};
use crate::signal::io::{index_path, read_dataset, write_dataset};
use crate::signal::{generate_dataset, DatasetBundle, IQFrame, ModulationScheme, Split};
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

const LOCK_FILE: &str = ".lock";
const MANIFEST_FILE: &str = "manifest.txt";

struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
struct ManifestEntry {
    sha256: String,
    stage: String,
    config_hash: String,
}

/// Exclusive handle on an output directory plus its artifact manifest.
pub struct Workspace {
    root: PathBuf,
    config_hash: String,
    entries: BTreeMap<String, ManifestEntry>,
    _lock: LockGuard,
}

impl Workspace {
    pub fn open(root: &Path, config_hash: &str, force: bool) -> Result<Workspace> {
        fs::create_dir_all(root)?;
        let lock_path = root.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock_path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Config(format!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    root.display(),
                    lock_path.display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
        let lock = LockGuard { path: lock_path };

        let mut entries = BTreeMap::new();
        let manifest_path = root.join(MANIFEST_FILE);
        if manifest_path.exists() {
            for line in fs::read_to_string(&manifest_path)?.lines() {
                let parts: Vec<&str> = line.split('\t').collect();
                if parts.len() == 4 {
                    entries.insert(
                        parts[1].to_string(),
                        ManifestEntry {
                            sha256: parts[0].to_string(),
                            stage: parts[2].to_string(),
                            config_hash: parts[3].to_string(),
                        },
                    );
                }
            }
        }
        let mismatched = entries
            .values()
            .any(|e: &ManifestEntry| e.config_hash != config_hash);
        if mismatched {
            if force {
                entries.clear();
                fs::remove_file(&manifest_path)?;
            } else {
                return Err(Error::Config(format!(
                    "artifacts in {} were produced under a different configuration; \
                     rerun with --force to rebuild",
                    root.display()
                )));
            }
        }
        Ok(Workspace {
            root: root.to_path_buf(),
            config_hash: config_hash.to_string(),
            entries,
            _lock: lock,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn file_hash(path: &Path) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(fs::read(path)?);
        Ok(hex(&hasher.finalize()))
    }

    /// Record an artifact this stage produced.
    pub fn declare(&mut self, rel: &str, stage: &str) -> Result<()> {
        let hash = Self::file_hash(&self.path(rel))?;
        let entry = ManifestEntry {
            sha256: hash,
            stage: stage.to_string(),
            config_hash: self.config_hash.clone(),
        };
        self.entries.insert(rel.to_string(), entry);
        self.rewrite_manifest()
    }

    fn rewrite_manifest(&self) -> Result<()> {
        let mut out = String::new();
        for (rel, e) in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.sha256, rel, e.stage, e.config_hash
            ));
        }
        fs::write(self.root.join(MANIFEST_FILE), out)?;
        Ok(())
    }

    /// Resolve an upstream artifact, failing when it was never declared or
    /// has gone missing.
    pub fn require(&self, rel: &str) -> Result<PathBuf> {
        let entry = self.entries.get(rel).ok_or_else(|| {
            Error::MissingArtifact(format!("{rel} (stage not run in {})", self.root.display()))
        })?;
        if entry.config_hash != self.config_hash {
            return Err(Error::Config(format!(
                "{rel} was produced under config {} but this run is {}",
                entry.config_hash, self.config_hash
            )));
        }
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::MissingArtifact(format!(
                "{rel} is in the manifest but missing on disk"
            )));
        }
        Ok(p)
    }

    pub fn is_done(&self, artifacts: &[&str]) -> bool {
        artifacts.iter().all(|rel| {
            self.entries
                .get(*rel)
                .is_some_and(|e| e.config_hash == self.config_hash)
                && self.path(rel).exists()
        })
    }

    fn log_timing(&self, stage: &str, seconds: f64) {
        let line = format!("{stage}\t{seconds:.3}\n");
        if let Ok(mut f) = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join("logs/timings.txt"))
        {
            let _ = f.write_all(line.as_bytes());
        }
    }
}

pub const CLEAN_DATA: &str = "data/clean.iqf";
pub const AMC_MODEL: &str = "models/amc.nnw";
pub const DETECTOR_MODEL: &str = "models/detector.nnw";
pub const DEFENSE_CSV: &str = "reports/defense.csv";

fn write_train_log(path: &Path, report: &TrainReport) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for e in &report.epochs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.train_loss, e.val_loss, e.val_accuracy
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Deterministically shuffle and take up to `count` frames (0 keeps all).
pub(crate) fn pick<'a>(frames: &[&'a IQFrame], count: usize, seed: u64) -> Vec<&'a IQFrame> {
    let mut v: Vec<&IQFrame> = frames.to_vec();
    let mut rng = rng_from(seed);
    v.shuffle(&mut rng);
    if count > 0 && count < v.len() {
        v.truncate(count);
    }
    v
}

/// Class-balanced pick: `count` frames spread evenly over the classes.
pub(crate) fn pick_stratified<'a>(
    frames: &[&'a IQFrame],
    count: usize,
    num_classes: usize,
    seed: u64,
) -> Vec<&'a IQFrame> {
    let per_class = count / num_classes;
    let mut remainder = count % num_classes;
    let mut out = Vec::with_capacity(count);
    for class in 0..num_classes {
        let of_class: Vec<&IQFrame> = frames.iter().filter(|f| f.label == class).copied().collect();
        let extra = usize::from(remainder > 0);
        if extra == 1 {
            remainder -= 1;
        }
        let take = (per_class + extra).min(of_class.len());
        out.extend(pick(&of_class, take, child_seed(seed, &[class as u64])));
    }
    out
}

/// Remove one set of frames from another by pointer identity.
fn without<'a>(pool: &[&'a IQFrame], used: &[&'a IQFrame]) -> Vec<&'a IQFrame> {
    pool.iter()
        .filter(|f| !used.iter().any(|u| std::ptr::eq(**f, *u)))
        .copied()
        .collect()
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, ws: &mut Workspace, force: bool) -> Result<()> {
    let stage = "gen-data";
    let index_rel = "data/clean.index.csv";
    if ws.is_done(&[CLEAN_DATA, index_rel]) && !force {
        log::info!("{stage}: up to date, skipping");
        return Ok(());
    }
    let out_path = ws.path(CLEAN_DATA);
    if out_path.exists() && !ws.is_done(&[CLEAN_DATA]) && !force {
        return Err(Error::Config(format!(
            "{} exists but is not a declared artifact; use --force to overwrite",
            out_path.display()
        )));
    }
    let t = Instant::now();
    let ds_cfg = cfg.dataset.to_dataset_config(cfg.seed)?;
    let bundle = generate_dataset(&ds_cfg)?;
    write_dataset(&out_path, &bundle)?;
    ws.declare(CLEAN_DATA, stage)?;
    let index_rel_owned = index_path(Path::new(CLEAN_DATA));
    ws.declare(index_rel_owned.to_str().unwrap(), stage)?;
    ws.log_timing(stage, t.elapsed().as_secs_f64());
    log::info!("{stage}: wrote {} frames", bundle.frames.len());
    Ok(())
}

fn load_bundle(ws: &Workspace) -> Result<DatasetBundle> {
    read_dataset(&ws.require(CLEAN_DATA)?)
}

pub fn cmd_train_amc(cfg: &ExperimentConfig, ws: &mut Workspace, force: bool) -> Result<()> {
    let stage = "train-amc";
    if ws.is_done(&[AMC_MODEL]) && !force {
        log::info!("{stage}: up to date, skipping");
        return Ok(());
    }
    let t = Instant::now();
    let bundle = load_bundle(ws)?;
    let train = bundle.split_frames(Split::Train);
    let val = bundle.split_frames(Split::Val);
    let mut net = AmcNetwork::new(
        bundle.frame_len,
        bundle.num_classes,
        cfg.model.width,
        child_seed(cfg.seed, &[0xa3c]),
    )?;
    let tc = TrainConfig {
        epochs: cfg.model.epochs,
        batch_size: cfg.model.batch_size,
        lr: cfg.model.lr,
        patience: cfg.model.patience,
        seed: child_seed(cfg.seed, &[0xa3c, 1]),
    };
    let report = train_amc(&mut net, &train, &val, &tc)?;
    save_amc(&ws.path(AMC_MODEL), &net)?;
    ws.declare(AMC_MODEL, stage)?;
    write_train_log(&ws.path("logs/amc_train.csv"), &report)?;
    ws.declare("logs/amc_train.csv", stage)?;
    ws.log_timing(stage, t.elapsed().as_secs_f64());
    log::info!(
        "{stage}: best val loss {:.4} at epoch {}",
        report.best_val_loss,
        report.best_epoch
    );
    Ok(())
}

/// Balanced paired corpus: every frame contributes one clean sample and one
/// attacked sample, the attack drawn uniformly over the (kind, level) grid
/// per frame. Pairing forces the detector to key on the perturbation
/// itself rather than frame identity.
pub fn build_detector_corpus(
    cfg: &ExperimentConfig,
    net: &AmcNetwork,
    frames: &[&IQFrame],
    seed: u64,
) -> Result<Vec<DetectorSample>> {
    let kinds = cfg.attack.parsed_kinds()?;
    let mut cells: Vec<AttackSpec> = Vec::new();
    for &kind in &kinds {
        for idx in 0..cfg.attack.levels(kind).len() {
            cells.push(cfg.attack.spec_for(kind, idx)?);
        }
    }
    if cells.is_empty() {
        return Err(Error::Config("empty attack grid".into()));
    }

    // Group attacked frames by cell so each cell runs as one batch.
    let mut by_cell: Vec<Vec<&IQFrame>> = vec![Vec::new(); cells.len()];
    let mut samples = Vec::with_capacity(frames.len() * 2);
    for (i, f) in frames.iter().enumerate() {
        samples.push(DetectorSample {
            frame: f.tensor(),
            attacked: false,
        });
        let mut rng = rng_from(child_seed(seed, &[0xdc, i as u64]));
        let cell = rand::Rng::gen_range(&mut rng, 0..cells.len());
        by_cell[cell].push(f);
    }
    for (cell, members) in by_cell.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let attacked = attack_frames(net, members, &cells[cell], child_seed(seed, &[cell as u64]))?;
        for f in attacked.frames {
            samples.push(DetectorSample {
                frame: f.tensor(),
                attacked: true,
            });
        }
    }
    Ok(samples)
}

pub fn cmd_train_detector(cfg: &ExperimentConfig, ws: &mut Workspace, force: bool) -> Result<()> {
    let stage = "train-detector";
    if ws.is_done(&[DETECTOR_MODEL]) && !force {
        log::info!("{stage}: up to date, skipping");
        return Ok(());
    }
    let t = Instant::now();
    let bundle = load_bundle(ws)?;
    let amc = load_amc(&ws.require(AMC_MODEL)?)?;
    // The detector serves the high-SNR stream, so it trains on the same
    // distribution.
    let train = build_detector_corpus(
        cfg,
        &amc,
        &bundle.high_snr(Split::Train, cfg.defense.snr_floor_db),
        child_seed(cfg.seed, &[0xdd, 0]),
    )?;
    let val = build_detector_corpus(
        cfg,
        &amc,
        &bundle.high_snr(Split::Val, cfg.defense.snr_floor_db),
        child_seed(cfg.seed, &[0xdd, 1]),
    )?;
    let mut det = DetectionNetwork::new(
        bundle.frame_len,
        cfg.model.width,
        child_seed(cfg.seed, &[0xdd, 2]),
    )?;
    let tc = TrainConfig {
        epochs: cfg.detector.epochs,
        batch_size: cfg.detector.batch_size,
        lr: cfg.detector.lr,
        patience: cfg.detector.patience,
        seed: child_seed(cfg.seed, &[0xdd, 3]),
    };
    let report = train_detector(&mut det, &train, &val, &tc)?;
    save_detector(&ws.path(DETECTOR_MODEL), &det)?;
    ws.declare(DETECTOR_MODEL, stage)?;
    write_train_log(&ws.path("logs/detector_train.csv"), &report)?;
    ws.declare("logs/detector_train.csv", stage)?;
    ws.log_timing(stage, t.elapsed().as_secs_f64());
    log::info!(
        "{stage}: best val loss {:.4} at epoch {}",
        report.best_val_loss,
        report.best_epoch
    );
    Ok(())
}

pub(crate) fn attacked_set_rel(kind: AttackKind, level: f64) -> String {
    format!("data/attacked_{}_{}.iqf", kind.name(), level)
}

/// The evaluation subset: high-SNR test frames, optionally capped.
pub(crate) fn eval_subset<'a>(
    cfg: &ExperimentConfig,
    bundle: &'a DatasetBundle,
) -> Vec<&'a IQFrame> {
    let pool = bundle.high_snr(Split::Test, cfg.defense.snr_floor_db);
    pick(
        &pool,
        cfg.attack.eval_count,
        child_seed(cfg.seed, &[0xe7a1]),
    )
}

pub fn cmd_attack(cfg: &ExperimentConfig, ws: &mut Workspace, force: bool) -> Result<()> {
    let stage = "attack";
    let detector_eval_rel = "reports/detector_eval.csv";
    let kinds = cfg.attack.parsed_kinds()?;
    let mut all_rels: Vec<String> = vec![detector_eval_rel.to_string()];
    for &kind in &kinds {
        for &level in &cfg.attack.levels(kind) {
            all_rels.push(attacked_set_rel(kind, level));
        }
    }
    let rel_refs: Vec<&str> = all_rels.iter().map(|s| s.as_str()).collect();
    if ws.is_done(&rel_refs) && !force {
        log::info!("{stage}: up to date, skipping");
        return Ok(());
    }

    let t = Instant::now();
    let bundle = load_bundle(ws)?;
    let amc = load_amc(&ws.require(AMC_MODEL)?)?;
    let detector = load_detector(&ws.require(DETECTOR_MODEL)?)?;
    let subset = eval_subset(cfg, &bundle);
    if subset.is_empty() {
        return Err(Error::InvalidArgument(
            "no high-SNR test frames available for attacks".into(),
        ));
    }

    let mut detector_rows = String::from("kind,level,detection_accuracy\n");
    let clean_samples: Vec<DetectorSample> = subset
        .iter()
        .map(|f| DetectorSample {
            frame: f.tensor(),
            attacked: false,
        })
        .collect();
    let specificity = detector_accuracy(&detector, &clean_samples)?;
    detector_rows.push_str(&format!("clean,0,{specificity}\n"));

    for &kind in &kinds {
        for (idx, &level) in cfg.attack.levels(kind).iter().enumerate() {
            let spec = cfg.attack.spec_for(kind, idx)?;
            let attacked = attack_frames(
                &amc,
                &subset,
                &spec,
                child_seed(cfg.seed, &[0xe7a2, kind.name().len() as u64, idx as u64]),
            )?;
            let rel = attacked_set_rel(kind, level);
            let out_bundle = DatasetBundle {
                frame_len: bundle.frame_len,
                num_classes: bundle.num_classes,
                snr_grid_db: bundle.snr_grid_db.clone(),
                frames: attacked.frames.clone(),
            };
            write_dataset(&ws.path(&rel), &out_bundle)?;
            write_attack_meta(&ws.path(&rel), &attacked.meta)?;
            ws.declare(&rel, stage)?;

            let det_samples: Vec<DetectorSample> = attacked
                .frames
                .iter()
                .map(|f| DetectorSample {
                    frame: f.tensor(),
                    attacked: true,
                })
                .collect();
            let det_acc = detector_accuracy(&detector, &det_samples)?;
            detector_rows.push_str(&format!("{},{},{}\n", kind.name(), level, det_acc));
        }
    }
    fs::create_dir_all(ws.path("reports"))?;
    fs::write(ws.path(detector_eval_rel), detector_rows)?;
    ws.declare(detector_eval_rel, stage)?;
    ws.log_timing(stage, t.elapsed().as_secs_f64());
    Ok(())
}

fn confusion_csv(confusion: &[Vec<usize>]) -> String {
    let names: Vec<&str> = ModulationScheme::ALL.iter().map(|s| s.name()).collect();
    let mut out = format!("true\\pred,{}\n", names.join(","));
    for (i, row) in confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("{},{}\n", names[i], cells.join(",")));
    }
    out
}

pub fn cmd_explain(cfg: &ExperimentConfig, ws: &mut Workspace, force: bool) -> Result<()> {
    let stage = "explain";
    let kind = AttackKind::parse(&cfg.attribution.explain_kind)
        .ok_or_else(|| Error::Config("bad explain kind".into()))?;
    let mut rels = vec![
        "reports/heatmap.csv".to_string(),
        "reports/phi0.csv".to_string(),
        "reports/confusion_labeled.csv".to_string(),
        "reports/confusion_unclassified.csv".to_string(),
        phi_bar_rel(kind, None),
    ];
    for &level in &cfg.attack.levels(kind) {
        rels.push(phi_bar_rel(kind, Some(level)));
    }
    let rel_refs: Vec<&str> = rels.iter().map(|s| s.as_str()).collect();
    if ws.is_done(&rel_refs) && !force {
        log::info!("{stage}: up to date, skipping");
        return Ok(());
    }

    let t = Instant::now();
    let bundle = load_bundle(ws)?;
    let amc = load_amc(&ws.require(AMC_MODEL)?)?;
    let floor = cfg.defense.snr_floor_db;
    let pool = bundle.high_snr(Split::Val, floor);
    let labeled = pick_stratified(
        &pool,
        cfg.attribution.labeled_count,
        bundle.num_classes,
        child_seed(cfg.seed, &[0xeb, 0]),
    );
    let bg_pool = without(&pool, &labeled);
    let background = pick(
        &bg_pool,
        cfg.attribution.background_count,
        child_seed(cfg.seed, &[0xeb, 1]),
    );
    if labeled.is_empty() || background.is_empty() {
        return Err(Error::InvalidArgument(
            "not enough high-SNR validation frames for attribution sets".into(),
        ));
    }

    let att_cfg = AttributionConfig {
        ig_steps: cfg.attribution.ig_steps,
        eg_samples: cfg.attribution.eg_samples,
        target: TargetClass::TrueLabel,
    };

    // Averaged contribution curves: clean, then each attack level.
    let mut conditions: Vec<(Option<f64>, Option<AttackSpec>)> = vec![(None, None)];
    for (idx, &level) in cfg.attack.levels(kind).iter().enumerate() {
        conditions.push((Some(level), Some(cfg.attack.spec_for(kind, idx)?)));
    }
    for (level, spec) in &conditions {
        let (lab_frames, bg_frames) = attack_condition(
            &amc,
            &labeled,
            &background,
            spec.as_ref(),
            child_seed(cfg.seed, &[0xeb, 2]),
        )?;
        let lab_refs: Vec<&IQFrame> = lab_frames.iter().collect();
        let bg_tensors: Vec<crate::tensor::Tensor> =
            bg_frames.iter().map(|f| f.tensor()).collect();
        let report = build_report(
            &amc,
            &lab_refs,
            &bg_tensors,
            &att_cfg,
            cfg.attribution.m,
            child_seed(cfg.seed, &[0xeb, 3]),
        )?;
        let rel = phi_bar_rel(kind, *level);
        write_phi_bar(&ws.path(&rel), &report.phi_bar)?;
        ws.declare(&rel, stage)?;
        let att_rel = attributions_rel(kind, *level);
        write_attributions(&ws.path(&att_rel), &report.per_frame)?;
        ws.declare(&att_rel, stage)?;
        let mdes_rel = m_des_rel(kind, *level);
        write_m_des(&ws.path(&mdes_rel), &report.phi_bar, &report.m_des.indices)?;
        ws.declare(&mdes_rel, stage)?;
        if level.is_none() {
            let mut phi0 = String::from("class,phi0\n");
            for (i, v) in report.baseline_phi0.iter().enumerate() {
                phi0.push_str(&format!("{},{}\n", ModulationScheme::ALL[i].name(), v));
            }
            fs::write(ws.path("reports/phi0.csv"), phi0)?;
            ws.declare("reports/phi0.csv", stage)?;
        }
    }

    // Class-pair heatmap and the labeled-versus-unclassified consistency
    // confusions at the heatmap budget.
    let heat_spec = heatmap_spec(cfg, kind)?;
    let (lab_frames, bg_frames) = attack_condition(
        &amc,
        &labeled,
        &background,
        Some(&heat_spec),
        child_seed(cfg.seed, &[0xeb, 4]),
    )?;
    let lab_refs: Vec<&IQFrame> = lab_frames.iter().collect();
    let bg_tensors: Vec<crate::tensor::Tensor> = bg_frames.iter().map(|f| f.tensor()).collect();
    let heatmap = shapley_heatmap(
        &amc,
        &lab_refs,
        &bg_tensors,
        bundle.num_classes,
        cfg.attribution.eg_samples,
        child_seed(cfg.seed, &[0xeb, 5]),
    )?;
    write_class_matrix(&ws.path("reports/heatmap.csv"), &heatmap)?;
    ws.declare("reports/heatmap.csv", stage)?;

    let labeled_eval = evaluate(&amc, &lab_refs)?;
    fs::write(
        ws.path("reports/confusion_labeled.csv"),
        confusion_csv(&labeled_eval.confusion),
    )?;
    ws.declare("reports/confusion_labeled.csv", stage)?;

    let test_pool = bundle.high_snr(Split::Test, floor);
    let test_attacked = attack_frames(
        &amc,
        &test_pool,
        &heat_spec,
        child_seed(cfg.seed, &[0xeb, 6]),
    )?;
    let test_refs: Vec<&IQFrame> = test_attacked.frames.iter().collect();
    let test_eval = evaluate(&amc, &test_refs)?;
    fs::write(
        ws.path("reports/confusion_unclassified.csv"),
        confusion_csv(&test_eval.confusion),
    )?;
    ws.declare("reports/confusion_unclassified.csv", stage)?;

    ws.log_timing(stage, t.elapsed().as_secs_f64());
    Ok(())
}

pub(crate) fn heatmap_spec(cfg: &ExperimentConfig, kind: AttackKind) -> Result<AttackSpec> {
    Ok(match kind {
        AttackKind::Cw => AttackSpec::cw(cfg.attribution.heatmap_level.round() as usize),
        AttackKind::Fgsm => AttackSpec::fgsm(cfg.attribution.heatmap_level),
        AttackKind::Bim => AttackSpec::bim(
            cfg.attribution.heatmap_level,
            cfg.attack.bim_alphas.first().copied().unwrap_or(0.001),
            cfg.attack.iters,
        ),
        AttackKind::Pgd => AttackSpec::pgd(
            cfg.attribution.heatmap_level,
            cfg.attack.pgd_step(cfg.attribution.heatmap_level),
            cfg.attack.iters,
        ),
    })
}

fn level_tag(level: Option<f64>) -> String {
    match level {
        None => "clean".to_string(),
        Some(v) => format!("{v}"),
    }
}

pub(crate) fn phi_bar_rel(kind: AttackKind, level: Option<f64>) -> String {
    format!("reports/phi_bar_{}_{}.csv", kind.name(), level_tag(level))
}

fn attributions_rel(kind: AttackKind, level: Option<f64>) -> String {
    format!("reports/attributions_{}_{}.att", kind.name(), level_tag(level))
}

fn m_des_rel(kind: AttackKind, level: Option<f64>) -> String {
    format!("reports/m_des_{}_{}.csv", kind.name(), level_tag(level))
}

fn write_m_des(path: &Path, phi_bar: &[f64], indices: &[usize]) -> Result<()> {
    let mut out = String::from("rank,index,phi\n");
    for (rank, &i) in indices.iter().enumerate() {
        out.push_str(&format!("{rank},{i},{}\n", phi_bar[i]));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Attack the labeled and background sets with one spec (or pass them
/// through unchanged for the clean condition).
fn attack_condition(
    net: &AmcNetwork,
    labeled: &[&IQFrame],
    background: &[&IQFrame],
    spec: Option<&AttackSpec>,
    seed: u64,
) -> Result<(Vec<IQFrame>, Vec<IQFrame>)> {
    match spec {
        None => Ok((
            labeled.iter().map(|f| (*f).clone()).collect(),
            background.iter().map(|f| (*f).clone()).collect(),
        )),
        Some(s) => {
            let lab = attack_frames(net, labeled, s, child_seed(seed, &[1]))?;
            let bg = attack_frames(net, background, s, child_seed(seed, &[2]))?;
            Ok((lab.frames, bg.frames))
        }
    }
}

pub fn cmd_defend(cfg: &ExperimentConfig, ws: &mut Workspace, force: bool) -> Result<()> {
    let stage = "defend";
    if ws.is_done(&[DEFENSE_CSV]) && !force {
        log::info!("{stage}: up to date, skipping");
        return Ok(());
    }
    let t = Instant::now();
    let bundle = load_bundle(ws)?;
    let amc = load_amc(&ws.require(AMC_MODEL)?)?;
    let detector = load_detector(&ws.require(DETECTOR_MODEL)?)?;
    run_defense_comparison(cfg, ws, &bundle, &amc, &detector)?;
    ws.log_timing(stage, t.elapsed().as_secs_f64());
    Ok(())
}

pub fn cmd_report(cfg: &ExperimentConfig, ws: &mut Workspace, force: bool) -> Result<()> {
    let stage = "report";
    if ws.is_done(&["reports/accuracy_table.csv"]) && !force {
        log::info!("{stage}: up to date, skipping");
        return Ok(());
    }
    let t = Instant::now();
    write_reports(cfg, ws)?;
    ws.log_timing(stage, t.elapsed().as_secs_f64());
    Ok(())
}

pub const STAGE_ORDER: [&str; 7] = [
    "gen-data",
    "train-amc",
    "train-detector",
    "attack",
    "explain",
    "defend",
    "report",
];

pub fn run_stage(
    name: &str,
    cfg: &ExperimentConfig,
    ws: &mut Workspace,
    force: bool,
) -> Result<()> {
    match name {
        "gen-data" => cmd_gen_data(cfg, ws, force),
        "train-amc" => cmd_train_amc(cfg, ws, force),
        "train-detector" => cmd_train_detector(cfg, ws, force),
        "attack" => cmd_attack(cfg, ws, force),
        "explain" => cmd_explain(cfg, ws, force),
        "defend" => cmd_defend(cfg, ws, force),
        "report" => cmd_report(cfg, ws, force),
        other => Err(Error::Config(format!("unknown stage {other:?}"))),
    }
}

pub fn cmd_all(
    cfg: &ExperimentConfig,
    ws: &mut Workspace,
    force: bool,
    stage_filter: Option<&str>,
) -> Result<()> {
    let selected: Vec<&str> = match stage_filter {
        None => STAGE_ORDER.to_vec(),
        Some(list) => {
            let wanted: Vec<&str> = list.split(',').map(str::trim).collect();
            for w in &wanted {
                if !STAGE_ORDER.contains(w) {
                    return Err(Error::Config(format!("unknown stage {w:?} in filter")));
                }
            }
            STAGE_ORDER
                .iter()
                .copied()
                .filter(|s| wanted.contains(s))
                .collect()
        }
    };
    for name in selected {
        log::info!("running stage {name}");
        run_stage(name, cfg, ws, force)?;
    }
    Ok(())
}
