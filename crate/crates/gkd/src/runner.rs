//! Runs phases, writes artifacts and evaluates whatever checkpoints exist.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gkd_core::nets::{Models, NetKind};
use gkd_core::synthdata::{make_dataset, Dataset, Split};
use gkd_core::trainer::{evaluate, predict_split, LossRow, Phase, Pipeline};
use serde::Serialize;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{io_err, GkdError, Result};
use crate::hash::ConfigHash;
use crate::lock::RunLock;
use crate::pgm;
use crate::report::{self, ModelReport};

pub const RUN_MANIFEST: &str = "run.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub phases: Vec<Phase>,
    pub eval_only: bool,
    /// Predicted masks to write per model and test split.
    pub dump_masks: usize,
}

#[derive(Debug, Default)]
pub struct RunSummary {
    pub ran: Vec<Phase>,
    pub loaded: Vec<Phase>,
    pub losses: BTreeMap<Phase, Vec<LossRow>>,
    pub reports: Vec<ModelReport>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config_hash: String,
    net_hash: String,
    seed: u64,
    domain_seed_a: u64,
    domain_seed_b: u64,
    phases_run: Vec<&'a str>,
    phases_loaded: Vec<&'a str>,
}

/// Fails with the first phase that is neither requested nor on disk.
pub fn check_prerequisites(out: &Path, phases: &[Phase]) -> Result<()> {
    for p in phases {
        for q in p.prerequisites() {
            if !phases.contains(q) && !checkpoint::exists(out, *q) {
                return Err(gkd_core::Error::MissingPrerequisite(q.tag()).into());
            }
        }
    }
    Ok(())
}

pub fn dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(make_dataset(cfg.domain_seed_a, cfg.domain_seed_b, cfg.n_train, cfg.n_test, &cfg.synth())?)
}

fn fresh_pipeline(cfg: &ExperimentConfig) -> Result<Pipeline> {
    let models = Models::new(&cfg.net(), cfg.seed)?;
    Ok(Pipeline::new(models, cfg.train()?, cfg.weights())?)
}

fn load_into(pipe: &mut Pipeline, cfg: &ExperimentConfig, out: &Path, phase: Phase) -> Result<()> {
    let loaded = checkpoint::load(out, phase)?;
    checkpoint::restore(pipe, &loaded, &cfg.net_hash())
}

pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let out = opts.out_dir.as_path();
    let mut phases = opts.phases.clone();
    phases.sort();
    phases.dedup();
    if !opts.eval_only {
        check_prerequisites(out, &phases)?;
    }
    let _lock = RunLock::acquire(out)?;
    let hash = cfg.hash();
    let net_hash = cfg.net_hash();
    let ds = dataset(cfg)?;
    let mut summary = RunSummary::default();

    if !opts.eval_only && !phases.is_empty() {
        let mut pipe = fresh_pipeline(cfg)?;
        let mut needed: Vec<Phase> = phases.iter().flat_map(|p| p.prerequisites().iter().copied()).collect();
        needed.sort();
        needed.dedup();
        for q in needed.into_iter().filter(|q| !phases.contains(q)) {
            load_into(&mut pipe, cfg, out, q)?;
            summary.loaded.push(q);
        }
        for &p in &phases {
            let rows = pipe.run_phase(p, &ds.train_a)?;
            checkpoint::save(out, &pipe.checkpoint(p)?, &rows, &hash, &net_hash)?;
            summary.losses.insert(p, rows);
            summary.ran.push(p);
        }
        let manifest = RunManifest {
            config_hash: hash.to_hex(),
            net_hash: net_hash.to_hex(),
            seed: cfg.seed,
            domain_seed_a: cfg.domain_seed_a,
            domain_seed_b: cfg.domain_seed_b,
            phases_run: summary.ran.iter().map(|p| p.tag()).collect(),
            phases_loaded: summary.loaded.iter().map(|p| p.tag()).collect(),
        };
        let path = out.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&path))?;
        let path = out.join("config.toml");
        fs::write(&path, cfg.to_toml_string()).map_err(io_err(&path))?;
    }

    summary.reports = evaluate_dir(cfg, out, &ds, opts.dump_masks)?;
    if opts.eval_only && summary.reports.is_empty() {
        return Err(GkdError::Config(format!(
            "nothing to evaluate: {} holds neither a P2 nor a P4 checkpoint",
            out.display()
        )));
    }
    Ok(summary)
}

/// Evaluates the P2 teacher, the P2 scratch student and the P4 student,
/// whichever have checkpoints under `out`, and writes the reports.
pub fn evaluate_dir(cfg: &ExperimentConfig, out: &Path, ds: &Dataset, dump_masks: usize) -> Result<Vec<ModelReport>> {
    let hash = cfg.hash();
    let has = |p| checkpoint::exists(out, p);
    let mut ec = cfg.eval();
    ec.with_fsd = has(Phase::P1Psae) && has(Phase::P3Msan);
    let mut targets = Vec::new();
    if has(Phase::P2Scratch) {
        targets.push(("teacher", NetKind::Teacher, Phase::P2Scratch));
        targets.push(("student_scratch", NetKind::Student, Phase::P2Scratch));
    }
    if has(Phase::P4Distill) {
        targets.push(("student_gkd", NetKind::Student, Phase::P4Distill));
    }
    let mut reports = Vec::new();
    for (name, kind, phase) in targets {
        let mut pipe = fresh_pipeline(cfg)?;
        for p in [Phase::P1Psae, Phase::P3Msan, phase] {
            if has(p) {
                load_into(&mut pipe, cfg, out, p)?;
            }
        }
        let m = &pipe.models;
        reports.push(ModelReport {
            model: name.to_string(),
            test_a: evaluate(m, kind, &ds.test_a, &ec)?,
            test_b: evaluate(m, kind, &ds.test_b, &ec)?,
        });
        if dump_masks > 0 {
            let stem = out.join("masks").join(name);
            dump(m, kind, &ds.test_a, dump_masks, ec.threshold, &stem, &hash)?;
            dump(m, kind, &ds.test_b, dump_masks, ec.threshold, &stem, &hash)?;
        }
    }
    if !reports.is_empty() {
        let path = out.join(REPORT_CSV);
        fs::write(&path, report::to_csv(&reports, &hash)).map_err(io_err(&path))?;
        let path = out.join(REPORT_TXT);
        fs::write(&path, report::to_text(&reports, &hash)).map_err(io_err(&path))?;
    }
    Ok(reports)
}

fn dump(m: &Models, kind: NetKind, split: &Split, n: usize, threshold: f64, stem: &Path, hash: &ConfigHash) -> Result<()> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    for (i, p) in predict_split(m, kind, split)?.iter().take(n).enumerate() {
        let bin = p.map(|v| if v >= threshold { 1.0 } else { 0.0 });
        let path = PathBuf::from(format!("{}_{}_{i:03}.pgm", stem.display(), split.name()));
        pgm::write(&path, &bin, hash)?;
    }
    Ok(())
}
