//! One run end to end: data, initialization, optional zoom segment, main
//! training, persistence, and verification of a saved trace.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::model::{init_params, write_checkpoint, Head, Params};
use crate::optim::{run_training, OptimizerKind, TrainOptions};
use crate::probe::{beta_stats, increment_audit};
use crate::theory::{
    predicted_times, verify_attention_sparsity, verify_convergence, verify_stage_predicates, ConvergenceVerdict, SparsityVerdict,
    StageReport, TheoryConstants, Thresholds, TimeInputs, Verdict,
};

use super::config::RunConfig;
use super::trace_file::{loss_csv, TraceFile, TraceHeader, TRACE_FORMAT};

pub struct RunArtifacts {
    pub trace: TraceFile,
    pub params: Params,
    pub head: Option<Head>,
    pub final_train_loss: f64,
    pub final_test_loss: Option<f64>,
}

/// Trains per `config`. The dataset is generated from the config unless
/// one is supplied; a supplied dataset must match the config's shape.
pub fn run(config: &RunConfig, dataset: Option<Dataset>) -> Result<RunArtifacts> {
    config.validate()?;
    let dataset = match dataset {
        Some(ds) => {
            let c = &ds.config;
            if c.d != config.d || c.n != config.n || c.context_len != config.context_len {
                return Err(Error::Shape(format!(
                    "dataset has d = {}, n = {}, L = {} but the config asks for d = {}, n = {}, L = {}",
                    c.d, c.n, c.context_len, config.d, config.n, config.context_len
                )));
            }
            ds
        }
        None => generate_dataset(&config.data_config())?,
    };
    let params = init_params(&config.model_config())?;
    let beta = beta_stats(&params, &dataset);

    let zoom = match config.zoom {
        Some(factor) => {
            let mut spec = config.optimizer.clone();
            spec.eta /= factor as f64;
            let options = TrainOptions {
                iters: 2 * factor,
                test_every: None,
                time_scale: 1.0 / factor as f64,
                ..config.train_options()
            };
            Some(run_training(params.clone(), &dataset, &spec, &options)?.trace)
        }
        None => None,
    };
    let outcome = run_training(params, &dataset, &config.optimizer, &config.train_options())?;
    let final_test_loss = outcome.trace.last().and_then(|s| s.test_loss);
    let header = TraceHeader {
        format: TRACE_FORMAT.into(),
        version: 1,
        manifest: config.clone(),
        beta,
        context: outcome.trace.context.clone(),
        zoom_context: zoom.as_ref().map(|z| z.context.clone()),
    };
    Ok(RunArtifacts {
        trace: TraceFile { header, main: outcome.trace, zoom },
        params: outcome.params,
        head: outcome.head,
        final_train_loss: outcome.final_train_loss,
        final_test_loss,
    })
}

/// Files written for one run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
    pub trace: PathBuf,
    pub params: PathBuf,
    pub config: PathBuf,
    pub loss: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            trace: dir.join("trace.jsonl"),
            params: dir.join("params.ckpt"),
            config: dir.join("config.toml"),
            loss: dir.join("loss.csv"),
        }
    }
}

pub fn save_run(artifacts: &RunArtifacts, dir: &Path) -> Result<RunPaths> {
    fs::create_dir_all(dir)?;
    let paths = RunPaths::new(dir);
    artifacts.trace.save(&paths.trace)?;
    let model = artifacts.trace.header.manifest.model_config();
    write_checkpoint(&model, &artifacts.params, artifacts.head.as_ref(), BufWriter::new(File::create(&paths.params)?))?;
    fs::write(&paths.config, artifacts.trace.header.manifest.to_toml())?;
    fs::write(&paths.loss, loss_csv(&artifacts.trace.main))?;
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub skipped: Option<String>,
    pub steps_checked: usize,
    pub increments_checked: usize,
    pub flagged: usize,
    pub max_rel_deviation: f64,
    pub supports_disjoint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationEvidence {
    pub verdict: Verdict,
    pub test_loss: Option<f64>,
    pub zero_one: Option<f64>,
    pub lower_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub optimizer: OptimizerKind,
    pub stages: StageReport,
    pub convergence: ConvergenceVerdict,
    pub sparsity: SparsityVerdict,
    pub generalization: GeneralizationEvidence,
    pub audit: AuditSummary,
    /// Whether the convergence, sparsity and generalization verdicts count
    /// toward the overall verdict (SignGD only).
    pub theorem_applies: bool,
    pub overall: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub epsilon: f64,
    pub thresholds: Thresholds,
    pub constants: TheoryConstants,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { epsilon: 0.01, thresholds: Thresholds::default(), constants: TheoryConstants::default() }
    }
}

/// Inconclusive outranks fail, which outranks pass.
pub fn combine(verdicts: &[Verdict]) -> Verdict {
    if verdicts.contains(&Verdict::Inconclusive) {
        Verdict::Inconclusive
    } else if verdicts.contains(&Verdict::Fail) {
        Verdict::Fail
    } else if verdicts.iter().all(|v| *v == Verdict::NotApplicable) {
        Verdict::NotApplicable
    } else {
        Verdict::Pass
    }
}

/// Runs every verifier on a saved trace. A regime error from the timestep
/// formulas is returned as an error and no predicate is evaluated.
pub fn verify_trace(file: &TraceFile, options: &VerifyOptions) -> Result<VerifyReport> {
    let manifest = &file.header.manifest;
    let th = &options.thresholds;
    let inputs = TimeInputs::new(&manifest.data_config(), &manifest.model_config(), manifest.optimizer.eta);
    let predicted = predicted_times(&inputs, &file.header.beta, options.constants)?;
    let merged = file.merged()?;
    let stages = verify_stage_predicates(&merged, &predicted, th);
    let convergence = verify_convergence(&file.main, options.epsilon, &inputs, predicted.t4, th)?;
    let sparsity = verify_attention_sparsity(&file.main, th)?;
    let last = file.main.last().expect("non-empty after verification");
    let generalization = GeneralizationEvidence {
        verdict: match last.test_loss {
            Some(l) if l >= 0.1 => Verdict::Pass,
            Some(_) => Verdict::Fail,
            None => Verdict::Inconclusive,
        },
        test_loss: last.test_loss,
        zero_one: last.test_zero_one,
        lower_bound: 0.1,
    };
    let audit = increment_audit(&file.main);
    let audit = AuditSummary {
        skipped: audit.skipped,
        steps_checked: audit.steps_checked,
        increments_checked: audit.increments_checked,
        flagged: audit.flags.len(),
        max_rel_deviation: audit.max_rel_deviation,
        supports_disjoint: file.main.context.supports_disjoint,
    };
    let optimizer = file.main.context.optimizer;
    let theorem_applies = optimizer == OptimizerKind::Signgd;
    let mut all: Vec<Verdict> = stages.verdicts.iter().map(|v| v.verdict).collect();
    if stages.preflight.is_some() {
        all.push(Verdict::Inconclusive);
    }
    if theorem_applies {
        all.extend([convergence.verdict, sparsity.verdict, generalization.verdict]);
    }
    Ok(VerifyReport {
        optimizer,
        overall: combine(&all),
        stages,
        convergence,
        sparsity,
        generalization,
        audit,
        theorem_applies,
    })
}
