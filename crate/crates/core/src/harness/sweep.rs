//! Grid sweeps over run configurations.
//!
//! ```toml
//! base = "row_a.toml"          # or an inline [base] table
//! seeds = [1, 2, 3]
//!
//! [grid]
//! "optimizer.beta1" = [0.0, 0.5, 0.9]
//! "optimizer.beta2" = [0.9, 0.99, 0.999]
//! ```
//!
//! Runs are the Cartesian product of the grid axes and the seed list, in
//! sorted key order with seeds innermost. No axes at all means no runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::probe::sign_table;
use crate::theory::{opposite_resolution, OppositeResolution};

use super::config::RunConfig;
use super::pipeline::{run, save_run, verify_trace, VerifyOptions, VerifyReport};

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum BaseSpec {
    Path(PathBuf),
    Inline(toml::Value),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    base: BaseSpec,
    #[serde(default)]
    seeds: Vec<u64>,
    #[serde(default)]
    grid: BTreeMap<String, Vec<toml::Value>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub index: usize,
    /// Grid assignments for this run, `key=value` joined by `;`.
    pub params: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub runs: Vec<SweepRun>,
}

impl Sweep {
    /// Parses a sweep file; a `base` path is resolved against `dir`.
    pub fn parse(text: &str, dir: &Path) -> Result<Self> {
        let file: SweepFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let base = match file.base {
            BaseSpec::Path(p) => RunConfig::load(&dir.join(p))?,
            BaseSpec::Inline(v) => {
                let text = toml::to_string(&v).map_err(|e| Error::Config(e.to_string()))?;
                RunConfig::parse(&text)?
            }
        };
        let mut axes: Vec<(String, Vec<toml::Value>)> = file.grid.into_iter().collect();
        if !file.seeds.is_empty() {
            axes.push(("seed".into(), file.seeds.iter().map(|&s| toml::Value::Integer(s as i64)).collect()));
        }
        if axes.is_empty() || axes.iter().any(|(_, v)| v.is_empty()) {
            return Ok(Self { runs: Vec::new() });
        }
        let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
        for (key, values) in &axes {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        let runs = combos
            .into_iter()
            .enumerate()
            .map(|(index, assignment)| {
                let mut config = base.clone();
                for (k, v) in &assignment {
                    config = config.with_override(k, v)?;
                }
                let params = assignment.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
                Ok(SweepRun { index, params, config })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { runs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Outcome of one sweep run; `report` is absent when the run errored.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run: SweepRun,
    pub dir: PathBuf,
    pub error: Option<String>,
    pub final_train_loss: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub opposite: Option<OppositeResolution>,
    pub report: Option<VerifyReport>,
}

pub const SUMMARY_HEADER: &str = "run,seed,params,status,error,final_train_loss,final_test_loss,\
t_stage1_end,t_qk_aligned,t_signal_departure,t_s21_decayed,t_key_flip,t_query_flip,t_final_aligned,\
stage_I,stage_II,stage_III,stage_IV,overall,opposite_to_positive,opposite_to_negative";

/// 17 significant digits, empty for missing values.
pub fn fmt17(x: Option<f64>) -> String {
    x.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn summary_csv(rows: &[RunSummary]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let m = r.report.as_ref().map(|rep| rep.stages.measured.clone()).unwrap_or_default();
        let stage = |name: &str| {
            r.report
                .as_ref()
                .and_then(|rep| rep.stages.verdict(name))
                .map(|v| v.verdict.to_string())
                .unwrap_or_default()
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.run.index,
            r.run.config.seed,
            csv_field(&r.run.params),
            if r.error.is_some() { "error" } else { "ok" },
            csv_field(r.error.as_deref().unwrap_or("")),
            fmt17(r.final_train_loss),
            fmt17(r.final_test_loss),
            fmt17(m.t_stage1_end),
            fmt17(m.t_qk_aligned),
            fmt17(m.t_signal_departure),
            fmt17(m.t_s21_decayed),
            fmt17(m.t_key_flip),
            fmt17(m.t_query_flip),
            fmt17(m.t_final_aligned),
            stage("I"),
            stage("II"),
            stage("III"),
            stage("IV"),
            r.report.as_ref().map(|rep| rep.overall.to_string()).unwrap_or_default(),
            r.opposite.map(|o| o.to_positive.to_string()).unwrap_or_default(),
            r.opposite.map(|o| o.to_negative.to_string()).unwrap_or_default(),
        );
    }
    out
}

/// Trains, saves and verifies a single run.
pub fn execute(run_spec: &SweepRun, out_dir: &Path, options: &VerifyOptions) -> RunSummary {
    let dir = out_dir.join(format!("run-{:04}", run_spec.index));
    let mut summary = RunSummary {
        run: run_spec.clone(),
        dir: dir.clone(),
        error: None,
        final_train_loss: None,
        final_test_loss: None,
        opposite: None,
        report: None,
    };
    let result = (|| -> Result<()> {
        let artifacts = run(&run_spec.config, None)?;
        save_run(&artifacts, &dir)?;
        summary.final_train_loss = Some(artifacts.final_train_loss);
        summary.final_test_loss = artifacts.final_test_loss;
        let trace = &artifacts.trace.main;
        let report = verify_trace(&artifacts.trace, options)?;
        let t2 = report.stages.predicted.t2_sgn.round().max(1.0);
        if let (Some(first), Some(later)) = (trace.snapshots.first(), trace.at_or_before(t2)) {
            if sign_table(first, later).is_ok() {
                summary.opposite = opposite_resolution(first, later).ok();
            }
        }
        fs::write(dir.join("verify.json"), serde_json::to_string_pretty(&report)?)?;
        summary.report = Some(report);
        Ok(())
    })();
    if let Err(e) = result {
        summary.error = Some(e.to_string());
    }
    summary
}

/// Runs every sweep entry with at most `jobs` in flight and writes
/// `summary.csv` into `out_dir`.
pub fn run_sweep(sweep: &Sweep, out_dir: &Path, jobs: usize, options: &VerifyOptions) -> Result<Vec<RunSummary>> {
    fs::create_dir_all(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows: Vec<RunSummary> = pool.install(|| sweep.runs.par_iter().map(|r| execute(r, out_dir, options)).collect());
    fs::write(out_dir.join("summary.csv"), summary_csv(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[base]
d = 40
n = 2
s = 3
sigma_p = 1.0
orthogonal = true
sigma_0 = 0.01
m_v = 2
m_k = 2
iters = 3
[base.optimizer]
kind = "adam"
eta = 1e-3
"#;

    #[test]
    fn grid_expansion_order() {
        let text = format!("seeds = [1, 2]\n{BASE}\n[grid]\n\"optimizer.beta1\" = [0.0, 0.5, 0.9]\n\"optimizer.beta2\" = [0.9, 0.999]\n");
        let sweep = Sweep::parse(&text, Path::new(".")).unwrap();
        assert_eq!(sweep.runs.len(), 12);
        assert_eq!(sweep.runs[0].params, "optimizer.beta1=0.0;optimizer.beta2=0.9;seed=1");
        assert_eq!(sweep.runs[11].params, "optimizer.beta1=0.9;optimizer.beta2=0.999;seed=2");
        assert_eq!(sweep.runs[11].config.optimizer.beta1, 0.9);
        assert_eq!(sweep.runs[11].config.seed, 2);
    }

    #[test]
    fn empty_grid_has_no_runs() {
        let sweep = Sweep::parse(BASE, Path::new(".")).unwrap();
        assert!(sweep.runs.is_empty());
        assert_eq!(summary_csv(&[]), format!("{SUMMARY_HEADER}\n"));
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt17(Some(0.1)), "1.0000000000000001e-1");
        assert_eq!(fmt17(None), "");
        let back: f64 = fmt17(Some(std::f64::consts::PI)).parse().unwrap();
        assert_eq!(back, std::f64::consts::PI);
    }
}
