use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use signlab::data::{generate_dataset, read_dataset, supports_disjoint, write_dataset};
use signlab::harness::config::RunConfig;
use signlab::harness::pipeline::{run, save_run, verify_trace, VerifyOptions};
use signlab::harness::report::{
    sign_table_csv, sign_table_markdown, stage_overview_markdown, timeline_csv, timeline_markdown, verify_text,
};
use signlab::harness::sweep::{run_sweep, Sweep};
use signlab::harness::trace_file::{loss_csv, TraceFile};
use signlab::harness::{exit_code, EXIT_FAILED, EXIT_INCONCLUSIVE};
use signlab::optim::OptimizerKind;
use signlab::probe::sign_table;
use signlab::theory::{check_regime, TimeInputs, Verdict};
use signlab::{Error, Result};

#[derive(Parser)]
#[command(name = "signlab", version, about = "Sign gradient descent on a softmax attention toy model")]
struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress and summary output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a run config.
    Generate {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a run directory (trace, checkpoint, config, loss CSV).
    Train(TrainArgs),
    /// Check a trace against the stage predicates and predicted transition times.
    Verify {
        trace: PathBuf,
        /// Write `<REPORT>.json` and `<REPORT>.txt`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a grid of configs and write a summary CSV.
    Sweep {
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Render tables from a trace file or a sweep summary.
    Report {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
        /// Iteration compared with initialization in the sign table.
        #[arg(long, default_value_t = 10.0)]
        at: f64,
        /// Write the tables into this directory instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Md,
}

#[derive(clap::Args)]
struct TrainArgs {
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// signgd, gd, gd_momentum or adam.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    iters: Option<u64>,
    /// `EVERY` or `DENSE_UNTIL:EVERY`.
    #[arg(long)]
    probe_cadence: Option<String>,
    /// Prepend a segment of `2 * ZOOM` steps at `eta / ZOOM`.
    #[arg(long)]
    zoom: Option<u64>,
    /// Train on this dataset file instead of generating one.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Train even when the timestep formulas do not apply.
    #[arg(long)]
    any_regime: bool,
}

struct Ctx {
    seed: Option<u64>,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            let _ = writeln!(std::io::stdout(), "{}", msg.as_ref());
        }
    }

    fn load_config(&self, path: &Path) -> Result<RunConfig> {
        let mut config = RunConfig::load(path)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

fn parse_cadence(text: &str) -> Result<(u64, u64)> {
    let bad = || Error::Config(format!("--probe-cadence {text:?}: expected EVERY or DENSE_UNTIL:EVERY"));
    let parts: Vec<&str> = text.split(':').collect();
    let nums: Vec<u64> = parts.iter().map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
    match nums[..] {
        [every] if every > 0 => Ok((0, every)),
        [dense, every] if every > 0 => Ok((dense, every)),
        _ => Err(bad()),
    }
}

fn generate(ctx: &Ctx, config: &Path, out: &Path) -> Result<i32> {
    let config = ctx.load_config(config)?;
    let dataset = generate_dataset(&config.data_config())?;
    write_dataset(&dataset, BufWriter::new(File::create(out)?))?;
    ctx.say(format!("wrote {}", out.display()));
    ctx.say(format!("n: {}", dataset.len()));
    ctx.say(format!("s: {}", config.s));
    ctx.say(format!("supports disjoint: {}", supports_disjoint(&dataset)));
    Ok(0)
}

fn train(ctx: &Ctx, args: &TrainArgs) -> Result<i32> {
    let mut config = ctx.load_config(&args.config)?;
    if let Some(kind) = &args.optimizer {
        config.optimizer.kind = kind.parse::<OptimizerKind>()?;
    }
    if let Some(eta) = args.eta {
        config.optimizer.eta = eta;
    }
    if let Some(b) = args.beta1 {
        config.optimizer.beta1 = b;
    }
    if let Some(b) = args.beta2 {
        config.optimizer.beta2 = b;
    }
    if let Some(e) = args.eps {
        config.optimizer.epsilon = e;
    }
    if let Some(iters) = args.iters {
        config.iters = iters;
    }
    if let Some(text) = &args.probe_cadence {
        let (dense, every) = parse_cadence(text)?;
        config.probe.dense_until = dense;
        config.probe.every = every;
    }
    if args.zoom.is_some() {
        config.zoom = args.zoom;
    }
    config.validate()?;
    if !args.any_regime {
        let inputs = TimeInputs::new(&config.data_config(), &config.model_config(), config.optimizer.eta);
        check_regime(&inputs, VerifyOptions::default().constants)?;
    }
    let dataset = match &args.dataset {
        Some(path) => Some(read_dataset(BufReader::new(File::open(path)?))?),
        None => None,
    };
    ctx.say(format!("training {} for {} iterations", config.optimizer.kind.name(), config.iters));
    let artifacts = run(&config, dataset)?;
    let paths = save_run(&artifacts, &args.out)?;
    ctx.say(format!("wrote {}", paths.trace.display()));
    ctx.say(format!("final train loss L_S: {:.6e}", artifacts.final_train_loss));
    match artifacts.final_test_loss {
        Some(l) => ctx.say(format!("final test loss L_D: {l:.6e}")),
        None => ctx.say("final test loss L_D: not evaluated"),
    }
    Ok(0)
}

fn verdict_code(v: Verdict) -> i32 {
    match v {
        Verdict::Pass | Verdict::NotApplicable => 0,
        Verdict::Fail => EXIT_FAILED,
        Verdict::Inconclusive => EXIT_INCONCLUSIVE,
    }
}

fn verify(ctx: &Ctx, trace: &Path, report_path: Option<&Path>) -> Result<i32> {
    let file = TraceFile::load(trace)?;
    let report = verify_trace(&file, &VerifyOptions::default())?;
    let text = verify_text(&report);
    if let Some(prefix) = report_path {
        if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(prefix.with_extension("json"), serde_json::to_string_pretty(&report)?)?;
        fs::write(prefix.with_extension("txt"), &text)?;
    }
    ctx.say(text);
    Ok(verdict_code(report.overall))
}

fn sweep(ctx: &Ctx, path: &Path, out: &Path, jobs: usize) -> Result<i32> {
    let sweep = Sweep::load(path)?;
    ctx.say(format!("{} runs, {} at a time", sweep.runs.len(), jobs.max(1)));
    let rows = run_sweep(&sweep, out, jobs, &VerifyOptions::default())?;
    let errored = rows.iter().filter(|r| r.error.is_some()).count();
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("run {} ({}): {}", r.run.index, r.run.params, r.error.as_deref().unwrap_or(""));
    }
    ctx.say(format!("wrote {} ({} of {} runs errored)", out.join("summary.csv").display(), errored, rows.len()));
    Ok(if errored > 0 { EXIT_FAILED } else { 0 })
}

fn summary_markdown(csv: &str) -> String {
    let mut out = String::new();
    for (k, line) in csv.lines().enumerate() {
        let cells = split_csv_line(line);
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
        if k == 0 {
            out.push_str(&format!("|{}\n", "---|".repeat(cells.len())));
        }
    }
    out
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut cells = vec![String::new()];
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted && chars.peek() == Some(&'"') => {
                chars.next();
                cells.last_mut().unwrap().push('"');
            }
            '"' => quoted = !quoted,
            ',' if !quoted => cells.push(String::new()),
            c => cells.last_mut().unwrap().push(c),
        }
    }
    cells
}

fn emit(out: Option<&Path>, name: &str, body: &str, ctx: &Ctx) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), body)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            if !ctx.quiet {
                writeln!(stdout, "# {name}")?;
            }
            stdout.write_all(body.as_bytes())?;
            writeln!(stdout)?;
        }
    }
    Ok(())
}

fn report(ctx: &Ctx, input: &Path, format: Format, at: f64, out: Option<&Path>) -> Result<i32> {
    let text = fs::read_to_string(input)?;
    if text.starts_with("run,") {
        match format {
            Format::Csv => emit(out, "summary.csv", &text, ctx)?,
            Format::Md => emit(out, "summary.md", &summary_markdown(&text), ctx)?,
        }
        return Ok(0);
    }
    let file = TraceFile::read(text.as_bytes())?;
    let merged = file.merged()?;
    let first = merged.snapshots.first().ok_or_else(|| Error::Inconclusive("trace has no snapshots".into()))?;
    let later = merged
        .at_or_before(at)
        .ok_or_else(|| Error::Inconclusive(format!("no snapshot at or before t = {at}")))?;
    let table = sign_table(first, later)?;
    let verified = verify_trace(&file, &VerifyOptions::default());
    if let Err(e) = &verified {
        eprintln!("timeline unavailable: {e}");
    }
    match format {
        Format::Csv => {
            emit(out, "sign_table.csv", &sign_table_csv(&table), ctx)?;
            emit(out, "loss.csv", &loss_csv(&file.main), ctx)?;
            if let Ok(r) = &verified {
                emit(out, "timeline.csv", &timeline_csv(&r.stages.predicted, &r.stages.measured), ctx)?;
            }
        }
        Format::Md => {
            let mut md = String::from("## Stages\n\n");
            md.push_str(&stage_overview_markdown(verified.as_ref().ok().map(|r| &r.stages)));
            md.push_str("\n## Sign alignment between query and key noise\n\n");
            md.push_str(&sign_table_markdown(&table));
            if let Ok(r) = &verified {
                md.push_str("\n## Timeline\n\n");
                md.push_str(&timeline_markdown(&r.stages.predicted, &r.stages.measured));
            }
            emit(out, "report.md", &md, ctx)?;
            if out.is_some() {
                emit(out, "loss.csv", &loss_csv(&file.main), ctx)?;
            }
        }
    }
    Ok(0)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let ctx = Ctx { seed: cli.seed, quiet: cli.quiet };
    match &cli.command {
        Command::Generate { config, out } => generate(&ctx, config, out),
        Command::Train(args) => train(&ctx, args),
        Command::Verify { trace, report: r } => verify(&ctx, trace, r.as_deref()),
        Command::Sweep { sweep: s, out, jobs } => sweep(&ctx, s, out, *jobs),
        Command::Report { input, format, at, out } => report(&ctx, input, *format, *at, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
