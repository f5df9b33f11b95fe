use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use augsearch::data::{generate_synthetic, Dataset, SyntheticKind};
use augsearch::eval::evaluate_policy;
use augsearch::policy::{Policy, DEFAULT_SIGMA};
use augsearch::report;
use augsearch::search::{run_search, PolicyTrace, SearchConfig};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

mod config;
mod manifest;

use config::RunConfig;
use manifest::Manifest;

/// Malformed user input: bad config, unreadable or invalid data files.
#[derive(Debug)]
pub struct BadInput(pub String);

impl std::fmt::Display for BadInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadInput {}

#[derive(Parser)]
#[command(
    name = "augsearch",
    version,
    about = "Search, evaluate and plot augmentation policies"
)]
struct Cli {
    /// Size of the worker pool (defaults to the number of cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.out.clone());
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the policy search and write policy.json, trace.csv and rounds.csv.
    Search(RunArgs),
    /// Retrain under a policy (or a baseline) and report test accuracy.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Policy file from `search`; without it a baseline is evaluated.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Baseline::None)]
        baseline: Baseline,
    },
    /// Run one search variant into `<out>/<variant>`.
    Ablate {
        #[arg(value_enum)]
        variant: Variant,
        #[command(flatten)]
        run: RunArgs,
        /// Replicas for the ensemble variant.
        #[arg(long, default_value_t = 2)]
        replicas: usize,
    },
    /// Probability curves (CSV and SVG) and a pie chart from a trace.
    Report {
        #[arg(long)]
        trace: PathBuf,
        /// Draw the pie from this policy instead of the last trace row.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert CSV rows `label,p_0,...` with pixels in 0..=255 to AUGD.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long)]
        classes: usize,
    },
    /// Rebuild a policy document from one row of a trace.
    ExportPolicy {
        #[arg(long)]
        trace: PathBuf,
        /// Outer step to export; defaults to the last row.
        #[arg(long)]
        step: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset in AUGD format.
    Generate {
        #[arg(long, default_value = SyntheticKind::ROTATION)]
        kind: String,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    None,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    NoKl,
    WarmStart,
    SingleStage,
    Ensemble,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::NoKl => "no-kl",
            Variant::WarmStart => "warm-start",
            Variant::SingleStage => "single-stage",
            Variant::Ensemble => "ensemble",
        }
    }

    fn apply(self, cfg: SearchConfig, replicas: usize) -> SearchConfig {
        match self {
            Variant::NoKl => cfg.no_kl(),
            Variant::WarmStart => cfg.warm_start(),
            Variant::SingleStage => cfg.single_stage(),
            Variant::Ensemble => cfg.ensemble(replicas),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AUGSEARCH_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for malformed input, 3 for numerical aborts, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<BadInput>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<augsearch::Error>() {
            return match err {
                augsearch::Error::Numerical(_) => 3,
                augsearch::Error::Io(_) => 1,
                _ => 2,
            };
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        augsearch::par::init_workers(w)?;
    }
    match cli.command {
        Command::Search(args) => {
            let (cfg, out) = args.load()?;
            search(&args.config, &cfg, &out, "search")
        }
        Command::Ablate {
            variant,
            run,
            replicas,
        } => {
            let (mut cfg, out) = run.load()?;
            cfg.search = variant.apply(cfg.search, replicas);
            cfg.search.validate().map_err(|e| BadInput(e.to_string()))?;
            let out = out.join(variant.name());
            fs::create_dir_all(&out)?;
            search(
                &run.config,
                &cfg,
                &out,
                &format!("ablate {}", variant.name()),
            )
        }
        Command::Evaluate {
            run,
            policy,
            baseline,
        } => evaluate(&run, policy.as_deref(), baseline),
        Command::Report { trace, policy, out } => report_cmd(&trace, policy.as_deref(), &out),
        Command::Convert {
            input,
            output,
            width,
            height,
            channels,
            classes,
        } => {
            let file = fs::File::open(&input)
                .map_err(|e| BadInput(format!("cannot read {}: {e}", input.display())))?;
            let data = Dataset::from_csv(file, width, height, channels, classes)
                .map_err(|e| BadInput(format!("{}: {e}", input.display())))?;
            data.save(&output)?;
            log::info!("wrote {} examples to {}", data.len(), output.display());
            Ok(())
        }
        Command::ExportPolicy {
            trace,
            step,
            sigma,
            out,
        } => {
            let policy = read_trace(&trace)?
                .policy_at(step, sigma)
                .map_err(|e| BadInput(e.to_string()))?;
            fs::write(&out, policy.to_json_string()?)?;
            Ok(())
        }
        Command::Generate {
            kind,
            n,
            side,
            seed,
            output,
        } => {
            let kind: SyntheticKind = kind.parse().map_err(|e| BadInput(format!("{e}")))?;
            let data =
                generate_synthetic(kind, n, side, seed).map_err(|e| BadInput(e.to_string()))?;
            data.save(&output)?;
            log::info!(
                "wrote {} {} examples to {}",
                n,
                kind.name(),
                output.display()
            );
            Ok(())
        }
    }
}

fn search(config_path: &Path, cfg: &RunConfig, out: &Path, command: &str) -> Result<()> {
    let mut manifest = Manifest::new(command, config_path, cfg)?;
    let splits = cfg.splits()?;
    log::info!(
        "search on {} train / {} val examples, seed {}",
        splits.train.len(),
        splits.val.len(),
        cfg.seed
    );
    match run_search(&cfg.search, &splits.train, &splits.val) {
        Ok(outcome) => {
            manifest.write_output(out, "policy.json", &outcome.policy.to_json_string()?)?;
            manifest.write_output(out, "trace.csv", &outcome.trace.to_csv())?;
            manifest.write_output(out, "rounds.csv", &outcome.trace.rounds_csv())?;
            for (r, p) in outcome.pretrained.iter().enumerate() {
                let name = format!("pretrained_{r}.bin");
                p.params.save(out.join(&name))?;
                manifest.outputs.push(name);
            }
            manifest.finish(out, "ok")?;
            log::info!("wrote {}", out.display());
            Ok(())
        }
        Err(abort) => {
            // flush what we have before reporting the failure
            manifest.write_output(out, "trace.csv", &abort.trace.to_csv())?;
            manifest.write_output(out, "rounds.csv", &abort.trace.rounds_csv())?;
            manifest.finish(out, &format!("aborted: {}", abort.error))?;
            let steps = abort.trace.records.len();
            Err(anyhow::Error::new(abort.error)
                .context(format!("search aborted after {steps} outer steps")))
        }
    }
}

fn evaluate(run: &RunArgs, policy_path: Option<&Path>, baseline: Baseline) -> Result<()> {
    let (cfg, out) = run.load()?;
    let mut manifest = Manifest::new("evaluate", &run.config, &cfg)?;
    let splits = cfg.splits()?;
    let arch = cfg.search.architecture(&splits.train)?;
    let (policy, label) = match (policy_path, baseline) {
        (Some(p), _) => {
            manifest.add_input(p)?;
            (Some(read_policy(p)?), p.display().to_string())
        }
        (None, Baseline::Uniform) => (Some(cfg.search.initial_policy()?), "uniform".to_string()),
        (None, Baseline::None) => (None, "none".to_string()),
    };
    let report = evaluate_policy(
        arch,
        policy.as_ref(),
        &splits,
        &cfg.eval,
        &cfg.eval_seeds,
        &label,
    )?;
    log::info!(
        "{label}: accuracy {:.4} +/- {:.4} over {} seeds",
        report.mean,
        report.ci_half_width,
        report.seeds.len()
    );
    manifest.write_output(out.as_path(), "eval.json", &report.to_json_string()?)?;
    report.append_to_ledger(out.join("ledger.csv"))?;
    manifest.outputs.push("ledger.csv".into());
    manifest.finish(&out, "ok")
}

fn report_cmd(trace_path: &Path, policy_path: Option<&Path>, out: &Path) -> Result<()> {
    let trace = read_trace(trace_path)?;
    fs::create_dir_all(out)?;
    fs::write(
        out.join("probabilities.csv"),
        report::probability_curves_csv(&trace),
    )?;
    fs::write(
        out.join("probabilities.svg"),
        report::probability_curves_svg(&trace),
    )?;
    let slices = match policy_path {
        Some(p) => report::policy_pie_slices(&read_policy(p)?)?,
        None if trace.records.is_empty() => {
            anyhow::bail!(BadInput(format!(
                "{} has no rows; pass --policy to draw the pie chart",
                trace_path.display()
            )))
        }
        None => report::trace_pie_slices(&trace)?,
    };
    fs::write(out.join("pie.svg"), report::pie_chart_svg(&slices))?;
    let summary = json!({
        "trace": trace_path,
        "steps": trace.records.len(),
        "transforms": trace.transforms.iter().map(|t| t.name()).collect::<Vec<_>>(),
    });
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

fn read_trace(path: &Path) -> Result<PolicyTrace> {
    let text = fs::read_to_string(path)
        .map_err(|e| BadInput(format!("cannot read trace {}: {e}", path.display())))?;
    Ok(PolicyTrace::from_csv(&text).map_err(|e| BadInput(format!("{}: {e}", path.display())))?)
}

fn read_policy(path: &Path) -> Result<Policy> {
    let text = fs::read_to_string(path)
        .map_err(|e| BadInput(format!("cannot read policy {}: {e}", path.display())))?;
    Ok(Policy::from_json_str(&text).map_err(|e| BadInput(format!("{}: {e}", path.display())))?)
}
