mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use leaklab::datagen::{self, LabeledDataset};
use leaklab::experiment::{self, Benchmark, Histogram, Seeds};
use leaklab::nn::Mlp;
use leaklab::report::{self, ReportError};
use leaklab::service::{self, TraceMode, TraceRow};

use config::{ConfigError, ExperimentConfig, PathsSection};

#[derive(Debug, Parser)]
#[command(name = "leaklab", version, about = "Timing side-channel experiments on zero-skipping inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config file; built-in benchmark defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `base_seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory that relative paths in the config resolve against.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate and split the synthetic dataset.
    Gen,
    /// Train the victim model on the train split.
    Train,
    /// Profile the service and infer the hidden attribute.
    Attack,
    /// Run the attack against each defense.
    DefendEval,
    /// Train and attack victims of each tabulated size.
    ScalingStudy,
}

#[derive(Debug, thiserror::Error)]
enum RunError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Experiment(#[from] experiment::Error),
    #[error("{0}")]
    Report(#[from] ReportError),
    #[error("{0}")]
    Other(String),
}

impl RunError {
    fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) => 2,
            _ => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            _ => "runtime",
        }
    }
}

fn other(e: impl std::fmt::Display) -> RunError {
    RunError::Other(e.to_string())
}

struct Context {
    bench: Benchmark,
    cfg: ExperimentConfig,
    seeds: Seeds,
    paths: PathsSection,
}

impl Context {
    fn load_dataset(&self) -> Result<LabeledDataset, RunError> {
        datagen::load(&self.paths.dataset).map_err(other)
    }

    fn load_model(&self, ds: &LabeledDataset) -> Result<Mlp, RunError> {
        let model = Mlp::load(&self.paths.model).map_err(other)?;
        let expected = ds.n_features() + ds.k_sensitive;
        if model.spec().input_dim != expected {
            return Err(RunError::Other(format!(
                "model {} expects {} inputs but the dataset provides {expected}",
                self.paths.model.display(),
                model.spec().input_dim
            )));
        }
        Ok(model)
    }

    fn reports_dir(&self) -> Result<&Path, RunError> {
        let dir = &self.paths.reports;
        std::fs::create_dir_all(dir).map_err(|e| RunError::Other(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), RunError> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let bench = cfg.benchmark()?;
    let base_seed = cli.seed.unwrap_or(cfg.base_seed);
    let ctx = Context {
        bench,
        seeds: Seeds::from_base(base_seed),
        paths: cfg.paths.resolve(&cli.out),
        cfg,
    };
    match cli.command {
        Command::Gen => gen(&ctx),
        Command::Train => train(&ctx),
        Command::Attack => attack(&ctx),
        Command::DefendEval => defend_eval(&ctx),
        Command::ScalingStudy => scaling_study(&ctx),
    }
}

fn ensure_parent(path: &Path) -> Result<(), RunError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| RunError::Other(format!("cannot create {}: {e}", dir.display())))?;
    }
    Ok(())
}

fn gen(ctx: &Context) -> Result<(), RunError> {
    let ds = ctx.bench.dataset(&ctx.seeds)?;
    ensure_parent(&ctx.paths.dataset)?;
    datagen::save(&ds, &ctx.paths.dataset).map_err(other)?;
    println!("wrote {} rows to {}", ds.rows.len(), ctx.paths.dataset.display());
    Ok(())
}

fn train(ctx: &Context) -> Result<(), RunError> {
    let ds = ctx.load_dataset()?;
    let spec = ctx.bench.model_spec(&ds)?;
    let victim = experiment::train_victim(&ds, spec, &ctx.bench.victim, &ctx.seeds)?;
    ensure_parent(&ctx.paths.model)?;
    victim.model.save(&ctx.paths.model).map_err(other)?;
    report::write_victim(&ctx.reports_dir()?.join("victim.csv"), &victim)?;

    println!("train_accuracy {:.2}", victim.train_accuracy);
    println!("attribute mean_sparsity");
    for (a, s) in victim.class_sparsity.iter().enumerate() {
        println!("a{a} {s:.4}");
    }
    Ok(())
}

fn attack(ctx: &Context) -> Result<(), RunError> {
    let ds = ctx.load_dataset()?;
    let model = ctx.load_model(&ds)?;
    let svc = experiment::build_service(&ds, model, ctx.bench.timing, ctx.bench.defense)?;
    let run = experiment::run_attack(&svc, &ds, &ctx.bench.attack, &ctx.seeds)?;

    let reps = ctx.bench.attack.repetitions;
    let traces: Vec<TraceRow> = run
        .aux
        .iter()
        .chain(&run.test)
        .enumerate()
        .flat_map(|(i, p)| {
            p.responses.iter().enumerate().map(move |(r, resp)| TraceRow {
                query_id: (i * reps + r) as u64,
                identifier: p.identifier.clone(),
                latency_cycles: resp.latency_cycles,
                predicted_label: resp.predicted_label,
                attribute: None,
                client_features: p.client_features.clone(),
            })
        })
        .collect();
    ensure_parent(&ctx.paths.traces)?;
    service::write_traces(&ctx.paths.traces, &traces, TraceMode::Attack).map_err(other)?;

    let dir = ctx.reports_dir()?;
    report::write_leakage(&dir.join("leakage.csv"), "attack", &run)?;
    report::write_per_class(&dir.join("leakage_per_class.csv"), &run.report)?;
    report::write_d_matrix(&dir.join("cohens_d.csv"), &run.report)?;
    let hist = Histogram::of_run(&run, ds.k_sensitive, ctx.cfg.attack.histogram_bins);
    report::write_histogram(&dir.join("latency_histogram.csv"), &hist)?;

    let r = &run.report;
    println!(
        "accuracy {:.2} weighted_f1 {:.2} baseline {} {:.2} advantage_pp {:+.2} mean_abs_d {:.3}",
        r.accuracy,
        100.0 * r.weighted_f1,
        r.baseline.as_str(),
        r.baseline_pct,
        r.advantage_pp,
        r.mean_abs_d
    );
    if let Some(c) = run.cluster_accuracy {
        println!("cluster_accuracy {c:.2}");
    }
    Ok(())
}

fn defend_eval(ctx: &Context) -> Result<(), RunError> {
    let ds = ctx.load_dataset()?;
    let model = ctx.load_model(&ds)?;
    let svc = experiment::build_service(&ds, model, ctx.bench.timing, Default::default())?;
    let rows: Vec<_> = experiment::defend_eval(&ds, &svc, &ctx.bench.attack, &ctx.seeds)?
        .into_iter()
        .map(|(row, _)| row)
        .collect();
    report::write_defenses(&ctx.reports_dir()?.join("defenses.csv"), &rows)?;

    println!("defense accuracy advantage_pp overhead energy_ratio latency_inflation violation_rate");
    for r in &rows {
        println!(
            "{} {:.2} {:+.2} {:.4} {:.4} {:.4} {:.4}",
            r.defense.as_str(),
            r.accuracy,
            r.advantage_pp,
            r.overhead_fraction,
            r.energy_ratio,
            r.latency_inflation,
            r.violation_rate
        );
    }
    Ok(())
}

fn scaling_study(ctx: &Context) -> Result<(), RunError> {
    let ds = ctx.load_dataset()?;
    let mut rows = Vec::new();
    println!("width depth params activations mean_abs_d accuracy");
    for (w, d) in experiment::scaling_points() {
        let row = experiment::scaling_row(&ctx.bench, &ds, w, d, &ctx.seeds)?;
        println!(
            "{} {} {} {} {:.3} {:.2}",
            row.width, row.depth, row.params, row.activations, row.mean_abs_d, row.accuracy
        );
        rows.push(row);
    }
    report::write_scaling(&ctx.reports_dir()?.join("scaling.csv"), &rows)?;
    Ok(())
}
