use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use prunelab::diagnostics::{
    check_class_balance, check_generalization_gap, check_grad_bound, check_init_correlations, check_noise_geometry,
    check_test_noise_concentration, validate_condition_set, CheckReport, ConditionConstants, DiagConfig,
};
use prunelab::fmt::float17;
use prunelab::model::{grad_norm_bound_check, Checkpoint, MaskedNet};
use prunelab::pruner::Mask;
use prunelab::synthdata::{fresh_eval_set, generate_dataset};
use prunelab_harness::cell::run_cell;
use prunelab_harness::config::{parse_config, Preset, SweepSpec};
use prunelab_harness::error::{HarnessError, Result};
use prunelab_harness::output::{write_reports, write_run, write_sweep};
use prunelab_harness::range::{parse_f64_list, parse_u64_list};
use prunelab_harness::sweep::{aggregate, run_sweep};

#[derive(Parser)]
#[command(name = "prunelab", version, about = "Train randomly pruned two-layer CNNs on sparse-signal data")]
struct Cli {
    /// Seed for a single run; for sweeps, shorthand for `--seeds N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory (file for `diag`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one cell from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a grid of cells and write cells.csv, aggregates.csv and metadata.json.
    Sweep(SweepArgs),
    /// Run diagnostic checks on a saved checkpoint.
    Diag(DiagArgs),
    /// Print a preset's full config.
    Preset { name: Preset },
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Retention probabilities: `start:stop:step` or a comma list.
    #[arg(long)]
    p: Option<String>,
    #[arg(long = "sigma-n")]
    sigma_n: Option<String>,
    /// Seeds: `start:stop[:step]` or a comma list.
    #[arg(long)]
    seeds: Option<String>,
    /// Leave wall_time_s empty so repeated sweeps produce identical bytes.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CheckName {
    Grad,
    InitCorrelations,
    ClassBalance,
    NoiseGeometry,
    ConditionSet,
    TestNoise,
    Generalization,
    All,
}

#[derive(Args)]
struct DiagArgs {
    #[arg(long = "check", required = true, value_enum)]
    checks: Vec<CheckName>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Config the checkpoint was trained with; regenerates the data sets.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Monte Carlo sample count for probability estimates.
    #[arg(long, default_value_t = 2000)]
    n_mc: usize,
}

fn load_spec(config: Option<&Path>, preset: Option<Preset>) -> Result<SweepSpec> {
    match (config, preset) {
        (Some(path), _) => parse_config(&fs::read_to_string(path)?),
        (None, Some(p)) => Ok(SweepSpec::from_preset(p)),
        (None, None) => Err(HarnessError::Invalid("one of --config or --preset is required".into())),
    }
}

fn cmd_run(cli: &Cli, config: &Path) -> Result<()> {
    let spec = parse_config(&fs::read_to_string(config)?)?;
    let mut cfg = spec.base.clone();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let run = run_cell(&cfg)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out/run"));
    let paths = write_run(&dir, &run)?;
    let c = &run.cell;
    let mut stdout = io::stdout().lock();
    match &c.outcome {
        Some(o) => writeln!(
            stdout,
            "termination={} t={} train_loss={} train_err={} test_loss={} test_err={}",
            c.termination,
            run.trace.final_t,
            float17(o.train_loss),
            o.train_err,
            float17(o.test_loss),
            o.test_err
        )?,
        None => writeln!(stdout, "termination={}", c.termination)?,
    }
    for p in paths {
        writeln!(stdout, "wrote {}", p.display())?;
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let mut spec = load_spec(args.config.as_deref(), args.preset)?;
    if let Some(p) = &args.p {
        spec.p_values = parse_f64_list(p)?;
    }
    if let Some(s) = &args.sigma_n {
        spec.sigma_n_values = parse_f64_list(s)?;
    }
    match (&args.seeds, cli.seed) {
        (Some(s), _) => spec.seeds = parse_u64_list(s)?,
        (None, Some(seed)) => spec.seeds = vec![seed],
        (None, None) => {}
    }
    spec.validate()?;
    let mut cells = run_sweep(&spec, cli.threads)?;
    if args.no_timing {
        cells.iter_mut().for_each(|c| c.wall_time_s = None);
    }
    let aggregates = aggregate(&cells);
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out").join(spec.preset.name()));
    let paths = write_sweep(&dir, &spec, &cells, &aggregates)?;
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "p,sigma_n,completed,train_err_mean,test_err_mean,test_err_std")?;
    for a in &aggregates {
        let show = |name: &str, std: bool| {
            a.stat(name).map(|s| format!("{:.4}", if std { s.std } else { s.mean })).unwrap_or_default()
        };
        writeln!(
            stdout,
            "{},{},{}/{},{},{},{}",
            a.p,
            a.sigma_n,
            a.completed,
            a.cells,
            show("train_err", false),
            show("test_err", false),
            show("test_err", true)
        )?;
    }
    for p in paths {
        writeln!(stdout, "wrote {}", p.display())?;
    }
    Ok(())
}

fn cmd_diag(cli: &Cli, args: &DiagArgs) -> Result<()> {
    let spec = load_spec(args.config.as_deref(), args.preset)?;
    let mut cfg = spec.base.clone();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let mask = Mask::read_from(BufReader::new(File::open(&args.mask)?))?;
    let ckpt = Checkpoint::read_from(BufReader::new(File::open(&args.checkpoint)?))?;
    if ckpt.shape != cfg.shape() {
        return Err(HarnessError::Invalid(format!(
            "checkpoint shape {:?} does not match the config's {:?}",
            ckpt.shape,
            cfg.shape()
        )));
    }
    let net = MaskedNet::from_checkpoint(ckpt, mask)?;
    let data = generate_dataset(&cfg.data_config())?;
    let dc = DiagConfig { epsilon: cfg.epsilon, mc_seed: cfg.seed, n_mc: args.n_mc, ..Default::default() };
    let all = args.checks.contains(&CheckName::All);
    let wants = |c: CheckName| all || args.checks.contains(&c);

    let mut reports: Vec<CheckReport> = Vec::new();
    if wants(CheckName::Grad) {
        reports.push(check_grad_bound(&grad_norm_bound_check(&net, &data)?, None, &dc));
    }
    if wants(CheckName::InitCorrelations) {
        reports.push(check_init_correlations(&net, &data, &dc));
    }
    if wants(CheckName::ClassBalance) {
        reports.push(check_class_balance(&data));
    }
    if wants(CheckName::NoiseGeometry) {
        reports.push(check_noise_geometry(net.mask(), &data, &dc));
    }
    if wants(CheckName::ConditionSet) {
        reports.push(validate_condition_set(&cfg.regime_params(), Some((&net, &data)), &ConditionConstants::default()));
    }
    if wants(CheckName::TestNoise) {
        reports.push(check_test_noise_concentration(&net, cfg.sigma_n, &dc)?);
    }
    if wants(CheckName::Generalization) {
        let eval = fresh_eval_set(&cfg.data_config(), cfg.n_eval)?;
        reports.push(check_generalization_gap(&net, &eval, cfg.n_train, &dc)?.0);
    }
    info!("{} checks on a net at iteration {}", reports.len(), net.iteration());
    match &cli.out {
        Some(path) => write_reports(io::BufWriter::new(File::create(path)?), &reports),
        None => write_reports(io::stdout().lock(), &reports),
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run { config } => cmd_run(cli, config),
        Command::Sweep(args) => cmd_sweep(cli, args),
        Command::Diag(args) => cmd_diag(cli, args),
        Command::Preset { name } => {
            let mut spec = SweepSpec::from_preset(*name);
            if let Some(seed) = cli.seed {
                spec.base.seed = seed;
                spec.seeds = vec![seed];
            }
            io::stdout().lock().write_all(spec.to_config_string().as_bytes())?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (HarnessError::Config { .. } | HarnessError::Parse { .. })) => {
            eprintln!("prunelab: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("prunelab: {e}");
            ExitCode::from(1)
        }
    }
}
