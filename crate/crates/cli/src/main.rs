//! `qtraj`: simulate, estimate, smooth and analyse monitored-oscillator records.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qtraj::ingest::{self, DemodConfig, DEFAULT_BANDWIDTH_HZ, DEFAULT_DISCARD_S, DEFAULT_ORDER};
use qtraj::pipeline::{self, RunConfig, StageOutput};
use qtraj::{io, validation, Error, MeasurementRecord, RawTrace};

#[derive(Parser)]
#[command(name = "qtraj", version, about)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the ensemble's measurement records.
    Simulate(StageArgs),
    /// Filtered, long-time-limit and retrofiltered trajectories.
    Estimate(StageArgs),
    /// Smoothed trajectories for every configured target.
    Smooth(StageArgs),
    /// Ensemble statistics: summary JSON and per-time CSVs.
    Analyze(StageArgs),
    /// Demodulate a raw carrier trace into a quadrature record.
    Demod(DemodArgs),
    /// Add white noise to lower a record's detection efficiency.
    Inject(InjectArgs),
    /// Run the acceptance checks and print a pass/fail table.
    Report(ReportArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Run description (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; overrides the config and QTRAJ_OUT_DIR.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Base seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Ensemble size; overrides the config.
    #[arg(long)]
    records: Option<usize>,
    /// Read `member_*` streams from this directory instead of simulating.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Treat each input stream as consecutive records of one acquisition.
    #[arg(long, requires = "input")]
    contiguous: bool,
}

#[derive(Args)]
struct DemodArgs {
    /// Raw trace (`.csv` or binary).
    #[arg(long, short)]
    input: PathBuf,
    /// Demodulated record (`.csv` or binary).
    #[arg(long, short)]
    output: PathBuf,
    /// Carrier frequency (Hz).
    #[arg(long)]
    omega_hz: f64,
    /// Low-pass 3 dB bandwidth (Hz).
    #[arg(long, default_value_t = DEFAULT_BANDWIDTH_HZ)]
    bw_hz: f64,
    /// Butterworth order.
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    order: usize,
    /// Output sample period (μs).
    #[arg(long, default_value_t = 1.0)]
    dt_us: f64,
    /// Detection efficiency stamped on the record.
    #[arg(long)]
    eta: f64,
    /// Shot-noise variance per raw sample; normalises the trace first.
    #[arg(long)]
    shot_level: Option<f64>,
    /// Filter transient dropped from the start (μs).
    #[arg(long, default_value_t = DEFAULT_DISCARD_S * 1e6)]
    discard_us: f64,
    /// Also cut the record into windows of this length (μs), written next to the output.
    #[arg(long)]
    record_us: Option<f64>,
}

#[derive(Args)]
struct InjectArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    eta_old: f64,
    #[arg(long)]
    eta_new: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Also write the results as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

enum Failure {
    Error(Error),
    Acceptance(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn read_record(path: &Path, eta: f64) -> qtraj::Result<MeasurementRecord> {
    if is_csv(path) {
        io::read_record_csv(path, eta)
    } else {
        io::read_record_binary(path)
    }
}

fn write_record(path: &Path, rec: &MeasurementRecord) -> qtraj::Result<()> {
    if is_csv(path) {
        io::write_record_csv(path, rec)
    } else {
        io::write_record_binary(path, rec)
    }
}

fn read_raw(path: &Path) -> qtraj::Result<RawTrace> {
    if is_csv(path) {
        io::read_raw_csv(path)
    } else {
        io::read_raw_binary(path)
    }
}

fn load_config(args: &StageArgs) -> qtraj::Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.ensemble.base_seed = seed;
    }
    if let Some(n) = args.records {
        cfg.ensemble.n_records = n;
    }
    if args.contiguous {
        cfg.analysis.contiguous_records = true;
    }
    cfg.validate()?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir());
    Ok((cfg, out))
}

fn load_input(args: &StageArgs, cfg: &RunConfig) -> qtraj::Result<Option<Vec<MeasurementRecord>>> {
    let Some(dir) = &args.input else { return Ok(None) };
    let streams = pipeline::load_streams(dir, cfg.params.eta)?;
    if streams.is_empty() {
        return Err(Error::Config(format!("no member_* records found in {}", dir.display())));
    }
    if !args.contiguous {
        return Ok(Some(streams));
    }
    let n = (cfg.params.record_us / cfg.params.dt_us).round() as usize;
    let members: Vec<MeasurementRecord> = streams
        .iter()
        .flat_map(|s| pipeline::contiguous_streams(s, n, cfg.ensemble.warmup_records))
        .collect();
    log::info!("{} contiguous members from {} streams", members.len(), streams.len());
    Ok(Some(members))
}

fn report_files(out: &StageOutput) {
    for f in &out.files {
        println!("{}", f.display());
    }
    log::info!("wrote {} files", out.files.len());
}

fn run_stage(cmd: &Command, args: &StageArgs) -> qtraj::Result<()> {
    let (cfg, out) = load_config(args)?;
    let input = load_input(args, &cfg)?;
    let input = input.as_deref();
    let written = match cmd {
        Command::Simulate(_) => {
            if input.is_some() {
                return Err(Error::Config("simulate does not take --input".into()));
            }
            pipeline::run_simulate(&cfg, &out)?
        }
        Command::Estimate(_) => pipeline::run_estimate(&cfg, &out, input)?,
        Command::Smooth(_) => pipeline::run_smooth(&cfg, &out, input)?,
        _ => pipeline::run_analyze(&cfg, &out, input)?,
    };
    report_files(&written);
    Ok(())
}

fn run_demod(a: &DemodArgs) -> qtraj::Result<()> {
    let mut raw = read_raw(&a.input)?;
    if let Some(level) = a.shot_level.or(raw.shot_level) {
        raw = ingest::normalize_shot_noise(&raw, level)?;
    }
    let cfg = DemodConfig {
        omega: a.omega_hz * std::f64::consts::TAU,
        bandwidth: a.bw_hz,
        order: a.order,
        dt: a.dt_us * 1e-6,
        eta: a.eta,
    };
    let rec = ingest::demodulate(&raw, &cfg)?;
    let skip = ((a.discard_us * 1e-6) / cfg.dt).round() as usize;
    if skip >= rec.len() {
        return Err(Error::Precondition(format!(
            "discarding {skip} samples leaves nothing of a {}-sample record",
            rec.len()
        )));
    }
    let kept = rec.slice(skip, rec.len());
    write_record(&a.output, &kept)?;
    println!("{}", a.output.display());
    if let Some(len) = a.record_us {
        let stem = a.output.file_stem().and_then(|s| s.to_str()).unwrap_or("record");
        let ext = a.output.extension().and_then(|s| s.to_str()).unwrap_or("bin");
        for (k, seg) in ingest::segment(&kept, 0.0, len * 1e-6)?.iter().enumerate() {
            let p = a.output.with_file_name(format!("{stem}_segment_{k:05}.{ext}"));
            write_record(&p, seg)?;
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn run_inject(a: &InjectArgs) -> qtraj::Result<()> {
    let rec = read_record(&a.input, a.eta_old)?;
    let out = ingest::inject_noise(&rec, a.eta_old, a.eta_new, a.seed)?;
    write_record(&a.output, &out)?;
    println!("{}", a.output.display());
    Ok(())
}

fn run_report(a: &ReportArgs) -> Result<(), Failure> {
    let mut results = Vec::new();
    for check in validation::CHECKS {
        let r = check();
        println!("{r}");
        results.push(r);
    }
    if let Some(path) = &a.json {
        io::write_json(path, &results)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        return Err(Failure::Acceptance(failed));
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::error!("cannot size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) | Command::Estimate(a) | Command::Smooth(a) | Command::Analyze(a) => {
            run_stage(&cli.command, a).map_err(Failure::from)
        }
        Command::Demod(a) => run_demod(a).map_err(Failure::from),
        Command::Inject(a) => run_inject(a).map_err(Failure::from),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Acceptance(n)) => {
            log::error!("{n} acceptance criteria failed");
            ExitCode::from(3)
        }
    }
}
