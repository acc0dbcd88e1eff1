use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use hotmle::density2::Mode;
use hotmle::hal::Link;
use hotmle::sim::{
    self, BiasMode, DensityEstimator, DensityStudyConfig, SimReport, TrackConfig, TsmStudyConfig, TsmVariant,
};
use hotmle::tsm::{TsmConfig, TsmData};

#[derive(Parser)]
#[command(name = "hotmle", version, about = "Second-order HAL-regularized TMLE simulations and estimates")]
struct Cli {
    #[command(subcommand)]
    example: Example,
}

#[derive(Subcommand)]
enum Example {
    /// Integrated square of a discrete density.
    Density2 {
        #[command(subcommand)]
        cmd: DensityCmd,
    },
    /// Treatment-specific mean E[E(Y | A = 1, W)].
    Tsm {
        #[command(subcommand)]
        cmd: TsmCmd,
    },
}

#[derive(Subcommand)]
enum DensityCmd {
    /// Monte-Carlo bias/SD/MSE table.
    Simulate(DensitySimArgs),
    /// Total-remainder trajectory of one second-order run.
    Track(TrackArgs),
}

#[derive(Subcommand)]
enum TsmCmd {
    /// Monte-Carlo table for one simulation variant.
    Simulate(TsmSimArgs),
    /// First- and second-order estimates with confidence intervals from a W,A,Y CSV.
    Estimate(EstimateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrackFormat {
    Csv,
    Json,
    Dat,
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkArg {
    Logit,
    Cloglog,
}

impl From<LinkArg> for Link {
    fn from(l: LinkArg) -> Self {
        match l {
            LinkArg::Logit => Link::Logit,
            LinkArg::Cloglog => Link::CLogLog,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Reg,
    Emp,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Reg => Mode::Regularized,
            ModeArg::Emp => Mode::Empirical,
        }
    }
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 20_200_101)]
    seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output file; stdout when omitted. With CSV a JSON sidecar is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DensitySimArgs {
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 0.06)]
    bias_mass: f64,
    /// `random5` or `all`.
    #[arg(long, default_value = "random5")]
    bias_mode: String,
    /// Mixture components.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Link of the discrete-hazard lasso.
    #[arg(long, value_enum, default_value = "logit")]
    link: LinkArg,
    /// Comma list of reg1, us-reg1, emp1, reg2, us-reg2, emp2, us-emp2.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 0.06)]
    bias_mass: f64,
    #[arg(long, default_value = "all")]
    bias_mode: String,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    #[arg(long, value_enum, default_value = "reg")]
    mode: ModeArg,
    /// Start at the true pmf.
    #[arg(long)]
    from_truth: bool,
    #[arg(long, value_enum, default_value = "csv")]
    format: TrackFormat,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TsmSimArgs {
    #[arg(long, default_value_t = 1)]
    variant: u8,
    /// Comma list of sample sizes; variant default when omitted.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Replications per sample size; variant default when omitted.
    #[arg(long)]
    reps: Option<usize>,
    /// Lambda path positions below the CV choice for the HAL reference.
    #[arg(long)]
    undersmooth_offset: Option<usize>,
    #[arg(long, value_enum, default_value = "emp")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EstimateArgs {
    /// CSV with header W,A,Y.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 10)]
    undersmooth_offset: usize,
    #[arg(long, value_enum, default_value = "emp")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 20_200_101)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct Row {
    #[serde(rename = "W")]
    w: f64,
    #[serde(rename = "A")]
    a: f64,
    #[serde(rename = "Y")]
    y: f64,
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn set_threads(threads: Option<usize>) -> AnyResult<bool> {
    if let Some(t) = threads {
        if t == 0 {
            return Err("--threads must be positive".into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    Ok(threads != Some(1))
}

fn emit(text: &str, out: Option<&Path>) -> AnyResult<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn emit_report(report: &SimReport, format: Format, out: Option<&Path>) -> AnyResult<()> {
    match format {
        Format::Csv => {
            emit(&report.to_csv(), out)?;
            if let Some(p) = out {
                fs::write(p.with_extension("json"), report.to_json())?;
            }
        }
        Format::Json => emit(&report.to_json(), out)?,
    }
    if report.contract_violations > 0 {
        eprintln!("warning: {} score-contract violations", report.contract_violations);
    }
    for m in &report.failure_messages {
        eprintln!("failure: {m}");
    }
    Ok(())
}

fn density_simulate(a: DensitySimArgs) -> AnyResult<()> {
    let parallel = set_threads(a.common.threads)?;
    let estimators = match a.estimators {
        Some(list) => list
            .iter()
            .map(|s| s.trim().parse::<DensityEstimator>())
            .collect::<Result<Vec<_>, _>>()?,
        None => DensityEstimator::ALL.to_vec(),
    };
    let cfg = DensityStudyConfig {
        n: a.n,
        reps: a.reps,
        k: a.k,
        bias_mass: a.bias_mass,
        bias_mode: a.bias_mode.parse::<BiasMode>()?,
        estimators,
        link: a.link.into(),
        seed: a.common.seed,
        parallel,
        ..Default::default()
    };
    let report = sim::run_density_study(&cfg)?;
    emit_report(&report, a.format, a.common.out.as_deref())
}

fn density_track(a: TrackArgs) -> AnyResult<()> {
    let cfg = TrackConfig {
        n: a.n,
        bias_mass: a.bias_mass,
        bias_mode: a.bias_mode.parse::<BiasMode>()?,
        mode: a.mode.into(),
        step: a.step,
        from_truth: a.from_truth,
        seed: a.common.seed,
        ..Default::default()
    };
    let report = sim::track_total_remainder(&cfg)?;
    let text = match a.format {
        TrackFormat::Csv => report.to_csv(),
        TrackFormat::Dat => report.to_dat(),
        TrackFormat::Json => serde_json::to_string_pretty(&report)?,
    };
    emit(&text, a.common.out.as_deref())
}

fn tsm_simulate(a: TsmSimArgs) -> AnyResult<()> {
    let parallel = set_threads(a.common.threads)?;
    let mut cfg = TsmStudyConfig::new(TsmVariant::from_number(a.variant)?);
    if let Some(ns) = a.n {
        cfg.ns = ns;
    }
    if let Some(r) = a.reps {
        cfg.reps = r;
    }
    cfg.undersmooth_offset = a.undersmooth_offset;
    cfg.tsm.mode = a.mode.into();
    cfg.seed = a.common.seed;
    cfg.parallel = parallel;
    let report = sim::run_tsm_study(&cfg)?;
    emit_report(&report, a.format, a.common.out.as_deref())
}

fn tsm_estimate(a: EstimateArgs) -> AnyResult<()> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&a.input)?;
    let (mut w, mut av, mut y) = (vec![], vec![], vec![]);
    for row in reader.deserialize::<Row>() {
        let r = row?;
        w.push(r.w);
        av.push(r.a);
        y.push(r.y);
    }
    let data = TsmData::new(w, av, y)?;
    let cfg = TsmConfig {
        mode: a.mode.into(),
        level: a.level,
        ..Default::default()
    };
    let est = sim::estimate_tsm(&data, a.undersmooth_offset, a.seed, &cfg)?;
    let mut text = serde_json::to_string_pretty(&est)?;
    text.push('\n');
    emit(&text, a.out.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.example {
        Example::Density2 { cmd } => match cmd {
            DensityCmd::Simulate(a) => density_simulate(a),
            DensityCmd::Track(a) => density_track(a),
        },
        Example::Tsm { cmd } => match cmd {
            TsmCmd::Simulate(a) => tsm_simulate(a),
            TsmCmd::Estimate(a) => tsm_estimate(a),
        },
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
