use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use errtype_bounds::constants::{
    composition_count, log_i_kl_exact, log_i_kl_stirling, MAX_EXACT_COMPOSITIONS,
};
use errtype_bounds::kl_inverse::{kl_inverse_total, DEFAULT_TOL};
use errtype_bounds::num17;
use errtype_bounds::risk_bounds::build_certificate;
use errtype_bounds::training::{self, AffineSoftmax, ErrorPartition, LabelledDataset, TrainConfig};
use errtype_bounds::verify::{run_verification, Suite};
use errtype_bounds::{ConstantMode, Error, LossVector, PacBayesInputs, SimplexVector};

#[derive(Parser)]
#[command(
    name = "errtype-bounds",
    version,
    about = "PAC-Bayes certificates for discretised error types"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certificate for an empirical risk vector.
    Bound(BoundArgs),
    /// Solve the loss-weighted kl-inverse problem.
    Klinv(KlinvArgs),
    /// Table of log bound constants.
    Constants(ConstantsArgs),
    /// Train a Gaussian posterior by minimising the total-risk bound.
    Train(TrainArgs),
    /// Run the verification suites.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Stirling,
    Auto,
}

impl ModeArg {
    fn resolve(self, m: u64, num_types: usize) -> ConstantMode {
        match self {
            ModeArg::Exact => ConstantMode::Exact,
            ModeArg::Stirling => ConstantMode::Stirling,
            ModeArg::Auto => ConstantMode::auto(m, num_types),
        }
    }
}

#[derive(Args)]
struct BoundArgs {
    /// Comma-separated risk vector, or a file of per-type counts.
    #[arg(long)]
    risks: String,
    #[arg(long)]
    m: u64,
    #[arg(long)]
    delta: f64,
    /// KL(Q||P) in nats.
    #[arg(long)]
    kl: f64,
    #[arg(long, value_enum, default_value = "auto")]
    mode: ModeArg,
    /// Comma-separated loss vector.
    #[arg(long)]
    losses: Option<String>,
    /// Pseudo-count for boundary risk vectors.
    #[arg(long)]
    smooth: Option<f64>,
    /// Also print a summary in bits on stderr.
    #[arg(long)]
    bits: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KlinvArgs {
    #[arg(long)]
    u: String,
    #[arg(long)]
    c: f64,
    #[arg(long)]
    losses: String,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
}

#[derive(Args)]
struct ConstantsArgs {
    /// Inclusive range `a..b`.
    #[arg(long = "m-range")]
    m_range: String,
    #[arg(long = "M-range")]
    types_range: String,
}

#[derive(Args)]
struct TrainArgs {
    /// CSV with a header, feature columns and an integer label column.
    #[arg(long)]
    data: PathBuf,
    /// Partition and loss JSON.
    #[arg(long)]
    partition: PathBuf,
    /// Training configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for history.jsonl, certificate.json and posterior.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// budget, domination, reciprocal-sqrt, marginal-equality or all.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
    VerificationFailed,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(e.into())
    }
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>, Failure> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Failure::Usage(format!("--{what}: '{s}' is not a number")))
        })
        .collect()
}

/// Inclusive `a..b`.
fn parse_range(text: &str, what: &str) -> Result<(u64, u64), Failure> {
    let bad = || Failure::Usage(format!("--{what}: expected a..b, got '{text}'"));
    let (a, b) = text.split_once("..").ok_or_else(bad)?;
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let b: u64 = b.trim().parse().map_err(|_| bad())?;
    if a > b {
        return Err(bad());
    }
    Ok((a, b))
}

fn read_risks(spec: &str, m: u64) -> Result<SimplexVector, Failure> {
    if let Ok(values) = parse_list(spec, "risks") {
        return Ok(SimplexVector::new(values)?);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(Failure::Usage(format!(
            "--risks: '{spec}' is neither a number list nor a file"
        )));
    }
    let text = fs::read_to_string(path)?;
    let counts = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u64>()
                .map_err(|_| Failure::Usage(format!("counts file: '{s}' is not a count")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let total: u64 = counts.iter().sum();
    if total != m {
        return Err(Failure::Usage(format!(
            "counts sum to {total} but --m is {m}"
        )));
    }
    Ok(SimplexVector::new(
        counts.iter().map(|&k| k as f64 / m as f64).collect(),
    )?)
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    if let Some(path) = out {
        fs::write(path, format!("{text}\n"))?;
    }
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn cmd_bound(args: BoundArgs) -> Result<(), Failure> {
    let risks = read_risks(&args.risks, args.m)?;
    let losses = args
        .losses
        .as_deref()
        .map(|l| parse_list(l, "losses"))
        .transpose()?;
    let losses = losses.map(LossVector::new).transpose()?;
    let inputs = PacBayesInputs::new(args.m, args.delta, args.kl, risks)?;
    let mode = args.mode.resolve(args.m, inputs.num_types());
    let cert = build_certificate(&inputs, mode, losses.as_ref(), args.smooth)?;
    if args.bits {
        let ln2 = std::f64::consts::LN_2;
        let mut line = format!("budget: {} bits", num17::format(cert.budget_nats / ln2));
        line.push_str(&format!(
            ", log constant: {} bits",
            num17::format(cert.constant.log_value / ln2)
        ));
        if let Some(f) = cert.total_risk_bound {
            line.push_str(&format!(", total-risk bound: {}", num17::format(f)));
        }
        eprintln!("{line}");
    }
    emit(&cert.to_json()?, args.out.as_deref())
}

fn cmd_klinv(args: KlinvArgs) -> Result<(), Failure> {
    let u = SimplexVector::new(parse_list(&args.u, "u")?)?;
    let losses = LossVector::new(parse_list(&args.losses, "losses")?)?;
    let sol = kl_inverse_total(&u, args.c, &losses, args.tol)?;
    emit(&serde_json::to_string_pretty(&sol)?, None)
}

#[derive(Serialize)]
struct ConstantRow {
    m: u64,
    #[serde(rename = "M")]
    num_types: usize,
    compositions: f64,
    #[serde(with = "num17::option")]
    exact: Option<f64>,
    #[serde(with = "num17::option")]
    stirling: Option<f64>,
}

fn cmd_constants(args: ConstantsArgs) -> Result<(), Failure> {
    let (m_lo, m_hi) = parse_range(&args.m_range, "m-range")?;
    let (t_lo, t_hi) = parse_range(&args.types_range, "M-range")?;
    if m_lo == 0 || t_lo == 0 {
        return Err(Failure::Usage("ranges must start at 1 or above".into()));
    }
    let mut rows = Vec::new();
    for num_types in t_lo as usize..=t_hi as usize {
        for m in m_lo..=m_hi {
            let compositions = composition_count(m, num_types);
            let exact = (compositions <= MAX_EXACT_COMPOSITIONS)
                .then(|| log_i_kl_exact(m, num_types))
                .transpose()?;
            let stirling = (m >= num_types as u64)
                .then(|| log_i_kl_stirling(m, num_types))
                .transpose()?;
            rows.push(ConstantRow {
                m,
                num_types,
                compositions,
                exact,
                stirling,
            });
        }
    }
    emit(&serde_json::to_string_pretty(&rows)?, None)
}

#[derive(Serialize)]
struct PosteriorFile<'a> {
    posterior: &'a training::GaussianPosterior,
    prior: &'a training::PriorSpec,
    bound_rows: &'a [usize],
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let partition = ErrorPartition::from_json_path(&args.partition)?;
    let data = LabelledDataset::from_csv_path(&args.data, Some(partition.num_classes()))?;
    let mut config = match &args.config {
        Some(path) => serde_json::from_str::<TrainConfig>(&fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let model = AffineSoftmax::new(data.feature_dim(), partition.num_classes());
    let outcome = training::train(&model, &data, &partition, &config)?;
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("history.jsonl"),
        training::history_to_jsonl(&outcome.history)?,
    )?;
    let posterior = PosteriorFile {
        posterior: &outcome.posterior,
        prior: &outcome.prior,
        bound_rows: &outcome.bound_rows,
    };
    fs::write(
        args.out.join("posterior.json"),
        format!("{}\n", serde_json::to_string_pretty(&posterior)?),
    )?;
    emit(
        &outcome.certificate.to_json()?,
        Some(&args.out.join("certificate.json")),
    )
}

fn cmd_verify(args: VerifyArgs) -> Result<(), Failure> {
    let suite: Suite = args
        .suite
        .parse()
        .map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let report = run_verification(suite, args.seed)?;
    emit(&report.to_json()?, args.out.as_deref())?;
    if report.pass {
        Ok(())
    } else {
        Err(Failure::VerificationFailed)
    }
}

fn exit_code(failure: &Failure) -> u8 {
    match failure {
        Failure::Lib(Error::InfeasibleEnumeration { .. } | Error::StirlingDomain { .. }) => 2,
        Failure::Lib(Error::BoundaryRisk { .. }) => 3,
        Failure::VerificationFailed => 4,
        Failure::Usage(_) | Failure::Lib(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Bound(a) => cmd_bound(a),
        Command::Klinv(a) => cmd_klinv(a),
        Command::Constants(a) => cmd_constants(a),
        Command::Train(a) => cmd_train(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            match &failure {
                Failure::Usage(msg) => eprintln!("error: {msg}"),
                Failure::Lib(e) => eprintln!("error: {e}"),
                Failure::VerificationFailed => eprintln!("error: verification failed"),
            }
            ExitCode::from(exit_code(&failure))
        }
    }
}
