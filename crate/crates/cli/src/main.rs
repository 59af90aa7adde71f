//! `evisynth`: estimates, forest plots and extraction scoring from the
//! command line.
//!
//! Exit status is 0 on success, 1 when the input is invalid and 2 on I/O or
//! network failure. Diagnostics go to stderr; data go to stdout or to the
//! files named by `--out`.

mod config;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evisynth::corpus::{
    join_predictions, load_corpus, load_predictions, save_predictions, LoadMode, StudyRecord,
};
use evisynth::forestplot::{render_svg, sidecar_json, PlotRow, PlotSpec};
use evisynth::gateway::{run_batch, GatewayConfig, HttpCompleter, DEFAULT_CONCURRENCY};
use evisynth::metrics::{aggregate_with, score_study, MseScale};
use evisynth::outcome::{estimate, BinaryArms, ContinuousArms, OutcomeData};
use evisynth::rewards::{combined_reward, group_advantages};
use evisynth::{parse_response, Conclusion, EffectEstimate, Error, Scale};
use log::{info, warn};
use rayon::prelude::*;

/// Minimum share of corpus records whose stored gold values must agree
/// with their data for `validate` to succeed.
const MIN_CONSISTENCY: f64 = 0.99;

#[derive(Parser)]
#[command(
    name = "evisynth",
    version,
    about = "Effect estimates, forest plots and extraction scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a corpus file line by line.
    Validate {
        corpus: PathBuf,
        /// Stop at the first bad line.
        #[arg(long)]
        strict: bool,
    },
    /// Effect estimate, 95% interval and conclusion.
    Estimate(EstimateArgs),
    /// Render a forest plot of the corpus gold data as SVG.
    Plot {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Add a fixed-effect pooled row.
        #[arg(long)]
        pooled: bool,
        /// Also write the plotted numbers as JSON.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Plot only records with this outcome name.
        #[arg(long)]
        outcome: Option<String>,
    },
    /// Score predictions against the corpus gold data.
    Score {
        corpus: PathBuf,
        predictions: PathBuf,
        /// Write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = MseArg::Natural)]
        mse_scale: MseArg,
    },
    /// Per-response reward breakdown, with group advantages for studies
    /// that have several responses.
    Reward {
        corpus: PathBuf,
        predictions: PathBuf,
    },
    /// Query a chat-completion endpoint for every study.
    Infer(InferArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct EstimateArgs {
    /// Intervention events and total, then comparator events and total.
    #[arg(long, num_args = 4, value_names = ["A", "N1", "C", "N2"])]
    binary: Option<Vec<u64>>,
    /// Intervention mean, SD and size, then the same for the comparator.
    #[arg(long, num_args = 6, value_names = ["M1", "SD1", "N1", "M2", "SD2", "N2"], allow_negative_numbers = true)]
    continuous: Option<Vec<f64>>,
    /// Estimate every record of a corpus file.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    concurrency: Option<usize>,
    /// `key = value` settings; flags take precedence over the file, the
    /// file over the environment.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    timeout: Option<u64>,
    #[arg(long)]
    retries: Option<u32>,
    /// First retry delay in milliseconds.
    #[arg(long)]
    backoff_ms: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MseArg {
    Natural,
    Log,
}

/// Why a command failed, which fixes the exit status.
#[derive(Debug)]
enum Failure {
    Invalid(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Io(_) => 2,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Io(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    std::fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn measure(scale: Scale) -> &'static str {
    match scale {
        Scale::Ratio => "RR",
        Scale::Difference => "MD",
    }
}

fn conclusion_label(c: Conclusion) -> &'static str {
    match c {
        Conclusion::FavorsIntervention => "FavorsIntervention",
        Conclusion::FavorsComparator => "FavorsComparator",
        Conclusion::Inconclusive => "Inconclusive",
        Conclusion::NotEstimable => "NotEstimable",
    }
}

fn format_estimate(est: &EffectEstimate, conclusion: Conclusion) -> String {
    if !est.estimable {
        return format!(
            "{} not estimable, {}",
            measure(est.scale),
            conclusion_label(conclusion)
        );
    }
    format!(
        "{} {:.2}, SE {:.2}, CI ({:.2}, {:.2}), {}",
        measure(est.scale),
        est.point,
        est.std_error,
        est.ci_low,
        est.ci_high,
        conclusion_label(conclusion)
    )
}

fn load_records(path: &Path) -> Result<Vec<StudyRecord>, Failure> {
    let load = load_corpus(path, LoadMode::Tolerant)?;
    for e in &load.errors {
        warn!("{}: {e}", path.display());
    }
    if load.records.is_empty() {
        return Err(Failure::Invalid(format!(
            "{}: no usable records",
            path.display()
        )));
    }
    Ok(load.records)
}

fn cmd_validate(corpus: &Path, strict: bool) -> CmdResult {
    let mode = if strict {
        LoadMode::Strict
    } else {
        LoadMode::Tolerant
    };
    let load = load_corpus(corpus, mode)?;
    for e in &load.errors {
        eprintln!("{e}");
    }
    for inc in &load.inconsistencies {
        eprintln!("line {}: `{}`: {}", inc.line, inc.id, inc.issues.join("; "));
    }
    let rate = load.consistency_rate();
    println!("records: {}", load.records.len());
    println!("line_errors: {}", load.errors.len());
    println!("inconsistent: {}", load.inconsistencies.len());
    println!("consistency_rate: {rate:.4}");
    if !load.errors.is_empty() {
        return Err(Failure::Invalid(format!("{} bad lines", load.errors.len())));
    }
    if rate < MIN_CONSISTENCY {
        return Err(Failure::Invalid(format!(
            "consistency rate {rate:.4} is below {MIN_CONSISTENCY}"
        )));
    }
    Ok(())
}

fn cmd_estimate(args: &EstimateArgs) -> CmdResult {
    let inline = |data: OutcomeData| -> CmdResult {
        let (est, conclusion) = estimate(&data).map_err(|e| Failure::Invalid(e.to_string()))?;
        println!("{}", format_estimate(&est, conclusion));
        Ok(())
    };
    if let Some(v) = &args.binary {
        let arms =
            BinaryArms::new(v[0], v[1], v[2], v[3]).map_err(|e| Failure::Invalid(e.to_string()))?;
        return inline(OutcomeData::Binary(arms));
    }
    if let Some(v) = &args.continuous {
        let size = |x: f64| -> Result<u64, Failure> {
            if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
                Ok(x as u64)
            } else {
                Err(Failure::Invalid(format!(
                    "group size {x} is not a whole number"
                )))
            }
        };
        let arms = ContinuousArms::new(v[0], v[1], size(v[2])?, v[3], v[4], size(v[5])?)
            .map_err(|e| Failure::Invalid(e.to_string()))?;
        return inline(OutcomeData::Continuous(arms));
    }
    let path = args.corpus.as_deref().expect("clap requires one input");
    let mut out = String::new();
    for record in load_records(path)? {
        let (est, conclusion) = estimate(&record.gold_data).map_err(Error::from)?;
        writeln!(out, "{}\t{}", record.id, format_estimate(&est, conclusion)).unwrap();
    }
    print!("{out}");
    Ok(())
}

fn cmd_plot(
    corpus: &Path,
    out: &Path,
    pooled: bool,
    sidecar: Option<&Path>,
    outcome: Option<&str>,
) -> CmdResult {
    let records = load_records(corpus)?;
    let mut rows = Vec::new();
    for r in records
        .iter()
        .filter(|r| outcome.is_none_or(|o| r.outcome_name == o))
    {
        let (est, _) = estimate(&r.gold_data).map_err(Error::from)?;
        rows.push(PlotRow::new(&r.id, est));
    }
    if rows.is_empty() {
        return Err(Failure::Invalid("no records to plot".into()));
    }
    let spec = PlotSpec::build(rows, pooled)?;
    write_file(out, &render_svg(&spec)?)?;
    if let Some(path) = sidecar {
        write_file(path, &sidecar_json(&spec))?;
    }
    info!("wrote {}", out.display());
    Ok(())
}

fn cmd_score(corpus: &Path, predictions: &Path, out: Option<&Path>, mse: MseArg) -> CmdResult {
    let records = load_records(corpus)?;
    let preds = load_predictions(predictions)?;
    let joined = join_predictions(&records, &preds);
    let missing: Vec<&StudyRecord> = records
        .iter()
        .filter(|r| joined.missing_ids.contains(&r.id))
        .collect();
    for r in &missing {
        warn!("no prediction for `{}`; scored as an empty response", r.id);
    }
    let empty = parse_response("");
    let mut pairs: Vec<(&StudyRecord, &_)> = joined.pairs.iter().map(|(r, o)| (*r, o)).collect();
    pairs.extend(missing.iter().map(|r| (*r, &empty)));
    let scores: Vec<_> = pairs
        .par_iter()
        .map(|(record, output)| score_study(output, record))
        .collect();
    let scale = match mse {
        MseArg::Natural => MseScale::Natural,
        MseArg::Log => MseScale::Log,
    };
    let report = aggregate_with(&scores, scale)?;
    print!("{}", report.to_text());
    if let Some(path) = out {
        write_file(path, &format!("{}\n", report.to_json()))?;
    }
    Ok(())
}

fn cmd_reward(corpus: &Path, predictions: &Path) -> CmdResult {
    let records = load_records(corpus)?;
    let preds = load_predictions(predictions)?;
    let mut groups: HashMap<&str, Vec<&str>> = HashMap::new();
    for p in &preds {
        groups.entry(&p.id).or_default().push(&p.raw_response);
    }
    for id in groups.keys() {
        if !records.iter().any(|r| r.id == *id) {
            warn!("prediction `{id}` has no matching study");
        }
    }
    let mut out = String::from(
        "id\tresponse\tcorrectness\tformat\tthought_format\texact\tcombined\tadvantage\n",
    );
    for record in &records {
        let Some(responses) = groups.get(record.id.as_str()) else {
            continue;
        };
        let breakdowns: Vec<_> = responses
            .iter()
            .map(|raw| combined_reward(&parse_response(raw), &record.gold_data))
            .collect();
        let advantages = if breakdowns.len() > 1 {
            let rewards: Vec<f64> = breakdowns.iter().map(|b| b.combined).collect();
            Some(group_advantages(&rewards)?.advantages)
        } else {
            None
        };
        for (i, b) in breakdowns.iter().enumerate() {
            let adv = advantages
                .as_ref()
                .map_or_else(|| "-".to_string(), |a| format!("{:.4}", a[i]));
            writeln!(
                out,
                "{}\t{}\t{:.4}\t{}\t{}\t{}\t{:.4}\t{}",
                record.id, i, b.correctness, b.format, b.thought_format, b.exact, b.combined, adv
            )
            .unwrap();
        }
    }
    print!("{out}");
    Ok(())
}

fn gateway_config(args: &InferArgs) -> Result<(GatewayConfig, usize), Failure> {
    let mut config = GatewayConfig::from_env();
    let mut concurrency = DEFAULT_CONCURRENCY;
    if let Some(path) = &args.config {
        let settings = config::load(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => Failure::Invalid(e.to_string()),
            _ => io_failure(path, e),
        })?;
        settings.apply(&mut config);
        concurrency = settings.concurrency.unwrap_or(concurrency);
    }
    if let Some(v) = &args.endpoint {
        config.endpoint_url = v.clone();
    }
    if let Some(v) = &args.model {
        config.model_name = v.clone();
    }
    if let Some(v) = args.temperature {
        config.temperature = v;
    }
    if let Some(v) = args.max_tokens {
        config.max_tokens = v;
    }
    if let Some(v) = args.timeout {
        config.timeout_s = v;
    }
    if let Some(v) = args.retries {
        config.max_retries = v;
    }
    if let Some(v) = args.backoff_ms {
        config.backoff_base_ms = v;
    }
    let concurrency = args.concurrency.unwrap_or(concurrency);
    if concurrency == 0 {
        return Err(Failure::Invalid("concurrency must be at least 1".into()));
    }
    Ok((config, concurrency))
}

fn cmd_infer(args: &InferArgs) -> CmdResult {
    let (config, concurrency) = gateway_config(args)?;
    let records = load_records(&args.corpus)?;
    let completer = HttpCompleter::new(config).map_err(|e| Failure::Invalid(e.to_string()))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Io(format!("cannot start runtime: {e}")))?;
    let predictions = runtime.block_on(run_batch(&completer, &records, concurrency));
    save_predictions(&args.out, &predictions)?;
    let failed = predictions.iter().filter(|p| p.error.is_some()).count();
    eprintln!(
        "{} responses, {} failed; wrote {}",
        predictions.len() - failed,
        failed,
        args.out.display()
    );
    if failed > 0 {
        return Err(Failure::Io(format!("{failed} requests failed")));
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match &cli.command {
        Command::Validate { corpus, strict } => cmd_validate(corpus, *strict),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Plot {
            corpus,
            out,
            pooled,
            sidecar,
            outcome,
        } => cmd_plot(corpus, out, *pooled, sidecar.as_deref(), outcome.as_deref()),
        Command::Score {
            corpus,
            predictions,
            out,
            mse_scale,
        } => cmd_score(corpus, predictions, out.as_deref(), *mse_scale),
        Command::Reward {
            corpus,
            predictions,
        } => cmd_reward(corpus, predictions),
        Command::Infer(args) => cmd_infer(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (Failure::Invalid(msg) | Failure::Io(msg)) = &failure;
            eprintln!("error: {msg}");
            ExitCode::from(failure.code())
        }
    }
}
