//! Command-line pipelines: `uq sample | entropy | report | eval | dpo |
//! calibrate-thresholds`.
//!
//! Every subcommand is a pure function of (input files, flags, fixture,
//! seed) when the mock backend is in play: JSONL streams in, JSONL/CSV
//! streams out, keys sorted, one seeded generator behind all randomness.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::clustering::{
    cluster, BinaryRuleJudge, ClusterOptions, EquivalenceJudge, JudgeKind, LikelihoodMode,
    NormalizedExactJudge, RemoteNliJudge,
};
use crate::config::{parse_judge, RunConfig};
use crate::dpo::{
    build_pairs, dpo_batch_loss, dpo_margin, score_generation, CandidateSet, DpoConfig,
    ExternalLabelerScorer, PreferencePair, ReportScorer, ScoredGeneration, TokenF1Scorer,
};
use crate::entropy::{entropy_report, EstimatorKind};
use crate::error::{Result, UqError};
use crate::eval::{
    bootstrap_ci, run_m_ablation, run_probes_ablation, AblationRow, EvalRecord,
    ReportCase, VqaCase,
};
use crate::gateway::{
    sample_generations, CompletionBackend, GatewayOptions, HttpBackend, MockBackend,
    ProbeContext, SampleSet,
};
use crate::logmath::NATS_TO_BITS;
use crate::report::{
    assess_report, calibrate_thresholds, reliability_index, AssessOptions, Reliability,
    ReliabilityThresholds, ReportAssessment,
};
use crate::schema::{parse_jsonl_line, write_jsonl_line};

#[derive(Debug, Parser)]
#[command(name = "uq", version, about = "Semantic-uncertainty pipelines for generative models")]
pub struct Cli {
    /// Config file (key = value lines); flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// HTTP backend base URL (UQ_API_BASE overrides).
    #[arg(long, global = true)]
    pub backend: Option<String>,

    /// Model name sent on the wire.
    #[arg(long, global = true)]
    pub model: Option<String>,

    /// Scripted mock backend fixture (JSON); replaces the HTTP backend.
    #[arg(long, global = true)]
    pub mock_fixture: Option<PathBuf>,

    /// Max in-flight backend requests.
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample M generations per context from a backend.
    Sample(SampleArgs),
    /// Cluster sampled generations and compute semantic-entropy estimators.
    Entropy(EntropyArgs),
    /// Sentence-level reliability assessment of generated reports.
    Report(ReportArgs),
    /// AUROC error-prediction evaluation and ablations.
    Eval(EvalArgs),
    /// Preference-pair construction and DPO losses.
    Dpo(DpoArgs),
    /// Fit reliability thresholds to a labeled validation set.
    CalibrateThresholds(CalibrateArgs),
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Contexts JSONL: {id, query, image_ref?, metadata?}.
    #[arg(long)]
    pub input: PathBuf,
    /// Output SampleSet JSONL (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<u32>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// Accept samples without token log-probabilities.
    #[arg(long)]
    pub allow_missing_logprobs: bool,
}

#[derive(Debug, Args)]
pub struct EntropyArgs {
    /// SampleSet JSONL (as produced by `uq sample`).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// binary_rule | normalized_exact | remote_nli
    #[arg(long)]
    pub judge: Option<String>,
    /// Endpoint for the remote_nli judge.
    #[arg(long)]
    pub nli_endpoint: Option<String>,
    /// Single estimator to compute (missing likelihoods are fatal).
    #[arg(long, conflicts_with = "all_estimators")]
    pub estimator: Option<String>,
    /// Compute every estimator; absent values serialize as null.
    #[arg(long)]
    pub all_estimators: bool,
    /// Keep duplicate normalized texts as separate dedup members.
    #[arg(long)]
    pub no_merge_duplicates: bool,
    /// Use mean token log-prob instead of the sum.
    #[arg(long)]
    pub length_normalized: bool,
    /// Report entropies in bits instead of nats.
    #[arg(long)]
    pub bits: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Reports JSONL: {report_id, report, image_ref?}.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub probes_per_sentence: Option<u32>,
    /// Sampled answers per probe.
    #[arg(long)]
    pub answers_per_probe: Option<u32>,
    /// "theta_high,theta_low" in nats.
    #[arg(long)]
    pub thresholds: Option<String>,
    /// within_only | combined
    #[arg(long)]
    pub estimator: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Precomputed EvalRecord JSONL.
    #[arg(long, conflicts_with = "dataset")]
    pub records: Option<PathBuf>,
    /// End-to-end dataset JSONL (VQA cases, or labeled reports with
    /// --ablate probes).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Only "auroc" is supported.
    #[arg(long, default_value = "auroc")]
    pub metric: String,
    /// Bootstrap resamples.
    #[arg(long, default_value_t = 1000)]
    pub boot: usize,
    /// Seed for the bootstrap generator (required for reproducibility).
    #[arg(long)]
    pub seed: u64,
    /// m | probes
    #[arg(long)]
    pub ablate: Option<String>,
    /// Comma-separated grid, e.g. "5,10,20".
    #[arg(long)]
    pub grid: Option<String>,
    /// Comma-separated estimator list.
    #[arg(long)]
    pub estimators: Option<String>,
    #[arg(long)]
    pub judge: Option<String>,
    #[arg(long)]
    pub nli_endpoint: Option<String>,
    /// Answers per probe for --ablate probes.
    #[arg(long)]
    pub answers_per_probe: Option<u32>,
    /// csv | json
    #[arg(long, default_value = "json")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct DpoArgs {
    /// PreferencePair JSONL: {prompt_id, winner:{...}, loser:{...}}.
    #[arg(long, conflicts_with = "candidates")]
    pub pairs: Option<PathBuf>,
    /// CandidateSet JSONL: {prompt_id, reference?, candidates:[...]}.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub min_gap: f64,
    /// token_f1 | external
    #[arg(long, default_value = "token_f1")]
    pub score: String,
    /// Labeler endpoint for --score external.
    #[arg(long)]
    pub labeler_url: Option<String>,
    /// Include per-pair gradients in the output.
    #[arg(long)]
    pub gradients: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Labeled JSONL: {entropy, label} with label high|medium|low.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::default();
    if let Some(path) = &cli.config {
        config.apply_file(path)?;
    }
    if let Some(backend) = &cli.backend {
        config.backend = Some(backend.clone());
    }
    if let Some(model) = &cli.model {
        config.model = model.clone();
    }
    if let Some(parallelism) = cli.parallelism {
        config.parallelism = parallelism;
    }

    match &cli.command {
        Command::Sample(args) => cmd_sample(args, &mut config, &cli),
        Command::Entropy(args) => cmd_entropy(args, &mut config),
        Command::Report(args) => cmd_report(args, &mut config, &cli),
        Command::Eval(args) => cmd_eval(args, &mut config, &cli),
        Command::Dpo(args) => cmd_dpo(args),
        Command::CalibrateThresholds(args) => cmd_calibrate(args),
    }
}

fn make_backend(cli: &Cli, config: &RunConfig) -> Result<Box<dyn CompletionBackend>> {
    match &cli.mock_fixture {
        Some(path) => Ok(Box::new(MockBackend::from_path(path)?)),
        None => Ok(Box::new(HttpBackend::from_env(
            config.backend.as_deref(),
            config.model.clone(),
        )?)),
    }
}

fn make_judge(kind: JudgeKind, nli_endpoint: Option<&str>) -> Result<Box<dyn EquivalenceJudge>> {
    match kind {
        JudgeKind::BinaryRule => Ok(Box::new(BinaryRuleJudge)),
        JudgeKind::NormalizedExact => Ok(Box::new(NormalizedExactJudge)),
        JudgeKind::RemoteNli => {
            let endpoint = nli_endpoint.ok_or_else(|| {
                UqError::InvalidConfig("remote_nli judge needs --nli-endpoint".into())
            })?;
            Ok(Box::new(RemoteNliJudge::new(endpoint)))
        }
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn open_input(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn parse_u32_list(s: &str, what: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u32>()
                .map_err(|_| UqError::InvalidConfig(format!("invalid {what} entry {p:?}")))
        })
        .collect()
}

fn parse_estimators(s: Option<&str>, default: &[EstimatorKind]) -> Result<Vec<EstimatorKind>> {
    match s {
        None => Ok(default.to_vec()),
        Some(list) => list.split(',').map(|p| EstimatorKind::parse(p.trim())).collect(),
    }
}

fn parse_thresholds(s: &str) -> Result<ReliabilityThresholds> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(UqError::InvalidConfig(format!(
            "thresholds must be \"theta_high,theta_low\", got {s:?}"
        )));
    }
    let parse = |p: &str| {
        p.parse::<f64>()
            .map_err(|_| UqError::InvalidConfig(format!("invalid threshold {p:?}")))
    };
    let thresholds = ReliabilityThresholds {
        theta_high: parse(parts[0])?,
        theta_low: parse(parts[1])?,
    };
    thresholds.validate()?;
    Ok(thresholds)
}

// --- sample ---

fn cmd_sample(args: &SampleArgs, config: &mut RunConfig, cli: &Cli) -> Result<()> {
    if let Some(m) = args.m {
        config.m = m;
    }
    if let Some(t) = args.temperature {
        config.temperature = t;
    }
    if let Some(p) = args.top_p {
        config.top_p = p;
    }
    if let Some(mt) = args.max_tokens {
        config.max_tokens = mt;
    }
    config.validate()?;
    let backend = make_backend(cli, config)?;
    let gateway = GatewayOptions {
        require_logprobs: !args.allow_missing_logprobs,
        parallelism: config.parallelism,
    };
    let sampling = config.sampling();

    let mut out = open_output(args.out.as_deref())?;
    for (i, line) in open_input(&args.input)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let context: ProbeContext = parse_jsonl_line(&line, i + 1)?;
        context
            .validate()
            .map_err(|e| UqError::InvalidInput(format!("line {}: {e}", i + 1)))?;
        let set = sample_generations(&context, &sampling, backend.as_ref(), &gateway)?;
        write_jsonl_line(&mut out, &set)?;
    }
    out.flush()?;
    Ok(())
}

// --- entropy ---

#[derive(Debug, Serialize)]
struct SingleEstimatorLine {
    context_id: String,
    m: usize,
    cluster_count: usize,
    estimator: EstimatorKind,
    value: f64,
    unit: &'static str,
}

fn cmd_entropy(args: &EntropyArgs, config: &mut RunConfig) -> Result<()> {
    if let Some(judge) = &args.judge {
        config.judge = parse_judge(judge)?;
    }
    let judge = make_judge(config.judge, args.nli_endpoint.as_deref())?;
    let single = match &args.estimator {
        Some(name) => Some(EstimatorKind::parse(name)?),
        None if args.all_estimators => None,
        // default mirrors the pipeline default
        None => Some(config.estimator),
    };
    let options = ClusterOptions {
        merge_duplicates: !args.no_merge_duplicates,
        likelihood_mode: if args.length_normalized {
            LikelihoodMode::LengthNormalized
        } else {
            LikelihoodMode::Product
        },
    };
    let unit = if args.bits { "bits" } else { "nats" };
    let scale = if args.bits { NATS_TO_BITS } else { 1.0 };

    let mut out = open_output(args.out.as_deref())?;
    for (i, line) in open_input(&args.input)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let set: SampleSet = parse_jsonl_line(&line, i + 1)?;
        let clustering = cluster(&set, judge.as_ref(), &options)
            .map_err(|e| UqError::InvalidInput(format!("line {}: {e}", i + 1)))?;
        let mut report = entropy_report(&clustering, &set.context.id)?;
        match single {
            Some(kind) => {
                let value = report.values.get(kind).ok_or_else(|| {
                    UqError::InvalidInput(format!(
                        "line {}: {} requires token log-probabilities",
                        i + 1,
                        kind
                    ))
                })?;
                write_jsonl_line(
                    &mut out,
                    &SingleEstimatorLine {
                        context_id: report.context_id,
                        m: report.m,
                        cluster_count: report.cluster_count,
                        estimator: kind,
                        value: value * scale,
                        unit,
                    },
                )?;
            }
            None => {
                if args.bits {
                    report.values.discrete *= scale;
                    for v in [
                        &mut report.values.rao_blackwell,
                        &mut report.values.within_only,
                        &mut report.values.combined,
                    ]
                    .into_iter()
                    .flatten()
                    {
                        *v *= scale;
                    }
                    for (_, h) in report.per_cluster_within.iter_mut() {
                        *h *= scale;
                    }
                }
                write_jsonl_line(&mut out, &report)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

// --- report ---

#[derive(Debug, Deserialize)]
struct ReportInput {
    report_id: String,
    report: String,
    #[serde(default)]
    image_ref: Option<String>,
}

fn cmd_report(args: &ReportArgs, config: &mut RunConfig, cli: &Cli) -> Result<()> {
    if let Some(t) = &args.thresholds {
        config.thresholds = parse_thresholds(t)?;
    }
    if let Some(name) = &args.estimator {
        config.estimator = EstimatorKind::parse(name)?;
    }
    if !matches!(
        config.estimator,
        EstimatorKind::WithinOnly | EstimatorKind::Combined
    ) {
        return Err(UqError::InvalidConfig(format!(
            "report assessment supports within_only|combined, got {}",
            config.estimator
        )));
    }
    let options = AssessOptions {
        probes_per_sentence: args.probes_per_sentence.unwrap_or(3),
        estimator: config.estimator,
        thresholds: config.thresholds,
    };
    let answers = crate::gateway::SamplingConfig {
        m: args.answers_per_probe.unwrap_or(3),
        ..config.sampling()
    };
    answers.validate()?;
    let backend = make_backend(cli, config)?;
    // report scoring tolerates logprob-free answers (masses fall back to
    // counts), so don't reject them at the gateway
    let gateway = GatewayOptions {
        require_logprobs: false,
        parallelism: config.parallelism,
    };

    let mut out = open_output(args.out.as_deref())?;
    for (i, line) in open_input(&args.input)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let input: ReportInput = parse_jsonl_line(&line, i + 1)?;
        if input.report_id.is_empty() {
            return Err(UqError::InvalidInput(format!(
                "line {}: report_id is empty",
                i + 1
            )));
        }
        let mut context = ProbeContext::new(input.report_id.clone(), input.report.clone());
        context.image_ref = input.image_ref.clone();
        let sentences = assess_report(
            &input.report,
            &context,
            &options,
            &answers,
            backend.as_ref(),
            &gateway,
        )
        .map_err(|e| match e {
            UqError::EmptyReport => {
                UqError::InvalidInput(format!("line {}: report is empty", i + 1))
            }
            other => other,
        })?;
        write_jsonl_line(
            &mut out,
            &ReportAssessment {
                report_id: input.report_id,
                sentences,
            },
        )?;
    }
    out.flush()?;
    Ok(())
}

// --- eval ---

#[derive(Debug, Serialize)]
struct MetricRow {
    estimator: EstimatorKind,
    auroc: f64,
    ci_lo: f64,
    ci_hi: f64,
    n_records: usize,
}

fn csv_escape(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_ablation_rows(
    out: &mut dyn Write,
    rows: &[AblationRow],
    format: &str,
) -> Result<()> {
    match format {
        "json" => {
            for row in rows {
                write_jsonl_line(&mut *out, row)?;
            }
        }
        "csv" => {
            writeln!(out, "knob,value,estimator,auroc,ci_lo,ci_hi,n_records,failure")?;
            for row in rows {
                let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    row.knob.as_str(),
                    row.value,
                    row.estimator,
                    fmt_opt(row.auroc),
                    fmt_opt(row.ci_lo),
                    fmt_opt(row.ci_hi),
                    row.n_records,
                    csv_escape(row.failure.as_deref().unwrap_or("")),
                )?;
            }
        }
        other => {
            return Err(UqError::InvalidConfig(format!(
                "unknown format {other:?} (expected csv|json)"
            )))
        }
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs, config: &mut RunConfig, cli: &Cli) -> Result<()> {
    if args.metric != "auroc" {
        return Err(UqError::InvalidConfig(format!(
            "unsupported metric {:?} (only auroc)",
            args.metric
        )));
    }
    let mut out = open_output(args.out.as_deref())?;

    if let Some(records_path) = &args.records {
        let records: Vec<EvalRecord> =
            crate::schema::read_jsonl(open_input(records_path)?)?;
        let mut by_estimator: BTreeMap<EstimatorKind, Vec<EvalRecord>> = BTreeMap::new();
        for r in records {
            by_estimator.entry(r.estimator).or_default().push(r);
        }
        if by_estimator.is_empty() {
            return Err(UqError::InvalidInput("no records".into()));
        }
        let mut rows = Vec::new();
        for (estimator, group) in &by_estimator {
            let ci = bootstrap_ci(group, args.boot, args.seed)?;
            rows.push(MetricRow {
                estimator: *estimator,
                auroc: ci.point,
                ci_lo: ci.lo,
                ci_hi: ci.hi,
                n_records: group.len(),
            });
        }
        match args.format.as_str() {
            "json" => {
                for row in &rows {
                    write_jsonl_line(&mut out, row)?;
                }
            }
            "csv" => {
                writeln!(out, "estimator,auroc,ci_lo,ci_hi,n_records")?;
                for row in &rows {
                    writeln!(
                        out,
                        "{},{},{},{},{}",
                        row.estimator, row.auroc, row.ci_lo, row.ci_hi, row.n_records
                    )?;
                }
            }
            other => {
                return Err(UqError::InvalidConfig(format!(
                    "unknown format {other:?} (expected csv|json)"
                )))
            }
        }
        out.flush()?;
        return Ok(());
    }

    let dataset = args.dataset.as_ref().ok_or_else(|| {
        UqError::InvalidConfig("eval needs --records or --dataset".into())
    })?;
    let backend = make_backend(cli, config)?;
    let gateway = GatewayOptions {
        require_logprobs: false,
        parallelism: config.parallelism,
    };

    let ablate = args.ablate.as_deref().unwrap_or("m");
    let rows = match ablate {
        "m" => {
            let cases: Vec<VqaCase> = crate::schema::read_jsonl(open_input(dataset)?)?;
            let grid = match &args.grid {
                Some(g) => parse_u32_list(g, "grid")?,
                None => vec![config.m],
            };
            let estimators = parse_estimators(args.estimators.as_deref(), &EstimatorKind::ALL)?;
            if let Some(judge) = &args.judge {
                config.judge = parse_judge(judge)?;
            }
            let judge = make_judge(config.judge, args.nli_endpoint.as_deref())?;
            run_m_ablation(
                &cases,
                &grid,
                &estimators,
                judge.as_ref(),
                backend.as_ref(),
                &config.sampling(),
                &gateway,
                args.boot,
                args.seed,
            )?
        }
        "probes" => {
            let cases: Vec<ReportCase> = crate::schema::read_jsonl(open_input(dataset)?)?;
            let grid = match &args.grid {
                Some(g) => parse_u32_list(g, "grid")?,
                None => vec![1, 2, 3, 4, 5],
            };
            let estimators = parse_estimators(
                args.estimators.as_deref(),
                &[EstimatorKind::Combined],
            )?;
            let answers = crate::gateway::SamplingConfig {
                m: args.answers_per_probe.unwrap_or(3),
                ..config.sampling()
            };
            run_probes_ablation(
                &cases,
                &grid,
                &estimators,
                &config.thresholds,
                backend.as_ref(),
                &answers,
                &gateway,
                args.boot,
                args.seed,
            )?
        }
        other => {
            return Err(UqError::InvalidConfig(format!(
                "unknown ablation {other:?} (expected m|probes)"
            )))
        }
    };
    write_ablation_rows(&mut out, &rows, &args.format)?;
    out.flush()?;
    Ok(())
}

// --- dpo ---

#[derive(Debug, Serialize)]
struct PairLossLine {
    prompt_id: String,
    loss: f64,
    margin: f64,
    score_gap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    winner_policy_grad: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loser_policy_grad: Option<f64>,
}

#[derive(Debug, Serialize)]
struct DpoSummaryLine {
    mean_loss: f64,
    n_pairs: usize,
    n_skipped: usize,
    beta: f64,
}

fn cmd_dpo(args: &DpoArgs) -> Result<()> {
    let dpo_config = DpoConfig {
        beta: args.beta.unwrap_or(DpoConfig::default().beta),
    };
    dpo_config.validate()?;

    let mut pairs: Vec<PreferencePair> = Vec::new();
    let mut skipped = 0usize;

    if let Some(path) = &args.pairs {
        for (i, line) in open_input(path)?.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let pair: PreferencePair = parse_jsonl_line(&line, i + 1)?;
            // re-validate through the constructor
            let pair = PreferencePair::new(pair.prompt_id.clone(), pair.winner, pair.loser)
                .map_err(|e| UqError::InvalidInput(format!("line {}: {e}", i + 1)))?;
            pairs.push(pair);
        }
    } else if let Some(path) = &args.candidates {
        let scorer: Box<dyn ReportScorer> = match args.score.as_str() {
            "token_f1" => Box::new(TokenF1Scorer),
            "external" => {
                let url = args.labeler_url.as_ref().ok_or_else(|| {
                    UqError::InvalidConfig("--score external needs --labeler-url".into())
                })?;
                Box::new(ExternalLabelerScorer::new(url.clone()))
            }
            other => {
                return Err(UqError::InvalidConfig(format!(
                    "unknown scorer {other:?} (expected token_f1|external)"
                )))
            }
        };
        for (i, line) in open_input(path)?.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let set: CandidateSet = parse_jsonl_line(&line, i + 1)?;
            let mut scored: Vec<ScoredGeneration> = Vec::with_capacity(set.candidates.len());
            for c in &set.candidates {
                let score = match c.score {
                    Some(s) => s,
                    None => {
                        let reference = set.reference.as_deref().ok_or_else(|| {
                            UqError::InvalidInput(format!(
                                "line {}: candidates without scores need a reference",
                                i + 1
                            ))
                        })?;
                        score_generation(&c.text, reference, scorer.as_ref())?
                    }
                };
                scored.push(ScoredGeneration {
                    text: c.text.clone(),
                    policy_logprob: c.policy_logprob,
                    reference_logprob: c.reference_logprob,
                    score,
                });
            }
            match build_pairs(&set.prompt_id, &scored, args.min_gap)
                .map_err(|e| UqError::InvalidInput(format!("line {}: {e}", i + 1)))?
            {
                Some(pair) => pairs.push(pair),
                None => {
                    skipped += 1;
                    eprintln!(
                        "warning: prompt {:?}: no pair (score gap <= {})",
                        set.prompt_id, args.min_gap
                    );
                }
            }
        }
    } else {
        return Err(UqError::InvalidConfig("dpo needs --pairs or --candidates".into()));
    }

    let mut out = open_output(args.out.as_deref())?;
    if pairs.is_empty() {
        write_jsonl_line(
            &mut out,
            &DpoSummaryLine {
                mean_loss: f64::NAN,
                n_pairs: 0,
                n_skipped: skipped,
                beta: dpo_config.beta,
            },
        )?;
        out.flush()?;
        return Ok(());
    }
    let batch = dpo_batch_loss(&pairs, &dpo_config)?;
    for ((pair, loss), grad) in pairs
        .iter()
        .zip(batch.per_pair_losses.iter())
        .zip(batch.gradients.iter())
    {
        write_jsonl_line(
            &mut out,
            &PairLossLine {
                prompt_id: pair.prompt_id.clone(),
                loss: *loss,
                margin: dpo_margin(pair, &dpo_config),
                score_gap: pair.score_gap,
                winner_policy_grad: args.gradients.then_some(grad.winner_policy),
                loser_policy_grad: args.gradients.then_some(grad.loser_policy),
            },
        )?;
    }
    write_jsonl_line(
        &mut out,
        &DpoSummaryLine {
            mean_loss: batch.mean_loss,
            n_pairs: pairs.len(),
            n_skipped: skipped,
            beta: dpo_config.beta,
        },
    )?;
    out.flush()?;
    Ok(())
}

// --- calibrate-thresholds ---

#[derive(Debug, Deserialize)]
struct LabeledEntropy {
    entropy: f64,
    label: Reliability,
}

#[derive(Debug, Serialize)]
struct CalibrationResult {
    theta_high: f64,
    theta_low: f64,
    balanced_accuracy: f64,
    n_records: usize,
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let labeled: Vec<LabeledEntropy> = crate::schema::read_jsonl(open_input(&args.input)?)?;
    let records: Vec<(f64, Reliability)> =
        labeled.iter().map(|l| (l.entropy, l.label)).collect();
    let thresholds = calibrate_thresholds(&records)?;

    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for (entropy, label) in &records {
        totals[*label as usize] += 1;
        if reliability_index(*entropy, &thresholds)? == *label {
            hits[*label as usize] += 1;
        }
    }
    let mut acc = 0.0;
    let mut present = 0.0;
    for c in 0..3 {
        if totals[c] > 0 {
            acc += hits[c] as f64 / totals[c] as f64;
            present += 1.0;
        }
    }

    let mut out = open_output(args.out.as_deref())?;
    write_jsonl_line(
        &mut out,
        &CalibrationResult {
            theta_high: thresholds.theta_high,
            theta_low: thresholds.theta_low,
            balanced_accuracy: acc / present,
            n_records: records.len(),
        },
    )?;
    out.flush()?;
    Ok(())
}
