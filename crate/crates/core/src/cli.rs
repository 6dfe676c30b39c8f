//! Command-line driver. Each subcommand reads its inputs, calls one library
//! operation and writes the result; `-` stands for stdin/stdout.
//!
//! Exit codes: 0 success, 1 some records failed (listed on stderr),
//! 2 configuration or fatal error.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analytics::{
    aggregate_label, all_reliabilities, audio_intelligibility, inter_annotator_agreement,
    wer_accuracy_curve, BootstrapConfig, LabelSpace, TieExclusion, DEFAULT_MIN_SAMPLES,
};
use crate::annotation::{
    AnnotationStore, AnnotatorProfile, AppState, EscalationMode, PairStatus, ServiceConfig,
    Submission,
};
use crate::judge::{
    read_verdicts, run_benchmark, BenchmarkOptions, Exemplar, Judge, JudgeConfig, JudgeKind,
    JudgeVerdict, PromptMode, ScoreRecord, ScoreTable, VerdictStore,
};
use crate::model::{group_by_pair, BinaryPreference, FieldMode, PairMeta, SpeechPair};
use crate::pipeline::{
    curate, split_sft_rl, AggregatedPair, CurateOptions, DatasetSubsetSpec, Manifest,
    MissingWerPolicy, TeacherInput, DEFAULT_WER_GAP_THRESHOLD,
};
use crate::report::{
    consistency_check, emit_report, facet_breakdown, AbstainPolicy, Facet, MetaJudgeConfig,
    ReportFormat,
};

pub const CONFIG_ENV: &str = "SPEECHPREF_CONFIG";

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or unrecoverable failure; exit 2.
    Fatal(String),
    /// Some records failed; exit 1.
    Partial(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Fatal(_) => 2,
            CliError::Partial(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Fatal(m) => write!(f, "error: {m}"),
            CliError::Partial(items) => {
                write!(f, "{} record(s) failed:", items.len())?;
                for i in items {
                    write!(f, "\n  {i}")?;
                }
                Ok(())
            }
        }
    }
}

macro_rules! fatal_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Fatal(e.to_string())
            }
        }
    )*};
}

fatal_from!(
    std::io::Error,
    serde_json::Error,
    crate::annotation::AnnotationError,
    crate::analytics::AnalyticsError,
    crate::judge::JudgeError,
    crate::pipeline::PipelineError,
    crate::report::ReportError
);

fn fatal(msg: impl Into<String>) -> CliError {
    CliError::Fatal(msg.into())
}

/// Settings shared by all subcommands, read from a TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    /// Directory holding the annotation journal and derived artifacts.
    #[serde(default)]
    pub storage: Option<PathBuf>,
    #[serde(default)]
    pub bind: Option<String>,
    /// Default judge config for `eval run`.
    #[serde(default)]
    pub judge: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// 0 = warnings, 1 = info, 2+ = debug.
    #[serde(default)]
    pub verbosity: Option<u8>,
    #[serde(default)]
    pub lease_minutes: Option<i64>,
    #[serde(default)]
    pub escalation: Option<EscalationMode>,
    #[serde(default)]
    pub swap: Option<bool>,
    #[serde(default)]
    pub strict_leasing: Option<bool>,
    #[serde(default)]
    pub field_mode: Option<FieldMode>,
    #[serde(default)]
    pub audio_root: Option<PathBuf>,
    #[serde(default)]
    pub token_env: Option<String>,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<CliConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| fatal(format!("{}: {e}", path.display())))?;
        let cfg: CliConfig = toml::from_str(&text).map_err(|e| fatal(format!("{}: {e}", path.display())))?;
        if let Some(b) = &cfg.bind {
            b.parse::<std::net::SocketAddr>()
                .map_err(|e| fatal(format!("bind `{b}`: {e}")))?;
        }
        if cfg.lease_minutes.is_some_and(|m| m <= 0) {
            return Err(fatal("lease_minutes must be positive"));
        }
        Ok(cfg)
    }

    fn storage(&self) -> Result<&Path, CliError> {
        self.storage
            .as_deref()
            .ok_or_else(|| fatal("no storage directory: pass --storage or set `storage` in the config file"))
    }

    pub fn service_config(&self) -> Result<ServiceConfig, CliError> {
        let d = ServiceConfig::default();
        Ok(ServiceConfig {
            storage_path: Some(self.storage()?.to_path_buf()),
            lease_minutes: self.lease_minutes.unwrap_or(d.lease_minutes),
            escalation: self.escalation.unwrap_or(d.escalation),
            swap: self.swap.unwrap_or(d.swap),
            swap_seed: self.seed.unwrap_or(d.swap_seed),
            strict_leasing: self.strict_leasing.unwrap_or(d.strict_leasing),
            field_mode: self.field_mode.unwrap_or(d.field_mode),
            audio_root: self.audio_root.clone(),
            bind: self.bind.clone().unwrap_or(d.bind),
            token_env: self.token_env.clone(),
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "speechpref", version, about = "Speech preference annotation, curation and judge evaluation")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Storage directory; overrides the config file.
    #[arg(long, global = true)]
    pub storage: Option<PathBuf>,
    /// Increase log detail (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the annotation HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Load records into storage.
    #[command(subcommand)]
    Ingest(IngestCmd),
    /// Aggregate completed pairs into labels with agreement levels.
    Aggregate {
        /// Output file (default: <storage>/aggregated.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Annotation statistics.
    #[command(subcommand)]
    Stats(StatsCmd),
    /// Dataset subsets.
    #[command(subcommand)]
    Subsets(SubsetsCmd),
    /// Judge benchmarking and reports.
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Debug, Subcommand)]
pub enum IngestCmd {
    /// Speech pair records.
    Pairs { file: PathBuf },
    /// Annotation records {pair_id, annotator_id, cmos, intelligible_a, intelligible_b}.
    Annotations { file: PathBuf },
    /// Annotator profiles {annotator_id, qualified_langs, active}.
    Annotators { file: PathBuf },
    /// Per-audio metric scores {audio_id, score_source, value}.
    Scores { file: PathBuf },
    /// Teacher judge outputs {pair_id, teacher_output, teacher_pref?}.
    Teacher { file: PathBuf },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SpaceArg {
    Ternary,
    Binary,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum TiesArg {
    PerAnnotation,
    PerPair,
}

#[derive(Debug, Subcommand)]
pub enum StatsCmd {
    /// Inter-annotator agreement.
    Agreement {
        #[arg(long, value_enum, default_value = "ternary")]
        space: SpaceArg,
        #[arg(long, value_enum, default_value = "per-annotation")]
        ties: TiesArg,
        /// Bootstrap resamples; 0 disables the std estimate.
        #[arg(long, default_value_t = 0)]
        bootstrap: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-annotator reliability.
    Reliability {
        #[arg(long, default_value_t = DEFAULT_MIN_SAMPLES)]
        min_samples: usize,
    },
    /// Human intelligibility accuracy against WER.
    WerCurve {
        /// Comma-separated increasing bin edges.
        #[arg(long, value_delimiter = ',', required = true)]
        edges: Vec<f64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SubsetsCmd {
    /// Derive pref, hq, eval, dev and train manifests.
    Build {
        #[arg(long)]
        eval_spec: PathBuf,
        #[arg(long)]
        dev_spec: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WER_GAP_THRESHOLD)]
        wer_gap: f64,
        #[arg(long, value_enum, default_value = "drop")]
        missing_wer: MissingWerArg,
        /// Overrides the eval spec seed; dev uses seed + 1.
        #[arg(long)]
        seed: Option<u64>,
        /// Aggregated pairs (default: <storage>/aggregated.jsonl).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Manifest directory (default: <storage>/manifests).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Split the train manifest into SFT records and RL prompts.
    SplitSftRl {
        #[arg(long)]
        teacher: PathBuf,
        /// Train manifest (default: <storage>/manifests/train.txt).
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output directory for sft.jsonl and rl.jsonl (default: <storage>).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum MissingWerArg {
    Drop,
    Error,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Judge every manifest pair, resuming from stored verdicts.
    Run(EvalRunArgs),
    /// Accuracy report over stored verdicts.
    Report {
        /// Comma-separated facets: subset, target_lang, lang_setting, style, pair_kind.
        #[arg(long, default_value = "")]
        facets: String,
        #[arg(long)]
        policy: Option<AbstainPolicy>,
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
        /// Verdict file (default: <storage>/verdicts/<judge_id>.jsonl).
        #[arg(long)]
        verdicts: Option<PathBuf>,
        #[arg(long)]
        judge: Option<PathBuf>,
        /// Aggregated labels (default: <storage>/aggregated.jsonl).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
    /// Check CoT verdicts for reasoning/score agreement with a meta-judge.
    Consistency {
        #[arg(long)]
        meta_judge: PathBuf,
        #[arg(long)]
        verdicts: Option<PathBuf>,
        #[arg(long)]
        judge: Option<PathBuf>,
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EvalRunArgs {
    #[arg(long)]
    pub judge: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Overrides the judge's prompt mode: plain, cot or fewshot:K.
    #[arg(long)]
    pub mode: Option<PromptMode>,
    /// Overrides rollouts per pair.
    #[arg(long)]
    pub k: Option<usize>,
    /// Score records for metric judges (default: <storage>/scores.jsonl).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Exemplar manifest for few-shot mode (default: <storage>/manifests/dev.txt).
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
    /// Verdict file (default: <storage>/verdicts/<judge_id>.jsonl).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub concurrency: usize,
    /// Stop after this many new pairs.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

fn read_input(path: &Path) -> Result<String, CliError> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        std::fs::read_to_string(path).map_err(|e| fatal(format!("{}: {e}", path.display())))
    }
}

fn write_output(path: &Path, content: &str) -> Result<(), CliError> {
    if path == Path::new("-") {
        let mut out = std::io::stdout().lock();
        out.write_all(content.as_bytes())?;
        out.flush()?;
        Ok(())
    } else {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, content).map_err(|e| fatal(format!("{}: {e}", path.display())))
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    write_output(Path::new("-"), &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Parses line-delimited records; failures are collected as `line N: error`.
fn parse_lines<T: for<'de> Deserialize<'de>>(text: &str) -> (Vec<T>, Vec<String>) {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => ok.push(v),
            Err(e) => bad.push(format!("line {}: {e}", i + 1)),
        }
    }
    (ok, bad)
}

fn append_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String, CliError> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

fn partial_or_ok(failures: Vec<String>) -> Result<(), CliError> {
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial(failures))
    }
}

struct Ctx {
    config: CliConfig,
}

impl Ctx {
    fn storage(&self) -> Result<&Path, CliError> {
        self.config.storage()
    }

    fn store(&self) -> Result<AnnotationStore, CliError> {
        let mut cfg = self.config.service_config()?;
        // Offline imports are not tied to leases.
        cfg.strict_leasing = false;
        Ok(AnnotationStore::open(cfg)?)
    }

    fn default_path(&self, given: &Option<PathBuf>, rel: &str) -> Result<PathBuf, CliError> {
        match given {
            Some(p) => Ok(p.clone()),
            None => Ok(self.storage()?.join(rel)),
        }
    }

    fn judge_config(&self, given: &Option<PathBuf>) -> Result<JudgeConfig, CliError> {
        let path = given
            .as_ref()
            .or(self.config.judge.as_ref())
            .ok_or_else(|| fatal("no judge config: pass --judge or set `judge` in the config file"))?;
        Ok(JudgeConfig::load(path)?)
    }

    fn aggregated(&self, given: &Option<PathBuf>) -> Result<Vec<AggregatedPair>, CliError> {
        let path = self.default_path(given, "aggregated.jsonl")?;
        let (pairs, bad) = parse_lines(&read_input(&path)?);
        if !bad.is_empty() {
            return Err(fatal(format!("{}: {}", path.display(), bad.join("; "))));
        }
        Ok(pairs)
    }

    fn verdict_path(&self, given: &Option<PathBuf>, judge_id: Option<&str>) -> Result<PathBuf, CliError> {
        match (given, judge_id) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(id)) => Ok(self.storage()?.join("verdicts").join(format!("{id}.jsonl"))),
            (None, None) => Err(fatal("pass --verdicts or --judge")),
        }
    }
}

/// Parses arguments, configures logging and runs. Returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn init_logging(level: u8) {
    let filter = match level {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let env = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(filter));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(env)
        .with_writer(std::io::stderr)
        .try_init();
}

pub async fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if cli.storage.is_some() {
        config.storage = cli.storage.clone();
    }
    init_logging(cli.verbose.max(config.verbosity.unwrap_or(0)));
    let ctx = Ctx { config };

    match cli.command {
        Command::Serve { bind } => serve(&ctx, bind).await,
        Command::Ingest(cmd) => ingest(&ctx, cmd),
        Command::Aggregate { out } => aggregate(&ctx, out),
        Command::Stats(cmd) => stats(&ctx, cmd),
        Command::Subsets(cmd) => subsets(&ctx, cmd),
        Command::Eval(cmd) => eval(&ctx, cmd).await,
    }
}

async fn serve(ctx: &Ctx, bind: Option<String>) -> Result<(), CliError> {
    let cfg = ctx.config.service_config()?;
    let bind = bind.unwrap_or_else(|| cfg.bind.clone());
    let store = Arc::new(AnnotationStore::open(cfg)?);
    let state = AppState::from_store(store)?;
    let listener = tokio::net::TcpListener::bind(&bind)
        .await
        .map_err(|e| fatal(format!("bind {bind}: {e}")))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    crate::annotation::serve(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}

fn ingest(ctx: &Ctx, cmd: IngestCmd) -> Result<(), CliError> {
    match cmd {
        IngestCmd::Pairs { file } => {
            let store = ctx.store()?;
            let report = store.ingest_pairs(&read_input(&file)?)?;
            print_json(&report)?;
            partial_or_ok(
                report
                    .rejected
                    .iter()
                    .map(|r| format!("line {}: {}", r.line, r.error))
                    .collect(),
            )
        }
        IngestCmd::Annotations { file } => {
            let store = ctx.store()?;
            let (subs, mut bad) = parse_lines::<Submission>(&read_input(&file)?);
            let mut accepted = 0usize;
            for s in subs {
                let id = format!("{}/{}", s.pair_id, s.annotator_id);
                match store.submit_annotation(s) {
                    Ok(_) => accepted += 1,
                    Err(e) => bad.push(format!("{id}: {e}")),
                }
            }
            print_json(&serde_json::json!({ "accepted": accepted, "rejected": bad.len() }))?;
            partial_or_ok(bad)
        }
        IngestCmd::Annotators { file } => {
            let store = ctx.store()?;
            let (profiles, mut bad) = parse_lines::<AnnotatorProfile>(&read_input(&file)?);
            let mut accepted = 0usize;
            for p in profiles {
                let id = p.annotator_id.clone();
                match store.register_annotator(p) {
                    Ok(()) => accepted += 1,
                    Err(e) => bad.push(format!("{id}: {e}")),
                }
            }
            print_json(&serde_json::json!({ "accepted": accepted, "rejected": bad.len() }))?;
            partial_or_ok(bad)
        }
        IngestCmd::Scores { file } => {
            let (mut recs, mut bad) = parse_lines::<ScoreRecord>(&read_input(&file)?);
            recs.retain(|r| {
                let ok = r.value.is_finite();
                if !ok {
                    bad.push(format!("{}: non-finite score", r.audio_id));
                }
                ok
            });
            append_lines(&ctx.storage()?.join("scores.jsonl"), &recs)?;
            print_json(&serde_json::json!({ "accepted": recs.len(), "rejected": bad.len() }))?;
            partial_or_ok(bad)
        }
        IngestCmd::Teacher { file } => {
            let (recs, bad) = parse_lines::<TeacherInput>(&read_input(&file)?);
            append_lines(&ctx.storage()?.join("teacher.jsonl"), &recs)?;
            print_json(&serde_json::json!({ "accepted": recs.len(), "rejected": bad.len() }))?;
            partial_or_ok(bad)
        }
    }
}

/// Aggregates every Complete pair; pairs still in progress are left out.
pub fn aggregate_store(store: &AnnotationStore) -> Result<Vec<AggregatedPair>, CliError> {
    let mut out = Vec::new();
    for pair in store.pairs()? {
        let snap = store.pair_state(&pair.pair_id)?;
        if snap.status != PairStatus::Complete {
            continue;
        }
        out.push(AggregatedPair {
            aggregate: aggregate_label(&snap.annotations)?,
            pair,
        });
    }
    Ok(out)
}

fn aggregate(ctx: &Ctx, out: Option<PathBuf>) -> Result<(), CliError> {
    let store = ctx.store()?;
    let pairs = aggregate_store(&store)?;
    let path = ctx.default_path(&out, "aggregated.jsonl")?;
    write_output(&path, &to_jsonl(&pairs)?)?;
    tracing::info!(n = pairs.len(), "aggregated complete pairs");
    if path != Path::new("-") {
        print_json(&serde_json::json!({ "aggregated": pairs.len(), "out": path }))?;
    }
    Ok(())
}

fn stats(ctx: &Ctx, cmd: StatsCmd) -> Result<(), CliError> {
    let store = ctx.store()?;
    let annotations = store.annotations()?;
    let grouped = group_by_pair(annotations.iter());
    match cmd {
        StatsCmd::Agreement {
            space,
            ties,
            bootstrap,
            seed,
        } => {
            let report = inter_annotator_agreement(
                &grouped,
                match space {
                    SpaceArg::Ternary => LabelSpace::Ternary,
                    SpaceArg::Binary => LabelSpace::Binary,
                },
                match ties {
                    TiesArg::PerAnnotation => TieExclusion::PerAnnotation,
                    TiesArg::PerPair => TieExclusion::PerPair,
                },
                BootstrapConfig {
                    n_resamples: bootstrap,
                    seed: seed.or(ctx.config.seed).unwrap_or(0),
                },
            )?;
            print_json(&report)
        }
        StatsCmd::Reliability { min_samples } => {
            write_output(Path::new("-"), &to_jsonl(&all_reliabilities(&grouped, min_samples))?)
        }
        StatsCmd::WerCurve { edges } => {
            let records = audio_intelligibility(&store.pairs()?, &grouped);
            let with_wer: Vec<_> = records.into_iter().filter(|r| r.wer.is_some()).collect();
            print_json(&wer_accuracy_curve(&with_wer, &edges)?)
        }
    }
}

fn load_spec(path: &Path) -> Result<DatasetSubsetSpec, CliError> {
    let text = read_input(path)?;
    let spec: DatasetSubsetSpec = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| fatal(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text).map_err(|e| fatal(format!("{}: {e}", path.display())))?
    };
    spec.validate()?;
    Ok(spec)
}

fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    Ok(Manifest::read_from(read_input(path)?.as_bytes())?)
}

fn subsets(ctx: &Ctx, cmd: SubsetsCmd) -> Result<(), CliError> {
    match cmd {
        SubsetsCmd::Build {
            eval_spec,
            dev_spec,
            wer_gap,
            missing_wer,
            seed,
            input,
            out_dir,
        } => {
            let mut eval_spec = load_spec(&eval_spec)?;
            let mut dev_spec = load_spec(&dev_spec)?;
            if let Some(s) = seed.or(ctx.config.seed) {
                eval_spec.seed = s;
                dev_spec.seed = s.wrapping_add(1);
            }
            let opts = CurateOptions {
                eval_spec,
                dev_spec,
                wer_gap_threshold: wer_gap,
                missing_wer: match missing_wer {
                    MissingWerArg::Drop => MissingWerPolicy::Drop,
                    MissingWerArg::Error => MissingWerPolicy::Error,
                },
            };
            let pairs = ctx.aggregated(&input)?;
            let curated = curate(&pairs, &opts)?;
            let dir = ctx.default_path(&out_dir, "manifests")?;
            std::fs::create_dir_all(&dir)?;
            let mut counts = serde_json::Map::new();
            counts.insert("raw".into(), pairs.len().into());
            for m in curated.manifests(&opts) {
                write_output(&dir.join(format!("{}.txt", m.header.subset)), &m.to_string_lossless())?;
                counts.insert(m.header.subset.clone(), m.pair_ids.len().into());
            }
            print_json(&counts)
        }
        SubsetsCmd::SplitSftRl {
            teacher,
            train,
            input,
            out_dir,
        } => {
            let manifest = read_manifest(&ctx.default_path(&train, "manifests/train.txt")?)?;
            let labeled: HashMap<String, _> = crate::pipeline::build_pref(&ctx.aggregated(&input)?)
                .into_iter()
                .map(|p| (p.pair.pair_id.clone(), p))
                .collect();
            let train_pairs = manifest
                .pair_ids
                .iter()
                .map(|id| {
                    labeled
                        .get(id)
                        .cloned()
                        .ok_or_else(|| fatal(format!("train pair `{id}` has no A/B label")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let (records, bad) = parse_lines::<TeacherInput>(&read_input(&teacher)?);
            if !bad.is_empty() {
                return Err(CliError::Partial(bad));
            }
            let teacher: HashMap<_, _> = records.into_iter().map(|t| (t.pair_id.clone(), t)).collect();
            let split = split_sft_rl(&train_pairs, &teacher)?;
            let dir = match out_dir {
                Some(d) => d,
                None => ctx.storage()?.to_path_buf(),
            };
            write_output(&dir.join("sft.jsonl"), &to_jsonl(&split.sft)?)?;
            write_output(&dir.join("rl.jsonl"), &to_jsonl(&split.rl)?)?;
            print_json(&serde_json::json!({ "sft": split.sft.len(), "rl": split.rl.len() }))
        }
    }
}

fn corpus(ctx: &Ctx) -> Result<HashMap<String, SpeechPair>, CliError> {
    Ok(ctx
        .store()?
        .pairs()?
        .into_iter()
        .map(|p| (p.pair_id.clone(), p))
        .collect())
}

fn human_labels(pairs: &[AggregatedPair]) -> HashMap<String, BinaryPreference> {
    pairs
        .iter()
        .filter_map(|p| Some((p.pair.pair_id.clone(), p.aggregate.label.to_binary()?)))
        .collect()
}

async fn eval(ctx: &Ctx, cmd: EvalCmd) -> Result<(), CliError> {
    match cmd {
        EvalCmd::Run(args) => eval_run(ctx, args).await,
        EvalCmd::Report {
            facets,
            policy,
            format,
            verdicts,
            judge,
            labels,
            out,
        } => {
            let facets = Facet::parse_list(&facets)?;
            let judge_cfg = match (&judge, &verdicts) {
                (Some(_), _) | (None, None) => Some(ctx.judge_config(&judge)?),
                _ => None,
            };
            let path = ctx.verdict_path(&verdicts, judge_cfg.as_ref().map(|j| j.judge_id.as_str()))?;
            let all = read_verdicts(&path)?;
            let verdicts = only_judge(all, judge_cfg.as_ref().map(|j| j.judge_id.as_str()))?;
            let aggregated = ctx.aggregated(&labels)?;
            let labels = human_labels(&aggregated);
            let meta: HashMap<String, PairMeta> = aggregated
                .iter()
                .map(|p| (p.pair.pair_id.clone(), p.pair.meta.clone()))
                .collect();
            let policy = policy
                .or(judge_cfg.as_ref().map(|j| j.abstain_policy))
                .unwrap_or_default();
            let report = facet_breakdown(&verdicts, &labels, &meta, &facets, policy)?;
            write_output(&out, &emit_report(&report, format))
        }
        EvalCmd::Consistency {
            meta_judge,
            verdicts,
            judge,
            out,
        } => {
            let meta = MetaJudgeConfig::load(&meta_judge)?;
            let judge_cfg = match (&judge, &verdicts) {
                (Some(_), _) | (None, None) => Some(ctx.judge_config(&judge)?),
                _ => None,
            };
            let path = ctx.verdict_path(&verdicts, judge_cfg.as_ref().map(|j| j.judge_id.as_str()))?;
            let verdicts = only_judge(read_verdicts(&path)?, judge_cfg.as_ref().map(|j| j.judge_id.as_str()))?;
            let report = consistency_check(&verdicts, &meta).await?;
            write_output(&out, &report.to_jsonl())?;
            match report.rate {
                Some(r) => eprintln!(
                    "consistency {:.1}% over {} parseable judgments",
                    r * 100.0,
                    report.results.len()
                ),
                None => eprintln!("no parseable judgments"),
            }
            partial_or_ok(
                report
                    .failures
                    .iter()
                    .map(|f| format!("{}: {}", f.pair_id, f.error))
                    .collect(),
            )
        }
    }
}

/// Latest verdict per pair, for one judge (or the only judge in the file).
fn only_judge(all: Vec<JudgeVerdict>, judge_id: Option<&str>) -> Result<Vec<JudgeVerdict>, CliError> {
    let id = match judge_id {
        Some(id) => id.to_owned(),
        None => {
            let ids: std::collections::BTreeSet<_> = all.iter().map(|v| v.judge_id.clone()).collect();
            match ids.len() {
                0 => return Err(fatal("verdict file is empty")),
                1 => ids.into_iter().next().expect("one id"),
                _ => return Err(fatal("verdict file mixes judges; pass --judge")),
            }
        }
    };
    Ok(crate::judge::latest_by_pair(&all, &id).into_values().collect())
}

async fn eval_run(ctx: &Ctx, args: EvalRunArgs) -> Result<(), CliError> {
    let mut cfg = ctx.judge_config(&args.judge)?;
    if let JudgeKind::Generative(g) = &mut cfg.kind {
        if let Some(m) = args.mode {
            g.prompt_mode = m;
        }
        if let Some(k) = args.k {
            g.rollouts_k = k;
        }
    } else if args.mode.is_some() || args.k.is_some() {
        return Err(fatal("--mode and --k apply to generative judges only"));
    }
    cfg.validate()?;
    let manifest = read_manifest(&args.manifest)?;
    let scores = match &cfg.kind {
        JudgeKind::Metric(_) => {
            let path = ctx.default_path(&args.scores, "scores.jsonl")?;
            let (recs, bad) = parse_lines::<ScoreRecord>(&read_input(&path)?);
            if !bad.is_empty() {
                return Err(fatal(format!("{}: {}", path.display(), bad.join("; "))));
            }
            Some(recs.into_iter().collect::<ScoreTable>())
        }
        JudgeKind::Generative(_) => None,
    };
    let corpus = corpus(ctx)?;
    let exemplars = match &cfg.kind {
        JudgeKind::Generative(g) if matches!(g.prompt_mode, PromptMode::Fewshot(_)) => {
            let ex_manifest = read_manifest(&ctx.default_path(&args.exemplars, "manifests/dev.txt")?)?;
            let labels = human_labels(&ctx.aggregated(&None)?);
            ex_manifest
                .pair_ids
                .iter()
                .filter_map(|id| {
                    Some(Exemplar {
                        pair: corpus.get(id)?.clone(),
                        label: *labels.get(id)?,
                    })
                })
                .collect()
        }
        _ => Vec::new(),
    };
    let judge = Judge::from_config(&cfg, scores)?;
    let out = ctx.verdict_path(&args.out, Some(&cfg.judge_id))?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let store = VerdictStore::open(&out)?;
    let opts = BenchmarkOptions {
        pair_concurrency: args.concurrency.max(1),
        stop_after: args.stop_after,
        exemplars,
    };
    let summary = run_benchmark(&judge, &manifest.pair_ids, &corpus, &store, &opts).await?;
    print_json(&summary)?;
    partial_or_ok(
        summary
            .failures
            .iter()
            .map(|f| format!("{}: {}", f.pair_id, f.error))
            .collect(),
    )
}
