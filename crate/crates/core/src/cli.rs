//! Command-line entry point. Exit codes: 0 success, 1 input error,
//! 2 backend failure, 3 internal invariant violation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::captioner::BackendError;
use crate::config::{ConfigError, Overrides, PipelineConfig};
use crate::dpo::{self, plot, DpoError, RunOrder, StageData, ToyModel};
use crate::fixture;
use crate::pairset::{
    self, build_pairs, funnel_stats, make_schedule, normalize_levels, validate_dataset, write_dataset, DatasetManifest,
    FunnelError, PipelineEvent, PreferencePair, ValidationError, MANIFEST_FILE,
};
use crate::perturber::{self, synthetic_clips, PerturbationKind, PerturbationSpec};
use crate::pipeline::{self, read_jsonl, write_jsonl, CuratedVideo, PipelineError};

/// Like `println!`, but a closed stdout (e.g. piped into `head`) is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

macro_rules! say_raw {
    ($($arg:tt)*) => {{
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

pub const DEFAULT_CONFIG: &str = "temple-forge.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => 1,
            Self::Backend(_) => 2,
            Self::Invariant(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Write { .. } => Self::Invariant(e.to_string()),
            _ => Self::Input(e.to_string()),
        }
    }
}

impl From<pairset::PairsetError> for CliError {
    fn from(e: pairset::PairsetError) -> Self {
        match e {
            pairset::PairsetError::Write { .. } => Self::Invariant(e.to_string()),
            _ => Self::Input(e.to_string()),
        }
    }
}

impl From<ValidationError> for CliError {
    fn from(e: ValidationError) -> Self {
        if e.is_input() {
            Self::Input(e.to_string())
        } else {
            Self::Invariant(format!("invalid dataset: {e}"))
        }
    }
}

impl From<DpoError> for CliError {
    fn from(e: DpoError) -> Self {
        match e {
            DpoError::NonFinite { .. } => Self::Invariant(e.to_string()),
            _ => Self::Input(e.to_string()),
        }
    }
}

impl From<FunnelError> for CliError {
    fn from(e: FunnelError) -> Self {
        Self::Invariant(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogFormat {
    Text,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum OrderArg {
    DpoThenSft,
    SftThenDpo,
    SftOnly,
    DpoOnly,
    /// Every order on the same data and seed.
    All,
}

impl OrderArg {
    fn orders(self) -> Vec<RunOrder> {
        match self {
            Self::DpoThenSft => vec![RunOrder::DpoThenSft],
            Self::SftThenDpo => vec![RunOrder::SftThenDpo],
            Self::SftOnly => vec![RunOrder::SftOnly],
            Self::DpoOnly => vec![RunOrder::DpoOnly],
            Self::All => RunOrder::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "temple-forge", version, about = "Temporal preference-pair dataset builder")]
pub struct Cli {
    /// Pipeline config (TOML). Defaults to ./temple-forge.toml when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-video parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print what would be done; write nothing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[arg(long, global = true, value_enum, default_value_t = LogFormat::Text)]
    pub log_format: LogFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest, scene filtering, grouping and keyframes; writes curated videos and funnel events.
    Select,
    /// Print the perturbation of one curated video (or of N synthetic clips).
    PerturbPreview {
        #[arg(long)]
        kind: PerturbationKind,
        #[arg(long)]
        r: u32,
        #[arg(long, conflicts_with = "clips")]
        video: Option<String>,
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Clean contextual captions for every curated video.
    Caption,
    /// Build the preference-pair dataset from the clean captions.
    BuildPairs,
    /// Funnel report from the selection events.
    Stats,
    /// Emit the curriculum stages.
    Schedule,
    /// Run the toy preference-optimisation harness and plot its logs.
    TrainToy {
        #[arg(long, value_enum, default_value_t = OrderArg::DpoOnly)]
        order: OrderArg,
        /// Train on a built dataset (hashing tokenizer) instead of synthetic pairs.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Re-check every invariant of an existing dataset.
    Validate {
        /// Dataset directory; defaults to the configured output.
        dir: Option<PathBuf>,
    },
    /// Write the synthetic 20-video corpus and a matching config.
    Fixture { dir: PathBuf },
}

fn init_logging(format: LogFormat) {
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"));
    if format == LogFormat::Jsonl {
        b.format(|buf, rec| {
            let line = serde_json::json!({
                "level": rec.level().as_str(),
                "target": rec.target(),
                "message": rec.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    let _ = b.try_init();
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None if Path::new(DEFAULT_CONFIG).exists() => PipelineConfig::load(Path::new(DEFAULT_CONFIG))?,
        None => {
            let cwd = std::env::current_dir().map_err(|e| CliError::Input(e.to_string()))?;
            PipelineConfig::from_toml("", &cwd, Path::new("<defaults>"))?
        }
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        output_dir: None,
    });
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Invariant(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Invariant(format!("cannot write {}: {e}", path.display())))
}

fn read_curated(cfg: &PipelineConfig) -> Result<Vec<CuratedVideo>, CliError> {
    let path = cfg.curated_path();
    if !path.exists() {
        return Err(CliError::Input(format!("{} not found; run `select` first", path.display())));
    }
    Ok(read_jsonl(&path)?)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    init_logging(cli.log_format);
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Input("--jobs must be >= 1".into()));
        }
        // Fails only if a pool already exists, as in repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match &cli.command {
        Command::Fixture { dir } => cmd_fixture(dir, cli.dry_run),
        Command::Validate { dir } => {
            let dir = match dir {
                Some(d) => d.clone(),
                None => load_config(cli)?.dataset_dir(),
            };
            cmd_validate(&dir)
        }
        cmd => {
            let cfg = load_config(cli)?;
            match cmd {
                Command::Select => cmd_select(&cfg, cli.dry_run),
                Command::PerturbPreview { kind, r, video, clips } => cmd_preview(&cfg, *kind, *r, video.as_deref(), *clips),
                Command::Caption => cmd_caption(&cfg, cli.dry_run),
                Command::BuildPairs => cmd_build_pairs(&cfg, cli.dry_run),
                Command::Stats => cmd_stats(&cfg, cli.dry_run),
                Command::Schedule => cmd_schedule(&cfg, cli.dry_run),
                Command::TrainToy { order, dataset } => cmd_train_toy(&cfg, *order, dataset.as_deref(), cli.dry_run),
                Command::Fixture { .. } | Command::Validate { .. } => unreachable!("handled above"),
            }
        }
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_fixture(dir: &Path, dry_run: bool) -> Result<(), CliError> {
    if dry_run {
        for v in fixture::fixture_plan() {
            say!("{} {} scenes, {} colours, {} s ({:?})", v.video_id, v.scenes.len(), v.colors, v.duration_s, v.expect);
        }
        return Ok(());
    }
    let corpus = fixture::write_fixture(dir).map_err(|e| CliError::Input(e.to_string()))?;
    say!("wrote {} videos", corpus.videos.len());
    say!("manifest: {}", corpus.manifest.display());
    say!("config:   {}", corpus.config.display());
    Ok(())
}

fn cmd_validate(dir: &Path) -> Result<(), CliError> {
    let report = validate_dataset(dir)?;
    say!("dataset {} is valid", dir.display());
    for (r, n) in report.counts.iter().rev() {
        say!("  r={r}: {n} pairs");
    }
    say!("  total: {}", report.total);
    if !report.equal_split_sizes {
        say!("  note: difficulty splits differ in size");
    }
    Ok(())
}

fn cmd_select(cfg: &PipelineConfig, dry_run: bool) -> Result<(), CliError> {
    let sel = pipeline::select(cfg)?;
    let original = sel
        .events
        .iter()
        .filter_map(|e| match e {
            PipelineEvent::Video { video_id, .. } => Some(video_id.as_str()),
            PipelineEvent::Pairs { .. } => None,
        })
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    say!("selected {} of {} videos", sel.curated.len(), original);
    if dry_run {
        say!("dry run: would write {} and {}", cfg.curated_path().display(), cfg.events_path().display());
        return Ok(());
    }
    write_jsonl(&cfg.curated_path(), &sel.curated)?;
    write_jsonl(&cfg.events_path(), &sel.events)?;
    say!("curated: {}", cfg.curated_path().display());
    say!("events:  {}", cfg.events_path().display());
    Ok(())
}

fn cmd_preview(cfg: &PipelineConfig, kind: PerturbationKind, r: u32, video: Option<&str>, clips: Option<usize>) -> Result<(), CliError> {
    let (video_id, clip_list) = match (video, clips) {
        (Some(id), _) => {
            let curated = read_curated(cfg)?;
            let v = curated
                .into_iter()
                .find(|v| v.entry.video_id == id)
                .ok_or_else(|| CliError::Input(format!("video {id:?} is not in the curated set")))?;
            (id.to_string(), v.clips)
        }
        (None, Some(n)) => ("synthetic".to_string(), synthetic_clips(n)),
        (None, None) => return Err(CliError::Input("pass --video <id> or --clips <n>".into())),
    };
    let spec = PerturbationSpec::derive(cfg.perturber.global_seed, &video_id, kind, r).map_err(|e| CliError::Input(e.to_string()))?;
    let out = perturber::apply(&clip_list, &spec).map_err(|e| CliError::Input(e.to_string()))?;
    say!("{}", serde_json::to_string_pretty(&out).expect("serialises"));
    Ok(())
}

fn backend_error(e: BackendError) -> CliError {
    match e {
        BackendError::Config(_) => CliError::Input(e.to_string()),
        _ => CliError::Backend(e.to_string()),
    }
}

fn cmd_caption(cfg: &PipelineConfig, dry_run: bool) -> Result<(), CliError> {
    let curated = read_curated(cfg)?;
    if dry_run {
        let calls: usize = curated.iter().map(|v| v.clips.len() + 1).sum();
        say!("dry run: {} videos, {calls} backend calls", curated.len());
        return Ok(());
    }
    let backend = cfg.captioner.backend.build().map_err(backend_error)?;
    let run = pipeline::caption_all(
        &curated,
        cfg,
        backend.as_ref(),
        &cfg.captioner.prompts,
        cfg.captioner.backend.concurrency_limit,
    );
    write_jsonl(&cfg.captions_path(), &run.captioned)?;
    write_jsonl(&cfg.caption_failures_path(), &run.failures)?;
    say!("captioned {} of {} videos", run.captioned.len(), curated.len());
    say!("captions: {}", cfg.captions_path().display());
    if !run.failures.is_empty() {
        return Err(CliError::Backend(format!(
            "{} videos failed; see {}",
            run.failures.len(),
            cfg.caption_failures_path().display()
        )));
    }
    Ok(())
}

fn cmd_build_pairs(cfg: &PipelineConfig, dry_run: bool) -> Result<(), CliError> {
    let path = cfg.captions_path();
    if !path.exists() {
        return Err(CliError::Input(format!("{} not found; run `caption` first", path.display())));
    }
    let videos: Vec<crate::captioner::CaptionedVideo> = read_jsonl(&path)?;
    let levels = normalize_levels(&cfg.perturber.levels)?;
    let mut kinds = cfg.perturber.kinds.clone();
    kinds.sort_by_key(|k| k.as_str());
    kinds.dedup();
    let dir = cfg.dataset_dir();
    if dry_run {
        say!(
            "plan: {} videos x {} levels x {} kinds = {} pairs",
            videos.len(),
            levels.len(),
            kinds.len(),
            videos.len() * levels.len() * kinds.len()
        );
        for &r in &levels {
            say!("{}:", dir.join(pairset::level_file_name(r)).display());
            for v in &videos {
                for &k in &kinds {
                    let spec = PerturbationSpec::derive(cfg.perturber.global_seed, &v.video_id, k, r)
                        .map_err(|e| CliError::Input(e.to_string()))?;
                    say!("  {}", pairset::pair_id(&v.video_id, k, r, spec.seed));
                }
            }
        }
        return Ok(());
    }
    let backend = cfg.captioner.backend.build().map_err(backend_error)?;
    let build = build_pairs(
        &videos,
        &levels,
        &kinds,
        backend.as_ref(),
        &cfg.captioner.prompts,
        cfg.perturber.global_seed,
        &cfg.pairset,
    )?;
    let manifest = write_dataset(&dir, &build, &cfg.config_hash())?;
    // A dataset we just wrote must pass our own validator.
    validate_dataset(&dir).map_err(|e| CliError::Invariant(format!("freshly built dataset is invalid: {e}")))?;
    for r in &manifest.levels {
        say!("r={r}: {} pairs", manifest.counts[&r.to_string()]);
    }
    say!("skipped: {}", build.skipped.len());
    say!("dataset: {}", dir.display());
    if !build.failures.is_empty() {
        return Err(CliError::Backend(format!(
            "{} videos failed; see {}",
            build.failures.len(),
            dir.join(pairset::FAILURES_FILE).display()
        )));
    }
    Ok(())
}

fn cmd_stats(cfg: &PipelineConfig, dry_run: bool) -> Result<(), CliError> {
    let path = cfg.events_path();
    if !path.exists() {
        return Err(CliError::Input(format!("{} not found; run `select` first", path.display())));
    }
    let mut events: Vec<PipelineEvent> = read_jsonl(&path)?;
    let manifest_path = cfg.dataset_dir().join(MANIFEST_FILE);
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| CliError::Input(e.to_string()))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| CliError::Invariant(format!("{}: {e}", manifest_path.display())))?;
        for r in &m.levels {
            let count = *m.counts.get(&r.to_string()).unwrap_or(&0);
            events.push(PipelineEvent::Pairs { level: *r, count });
        }
    }
    let mut report = funnel_stats(&events)?;
    report.config_hash = Some(cfg.config_hash());
    let t = &report.total;
    if !(t.original >= t.after_step1 && t.after_step1 >= t.after_step2) {
        return Err(CliError::Invariant(format!("funnel counts increase: {t:?}")));
    }
    say_raw!("{}", report.render());
    if !dry_run {
        let out = cfg.paths.output_dir.join("funnel.json");
        write_text(&out, &(serde_json::to_string_pretty(&report).expect("serialises") + "\n"))?;
    }
    Ok(())
}

fn cmd_schedule(cfg: &PipelineConfig, dry_run: bool) -> Result<(), CliError> {
    let stages = make_schedule(&cfg.perturber.levels, &cfg.dataset_dir(), cfg.pairset.steps_per_stage)?;
    for s in &stages {
        say!("stage {}: r={} steps={} data={}", s.stage_index, s.r, s.steps, s.dataset_path.display());
    }
    if !dry_run {
        let out = cfg.paths.output_dir.join("schedule.json");
        write_text(&out, &(serde_json::to_string_pretty(&stages).expect("serialises") + "\n"))?;
    }
    Ok(())
}

fn toy_stages(cfg: &PipelineConfig, dataset: Option<&Path>) -> Result<Vec<StageData>, CliError> {
    let levels = normalize_levels(&cfg.perturber.levels)?;
    match dataset {
        None => levels
            .into_iter()
            .map(|r| Ok(StageData { r, pairs: dpo::synthetic_pairs(&cfg.toy, r, cfg.dpo.seed)? }))
            .collect(),
        Some(dir) => {
            let report = validate_dataset(dir)?;
            report
                .levels
                .iter()
                .map(|&r| {
                    let pairs: Vec<PreferencePair> = read_jsonl(&dir.join(pairset::level_file_name(r)))?;
                    let pairs = dpo::token_pairs_from_preferences(&pairs, cfg.toy.vocab_size, cfg.toy.context_dim)?;
                    Ok(StageData { r, pairs })
                })
                .collect()
        }
    }
}

fn cmd_train_toy(cfg: &PipelineConfig, order: OrderArg, dataset: Option<&Path>, dry_run: bool) -> Result<(), CliError> {
    let stages = toy_stages(cfg, dataset)?;
    let model_seed = crate::rng::derive_seed(cfg.dpo.seed, "toy", "init", 0);
    let init = ToyModel::random(cfg.toy.vocab_size, cfg.toy.context_dim, 0.01, model_seed)?;
    let mut runs = Vec::new();
    for o in order.orders() {
        let log = dpo::run_curriculum(init.clone(), &stages, o, &cfg.dpo)?;
        for s in &log.stages {
            let r = s.r.map_or_else(|| "all".to_string(), |r| r.to_string());
            say!(
                "{o} stage {} r={r} {}: loss {:.6} -> {:.6}, margin {:.6}",
                s.stage,
                s.objective.as_str(),
                s.records.first().map_or(f64::NAN, |x| x.loss),
                s.final_loss,
                s.final_margin
            );
        }
        runs.push(log);
    }
    if dry_run {
        return Ok(());
    }
    let dir = cfg.paths.output_dir.join("toy");
    for run in &runs {
        write_text(&dir.join(format!("{}.jsonl", run.order)), &run.to_jsonl())?;
    }
    for (name, svg) in plot::run_charts(&runs) {
        write_text(&dir.join(format!("{name}.svg")), &svg)?;
    }
    say!("logs and plots: {}", dir.display());
    Ok(())
}
