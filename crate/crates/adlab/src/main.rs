//! Command-line orchestration: dataset generation, the two training stages,
//! evaluation, and telemetry reporting, driven by a single JSON run-config.
//!
//! Exit codes are a stable scripting contract: 0 success, 2 config error,
//! 3 IO error, 4 training divergence, 5 judge configuration error.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use adlab::eval::{evaluate, write_report, EvalError, EvalOptions};
use adlab::judge::{Judge, JudgeError, RemoteJudge, RemoteJudgeConfig};
use adlab::policy::{
    init_params, load_checkpoint, save_checkpoint, PolicyConfig, PolicyError, PolicyParams,
};
use adlab::taskgen::{
    gen_dataset, load_dataset, save_dataset, write_metadata, DataError, GeneratorConfig,
};
use adlab::telemetry::{
    read_telemetry, render_reward_svg, summarize, CsvSink, CurveSummary, TelemetryError,
};
use adlab::text::{Difficulty, Sample, TextError, Vocab};
use adlab::train::{run_rft, run_sft, GrpoConfig, RewardMode, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct SftConfig {
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { epochs: 12, learning_rate: 2e-3, batch_size: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct PathsConfig {
    data_dir: PathBuf,
    checkpoint_dir: PathBuf,
    telemetry_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            telemetry_dir: "telemetry".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum JudgeKind {
    Exact,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    generator: GeneratorConfig,
    policy: PolicyConfig,
    sft: SftConfig,
    rft: GrpoConfig,
    judge_kind: JudgeKind,
    paths: PathsConfig,
    seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            policy: PolicyConfig::default(),
            sft: SftConfig::default(),
            rft: GrpoConfig::default(),
            judge_kind: JudgeKind::Exact,
            paths: PathsConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RewardModeArg {
    Ad,
    Vanilla,
}

impl From<RewardModeArg> for RewardMode {
    fn from(m: RewardModeArg) -> Self {
        match m {
            RewardModeArg::Ad => RewardMode::Ad,
            RewardModeArg::Vanilla => RewardMode::Vanilla,
        }
    }
}

#[derive(Parser)]
#[command(name = "adlab", version, about = "Difficulty-adaptive reasoning lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset (JSONL plus metadata sidecar).
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output path; defaults to <data_dir>/dataset.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised fine-tuning from fresh initialization.
    Sft {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// GRPO fine-tuning from a checkpoint or from initialization.
    Rft {
        #[arg(long)]
        config: PathBuf,
        /// Starting checkpoint; omitted means fresh initialization.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        reward_mode: Option<RewardModeArg>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        judge: Option<JudgeKind>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint and write a report JSON.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset to evaluate; defaults to <data_dir>/dataset.jsonl.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Summarize telemetry CSVs and emit a reward-curve SVG.
    Report {
        #[arg(long)]
        telemetry_dir: PathBuf,
        /// Summary JSON output path.
        #[arg(long)]
        out: PathBuf,
        /// SVG output path; defaults to <out> with an .svg extension.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Divergence(String),
    JudgeConfig(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::JudgeConfig(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Io(m)
            | CliError::Divergence(m)
            | CliError::JudgeConfig(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TextError> for CliError {
    fn from(e: TextError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(e) => CliError::Io(e.to_string()),
            DataError::Parse { .. } => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Io(e) => CliError::Io(e.to_string()),
            PolicyError::Checkpoint(_) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<JudgeError> for CliError {
    fn from(e: JudgeError) -> Self {
        CliError::JudgeConfig(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged(_) => CliError::Divergence(e.to_string()),
            TrainError::Judge(j) => j.into(),
            TrainError::Policy(p) => p.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(e) => CliError::Io(e.to_string()),
            EvalError::Parse(_) => CliError::Io(e.to_string()),
            EvalError::Judge(j) => j.into(),
            EvalError::Policy(p) => p.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TelemetryError> for CliError {
    fn from(e: TelemetryError) -> Self {
        match e {
            TelemetryError::Io(e) => CliError::Io(e.to_string()),
            TelemetryError::Parse { .. } => CliError::Io(e.to_string()),
            TelemetryError::Empty => CliError::Config(e.to_string()),
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.generator.validate()?;
    cfg.policy.validate()?;
    cfg.rft.validate()?;
    if cfg.sft.batch_size == 0 || cfg.sft.learning_rate <= 0.0 {
        return Err(CliError::Config(
            "sft.batch_size must be positive and sft.learning_rate > 0".into(),
        ));
    }
    Ok(cfg)
}

/// Exclusive writer lock for a checkpoint directory, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("adlab.lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                CliError::Io(format!(
                    "cannot acquire {} (another writer running?): {e}",
                    path.display()
                ))
            })?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn dataset_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_dir.join("dataset.jsonl")
}

/// Builds the run vocabulary and checks it fits the policy configuration.
fn build_vocab(cfg: &RunConfig) -> Result<(Vocab, PolicyConfig), CliError> {
    let vocab = cfg.generator.vocab()?;
    if vocab.len() > cfg.policy.vocab_size {
        return Err(CliError::Config(format!(
            "vocabulary of {} tokens exceeds policy vocab_size {}",
            vocab.len(),
            cfg.policy.vocab_size
        )));
    }
    let mut pcfg = cfg.policy.clone();
    // Size the embedding table to the actual vocabulary.
    pcfg.vocab_size = vocab.len();
    Ok((vocab, pcfg))
}

fn load_samples(path: &Path) -> Result<Vec<Sample>, CliError> {
    let samples = load_dataset(path)?;
    if samples.is_empty() {
        return Err(CliError::Config(format!("{}: empty dataset", path.display())));
    }
    Ok(samples)
}

fn build_judge(kind: JudgeKind) -> Result<Judge, CliError> {
    match kind {
        JudgeKind::Exact => Ok(Judge::Exact),
        JudgeKind::Remote => {
            let mut rc = RemoteJudgeConfig::from_env();
            // A remote run without an endpoint is a configuration error, not
            // a silent lexical run.
            rc.fallback_enabled = false;
            if rc.url.is_none() {
                return Err(JudgeError::ConfigMissing.into());
            }
            Ok(Judge::Remote(RemoteJudge::new(rc)))
        }
    }
}

fn cmd_gen_data(config: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let out = out.unwrap_or_else(|| dataset_path(&cfg));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let samples = gen_dataset(&cfg.generator)?;
    save_dataset(&samples, &out)?;
    let meta = write_metadata(&out, &cfg.generator)?;
    let n_simple = samples.iter().filter(|s| s.difficulty == Difficulty::Simple).count();
    println!(
        "wrote {} samples ({} simple, {} complex) to {} (sha256 {})",
        samples.len(),
        n_simple,
        samples.len() - n_simple,
        out.display(),
        meta.sha256
    );
    Ok(())
}

fn cmd_sft(config: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (vocab, mut pcfg) = build_vocab(&cfg)?;
    pcfg.seed = cfg.seed;
    let dataset = load_samples(&dataset_path(&cfg))?;
    let _lock = DirLock::acquire(&cfg.paths.checkpoint_dir)?;
    std::fs::create_dir_all(&cfg.paths.telemetry_dir)?;
    let mut sink = CsvSink::create(&cfg.paths.telemetry_dir.join("sft.csv"))?;
    let params = init_params(&pcfg)?;
    let trained = run_sft(
        params,
        &dataset,
        cfg.sft.epochs,
        cfg.sft.learning_rate,
        cfg.sft.batch_size,
        &vocab,
        &mut sink,
        cfg.seed,
    )?;
    let ckpt = cfg.paths.checkpoint_dir.join("sft.ckpt");
    save_checkpoint(&trained, &ckpt)?;
    let rows = read_telemetry(&cfg.paths.telemetry_dir.join("sft.csv"))?;
    let final_loss = rows.iter().rev().find_map(|r| r.sft_loss);
    match final_loss {
        Some(loss) => println!("sft done: {} steps, final loss {loss:.6}", rows.len()),
        None => println!("sft done: 0 steps (epochs = 0)"),
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_rft(
    config: &Path,
    init_checkpoint: Option<PathBuf>,
    reward_mode: Option<RewardModeArg>,
    steps: Option<usize>,
    judge_kind: Option<JudgeKind>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = reward_mode {
        cfg.rft.reward_mode = m.into();
    }
    if let Some(s) = steps {
        cfg.rft.steps = s;
    }
    let judge = build_judge(judge_kind.unwrap_or(cfg.judge_kind))?;
    let (vocab, mut pcfg) = build_vocab(&cfg)?;
    pcfg.seed = cfg.seed;
    let dataset = load_samples(&dataset_path(&cfg))?;
    let init = match &init_checkpoint {
        Some(path) => {
            let p = load_checkpoint(path)?;
            if p.config.vocab_size != vocab.len() {
                return Err(CliError::Config(format!(
                    "checkpoint vocab_size {} does not match the {}-token run vocabulary",
                    p.config.vocab_size,
                    vocab.len()
                )));
            }
            p
        }
        None => init_params(&pcfg)?,
    };
    let mode_name = match cfg.rft.reward_mode {
        RewardMode::Ad => "ad",
        RewardMode::Vanilla => "vanilla",
    };
    let _lock = DirLock::acquire(&cfg.paths.checkpoint_dir)?;
    std::fs::create_dir_all(&cfg.paths.telemetry_dir)?;
    let telemetry = cfg.paths.telemetry_dir.join(format!("rft-{mode_name}.csv"));
    let mut sink = CsvSink::create(&telemetry)?;
    let ref_params = init.clone();
    let trained = run_rft(
        init,
        &ref_params,
        &dataset,
        &cfg.rft,
        &judge,
        &vocab,
        &mut sink,
        cfg.seed,
    )?;
    let ckpt = cfg.paths.checkpoint_dir.join(format!("rft-{mode_name}.ckpt"));
    save_checkpoint(&trained, &ckpt)?;
    let rows = read_telemetry(&telemetry)?;
    let final_reward = rows.iter().rev().find_map(|r| r.mean_total_reward);
    match final_reward {
        Some(r) => println!(
            "rft ({mode_name}) done: {} steps, final mean reward {r:.4}",
            rows.len()
        ),
        None => println!("rft ({mode_name}) done: 0 steps"),
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    dataset: Option<PathBuf>,
    report_path: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let (vocab, _) = build_vocab(&cfg)?;
    let params: PolicyParams = load_checkpoint(checkpoint)?;
    if params.config.vocab_size != vocab.len() {
        return Err(CliError::Config(format!(
            "checkpoint vocab_size {} does not match the {}-token run vocabulary",
            params.config.vocab_size,
            vocab.len()
        )));
    }
    let data = load_samples(&dataset.unwrap_or_else(|| dataset_path(&cfg)))?;
    let report = evaluate(&params, &data, &vocab, &EvalOptions::default())?;
    write_report(&report, report_path)?;
    println!(
        "acc_b {:.4}  acc_a {:.4}  Thk.%Basic {:.1}%  Ans.%Assum. {:.1}%",
        report.acc_basic,
        report.acc_assumptive,
        report.thk_pct_basic * 100.0,
        report.ans_pct_assum * 100.0
    );
    println!("report: {}", report_path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportFileSummary {
    file: String,
    summary: CurveSummary,
}

fn cmd_report(telemetry_dir: &Path, out: &Path, svg: Option<PathBuf>) -> Result<(), CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(telemetry_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    let mut curves = Vec::new();
    let mut summaries = Vec::new();
    for path in &files {
        let rows = read_telemetry(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        if let Some(summary) = summarize(&rows, 50) {
            summaries.push(ReportFileSummary { file: name.clone(), summary });
        }
        curves.push((name, rows));
    }
    if summaries.is_empty() {
        return Err(TelemetryError::Empty.into());
    }
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(out, serde_json::to_string_pretty(&summaries).expect("serializes"))?;
    let svg_path = svg.unwrap_or_else(|| out.with_extension("svg"));
    let reward_curves: Vec<(String, Vec<adlab::train::StepStats>)> = curves
        .into_iter()
        .filter(|(_, rows)| rows.iter().any(|r| r.mean_total_reward.is_some()))
        .collect();
    std::fs::write(&svg_path, render_reward_svg(&reward_curves))?;
    for s in &summaries {
        println!(
            "{}: first-50 mean {:.4}, last-50 mean {:.4}{}",
            s.file,
            s.summary.first_window_mean_reward,
            s.summary.last_window_mean_reward,
            if s.summary.rising { " (rising)" } else { "" }
        );
    }
    println!("summary: {}  chart: {}", out.display(), svg_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenData { config, out } => cmd_gen_data(&config, out),
        Cmd::Sft { config, seed } => cmd_sft(&config, seed),
        Cmd::Rft { config, init_checkpoint, reward_mode, steps, judge, seed } => {
            cmd_rft(&config, init_checkpoint, reward_mode, steps, judge, seed)
        }
        Cmd::Eval { config, checkpoint, dataset, report } => {
            cmd_eval(&config, &checkpoint, dataset, &report)
        }
        Cmd::Report { telemetry_dir, out, svg } => cmd_report(&telemetry_dir, &out, svg),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
