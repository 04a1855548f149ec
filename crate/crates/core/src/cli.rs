//! Command-line entry points.
//!
//! Configuration is layered: command-line flags override the TOML file given
//! with `--config`, which overrides the built-in defaults. The merged config
//! is written next to every output as `effective_config.toml`.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 a
//! dependency (policy endpoint, database root, bind address) is unreachable.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{
    emit_report, evaluate, filter_dataset, load_dataset, render_question, write_dataset, EvalConfig, PromptBuilder,
    ReportFormat, TaskSample,
};
use crate::grpo::{filter_trajectories, group_advantages, train_toy, write_curve_csv, FilterPolicy, TrainConfig};
use crate::reward::{total_reward, RewardConfig};
use crate::rollout::mock::{ConstantAnswerPolicy, OraclePolicy, ScriptedPolicy};
use crate::rollout::{run_group, write_jsonl, ChatCompletionsClient, PolicyEndpoint, RolloutConfig};
use crate::sandbox::{serve_tool, Sandbox, SandboxConfig, DEFAULT_ROW_LIMIT, DEFAULT_TIMEOUT_MS};

/// Batch size of the reference training setup.
pub const REFERENCE_BATCH_SIZE: usize = 64;
/// Learning rate of the reference training setup.
pub const REFERENCE_LEARNING_RATE: f64 = 1e-6;
pub const DEFAULT_API_KEY_ENV: &str = "TIR_SQL_API_KEY";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dependency unreachable: {0}")]
    Unreachable(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Unreachable(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

fn io_err(context: &str, path: &Path) -> impl FnOnce(std::io::Error) -> CliError {
    let context = format!("{context} {}", path.display());
    move |e| CliError::Other(format!("{context}: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Base URL of an OpenAI-compatible endpoint.
    pub url: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { url: None, model: "policy".into(), api_key_env: DEFAULT_API_KEY_ENV.into() }
    }
}

/// Everything a command can be configured with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub db_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub timeout_ms: u64,
    pub row_limit: usize,
    /// Worker threads for rollout fan-out; 0 uses all cores.
    pub parallelism: usize,
    pub seed: u64,
    pub policy: PolicyConfig,
    pub rollout: RolloutConfig,
    pub reward: RewardConfig,
    pub filter: FilterPolicy,
    pub toy: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            db_root: None,
            out_dir: PathBuf::from("out"),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            row_limit: DEFAULT_ROW_LIMIT,
            parallelism: 0,
            seed: 0,
            policy: PolicyConfig::default(),
            rollout: RolloutConfig::default(),
            reward: RewardConfig::default(),
            filter: FilterPolicy::default(),
            toy: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: String| CliError::Config(e);
        self.rollout.validate().map_err(|e| cfg(e.to_string()))?;
        self.reward.validate().map_err(cfg)?;
        self.filter.validate().map_err(|e| cfg(e.to_string()))?;
        self.toy.filter_policy.validate().map_err(|e| cfg(e.to_string()))?;
        self.toy.env.validate().map_err(cfg)?;
        if self.timeout_ms == 0 || self.row_limit == 0 {
            return Err(cfg("timeout_ms and row_limit must be positive".into()));
        }
        if self.toy.group_size == 0 || self.toy.prompts_per_step == 0 || self.toy.lr.is_nan() || self.toy.lr < 0.0 {
            return Err(cfg("toy trainer needs group_size >= 1, prompts_per_step >= 1, lr >= 0".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn sandbox(&self) -> Result<Sandbox, CliError> {
        let root = self.db_root()?;
        let cfg = SandboxConfig::new(root).with_timeout_ms(self.timeout_ms).with_row_limit(self.row_limit);
        Sandbox::new(cfg).map_err(|e| CliError::Config(e.to_string()))
    }

    fn db_root(&self) -> Result<PathBuf, CliError> {
        self.db_root.clone().ok_or_else(|| CliError::Config("--db-root is required".into()))
    }

    fn dataset(&self) -> Result<Vec<TaskSample>, CliError> {
        let path = self.dataset.as_ref().ok_or_else(|| CliError::Config("--dataset is required".into()))?;
        load_dataset(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    fn prepare_out_dir(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out_dir).map_err(io_err("cannot create", &self.out_dir))?;
        let path = self.out_dir.join("effective_config.toml");
        std::fs::write(&path, self.to_toml()).map_err(io_err("cannot write", &path))
    }
}

#[derive(Debug, Parser)]
#[command(name = "tir-sql", version, about = "Multi-turn tool-integrated text-to-SQL rollouts, rewards and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the SQL tool over HTTP (GET /tools, POST /tools/execute_sql_query).
    ServeTool(ServeArgs),
    /// Sample rollout groups for every dataset sample and write trajectories with rewards.
    Rollout(RolloutArgs),
    /// Drop samples whose gold query errors, times out or returns no rows.
    FilterData(FilterArgs),
    /// Greedy pass@1 evaluation; writes report.json and report.md.
    Evaluate(EvaluateArgs),
    /// Train the toy tabular policy and write its reward curve.
    TrainToy(TrainToyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML config file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of `<db_id>.sqlite` files.
    #[arg(long)]
    pub db_root: Option<PathBuf>,
    /// Per-query timeout in milliseconds [default: 30000].
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    /// Rows returned to the model per query [default: 10, as in the tool description].
    #[arg(long)]
    pub row_limit: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset file (JSON array or JSON lines, BIRD/Spider field names).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory [default: out].
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PolicyArgs {
    /// OpenAI-compatible base URL. The API key is read from the variable named by `policy.api_key_env` [default: TIR_SQL_API_KEY].
    #[arg(long)]
    pub policy_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Use a built-in policy instead of an endpoint: `oracle`, `constant:<SQL>` or `script:<file>` (JSON array of turns).
    #[arg(long)]
    pub mock_policy: Option<String>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value = "127.0.0.1:8811")]
    pub bind: SocketAddr,
}

#[derive(Debug, Clone, Args)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Rollouts per prompt [default: 5, reference training setup].
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Maximum model turns per rollout [default: 6, reference training setup].
    #[arg(long)]
    pub max_turns: Option<usize>,
    /// Sampling temperature [default: 0.6, reference training setup].
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct FilterArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Maximum model turns per rollout [default: 6, reference training setup]. Decoding is greedy (temperature 0).
    #[arg(long)]
    pub max_turns: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Args)]
pub struct TrainToyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: out].
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Training steps [default: 500].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Quality filtering before the update [default: on].
    #[arg(long, value_enum)]
    pub filter: Option<Switch>,
    /// Probability that an episode's first turn is forced void [default: 0].
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// SGD step size [default: 0.5]. The reference setup (batch 64, learning rate 1e-6) trains a 4B model and does not transfer to a tabular policy.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Rollouts per prompt [default: 5, reference training setup].
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Prompts per step [default: 8].
    #[arg(long)]
    pub prompts_per_step: Option<usize>,
    /// Keep a rollout iff its quality score is strictly above this [default: 0.5].
    #[arg(long)]
    pub tau: Option<f64>,
}

fn apply_common(cfg: &mut RunConfig, a: &CommonArgs) {
    if let Some(v) = &a.db_root {
        cfg.db_root = Some(v.clone());
    }
    if let Some(v) = a.timeout_ms {
        cfg.timeout_ms = v;
    }
    if let Some(v) = a.row_limit {
        cfg.row_limit = v;
    }
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(v) = &a.dataset {
        cfg.dataset = Some(v.clone());
    }
    if let Some(v) = &a.out_dir {
        cfg.out_dir = v.clone();
    }
}

fn apply_policy(cfg: &mut RunConfig, a: &PolicyArgs) {
    if let Some(v) = &a.policy_url {
        cfg.policy.url = Some(v.clone());
    }
    if let Some(v) = &a.model {
        cfg.policy.model = v.clone();
    }
    if let Some(v) = a.parallelism {
        cfg.parallelism = v;
    }
}

/// Build the policy named by `--mock-policy`, or the HTTP client.
pub fn make_policy(
    mock: Option<&str>,
    cfg: &RunConfig,
    samples: &[TaskSample],
    logprobs: bool,
) -> Result<Box<dyn PolicyEndpoint>, CliError> {
    if let Some(spec) = mock {
        if spec == "oracle" {
            let mut oracle = OraclePolicy::new();
            for s in samples {
                oracle.insert(render_question(&s.external_knowledge, &s.question), s.db_name.clone(), s.gold_sql.clone());
            }
            return Ok(Box::new(oracle));
        }
        if let Some(sql) = spec.strip_prefix("constant:") {
            return Ok(Box::new(ConstantAnswerPolicy::new(sql)));
        }
        if let Some(path) = spec.strip_prefix("script:") {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
            let turns: Vec<String> =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
            return Ok(Box::new(ScriptedPolicy::new(turns)));
        }
        return Err(CliError::Config(format!("unknown mock policy `{spec}`")));
    }
    let url = cfg
        .policy
        .url
        .clone()
        .ok_or_else(|| CliError::Config("either --policy-url or --mock-policy is required".into()))?;
    let key = std::env::var(&cfg.policy.api_key_env).ok();
    let client = ChatCompletionsClient::new(url, cfg.policy.model.clone())
        .map_err(|e| CliError::Config(e.to_string()))?
        .with_api_key(key)
        .with_logprobs(logprobs);
    Ok(Box::new(client))
}

pub fn cmd_serve_tool(args: &ServeArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    apply_common(&mut cfg, &args.common);
    cfg.validate()?;
    let sandbox = cfg.sandbox()?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Other(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.bind)
            .await
            .map_err(|e| CliError::Unreachable(format!("cannot bind {}: {e}", args.bind)))?;
        tracing::info!(addr = %args.bind, "serving SQL tool");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        serve_tool(sandbox, listener, shutdown).await.map_err(|e| CliError::Other(e.to_string()))
    })
}

#[derive(Debug, Serialize)]
struct GroupSummary {
    prompt_id: String,
    rewards: Vec<f64>,
    advantages: Vec<f64>,
    kept: Vec<bool>,
    filtered_advantages: Option<Vec<f64>>,
}

pub fn cmd_rollout(args: &RolloutArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    apply_common(&mut cfg, &args.common);
    apply_data(&mut cfg, &args.data);
    apply_policy(&mut cfg, &args.policy);
    if let Some(v) = args.group_size {
        cfg.rollout.group_size = v;
    }
    if let Some(v) = args.max_turns {
        cfg.rollout.max_turns = v;
    }
    if let Some(v) = args.temperature {
        cfg.rollout.temperature = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.rollout.seed = cfg.seed;
    cfg.validate()?;
    let sandbox = cfg.sandbox()?;
    let samples = cfg.dataset()?;
    let policy = make_policy(args.policy.mock_policy.as_deref(), &cfg, &samples, true)?;
    cfg.prepare_out_dir()?;

    let mut builder = PromptBuilder::new(cfg.db_root()?);
    let traj_path = cfg.out_dir.join("trajectories.jsonl");
    let groups_path = cfg.out_dir.join("groups.jsonl");
    let mut traj_out = BufWriter::new(File::create(&traj_path).map_err(io_err("cannot create", &traj_path))?);
    let mut groups: Vec<String> = Vec::new();
    let mut failures = 0usize;
    let mut policy_failures = 0usize;
    let mut total = 0usize;

    for (i, sample) in samples.iter().enumerate() {
        let prompt = match builder.prompt(sample) {
            Ok(p) => p,
            Err(e) => {
                tracing::warn!(sample = %sample.sample_id, "skipped: {e}");
                failures += 1;
                continue;
            }
        };
        let mut rcfg = cfg.rollout.clone();
        rcfg.seed = cfg.seed.wrapping_add((i as u64).wrapping_mul(1_000_003));
        let mut trajs = run_group(&prompt, policy.as_ref(), &sandbox, &rcfg);
        let mut ok = true;
        for t in &mut trajs {
            total += 1;
            if t.policy_error.is_some() {
                policy_failures += 1;
            }
            match total_reward(t, &sample.db_name, &sample.gold_sql, &sandbox, &cfg.reward) {
                Ok(b) => t.reward = Some(b),
                Err(e) => {
                    ok = false;
                    tracing::warn!(sample = %sample.sample_id, "reward unavailable: {e}");
                }
            }
        }
        write_jsonl(&mut traj_out, &trajs).map_err(io_err("cannot write", &traj_path))?;
        if !ok {
            failures += 1;
            continue;
        }
        let rewards: Vec<f64> = trajs.iter().map(|t| t.reward.as_ref().map_or(0.0, |r| r.total)).collect();
        let advantages = group_advantages(&rewards, cfg.filter.epsilon_std);
        let group = crate::grpo::RolloutGroup::new(prompt.id.clone(), trajs, cfg.filter.epsilon_std);
        let summary = match filter_trajectories(group, &cfg.filter) {
            Ok(g) => GroupSummary {
                prompt_id: prompt.id.clone(),
                rewards,
                advantages,
                kept: g.kept.clone(),
                filtered_advantages: Some(g.advantages.clone()),
            },
            Err(_) => GroupSummary {
                prompt_id: prompt.id.clone(),
                kept: vec![false; rewards.len()],
                rewards,
                advantages,
                filtered_advantages: None,
            },
        };
        groups.push(serde_json::to_string(&summary).expect("summary serializes"));
    }
    drop(traj_out);
    let mut text = groups.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(&groups_path, text).map_err(io_err("cannot write", &groups_path))?;
    tracing::info!(samples = samples.len(), failures, "rollouts written to {}", traj_path.display());
    if total > 0 && policy_failures == total {
        return Err(CliError::Unreachable("every rollout failed at the policy endpoint".into()));
    }
    Ok(())
}

pub fn cmd_filter_data(args: &FilterArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    apply_common(&mut cfg, &args.common);
    apply_data(&mut cfg, &args.data);
    cfg.validate()?;
    let sandbox = cfg.sandbox()?;
    let samples = cfg.dataset()?;
    cfg.prepare_out_dir()?;
    let out = filter_dataset(&samples, &sandbox);
    let kept_path = cfg.out_dir.join("kept.json");
    write_dataset(&kept_path, &out.kept).map_err(io_err("cannot write", &kept_path))?;
    let dropped_path = cfg.out_dir.join("dropped.json");
    let mut text = serde_json::to_string_pretty(&out.dropped).expect("drops serialize");
    text.push('\n');
    std::fs::write(&dropped_path, text).map_err(io_err("cannot write", &dropped_path))?;
    for d in &out.dropped {
        tracing::info!(sample = %d.sample.sample_id, "dropped: {}", d.reason);
    }
    tracing::info!(kept = out.kept.len(), dropped = out.dropped.len(), "filtered");
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<crate::bench::EvalReport, CliError> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    apply_common(&mut cfg, &args.common);
    apply_data(&mut cfg, &args.data);
    apply_policy(&mut cfg, &args.policy);
    if let Some(v) = args.max_turns {
        cfg.rollout.max_turns = v;
    }
    cfg.rollout.temperature = 0.0;
    cfg.rollout.group_size = 1;
    cfg.validate()?;
    let sandbox = cfg.sandbox()?;
    let samples = cfg.dataset()?;
    let policy = make_policy(args.policy.mock_policy.as_deref(), &cfg, &samples, false)?;
    cfg.prepare_out_dir()?;

    let eval_cfg = EvalConfig { rollout: cfg.rollout.clone(), reward: cfg.reward.clone(), parallelism: cfg.parallelism };
    let report = evaluate(&samples, &cfg.db_root()?, policy.as_ref(), &sandbox, &eval_cfg);
    let json = cfg.out_dir.join("report.json");
    emit_report(&report, ReportFormat::Json, &json).map_err(io_err("cannot write", &json))?;
    let md = cfg.out_dir.join("report.md");
    emit_report(&report, ReportFormat::Markdown, &md).map_err(io_err("cannot write", &md))?;
    tracing::info!(n = report.n_samples, correct = report.n_correct, "EX {:.2}%", report.ex_percent);
    if report.n_samples > 0 && report.policy_errors() == report.n_samples {
        return Err(CliError::Unreachable("policy endpoint failed on every sample".into()));
    }
    Ok(report)
}

pub fn cmd_train_toy(args: &TrainToyArgs) -> Result<crate::grpo::TrainSummary, CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(v) = &args.out_dir {
        cfg.out_dir = v.clone();
    }
    let toy = &mut cfg.toy;
    if let Some(v) = args.steps {
        toy.steps = v;
    }
    if let Some(v) = args.filter {
        toy.filter = v == Switch::On;
    }
    if let Some(v) = args.noise {
        toy.env.noise = v;
    }
    if let Some(v) = args.seed {
        toy.seed = v;
    }
    if let Some(v) = args.lr {
        toy.lr = v;
    }
    if let Some(v) = args.group_size {
        toy.group_size = v;
    }
    if let Some(v) = args.prompts_per_step {
        toy.prompts_per_step = v;
    }
    if let Some(v) = args.tau {
        toy.filter_policy.tau = v;
    }
    cfg.validate()?;
    cfg.prepare_out_dir()?;
    let summary = train_toy(&cfg.toy);
    let csv = cfg.out_dir.join("toy_curve.csv");
    let f = File::create(&csv).map_err(io_err("cannot create", &csv))?;
    write_curve_csv(BufWriter::new(f), &summary.curve).map_err(io_err("cannot write", &csv))?;
    let window = 50.min(summary.curve.len()).max(1);
    let info = serde_json::json!({
        "steps": summary.curve.len(),
        "filter": cfg.toy.filter,
        "noise": cfg.toy.env.noise,
        "seed": cfg.toy.seed,
        "final_reward": if summary.curve.is_empty() { None } else { Some(summary.final_reward(window)) },
        "declining_tail": summary.has_declining_tail(window, 0.05),
        "policy": summary.policy,
    });
    let path = cfg.out_dir.join("toy_summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&info).expect("summary serializes") + "\n")
        .map_err(io_err("cannot write", &path))?;
    Ok(summary)
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::ServeTool(a) => cmd_serve_tool(a),
        Command::Rollout(a) => cmd_rollout(a),
        Command::FilterData(a) => cmd_filter_data(a),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| ()),
        Command::TrainToy(a) => cmd_train_toy(a).map(|_| ()),
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(RunConfig::from_toml("seed = 3\n[rollout]\nmax_turns = 2\n").is_ok());
        assert!(matches!(RunConfig::from_toml("bogus = 1\n"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::from_toml("[rollout]\nmax_turn = 2\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn reference_defaults_are_documented() {
        let help = Cli::command().find_subcommand_mut("rollout").unwrap().render_long_help().to_string();
        assert!(help.contains("default: 5"));
        assert!(help.contains("default: 6"));
        assert!(help.contains("default: 0.6"));
        let help = Cli::command().find_subcommand_mut("train-toy").unwrap().render_long_help().to_string();
        assert!(help.contains("batch 64, learning rate 1e-6"));
    }
}
