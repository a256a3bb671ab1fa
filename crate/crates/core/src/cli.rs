//! The `lcd` command-line runner.
//!
//! Every subcommand can take a JSON run config (`--config`); flags override
//! the values it carries. Exit codes: 0 success, 2 configuration error,
//! 3 runtime or scorer error.

use std::fs;
use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::conformance::{run_conformance, Transcript};
use crate::decode::{generate, DecodingConfig, Method, Scorer};
use crate::metrics::{
    chair, mean_rouge_l, pope_metrics, read_description_records, read_pope_records, ChairScores,
    PopeReport,
};
use crate::protocol::{serve, timeout_from_env, Connection, RemoteScorer};
use crate::simworld::{
    lvlm_sim_scorer_with, make_scenes, make_world, mix64, prior_scorer, run_bias_experiment,
    ExperimentArm, ExperimentReport, SceneInstance, SimParams, WorldSpec,
};
use crate::ENGINE_VERSION;

#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e:#}"),
            CliError::Runtime(e) => write!(f, "runtime error: {e:#}"),
        }
    }
}

trait ResultExt<T> {
    fn config_err(self) -> Result<T, CliError>;
    fn runtime_err(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn config_err(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Config(e.into()))
    }

    fn runtime_err(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }
}

/// Decoding method names accepted on the command line and in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    /// Plain sampling from the expert.
    #[value(alias = "sample")]
    #[serde(alias = "sample")]
    Baseline,
    Nucleus,
    Lcd,
    /// Contrastive decoding with a fixed weight.
    LcdStatic,
    Greedy,
}

impl MethodName {
    pub fn method(self) -> Method {
        match self {
            MethodName::Baseline => Method::Sample,
            MethodName::Nucleus => Method::Nucleus,
            MethodName::Lcd => Method::Lcd,
            MethodName::LcdStatic => Method::CdStatic,
            MethodName::Greedy => Method::Greedy,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MethodName::Baseline => "sample",
            MethodName::Nucleus => "nucleus",
            MethodName::Lcd => "lcd",
            MethodName::LcdStatic => "lcd-static",
            MethodName::Greedy => "greedy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateTask {
    /// World fixture; generated from the run seed when absent.
    pub world: Option<PathBuf>,
    pub n_objects: usize,
    pub n_fillers: usize,
    pub bias_strength: f64,
    pub lambda: f64,
    pub visual_logit: f64,
    pub description_tokens: usize,
    pub scenes: usize,
    pub min_present: usize,
    pub max_present: usize,
    pub methods: Vec<MethodName>,
    /// Weight used by `lcd-static` arms.
    pub static_beta: f64,
}

impl Default for SimulateTask {
    fn default() -> Self {
        let sim = SimParams::default();
        Self {
            world: None,
            n_objects: 12,
            n_fillers: 8,
            bias_strength: 0.9,
            lambda: sim.lambda,
            visual_logit: sim.visual_logit,
            description_tokens: sim.description_tokens,
            scenes: 1000,
            min_present: 2,
            max_present: 4,
            methods: vec![MethodName::Baseline, MethodName::Nucleus, MethodName::Lcd],
            static_beta: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTask {
    pub input: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeTask {
    pub expert: String,
    #[serde(default)]
    pub prior: Option<String>,
    /// Whitespace-separated prompt tokens.
    #[serde(default)]
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeCheckTask {
    pub endpoint: String,
    #[serde(default)]
    pub golden: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskConfig {
    Simulate(SimulateTask),
    PopeEval(EvalTask),
    DescribeEval(EvalTask),
    Decode(DecodeTask),
    ServeCheck(ServeCheckTask),
}

impl TaskConfig {
    fn name(&self) -> &'static str {
        match self {
            TaskConfig::Simulate(_) => "simulate",
            TaskConfig::PopeEval(_) => "pope-eval",
            TaskConfig::DescribeEval(_) => "describe-eval",
            TaskConfig::Decode(_) => "decode",
            TaskConfig::ServeCheck(_) => "serve-check",
        }
    }
}

/// A complete run description, echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub decoding: DecodingConfig,
    pub task: TaskConfig,
    /// Not echoed into reports, so output location never changes their bytes.
    #[serde(default, skip_serializing)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub trace: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.decoding.validate()?;
        if let TaskConfig::Simulate(t) = &self.task {
            if t.scenes == 0 {
                bail!("simulate.scenes must be positive");
            }
            if t.methods.is_empty() {
                bail!("simulate.methods must not be empty");
            }
            if !(0.0..=1.0).contains(&t.lambda) {
                bail!("simulate.lambda must lie in [0, 1]");
            }
            if !(0.0..=1.0).contains(&t.bias_strength) {
                bail!("simulate.bias_strength must lie in [0, 1]");
            }
            if !(t.static_beta.is_finite() && t.static_beta >= 0.0) {
                bail!("simulate.static_beta must be non-negative");
            }
            if t.description_tokens == 0 {
                bail!("simulate.description_tokens must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "lcd", version, about = "Language contrastive decoding runner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Args, Default)]
pub struct DecodingFlags {
    /// JSON run config; flags below override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for report files (stdout when omitted).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodName>,
    /// Contrast weight (default 3.0).
    #[arg(long)]
    pub beta: Option<f64>,
    /// Plausibility factor (default 0.1).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Sampling temperature (default 1.0; 0.5 is typical for yes/no probing).
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Nucleus mass (default 0.95).
    #[arg(long = "top-p")]
    pub top_p: Option<f64>,
    /// Maximum generated tokens (default 250).
    #[arg(long = "max-tokens")]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run the synthetic bias experiment and write JSON + CSV reports.
    Simulate {
        #[command(flatten)]
        flags: DecodingFlags,
        /// Comma-separated arms, e.g. baseline,nucleus,lcd,lcd-static.
        #[arg(long, value_enum, value_delimiter = ',')]
        methods: Option<Vec<MethodName>>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        bias: Option<f64>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Score POPE-style yes/no predictions from a JSONL file.
    PopeEval {
        #[command(flatten)]
        flags: DecodingFlags,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score descriptions (CHAIR, optional ROUGE-L) from a JSONL file.
    DescribeEval {
        #[command(flatten)]
        flags: DecodingFlags,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Generate once against protocol-attached scorers.
    Decode {
        #[command(flatten)]
        flags: DecodingFlags,
        /// `stdio:<command line>` or `tcp:<host>:<port>`.
        #[arg(long)]
        expert: Option<String>,
        #[arg(long)]
        prior: Option<String>,
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Run the protocol conformance suite against a backend.
    ServeCheck {
        #[command(flatten)]
        flags: DecodingFlags,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        golden: Option<PathBuf>,
    },
    /// Serve a synthetic-world scorer over the wire protocol.
    ServeSim(ServeSimArgs),
    /// Print a generated world as JSON.
    MakeWorld {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        objects: usize,
        #[arg(long, default_value_t = 8)]
        fillers: usize,
        #[arg(long, default_value_t = 0.9)]
        bias: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimRole {
    Expert,
    Prior,
}

#[derive(Debug, Clone, Args)]
pub struct ServeSimArgs {
    /// World fixture JSON; otherwise built from the flags below.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 12)]
    pub objects: usize,
    #[arg(long, default_value_t = 8)]
    pub fillers: usize,
    #[arg(long, default_value_t = 0.9)]
    pub bias: f64,
    #[arg(long, value_enum, default_value = "expert")]
    pub role: SimRole,
    /// Comma-separated present object names (expert role).
    #[arg(long, value_delimiter = ',')]
    pub present: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = crate::simworld::DEFAULT_VISUAL_LOGIT)]
    pub visual_logit: f64,
    /// Listen on this TCP port instead of stdin/stdout.
    #[arg(long = "tcp-port")]
    pub tcp_port: Option<u16>,
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .config_err()?;
    RunConfig::from_json(&text)
        .with_context(|| format!("in {}", path.display()))
        .config_err()
}

/// Loads `--config` (or starts from `default_task`), checks the task kind and
/// applies decoding flags.
fn resolve(flags: &DecodingFlags, default_task: TaskConfig) -> Result<RunConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let cfg = load_config(path)?;
            if std::mem::discriminant(&cfg.task) != std::mem::discriminant(&default_task) {
                return Err(CliError::Config(anyhow!(
                    "config task is {}, subcommand expects {}",
                    cfg.task.name(),
                    default_task.name()
                )));
            }
            cfg
        }
        None => RunConfig {
            decoding: DecodingConfig::default(),
            task: default_task,
            output: None,
            trace: false,
        },
    };
    let d = &mut cfg.decoding;
    if let Some(m) = flags.method {
        d.method = m.method();
    }
    if let Some(b) = flags.beta {
        d.weight.beta = b;
    }
    if let Some(a) = flags.alpha {
        d.alpha = a;
    }
    if let Some(t) = flags.temperature {
        d.temperature = t;
    }
    if let Some(p) = flags.top_p {
        d.nucleus_p = p;
    }
    if let Some(n) = flags.max_tokens {
        d.max_new_tokens = n;
    }
    if let Some(s) = flags.seed {
        d.seed = s;
    }
    if flags.trace {
        cfg.trace = true;
    }
    d.trace = cfg.trace;
    if let Some(out) = &flags.out {
        cfg.output = Some(out.clone());
    }
    cfg.validate().config_err()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct Report<'a, T: Serialize> {
    engine_version: &'static str,
    config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

fn write_outputs(
    cfg: &RunConfig,
    stem: &str,
    json: &str,
    csv: Option<Vec<u8>>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    match &cfg.output {
        Some(dir) => {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))
                .runtime_err()?;
            fs::write(dir.join(format!("{stem}.json")), json).runtime_err()?;
            if let Some(csv) = csv {
                fs::write(dir.join(format!("{stem}.csv")), csv).runtime_err()?;
            }
            Ok(())
        }
        None => writeln!(stdout, "{json}").runtime_err(),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize")
}

fn csv_bytes(
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).runtime_err()?;
    for row in rows {
        w.write_record(&row).runtime_err()?;
    }
    w.into_inner()
        .map_err(|e| CliError::Runtime(anyhow!(e.to_string())))
}

fn simulation_world(task: &SimulateTask, seed: u64) -> Result<WorldSpec, CliError> {
    match &task.world {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .config_err()?;
            WorldSpec::from_json(&text).config_err()
        }
        None => make_world(seed, task.n_objects, task.n_fillers, task.bias_strength).config_err(),
    }
}

/// Arms for a simulate task. All arms share the run seed.
pub fn simulation_arms(cfg: &RunConfig, task: &SimulateTask) -> Vec<ExperimentArm> {
    task.methods
        .iter()
        .map(|&m| {
            let mut config = DecodingConfig {
                method: m.method(),
                ..cfg.decoding.clone()
            };
            if m == MethodName::LcdStatic {
                config.weight.beta = task.static_beta;
            }
            config.weight = config.effective_weight();
            ExperimentArm {
                label: m.label().to_owned(),
                config,
            }
        })
        .collect()
}

/// Runs the synthetic experiment. The world is built from the run seed and
/// scenes from `mix64(seed)`.
pub fn cmd_simulate(
    cfg: &RunConfig,
    stdout: &mut dyn Write,
) -> Result<Vec<ExperimentReport>, CliError> {
    let TaskConfig::Simulate(task) = &cfg.task else {
        return Err(CliError::Config(anyhow!("not a simulate config")));
    };
    let seed = cfg.decoding.seed;
    let world = Arc::new(simulation_world(task, seed)?);
    let max_present = task.max_present.min(world.objects().len());
    let scenes = make_scenes(
        &world,
        task.scenes,
        task.min_present.min(max_present),
        max_present,
        mix64(seed),
    )
    .config_err()?;
    let params = SimParams {
        lambda: task.lambda,
        visual_logit: task.visual_logit,
        description_tokens: task.description_tokens,
    };
    let rows =
        run_bias_experiment(&world, &scenes, &simulation_arms(cfg, task), &params).runtime_err()?;

    #[derive(Serialize)]
    struct Body<'a> {
        rows: &'a [ExperimentReport],
    }
    let json = to_json(&Report {
        engine_version: ENGINE_VERSION,
        config: cfg,
        body: Body { rows: &rows },
    });
    let csv = csv_bytes(
        &[
            "method",
            "hallucination_rate",
            "chairs",
            "chairi",
            "n_generations",
            "object_mentions",
            "hallucinated_mentions",
            "beta",
            "alpha",
            "lambda",
            "bias_strength",
        ],
        rows.iter().map(|r| {
            vec![
                r.method.clone(),
                r.hallucination_rate.to_string(),
                r.chairs.to_string(),
                r.chairi.to_string(),
                r.n_generations.to_string(),
                r.object_mentions.to_string(),
                r.hallucinated_mentions.to_string(),
                r.config.weight.beta.to_string(),
                r.config.alpha.to_string(),
                r.lambda.to_string(),
                r.bias_strength.to_string(),
            ]
        }),
    )?;
    write_outputs(cfg, "simulate_report", &json, Some(csv), stdout)?;
    Ok(rows)
}

fn open_input(path: &Path) -> Result<BufReader<fs::File>, CliError> {
    fs::File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("opening {}", path.display()))
        .config_err()
}

pub fn cmd_pope_eval(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<PopeReport, CliError> {
    let TaskConfig::PopeEval(task) = &cfg.task else {
        return Err(CliError::Config(anyhow!("not a pope-eval config")));
    };
    let records = read_pope_records(open_input(&task.input)?).config_err()?;
    let report = pope_metrics(&records).config_err()?;

    #[derive(Serialize)]
    struct Body {
        n_records: usize,
        metrics: PopeReport,
    }
    let json = to_json(&Report {
        engine_version: ENGINE_VERSION,
        config: cfg,
        body: Body {
            n_records: records.len(),
            metrics: report,
        },
    });
    let csv = csv_bytes(
        &[
            "n_records",
            "accuracy",
            "precision",
            "recall",
            "f1",
            "yes_ratio",
        ],
        [vec![
            records.len().to_string(),
            report.accuracy.to_string(),
            report.precision.to_string(),
            report.recall.to_string(),
            report.f1.to_string(),
            report.yes_ratio.to_string(),
        ]],
    )?;
    write_outputs(cfg, "pope_report", &json, Some(csv), stdout)?;
    Ok(report)
}

pub fn cmd_describe_eval(
    cfg: &RunConfig,
    stdout: &mut dyn Write,
) -> Result<(ChairScores, Option<f64>), CliError> {
    let TaskConfig::DescribeEval(task) = &cfg.task else {
        return Err(CliError::Config(anyhow!("not a describe-eval config")));
    };
    let records = read_description_records(open_input(&task.input)?).config_err()?;
    let scores = chair(&records).config_err()?;
    let rouge = mean_rouge_l(&records);

    #[derive(Serialize)]
    struct Body {
        n_records: usize,
        chairs: f64,
        chairi: f64,
        rouge_l: Option<f64>,
    }
    let json = to_json(&Report {
        engine_version: ENGINE_VERSION,
        config: cfg,
        body: Body {
            n_records: records.len(),
            chairs: scores.chairs,
            chairi: scores.chairi,
            rouge_l: rouge,
        },
    });
    let csv = csv_bytes(
        &["n_records", "chairs", "chairi", "rouge_l"],
        [vec![
            records.len().to_string(),
            scores.chairs.to_string(),
            scores.chairi.to_string(),
            rouge.map(|r| r.to_string()).unwrap_or_default(),
        ]],
    )?;
    write_outputs(cfg, "describe_report", &json, Some(csv), stdout)?;
    Ok((scores, rouge))
}

/// Opens `stdio:<command line>` or `tcp:<host>:<port>`.
pub fn connect_endpoint(endpoint: &str, timeout: Duration) -> anyhow::Result<Connection> {
    if let Some(cmdline) = endpoint.strip_prefix("stdio:") {
        let mut parts = cmdline.split_whitespace();
        let program = parts.next().ok_or_else(|| anyhow!("empty stdio command"))?;
        let mut command = Command::new(program);
        command.args(parts);
        Ok(Connection::spawn(&mut command, timeout)?)
    } else if let Some(addr) = endpoint.strip_prefix("tcp:") {
        Ok(Connection::tcp(addr, timeout)?)
    } else {
        bail!("endpoint must start with stdio: or tcp:, got {endpoint:?}")
    }
}

fn check_endpoint_syntax(endpoint: &str) -> Result<(), CliError> {
    if endpoint.starts_with("stdio:") || endpoint.starts_with("tcp:") {
        Ok(())
    } else {
        Err(CliError::Config(anyhow!(
            "endpoint must start with stdio: or tcp:, got {endpoint:?}"
        )))
    }
}

pub fn cmd_decode(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let TaskConfig::Decode(task) = &cfg.task else {
        return Err(CliError::Config(anyhow!("not a decode config")));
    };
    check_endpoint_syntax(&task.expert)?;
    if cfg.decoding.method.uses_prior() && task.prior.is_none() {
        return Err(CliError::Config(anyhow!(
            "method {} needs --prior",
            cfg.decoding.method.label()
        )));
    }
    if let Some(p) = &task.prior {
        check_endpoint_syntax(p)?;
    }
    let timeout = timeout_from_env();
    let expert = connect_endpoint(&task.expert, timeout)
        .and_then(|c| Ok(RemoteScorer::connect(c, None)?))
        .context("expert scorer")
        .runtime_err()?;
    let prior = match (&task.prior, cfg.decoding.method.uses_prior()) {
        (Some(endpoint), true) => Some(
            connect_endpoint(endpoint, timeout)
                .and_then(|c| Ok(RemoteScorer::connect(c, Some(expert.vocabulary()))?))
                .context("prior scorer")
                .runtime_err()?,
        ),
        _ => None,
    };
    let vocab = expert.vocabulary();
    let prompt: Vec<usize> = task
        .prompt
        .split_whitespace()
        .map(|t| {
            vocab
                .id(t)
                .ok_or_else(|| anyhow!("prompt token {t:?} not in vocabulary"))
        })
        .collect::<anyhow::Result<_>>()
        .config_err()?;
    let result = generate(
        &expert,
        prior.as_ref().map(|p| p as &dyn Scorer),
        &prompt,
        &cfg.decoding,
    )
    .runtime_err()?;

    #[derive(Serialize)]
    struct Body<'a> {
        result: &'a crate::decode::GenerationResult,
    }
    let json = to_json(&Report {
        engine_version: ENGINE_VERSION,
        config: cfg,
        body: Body { result: &result },
    });
    write_outputs(cfg, "decode_result", &json, None, stdout)
}

pub fn cmd_serve_check(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let TaskConfig::ServeCheck(task) = &cfg.task else {
        return Err(CliError::Config(anyhow!("not a serve-check config")));
    };
    check_endpoint_syntax(&task.endpoint)?;
    let golden = task
        .golden
        .as_deref()
        .map(Transcript::load)
        .transpose()
        .map_err(|e| CliError::Config(anyhow!(e)))?;
    let timeout = timeout_from_env();
    let endpoint = task.endpoint.clone();
    let connect = move || {
        connect_endpoint(&endpoint, timeout)
            .map_err(|e| crate::protocol::ProtocolError::Io(e.to_string()))
    };
    let results = run_conformance(&connect, golden.as_ref());
    for r in &results {
        writeln!(stdout, "{r}").runtime_err()?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Runtime(anyhow!(
            "{failed} conformance check(s) failed"
        )));
    }
    Ok(())
}

fn sim_scorer(args: &ServeSimArgs) -> Result<Arc<dyn Scorer>, CliError> {
    let world = match &args.world {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .config_err()?;
            WorldSpec::from_json(&text).config_err()?
        }
        None => make_world(args.seed, args.objects, args.fillers, args.bias).config_err()?,
    };
    let world = Arc::new(world);
    Ok(match args.role {
        SimRole::Prior => Arc::new(prior_scorer(world)),
        SimRole::Expert => {
            let present = args
                .present
                .iter()
                .map(|name| {
                    world
                        .objects()
                        .iter()
                        .position(|o| o == name)
                        .ok_or_else(|| {
                            anyhow!("unknown object {name:?}; world has {:?}", world.objects())
                        })
                })
                .collect::<anyhow::Result<Vec<_>>>()
                .config_err()?;
            let scene = SceneInstance::new(&world, present).config_err()?;
            Arc::new(
                lvlm_sim_scorer_with(world, scene, args.lambda, args.visual_logit).config_err()?,
            )
        }
    })
}

pub fn cmd_serve_sim(args: &ServeSimArgs) -> Result<(), CliError> {
    let scorer = sim_scorer(args)?;
    match args.tcp_port {
        None => {
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            serve(&*scorer, stdin, stdout).runtime_err()?;
        }
        Some(port) => {
            let listener = TcpListener::bind(("127.0.0.1", port)).runtime_err()?;
            for stream in listener.incoming() {
                let stream = stream.runtime_err()?;
                let scorer = scorer.clone();
                std::thread::spawn(move || {
                    if let Ok(reader) = stream.try_clone() {
                        let _ = serve(&*scorer, BufReader::new(reader), stream);
                    }
                });
            }
        }
    }
    Ok(())
}

/// Parses arguments and runs the selected subcommand.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Cmd::Simulate {
            flags,
            methods,
            lambda,
            bias,
            scenes,
            world,
        } => {
            let mut cfg = resolve(&flags, TaskConfig::Simulate(SimulateTask::default()))?;
            if let TaskConfig::Simulate(task) = &mut cfg.task {
                if let Some(m) = methods {
                    task.methods = m;
                }
                if let Some(l) = lambda {
                    task.lambda = l;
                }
                if let Some(b) = bias {
                    task.bias_strength = b;
                }
                if let Some(s) = scenes {
                    task.scenes = s;
                }
                if world.is_some() {
                    task.world = world;
                }
            }
            cfg.validate().config_err()?;
            cmd_simulate(&cfg, stdout).map(|_| ())
        }
        Cmd::PopeEval { flags, input } => {
            let cfg = eval_config(&flags, input, TaskConfig::PopeEval)?;
            cmd_pope_eval(&cfg, stdout).map(|_| ())
        }
        Cmd::DescribeEval { flags, input } => {
            let cfg = eval_config(&flags, input, TaskConfig::DescribeEval)?;
            cmd_describe_eval(&cfg, stdout).map(|_| ())
        }
        Cmd::Decode {
            flags,
            expert,
            prior,
            prompt,
        } => {
            let placeholder = TaskConfig::Decode(DecodeTask {
                expert: String::new(),
                prior: None,
                prompt: String::new(),
            });
            let mut cfg = resolve(&flags, placeholder)?;
            if let TaskConfig::Decode(task) = &mut cfg.task {
                if let Some(e) = expert {
                    task.expert = e;
                }
                if prior.is_some() {
                    task.prior = prior;
                }
                if let Some(p) = prompt {
                    task.prompt = p;
                }
                if task.expert.is_empty() {
                    return Err(CliError::Config(anyhow!("decode needs --expert")));
                }
            }
            cmd_decode(&cfg, stdout)
        }
        Cmd::ServeCheck {
            flags,
            endpoint,
            golden,
        } => {
            let placeholder = TaskConfig::ServeCheck(ServeCheckTask {
                endpoint: String::new(),
                golden: None,
            });
            let mut cfg = resolve(&flags, placeholder)?;
            if let TaskConfig::ServeCheck(task) = &mut cfg.task {
                if let Some(e) = endpoint {
                    task.endpoint = e;
                }
                if golden.is_some() {
                    task.golden = golden;
                }
                if task.endpoint.is_empty() {
                    return Err(CliError::Config(anyhow!("serve-check needs --endpoint")));
                }
            }
            cmd_serve_check(&cfg, stdout)
        }
        Cmd::ServeSim(args) => cmd_serve_sim(&args),
        Cmd::MakeWorld {
            seed,
            objects,
            fillers,
            bias,
        } => {
            let world = make_world(seed, objects, fillers, bias).config_err()?;
            writeln!(stdout, "{}", world.to_json()).runtime_err()
        }
    }
}

fn eval_config(
    flags: &DecodingFlags,
    input: Option<PathBuf>,
    make: fn(EvalTask) -> TaskConfig,
) -> Result<RunConfig, CliError> {
    let mut cfg = resolve(
        flags,
        make(EvalTask {
            input: PathBuf::new(),
        }),
    )?;
    if let TaskConfig::PopeEval(task) | TaskConfig::DescribeEval(task) = &mut cfg.task {
        if let Some(i) = input {
            task.input = i;
        }
        if task.input.as_os_str().is_empty() {
            return Err(CliError::Config(anyhow!("--input is required")));
        }
    }
    Ok(cfg)
}
