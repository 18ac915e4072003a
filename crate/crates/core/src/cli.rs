//! Batch command-line front end.
//!
//! Every command validates its effective configuration (an optional TOML
//! file overridden by flags) before computing, writes it to
//! `<out>/config.toml`, and exits with 0 on success, 1 on a runtime failure
//! and 2 on a usage, configuration or input-data error.

use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::{
    cell_seed, default_alpha_grid, performance_profile, performance_ratio, run_benchmark, summarize,
    write_summary_csv, BenchConfig, ResultsTable, SolverSpec,
};
use crate::data::{load_delimited, make_synthetic, standardize, synthetic_suite, Dataset, LoadOptions, SyntheticKind};
use crate::embeddings::{
    embed_composite, embed_sequence, CompositePlan, EmbeddingSpec, LambdaChoice, MapKind, RandomOptions, RandomParams,
};
use crate::ita::{ita_train, standard_train, GrowthRule, ItaConfig, LossDeltaMode, StandardConfig, TrainRun};
use crate::network::{Activation, Linear, MeanSquaredError, ParamVector, Sigmoid, Tanh, Topology};
use crate::stationarity::{
    alpha_escape_trials, find_stationary_point, verify_loss_invariance, verify_loss_invariance_of,
    verify_stationarity_transfer, AppliedMap, StationarityReport, StationaryPoint, TransferOptions,
};
use crate::{model_io, Error};

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

fn usage(e: impl Display) -> CliError {
    CliError { code: 2, message: e.to_string() }
}

fn runtime(e: impl Display) -> CliError {
    CliError { code: 1, message: e.to_string() }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "netgrow", version, about = "Stationary-point embeddings and incremental training of dense networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a fixed-width network with L-BFGS.
    Train(TrainArgs),
    /// Train with the incremental algorithm, growing the hidden layer.
    Ita(ItaArgs),
    /// Apply an embedding to a saved model.
    Embed(EmbedArgs),
    /// Check risk invariance and stationarity transfer of embeddings.
    Verify(VerifyArgs),
    /// Compare incremental and standard training over several problems.
    Bench(BenchArgs),
    /// Compute performance profiles from result tables.
    Profile(ProfileArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    #[default]
    Tanh,
    Sigmoid,
    Linear,
}

impl ActivationKind {
    pub fn get(self) -> &'static dyn Activation {
        match self {
            ActivationKind::Tanh => &Tanh,
            ActivationKind::Sigmoid => &Sigmoid,
            ActivationKind::Linear => &Linear,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticChoice {
    Teacher,
    Polynomial,
    Sinusoid,
}

/// Where a dataset comes from and how it is preprocessed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Delimited text file; takes precedence over `synthetic`.
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticChoice>,
    pub teacher_width: usize,
    pub samples: usize,
    pub inputs: usize,
    pub outputs: usize,
    pub noise: f64,
    pub seed: u64,
    /// `None` detects a header: the first line is one iff none of its
    /// fields parses as a number.
    pub header: Option<bool>,
    /// `last-k` or a comma list of zero-based column indices.
    pub targets: String,
    pub delimiter: char,
    pub one_hot: bool,
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: None,
            teacher_width: 8,
            samples: 200,
            inputs: 2,
            outputs: 1,
            noise: 0.05,
            seed: 0,
            header: None,
            targets: "last-1".into(),
            delimiter: ',',
            one_hot: false,
            standardize: true,
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Delimited data file (features then targets).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generate a synthetic problem instead of reading a file.
    #[arg(long, value_enum)]
    pub synthetic: Option<SyntheticChoice>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub inputs: Option<usize>,
    #[arg(long)]
    pub outputs: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// The data file has a header row.
    #[arg(long, conflicts_with = "no_header")]
    pub header: bool,
    /// The data file has no header row.
    #[arg(long)]
    pub no_header: bool,
    /// Target columns: `last-k` or zero-based indices such as `4` or `3,4`.
    #[arg(long)]
    pub targets: Option<String>,
    #[arg(long)]
    pub delimiter: Option<char>,
    /// One-hot encode target columns even when numeric.
    #[arg(long)]
    pub one_hot: bool,
    /// Keep raw feature scales.
    #[arg(long)]
    pub no_standardize: bool,
}

impl DataArgs {
    fn apply(&self, c: &mut DataConfig) {
        if let Some(p) = &self.data {
            c.path = Some(p.clone());
        }
        set(&mut c.synthetic, self.synthetic.map(Some));
        set(&mut c.samples, self.samples);
        set(&mut c.inputs, self.inputs);
        set(&mut c.outputs, self.outputs);
        set(&mut c.noise, self.noise);
        set(&mut c.seed, self.data_seed);
        if self.header {
            c.header = Some(true);
        }
        if self.no_header {
            c.header = Some(false);
        }
        set(&mut c.targets, self.targets.clone());
        set(&mut c.delimiter, self.delimiter);
        c.one_hot |= self.one_hot;
        if self.no_standardize {
            c.standardize = false;
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub activation: Option<ActivationKind>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Hidden layer width.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Stop once the gradient infinity norm is at most this value.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Maximum epochs (L-BFGS iterations).
    #[arg(long)]
    pub maxit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub out: PathBuf,
    pub activation: ActivationKind,
    pub data: DataConfig,
    pub train: StandardConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            out: "netgrow-train".into(),
            activation: ActivationKind::Tanh,
            data: DataConfig::default(),
            train: StandardConfig::default(),
        }
    }
}

fn parse_growth(s: &str) -> Result<GrowthRule, String> {
    let bad = || format!("bad growth rule `{s}`; use double, fixed:K or schedule:K1,K2,...");
    if s == "double" {
        return Ok(GrowthRule::DoubleEach);
    }
    if let Some(k) = s.strip_prefix("fixed:") {
        return k.parse().map(GrowthRule::FixedK).map_err(|_| bad());
    }
    if let Some(list) = s.strip_prefix("schedule:") {
        return list
            .split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map(GrowthRule::Schedule)
            .map_err(|_| bad());
    }
    Err(bad())
}

#[derive(Args, Debug)]
pub struct ItaArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Initial hidden width.
    #[arg(long)]
    pub h0: Option<usize>,
    /// Final hidden width.
    #[arg(long)]
    pub hmax: Option<usize>,
    /// `double`, `fixed:K` or `schedule:K1,K2,...`.
    #[arg(long, value_parser = parse_growth)]
    pub growth: Option<GrowthRule>,
    #[arg(long)]
    pub maxit_per_stage: Option<usize>,
    #[arg(long)]
    pub final_maxit: Option<usize>,
    /// Gradient tolerance of the final stage.
    #[arg(long)]
    pub final_tol: Option<f64>,
    /// Total epochs over all stages.
    #[arg(long)]
    pub epoch_budget: Option<usize>,
    #[arg(long)]
    pub retry_limit: Option<usize>,
    #[arg(long)]
    pub rel_grad_factor: Option<f64>,
    #[arg(long)]
    pub loss_delta: Option<f64>,
    /// Compare successive risks relative to the previous value.
    #[arg(long)]
    pub relative_loss_delta: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ItaRunConfig {
    pub out: PathBuf,
    pub activation: ActivationKind,
    pub data: DataConfig,
    pub ita: ItaConfig,
}

impl Default for ItaRunConfig {
    fn default() -> Self {
        Self { out: "netgrow-ita".into(), activation: ActivationKind::Tanh, data: DataConfig::default(), ita: ItaConfig::default() }
    }
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Model file written by `train` or `ita`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// JSON file holding one embedding spec or a list of specs.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Draw parameters for this map at random instead of reading a spec.
    #[arg(long, value_enum)]
    pub map: Option<MapArg>,
    /// Hidden layers to grow (1-based), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub layer: Option<Vec<usize>>,
    /// Neurons added per layer.
    #[arg(long)]
    pub count: Option<usize>,
    /// Draw beta's outgoing weights instead of zeros.
    #[arg(long)]
    pub beta_random_outgoing: bool,
    /// Draw gamma's split coefficients at random instead of equal shares.
    #[arg(long)]
    pub random_lambda: bool,
    /// Dataset used to report the risk before and after.
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MapArg {
    Alpha,
    Beta,
    Gamma,
}

impl From<MapArg> for MapKind {
    fn from(m: MapArg) -> Self {
        match m {
            MapArg::Alpha => MapKind::Alpha,
            MapArg::Beta => MapKind::Beta,
            MapArg::Gamma => MapKind::Gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedRunConfig {
    pub out: PathBuf,
    pub activation: ActivationKind,
    pub model: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub map: Option<MapArg>,
    pub layers: Vec<usize>,
    pub count: usize,
    pub seed: u64,
    pub beta_random_outgoing: bool,
    pub random_lambda: bool,
    pub data: Option<DataConfig>,
}

impl Default for EmbedRunConfig {
    fn default() -> Self {
        Self {
            out: "netgrow-embed".into(),
            activation: ActivationKind::Tanh,
            model: None,
            spec: None,
            map: None,
            layers: vec![1],
            count: 1,
            seed: 0,
            beta_random_outgoing: false,
            random_lambda: false,
            data: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopologyArg(pub Vec<usize>);

impl std::str::FromStr for TopologyArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map(TopologyArg)
            .map_err(|_| format!("bad topology `{s}`; expected sizes such as 2,3,1"))
    }
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Layer sizes such as `2,3,1`; repeat for several networks.
    #[arg(long)]
    pub topology: Vec<TopologyArg>,
    /// Maps to check; repeat for several.
    #[arg(long, value_enum)]
    pub map: Vec<MapArg>,
    /// Number of seeds per (topology, map).
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Also run corrupted embeddings that must fail.
    #[arg(long)]
    pub negative_controls: bool,
    /// Run the statistical escape check of alpha at stationary points.
    #[arg(long)]
    pub expect_escape: bool,
    /// Saved model checked for invariance instead of random networks.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyRunConfig {
    pub out: PathBuf,
    pub activation: ActivationKind,
    pub topologies: Vec<Vec<usize>>,
    pub maps: Vec<MapArg>,
    pub seeds: usize,
    pub base_seed: u64,
    /// Neurons added per grown layer.
    pub count: usize,
    /// Samples of the synthetic regression used for each check.
    pub samples: usize,
    pub noise: f64,
    /// Gradient tolerance defining a stationary point.
    pub stationary_tol: f64,
    pub stationary_max_iter: usize,
    /// Starting points tried per stationary point.
    pub stationary_attempts: usize,
    pub negative_controls: bool,
    pub expect_escape: bool,
    pub escape_draws: usize,
    /// Alpha neurons added per draw; `None` doubles the layer as a growth
    /// step does.
    pub escape_count: Option<usize>,
    pub escape_threshold: f64,
    pub escape_min_fraction: f64,
    pub model: Option<PathBuf>,
    pub data: Option<DataConfig>,
}

impl Default for VerifyRunConfig {
    fn default() -> Self {
        Self {
            out: "netgrow-verify".into(),
            activation: ActivationKind::Tanh,
            topologies: vec![vec![2, 2, 1], vec![2, 3, 1], vec![2, 2, 2, 1]],
            maps: vec![MapArg::Alpha, MapArg::Beta, MapArg::Gamma],
            seeds: 10,
            base_seed: 0,
            count: 2,
            samples: 24,
            noise: 0.1,
            stationary_tol: 1e-8,
            stationary_max_iter: 3000,
            stationary_attempts: 100,
            negative_controls: false,
            expect_escape: false,
            escape_draws: 50,
            escape_count: None,
            escape_threshold: 1e-3,
            escape_min_fraction: 0.9,
            model: None,
            data: None,
        }
    }
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Extra problem read from a delimited file; repeatable.
    #[arg(long = "data")]
    pub data: Vec<PathBuf>,
    /// Leave out the four built-in synthetic problems.
    #[arg(long)]
    pub no_synthetic: bool,
    /// Rows of each synthetic problem.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub replicas: Option<usize>,
    /// Epoch budgets, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<usize>>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Width of the standard network and final width of the incremental one.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Initial width of the incremental network.
    #[arg(long)]
    pub h0: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchRunConfig {
    pub out: PathBuf,
    pub activation: ActivationKind,
    pub files: Vec<DataConfig>,
    pub synthetic: bool,
    pub synthetic_samples: usize,
    pub synthetic_noise: f64,
    pub replicas: usize,
    pub budgets: Vec<usize>,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub standard: StandardConfig,
    pub ita: ItaConfig,
}

impl Default for BenchRunConfig {
    fn default() -> Self {
        Self {
            out: "netgrow-bench".into(),
            activation: ActivationKind::Tanh,
            files: Vec::new(),
            synthetic: true,
            synthetic_samples: 200,
            synthetic_noise: 0.05,
            replicas: 10,
            budgets: vec![100, 500, 1000],
            seed: 0,
            jobs: None,
            standard: StandardConfig::default(),
            ita: ItaConfig::default(),
        }
    }
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Result table written by `bench`; repeatable.
    #[arg(long)]
    pub table: Vec<PathBuf>,
    /// Alpha grid, comma separated and increasing from at least 1.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileRunConfig {
    pub out: PathBuf,
    pub tables: Vec<PathBuf>,
    pub alphas: Vec<f64>,
}

impl Default for ProfileRunConfig {
    fn default() -> Self {
        Self { out: "netgrow-profile".into(), tables: Vec::new(), alphas: default_alpha_grid() }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Ita(a) => cmd_ita(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Profile(a) => cmd_profile(a),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| usage(Error::io(path, e)))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn apply_common(c: &CommonArgs, out: &mut PathBuf, activation: &mut ActivationKind) {
    set(out, c.out.clone());
    set(activation, c.activation);
}

fn prepare_out<T: Serialize>(out: &Path, config: &T) -> CliResult {
    std::fs::create_dir_all(out).map_err(|e| runtime(Error::io(out, e)))?;
    let text = toml::to_string(config).map_err(runtime)?;
    write_file(&out.join("config.toml"), text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    std::fs::write(path, bytes).map_err(|e| runtime(Error::io(path, e)))
}

fn json_lines<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item).expect("records serialize");
        out.push(b'\n');
    }
    out
}

fn detect_header(path: &Path, delimiter: char) -> CliResult<bool> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(Error::io(path, e)))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    Ok(!first.split(delimiter).any(|f| f.trim().parse::<f64>().is_ok()))
}

/// Loads or generates the dataset; failures are input errors.
pub fn load_data(c: &DataConfig) -> crate::Result<Dataset> {
    let raw = if let Some(path) = &c.path {
        if !c.delimiter.is_ascii() {
            return Err(Error::InvalidArgument(format!("delimiter `{}` is not ASCII", c.delimiter)));
        }
        let has_header = match c.header {
            Some(h) => h,
            None => detect_header(path, c.delimiter).map_err(|e| Error::InvalidArgument(e.message))?,
        };
        let opts = LoadOptions {
            has_header,
            targets: c.targets.parse().map_err(Error::InvalidArgument)?,
            delimiter: c.delimiter as u8,
            force_one_hot: c.one_hot,
        };
        load_delimited(path, &opts)?
    } else {
        let kind = match c.synthetic {
            Some(SyntheticChoice::Teacher) => SyntheticKind::TeacherNet { width: c.teacher_width },
            Some(SyntheticChoice::Polynomial) => SyntheticKind::Polynomial,
            Some(SyntheticChoice::Sinusoid) => SyntheticKind::Sinusoid,
            None => return Err(Error::InvalidArgument("no data: give a data file or a synthetic kind".into())),
        };
        make_synthetic(kind, c.inputs, c.outputs, c.samples, c.noise, c.seed)?
    };
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(if c.standardize && raw.len() >= 2 { standardize(&raw) } else { raw })
}

#[derive(Serialize)]
struct RunSummary<'a> {
    method: crate::ita::Method,
    dataset: &'a str,
    topology: String,
    final_risk: f64,
    epochs: usize,
    completed: bool,
    stages: &'a [crate::ita::StageRecord],
}

fn write_run(out: &Path, data: &Dataset, run: &TrainRun) -> CliResult {
    write_file(&out.join("metrics.jsonl"), &json_lines(&run.events))?;
    model_io::save(&run.params, &out.join("model.bin")).map_err(runtime)?;
    write_file(&out.join("model.txt"), model_io::to_text(&run.params).as_bytes())?;
    let summary = RunSummary {
        method: run.method,
        dataset: &data.name,
        topology: run.params.topology().to_string(),
        final_risk: run.final_risk(),
        epochs: run.cumulative_epochs,
        completed: run.completed,
        stages: &run.stages,
    };
    let mut text = serde_json::to_string_pretty(&summary).map_err(runtime)?;
    text.push('\n');
    write_file(&out.join("summary.json"), text.as_bytes())?;
    println!("{} final risk {} after {} epochs; outputs in {}", data.name, run.final_risk(), run.cumulative_epochs, out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg: TrainRunConfig = load_config(a.common.config.as_deref())?;
    apply_common(&a.common, &mut cfg.out, &mut cfg.activation);
    a.data.apply(&mut cfg.data);
    set(&mut cfg.train.seed, a.common.seed);
    set(&mut cfg.train.hidden, a.hidden);
    set(&mut cfg.train.grad_tol, a.tol);
    set(&mut cfg.train.maxit, a.maxit);
    cfg.train.validate().map_err(usage)?;
    let data = load_data(&cfg.data).map_err(usage)?;
    prepare_out(&cfg.out, &cfg)?;
    let run = standard_train(&data, &cfg.train, &MeanSquaredError, cfg.activation.get()).map_err(runtime)?;
    write_run(&cfg.out, &data, &run)
}

fn cmd_ita(a: ItaArgs) -> CliResult {
    let mut cfg: ItaRunConfig = load_config(a.common.config.as_deref())?;
    apply_common(&a.common, &mut cfg.out, &mut cfg.activation);
    a.data.apply(&mut cfg.data);
    let ita = &mut cfg.ita;
    set(&mut ita.seed, a.common.seed);
    set(&mut ita.h0, a.h0);
    set(&mut ita.h_max, a.hmax);
    set(&mut ita.growth, a.growth);
    set(&mut ita.maxit_per_stage, a.maxit_per_stage);
    set(&mut ita.final_maxit, a.final_maxit);
    set(&mut ita.final_grad_tol, a.final_tol);
    set(&mut ita.epoch_budget, a.epoch_budget.map(Some));
    set(&mut ita.embed_retry_limit, a.retry_limit);
    set(&mut ita.intermediate_rel_grad_factor, a.rel_grad_factor);
    set(&mut ita.intermediate_loss_delta, a.loss_delta);
    if a.relative_loss_delta {
        ita.loss_delta_mode = LossDeltaMode::Relative;
    }
    cfg.ita.validate().map_err(usage)?;
    let data = load_data(&cfg.data).map_err(usage)?;
    prepare_out(&cfg.out, &cfg)?;
    let run = ita_train(&data, &cfg.ita, &MeanSquaredError, cfg.activation.get()).map_err(runtime)?;
    write_run(&cfg.out, &data, &run)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecFile {
    One(EmbeddingSpec),
    Many(Vec<EmbeddingSpec>),
}

fn cmd_embed(a: EmbedArgs) -> CliResult {
    let mut cfg: EmbedRunConfig = load_config(a.common.config.as_deref())?;
    apply_common(&a.common, &mut cfg.out, &mut cfg.activation);
    set(&mut cfg.seed, a.common.seed);
    set(&mut cfg.model, a.model.map(Some));
    set(&mut cfg.spec, a.spec.map(Some));
    set(&mut cfg.map, a.map.map(Some));
    set(&mut cfg.layers, a.layer);
    set(&mut cfg.count, a.count);
    cfg.beta_random_outgoing |= a.beta_random_outgoing;
    cfg.random_lambda |= a.random_lambda;
    if a.data.data.is_some() || a.data.synthetic.is_some() {
        let mut d = cfg.data.clone().unwrap_or_default();
        a.data.apply(&mut d);
        cfg.data = Some(d);
    }
    let model_path = cfg.model.clone().ok_or_else(|| usage("--model is required"))?;
    if cfg.spec.is_some() == cfg.map.is_some() {
        return Err(usage("give exactly one of --spec and --map"));
    }
    if cfg.count == 0 {
        return Err(usage("--count must be >= 1"));
    }
    let act = cfg.activation.get();
    let theta = model_io::load(&model_path).map_err(usage)?;
    let data = cfg.data.as_ref().map(load_data).transpose().map_err(usage)?;
    let specs: Vec<EmbeddingSpec> = match (&cfg.spec, cfg.map) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(Error::io(path, e)))?;
            match serde_json::from_str::<SpecFile>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))? {
                SpecFile::One(s) => vec![s],
                SpecFile::Many(v) => v,
            }
        }
        (None, Some(map)) => {
            let plan = CompositePlan::uniform(map.into(), &cfg.layers.iter().map(|&l| (l, cfg.count)).collect::<Vec<_>>());
            plan.validate(theta.topology()).map_err(usage)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let options = RandomOptions {
                beta_zero_outgoing: !cfg.beta_random_outgoing,
                lambda: if cfg.random_lambda { LambdaChoice::RandomSimplex } else { LambdaChoice::Symmetric },
            };
            embed_composite(&theta, &plan, &mut RandomParams { rng: &mut rng, options }, act).map_err(usage)?.applied
        }
        (None, None) => unreachable!("checked above"),
    };
    let grown = embed_sequence(&theta, &specs, act).map_err(usage)?;
    prepare_out(&cfg.out, &cfg)?;
    model_io::save(&grown, &cfg.out.join("model.bin")).map_err(runtime)?;
    write_file(&cfg.out.join("model.txt"), model_io::to_text(&grown).as_bytes())?;
    let mut applied = serde_json::to_string_pretty(&specs).map_err(runtime)?;
    applied.push('\n');
    write_file(&cfg.out.join("applied.json"), applied.as_bytes())?;
    if let Some(d) = &data {
        let map = if specs.len() == 1 { AppliedMap::Single(specs[0].clone()) } else { AppliedMap::Composite(specs.clone()) };
        let report = verify_loss_invariance(&theta, d, &map, &MeanSquaredError, act).map_err(usage)?;
        let line = report.to_json_line();
        write_file(&cfg.out.join("report.jsonl"), format!("{line}\n").as_bytes())?;
        println!("{line}");
    }
    println!("grew {} to {}; outputs in {}", theta.topology(), grown.topology(), cfg.out.display());
    Ok(())
}

/// One line of `verify` output.
#[derive(Serialize)]
struct VerifyLine<'a> {
    topology: String,
    seed: usize,
    expected: &'static str,
    #[serde(flatten)]
    body: VerifyBody<'a>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum VerifyBody<'a> {
    Report(&'a StationarityReport),
    Escape {
        check: &'static str,
        layer: usize,
        count: usize,
        source_risk: f64,
        draws: usize,
        escaped: usize,
        fraction: f64,
        threshold: f64,
        min_grad_norm: f64,
        verdict: &'static str,
    },
}

impl VerifyLine<'_> {
    fn passed(&self) -> bool {
        match &self.body {
            VerifyBody::Report(r) => r.passed(),
            VerifyBody::Escape { verdict, .. } => *verdict == "Pass",
        }
    }

    fn as_expected(&self) -> bool {
        self.passed() == (self.expected == "pass")
    }
}

fn all_hidden_plan(kind: MapKind, t: &Topology, count: usize) -> CompositePlan {
    CompositePlan::uniform(kind, &(1..t.depth()).map(|l| (l, count)).collect::<Vec<_>>())
}

fn to_applied(specs: Vec<EmbeddingSpec>) -> AppliedMap {
    if specs.len() == 1 {
        AppliedMap::Single(specs.into_iter().next().expect("one spec"))
    } else {
        AppliedMap::Composite(specs)
    }
}

/// Init starts tried on one regression before redrawing it.
const STARTS_PER_DATASET: usize = 10;

fn verify_dataset(cfg: &VerifyRunConfig, t: &Topology, seed: usize, variant: usize) -> crate::Result<Dataset> {
    let data_seed = if variant == 0 { cfg.base_seed + seed as u64 } else { cell_seed(cfg.base_seed, seed, variant) };
    make_synthetic(SyntheticKind::Polynomial, t.input_dim(), t.output_dim(), cfg.samples, cfg.noise, data_seed)
}

/// Searches seeded starts for a stationary point, redrawing the regression
/// every [`STARTS_PER_DATASET`] starts.
fn stationary_for(
    cfg: &VerifyRunConfig,
    t: &Topology,
    ti: usize,
    seed: usize,
    act: &dyn Activation,
) -> CliResult<(Dataset, StationaryPoint)> {
    let mut best = f64::INFINITY;
    let mut data = verify_dataset(cfg, t, seed, 0).map_err(runtime)?;
    for k in 0..cfg.stationary_attempts {
        if k > 0 && k % STARTS_PER_DATASET == 0 {
            data = verify_dataset(cfg, t, seed, k / STARTS_PER_DATASET).map_err(runtime)?;
        }
        let s = cell_seed(cfg.base_seed, ti, seed * cfg.stationary_attempts + k);
        match find_stationary_point(t, &data, &MeanSquaredError, act, cfg.stationary_tol, cfg.stationary_max_iter, s) {
            Ok(sp) => return Ok((data, sp)),
            Err(Error::NonConvergence { best_norm }) => best = best.min(best_norm),
            Err(e) => return Err(runtime(e)),
        }
    }
    Err(runtime(format!(
        "no stationary point of {t} for seed {seed} within {} starts (best gradient norm {best:e})",
        cfg.stationary_attempts
    )))
}

fn cmd_verify(a: VerifyArgs) -> CliResult {
    let mut cfg: VerifyRunConfig = load_config(a.common.config.as_deref())?;
    apply_common(&a.common, &mut cfg.out, &mut cfg.activation);
    set(&mut cfg.base_seed, a.common.seed);
    if !a.topology.is_empty() {
        cfg.topologies = a.topology.iter().map(|t| t.0.clone()).collect();
    }
    if !a.map.is_empty() {
        cfg.maps = a.map.clone();
    }
    set(&mut cfg.seeds, a.seeds);
    cfg.negative_controls |= a.negative_controls;
    cfg.expect_escape |= a.expect_escape;
    set(&mut cfg.model, a.model.map(Some));
    if a.data.data.is_some() || a.data.synthetic.is_some() {
        let mut d = cfg.data.clone().unwrap_or_default();
        a.data.apply(&mut d);
        cfg.data = Some(d);
    }
    let topologies = cfg.topologies.iter().map(|s| Topology::new(s)).collect::<crate::Result<Vec<_>>>().map_err(usage)?;
    if let Some(bad) = topologies.iter().find(|t| t.depth() < 2) {
        return Err(usage(format!("topology {bad} has no hidden layer")));
    }
    if cfg.seeds == 0 || cfg.count == 0 || cfg.escape_count == Some(0) || cfg.stationary_attempts == 0 || !(cfg.stationary_tol > 0.0) {
        return Err(usage("seeds, count and stationary_attempts must be >= 1 and stationary_tol > 0"));
    }
    if cfg.expect_escape && !cfg.maps.contains(&MapArg::Alpha) {
        return Err(usage("--expect-escape needs the alpha map"));
    }
    let act = cfg.activation.get();
    let file_model = match &cfg.model {
        Some(path) => {
            let theta = model_io::load(path).map_err(usage)?;
            let data = load_data(cfg.data.as_ref().ok_or_else(|| usage("--model needs --data"))?).map_err(usage)?;
            Some((theta, data))
        }
        None => None,
    };
    prepare_out(&cfg.out, &cfg)?;

    let mut lines_out: Vec<u8> = Vec::new();
    let mut total = 0;
    let mut ok = 0;
    let mut emit = |line: VerifyLine<'_>| {
        let text = serde_json::to_string(&line).expect("verify line serializes");
        println!("{text}");
        lines_out.extend_from_slice(text.as_bytes());
        lines_out.push(b'\n');
        total += 1;
        ok += usize::from(line.as_expected());
    };

    if let Some((theta, data)) = &file_model {
        let t = theta.topology().clone();
        for seed in 0..cfg.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(cfg.base_seed, usize::MAX, seed));
            for &map in &cfg.maps {
                let plan = all_hidden_plan(map.into(), &t, cfg.count);
                let options = RandomOptions { beta_zero_outgoing: false, lambda: LambdaChoice::RandomSimplex };
                let specs = embed_composite(theta, &plan, &mut RandomParams { rng: &mut rng, options }, act).map_err(runtime)?.applied;
                let report = verify_loss_invariance(theta, data, &to_applied(specs), &MeanSquaredError, act).map_err(runtime)?;
                emit(VerifyLine { topology: t.to_string(), seed, expected: "pass", body: VerifyBody::Report(&report) });
            }
        }
    } else {
        for (ti, t) in topologies.iter().enumerate() {
            for seed in 0..cfg.seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(cfg.base_seed ^ 0x5eed, ti, seed));
                let needs_stationary = cfg.maps.iter().any(|m| *m != MapArg::Alpha) || cfg.expect_escape;
                let (data, sp) = if needs_stationary {
                    let (d, sp) = stationary_for(&cfg, t, ti, seed, act)?;
                    (d, Some(sp))
                } else {
                    (verify_dataset(&cfg, t, seed, 0).map_err(runtime)?, None)
                };
                for &map in &cfg.maps {
                    let kind: MapKind = map.into();
                    let plan = all_hidden_plan(kind, t, cfg.count);
                    let options = RandomOptions { beta_zero_outgoing: true, lambda: LambdaChoice::RandomSimplex };
                    let report = if kind == MapKind::Alpha {
                        let theta = ParamVector::uniform(t, &mut rng);
                        let specs = embed_composite(&theta, &plan, &mut RandomParams { rng: &mut rng, options }, act)
                            .map_err(runtime)?
                            .applied;
                        verify_loss_invariance(&theta, &data, &to_applied(specs), &MeanSquaredError, act).map_err(runtime)?
                    } else {
                        let sp = sp.as_ref().expect("computed for beta and gamma");
                        let specs = embed_composite(&sp.params, &plan, &mut RandomParams { rng: &mut rng, options }, act)
                            .map_err(runtime)?
                            .applied;
                        verify_stationarity_transfer(
                            &sp.params,
                            &data,
                            &to_applied(specs),
                            &MeanSquaredError,
                            act,
                            TransferOptions::default(),
                        )
                        .map_err(runtime)?
                    };
                    emit(VerifyLine { topology: t.to_string(), seed, expected: "pass", body: VerifyBody::Report(&report) });
                }
                if cfg.negative_controls {
                    let theta = ParamVector::uniform(t, &mut rng);
                    let options = RandomOptions::default();
                    let plan = all_hidden_plan(MapKind::Alpha, t, 1);
                    let out = embed_composite(&theta, &plan, &mut RandomParams { rng: &mut rng, options }, act).map_err(runtime)?;
                    let mut corrupted = out.params.clone();
                    let grown = corrupted.topology().clone();
                    let new_neuron = grown.width(1) - 1;
                    for j in 0..grown.width(2) {
                        corrupted.set_weight(2, j, new_neuron, 0.5);
                    }
                    let report = verify_loss_invariance_of(
                        &theta,
                        &corrupted,
                        &data,
                        to_applied(out.applied),
                        &MeanSquaredError,
                        act,
                    )
                    .map_err(runtime)?;
                    emit(VerifyLine { topology: t.to_string(), seed, expected: "fail", body: VerifyBody::Report(&report) });
                }
                if cfg.expect_escape {
                    let sp = sp.as_ref().expect("computed for the escape check");
                    let s = alpha_escape_trials(
                        &sp.params,
                        &data,
                        t.depth() - 1,
                        cfg.escape_count.unwrap_or(t.width(t.depth() - 1)),
                        cfg.escape_draws,
                        cfg.escape_threshold,
                        &MeanSquaredError,
                        act,
                        cell_seed(cfg.base_seed ^ 0xe5c, ti, seed),
                    )
                    .map_err(runtime)?;
                    let fraction = s.fraction();
                    emit(VerifyLine {
                        topology: t.to_string(),
                        seed,
                        expected: "pass",
                        body: VerifyBody::Escape {
                            check: "alpha_escape",
                            layer: t.depth() - 1,
                            count: cfg.escape_count.unwrap_or(t.width(t.depth() - 1)),
                            source_risk: sp.risk,
                            draws: s.norms.len(),
                            escaped: s.escaped,
                            fraction,
                            threshold: s.threshold,
                            min_grad_norm: s.norms.iter().copied().fold(f64::INFINITY, f64::min),
                            verdict: if fraction >= cfg.escape_min_fraction { "Pass" } else { "Fail" },
                        },
                    });
                }
            }
        }
    }
    write_file(&cfg.out.join("verify.jsonl"), &lines_out)?;
    eprintln!("{ok} of {total} checks as expected");
    if ok == total {
        Ok(())
    } else {
        Err(runtime(format!("{} checks did not match their expected verdict", total - ok)))
    }
}

#[derive(Serialize)]
struct CellLine<'a> {
    problem: &'a str,
    replica: usize,
    solver: &'a str,
    seed: u64,
    status: &'static str,
    message: Option<&'a str>,
    epochs: Option<usize>,
    final_risk: Option<f64>,
    max_boundary_gap: Option<f64>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    problem: &'a str,
    replica: usize,
    solver: &'a str,
    #[serde(flatten)]
    event: &'a crate::ita::TrainEvent,
}

fn cmd_bench(a: BenchArgs) -> CliResult {
    let mut cfg: BenchRunConfig = load_config(a.common.config.as_deref())?;
    apply_common(&a.common, &mut cfg.out, &mut cfg.activation);
    set(&mut cfg.seed, a.common.seed);
    for path in &a.data {
        cfg.files.push(DataConfig { path: Some(path.clone()), ..DataConfig::default() });
    }
    if a.no_synthetic {
        cfg.synthetic = false;
    }
    set(&mut cfg.synthetic_samples, a.samples);
    set(&mut cfg.replicas, a.replicas);
    set(&mut cfg.budgets, a.budgets);
    set(&mut cfg.jobs, a.jobs.map(Some));
    if let Some(h) = a.hidden {
        cfg.standard.hidden = h;
        cfg.ita.h_max = h;
    }
    set(&mut cfg.ita.h0, a.h0);
    cfg.standard.validate().map_err(usage)?;
    cfg.ita.validate().map_err(usage)?;
    if cfg.replicas == 0 || cfg.budgets.is_empty() || cfg.budgets.contains(&0) {
        return Err(usage("replicas must be >= 1 and budgets a nonempty list of positive epochs"));
    }
    if cfg.jobs == Some(0) {
        return Err(usage("--jobs must be >= 1"));
    }
    let mut problems = Vec::new();
    if cfg.synthetic {
        problems.extend(synthetic_suite(cfg.synthetic_samples, cfg.synthetic_noise, cfg.seed).map_err(usage)?);
    }
    for f in &cfg.files {
        problems.push(load_data(f).map_err(usage)?);
    }
    if problems.is_empty() {
        return Err(usage("no problems: keep the synthetic suite or pass --data"));
    }
    prepare_out(&cfg.out, &cfg)?;
    let solvers = vec![
        SolverSpec::Ita { name: "ita".into(), config: cfg.ita.clone() },
        SolverSpec::Standard { name: "standard".into(), config: cfg.standard.clone() },
    ];
    let bench_cfg = BenchConfig { replicas: cfg.replicas, budgets: cfg.budgets.clone(), base_seed: cfg.seed, jobs: cfg.jobs };
    let output = run_benchmark(&problems, &solvers, &bench_cfg, &MeanSquaredError, cfg.activation.get()).map_err(runtime)?;

    for table in &output.tables {
        table.write_csv(&cfg.out.join(format!("table_{}.csv", table.budget))).map_err(runtime)?;
        write_summary_csv(&summarize(table), &cfg.out.join(format!("summary_{}.csv", table.budget))).map_err(runtime)?;
    }
    let mut cells = Vec::new();
    let mut traces = Vec::new();
    let mut timings = String::from("problem,replica,solver,wall_seconds\n");
    for c in &output.cells {
        let problem = problems[c.problem].name.as_str();
        let solver = solvers[c.solver].name();
        let line = match &c.outcome {
            Ok(run) => {
                for event in &run.events {
                    traces.push(TraceLine { problem, replica: c.replica, solver, event });
                }
                CellLine {
                    problem,
                    replica: c.replica,
                    solver,
                    seed: c.seed,
                    status: "ok",
                    message: None,
                    epochs: Some(run.cumulative_epochs),
                    final_risk: Some(run.final_risk()),
                    max_boundary_gap: Some(run.max_boundary_gap()),
                }
            }
            Err(msg) => CellLine {
                problem,
                replica: c.replica,
                solver,
                seed: c.seed,
                status: "failed",
                message: Some(msg),
                epochs: None,
                final_risk: None,
                max_boundary_gap: None,
            },
        };
        cells.push(line);
        timings.push_str(&format!("{problem},{},{solver},{}\n", c.replica, c.wall_seconds));
    }
    write_file(&cfg.out.join("cells.jsonl"), &json_lines(&cells))?;
    write_file(&cfg.out.join("traces.jsonl"), &json_lines(&traces))?;
    write_file(&cfg.out.join("timings.csv"), timings.as_bytes())?;
    let failed = cells.iter().filter(|c| c.status == "failed").count();
    println!("{} cells ({failed} failed); tables in {}", cells.len(), cfg.out.display());
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> CliResult {
    let mut cfg: ProfileRunConfig = load_config(a.config.as_deref())?;
    set(&mut cfg.out, a.out);
    if !a.table.is_empty() {
        cfg.tables = a.table;
    }
    set(&mut cfg.alphas, a.alphas);
    if cfg.tables.is_empty() {
        return Err(usage("no tables given"));
    }
    let mut curves = Vec::new();
    for path in &cfg.tables {
        let table = ResultsTable::read_csv(path).map_err(usage)?;
        let ratios = performance_ratio(&table).map_err(usage)?;
        let curve = performance_profile(&ratios, &cfg.alphas).map_err(usage)?;
        if !ratios.clamped_rows.is_empty() {
            eprintln!("{}: {} rows had a best value below the ratio clamp", path.display(), ratios.clamped_rows.len());
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "table".into());
        curves.push((stem, curve));
    }
    prepare_out(&cfg.out, &cfg)?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for (stem, curve) in &curves {
        let path = cfg.out.join(format!("profile_{stem}.csv"));
        curve.write_csv(&path).map_err(runtime)?;
        for (s, name) in curve.solvers.iter().enumerate() {
            let _ = writeln!(lock, "{stem} {name}: rho(1) = {}, rho(1.5) = {}", curve.rho_at(s, 1.0), curve.rho_at(s, 1.5));
        }
    }
    Ok(())
}
