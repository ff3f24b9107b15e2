//! Experiment runner: reads a JSON experiment document, runs theory and
//! Monte Carlo, and writes CSV curves plus a JSON summary.
//!
//! Exit status: 0 success, 2 invalid input, 3 a checked ordering or
//! equivalence failed, 1 anything else.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis;
use crate::combiners::{self, Rule};
use crate::datamodel::{matrix_from_rows, EnsembleModel, LinkNoiseModel, ModelSpec};
use crate::diffusion::{self, DiffusionConfig, Smoothing, SmoothingOrder, Variant};
use crate::error::Error;
use crate::graph::{self, Topology, TopologySpec};
use crate::kalman::{self, StateSpaceModel, SystemMatrices};
use crate::montecarlo::{self, to_db, SimOptions};
use crate::rls;
use crate::stochmat::{self, Kind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Emit {
    LearningCurve,
    SteadyState,
    Theory,
    Comparison,
}

fn default_trials() -> usize {
    1
}

fn default_outputs() -> PathBuf {
    PathBuf::from("out")
}

fn default_emit() -> Vec<Emit> {
    vec![Emit::LearningCurve, Emit::SteadyState, Emit::Theory]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    pub topology: TopologyConfig,
    #[serde(default)]
    pub strategy: Option<StrategySpec>,
    #[serde(default)]
    pub rls: Option<RlsSpec>,
    #[serde(default)]
    pub kalman: Option<KalmanSpec>,
    #[serde(default)]
    pub consensus: Option<ConsensusSpec>,
    #[serde(default = "default_outputs")]
    pub outputs: PathBuf,
    #[serde(default = "default_emit")]
    pub emit: Vec<Emit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Complete,
    Path,
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomGraphSpec {
    pub n: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Defaults to a stream derived from the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_radius() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologyConfig {
    Explicit(TopologySpec),
    Random { random: RandomGraphSpec },
    Named { shape: Shape, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityTag {
    Identity,
}

/// A combination matrix: a rule, an explicit row-major matrix, or `"identity"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CombinerSpec {
    Identity(IdentityTag),
    Matrix { matrix: Vec<Vec<f64>> },
    Rule(Rule),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSizes {
    Uniform(f64),
    PerNode(Vec<f64>),
}

impl StepSizes {
    fn expand(&self, n: usize) -> Result<Vec<f64>, Error> {
        match self {
            StepSizes::Uniform(mu) => Ok(vec![*mu; n]),
            StepSizes::PerNode(v) if v.len() == n => Ok(v.clone()),
            StepSizes::PerNode(v) => Err(Error::Config(format!("{} step sizes for {n} nodes", v.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub variant: Variant,
    #[serde(default)]
    pub a: Option<CombinerSpec>,
    #[serde(default)]
    pub a1: Option<CombinerSpec>,
    #[serde(default)]
    pub a2: Option<CombinerSpec>,
    /// Rules are applied transposed so that `C` is right-stochastic.
    #[serde(default)]
    pub c: Option<CombinerSpec>,
    pub mu: StepSizes,
    #[serde(default)]
    pub adaptive_weights: Option<AdaptiveSpec>,
    #[serde(default)]
    pub smoothing: Option<SmoothingSpec>,
    #[serde(default)]
    pub link_noise: Option<LinkNoiseSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveSpec {
    #[serde(default = "default_nu")]
    pub nu: f64,
}

fn default_nu() -> f64 {
    combiners::DEFAULT_NU
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    pub order: SmoothingOrder,
    pub f: Vec<f64>,
    #[serde(default = "one")]
    pub q: f64,
}

fn one() -> f64 {
    1.0
}

/// Random link covariances with eigenvalues (and `σ²_d`) log-uniform in `scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkNoiseSpec {
    pub scale: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlsSpec {
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub a: CombinerSpec,
    #[serde(default)]
    pub c: Option<CombinerSpec>,
}

fn default_delta() -> f64 {
    rls::DEFAULT_DELTA
}

fn default_lambda() -> f64 {
    rls::DEFAULT_LAMBDA
}

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalmanSpec {
    pub f: Rows,
    pub g: Rows,
    pub q: Rows,
    /// One matrix for every node, or a single matrix shared by all.
    pub h: Vec<Rows>,
    pub r: Vec<Rows>,
    pub pi0: Rows,
    pub a: CombinerSpec,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusSpec {
    pub a: CombinerSpec,
    /// Initial values, one row per node; random Gaussian when absent.
    #[serde(default)]
    pub z0: Option<Rows>,
    #[serde(default = "one_usize")]
    pub m: usize,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug)]
pub enum CliError {
    Lib(Error),
    Io(std::io::Error),
    Parse(serde_json::Error),
    Assertion(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
            CliError::Parse(e) => write!(f, "invalid config: {e}"),
            CliError::Assertion(s) => write!(f, "check failed: {s}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Parse(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Lib(Error::Validation(_) | Error::Config(_) | Error::Precondition(_)) => 2,
            CliError::Parse(_) => 2,
            CliError::Assertion(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "diffnet", version, about = "Adaptive networks: theory and Monte Carlo experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate a diffusion strategy and compare with theory.
    Simulate(RunArgs),
    /// Closed-form performance only.
    Analyze(RunArgs),
    /// Check strategy orderings and simulate ATC, CTA and non-cooperative LMS.
    Compare(RunArgs),
    /// Average consensus with a decay-rate fit.
    Consensus(RunArgs),
    /// Diffusion and consensus RLS.
    Rls(RunArgs),
    /// Diffusion Kalman filtering against consensus fusion and a centralized filter.
    Kalman(RunArgs),
}

#[derive(Debug, Clone, PartialEq, Eq, Args)]
pub struct RunArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub emit: Option<Vec<Emit>>,
}

/// Parses `args` (including the program name), runs, and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<Value, CliError> {
    let name = cmd_name(&cmd);
    let args = match cmd {
        Command::Simulate(a)
        | Command::Analyze(a)
        | Command::Compare(a)
        | Command::Consensus(a)
        | Command::Rls(a)
        | Command::Kalman(a) => a,
    };
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(o) = args.out {
        cfg.outputs = o;
    }
    if let Some(e) = args.emit {
        cfg.emit = e;
    }
    run(name, &cfg)
}

fn cmd_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Simulate(_) => "simulate",
        Command::Analyze(_) => "analyze",
        Command::Compare(_) => "compare",
        Command::Consensus(_) => "consensus",
        Command::Rls(_) => "rls",
        Command::Kalman(_) => "kalman",
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs one subcommand, writes its artifacts and returns the summary (also written as `summary.json`).
pub fn run(command: &str, cfg: &ExperimentConfig) -> Result<Value, CliError> {
    if cfg.trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()).into());
    }
    fs::create_dir_all(&cfg.outputs)?;
    let topology = build_topology(cfg)?;
    let mut assertion = None;
    let mut summary = match command {
        "simulate" => run_simulate(cfg, &topology, true)?,
        "analyze" => run_simulate(cfg, &topology, false)?,
        "compare" => {
            let (v, failed) = run_compare(cfg, &topology)?;
            assertion = failed;
            v
        }
        "consensus" => run_consensus(cfg, &topology)?,
        "rls" => run_rls(cfg, &topology)?,
        "kalman" => run_kalman(cfg, &topology)?,
        other => return Err(Error::Config(format!("unknown command {other}")).into()),
    };
    if let Value::Object(map) = &mut summary {
        map.insert("command".into(), json!(command));
        map.insert("seed".into(), json!(cfg.seed));
        map.insert("trials".into(), json!(cfg.trials));
        map.insert("iterations".into(), json!(cfg.iterations));
    }
    write(&cfg.outputs.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    match assertion {
        Some(msg) => Err(CliError::Assertion(msg)),
        None => Ok(summary),
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)?;
    Ok(())
}

fn aux_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - stream);
    rng
}

fn build_topology(cfg: &ExperimentConfig) -> Result<Topology, Error> {
    match &cfg.topology {
        TopologyConfig::Explicit(spec) => Topology::from_spec(spec),
        TopologyConfig::Named { shape, n } => Ok(match shape {
            Shape::Complete => Topology::complete(*n),
            Shape::Path => Topology::path(*n),
            Shape::Ring => Topology::ring(*n),
        }),
        TopologyConfig::Random { random } => {
            let mut rng = match random.seed {
                Some(s) => ChaCha8Rng::seed_from_u64(s),
                None => aux_rng(cfg.seed, 0),
            };
            graph::random_geometric(random.n, random.radius, &mut rng)
        }
    }
}

fn combiner(spec: &CombinerSpec, t: &Topology) -> Result<DMatrix<f64>, Error> {
    match spec {
        CombinerSpec::Identity(_) => Ok(DMatrix::identity(t.n(), t.n())),
        CombinerSpec::Matrix { matrix } => {
            let m = matrix_from_rows(matrix)?;
            if m.shape() != (t.n(), t.n()) {
                return Err(Error::Validation(format!("combination matrix must be {0}×{0}", t.n())));
            }
            for l in 0..t.n() {
                for k in 0..t.n() {
                    if m[(l, k)] != 0.0 && !t.in_neighborhood(l, k) {
                        return Err(Error::Validation(format!(
                            "weight on non-edge ({},{})",
                            l + 1,
                            k + 1
                        )));
                    }
                }
            }
            Ok(m)
        }
        CombinerSpec::Rule(rule) => Ok(combiners::build_combination(t, rule)?.into_entries()),
    }
}

fn right_combiner(spec: &Option<CombinerSpec>, t: &Topology) -> Result<DMatrix<f64>, Error> {
    match spec {
        None => Ok(DMatrix::identity(t.n(), t.n())),
        Some(s @ CombinerSpec::Rule(_)) => Ok(combiner(s, t)?.transpose()),
        Some(s) => combiner(s, t),
    }
}

fn build_model(cfg: &ExperimentConfig, t: &Topology) -> Result<EnsembleModel, Error> {
    let spec = cfg
        .model
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs a model section".into()))?;
    let model = spec.build()?;
    if model.n() != t.n() {
        return Err(Error::Validation(format!(
            "model has {} nodes but the topology has {}",
            model.n(),
            t.n()
        )));
    }
    Ok(model)
}

fn build_strategy(cfg: &ExperimentConfig, t: &Topology, model: &EnsembleModel) -> Result<DiffusionConfig, Error> {
    let s = cfg
        .strategy
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs a strategy section".into()))?;
    let n = t.n();
    let mu = s.mu.expand(n)?;
    let req = |x: &Option<CombinerSpec>, name: &str| -> Result<DMatrix<f64>, Error> {
        match x {
            Some(spec) => combiner(spec, t),
            None => Err(Error::Config(format!("variant {:?} needs `{name}`", s.variant))),
        }
    };
    let c = right_combiner(&s.c, t)?;
    let mut dc = match s.variant {
        Variant::Atc => DiffusionConfig::atc(req(&s.a, "a")?, c, mu)?,
        Variant::Cta => DiffusionConfig::cta(req(&s.a, "a")?, c, mu)?,
        Variant::General => DiffusionConfig::general(req(&s.a1, "a1")?, c, req(&s.a2, "a2")?, mu)?,
        Variant::NonCooperative => DiffusionConfig::non_cooperative(mu)?,
        Variant::ConsensusLms => DiffusionConfig::consensus(req(&s.a, "a")?, mu)?,
    };
    if let Some(ln) = &s.link_noise {
        let mut rng = aux_rng(cfg.seed, 1);
        dc = dc.with_link_noise(LinkNoiseModel::random(t, model.m(), ln.scale, &mut rng))?;
    }
    if let Some(aw) = &s.adaptive_weights {
        dc = dc.with_adaptive_weights(t.clone(), vec![aw.nu; n])?;
    }
    if let Some(sm) = &s.smoothing {
        dc = dc.with_smoothing(Smoothing::uniform(sm.order, sm.f.clone(), sm.q, n)?)?;
    }
    Ok(dc)
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn db_json(x: f64) -> Value {
    json!(to_db(x))
}

fn theory_json(rep: &analysis::PerformanceReport) -> Value {
    json!({
        "rho_b": rep.rho_b,
        "stable_mean": rep.stable_mean,
        "stable_ms": rep.stable_ms,
        "method": rep.method,
        "msd_network": rep.msd_network,
        "emse_network": rep.emse_network,
        "msd_network_db": db_json(rep.msd_network),
        "emse_network_db": db_json(rep.emse_network),
        "msd_node": rep.msd_node,
        "emse_node": rep.emse_node,
    })
}

fn run_simulate(cfg: &ExperimentConfig, t: &Topology, simulate: bool) -> Result<Value, CliError> {
    let model = build_model(cfg, t)?;
    let strat = build_strategy(cfg, t, &model)?;
    let emit = |e: Emit| cfg.emit.contains(&e);
    let mut out = serde_json::Map::new();
    out.insert("n".into(), json!(model.n()));
    out.insert("m".into(), json!(model.m()));
    out.insert("variant".into(), json!(strat.variant));
    if strat.variant != Variant::ConsensusLms {
        let bounds = diffusion::step_size_bounds(&model, &strat.c)?;
        out.insert("step_size_bounds".into(), json!(bounds));
    }

    let mut theory: Option<analysis::PerformanceReport> = None;
    let mut curves: Option<(Vec<f64>, Vec<f64>)> = None;
    if emit(Emit::Theory) || !simulate {
        match analysis::analyse(&model, &strat) {
            Ok((mom, c, rep)) => {
                let ms = analysis::mean_stability(&c, &mom);
                out.insert("per_node_bound_ok".into(), json!(ms.per_node_bound_ok));
                out.insert("theory".into(), theory_json(&rep));
                if rep.stable_ms && cfg.iterations > 0 {
                    let zero = DVector::zeros(model.m());
                    let e = analysis::learning_curve_theory(&c, &mom, model.wo(), &zero, cfg.iterations)?;
                    let m = analysis::msd_curve_theory(&c, &mom, model.wo(), &zero, cfg.iterations)?;
                    curves = Some((e, m));
                }
                theory = Some(rep);
            }
            Err(e) => {
                out.insert("theory".into(), json!({ "error": e.to_string() }));
            }
        }
    }
    if emit(Emit::Comparison) {
        out.insert("comparison".into(), comparison_json(&model, &strat)?);
    }

    let sim = if simulate {
        let opts = SimOptions::new(cfg.iterations, cfg.trials, cfg.seed);
        Some(montecarlo::simulate(&model, &strat, &opts)?)
    } else {
        None
    };
    if let Some(s) = &sim {
        let mut sj = json!({
            "msd_steady": s.msd_steady,
            "emse_steady": s.emse_steady,
            "msd_steady_db": db_json(s.msd_steady),
            "emse_steady_db": db_json(s.emse_steady),
            "diverged_trials": s.diverged_trials,
        });
        if let Some(rep) = theory.as_ref().filter(|r| r.stable_ms) {
            sj["msd_gap_db"] = json!((to_db(s.msd_steady) - to_db(rep.msd_network)).abs());
            sj["emse_gap_db"] = json!((to_db(s.emse_steady) - to_db(rep.emse_network)).abs());
        }
        out.insert("simulation".into(), sj);
    }

    if emit(Emit::LearningCurve) {
        let mut csv = String::from("i,emse_sim_db,emse_theory_db,msd_sim_db,msd_theory_db\n");
        for i in 0..cfg.iterations {
            let sim_e = sim.as_ref().map(|s| to_db(s.emse[i]));
            let sim_m = sim.as_ref().map(|s| to_db(s.msd[i]));
            let th_e = curves.as_ref().map(|c| to_db(c.0[i]));
            let th_m = curves.as_ref().map(|c| to_db(c.1[i]));
            let _ = writeln!(csv, "{i},{},{},{},{}", opt_num(sim_e), opt_num(th_e), opt_num(sim_m), opt_num(th_m));
        }
        write(&cfg.outputs.join("learning_curve.csv"), &csv)?;
    }
    if emit(Emit::SteadyState) {
        let mut csv = String::from(
            "scope,node,msd_sim,msd_theory,emse_sim,emse_theory,msd_sim_db,msd_theory_db,emse_sim_db,emse_theory_db\n",
        );
        let th = theory.as_ref().filter(|r| r.stable_ms);
        let mut row = |scope: &str, node: String, ms: Option<f64>, mt: Option<f64>, es: Option<f64>, et: Option<f64>| {
            let _ = writeln!(
                csv,
                "{scope},{node},{},{},{},{},{},{},{},{}",
                opt_num(ms),
                opt_num(mt),
                opt_num(es),
                opt_num(et),
                opt_num(ms.map(to_db)),
                opt_num(mt.map(to_db)),
                opt_num(es.map(to_db)),
                opt_num(et.map(to_db)),
            );
        };
        for k in 0..model.n() {
            row(
                "node",
                (k + 1).to_string(),
                sim.as_ref().map(|s| s.node_msd[k]),
                th.map(|r| r.msd_node[k]),
                sim.as_ref().map(|s| s.node_emse[k]),
                th.map(|r| r.emse_node[k]),
            );
        }
        row(
            "network",
            String::new(),
            sim.as_ref().map(|s| s.msd_steady),
            th.map(|r| r.msd_network),
            sim.as_ref().map(|s| s.emse_steady),
            th.map(|r| r.emse_network),
        );
        write(&cfg.outputs.join("steady_state.csv"), &csv)?;
    }
    Ok(Value::Object(out))
}

fn uniform_mu(strat: &DiffusionConfig) -> Vec<f64> {
    strat.mu.clone()
}

fn comparison_json(model: &EnsembleModel, strat: &DiffusionConfig) -> Result<Value, CliError> {
    let a = strat.smoothing_combiner().clone();
    let a = if strat.variant == Variant::ConsensusLms { strat.a1.clone() } else { a };
    let rep = analysis::compare_strategies(model, &a, &strat.c, &uniform_mu(strat))?;
    Ok(serde_json::to_value(&rep)?)
}

fn run_compare(cfg: &ExperimentConfig, t: &Topology) -> Result<(Value, Option<String>), CliError> {
    let model = build_model(cfg, t)?;
    let strat = build_strategy(cfg, t, &model)?;
    let a = match strat.variant {
        Variant::Cta | Variant::ConsensusLms => strat.a1.clone(),
        _ => strat.a2.clone(),
    };
    let rep = analysis::compare_strategies(&model, &a, &strat.c, &strat.mu)?;
    let mut v = json!({ "n": model.n(), "m": model.m(), "comparison": serde_json::to_value(&rep)? });
    if cfg.iterations > 0 {
        let opts = SimOptions::new(cfg.iterations, cfg.trials, cfg.seed);
        let mut sims = serde_json::Map::new();
        let mut csv = String::from("strategy,msd_theory_db,msd_sim_db\n");
        for (name, dc, th) in [
            ("atc", DiffusionConfig::atc(a.clone(), strat.c.clone(), strat.mu.clone())?, rep.msd_atc),
            ("cta", DiffusionConfig::cta(a.clone(), strat.c.clone(), strat.mu.clone())?, rep.msd_cta),
            ("lms", DiffusionConfig::non_cooperative(strat.mu.clone())?, rep.msd_lms),
        ] {
            let s = montecarlo::simulate(&model, &dc, &opts)?;
            sims.insert(name.into(), json!({ "msd_steady": s.msd_steady, "msd_steady_db": db_json(s.msd_steady) }));
            let _ = writeln!(csv, "{name},{},{}", num(to_db(th)), num(to_db(s.msd_steady)));
        }
        v["simulation"] = Value::Object(sims);
        write(&cfg.outputs.join("comparison.csv"), &csv)?;
    }
    let failed = (!rep.all_hold()).then(|| {
        let bad: Vec<&str> = rep
            .rows
            .iter()
            .filter(|r| r.status == analysis::RowStatus::Violated)
            .map(|r| r.relation.as_str())
            .collect();
        format!("violated: {}", bad.join("; "))
    });
    Ok((v, failed))
}

fn run_consensus(cfg: &ExperimentConfig, t: &Topology) -> Result<Value, CliError> {
    let spec = cfg
        .consensus
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs a consensus section".into()))?;
    let a = combiner(&spec.a, t)?;
    let n = t.n();
    let (z0, m) = match &spec.z0 {
        Some(rows) => {
            if rows.len() != n {
                return Err(Error::Validation(format!("z0 needs {n} rows")).into());
            }
            let m = rows[0].len();
            if m == 0 || rows.iter().any(|r| r.len() != m) {
                return Err(Error::Validation("z0 rows must share one positive length".into()).into());
            }
            (DVector::from_iterator(n * m, rows.iter().flatten().copied()), m)
        }
        None => {
            let mut rng = aux_rng(cfg.seed, 2);
            let m = spec.m.max(1);
            (DVector::from_fn(n * m, |_, _| StandardNormal.sample(&mut rng)), m)
        }
    };
    let iters = if cfg.iterations == 0 { 1000 } else { cfg.iterations };
    let rep = diffusion::consensus_report(&a, &z0, m, iters)?;
    let mut csv = String::from("n,error\n");
    for (i, e) in rep.errors.iter().enumerate() {
        let _ = writeln!(csv, "{i},{}", num(*e));
    }
    write(&cfg.outputs.join("consensus.csv"), &csv)?;
    let rate_gap = rep
        .fitted_rate
        .filter(|_| rep.lambda2.is_finite() && rep.lambda2 > 0.0)
        .map(|r| (r - rep.lambda2).abs() / rep.lambda2);
    Ok(json!({
        "n": n,
        "m": m,
        "doubly_stochastic": stochmat::is_kind(&a, Kind::DoublyStochastic, 1e-9),
        "converges": rep.converges,
        "lambda2": rep.lambda2,
        "fitted_rate": rep.fitted_rate,
        "relative_rate_gap": rate_gap,
        "final_error": rep.final_error,
    }))
}

fn run_rls(cfg: &ExperimentConfig, t: &Topology) -> Result<Value, CliError> {
    let spec = cfg
        .rls
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs an rls section".into()))?;
    let model = build_model(cfg, t)?;
    let a = combiner(&spec.a, t)?;
    let c = right_combiner(&spec.c, t)?;
    let params = rls::RlsParams {
        delta: spec.delta,
        lambda: spec.lambda,
        iterations: cfg.iterations,
        trials: cfg.trials,
        seed: cfg.seed,
    };
    let curves = rls::simulate(&model, t, &a, &c, &params)?;
    let mut csv = String::from("i,drls_msd_db,drls_alt_msd_db,crls_msd_db\n");
    for i in 0..cfg.iterations {
        let _ = writeln!(
            csv,
            "{i},{},{},{}",
            num(to_db(curves.drls[i])),
            num(to_db(curves.drls_alt[i])),
            num(to_db(curves.crls[i]))
        );
    }
    write(&cfg.outputs.join("rls_curve.csv"), &csv)?;
    let start = montecarlo::window_start(cfg.iterations, 0.1);
    let tail = |c: &[f64]| if c.len() > start { c[start..].iter().sum::<f64>() / (c.len() - start) as f64 } else { f64::NAN };
    let exch_d: usize = rls::drls_exchanged_scalars(t, model.m()).iter().sum();
    let exch_c: usize = rls::crls_exchanged_scalars(t, model.m()).iter().sum();
    Ok(json!({
        "n": model.n(),
        "m": model.m(),
        "delta": spec.delta,
        "lambda": spec.lambda,
        "msd_steady_db": {
            "drls": db_json(tail(&curves.drls)),
            "drls_alt": db_json(tail(&curves.drls_alt)),
            "crls": db_json(tail(&curves.crls)),
        },
        "max_form_gap": curves.max_form_gap,
        "exchanged_scalars_per_step": { "drls": exch_d, "crls": exch_c },
    }))
}

fn build_kalman(spec: &KalmanSpec, nodes: usize) -> Result<StateSpaceModel, Error> {
    let per_node = |ms: &[Rows], what: &str| -> Result<Vec<DMatrix<f64>>, Error> {
        let mats = ms.iter().map(|r| matrix_from_rows(r)).collect::<Result<Vec<_>, _>>()?;
        match mats.len() {
            1 => Ok(vec![mats[0].clone(); nodes]),
            k if k == nodes => Ok(mats),
            k => Err(Error::Validation(format!("{k} {what} matrices for {nodes} nodes"))),
        }
    };
    let sys = SystemMatrices {
        f: matrix_from_rows(&spec.f)?,
        g: matrix_from_rows(&spec.g)?,
        q: matrix_from_rows(&spec.q)?,
        h: per_node(&spec.h, "H")?,
        r: per_node(&spec.r, "R")?,
    };
    StateSpaceModel::constant(sys, matrix_from_rows(&spec.pi0)?)
}

fn run_kalman(cfg: &ExperimentConfig, t: &Topology) -> Result<Value, CliError> {
    let spec = cfg
        .kalman
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs a kalman section".into()))?;
    let model = build_kalman(spec, t.n())?;
    let a = combiner(&spec.a, t)?;
    if !stochmat::is_kind(&a, Kind::LeftStochastic, 1e-9) {
        return Err(Error::Validation("A must be left-stochastic".into()).into());
    }
    let tr = kalman::simulate_tracking(&model, t, &a, spec.epsilon, cfg.iterations, cfg.trials, cfg.seed)?;
    let mut csv = String::from("i,diffusion_db,consensus_db,centralized_db\n");
    for i in 0..cfg.iterations {
        let _ = writeln!(
            csv,
            "{i},{},{},{}",
            num(to_db(tr.diffusion[i])),
            num(to_db(tr.consensus[i])),
            num(to_db(tr.centralized[i]))
        );
    }
    write(&cfg.outputs.join("kalman_tracking.csv"), &csv)?;
    let start = montecarlo::window_start(cfg.iterations, 0.1);
    let tail = |c: &[f64]| if c.len() > start { c[start..].iter().sum::<f64>() / (c.len() - start) as f64 } else { f64::NAN };
    let (d, c, z) = (tail(&tr.diffusion), tail(&tr.consensus), tail(&tr.centralized));
    Ok(json!({
        "n": t.n(),
        "state_dim": model.state_dim,
        "epsilon": spec.epsilon,
        "tracking_msd_steady_db": {
            "diffusion": db_json(d),
            "consensus": db_json(c),
            "centralized": db_json(z),
        },
        "diffusion_not_worse_than_consensus": d <= c,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("diffnet-cli-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        d
    }

    fn base_config(out: PathBuf) -> ExperimentConfig {
        serde_json::from_value(json!({
            "seed": 3,
            "trials": 2,
            "iterations": 40,
            "model": { "seed": 1, "N": 4, "M": 2 },
            "topology": { "shape": "ring", "n": 4 },
            "strategy": { "variant": "atc", "a": { "rule": "metropolis" }, "mu": 0.05 },
            "outputs": out,
        }))
        .unwrap()
    }

    #[test]
    fn zero_iterations_gives_empty_curves() {
        let out = tmp_dir("empty");
        let mut cfg = base_config(out.clone());
        cfg.iterations = 0;
        cfg.trials = 1;
        let s = run("simulate", &cfg).unwrap();
        assert!(s["theory"]["stable_ms"].as_bool().unwrap());
        let lc = fs::read_to_string(out.join("learning_curve.csv")).unwrap();
        assert_eq!(lc.lines().count(), 1);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let out = tmp_dir("det");
        let cfg = base_config(out.clone());
        run("simulate", &cfg).unwrap();
        let a = fs::read(out.join("learning_curve.csv")).unwrap();
        let b1 = fs::read(out.join("steady_state.csv")).unwrap();
        run("simulate", &cfg).unwrap();
        assert_eq!(a, fs::read(out.join("learning_curve.csv")).unwrap());
        assert_eq!(b1, fs::read(out.join("steady_state.csv")).unwrap());
    }

    #[test]
    fn analyze_has_theory_only() {
        let out = tmp_dir("analyze");
        let cfg = base_config(out.clone());
        let s = run("analyze", &cfg).unwrap();
        assert!(s.get("simulation").is_none());
        assert!(s["theory"]["msd_network"].as_f64().unwrap() > 0.0);
        let lc = fs::read_to_string(out.join("learning_curve.csv")).unwrap();
        assert!(lc.lines().nth(1).unwrap().starts_with("0,,"));
    }

    #[test]
    fn unknown_fields_and_missing_seed_are_rejected() {
        let bad = json!({ "trials": 1, "topology": { "shape": "ring", "n": 3 } });
        assert!(serde_json::from_value::<ExperimentConfig>(bad).is_err());
        let bad = json!({ "seed": 1, "bogus": 1, "topology": { "shape": "ring", "n": 3 } });
        assert!(serde_json::from_value::<ExperimentConfig>(bad).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(["diffnet", "simulate", "--nope"]), 2);
        assert_eq!(CliError::Lib(Error::Validation("x".into())).exit_code(), 2);
        assert_eq!(CliError::Assertion("x".into()).exit_code(), 3);
    }

    #[test]
    fn emit_list_parses() {
        let cli = Cli::try_parse_from(["diffnet", "simulate", "--config", "x.json", "--emit", "theory,learning_curve"]).unwrap();
        let Command::Simulate(a) = cli.command else { panic!() };
        assert_eq!(a.emit, Some(vec![Emit::Theory, Emit::LearningCurve]));
        assert!(Cli::try_parse_from(["diffnet", "simulate", "--config", "x.json", "--emit", "nonsense"]).is_err());
    }
}
