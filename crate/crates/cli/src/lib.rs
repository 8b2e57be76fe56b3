//! Command-line front end for the `swpower` engine.
//!
//! Every command writes a report that carries the tool version and the fully
//! resolved inputs, so any result can be reproduced by a direct library call.

mod output;
mod parse;
mod sweep;

use std::ffi::OsString;
use std::fs::{self, File};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use swpower::design::Staircase;
use swpower::gls::{power_from_se, vc_from_icc_cac};
use swpower::model::{build_x, EffectStructure};
use swpower::search::{calibrate_effect, required, ssr, SsrOutcome};
use swpower::simulate::{generate, mc_power, CalendarTrend, EffectCurve, FitMethod, SimScenario};
use swpower::{Axis, CorrelationSpec, DesignSpec, Estimand, ModelSpec, SearchProblem, SearchResult, TimeTrend};

pub use output::fmt_num;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const INFEASIBLE: i32 = 3;
    pub const IO: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Engine(#[from] swpower::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{context}: {source}")]
    Context { context: String, source: Box<CliError> },
}

impl CliError {
    pub fn invalid(field: &str, message: impl Into<String>) -> Self {
        Self::Invalid { field: field.into(), message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        use swpower::Error as E;
        match self {
            Self::Invalid { .. } => exit::VALIDATION,
            Self::Io { .. } => exit::IO,
            Self::Context { source, .. } => source.exit_code(),
            Self::Engine(e) => match e {
                E::Io(_) | E::Csv(_) => exit::IO,
                E::Numerical(_) => exit::FAILURE,
                E::SearchBound(_) => exit::INFEASIBLE,
                _ => exit::VALIDATION,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "swpower", version, about = "Power, sample size and simulation for stepped wedge trials")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster-period layout of a design, or its fixed-effects matrix.
    Design(DesignCmd),
    /// Analytic power of the Wald test for an estimand.
    Power(PowerCmd),
    /// Smallest individuals per cell or clusters per sequence reaching the target power.
    Samplesize(SampleSizeCmd),
    /// Sample size ratio of a model relative to a reference model.
    Ssr(SsrCmd),
    /// Monte Carlo power from simulated trials.
    Simulate(SimulateCmd),
    /// Tidy table of results over a grid of inputs.
    Sweep(SweepCmd),
}

#[derive(Debug, Clone, Args)]
pub struct DesignArgs {
    /// JSON design file, or an inline JSON object. Flags below override its fields.
    #[arg(long)]
    pub design: Option<String>,
    /// Number of sequences [default: 6].
    #[arg(long)]
    pub sequences: Option<u32>,
    /// Clusters randomised to each sequence [default: 4].
    #[arg(long, alias = "clusters")]
    pub clusters_per_sequence: Option<u32>,
    /// Individuals per cluster-period cell [default: 5].
    #[arg(long)]
    pub individuals: Option<u32>,
    /// Extra all-control periods before the first crossover.
    #[arg(long)]
    pub extra_start: Option<u32>,
    /// Extra all-treated periods after the last crossover.
    #[arg(long)]
    pub extra_end: Option<u32>,
    /// Multiplier on the cell size of the first period.
    #[arg(long)]
    pub baseline_multiplier: Option<f64>,
    /// Staircase design observed R0 periods before and R1 periods from crossover, as R0:R1.
    #[arg(long, value_parser = parse::staircase)]
    pub staircase: Option<Staircase>,
}

impl DesignArgs {
    pub fn resolve(&self) -> Result<DesignSpec, CliError> {
        let mut spec = match &self.design {
            Some(src) => {
                let text = if src.trim_start().starts_with('{') {
                    src.clone()
                } else {
                    fs::read_to_string(src).map_err(|source| CliError::Io { path: src.clone(), source })?
                };
                serde_json::from_str(&text).map_err(|e| CliError::invalid("--design", e.to_string()))?
            }
            None => DesignSpec::standard(6, 4, 5),
        };
        if let Some(v) = self.sequences {
            spec.sequences = v;
        }
        if let Some(v) = self.clusters_per_sequence {
            spec.clusters_per_sequence = v;
        }
        if let Some(v) = self.individuals {
            spec.individuals_per_cell = v;
        }
        if let Some(v) = self.extra_start {
            spec.extra_start = v;
        }
        if let Some(v) = self.extra_end {
            spec.extra_end = v;
        }
        if let Some(v) = self.baseline_multiplier {
            spec.baseline_multiplier = v;
        }
        if self.staircase.is_some() {
            spec.staircase = self.staircase;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Treatment effect structure: it, eti, dct:W, ncs:D or it-drop:W.
    #[arg(long, default_value = "eti")]
    pub model: EffectStructure,
    /// Calendar time adjustment: cat or lin.
    #[arg(long, default_value = "cat")]
    pub time: TimeTrend,
    /// "TATE(a,b)" or "PTE(s)" [default: TATE(0,S) over all exposure times].
    #[arg(long)]
    pub estimand: Option<Estimand>,
}

impl ModelArgs {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec::new(self.model, self.time)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Intracluster correlation.
    #[arg(long, default_value_t = 0.05)]
    pub icc: f64,
    /// Cluster autocorrelation.
    #[arg(long, default_value_t = 0.75)]
    pub cac: f64,
    /// Individual-level residual variance.
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    /// Treatment effect on the estimand scale.
    #[arg(long, default_value_t = 0.2)]
    pub effect: f64,
    /// Power the sample-size searches aim for.
    #[arg(long, default_value_t = 0.9)]
    pub target_power: f64,
    /// Two-sided significance level.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

impl ProblemArgs {
    pub fn correlation(&self) -> CorrelationSpec {
        CorrelationSpec { icc: self.icc, cac: self.cac, sigma2: self.sigma2 }
    }

    /// The search problem on `design`, with the estimand defaulting to the
    /// full exposure range of that design.
    pub fn problem_on(&self, design: DesignSpec, estimand: Option<Estimand>) -> Result<SearchProblem, CliError> {
        let layout = design.build()?;
        let model = self.model.spec();
        model.check(layout.max_exposure)?;
        let estimand = estimand.or(self.model.estimand).unwrap_or(Estimand::tate(0, layout.max_exposure));
        estimand.check(layout.max_exposure)?;
        let p = SearchProblem {
            design,
            model,
            estimand,
            correlation: self.correlation(),
            effect: self.effect,
            target_power: self.target_power,
            alpha: self.alpha,
        };
        p.validate()?;
        vc_from_icc_cac(&p.correlation)?;
        Ok(p)
    }

    pub fn problem(&self) -> Result<SearchProblem, CliError> {
        self.problem_on(self.design.resolve()?, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl OutputArgs {
    fn write<T: Serialize>(&self, report: &T) -> Result<(), CliError> {
        output::emit(self.out.as_deref(), &output::render(report, self.format == Format::Csv)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchAxis {
    Individuals,
    Clusters,
}

impl From<SearchAxis> for Axis {
    fn from(a: SearchAxis) -> Self {
        match a {
            SearchAxis::Individuals => Axis::Individuals,
            SearchAxis::Clusters => Axis::Clusters,
        }
    }
}

#[derive(Debug, Args)]
pub struct DesignCmd {
    #[command(flatten)]
    pub design: DesignArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Emit the fixed-effects design matrix for --model instead of the cell layout.
    #[arg(long)]
    pub matrix: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct PowerCmd {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Replace --effect by the effect that gives this power.
    #[arg(long)]
    pub calibrate_power: Option<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SampleSizeCmd {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Quantity to search over.
    #[arg(long, value_enum, default_value_t = SearchAxis::Individuals)]
    pub axis: SearchAxis,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SsrCmd {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Model in the denominator of the ratio.
    #[arg(long, default_value = "it")]
    pub reference_model: EffectStructure,
    #[arg(long, value_enum, default_value_t = SearchAxis::Clusters)]
    pub axis: SearchAxis,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Generalized least squares at the generating variance components.
    Known,
    /// Restricted maximum likelihood.
    Reml,
}

#[derive(Debug, Args)]
pub struct SimulateCmd {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// immediate:D, jump-linear:A,B, washout:D:R1,..,Rw or tabulated:V1,..,Vn [default: immediate at --effect].
    #[arg(long, value_parser = parse::curve)]
    pub curve: Option<EffectCurve>,
    /// Calendar trend: flat, linear:FROM,TO or tabulated:V1,..,VJ.
    #[arg(long, value_parser = parse::trend, default_value = "flat")]
    pub trend: CalendarTrend,
    #[arg(long, value_enum, default_value_t = Method::Reml)]
    pub method: Method,
    #[arg(long, default_value_t = 1000)]
    pub reps: u32,
    #[arg(long, env = "SWPOWER_SEED", default_value_t = 1)]
    pub seed: u64,
    /// Worker threads [default: all cores].
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Also write the individual-level data of one replication as CSV.
    #[arg(long)]
    pub data_out: Option<PathBuf>,
    /// Replication written by --data-out.
    #[arg(long, default_value_t = 0)]
    pub data_rep: u32,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Power,
    Samplesize,
    Ssr,
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Grid axis NAME=V1,V2,.. (repeatable). Names: icc, cac, sequences, clusters,
    /// individuals, extra-start, extra-end, baseline-multiplier, staircase (R0:R1),
    /// estimand (separated by ';', arguments may use S, S-k, S+k).
    #[arg(long, value_parser = parse::grid)]
    pub grid: Vec<parse::Grid>,
    #[arg(long, value_enum, default_value_t = Measure::Samplesize)]
    pub measure: Measure,
    /// Search axis for the samplesize and ssr measures.
    #[arg(long, value_enum, default_value_t = SearchAxis::Individuals)]
    pub axis: SearchAxis,
    /// Reference model for the ssr measure.
    #[arg(long, default_value = "it")]
    pub reference_model: EffectStructure,
    /// Worker threads [default: all cores].
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Serialize)]
struct Report<C: Serialize, R: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: C,
    result: R,
}

fn report<C: Serialize, R: Serialize>(command: &'static str, config: C, result: R) -> Report<C, R> {
    Report { tool: "swpower", version: VERSION, command, config, result }
}

/// Runs `f` on a pool of `jobs` threads, or on the global pool.
fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(CliError::invalid("--jobs", "must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::invalid("--jobs", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn design(cmd: &DesignCmd) -> Result<i32, CliError> {
    let spec = cmd.design.resolve()?;
    let layout = spec.build()?;
    let csv = cmd.output.format == Format::Csv;
    if !cmd.matrix {
        let bytes = if csv {
            let mut buf = Vec::new();
            layout.write_csv(&mut buf)?;
            buf
        } else {
            output::json_bytes(&serde_json::to_value(report("design", json!({ "design": spec }), &layout)).expect("layout serializes"))?
        };
        output::emit(cmd.output.out.as_deref(), &bytes)?;
        return Ok(exit::OK);
    }
    let model = cmd.model.spec();
    model.check(layout.max_exposure)?;
    let x = build_x(&layout, &model)?;
    let bytes = if csv {
        let mut buf = Vec::new();
        x.write_csv(&mut buf)?;
        buf
    } else {
        let rows: Vec<Vec<f64>> = (0..x.nrows()).map(|i| x.values.row(i).iter().copied().collect()).collect();
        let cells: Vec<_> = x
            .cells
            .iter()
            .map(|c| json!({"cluster": c.cluster, "period": c.period, "exposure": c.exposure, "cell_size": c.cell_size}))
            .collect();
        let result = json!({ "labels": x.labels, "cells": cells, "rows": rows });
        let config = json!({ "design": spec, "model": model });
        output::json_bytes(&serde_json::to_value(report("design", config, result)).expect("matrix serializes"))?
    };
    output::emit(cmd.output.out.as_deref(), &bytes)?;
    Ok(exit::OK)
}

#[derive(Serialize)]
struct PowerConfig {
    problem: SearchProblem,
    calibrate_power: Option<f64>,
}

fn power(cmd: &PowerCmd) -> Result<i32, CliError> {
    let mut problem = cmd.problem.problem()?;
    if let Some(target) = cmd.calibrate_power {
        let mut probe = problem.clone();
        probe.target_power = target;
        problem.effect = calibrate_effect(&probe).map_err(|e| CliError::Context {
            context: "--calibrate-power".into(),
            source: Box::new(e.into()),
        })?;
    }
    let result = problem.power()?;
    cmd.output.write(&report("power", PowerConfig { problem, calibrate_power: cmd.calibrate_power }, result))?;
    Ok(exit::OK)
}

#[derive(Serialize)]
struct SampleSizeConfig {
    problem: SearchProblem,
    axis: SearchAxis,
}

fn samplesize(cmd: &SampleSizeCmd) -> Result<i32, CliError> {
    let problem = cmd.problem.problem()?;
    let result = required(&problem, cmd.axis.into())?;
    cmd.output.write(&report("samplesize", SampleSizeConfig { problem, axis: cmd.axis }, result))?;
    Ok(match result {
        SearchResult::Solved { .. } => exit::OK,
        SearchResult::Infeasible { .. } => exit::INFEASIBLE,
    })
}

#[derive(Serialize)]
struct SsrConfig {
    reference: SearchProblem,
    problem: SearchProblem,
    axis: SearchAxis,
}

fn ssr_cmd(cmd: &SsrCmd) -> Result<i32, CliError> {
    let problem = cmd.problem.problem()?;
    let mut reference = problem.clone();
    reference.model = ModelSpec::new(cmd.reference_model, problem.model.time);
    reference.model.check(problem.design.build()?.max_exposure)?;
    let result = ssr(&reference, &problem, cmd.axis.into())?;
    cmd.output.write(&report("ssr", SsrConfig { reference, problem, axis: cmd.axis }, result))?;
    Ok(match result {
        SsrOutcome::Ratio { .. } => exit::OK,
        SsrOutcome::Infeasible { .. } => exit::INFEASIBLE,
    })
}

#[derive(Serialize)]
struct SimulationConfig {
    curve: EffectCurve,
    trend: CalendarTrend,
    method: Method,
    reps: u32,
    seed: u64,
}

#[derive(Serialize)]
struct SimulateConfig {
    problem: SearchProblem,
    simulation: SimulationConfig,
}

#[derive(Serialize)]
struct SimulateResult {
    estimand_value: f64,
    analytic_power: f64,
    #[serde(flatten)]
    mc: swpower::simulate::McPower,
}

fn simulate(cmd: &SimulateCmd) -> Result<i32, CliError> {
    let problem = cmd.problem.problem()?;
    let layout = problem.design.build()?;
    let vc = problem.variance_components()?;
    let curve = cmd.curve.clone().unwrap_or(EffectCurve::Immediate { delta: problem.effect });
    let scenario = SimScenario {
        layout,
        curve: curve.clone(),
        trend: cmd.trend.clone(),
        vc,
        reps: cmd.reps,
        seed: cmd.seed,
        alpha: problem.alpha,
    };
    scenario.validate()?;
    let method = match cmd.method {
        Method::Known => FitMethod::KnownVariance(vc),
        Method::Reml => FitMethod::Reml,
    };
    let mc = with_jobs(cmd.jobs, || mc_power(&scenario, &problem.model, &problem.estimand, &method))??;
    let estimand_value = curve.estimand_value(&problem.estimand, scenario.layout.max_exposure);
    let analytic_power = power_from_se(estimand_value, problem.standard_error()?, problem.alpha)?.power;
    if let Some(path) = &cmd.data_out {
        let file = File::create(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
        generate(&scenario, cmd.data_rep).write_csv(file)?;
    }
    let config = SimulateConfig {
        problem,
        simulation: SimulationConfig { curve, trend: cmd.trend.clone(), method: cmd.method, reps: cmd.reps, seed: cmd.seed },
    };
    cmd.output.write(&report("simulate", config, SimulateResult { estimand_value, analytic_power, mc }))?;
    Ok(exit::OK)
}

/// Executes a parsed command and returns its exit code.
pub fn execute(command: &Command) -> Result<i32, CliError> {
    match command {
        Command::Design(c) => design(c),
        Command::Power(c) => power(c),
        Command::Samplesize(c) => samplesize(c),
        Command::Ssr(c) => ssr_cmd(c),
        Command::Simulate(c) => simulate(c),
        Command::Sweep(c) => sweep::run(c),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
