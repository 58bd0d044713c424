mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use canova_core::estimators::{estimate_with_fits, EstimateReport, Method};
use canova_core::inference::{
    hierarchical_screen, sequential_confidence_set, EstimationConfig, Fallback,
    RandomizationConfig, SequentialConfig, Statistic,
};
use canova_core::nuisance::{fit_all_folds, make_fold_plan, LearnerConfig, LearnerKind};
use canova_core::simulation::{
    figure1_preset, generate, run_study, DgpKind, DgpSpec, NoiseSpec, FIGURE1_N_GRID,
};
use canova_core::{Dataset, EstimandSpec, Schema};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{load_config, CommandKind, DerivedSeeds, Format, Manifest, RunConfig};

/// Causal ANOVA explainability: estimation, randomization tests, screening
/// and simulation studies.
#[derive(Parser, Debug)]
#[command(name = "canova", version, about)]
struct Cli {
    /// Worker threads (default: available parallelism). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cross-fitted point estimates, standard errors and intervals.
    Estimate(EstimateArgs),
    /// Sequential procedure: randomization gate, then the one-step interval.
    Test(TestArgs),
    /// Screen all factors, then estimate interactions among the rejected ones.
    Screen(ScreenArgs),
    /// Monte Carlo study of bias, spread and coverage.
    Simulate(SimulateArgs),
    /// Draw a dataset from a built-in generating process.
    Generate(GenerateArgs),
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Run configuration (TOML/JSON) or a previous output carrying a manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV with a header row.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Outcome column name.
    #[arg(long)]
    outcome: Option<String>,
    /// Schema file (TOML/JSON) declaring factor kinds and levels.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of cross-fitting folds.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[command(flatten)]
    learner: LearnerArgs,
    /// Output file (default: standard output).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct LearnerArgs {
    /// auto, cellmean or polyls.
    #[arg(long)]
    learner: Option<LearnerKind>,
    #[arg(long)]
    degree: Option<u32>,
    #[arg(long)]
    interaction_order: Option<usize>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    mc_draws: Option<usize>,
    #[arg(long)]
    force_monte_carlo: bool,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Estimand such as `total:3`, `total:1,3` or `interaction:1,3` (repeatable).
    #[arg(long)]
    estimand: Vec<EstimandSpec>,
    /// plugin, if or eif (repeatable).
    #[arg(long)]
    method: Vec<Method>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Also write per-observation corrected values to this CSV.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct GateArgs {
    /// Number of permutations.
    #[arg(long = "B")]
    permutations: Option<usize>,
    /// point ({0}) or halfline ([0, inf)) when the gate does not reject.
    #[arg(long)]
    fallback: Option<Fallback>,
    /// Randomization statistic: plugin or if.
    #[arg(long)]
    stat: Option<Statistic>,
    /// Interval method after rejection: if or eif.
    #[arg(long)]
    method: Option<Method>,
    /// Gate interaction estimands too (heuristic).
    #[arg(long)]
    force_interaction_gate: bool,
}

#[derive(Args, Debug)]
struct TestArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    estimand: Option<EstimandSpec>,
    #[command(flatten)]
    gate: GateArgs,
}

#[derive(Args, Debug)]
struct ScreenArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    gate: GateArgs,
    /// Decision table as CSV.
    #[arg(long)]
    output_csv: Option<PathBuf>,
    /// Decision table and per-factor traces as JSON.
    #[arg(long)]
    output_json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Study grid file (TOML/JSON).
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Sample-size grid for the polynomial design with true nuisances.
    #[arg(long)]
    figure1: bool,
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated sample sizes for --figure1.
    #[arg(long, value_delimiter = ',')]
    n_grid: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Record wall-clock seconds (output is then not reproducible byte for byte).
    #[arg(long)]
    timing: bool,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum DgpChoice {
    Paper,
    Additive,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    dgp: Option<DgpChoice>,
    /// Interaction coefficient of the polynomial design.
    #[arg(long)]
    sigma: Option<f64>,
    /// Noise variance of the polynomial design.
    #[arg(long, conflicts_with = "noise_sd")]
    noise_variance: Option<f64>,
    /// Noise standard deviation of the polynomial design.
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn base_config(path: Option<&Path>, command: CommandKind) -> anyhow::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(c) = cfg.command {
        if c != command {
            bail!("configuration is for `{c:?}`, not `{command:?}`");
        }
    }
    cfg.command = Some(command);
    Ok(cfg)
}

fn apply_common(cfg: &mut RunConfig, a: &CommonArgs) -> anyhow::Result<()> {
    if let Some(v) = &a.input {
        cfg.input = Some(v.clone());
    }
    if let Some(p) = &a.schema {
        cfg.schema = Some(Schema::from_path(p)?);
    }
    if let Some(v) = &a.outcome {
        cfg.outcome = Some(v.clone());
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.folds {
        cfg.folds = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    let l = &a.learner;
    if let Some(v) = l.learner {
        cfg.learner.learner = v;
    }
    if let Some(v) = l.degree {
        cfg.learner.degree = v;
    }
    if let Some(v) = l.interaction_order {
        cfg.learner.interaction_order = Some(v);
    }
    if let Some(v) = l.ridge {
        cfg.learner.ridge = v;
    }
    if let Some(v) = l.mc_draws {
        cfg.learner.mc_draws = v;
    }
    if l.force_monte_carlo {
        cfg.learner.force_monte_carlo = true;
    }
    Ok(())
}

fn apply_gate(cfg: &mut RunConfig, g: &GateArgs) {
    if let Some(v) = g.permutations {
        cfg.permutations = v;
    }
    if let Some(v) = g.fallback {
        cfg.fallback = v;
    }
    if let Some(v) = g.stat {
        cfg.statistic = v;
    }
    if let Some(v) = g.method {
        cfg.methods = vec![v];
    }
    if g.force_interaction_gate {
        cfg.force_interaction_gate = true;
    }
}

fn load_data(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| anyhow!(ConfigError("--input is required".into())))?;
    let mut schema = match (&cfg.schema, &cfg.outcome) {
        (Some(s), _) => s.clone(),
        (None, Some(o)) => Schema::outcome_only(o.clone()),
        (None, None) => {
            return Err(anyhow!(ConfigError(
                "--outcome or --schema is required".into()
            )))
        }
    };
    if let Some(o) = &cfg.outcome {
        schema.outcome = o.clone();
    }
    Ok(Dataset::from_csv_path(input, &schema)?)
}

fn learner_for(cfg: &RunConfig, seeds: &DerivedSeeds) -> LearnerConfig {
    LearnerConfig {
        mc_seed: seeds.monte_carlo,
        ..cfg.learner.clone()
    }
}

fn sequential_config(cfg: &RunConfig, seeds: &DerivedSeeds) -> SequentialConfig {
    SequentialConfig {
        randomization: RandomizationConfig {
            permutations: cfg.permutations,
            statistic: cfg.statistic,
            seed: seeds.randomization,
        },
        estimation: EstimationConfig {
            folds: cfg.folds,
            fold_seed: seeds.fold_plan,
            learner: learner_for(cfg, seeds),
            method: cfg.methods.first().copied().unwrap_or(Method::OneStepEif),
        },
        fallback: cfg.fallback,
        force_interaction_gate: cfg.force_interaction_gate,
    }
}

/// Error raised for invalid command-line or configuration input.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn open_output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(
    path: Option<&Path>,
    manifest: &Manifest,
    key: &str,
    value: &T,
) -> anyhow::Result<()> {
    let mut map = serde_json::Map::new();
    map.insert("manifest".into(), serde_json::to_value(manifest)?);
    map.insert(key.into(), serde_json::to_value(value)?);
    let mut out = open_output(path)?;
    serde_json::to_writer_pretty(&mut out, &serde_json::Value::Object(map))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn cmd_estimate(a: &EstimateArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(a.common.config.as_deref(), CommandKind::Estimate)?;
    apply_common(&mut cfg, &a.common)?;
    if !a.estimand.is_empty() {
        cfg.estimands = a.estimand.clone();
    }
    if !a.method.is_empty() {
        cfg.methods = a.method.clone();
    }
    if let Some(f) = a.format {
        cfg.format = Some(f);
    }
    if cfg.estimands.is_empty() {
        return Err(anyhow!(ConfigError(
            "at least one --estimand is required".into()
        )));
    }
    if cfg.methods.is_empty() {
        cfg.methods = vec![Method::OneStepEif];
    }
    let data = load_data(&cfg)?;
    let seeds = DerivedSeeds::from_master(cfg.seed);
    let learner = learner_for(&cfg, &seeds);
    let plan = make_fold_plan(data.n(), cfg.folds, seeds.fold_plan)?;
    let fits = fit_all_folds(&data, &plan, &learner)?;
    let mut reports: Vec<EstimateReport> = Vec::new();
    let mut records = Vec::new();
    for spec in &cfg.estimands {
        for &method in &cfg.methods {
            let mut est = estimate_with_fits(&data, &plan, &fits, spec, method, cfg.alpha)?;
            est.report.seeds.monte_carlo = seeds.monte_carlo;
            for r in &est.records {
                records.push((*spec, method, r.clone()));
            }
            reports.push(est.report);
        }
    }
    let manifest = Manifest::new(&cfg);
    match cfg.format.unwrap_or(Format::Json) {
        Format::Json => write_json(a.common.output.as_deref(), &manifest, "reports", &reports)?,
        Format::Csv => {
            let mut out = open_output(a.common.output.as_deref())?;
            out.write_all(manifest.csv_line()?.as_bytes())?;
            let mut w = csv::Writer::from_writer(out);
            w.write_record([
                "estimand",
                "method",
                "point",
                "point_clipped",
                "std_error",
                "ci_lo",
                "ci_hi",
                "alpha",
                "n",
                "folds",
            ])?;
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            for r in &reports {
                w.write_record([
                    r.estimand.to_string(),
                    r.method.to_string(),
                    r.point.to_string(),
                    r.point_clipped.to_string(),
                    opt(r.std_error),
                    opt(r.ci.map(|c| c[0])),
                    opt(r.ci.map(|c| c[1])),
                    r.alpha.to_string(),
                    r.n.to_string(),
                    r.folds.to_string(),
                ])?;
            }
            w.flush()?;
        }
    }
    if let Some(path) = &a.records {
        let mut out = open_output(Some(path))?;
        out.write_all(manifest.csv_line()?.as_bytes())?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "estimand",
            "method",
            "index",
            "fold",
            "xi_hat_i",
            "plug_in",
            "correction",
        ])?;
        for (spec, method, r) in &records {
            w.write_record([
                spec.to_string(),
                method.to_string(),
                r.index.to_string(),
                r.fold.to_string(),
                r.xi_hat_i.to_string(),
                r.plug_in.to_string(),
                r.correction.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_test(a: &TestArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(a.common.config.as_deref(), CommandKind::Test)?;
    apply_common(&mut cfg, &a.common)?;
    apply_gate(&mut cfg, &a.gate);
    if let Some(e) = a.estimand {
        cfg.estimands = vec![e];
    }
    let spec = match cfg.estimands.as_slice() {
        [one] => *one,
        [] => return Err(anyhow!(ConfigError("--estimand is required".into()))),
        _ => {
            return Err(anyhow!(ConfigError(
                "test takes exactly one estimand".into()
            )))
        }
    };
    let data = load_data(&cfg)?;
    let seeds = DerivedSeeds::from_master(cfg.seed);
    let result =
        sequential_confidence_set(&data, &spec, cfg.alpha, &sequential_config(&cfg, &seeds))?;
    write_json(
        a.common.output.as_deref(),
        &Manifest::new(&cfg),
        "result",
        &result,
    )
}

fn cmd_screen(a: &ScreenArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(a.common.config.as_deref(), CommandKind::Screen)?;
    apply_common(&mut cfg, &a.common)?;
    apply_gate(&mut cfg, &a.gate);
    let data = load_data(&cfg)?;
    let seeds = DerivedSeeds::from_master(cfg.seed);
    let table = hierarchical_screen(&data, cfg.alpha, &sequential_config(&cfg, &seeds))?;
    let manifest = Manifest::new(&cfg);

    let (csv_path, json_path) = match (&a.output_csv, &a.output_json, &a.common.output) {
        (None, None, Some(base)) => (
            Some(base.with_extension("csv")),
            Some(base.with_extension("json")),
        ),
        (c, j, _) => (c.clone(), j.clone()),
    };
    if csv_path.is_some() || json_path.is_none() {
        let mut out = open_output(csv_path.as_deref())?;
        out.write_all(manifest.csv_line()?.as_bytes())?;
        table.write_csv(&mut out)?;
        out.flush()?;
    }
    if let Some(p) = json_path {
        write_json(Some(&p), &manifest, "table", &table)?;
    }
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(a.config.as_deref(), CommandKind::Simulate)?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.folds {
        cfg.folds = v;
    }
    if let Some(p) = &a.grid {
        let text =
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let study = if p.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        cfg.study = Some(study);
    } else if a.figure1 {
        let trials = a.trials.unwrap_or(1000);
        let grid: Vec<usize> = if a.n_grid.is_empty() {
            FIGURE1_N_GRID.to_vec()
        } else {
            a.n_grid.clone()
        };
        let mut study = figure1_preset(trials, &grid, cfg.seed);
        study.folds = cfg.folds;
        cfg.study = Some(study);
    }
    let mut study = cfg.study.clone().ok_or_else(|| {
        anyhow!(ConfigError(
            "one of --figure1, --grid or --config is required".into()
        ))
    })?;
    if let Some(t) = a.trials {
        for cell in &mut study.cells {
            cell.trials = t;
        }
    }
    if a.seed.is_some() {
        study.seed = cfg.seed;
    }
    if a.folds.is_some() {
        study.folds = cfg.folds;
    }
    if a.timing {
        study.timing = true;
    }
    cfg.study = Some(study.clone());
    let result = run_study(&study)?;
    eprint!("{}", result.summary_table());
    let mut out = open_output(a.output.as_deref())?;
    out.write_all(Manifest::new(&cfg).csv_line()?.as_bytes())?;
    result.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(a.config.as_deref(), CommandKind::Generate)?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n {
        cfg.n = Some(v);
    }
    let noise = match (a.noise_variance, a.noise_sd) {
        (Some(v), _) => Some(NoiseSpec::Variance(v)),
        (None, Some(s)) => Some(NoiseSpec::Sd(s)),
        _ => None,
    };
    match a.dgp {
        Some(DgpChoice::Paper) => {
            cfg.dgp = Some(DgpKind::PaperPolynomial {
                sigma: a.sigma.unwrap_or(1.0),
                noise: noise.unwrap_or_default(),
            })
        }
        Some(DgpChoice::Additive) => cfg.dgp = Some(DgpKind::AdditiveGaussian),
        None => {}
    }
    let kind = cfg
        .dgp
        .clone()
        .ok_or_else(|| anyhow!(ConfigError("--dgp is required".into())))?;
    let n = cfg
        .n
        .ok_or_else(|| anyhow!(ConfigError("--n is required".into())))?;
    let seeds = DerivedSeeds::from_master(cfg.seed);
    let gen = generate(&DgpSpec {
        kind,
        n,
        seed: seeds.data,
    })?;
    let mut out = open_output(a.output.as_deref())?;
    out.write_all(Manifest::new(&cfg).csv_line()?.as_bytes())?;
    gen.data.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<canova_core::Error>() {
            return (e.exit_code() as u8, e.code());
        }
        if cause.downcast_ref::<ConfigError>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
            || cause.downcast_ref::<toml::de::Error>().is_some()
        {
            return (5, "invalid_config");
        }
        if cause.downcast_ref::<io::Error>().is_some()
            || cause.downcast_ref::<csv::Error>().is_some()
        {
            return (2, "io");
        }
    }
    (5, "invalid_config")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 5 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        })
        .init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("error[invalid_config]: {e}");
            return ExitCode::from(5);
        }
    }
    let result = match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Test(a) => cmd_test(a),
        Command::Screen(a) => cmd_screen(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, tag) = exit_code(&e);
            eprintln!("error[{tag}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
