use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use rda_core::design::{stack_lower, Dataset, SpilloverGraph};
use rda_core::diagnostics::{
    balance_test, counterfactual_path, rd_plot_data, variance_decomposition, BalanceTarget, FKind, PlotPoint,
    ShortfallKind, DEFAULT_BINS_PER_SIDE,
};
use rda_core::estimators::{
    estimate_benchmark, estimate_lower, estimate_sharp_rd, estimate_spillover_bilateral,
    estimate_spillover_collapsed, estimate_spillover_upper, estimate_upper, verify_equivalence, EstimateResult,
};
use rda_core::simlab::{run_monte_carlo, McEstimator, McOptions};
use rda_core::RdaError;

use crate::config::{ConfigError, Settings};
use crate::io::{self, BundlePaths, InputBundle, IoError, LoadOptions, ValidationReport};
use crate::manifest::Manifest;

pub const DEFAULT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Parser)]
#[command(name = "rda", version, about = "Regression discontinuity aggregation: estimators, simulations and diagnostics")]
pub struct Cli {
    /// Settings file of `key = value` lines; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    /// Directory for results and the run manifest.
    #[arg(long, global = true, default_value = "rda-out")]
    out: PathBuf,
    /// Any setting as `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    subunits: PathBuf,
    /// Drop units whose subunit importance sums above this value.
    #[arg(long)]
    max_total_importance: Option<f64>,
}

#[derive(Debug, Clone, Args)]
struct DesignArgs {
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long, value_parser = ["uniform", "triangular"])]
    kernel: Option<String>,
    #[arg(long, value_parser = ["all", "total-weight", "none"])]
    controls: Option<String>,
    #[arg(long, value_parser = ["geq", "strict-gt"])]
    cutoff: Option<String>,
    #[arg(long, value_parser = ["keep", "drop-exact-zero"])]
    ties: Option<String>,
    #[arg(long, value_parser = ["cutoff-crossing", "win-flag"])]
    treatment_basis: Option<String>,
    #[arg(long, value_parser = ["importance", "importance-times-analysis"])]
    lower_weighting: Option<String>,
    /// Fixed-effect dimensions (`fe_*` columns without the prefix).
    #[arg(long, value_delimiter = ',')]
    fe: Vec<String>,
    /// Subunit filter such as `votes>=20` or `|margin|>=2`; repeatable.
    #[arg(long)]
    filter: Vec<String>,
}

#[derive(Debug, Clone, Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    design: DesignArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SpilloverMode {
    Bilateral,
    Collapsed,
    Upper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TargetArg {
    Treatment,
    Instrument,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FKindArg {
    Robust,
    Classical,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ShortfallArg {
    Cumulative,
    PerPeriod,
}

#[derive(Debug, Clone, Args)]
struct SimulateArgs {
    #[arg(long, value_parser = ["linear", "symmetric-quadratic", "kinked-quadratic", "single-subunit", "heterogeneous-effects"])]
    outcome: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n_bootstrap: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    /// Comma-separated bandwidths.
    #[arg(long)]
    h_grid: Option<String>,
    /// Comma-separated subset of upper, lower, benchmark.
    #[arg(long)]
    estimators: Option<String>,
    #[arg(long)]
    n_units: Option<usize>,
    #[arg(long)]
    subunits_per_unit: Option<usize>,
    #[arg(long)]
    max_subunits_per_unit: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long, value_parser = ["equal", "dirichlet-random", "unit-sum-one"])]
    importance: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Upper-level IV with the three aggregated RD controls.
    EstimateUpper(EstimateArgs),
    /// Stacked lower-level fuzzy RD.
    EstimateLower(EstimateArgs),
    /// Upper-level IV controlling only for total close weight.
    EstimateBenchmark(EstimateArgs),
    /// Local linear sharp RD on subunit outcomes.
    SharpRd {
        /// Table with `subunit_id, running, outcome[, importance]`.
        #[arg(long)]
        subunits: PathBuf,
        #[command(flatten)]
        design: DesignArgs,
    },
    /// Checks that the upper-level estimate equals its stacked equivalent.
    VerifyEquivalence {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        design: DesignArgs,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Estimators over a bipartite unit-subunit exposure graph.
    Spillover {
        #[arg(value_enum)]
        mode: SpilloverMode,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        edges: PathBuf,
        #[command(flatten)]
        design: DesignArgs,
    },
    /// Monte Carlo bandwidth sweep over a simulated design.
    Simulate(SimulateArgs),
    /// Covariate balance of the treatment or instrument given RD controls.
    Balance {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        design: DesignArgs,
        #[arg(long, value_enum, default_value = "instrument")]
        target: TargetArg,
        /// Comma-separated `ctrl_*` names without the prefix.
        #[arg(long, value_delimiter = ',', required = true)]
        covariates: Vec<String>,
        #[arg(long, value_enum, default_value = "robust")]
        f_kind: FKindArg,
    },
    /// Binned scatter and local linear fits for an RD plot.
    PlotData {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        design: DesignArgs,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Within/between split of a weighted variance.
    VarDecomp {
        /// Table with `cell, value[, weight]`.
        #[arg(long)]
        records: PathBuf,
    },
    /// Counterfactual path from an actual series and treatment shortfall.
    Counterfactual {
        /// Table with `[period,] actual, shortfall`.
        #[arg(long)]
        series: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        beta: f64,
        #[arg(long, allow_hyphen_values = true)]
        beta_lo: f64,
        #[arg(long, allow_hyphen_values = true)]
        beta_hi: f64,
        #[arg(long, value_enum, default_value = "cumulative")]
        shortfall_kind: ShortfallArg,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::EstimateUpper(_) => "estimate-upper",
            Command::EstimateLower(_) => "estimate-lower",
            Command::EstimateBenchmark(_) => "estimate-benchmark",
            Command::SharpRd { .. } => "sharp-rd",
            Command::VerifyEquivalence { .. } => "verify-equivalence",
            Command::Spillover { .. } => "spillover",
            Command::Simulate(_) => "simulate",
            Command::Balance { .. } => "balance",
            Command::PlotData { .. } => "plot-data",
            Command::VarDecomp { .. } => "var-decomp",
            Command::Counterfactual { .. } => "counterfactual",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Input(#[from] IoError),
    #[error(transparent)]
    Computation(#[from] RdaError),
    #[error("writing {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Input(_) => "input",
            CliError::Computation(_) => "computation",
            CliError::Output { .. } => "output",
        }
    }

    fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: String,
        }
        #[derive(Serialize)]
        struct Wrapper<'a> {
            error: Body<'a>,
        }
        serde_json::to_string(&Wrapper {
            error: Body {
                kind: self.kind(),
                message: self.to_string(),
            },
        })
        .unwrap_or_else(|_| self.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n as usize).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(CliError::Usage(e.to_string())),
        },
        None => execute(&cli),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

/// Collects outputs in memory; files and the manifest are written at the end.
struct Run {
    out: PathBuf,
    manifest: Manifest,
    files: Vec<(String, Vec<u8>)>,
}

impl Run {
    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.manifest.add_input(role, path).map_err(|source| {
            CliError::Input(IoError::Open {
                path: path.to_path_buf(),
                source,
            })
        })
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut bytes = serde_json::to_vec_pretty(value).expect("results serialize");
        bytes.push(b'\n');
        self.files.push((name.to_string(), bytes));
    }

    fn raw(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    /// Writes every file plus `manifest.json` and echoes the first file to stdout.
    fn finish(mut self) -> Result<()> {
        let write_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| CliError::Output { path, source }
        };
        std::fs::create_dir_all(&self.out).map_err(write_err(&self.out))?;
        for (name, bytes) in &self.files {
            let path = self.out.join(name);
            std::fs::write(&path, bytes).map_err(write_err(&path))?;
            self.manifest.add_output(name, bytes);
        }
        let mut m = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        m.push(b'\n');
        let path = self.out.join("manifest.json");
        std::fs::write(&path, m).map_err(write_err(&path))?;
        if let Some((_, first)) = self.files.first() {
            print!("{}", String::from_utf8_lossy(first));
        }
        Ok(())
    }
}

fn put(s: &mut Settings, key: &str, value: Option<impl ToString>) -> Result<()> {
    if let Some(v) = value {
        s.set(key, v.to_string())?;
    }
    Ok(())
}

fn apply_design(s: &mut Settings, d: &DesignArgs) -> Result<()> {
    put(s, "bandwidth", d.bandwidth)?;
    put(s, "kernel", d.kernel.as_ref())?;
    put(s, "control_set", d.controls.as_ref())?;
    put(s, "cutoff_rule", d.cutoff.as_ref())?;
    put(s, "tie_policy", d.ties.as_ref())?;
    put(s, "treatment_basis", d.treatment_basis.as_ref())?;
    put(s, "lower_weighting", d.lower_weighting.as_ref())?;
    if !d.fe.is_empty() {
        s.set("fe_dimensions", d.fe.join(","))?;
    }
    if !d.filter.is_empty() {
        s.set("filters", d.filter.join(";"))?;
    }
    Ok(())
}

fn apply_data(s: &mut Settings, d: &DataArgs) -> Result<()> {
    put(s, "max_total_importance", d.max_total_importance)
}

fn apply_simulate(s: &mut Settings, a: &SimulateArgs) -> Result<()> {
    put(s, "outcome_kind", a.outcome.as_ref())?;
    put(s, "n_replications", a.reps)?;
    put(s, "n_bootstrap", a.n_bootstrap)?;
    put(s, "level", a.level)?;
    put(s, "h_grid", a.h_grid.as_ref())?;
    put(s, "estimators", a.estimators.as_ref())?;
    put(s, "n_units", a.n_units)?;
    put(s, "n_subunits_per_unit", a.subunits_per_unit)?;
    put(s, "max_subunits_per_unit", a.max_subunits_per_unit)?;
    put(s, "rho", a.rho)?;
    put(s, "noise_sd", a.noise_sd)?;
    put(s, "importance_scheme", a.importance.as_ref())
}

fn settings(cli: &Cli) -> Result<Settings> {
    let mut s = match &cli.config {
        Some(p) => Settings::from_file(p)?,
        None => Settings::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        s.set(k.trim(), v.trim())?;
    }
    put(&mut s, "seed", cli.seed)?;
    match &cli.command {
        Command::EstimateUpper(a) | Command::EstimateLower(a) | Command::EstimateBenchmark(a) => {
            apply_data(&mut s, &a.data)?;
            apply_design(&mut s, &a.design)?;
        }
        Command::SharpRd { design, .. } => apply_design(&mut s, design)?,
        Command::VerifyEquivalence { data, design, tolerance } => {
            apply_data(&mut s, data)?;
            apply_design(&mut s, design)?;
            put(&mut s, "tolerance", *tolerance)?;
        }
        Command::Spillover { data, design, .. } | Command::Balance { data, design, .. } => {
            apply_data(&mut s, data)?;
            apply_design(&mut s, design)?;
        }
        Command::PlotData { data, design, bins } => {
            apply_data(&mut s, data)?;
            apply_design(&mut s, design)?;
            put(&mut s, "bins_per_side", *bins)?;
        }
        Command::Simulate(a) => apply_simulate(&mut s, a)?,
        Command::VarDecomp { .. } | Command::Counterfactual { .. } => {}
    }
    Ok(s)
}

fn load(run: &mut Run, s: &Settings, data: &DataArgs, edges: Option<&Path>) -> Result<(InputBundle, Dataset)> {
    run.input("units", &data.units)?;
    run.input("subunits", &data.subunits)?;
    if let Some(e) = edges {
        run.input("edges", e)?;
    }
    let paths = BundlePaths {
        units: data.units.clone(),
        subunits: data.subunits.clone(),
        edges: edges.map(Path::to_path_buf),
    };
    let opts = LoadOptions {
        max_total_importance: s.get("max_total_importance")?,
    };
    let bundle = io::load_bundle(&paths, &opts)?;
    let ds = bundle.dataset()?;
    Ok((bundle, ds))
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    estimate: &'a EstimateResult,
    input: Option<&'a ValidationReport>,
}

fn estimate_json(run: &mut Run, est: &EstimateResult, report: Option<&ValidationReport>) {
    run.json(
        "result.json",
        &EstimateOutput {
            estimate: est,
            input: report,
        },
    );
}

fn execute(cli: &Cli) -> Result<()> {
    let s = settings(cli)?;
    let seed = s.get::<u64>("seed")?;
    let mut run = Run {
        out: cli.out.clone(),
        manifest: Manifest::new(cli.command.name(), seed, s.echo().clone()),
        files: Vec::new(),
    };
    if let Some(p) = &cli.config {
        run.input("config", p)?;
    }

    match &cli.command {
        Command::EstimateUpper(a) | Command::EstimateLower(a) | Command::EstimateBenchmark(a) => {
            let cfg = s.design_config()?;
            let (bundle, ds) = load(&mut run, &s, &a.data, None)?;
            let est = match &cli.command {
                Command::EstimateUpper(_) => estimate_upper(&ds, &cfg)?,
                Command::EstimateLower(_) => estimate_lower(&ds, &cfg)?,
                _ => estimate_benchmark(&ds, &cfg)?,
            };
            estimate_json(&mut run, &est, Some(&bundle.report));
        }
        Command::SharpRd { subunits, .. } => {
            let cfg = s.design_config()?;
            run.input("subunits", subunits)?;
            let obs = io::load_subunit_outcomes(subunits)?;
            let est = estimate_sharp_rd(&obs, &cfg)?;
            estimate_json(&mut run, &est, None);
        }
        Command::VerifyEquivalence { data, .. } => {
            let cfg = s.design_config()?;
            let tol = s.get("tolerance")?.unwrap_or(DEFAULT_TOLERANCE);
            let (_, ds) = load(&mut run, &s, data, None)?;
            let report = verify_equivalence(&ds, &cfg, tol)?;
            run.json("equivalence.json", &report);
        }
        Command::Spillover { mode, data, edges, .. } => {
            let cfg = s.design_config()?;
            let (bundle, ds) = load(&mut run, &s, data, Some(edges))?;
            let graph = SpilloverGraph::new(&ds, bundle.edges.as_deref().unwrap_or_default())?;
            let est = match mode {
                SpilloverMode::Bilateral => estimate_spillover_bilateral(&graph, &ds, &cfg)?,
                SpilloverMode::Collapsed => estimate_spillover_collapsed(&graph, &ds, &cfg)?,
                SpilloverMode::Upper => estimate_spillover_upper(&graph, &ds, &cfg)?,
            };
            estimate_json(&mut run, &est, Some(&bundle.report));
        }
        Command::Simulate(_) => {
            let spec = s.dgp_spec()?;
            let mut opts = McOptions {
                seed: spec.seed,
                ..McOptions::default()
            };
            if let Some(list) = s.string_list("estimators") {
                opts.estimators = list
                    .iter()
                    .map(|e| e.parse::<McEstimator>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| ConfigError::Value {
                        key: "estimators".into(),
                        message: e.to_string(),
                    })?;
            }
            if let Some(h) = s.h_grid()? {
                opts.h_grid = h;
            }
            if let Some(n) = s.get("n_replications")? {
                opts.n_replications = n;
            }
            if let Some(n) = s.get("n_bootstrap")? {
                opts.n_bootstrap = n;
            }
            if let Some(l) = s.get("level")? {
                opts.level = l;
            }
            let summary = run_monte_carlo(&spec, &opts)?;
            let mut csv = Vec::new();
            summary.write_csv(&mut csv).map_err(|source| CliError::Output {
                path: "summary.csv".into(),
                source,
            })?;
            run.raw("summary.csv", csv);
            run.json("summary.json", &summary);
        }
        Command::Balance {
            data,
            target,
            covariates,
            f_kind,
            ..
        } => {
            let cfg = s.design_config()?;
            let (_, ds) = load(&mut run, &s, data, None)?;
            let target = match target {
                TargetArg::Treatment => BalanceTarget::Treatment,
                TargetArg::Instrument => BalanceTarget::Instrument,
            };
            let f_kind = match f_kind {
                FKindArg::Robust => FKind::RobustWald,
                FKindArg::Classical => FKind::Classical,
            };
            let report = balance_test(&ds, target, covariates, cfg.control_set, &cfg, f_kind)?;
            run.json("balance.json", &report);
        }
        Command::PlotData { data, .. } => {
            let cfg = s.design_config()?;
            let bins = s.get("bins_per_side")?.unwrap_or(DEFAULT_BINS_PER_SIDE);
            let (_, ds) = load(&mut run, &s, data, None)?;
            let rows = stack_lower(&ds, &cfg)?;
            let plot = rd_plot_data(&PlotPoint::from_stack(&ds, &rows), bins, &cfg)?;
            run.json("plot.json", &plot);
            let mut w = csv::Writer::from_writer(Vec::new());
            for b in &plot.bins {
                w.serialize(b).map_err(|e| IoError::Csv {
                    file: "bins.csv".into(),
                    source: e,
                })?;
            }
            run.raw("bins.csv", w.into_inner().expect("in-memory writer"));
        }
        Command::VarDecomp { records } => {
            run.input("records", records)?;
            let recs = io::load_variance_records(records)?;
            run.json("variance.json", &variance_decomposition(&recs)?);
        }
        Command::Counterfactual {
            series,
            beta,
            beta_lo,
            beta_hi,
            shortfall_kind,
        } => {
            run.input("series", series)?;
            let rows = io::load_series(series)?;
            let kind = match shortfall_kind {
                ShortfallArg::Cumulative => ShortfallKind::Cumulative,
                ShortfallArg::PerPeriod => ShortfallKind::PerPeriod,
            };
            let actual: Vec<f64> = rows.iter().map(|r| r.actual).collect();
            let short: Vec<f64> = rows.iter().map(|r| r.shortfall).collect();
            let path = counterfactual_path(&actual, &short, kind, *beta, (*beta_lo, *beta_hi))?;
            run.json("counterfactual.json", &path);
            #[derive(Serialize)]
            struct Row<'a> {
                period: &'a str,
                actual: f64,
                counterfactual: f64,
                ci_lo: f64,
                ci_hi: f64,
                cumulative_shortfall: f64,
            }
            let mut w = csv::Writer::from_writer(Vec::new());
            for (r, p) in rows.iter().zip(&path.points) {
                w.serialize(Row {
                    period: &r.period,
                    actual: p.actual,
                    counterfactual: p.counterfactual,
                    ci_lo: p.ci_lo,
                    ci_hi: p.ci_hi,
                    cumulative_shortfall: p.cumulative_shortfall,
                })
                .map_err(|e| IoError::Csv {
                    file: "counterfactual.csv".into(),
                    source: e,
                })?;
            }
            run.raw("counterfactual.csv", w.into_inner().expect("in-memory writer"));
        }
    }
    run.finish()
}
