//! Batch CLI for weighted-scores regression: `fit`, `select`, `simulate`.
//!
//! Exit codes: 0 on success, 2 on configuration/parse errors, 3 on
//! numerical failures. The worker-thread count can be capped with the
//! `WSCORES_WORKERS` environment variable.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use wscores::cl1::{fit_cl1, FitOptions};
use wscores::corr::{CorrelationModel, CorrelationStructure};
use wscores::error::{Error, Result};
use wscores::godambe::{select, Candidate};
use wscores::io::{parse_input, render_selection, write_jsonl, FitRecord};
use wscores::margins::MarginFamily;
use wscores::sim::{
    builtin_design, run_structure_study, run_variable_study, variable_subsets, CovariateSpec,
    SimDesign, StudyTable,
};
use wscores::weights::solve_weighted_scores;

#[derive(Parser)]
#[command(
    name = "wscores",
    version,
    about = "Weighted-scores regression and composite-likelihood model selection for clustered discrete data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a marginal regression with the weighted-scores method.
    Fit(FitArgs),
    /// Rank correlation structures or covariate subsets by CL1AIC/CL1BIC.
    Select(SelectArgs),
    /// Run a selection-frequency simulation study.
    Simulate(SimArgs),
}

#[derive(Args)]
struct CommonData {
    /// Input table (csv with cluster, occasion, y columns).
    #[arg(long)]
    data: PathBuf,
    /// Margin family: poisson, logit, or probit.
    #[arg(long)]
    family: String,
    /// Comma-separated covariate column names (default: all).
    #[arg(long)]
    covariates: Option<String>,
    /// Do not prepend an intercept column.
    #[arg(long)]
    no_intercept: bool,
}

#[derive(Args)]
struct SolverArgs {
    /// Stage-1 score tolerance.
    #[arg(long, default_value_t = 1e-8)]
    tol_stage1: f64,
    /// Stage-2 gradient tolerance (unconstrained scale).
    #[arg(long, default_value_t = 1e-6)]
    tol_stage2: f64,
    /// Weighted-scores score tolerance.
    #[arg(long, default_value_t = 1e-8)]
    tol_ws: f64,
    /// Poisson support truncation tail mass.
    #[arg(long, default_value_t = 1e-9)]
    poisson_tail: f64,
    /// Seed for randomized integration.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SolverArgs {
    fn options(&self) -> Result<FitOptions> {
        for (name, v) in [
            ("tol-stage1", self.tol_stage1),
            ("tol-stage2", self.tol_stage2),
            ("tol-ws", self.tol_ws),
            ("poisson-tail", self.poisson_tail),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(FitOptions {
            tol_stage1: self.tol_stage1,
            tol_stage2: self.tol_stage2,
            tol_ws: self.tol_ws,
            poisson_tail: self.poisson_tail,
            seed: self.seed,
            ..FitOptions::default()
        })
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: CommonData,
    /// Working correlation structure: ind, exch, ar1, or unstr.
    #[arg(long, default_value = "exch")]
    structure: String,
    /// Keep working weights frozen at the stage-1 estimates.
    #[arg(long)]
    frozen_weights: bool,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output path prefix (writes PREFIX.txt and PREFIX.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    data: CommonData,
    /// Candidate structures, comma separated (structure selection mode).
    #[arg(long)]
    structures: Option<String>,
    /// Candidate covariate subsets "label=col1,col2|label2=..." by column
    /// name (variable selection mode; fitted under --structure).
    #[arg(long)]
    subsets: Option<String>,
    /// Structure used when ranking covariate subsets.
    #[arg(long, default_value = "exch")]
    structure: String,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    /// Built-in design name: table3-ex, table3-ar1, table3-un,
    /// table4-ex, table4-ar1, table4-un.
    #[arg(long)]
    design: Option<String>,
    /// Number of clusters per replicate.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Number of replicates.
    #[arg(long, default_value_t = 200)]
    b: usize,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Explicit design: margin family.
    #[arg(long, default_value = "logit")]
    family: String,
    /// Explicit design: true structure (ind, exch, ar1, unstr).
    #[arg(long)]
    structure: Option<String>,
    /// Explicit design: true dependence parameters, comma separated.
    #[arg(long)]
    rho: Option<String>,
    /// Explicit design: true coefficients, comma separated.
    #[arg(long)]
    beta: Option<String>,
    /// Explicit design: column generators (intercept, bernoulli, time,
    /// uniform), comma separated.
    #[arg(long)]
    gens: Option<String>,
    /// Explicit design: cluster size.
    #[arg(long, default_value_t = 3)]
    d: usize,
    /// Study type: structure or variables (builtin designs choose
    /// automatically).
    #[arg(long)]
    study: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    if let Ok(workers) = std::env::var("WSCORES_WORKERS") {
        if let Ok(w) = workers.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
        }
    }
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Select(args) => cmd_select(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load(common: &CommonData) -> Result<(wscores::data::LongitudinalDataset, Vec<String>)> {
    let family = MarginFamily::parse(&common.family)?;
    let covs: Option<Vec<String>> = common
        .covariates
        .as_ref()
        .map(|s| s.split(',').map(|v| v.trim().to_string()).collect());
    let parsed = parse_input(&common.data, family, covs.as_deref(), !common.no_intercept)?;
    Ok((parsed.data, parsed.covariate_names))
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let (data, names) = load(&args.data)?;
    let structure = CorrelationStructure::parse(&args.structure)?;
    let mut options = args.solver.options()?;
    options.refresh_weights = !args.frozen_weights;
    let cl1 = fit_cl1(&data, structure, &options)?;
    let ws = solve_weighted_scores(&data, &cl1, &options)?;
    let record = FitRecord::new(data.family, &cl1.corr, &names, &cl1, &ws);
    let text = record.render();
    print!("{text}");
    if let Some(prefix) = args.out {
        std::fs::write(prefix.with_extension("txt"), &text)?;
        write_jsonl(&prefix.with_extension("jsonl"), &[record])?;
    }
    Ok(())
}

fn parse_structure_list(spec: &str) -> Result<Vec<CorrelationStructure>> {
    spec.split(',')
        .map(|s| CorrelationStructure::parse(s.trim()))
        .collect()
}

fn cmd_select(args: SelectArgs) -> Result<()> {
    let (data, names) = load(&args.data)?;
    let options = args.solver.options()?;
    let candidates: Vec<Candidate> = match (&args.structures, &args.subsets) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "--structures and --subsets are mutually exclusive".into(),
            ))
        }
        (Some(list), None) => parse_structure_list(list)?
            .into_iter()
            .map(Candidate::structure_only)
            .collect(),
        (None, Some(subsets)) => {
            let structure = CorrelationStructure::parse(&args.structure)?;
            parse_subsets(subsets, &names, structure)?
        }
        (None, None) => parse_structure_list("ind,exch,ar1,unstr")?
            .into_iter()
            .map(Candidate::structure_only)
            .collect(),
    };
    let report = select(&data, &candidates, &options)?;
    let text = render_selection(&report);
    print!("{text}");
    if let Some(prefix) = args.out {
        std::fs::write(prefix.with_extension("txt"), &text)?;
        write_jsonl(&prefix.with_extension("jsonl"), &report.candidates)?;
    }
    Ok(())
}

/// Parse "label=col1,col2|label2=..." into candidates; columns are covariate
/// names, with the intercept column (when present) always retained.
fn parse_subsets(
    spec: &str,
    names: &[String],
    structure: CorrelationStructure,
) -> Result<Vec<Candidate>> {
    let has_intercept = names.first().map(|n| n == "(intercept)").unwrap_or(false);
    spec.split('|')
        .map(|part| {
            let (label, cols) = part.split_once('=').ok_or_else(|| {
                Error::Config(format!("subset '{part}' must look like label=col1,col2"))
            })?;
            let mut columns: Vec<usize> = if has_intercept { vec![0] } else { Vec::new() };
            for name in cols.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let idx = names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::Config(format!("unknown covariate '{name}'")))?;
                columns.push(idx);
            }
            Ok(Candidate {
                label: label.trim().to_string(),
                structure,
                columns: Some(columns),
            })
        })
        .collect()
}

fn parse_f64_list(spec: &str, what: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad {what} entry '{v}'")))
        })
        .collect()
}

fn cmd_simulate(args: SimArgs) -> Result<()> {
    if args.b == 0 {
        return Err(Error::Config("replicate count --b must be at least 1".into()));
    }
    let (design, study): (SimDesign, String) = match &args.design {
        Some(name) => {
            let design = builtin_design(name, args.n, args.b, args.seed)?;
            let study = if name.starts_with("table4") {
                "variables"
            } else {
                "structure"
            };
            (design, args.study.clone().unwrap_or_else(|| study.into()))
        }
        None => {
            let family = MarginFamily::parse(&args.family)?;
            let structure = CorrelationStructure::parse(
                args.structure
                    .as_deref()
                    .ok_or_else(|| Error::Config("explicit design needs --structure".into()))?,
            )?;
            let params = match &args.rho {
                Some(spec) => parse_f64_list(spec, "rho")?,
                None => Vec::new(),
            };
            let beta = parse_f64_list(
                args.beta
                    .as_deref()
                    .ok_or_else(|| Error::Config("explicit design needs --beta".into()))?,
                "beta",
            )?;
            let gens: Vec<CovariateSpec> = args
                .gens
                .as_deref()
                .ok_or_else(|| Error::Config("explicit design needs --gens".into()))?
                .split(',')
                .map(|g| match g.trim() {
                    "intercept" => Ok(CovariateSpec::Intercept),
                    "bernoulli" => Ok(CovariateSpec::Bernoulli),
                    "time" => Ok(CovariateSpec::TimeIndex),
                    "uniform" => Ok(CovariateSpec::Uniform),
                    other => Err(Error::Config(format!("unknown generator '{other}'"))),
                })
                .collect::<Result<_>>()?;
            let corr_true = CorrelationModel::new(structure, params, args.d)?;
            let design = SimDesign {
                name: "custom".into(),
                n: args.n,
                d: args.d,
                family,
                beta_true: beta,
                covariates: gens,
                corr_true,
                replicates: args.b,
                seed: args.seed,
            };
            (
                design,
                args.study.clone().unwrap_or_else(|| "structure".into()),
            )
        }
    };

    let options = FitOptions {
        seed: args.seed,
        ..FitOptions::default()
    };
    let table: StudyTable = match study.as_str() {
        "structure" => run_structure_study(
            &design,
            &[
                CorrelationStructure::Independence,
                CorrelationStructure::Exchangeable,
                CorrelationStructure::Ar1,
                CorrelationStructure::Unstructured,
            ],
            &options,
        )?,
        "variables" => run_variable_study(
            &design,
            &variable_subsets(),
            design.corr_true.structure,
            &options,
        )?,
        other => {
            return Err(Error::Config(format!(
                "unknown study '{other}' (expected structure or variables)"
            )))
        }
    };
    let text = table.render();
    print!("{text}");
    if let Some(prefix) = args.out {
        std::fs::write(prefix.with_extension("txt"), &text)?;
        write_jsonl(&prefix.with_extension("jsonl"), &[table])?;
    }
    Ok(())
}
