//! `nlmesel`: fit, select, simulate and Monte Carlo selection studies.

mod manifest;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nlmesel_core::doc::{ModelDoc, SearchDoc, StudyDoc, ThetaDoc};
use nlmesel_core::sim::{mc_selection_study, simulate_dataset, CovariateDistribution, SimDesign};
use nlmesel_core::selection::stepwise_select;
use nlmesel_core::{criterion, fit_ml, CriterionKind, Dataset, FitOptions, FitResult, ModelRegistry, ModelSpec};
use serde::Serialize;
use thiserror::Error;

use manifest::ManifestBuilder;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] nlmesel_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use nlmesel_core::Error as E;
        match self {
            CliError::Core(
                E::NonFiniteObjective
                | E::MaxIterations { .. }
                | E::InnerNonConvergence { .. }
                | E::NonFiniteLikelihood { .. }
                | E::DegenerateEigenvalues { .. }
                | E::NonPositiveVariance(_)
                | E::Domain { .. },
            ) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "nlmesel", version, about = "Nonlinear mixed-effects fitting and model selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Shared {
    /// Master seed for every random choice (restarts, simulation).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; outputs do not depend on this.
    #[arg(long)]
    jobs: Option<usize>,
    /// Gauss-Hermite nodes per random effect; 1 is the Laplace approximation.
    #[arg(long)]
    nodes: Option<usize>,
    /// bic_h, bic_v, bic_joint, aic, bic_n or bic_ntot.
    #[arg(long)]
    criterion: Option<CriterionKind>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Shared {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one model by maximum likelihood and report all criteria.
    Fit {
        /// Long-format CSV: id, time, y, regressors, covariates
        #[arg(long)]
        data: PathBuf,
        /// Model TOML
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Stepwise selection of covariates and random-effects structure.
    Select {
        /// Long-format CSV: id, time, y, regressors, covariates
        #[arg(long)]
        data: PathBuf,
        /// Search TOML
        #[arg(long)]
        config: PathBuf,
        /// forward, backward or user.
        #[arg(long)]
        direction: Option<String>,
        /// Try correlation masks on the final diagonal structure.
        #[arg(long)]
        refine_corr: bool,
        #[command(flatten)]
        shared: Shared,
    },
    /// Simulate a dataset from a model and parameter values.
    Simulate {
        /// Model TOML
        #[arg(long)]
        model: PathBuf,
        /// Parameter-value TOML
        #[arg(long)]
        theta: PathBuf,
        /// Number of subjects.
        #[arg(long = "N", alias = "n-subjects")]
        n_subjects: usize,
        /// Comma-separated sampling times.
        #[arg(long, value_delimiter = ',', required = true)]
        times: Vec<f64>,
        #[arg(long, default_value_t = 100.0)]
        dose: f64,
        /// Infusion duration for infusion models.
        #[arg(long, default_value_t = 0.5)]
        infusion: f64,
        /// Normal covariate as `name:mean:sd`; repeatable.
        #[arg(long = "covariate")]
        covariates: Vec<String>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Monte Carlo selection-frequency study.
    Mc {
        /// Study TOML
        #[arg(long)]
        config: PathBuf,
        /// Overrides the replicate count in the study file
        #[arg(long)]
        replicates: Option<usize>,
        #[command(flatten)]
        shared: Shared,
    },
}

fn parse_toml_bytes(bytes: &[u8], path: &Path) -> Result<String, CliError> {
    String::from_utf8(bytes.to_vec()).map_err(|_| CliError::Input(format!("{} is not UTF-8", path.display())))
}

fn read_dataset(m: &mut ManifestBuilder, path: &Path, spec: &ModelSpec) -> Result<Dataset, CliError> {
    let bytes = m.read(path)?;
    let data = Dataset::read_csv(bytes.as_slice(), &spec.structural().regressor_names())?;
    spec.check_dataset(&data)?;
    Ok(data)
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("outputs serialize");
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct CriterionEntry {
    kind: CriterionKind,
    value: f64,
    penalty: f64,
}

#[derive(Serialize)]
struct FitDocument<'a> {
    selected_criterion: CriterionKind,
    loglik: f64,
    converged: bool,
    criteria: Vec<CriterionEntry>,
    fit: &'a FitResult,
}

fn fit_document(fit: &FitResult, kind: CriterionKind) -> Result<FitDocument<'_>, CliError> {
    let criteria = CriterionKind::ALL
        .iter()
        .map(|&k| {
            criterion(fit, k).map(|c| CriterionEntry {
                kind: k,
                value: c.value,
                penalty: c.penalty,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(FitDocument {
        selected_criterion: kind,
        loglik: fit.loglik,
        converged: fit.converged,
        criteria,
        fit,
    })
}

fn record_shared(m: &mut ManifestBuilder, s: &Shared, kind: CriterionKind, nodes: usize) {
    m.flag("criterion", kind);
    m.flag("nodes", nodes);
    m.flag("seed", s.seed());
}

fn cmd_fit(data: &Path, model: &Path, s: &Shared) -> Result<u8, CliError> {
    let mut m = ManifestBuilder::new("fit", s.seed());
    let text = parse_toml_bytes(&m.read(model)?, model)?;
    let doc = ModelDoc::from_toml(&text)?;
    let spec = doc.to_spec(&ModelRegistry::builtin())?;
    let dataset = read_dataset(&mut m, data, &spec)?;
    let kind = s.criterion.unwrap_or(CriterionKind::BicJoint);
    let nodes = s.nodes.unwrap_or(1);
    record_shared(&mut m, s, kind, nodes);
    let opts = FitOptions {
        nodes,
        seed: s.seed(),
        init: doc.init_theta(&spec)?,
        ..FitOptions::default()
    };
    prepare_out(&s.out)?;
    let (fit, code) = match fit_ml(&dataset, &spec, &opts) {
        Ok(f) => (f, 0),
        Err(nlmesel_core::Error::MaxIterations { partial, .. }) => {
            eprintln!("warning: the optimizer did not converge; writing the last iterate");
            (*partial, 2)
        }
        Err(e) => return Err(e.into()),
    };
    write_json(&s.out.join("fit.json"), &fit_document(&fit, kind)?)?;
    m.write(&s.out)?;
    println!("loglik {:.6}  {} {:.6}", fit.loglik, kind, criterion(&fit, kind)?.value);
    Ok(code)
}

fn cmd_select(data: &Path, config: &Path, direction: Option<&str>, refine: bool, s: &Shared) -> Result<u8, CliError> {
    let mut m = ManifestBuilder::new("select", s.seed());
    let text = parse_toml_bytes(&m.read(config)?, config)?;
    let doc = SearchDoc::from_toml(&text)?;
    let (spec, mut opts) = doc.build(&ModelRegistry::builtin(), direction)?;
    let dataset = read_dataset(&mut m, data, &spec)?;
    let kind = match s.criterion {
        Some(k) => k,
        None => doc.criterion()?,
    };
    if let Some(n) = s.nodes {
        opts.fit.nodes = n;
    }
    opts.fit.seed = s.seed();
    opts.refine_correlations |= refine;
    record_shared(&mut m, s, kind, opts.fit.nodes);
    m.flag("direction", direction.unwrap_or(&doc.direction));
    m.flag("refine_corr", opts.refine_correlations);
    prepare_out(&s.out)?;
    let trace = stepwise_select(&dataset, &spec, &doc.pool, kind, &opts)?;
    trace.write_csv(BufWriter::new(File::create(s.out.join("trace.csv"))?))?;
    write_json(&s.out.join("fit.json"), &fit_document(&trace.final_fit, kind)?)?;
    m.write(&s.out)?;
    println!("{}  {} {:.6}", trace.final_summary, kind, trace.final_value);
    Ok(if trace.final_fit.converged { 0 } else { 2 })
}

fn parse_covariate(s: &str) -> Result<CovariateDistribution, CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || CliError::Input(format!("--covariate `{s}`: expected name:mean:sd"));
    if parts.len() != 3 || parts[0].is_empty() {
        return Err(bad());
    }
    Ok(CovariateDistribution {
        name: parts[0].into(),
        mean: parts[1].parse().map_err(|_| bad())?,
        sd: parts[2].parse().map_err(|_| bad())?,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    model: &Path,
    theta: &Path,
    n_subjects: usize,
    times: &[f64],
    dose: f64,
    infusion: f64,
    covariates: &[String],
    s: &Shared,
) -> Result<u8, CliError> {
    let mut m = ManifestBuilder::new("simulate", s.seed());
    let text = parse_toml_bytes(&m.read(model)?, model)?;
    let spec = ModelDoc::from_toml(&text)?.to_spec(&ModelRegistry::builtin())?;
    let text = parse_toml_bytes(&m.read(theta)?, theta)?;
    let th = ThetaDoc::from_toml(&text)?.to_theta(&spec)?;
    let design = SimDesign {
        dose,
        infusion,
        covariates: covariates.iter().map(|c| parse_covariate(c)).collect::<Result<_, _>>()?,
        ..SimDesign::new(n_subjects, times.to_vec(), s.seed())
    };
    m.flag("N", n_subjects);
    m.flag("times", format!("{times:?}"));
    m.flag("dose", dose);
    m.flag("infusion", infusion);
    m.flag("covariates", covariates.join(","));
    m.flag("seed", s.seed());
    let data = simulate_dataset(&spec, &th, &design)?;
    prepare_out(&s.out)?;
    data.write_csv(BufWriter::new(File::create(s.out.join("data.csv"))?))?;
    m.write(&s.out)?;
    println!("{} subjects, {} observations", data.n_subjects(), data.n_total());
    Ok(0)
}

fn cmd_mc(config: &Path, replicates: Option<usize>, s: &Shared) -> Result<u8, CliError> {
    let mut m = ManifestBuilder::new("mc", 0);
    let text = parse_toml_bytes(&m.read(config)?, config)?;
    let doc = StudyDoc::from_toml(&text)?;
    let mut cfg = doc.to_config(&ModelRegistry::builtin())?;
    if let Some(r) = replicates {
        cfg.replicates = r;
    }
    if let Some(k) = s.criterion {
        cfg.criterion = k;
    }
    if let Some(n) = s.nodes {
        cfg.fit.nodes = n;
    }
    if let Some(seed) = s.seed {
        cfg.seed = seed;
    }
    m.set_seed(cfg.seed);
    m.flag("replicates", cfg.replicates);
    m.flag("criterion", cfg.criterion);
    m.flag("nodes", cfg.fit.nodes);
    m.flag("dose", cfg.design.dose);
    prepare_out(&s.out)?;
    let result = mc_selection_study(&cfg)?;
    result.write_frequency_csv(BufWriter::new(File::create(s.out.join("frequencies.csv"))?))?;
    result.write_detail_csv(BufWriter::new(File::create(s.out.join("detail.csv"))?))?;
    m.write(&s.out)?;
    for f in &result.frequencies {
        println!("{:<40} {:>5} {:.3}", f.candidate, f.selected_count, f.frequency);
    }
    println!("{:<40} {:>5}", "<failed>", result.failed);
    Ok(0)
}

fn shared(c: &Command) -> &Shared {
    match c {
        Command::Fit { shared, .. }
        | Command::Select { shared, .. }
        | Command::Simulate { shared, .. }
        | Command::Mc { shared, .. } => shared,
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    if let Some(j) = shared(&cli.command).jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| CliError::Input(format!("--jobs: {e}")))?;
    }
    match &cli.command {
        Command::Fit { data, model, shared } => cmd_fit(data, model, shared),
        Command::Select {
            data,
            config,
            direction,
            refine_corr,
            shared,
        } => cmd_select(data, config, direction.as_deref(), *refine_corr, shared),
        Command::Simulate {
            model,
            theta,
            n_subjects,
            times,
            dose,
            infusion,
            covariates,
            shared,
        } => cmd_simulate(model, theta, *n_subjects, times, *dose, *infusion, covariates, shared),
        Command::Mc {
            config,
            replicates,
            shared,
        } => cmd_mc(config, *replicates, shared),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
