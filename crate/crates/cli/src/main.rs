//! `mlenkf` command-line driver.
//!
//! Exit codes: 0 on success, 2 on invalid configuration or usage, 1 on any
//! other failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use mlenkf_core::config::RunConfig;
use mlenkf_core::enkf::run_enkf;
use mlenkf_core::experiment::{convergence_study, Method};
use mlenkf_core::io::{self, InputFile, Manifest};
use mlenkf_core::mlenkf::{run_mlenkf, RunOptions};
use mlenkf_core::noise::derive_run_id;
use mlenkf_core::observation::generate_truth_and_observations;
use mlenkf_core::{EpsilonPlan, ForwardModel};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "MLENKF_OUT";
const SIMULATE_TAG: u64 = 0x73696d;
const FILTER_TAG: u64 = 0x66696c;

#[derive(Parser)]
#[command(name = "mlenkf", version, about = "Multilevel ensemble Kalman filtering for the stochastic heat equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a truth path and its observations.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the single-level ensemble Kalman filter on stored observations.
    Enkf(FilterArgs),
    /// Run the multilevel ensemble Kalman filter on stored observations.
    Mlenkf(FilterArgs),
    /// Epsilon sweep of both filters against the exact Kalman filter.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; results do not depend on it.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Re-run the command recorded in a manifest and check its outputs.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct FilterArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    obs: PathBuf,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.chain().any(|c| {
                c.downcast_ref::<mlenkf_core::Error>().is_some_and(mlenkf_core::Error::is_config_error)
            });
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Simulate { config, seed, steps, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = steps {
                cfg.steps = n;
            }
            let out = output_dir(out, &cfg, "simulate")?;
            simulate(&cfg, &out)
        }
        Command::Enkf(args) => filter_command(Method::Enkf, args),
        Command::Mlenkf(args) => filter_command(Method::Mlenkf, args),
        Command::Study { config, out, jobs } => {
            let cfg = load_config(&config)?;
            let out = output_dir(out, &cfg, "study")?;
            study(&cfg, &out, jobs)
        }
        Command::Replay { manifest, out } => replay(&manifest, out),
    }
}

fn filter_command(method: Method, args: FilterArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = output_dir(args.out, &cfg, method.name())?;
    run_filter(method, &cfg, &args.obs, args.epsilon, &out)
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let cfg = RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
    cfg.validate().context("validating config")?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

/// `--out`, else the config's directory, else `$MLENKF_OUT/<command>`,
/// else `./mlenkf-out/<command>`.
fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig, command: &str) -> anyhow::Result<PathBuf> {
    let dir = flag.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| {
        std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("mlenkf-out")).join(command)
    });
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_config(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    io::write_text(&out.join("config.json"), &(cfg.canonical().to_json()? + "\n"))?;
    Ok(())
}

fn simulate(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let setup = cfg.setup();
    let level = cfg.hierarchy.max_level;
    let model = setup.build_model(level)?;
    let obs = setup.build_observation(level)?;
    let run_id = derive_run_id(cfg.seed, &[SIMULATE_TAG]);
    let truth = generate_truth_and_observations(&model, &obs, cfg.steps, level, run_id)?;
    io::write_observations(&out.join("observations.csv"), &truth.observations, obs.m())?;
    write_config(cfg, out)?;
    let mut manifest = Manifest::new("simulate", cfg)?;
    manifest.record_outputs(out, &["observations.csv", "config.json"])?;
    manifest.save(&out.join("manifest.json"))?;
    println!("wrote {} observations at level {level} to {}", truth.observations.len(), out.display());
    Ok(())
}

fn describe_plan(plan: &EpsilonPlan) -> String {
    format!(
        "plan: epsilon={} L={} regime={} M={:?} enkf_M={}",
        plan.epsilon,
        plan.max_level,
        serde_json::to_value(plan.regime).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
        plan.sizes,
        plan.enkf_m
    )
}

fn run_filter(method: Method, cfg: &RunConfig, obs_path: &Path, epsilon: Option<f64>, out: &Path) -> anyhow::Result<()> {
    let plan = cfg.plan(epsilon)?;
    println!("{}", describe_plan(&plan));
    let setup = cfg.setup();
    let level = cfg.hierarchy.max_level;
    let model = setup.build_model(level)?;
    let obs = setup.build_observation(level)?;
    let phi = setup.observable.build(model.hierarchy().modes(level))?;
    let observations = io::read_observations(obs_path).with_context(|| format!("reading {}", obs_path.display()))?;
    if let Some(r) = observations.iter().find(|r| r.y.len() != obs.m()) {
        bail!(mlenkf_core::Error::InvalidConfig(format!(
            "observation file has {} columns per row but the config observes m = {}",
            r.y.len(),
            obs.m()
        )));
    }
    let run_id = derive_run_id(cfg.seed, &[FILTER_TAG, method as u64]);
    let records = match method {
        Method::Enkf => run_enkf(&model, &obs, plan.max_level, plan.enkf_m, run_id, &observations, &phi)?.records,
        Method::Mlenkf => {
            run_mlenkf(&model, &obs, &plan.sizes, run_id, &observations, &phi, RunOptions::default())?.records
        }
    };
    let name = format!("estimates_{}.csv", method.name());
    io::write_estimates(&out.join(&name), &records)?;
    write_config(cfg, out)?;
    let mut manifest = Manifest::new(method.name(), cfg)?;
    if let Some(e) = epsilon {
        manifest.overrides.insert("epsilon".into(), io::fmt_f64(e));
    }
    let obs_abs = std::fs::canonicalize(obs_path).unwrap_or_else(|_| obs_path.to_path_buf());
    manifest.inputs.push(InputFile { sha256: io::sha256_file(obs_path)?, path: obs_abs });
    manifest.record_outputs(out, &[name.as_str(), "config.json"])?;
    manifest.save(&out.join("manifest.json"))?;
    let last = records.last().expect("initial record");
    println!("final estimate {} after {} steps, cost {}", last.estimate, last.n, last.cost_cum);
    Ok(())
}

fn study(cfg: &RunConfig, out: &Path, jobs: Option<usize>) -> anyhow::Result<()> {
    let report = convergence_study(&cfg.setup(), &cfg.study, cfg.seed, jobs)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    io::write_study(&out.join("study.csv"), &report)?;
    io::write_study_steps(&out.join("study_steps.csv"), &report)?;
    io::write_text(&out.join("slopes.txt"), &io::slope_report(&report))?;
    io::write_timings(&out.join("timings.csv"), &report)?;
    write_config(cfg, out)?;
    let mut manifest = Manifest::new("study", cfg)?;
    manifest.record_outputs(out, &["study.csv", "study_steps.csv", "slopes.txt", "config.json"])?;
    manifest.save(&out.join("manifest.json"))?;
    print!("{}", io::slope_report(&report));
    Ok(())
}

fn replay(path: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let manifest = Manifest::load(path).with_context(|| format!("reading manifest {}", path.display()))?;
    manifest.verify_config_hash()?;
    let cfg = manifest.config.clone();
    cfg.validate().context("validating manifest config")?;
    let out = output_dir(out, &cfg, &format!("replay-{}", manifest.command))?;
    match manifest.command.as_str() {
        "simulate" => simulate(&cfg, &out)?,
        "study" => study(&cfg, &out, None)?,
        "enkf" | "mlenkf" => {
            let input = manifest.inputs.first().ok_or_else(|| anyhow!("manifest records no observation input"))?;
            let hash = io::sha256_file(&input.path)?;
            if hash != input.sha256 {
                bail!("observation input {} changed since the manifest was written", input.path.display());
            }
            let epsilon = manifest
                .overrides
                .get("epsilon")
                .map(|e| e.parse::<f64>())
                .transpose()
                .context("epsilon override in manifest")?;
            let method = if manifest.command == "enkf" { Method::Enkf } else { Method::Mlenkf };
            run_filter(method, &cfg, &input.path, epsilon, &out)?;
        }
        other => bail!(mlenkf_core::Error::InvalidConfig(format!("unknown manifest command {other:?}"))),
    }
    let replayed = Manifest::load(&out.join("manifest.json"))?;
    let mismatched: Vec<&String> =
        manifest.outputs.iter().filter(|(k, v)| replayed.outputs.get(*k) != Some(v)).map(|(k, _)| k).collect();
    if !mismatched.is_empty() {
        bail!("replay differs from the manifest in {mismatched:?}");
    }
    println!("replay reproduced {} outputs byte for byte", manifest.outputs.len());
    Ok(())
}
