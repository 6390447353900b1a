use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use area_bench::config::{ExperimentConfig, MomentDecl};
use area_bench::experiments::{self, num};
use area_bench::manifest::Manifest;
use area_core::estimation::{estimate_human, Status};
use area_core::lca::{mix_seed, sample_interactions};
use area_core::machine::{backward_y_structured, extract_policy, regularized_reward};
use area_core::qlearning::run_qlearning;
use area_core::structured::StructuredPolicy;
use clap::{Parser, Subcommand};

const CONVERGENCE: &str = include_str!("../configs/convergence.json");
const COMPARISON: &str = include_str!("../configs/comparison.json");

#[derive(Parser)]
#[command(
    name = "area",
    version,
    about = "Human-model estimation and machine-policy optimization experiments"
)]
struct Cli {
    /// Experiment config (JSON). The reproduce commands fall back to the shipped configs.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the human model to interactions sampled under the uniform policy.
    Estimate {
        /// Interactions to sample (default: the config's moment sample size).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Optimal machine policy against the reference human model.
    Optimize,
    /// Run the alternating loop.
    Area {
        /// Also write every iterate's policy.
        #[arg(long)]
        keep_policies: bool,
    },
    /// Sample LCA interactions under the uniform policy.
    Simulate {
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Run the Q-learning baseline.
    Qlearn,
    /// L-series for exact and sampled moments.
    ReproduceConvergence,
    /// AREA against Q-learning with confidence intervals over rounds.
    ReproduceComparison,
    /// Timing and storage over growing horizons.
    BenchScaling {
        #[arg(long, default_value_t = 21)]
        reps: usize,
    },
}

enum Failure {
    Config(anyhow::Error),
    NotConverged(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::NotConverged(msg)) => {
            eprintln!("not converged: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load(cli: &Cli, fallback: Option<&str>) -> Result<ExperimentConfig, Failure> {
    let mut config = match (&cli.config, fallback) {
        (Some(path), _) => ExperimentConfig::load(path),
        (None, Some(text)) => ExperimentConfig::from_json(text),
        (None, None) => Err(anyhow::anyhow!("this command needs --config")),
    }
    .map_err(Failure::Config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let out = &cli.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Estimate { samples } => {
            let config = load(cli, None)?;
            let problem = config.problem().map_err(Failure::Config)?;
            let count = samples.unwrap_or(match config.moments {
                MomentDecl::Exact { reference_samples } => reference_samples,
                MomentDecl::Sampled { per_iteration } => per_iteration,
            });
            let policy = StructuredPolicy::uniform(problem.spec);
            let batch = sample_interactions(
                &policy,
                &config.lca,
                count,
                mix_seed(config.seed, 2),
                "uniform",
            )
            .map_err(anyhow::Error::from)?;
            let mut c = problem.constraints.clone();
            c.set_targets(
                &area_core::lca::empirical_moments(&batch, &c).map_err(anyhow::Error::from)?,
            );
            let opts = area_core::estimation::EstimationOptions {
                record_trace: true,
                ..config.estimation.clone()
            };
            let est = estimate_human(&policy, &c, &opts).map_err(anyhow::Error::from)?;
            std::fs::write(
                out.join("human.json"),
                est.model.to_json().map_err(anyhow::Error::from)?,
            )?;
            area_core::estimation::write_trace_csv(
                &est.trace,
                create(&out.join("estimation.csv"))?,
            )?;
            let mut m = Manifest::new("estimate", Some(&config), config.seed);
            m.artifacts = vec!["human.json".into(), "estimation.csv".into()];
            m.write(out, Some(&config))?;
            println!(
                "status {:?} after {} iterations; max residual {:.3e}; duality gap {:.3e}",
                est.status, est.iterations, est.max_residual, est.duality_gap
            );
            if est.status != Status::Converged {
                return Err(Failure::NotConverged(format!("{:?}", est.status)));
            }
        }
        Command::Optimize => {
            let config = load(cli, None)?;
            let problem = config.problem().map_err(Failure::Config)?;
            let samples = match config.moments {
                MomentDecl::Exact { reference_samples } => reference_samples,
                MomentDecl::Sampled { .. } => experiments::DEFAULT_REFERENCE_SAMPLES,
            };
            let human = experiments::reference_model(&config, &problem, samples)?;
            let y = backward_y_structured(&human, &problem.reward, config.gamma)
                .map_err(anyhow::Error::from)?;
            let policy = extract_policy(&y)
                .map_err(anyhow::Error::from)?
                .into_structured()
                .context("structured values gave a dense policy")?;
            let value = regularized_reward(&human, &policy, &problem.reward, config.gamma)
                .map_err(anyhow::Error::from)?;
            std::fs::write(
                out.join("policy.json"),
                policy.to_json().map_err(anyhow::Error::from)?,
            )?;
            std::fs::write(
                out.join("human.json"),
                human.to_json().map_err(anyhow::Error::from)?,
            )?;
            let mut m = Manifest::new("optimize", Some(&config), config.seed);
            m.artifacts = vec!["policy.json".into(), "human.json".into()];
            m.write(out, Some(&config))?;
            println!(
                "log partition {:.6}; entropy {:.6}; expected reward {:.6}",
                y.log_partition, value.machine_entropy, value.expected_reward
            );
        }
        Command::Area { keep_policies } => {
            let config = load(cli, None)?;
            let trace = experiments::area_run(&config, *keep_policies)?;
            trace.write_csv(create(&out.join("area.csv"))?)?;
            let mut artifacts = vec!["area.csv".to_string(), "policy.json".to_string()];
            std::fs::write(
                out.join("policy.json"),
                trace
                    .final_policy()
                    .to_json()
                    .map_err(anyhow::Error::from)?,
            )?;
            if *keep_policies {
                for (i, p) in trace.policies.iter().enumerate() {
                    let name = format!("policy_{i}.json");
                    std::fs::write(out.join(&name), p.to_json().map_err(anyhow::Error::from)?)?;
                    artifacts.push(name);
                }
            }
            let mut m = Manifest::new("area", Some(&config), config.seed);
            m.artifacts = artifacts;
            m.write(out, Some(&config))?;
            match trace.converged_at {
                Some(n) => println!("converged at iteration {n}"),
                None => println!("no fixed point within {} iterations", trace.records.len()),
            }
        }
        Command::Simulate { count } => {
            let config = load(cli, None)?;
            let policy = StructuredPolicy::uniform(config.spec);
            let batch = sample_interactions(&policy, &config.lca, *count, config.seed, "uniform")
                .map_err(anyhow::Error::from)?;
            batch.write_csv(create(&out.join("samples.csv"))?)?;
            let mut m = Manifest::new("simulate", Some(&config), config.seed);
            m.artifacts = vec!["samples.csv".into()];
            m.write(out, Some(&config))?;
        }
        Command::Qlearn => {
            let config = load(cli, Some(COMPARISON))?;
            let problem = config.problem().map_err(Failure::Config)?;
            let mut artifacts = Vec::new();
            for round in 0..config.rounds {
                let trace = run_qlearning(
                    problem.spec,
                    &problem.reward,
                    &config.lca,
                    &config.qlearning.params,
                    config.qlearning.episodes,
                    mix_seed(config.seed, round as u64),
                )
                .map_err(|e| Failure::Config(e.into()))?;
                let name = format!("qlearn_round{round}.csv");
                trace.write_csv(create(&out.join(&name))?)?;
                artifacts.push(name);
            }
            let mut m = Manifest::new("qlearn", Some(&config), config.seed);
            m.artifacts = artifacts;
            m.write(out, Some(&config))?;
        }
        Command::ReproduceConvergence => {
            let config = load(cli, Some(CONVERGENCE))?;
            let result = experiments::reproduce_convergence(&config)?;
            experiments::write_rows(
                create(&out.join("convergence.csv"))?,
                &["series", "seed", "iteration", "L", "policy_delta"],
                result.rows.iter().map(|r| {
                    vec![
                        r.series.clone(),
                        r.seed.to_string(),
                        r.iteration.to_string(),
                        num(r.l),
                        num(r.policy_delta),
                    ]
                }),
            )?;
            experiments::write_rows(
                create(&out.join("convergence_summary.csv"))?,
                &[
                    "series",
                    "mean_abs_delta",
                    "late_std",
                    "converged_by",
                    "monotone",
                ],
                result.summary.iter().map(|s| {
                    vec![
                        s.series.clone(),
                        num(s.mean_abs_delta),
                        num(s.late_std),
                        s.converged_by.map_or(String::new(), |n| n.to_string()),
                        s.monotone.to_string(),
                    ]
                }),
            )?;
            let mut m = Manifest::new("reproduce-convergence", Some(&config), config.seed);
            m.artifacts = vec!["convergence.csv".into(), "convergence_summary.csv".into()];
            m.write(out, Some(&config))?;
            for s in &result.summary {
                println!(
                    "{:>8}  mean |dL| {:.4e}  late std {:.4e}  converged by {:?}",
                    s.series, s.mean_abs_delta, s.late_std, s.converged_by
                );
            }
        }
        Command::ReproduceComparison => {
            let config = load(cli, Some(COMPARISON))?;
            let rows = experiments::reproduce_comparison(&config)?;
            experiments::write_rows(
                create(&out.join("comparison.csv"))?,
                &[
                    "samples_observed",
                    "method",
                    "avg_reward",
                    "entropy",
                    "ci90_low",
                    "ci90_high",
                    "entropy_ci90_low",
                    "entropy_ci90_high",
                ],
                rows.iter().map(|r| {
                    vec![
                        r.samples_observed.to_string(),
                        r.method.clone(),
                        num(r.avg_reward),
                        num(r.entropy),
                        num(r.ci90_low),
                        num(r.ci90_high),
                        num(r.entropy_ci90_low),
                        num(r.entropy_ci90_high),
                    ]
                }),
            )?;
            let mut m = Manifest::new("reproduce-comparison", Some(&config), config.seed);
            m.artifacts = vec!["comparison.csv".into()];
            m.write(out, Some(&config))?;
            for r in rows.iter().rev().take(2) {
                println!(
                    "{:>9} @ {:>4}: reward {:.3} [{:.3}, {:.3}]  entropy {:.3}",
                    r.method, r.samples_observed, r.avg_reward, r.ci90_low, r.ci90_high, r.entropy
                );
            }
        }
        Command::BenchScaling { reps } => {
            let result = experiments::bench_scaling(*reps)?;
            experiments::write_rows(
                create(&out.join("scaling.csv"))?,
                &[
                    "features",
                    "T",
                    "dual_update_ms",
                    "machine_opt_ms",
                    "peak_model_entries",
                ],
                result.rows.iter().map(|r| {
                    vec![
                        r.features.clone(),
                        r.horizon.to_string(),
                        num(r.dual_update_ms),
                        num(r.machine_opt_ms),
                        r.peak_model_entries.to_string(),
                    ]
                }),
            )?;
            let mut m = Manifest::new("bench-scaling", None, cli.seed.unwrap_or(0));
            m.artifacts = vec!["scaling.csv".into()];
            m.write(out, None)?;
            for (name, e) in &result.exponents {
                println!("{name}: dual-update time exponent {e:.3}");
            }
            println!("dense path at T=10, 3x3 refused: {}", result.dense_refused);
        }
    }
    Ok(())
}
