//! Command implementations behind the `agro-lab` binary.
//!
//! Exit codes: 0 success, 1 failed verification or verdict, 2 missing input
//! file, 3 invalid config, 4 diverged run.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::env::token_env_binary;
use crate::error::{Error, Result};
use crate::policy::ArPolicy;
use crate::svg::{LineChart, Series};
use crate::tokenred::{self, HarnessRow, TokenEstimator};
use crate::trainer::{self, MetricsRecord, RunConfig, TrainOutcome};
use crate::verify::{self, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_MISSING_FILE: i32 = 2;
pub const EXIT_INVALID_CONFIG: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// Environment variable consulted when `--out` is not given.
pub const OUT_DIR_ENV: &str = "AGRO_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "agro-lab", version, about = "Regularized policy optimization on enumerable environments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Repeat a run for several values of beta.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1")]
        betas: Vec<f64>,
    },
    /// Trace-covariance of the token-level estimators.
    Variance {
        #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// Run property suites: theorems, estimators, tokenred or all.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Off-policy AGRO against the KL-regularized policy gradient with fixed behavior data.
    Figure1 {
        #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses `std::env::args` and runs the command.
pub fn main_from_env() -> i32 {
    let cli = Cli::parse();
    dispatch(cli.command)
}

pub fn dispatch(command: Command) -> i32 {
    match command {
        Command::Run { config, out, seed } => cmd_run(&config, &out, seed),
        Command::Sweep {
            config,
            out,
            seed,
            betas,
        } => cmd_sweep(&config, &out, seed, &betas),
        Command::Variance { out, seed, samples } => cmd_variance(&out, seed, samples),
        Command::Verify { suite } => cmd_verify(&suite),
        Command::Figure1 { out, seed } => cmd_figure1(&out, seed),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(e) if e.kind() == ErrorKind::NotFound => EXIT_MISSING_FILE,
        Error::Config { .. }
        | Error::Json(_)
        | Error::InvalidArgument(_)
        | Error::Shape(_)
        | Error::Unsupported(_)
        | Error::Capacity { .. } => EXIT_INVALID_CONFIG,
        Error::NonFinite { .. } => EXIT_DIVERGED,
        _ => EXIT_FAILED,
    }
}

fn report(err: &Error) -> i32 {
    eprintln!("error: {err}");
    exit_code(err)
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            Error::Io(std::io::Error::new(ErrorKind::NotFound, format!("config file not found: {}", path.display())))
        } else {
            Error::Io(e)
        }
    })?;
    let mut cfg: RunConfig = serde_json::from_str(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_metrics_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Columns: step, kl_to_star, normalized_kl, kl_to_ref, objective_G, loss_L,
/// mean_train_reward, grad_norm. Missing KL values are empty cells.
pub fn write_summary_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn trajectory_chart(title: &str, runs: &[(String, &[MetricsRecord])]) -> LineChart {
    let use_star = runs.iter().all(|(_, rs)| rs.iter().all(|r| r.normalized_kl.is_some()));
    let y_label = if use_star { "normalized KL(pi, pi*)" } else { "KL(pi, pi_ref)" };
    let mut chart = LineChart::new(title, "step", y_label).log_y(use_star);
    for (name, records) in runs {
        let points = records
            .iter()
            .map(|r| (r.step as f64, if use_star { r.normalized_kl.unwrap_or(f64::NAN) } else { r.kl_to_ref }))
            .collect();
        chart.push(Series::new(name.clone(), points));
    }
    chart
}

fn write_run_outputs(out: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("run.json"), cfg.to_json()?)?;
    write_metrics_jsonl(&out.join("metrics.jsonl"), &outcome.records)?;
    write_summary_csv(&out.join("summary.csv"), &outcome.records)?;
    let chart = trajectory_chart(&format!("{} (beta = {})", cfg.estimator, cfg.beta), &[(cfg.estimator.to_string(), &outcome.records)]);
    fs::write(out.join("trajectory.svg"), chart.render())?;
    Ok(())
}

pub fn cmd_run(config: &Path, out: &Path, seed: Option<u64>) -> i32 {
    let result = (|| -> Result<TrainOutcome> {
        let cfg = load_config(config, seed)?;
        let env = cfg.env.build()?;
        let outcome = trainer::train(&cfg, &env)?;
        write_run_outputs(out, &cfg, &outcome)?;
        Ok(outcome)
    })();
    match result {
        Ok(o) if o.diverged => {
            let last = o.last().map(|r| r.step).unwrap_or(0);
            eprintln!("error: run diverged at step {last} (KL to reference above the guard)");
            EXIT_DIVERGED
        }
        Ok(o) => {
            if let Some(r) = o.last() {
                println!(
                    "step {} kl_to_ref {:.6e} objective_G {:.6} loss_L {:.6e}",
                    r.step, r.kl_to_ref, r.objective_g, r.loss_l
                );
            }
            EXIT_OK
        }
        Err(e) => report(&e),
    }
}

/// One `sweep.csv` line; a failed run leaves the metric cells empty.
#[derive(Default, serde::Serialize)]
struct SweepRow<'a> {
    beta: f64,
    error: Option<&'a str>,
    step: Option<usize>,
    kl_to_star: Option<f64>,
    normalized_kl: Option<f64>,
    kl_to_ref: Option<f64>,
    #[serde(rename = "objective_G")]
    objective_g: Option<f64>,
    #[serde(rename = "loss_L")]
    loss_l: Option<f64>,
    mean_train_reward: Option<f64>,
    grad_norm: Option<f64>,
}

impl<'a> SweepRow<'a> {
    fn from_record(beta: f64, r: &MetricsRecord) -> Self {
        Self {
            beta,
            error: None,
            step: Some(r.step),
            kl_to_star: r.kl_to_star,
            normalized_kl: r.normalized_kl,
            kl_to_ref: Some(r.kl_to_ref),
            objective_g: Some(r.objective_g),
            loss_l: Some(r.loss_l),
            mean_train_reward: Some(r.mean_train_reward),
            grad_norm: Some(r.grad_norm),
        }
    }
}

pub fn cmd_sweep(config: &Path, out: &Path, seed: Option<u64>, betas: &[f64]) -> i32 {
    let result = (|| -> Result<bool> {
        let mut cfg = load_config(config, seed)?;
        // Per-beta validity is checked run by run; a sweep may include beta = 0.
        cfg.beta = betas.first().copied().unwrap_or(cfg.beta);
        let entries = trainer::beta_sweep(&cfg, betas)?;
        fs::create_dir_all(out)?;
        let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
        for e in &entries {
            if e.records.is_empty() {
                w.serialize(SweepRow {
                    beta: e.beta,
                    error: e.error.as_deref(),
                    ..Default::default()
                })?;
            }
            for r in &e.records {
                w.serialize(SweepRow::from_record(e.beta, r))?;
            }
        }
        w.flush()?;
        let mut chart = LineChart::new("beta sweep", "step", "KL(pi, pi_ref)");
        for e in &entries {
            chart.push(Series::new(
                format!("beta = {}", e.beta),
                e.records.iter().map(|r| (r.step as f64, r.kl_to_ref)).collect(),
            ));
        }
        fs::write(out.join("sweep.svg"), chart.render())?;
        for e in &entries {
            match (e.last(), &e.error) {
                (_, Some(err)) => println!("beta {:<8} error: {err}", e.beta),
                (Some(r), None) => println!(
                    "beta {:<8} kl_to_ref {:.6e} mean_train_reward {:.4}{}",
                    e.beta,
                    r.kl_to_ref,
                    r.mean_train_reward,
                    if e.diverged { " (diverged)" } else { "" }
                ),
                (None, None) => {}
            }
        }
        Ok(entries.iter().any(|e| e.diverged))
    })();
    match result {
        Ok(true) => EXIT_DIVERGED,
        Ok(false) => EXIT_OK,
        Err(e) => report(&e),
    }
}

pub fn cmd_variance(out: &Path, seed: u64, samples: usize) -> i32 {
    let result = (|| -> Result<()> {
        let env = token_env_binary(4, 1.0)?;
        let reference = env.ref_policy();
        let policy = ArPolicy::standard_perturbed(&env);
        let mut rows = Vec::new();
        for (i, est) in TokenEstimator::ALL.into_iter().enumerate() {
            // Behavior sequences for the off-policy form come from the reference.
            let sampler = (est == TokenEstimator::GOff).then_some(&reference);
            let rec = tokenred::variance_harness(est, &policy, &reference, sampler, samples, seed.wrapping_add(i as u64))?;
            rows.push(HarnessRow::new("perturbed_v2_t4", &rec));
        }
        fs::create_dir_all(out)?;
        tokenred::write_harness_csv(fs::File::create(out.join("variance.csv"))?, &rows)?;
        for row in &rows {
            println!("{:<14} trace_cov {:.6e}", row.estimator, row.trace_cov);
        }
        for (lo, hi) in [
            (TokenEstimator::G2, TokenEstimator::G1),
            (TokenEstimator::G3, TokenEstimator::G2),
            (TokenEstimator::GSqReduced, TokenEstimator::GSqNaive),
        ] {
            let c = tokenred::compare_trace_cov(lo, hi, &policy, &reference, samples, seed)?;
            println!(
                "{lo} < {hi}: z = {:.2} ({} at one-sided 99%)",
                c.z,
                if c.significant_99 { "significant" } else { "not significant" }
            );
        }
        Ok(())
    })();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => report(&e),
    }
}

pub fn cmd_verify(suite: &str) -> i32 {
    let result = suite.parse::<Suite>().and_then(verify::run);
    match result {
        Ok(checks) => {
            print!("{}", verify::render_table(&checks));
            let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            if failed.is_empty() {
                EXIT_OK
            } else {
                eprintln!("failed checks: {}", failed.join("; "));
                EXIT_FAILED
            }
        }
        Err(e) => report(&e),
    }
}

/// Paired runs per environment, checked in under `configs/figure1/`: the
/// canonical bandit and a seeded random one on which the policy-gradient fixed
/// point exists. The policy-gradient runs follow the exact expected direction.
const FIGURE1_SOURCES: [(&str, &str, &str); 2] = [
    (
        "canonical",
        include_str!("../../../configs/figure1/agro_canonical.json"),
        include_str!("../../../configs/figure1/klpg_canonical.json"),
    ),
    (
        "random_s2_2x3",
        include_str!("../../../configs/figure1/agro_random.json"),
        include_str!("../../../configs/figure1/klpg_random.json"),
    ),
];

#[derive(Debug, Clone)]
pub struct Figure1Pair {
    pub label: &'static str,
    pub agro: RunConfig,
    pub klpg: RunConfig,
}

/// The figure-1 configs with `seed` substituted.
pub fn figure1_pairs(seed: u64) -> Result<Vec<Figure1Pair>> {
    FIGURE1_SOURCES
        .iter()
        .map(|&(label, agro, klpg)| {
            let mut agro = RunConfig::from_json(agro)?;
            let mut klpg = RunConfig::from_json(klpg)?;
            agro.seed = seed;
            klpg.seed = seed;
            Ok(Figure1Pair { label, agro, klpg })
        })
        .collect()
}

pub const FIGURE1_AGRO_MAX: f64 = 0.01;
pub const FIGURE1_KLPG_MIN: f64 = 0.1;

#[derive(serde::Serialize)]
struct Figure1Row<'a> {
    env: &'a str,
    estimator: &'a str,
    step: usize,
    normalized_kl: Option<f64>,
    kl_to_star: Option<f64>,
}

pub fn cmd_figure1(out: &Path, seed: u64) -> i32 {
    let result = (|| -> Result<bool> {
        fs::create_dir_all(out)?;
        let mut w = csv::Writer::from_path(out.join("figure1.csv"))?;
        let mut chart = LineChart::new("fixed behavior data, beta = 1", "step", "normalized KL(pi, pi*)").log_y(true);
        let mut all_pass = true;
        for pair in figure1_pairs(seed)? {
            let label = pair.label;
            let env = pair.agro.env.build()?;
            let mut finals = Vec::new();
            for cfg in [&pair.agro, &pair.klpg] {
                let est = cfg.estimator;
                let outcome = trainer::train(cfg, &env)?;
                for r in &outcome.records {
                    w.serialize(Figure1Row {
                        env: label,
                        estimator: est.key(),
                        step: r.step,
                        normalized_kl: r.normalized_kl,
                        kl_to_star: r.kl_to_star,
                    })?;
                }
                chart.push(Series::new(
                    format!("{label} {est}"),
                    outcome.records.iter().map(|r| (r.step as f64, r.normalized_kl.unwrap_or(f64::NAN))).collect(),
                ));
                finals.push(outcome.last().and_then(|r| r.normalized_kl).unwrap_or(f64::NAN));
            }
            let (agro, klpg) = (finals[0], finals[1]);
            let pass = agro < FIGURE1_AGRO_MAX && klpg > FIGURE1_KLPG_MIN;
            all_pass &= pass;
            println!(
                "{label}: off_policy_agro normalized KL {agro:.3e} (< {FIGURE1_AGRO_MAX}), kl_pg_offpolicy {klpg:.3e} (> {FIGURE1_KLPG_MIN}) {}",
                if pass { "PASS" } else { "FAIL" }
            );
        }
        w.flush()?;
        fs::write(out.join("figure1.svg"), chart.render())?;
        println!("verdict: {}", if all_pass { "PASS" } else { "FAIL" });
        Ok(all_pass)
    })();
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILED,
        Err(e) => report(&e),
    }
}
