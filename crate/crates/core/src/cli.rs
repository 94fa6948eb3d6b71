//! Command-line experiment runner.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{ConfigError, ExperimentConfig};
use crate::metrics::{to_csv_string, Summary};
use crate::scheduler::{simulate, Policy, SimError, SimOutput};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "agentcache", version, about = "Workflow-aware KV cache simulator")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Overrides the workload seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`; created if missing.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation and write trace, summary and transfer CSVs.
    Run {
        config: PathBuf,
        /// Overrides `scheduler.policy`.
        #[arg(long)]
        policy: Option<Policy>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the same workload under several policies.
    Compare {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        policies: Vec<Policy>,
        /// Reference for the `speedup` column (default: first policy).
        #[arg(long)]
        baseline: Option<Policy>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare policies at each value of one numeric parameter.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "lru_gpu_only,lru_reactive_hicache,kvflow")]
        policies: Vec<Policy>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Sim(SimError::Config(_)) => EXIT_CONFIG,
            CliError::Sim(_) | CliError::Io(_) => EXIT_RUNTIME,
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load(path: &Path, common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    let out = common.out_dir.clone().unwrap_or_else(|| cfg.output.dir.clone());
    Ok((cfg, out))
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, policy, common } => {
            let (mut cfg, out) = load(&config, &common)?;
            if let Some(p) = policy {
                cfg.scheduler.policy = p;
            }
            let run = run_one(&cfg)?;
            write_run(&out, &run)?;
            print_summary(&run.summary);
        }
        Command::Compare {
            config,
            policies,
            baseline,
            common,
        } => {
            if policies.len() < 2 {
                return Err(CliError::Usage("compare needs at least two policies".into()));
            }
            let (cfg, out) = load(&config, &common)?;
            let baseline = baseline.unwrap_or(policies[0]);
            let runs = compare(&cfg, &policies, baseline)?;
            for run in &runs.runs {
                write_run(&out.join(run.policy.as_str()), run)?;
            }
            write_atomic(&out.join("compare.csv"), runs.table.as_bytes())?;
            print!("{}", runs.table);
        }
        Command::Sweep {
            config,
            axis,
            values,
            policies,
            common,
        } => {
            if values.is_empty() || policies.is_empty() {
                return Err(CliError::Usage("sweep needs at least one value and one policy".into()));
            }
            let (cfg, out) = load(&config, &common)?;
            let table = sweep(&cfg, &axis, &values, &policies)?;
            write_atomic(&out.join("sweep.csv"), table.as_bytes())?;
            print!("{table}");
        }
    }
    Ok(())
}

pub fn run_one(cfg: &ExperimentConfig) -> Result<SimOutput, CliError> {
    let r = cfg.resolve()?;
    Ok(simulate(&r.sim, &r.workload)?)
}

pub struct Comparison {
    pub runs: Vec<SimOutput>,
    /// `compare.csv` contents.
    pub table: String,
}

const SUMMARY_COLUMNS: [&str; 11] = [
    "mean_latency",
    "median_latency",
    "p99_latency",
    "makespan",
    "hit_token_ratio",
    "fixed_hit_rate",
    "recomputed_tokens",
    "loaded_bytes",
    "stall_time",
    "wasted_prefetch_bytes",
    "requests",
];

fn summary_fields(s: &Summary) -> Vec<String> {
    vec![
        s.mean_latency.to_string(),
        s.median_latency.to_string(),
        s.p99_latency.to_string(),
        s.makespan.to_string(),
        s.hit_token_ratio.to_string(),
        s.fixed_hit_rate.to_string(),
        s.recomputed_tokens.to_string(),
        s.loaded_bytes.to_string(),
        s.stall_time.to_string(),
        s.wasted_prefetch_bytes.to_string(),
        s.requests.to_string(),
    ]
}

/// `baseline` mean latency over `s`'s; above 1 means `s` is faster.
pub fn speedup(baseline: &Summary, s: &Summary) -> f64 {
    baseline.mean_latency / s.mean_latency
}

/// Runs each distinct policy once on the same workload.
pub fn compare(cfg: &ExperimentConfig, policies: &[Policy], baseline: Policy) -> Result<Comparison, CliError> {
    let mut distinct: Vec<Policy> = policies.to_vec();
    if !distinct.contains(&baseline) {
        distinct.push(baseline);
    }
    distinct.sort();
    distinct.dedup();
    let runs: Vec<SimOutput> = distinct
        .par_iter()
        .map(|&p| run_one(&cfg.with_policy(p)))
        .collect::<Result<_, _>>()?;
    let find = |p: Policy| runs.iter().find(|r| r.policy == p).expect("ran every policy");

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["policy".into(), "workload".into()];
    header.extend(SUMMARY_COLUMNS.iter().map(|c| c.to_string()));
    header.push("baseline".into());
    header.push("speedup".into());
    header.extend(policies.iter().map(|p| format!("speedup_vs_{p}")));
    w.write_record(&header).map_err(anyhow::Error::from)?;
    for &p in policies {
        let s = &find(p).summary;
        let mut rec = vec![p.to_string(), s.workload.clone()];
        rec.extend(summary_fields(s));
        rec.push(baseline.to_string());
        rec.push(speedup(&find(baseline).summary, s).to_string());
        rec.extend(policies.iter().map(|&q| speedup(&find(q).summary, s).to_string()));
        w.write_record(&rec).map_err(anyhow::Error::from)?;
    }
    let table = String::from_utf8(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?).expect("utf-8");
    let mut ordered: Vec<SimOutput> = Vec::new();
    for &p in policies.iter().chain([&baseline]) {
        if !ordered.iter().any(|r| r.policy == p) {
            ordered.push(find(p).clone());
        }
    }
    Ok(Comparison { runs: ordered, table })
}

/// Long-format sweep table: one row per (value, policy).
pub fn sweep(cfg: &ExperimentConfig, axis: &str, values: &[f64], policies: &[Policy]) -> Result<String, CliError> {
    let mut cells = Vec::new();
    for (vi, &v) in values.iter().enumerate() {
        let mut c = cfg.clone();
        c.set_axis(axis, v)?;
        c.resolve()?;
        for &p in policies {
            cells.push((vi, v, p, c.with_policy(p)));
        }
    }
    let results: Vec<(usize, f64, Policy, Summary)> = cells
        .into_par_iter()
        .map(|(vi, v, p, c)| run_one(&c).map(|r| (vi, v, p, r.summary)))
        .collect::<Result<_, _>>()?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["axis".into(), "value".into(), "policy".into(), "workload".into()];
    header.extend(SUMMARY_COLUMNS.iter().map(|c| c.to_string()));
    header.push("baseline".into());
    header.push("speedup".into());
    w.write_record(&header).map_err(anyhow::Error::from)?;
    for (vi, v, p, s) in &results {
        let base = results
            .iter()
            .find(|(i, _, q, _)| i == vi && *q == policies[0])
            .map(|r| &r.3)
            .expect("baseline cell");
        let mut rec = vec![axis.to_string(), v.to_string(), p.to_string(), s.workload.clone()];
        rec.extend(summary_fields(s));
        rec.push(policies[0].to_string());
        rec.push(speedup(base, s).to_string());
        w.write_record(&rec).map_err(anyhow::Error::from)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?).expect("utf-8"))
}

/// Writes through a temporary sibling file so readers never see a
/// partial CSV.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn write_run(dir: &Path, run: &SimOutput) -> anyhow::Result<()> {
    write_atomic(&dir.join("trace.csv"), to_csv_string(&run.rows).as_bytes())?;
    write_atomic(&dir.join("summary.csv"), to_csv_string(std::slice::from_ref(&run.summary)).as_bytes())?;
    write_atomic(&dir.join("transfers.csv"), to_csv_string(&run.transfers).as_bytes())?;
    Ok(())
}

fn print_summary(s: &Summary) {
    println!(
        "{} {}: mean {:.4}s median {:.4}s p99 {:.4}s, hit ratio {:.3}, stall {:.4}s",
        s.policy, s.workload, s.mean_latency, s.median_latency, s.p99_latency, s.hit_token_ratio, s.stall_time
    );
}
