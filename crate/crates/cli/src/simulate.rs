use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use clap::Args;
use serde::{Deserialize, Serialize};

use shardflood::metrics::{MetricsReport, RunLabel};
use shardflood::shard::{ExperimentSpec, SharderKind, SimConfig};
use shardflood::workload::{load_dataset, WorkloadTx};

use crate::{CliError, VERSION};

#[derive(Args)]
pub struct SimulateArgs {
    /// TOML file with optional `[sim]` and `[experiment]` tables and a `workload` path.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    shards: Option<u32>,
    #[arg(long)]
    malicious_fraction: Option<f64>,
    #[arg(long)]
    target: Option<u32>,
    #[arg(long)]
    sharder: Option<SharderKind>,
    /// Injection rate in transactions per second.
    #[arg(long)]
    tps: Option<f64>,
    /// Timed submissions, legitimate and malicious together.
    #[arg(long)]
    txs: Option<u64>,
    /// Seeds both the workload and the simulator.
    #[arg(long)]
    seed: Option<u64>,
    /// Replay a dataset instead of generating the legitimate load.
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long, env = "SHARDFLOOD_OUT_DIR", default_value = "shardflood-out")]
    out: PathBuf,
    /// Independent runs with seeds seed, seed+1, ...; each in its own process and `run-<i>` directory.
    #[arg(long, default_value_t = 1)]
    runs: u32,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub workload: Option<PathBuf>,
    pub sim: SimConfig,
    pub experiment: ExperimentSpec,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    command: Vec<String>,
    outputs: Vec<String>,
    config: &'a RunConfig,
}

impl SimulateArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(n) = self.shards {
            cfg.sim.shards = n;
        }
        if let Some(f) = self.malicious_fraction {
            cfg.experiment.malicious_fraction = f;
        }
        if let Some(t) = self.target {
            cfg.sim.target_shard = Some(t);
        }
        if let Some(s) = self.sharder {
            cfg.sim.sharder = s;
        }
        if let Some(r) = self.tps {
            cfg.experiment.injection_tps = r;
        }
        if let Some(n) = self.txs {
            cfg.experiment.tx_count = n;
        }
        if let Some(seed) = self.seed {
            cfg.sim.seed = seed;
            cfg.experiment.seed = seed;
        }
        if self.workload.is_some() {
            cfg.workload.clone_from(&self.workload);
        }
        cfg.sim.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let f = cfg.experiment.malicious_fraction;
        if !(0.0..=1.0).contains(&f) {
            return Err(CliError::Config(format!("malicious fraction {f} outside [0, 1]")));
        }
        if !(cfg.experiment.injection_tps > 0.0) {
            return Err(CliError::Config("injection rate must be positive".into()));
        }
        Ok(cfg)
    }
}

pub fn run(args: SimulateArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    if args.runs == 0 {
        return Err(CliError::Config("--runs must be at least 1".into()));
    }
    if args.runs == 1 {
        let report = execute(&cfg, &args.out)?;
        print_summary(&[(&cfg, &report)]);
        return Ok(());
    }
    fan_out(&cfg, &args.out, args.runs)
}

fn execute(cfg: &RunConfig, out: &Path) -> Result<MetricsReport, CliError> {
    let report = match &cfg.workload {
        None => cfg.experiment.run(&cfg.sim),
        Some(path) => {
            let records: Vec<WorkloadTx> = load_dataset(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let stream =
                cfg.experiment.stream_over(&cfg.sim, records.into_iter()).map_err(|e| CliError::Config(e.to_string()))?;
            shardflood::shard::run_experiment(&cfg.sim, stream)
        }
    }
    .map_err(|e| CliError::Run(e.to_string()))?;

    let label = RunLabel {
        injection_tps: cfg.experiment.injection_tps,
        malicious_fraction: cfg.experiment.malicious_fraction,
    };
    report.write_csvs(out, &label).map_err(CliError::io(out.display().to_string()))?;
    let mut outputs = vec!["throughput.csv".to_string(), "latency.csv".to_string(), "report.toml".to_string()];
    outputs.extend((0..report.queue_series.len()).map(|s| format!("queue_{s}.csv")));
    let summary = toml::to_string(&report).map_err(|e| CliError::Run(e.to_string()))?;
    fs::write(out.join("report.toml"), summary).map_err(CliError::io("report.toml"))?;
    write_manifest(cfg, out, outputs)?;
    Ok(report)
}

fn write_manifest(cfg: &RunConfig, out: &Path, outputs: Vec<String>) -> Result<(), CliError> {
    let manifest = Manifest { version: VERSION, command: std::env::args().collect(), outputs, config: cfg };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Run(e.to_string()))?;
    fs::write(out.join("manifest.toml"), text).map_err(CliError::io("manifest.toml"))
}

/// Each child gets its own resolved config file, so a run directory alone
/// is enough to reproduce it.
fn fan_out(base: &RunConfig, out: &Path, runs: u32) -> Result<(), CliError> {
    let exe = std::env::current_exe().map_err(CliError::io("locating executable"))?;
    let mut children: Vec<(u32, PathBuf, Child)> = Vec::new();
    for i in 0..runs {
        let mut cfg = base.clone();
        cfg.sim.seed = base.sim.seed.wrapping_add(i as u64);
        cfg.experiment.seed = base.experiment.seed.wrapping_add(i as u64);
        let dir = out.join(format!("run-{i}"));
        fs::create_dir_all(&dir).map_err(CliError::io(dir.display().to_string()))?;
        let config_path = dir.join("config.toml");
        let text = toml::to_string(&cfg).map_err(|e| CliError::Run(e.to_string()))?;
        fs::write(&config_path, text).map_err(CliError::io(config_path.display().to_string()))?;
        let child = Command::new(&exe)
            .arg("simulate")
            .arg("--config")
            .arg(&config_path)
            .arg("--out")
            .arg(&dir)
            .stdout(std::process::Stdio::piped())
            .spawn()
            .map_err(CliError::io("spawning run"))?;
        children.push((i, dir, child));
    }
    let mut failed = Vec::new();
    let mut rows = Vec::new();
    for (i, _, child) in children {
        let done = child.wait_with_output().map_err(CliError::io("waiting for run"))?;
        if done.status.success() {
            let text = String::from_utf8_lossy(&done.stdout).into_owned();
            rows.extend(text.lines().skip(1).map(|l| format!("{i},{l}")));
        } else {
            failed.push(i);
        }
    }
    println!("run,{SUMMARY_HEADER}");
    for r in rows {
        println!("{r}");
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Run(format!("runs {failed:?} failed")))
    }
}

const SUMMARY_HEADER: &str = "shards,sharder,injection_tps,malicious_fraction,seed,submitted,legit_committed,\
throughput_tps,total_throughput_tps,avg_latency_ms,p95_latency_ms,target_queue_max";

fn print_summary(rows: &[(&RunConfig, &MetricsReport)]) {
    println!("{SUMMARY_HEADER}");
    for (cfg, r) in rows {
        let target = cfg.sim.target_shard.unwrap_or(0) as usize;
        println!(
            "{},{},{},{},{},{},{},{:.3},{:.3},{:.1},{},{}",
            r.shards,
            match cfg.sim.sharder {
                SharderKind::Hash => "hash",
                SharderKind::Tee => "tee",
            },
            cfg.experiment.injection_tps,
            cfg.experiment.malicious_fraction,
            cfg.experiment.seed,
            r.submitted,
            r.legit_committed,
            r.throughput_tps,
            r.total_throughput_tps,
            r.avg_latency_ms,
            r.p95_latency_ms,
            r.queue_max(target)
        );
    }
}
