//! `shardflood` command-line driver.
//!
//! Machine-readable results go to stdout as CSV; logs go to stderr
//! (`RUST_LOG` or `-v` to raise the level).

mod demo;
mod simulate;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use shardflood::analytics::{affected_fraction_empirical, affected_probability, expected_attempts};
use shardflood::attack::{attack_cost, bench_generation, fund_attacker, AttackConfig, DEFAULT_MIN_RELAY_FEE};
use shardflood::hashshard::{BitOrder, ShardId};
use shardflood::shard::{ExperimentSpec, SimConfig};
use shardflood::tx::DEFAULT_TX_SIZE_BYTES;
use shardflood::workload::{load_dataset, synth_generate, write_records, SynthConfig, WorkloadTx};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (rev ", env!("SHARDFLOOD_GIT_REV"), ")");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("{0}")]
    Run(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Io { .. } | CliError::Run(_) => 1,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

#[derive(Parser)]
#[command(name = "shardflood", version = VERSION, about = "Single-shard flooding attack simulator and countermeasure")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulator experiment and write metric CSVs plus a manifest.
    Simulate(simulate::SimulateArgs),
    /// Measure ground-transaction generation rates; one CSV row per shard count.
    AttackBench(BenchArgs),
    /// Emit a mixed legitimate and malicious stream in the workload format.
    GenAttack(GenAttackArgs),
    /// Closed-form and dataset analyses.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Emit a synthetic workload in the record format.
    GenWorkload(GenWorkloadArgs),
    /// Walk transactions through the attested placement protocol against one adversary.
    CountermeasureDemo(demo::DemoArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// Shard counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64")]
    shards: Vec<u32>,
    #[arg(long, default_value_t = 2.0)]
    seconds: f64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    target: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct GenAttackArgs {
    /// Total injection rate in transactions per second.
    #[arg(long, default_value_t = 5000.0)]
    rate: f64,
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    target: u32,
    #[arg(long, default_value_t = 16)]
    shards: u32,
    /// Timed records to emit; funding records come on top.
    #[arg(long, default_value_t = 10_000)]
    count: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Analyze {
    /// Probability that a transaction touches the target shard, as CSV.
    Affected {
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64")]
        shards: Vec<u32>,
        /// Input counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
        inputs: Vec<u32>,
    },
    /// Dollar cost of flooding at the minimum relay fee.
    Cost {
        #[arg(long, default_value_t = 2500)]
        txs: u64,
        /// Satoshi per kB.
        #[arg(long, default_value_t = DEFAULT_MIN_RELAY_FEE)]
        fee_rate: u64,
        #[arg(long, default_value_t = DEFAULT_TX_SIZE_BYTES)]
        size: u32,
        #[arg(long, default_value_t = 0.0001)]
        usd_per_sat: f64,
    },
    /// Expected hashes per ground transaction.
    Attempts {
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64")]
        shards: Vec<u32>,
    },
    /// Measured affected fraction of a dataset next to the closed form at its mean input count.
    Workload {
        #[arg(long)]
        file: PathBuf,
        #[arg(long, default_value_t = 16)]
        shards: u32,
        #[arg(long, default_value_t = 0)]
        target: u32,
    },
}

#[derive(Args)]
struct GenWorkloadArgs {
    #[arg(long, default_value_t = 100_000)]
    count: u64,
    #[arg(long, default_value_t = 16)]
    shards: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Funding records emitted before the first spend.
    #[arg(long)]
    genesis: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Simulate(a) => simulate::run(a),
        Command::AttackBench(a) => attack_bench(a),
        Command::GenAttack(a) => gen_attack(a),
        Command::Analyze(a) => analyze(a),
        Command::GenWorkload(a) => gen_workload(a),
        Command::CountermeasureDemo(a) => demo::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("shardflood: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Stdout or a file, buffered.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(CliError::io(p.display().to_string()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn attack_bench(a: BenchArgs) -> Result<(), CliError> {
    if !(a.seconds > 0.0) {
        return Err(CliError::Config("--seconds must be positive".into()));
    }
    let mut out = output(None)?;
    let w = CliError::io("stdout");
    writeln!(out, "shards,workers,seconds,hashes,malicious,hashes_per_sec,malicious_per_sec").map_err(w)?;
    for &n in &a.shards {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let funding = fund_attacker(&mut rng, 256, 64, 100_000, 64);
        let mut cfg = AttackConfig::new(a.target, n, funding.book).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.worker_count = a.threads;
        cfg.rng_seed = a.seed;
        let r = bench_generation(&cfg, Duration::from_secs_f64(a.seconds)).map_err(|e| CliError::Run(e.to_string()))?;
        writeln!(
            out,
            "{},{},{:.3},{},{},{:.1},{:.1}",
            r.shards, r.workers, r.seconds, r.hashes, r.malicious, r.hashes_per_sec, r.malicious_per_sec
        )
        .map_err(CliError::io("stdout"))?;
        out.flush().map_err(CliError::io("stdout"))?;
    }
    Ok(())
}

fn gen_attack(a: GenAttackArgs) -> Result<(), CliError> {
    let sim = SimConfig { target_shard: Some(a.target), ..SimConfig::with_shards(a.shards) };
    sim.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let spec = ExperimentSpec {
        injection_tps: a.rate,
        malicious_fraction: a.fraction,
        tx_count: a.count,
        seed: a.seed,
        ..Default::default()
    };
    let stream = spec.stream(&sim).map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = output(a.out.as_deref())?;
    for rec in stream {
        writeln!(out, "{}", rec.to_record()).map_err(CliError::io("writing records"))?;
    }
    out.flush().map_err(CliError::io("writing records"))
}

fn analyze(a: Analyze) -> Result<(), CliError> {
    let mut out = output(None)?;
    let w = || CliError::io("stdout");
    match a {
        Analyze::Affected { shards, inputs } => {
            writeln!(out, "shards,inputs,probability").map_err(w())?;
            for &n in &shards {
                if n == 0 {
                    return Err(CliError::Config("shard count must be positive".into()));
                }
                for &m in &inputs {
                    writeln!(out, "{n},{m},{:.6}", affected_probability(n, m)).map_err(w())?;
                }
            }
        }
        Analyze::Cost { txs, fee_rate, size, usd_per_sat } => {
            writeln!(out, "txs,fee_rate_sat_per_kb,size_bytes,usd").map_err(w())?;
            writeln!(out, "{txs},{fee_rate},{size},{:.2}", attack_cost(txs, fee_rate, size, usd_per_sat)).map_err(w())?;
        }
        Analyze::Attempts { shards } => {
            writeln!(out, "shards,expected_attempts").map_err(w())?;
            for n in shards {
                writeln!(out, "{n},{}", expected_attempts(n)).map_err(w())?;
            }
        }
        Analyze::Workload { file, shards, target } => {
            ShardId::new(target, shards).map_err(|e| CliError::Config(e.to_string()))?;
            let records: Vec<WorkloadTx> = load_dataset(&file)
                .map_err(|e| CliError::Config(format!("{}: {e}", file.display())))?
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Config(format!("{}: {e}", file.display())))?;
            let spends: Vec<&WorkloadTx> = records.iter().filter(|r| !r.inputs.is_empty()).collect();
            let mean_inputs = if spends.is_empty() {
                0.0
            } else {
                spends.iter().map(|r| r.inputs.len()).sum::<usize>() as f64 / spends.len() as f64
            };
            let measured = affected_fraction_empirical(&records, shards, ShardId(target), BitOrder::BigEndian)
                .map_err(|e| CliError::Run(e.to_string()))?;
            let closed = affected_probability(shards, mean_inputs.round() as u32);
            writeln!(out, "shards,records,mean_inputs,measured,closed_form").map_err(w())?;
            writeln!(out, "{shards},{},{mean_inputs:.3},{measured:.6},{closed:.6}", records.len()).map_err(w())?;
        }
    }
    out.flush().map_err(w())
}

fn gen_workload(a: GenWorkloadArgs) -> Result<(), CliError> {
    let mut cfg = SynthConfig { count: a.count, shards: a.shards, seed: a.seed, ..Default::default() };
    if let Some(g) = a.genesis {
        cfg.genesis_count = g;
    }
    let generator = synth_generate(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "# shardflood {VERSION} gen-workload count={} shards={} seed={}", a.count, a.shards, a.seed)
        .map_err(CliError::io("writing records"))?;
    let records: Vec<WorkloadTx> = generator.collect();
    write_records(&mut out, &records).map_err(CliError::io("writing records"))?;
    Ok(())
}
