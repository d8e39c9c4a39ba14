//! Throughput, latency and queue-size measurement for simulator runs.
//!
//! Throughput and latency are computed over legitimate transactions: the
//! question is how much useful work the system still does while flooded.
//! Totals including attacker traffic are reported alongside.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

use crate::sim::SimTime;
use crate::workload::TxKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct QueueSample {
    pub time_ms: SimTime,
    pub size: u64,
}

/// End-of-run consistency checks.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Audit {
    /// Outpoints spent by more than one committed transaction.
    pub double_spends: u64,
    /// Commits that happened before one of their input-shard locks.
    pub ordering_violations: u64,
    /// committed + rejected + pending == submitted.
    pub conservation_ok: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricsReport {
    pub shards: u32,
    pub submitted: u64,
    pub committed: u64,
    pub rejected: u64,
    pub pending: u64,
    pub legit_submitted: u64,
    pub legit_committed: u64,
    pub malicious_submitted: u64,
    pub malicious_committed: u64,
    /// Legitimate transactions whose output or input shards include the target.
    pub affected_count: u64,
    /// First legitimate submission to last legitimate commit.
    pub active_seconds: f64,
    pub throughput_tps: f64,
    pub total_throughput_tps: f64,
    pub avg_latency_ms: f64,
    pub p50_latency_ms: u64,
    pub p95_latency_ms: u64,
    pub max_latency_ms: u64,
    pub end_time_ms: SimTime,
    pub blocks: u64,
    pub audit: Audit,
    #[serde(skip)]
    pub queue_series: Vec<Vec<QueueSample>>,
}

impl MetricsReport {
    pub fn queue_max(&self, shard: usize) -> u64 {
        self.queue_series.get(shard).and_then(|s| s.iter().map(|q| q.size).max()).unwrap_or(0)
    }

    /// Write `throughput.csv`, `latency.csv` and one `queue_<shard>.csv` per shard.
    pub fn write_csvs(&self, dir: &Path, label: &RunLabel) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("throughput.csv"))?;
        writeln!(
            f,
            "shards,injection_tps,malicious_fraction,legit_committed,active_seconds,throughput_tps,total_throughput_tps"
        )?;
        writeln!(
            f,
            "{},{},{},{},{:.3},{:.3},{:.3}",
            self.shards,
            label.injection_tps,
            label.malicious_fraction,
            self.legit_committed,
            self.active_seconds,
            self.throughput_tps,
            self.total_throughput_tps
        )?;
        let mut f = fs::File::create(dir.join("latency.csv"))?;
        writeln!(
            f,
            "shards,injection_tps,malicious_fraction,legit_committed,avg_latency_ms,p50_latency_ms,p95_latency_ms,max_latency_ms"
        )?;
        writeln!(
            f,
            "{},{},{},{},{:.3},{},{},{}",
            self.shards,
            label.injection_tps,
            label.malicious_fraction,
            self.legit_committed,
            self.avg_latency_ms,
            self.p50_latency_ms,
            self.p95_latency_ms,
            self.max_latency_ms
        )?;
        for (s, series) in self.queue_series.iter().enumerate() {
            let mut f = io::BufWriter::new(fs::File::create(dir.join(format!("queue_{s}.csv")))?);
            writeln!(f, "time_s,queue_size")?;
            for q in series {
                writeln!(f, "{},{}", q.time_ms / 1000, q.size)?;
            }
            f.flush()?;
        }
        Ok(())
    }
}

/// Run parameters echoed into the CSV rows.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct RunLabel {
    pub injection_tps: f64,
    pub malicious_fraction: f64,
}

/// Accumulates events from a running simulation.
#[derive(Debug, Default)]
pub struct MetricsCollector {
    shards: u32,
    submitted: u64,
    committed: u64,
    rejected: u64,
    legit_submitted: u64,
    legit_committed: u64,
    malicious_submitted: u64,
    malicious_committed: u64,
    affected: u64,
    first_legit_submit: Option<SimTime>,
    last_legit_commit: Option<SimTime>,
    first_submit: Option<SimTime>,
    last_commit: Option<SimTime>,
    latencies: Vec<u32>,
    latency_sum: u128,
    queue_series: Vec<Vec<QueueSample>>,
    blocks: u64,
    double_spends: u64,
    ordering_violations: u64,
}

impl MetricsCollector {
    pub fn new(shards: u32) -> Self {
        MetricsCollector { shards, queue_series: vec![Vec::new(); shards as usize], ..Default::default() }
    }

    pub fn record_submit(&mut self, kind: TxKind, at: SimTime, affected: bool) {
        self.submitted += 1;
        self.first_submit.get_or_insert(at);
        match kind {
            TxKind::Legit => {
                self.legit_submitted += 1;
                self.first_legit_submit.get_or_insert(at);
                self.affected += affected as u64;
            }
            TxKind::Malicious => self.malicious_submitted += 1,
            TxKind::Genesis => {}
        }
    }

    pub fn record_commit(&mut self, kind: TxKind, submitted_at: SimTime, at: SimTime) {
        self.committed += 1;
        self.last_commit = Some(self.last_commit.map_or(at, |t| t.max(at)));
        match kind {
            TxKind::Legit => {
                self.legit_committed += 1;
                self.last_legit_commit = Some(self.last_legit_commit.map_or(at, |t| t.max(at)));
                let lat = at - submitted_at;
                self.latency_sum += lat as u128;
                self.latencies.push(lat.min(u32::MAX as u64) as u32);
            }
            TxKind::Malicious => self.malicious_committed += 1,
            TxKind::Genesis => {}
        }
    }

    pub fn record_reject(&mut self) {
        self.rejected += 1;
    }

    pub fn record_block(&mut self) {
        self.blocks += 1;
    }

    pub fn record_double_spend(&mut self) {
        self.double_spends += 1;
    }

    pub fn record_ordering_violation(&mut self) {
        self.ordering_violations += 1;
    }

    /// Append one sample per shard. A second sample at the same time replaces
    /// the first, so each series keeps the latest state per timestamp.
    pub fn sample_queues(&mut self, at: SimTime, sizes: impl IntoIterator<Item = u64>) {
        for (series, size) in self.queue_series.iter_mut().zip(sizes) {
            match series.last_mut() {
                Some(last) if last.time_ms == at => last.size = size,
                Some(last) if last.time_ms > at => {}
                _ => series.push(QueueSample { time_ms: at, size }),
            }
        }
    }

    pub fn finalize(mut self, pending: u64, end_time_ms: SimTime) -> MetricsReport {
        let active_ms = match (self.first_legit_submit, self.last_legit_commit) {
            (Some(a), Some(b)) if b > a => b - a,
            _ => 0,
        };
        let total_ms = match (self.first_submit, self.last_commit) {
            (Some(a), Some(b)) if b > a => b - a,
            _ => 0,
        };
        let active_seconds = active_ms as f64 / 1000.0;
        let rate = |n: u64, ms: u64| if ms == 0 { 0.0 } else { n as f64 * 1000.0 / ms as f64 };
        self.latencies.sort_unstable();
        let pct = |p: f64| -> u64 {
            if self.latencies.is_empty() {
                0
            } else {
                let i = ((self.latencies.len() - 1) as f64 * p).round() as usize;
                self.latencies[i] as u64
            }
        };
        MetricsReport {
            shards: self.shards,
            submitted: self.submitted,
            committed: self.committed,
            rejected: self.rejected,
            pending,
            legit_submitted: self.legit_submitted,
            legit_committed: self.legit_committed,
            malicious_submitted: self.malicious_submitted,
            malicious_committed: self.malicious_committed,
            affected_count: self.affected,
            active_seconds,
            throughput_tps: rate(self.legit_committed, active_ms),
            total_throughput_tps: rate(self.committed, total_ms),
            avg_latency_ms: if self.legit_committed == 0 {
                0.0
            } else {
                self.latency_sum as f64 / self.legit_committed as f64
            },
            p50_latency_ms: pct(0.5),
            p95_latency_ms: pct(0.95),
            max_latency_ms: self.latencies.last().copied().unwrap_or(0) as u64,
            end_time_ms,
            blocks: self.blocks,
            audit: Audit {
                double_spends: self.double_spends,
                ordering_violations: self.ordering_violations,
                conservation_ok: self.committed + self.rejected + pending == self.submitted,
            },
            queue_series: self.queue_series,
        }
    }
}
