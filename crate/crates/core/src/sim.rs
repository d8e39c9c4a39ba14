//! Discrete-event core: a deterministic event queue and the region-based
//! network delay model.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in milliseconds.
pub type SimTime = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("invalid network config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scheduled<P> {
    pub time: SimTime,
    pub seq: u64,
    pub payload: P,
}

struct Entry<P>(Scheduled<P>);

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        (self.0.time, self.0.seq) == (other.0.time, other.0.seq)
    }
}
impl<P> Eq for Entry<P> {}
impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Entry<P> {
    // Reversed so the max-heap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.time, other.0.seq).cmp(&(self.0.time, self.0.seq))
    }
}

/// Events come out in `(time, seq)` order; `seq` is assigned at scheduling.
pub struct EventQueue<P> {
    heap: BinaryHeap<Entry<P>>,
    now: SimTime,
    next_seq: u64,
    processed: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        EventQueue { heap: BinaryHeap::new(), now: 0, next_seq: 0, processed: 0 }
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Panics when `at` lies before the current clock: that is a simulator bug.
    pub fn schedule(&mut self, at: SimTime, payload: P) -> u64 {
        assert!(at >= self.now, "event scheduled in the past ({at} < {})", self.now);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry(Scheduled { time: at, seq, payload }));
        seq
    }

    pub fn schedule_in(&mut self, delay: SimTime, payload: P) -> u64 {
        self.schedule(self.now + delay, payload)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.0.time)
    }

    /// Pop the next event if it fires at or before `t_end`, advancing the clock.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<Scheduled<P>> {
        if self.peek_time()? > t_end {
            return None;
        }
        let ev = self.heap.pop().expect("peeked").0;
        self.now = ev.time;
        self.processed += 1;
        Some(ev)
    }

    pub fn pop(&mut self) -> Option<Scheduled<P>> {
        self.pop_until(SimTime::MAX)
    }

    /// Process every event up to and including `t_end`. The handler may
    /// schedule more events. Returns how many were processed.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, Scheduled<P>),
    {
        let mut n = 0;
        while let Some(ev) = self.pop_until(t_end) {
            handler(self, ev);
            n += 1;
        }
        n
    }

    pub fn pending(&self) -> usize {
        self.heap.len()
    }

    pub fn scheduled_count(&self) -> u64 {
        self.next_seq
    }

    pub fn processed_count(&self) -> u64 {
        self.processed
    }
}

const DEFAULT_NETWORK: &str = include_str!("../config/network.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub regions: Vec<String>,
    pub latency_ms: Vec<Vec<u64>>,
    pub bandwidth_bps: Vec<u64>,
    pub region_distribution: Vec<f64>,
    #[serde(default)]
    pub jitter_ms: u64,
    #[serde(default)]
    pub jitter_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let cfg: NetworkConfig = toml::from_str(DEFAULT_NETWORK).expect("bundled network table parses");
        cfg.validate().expect("bundled network table is valid");
        cfg
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let r = self.regions.len();
        if r == 0 {
            return Err(SimError::Config("no regions".into()));
        }
        if self.latency_ms.len() != r || self.latency_ms.iter().any(|row| row.len() != r) {
            return Err(SimError::Config(format!("latency matrix must be {r}x{r}")));
        }
        for i in 0..r {
            for j in 0..r {
                if self.latency_ms[i][j] != self.latency_ms[j][i] {
                    return Err(SimError::Config(format!("latency matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        if self.bandwidth_bps.len() != r || self.bandwidth_bps.contains(&0) {
            return Err(SimError::Config("need one positive bandwidth per region".into()));
        }
        if self.region_distribution.len() != r
            || self.region_distribution.iter().any(|p| !(*p >= 0.0))
            || self.region_distribution.iter().sum::<f64>() <= 0.0
        {
            return Err(SimError::Config("region distribution must be non-negative with positive sum".into()));
        }
        Ok(())
    }

    /// A config with every latency set to `latency` and bandwidth `bps`.
    pub fn uniform(latency: u64, bps: u64) -> Self {
        NetworkConfig {
            regions: vec!["uniform".into()],
            latency_ms: vec![vec![latency]],
            bandwidth_bps: vec![bps],
            region_distribution: vec![1.0],
            jitter_ms: 0,
            jitter_seed: 0,
        }
    }
}

/// Node placement over regions plus the delay function between nodes.
#[derive(Clone, Debug)]
pub struct NetworkModel {
    cfg: NetworkConfig,
    node_region: Vec<usize>,
    jitter: ChaCha8Rng,
}

impl NetworkModel {
    /// Places `nodes` nodes by sampling the region distribution.
    pub fn new<R: Rng + ?Sized>(cfg: NetworkConfig, nodes: usize, rng: &mut R) -> Result<Self, SimError> {
        cfg.validate()?;
        let total: f64 = cfg.region_distribution.iter().sum();
        let node_region = (0..nodes)
            .map(|_| {
                let mut u = rng.gen::<f64>() * total;
                for (i, p) in cfg.region_distribution.iter().enumerate() {
                    if u < *p {
                        return i;
                    }
                    u -= p;
                }
                cfg.region_distribution.len() - 1
            })
            .collect();
        Ok(Self::with_regions(cfg, node_region))
    }

    pub fn with_regions(cfg: NetworkConfig, node_region: Vec<usize>) -> Self {
        let jitter = ChaCha8Rng::seed_from_u64(cfg.jitter_seed);
        NetworkModel { cfg, node_region, jitter }
    }

    pub fn node_count(&self) -> usize {
        self.node_region.len()
    }

    pub fn region(&self, node: usize) -> Result<usize, SimError> {
        self.node_region.get(node).copied().ok_or(SimError::UnknownNode(node))
    }

    pub fn bandwidth_bytes_per_sec(&self, node: usize) -> Result<u64, SimError> {
        Ok((self.cfg.bandwidth_bps[self.region(node)?] / 8).max(1))
    }

    /// Region latency plus transfer time at the slower endpoint, plus jitter.
    pub fn message_delay(&mut self, from: usize, to: usize, size_bytes: u64) -> Result<SimTime, SimError> {
        let (ra, rb) = (self.region(from)?, self.region(to)?);
        let bw = self.bandwidth_bytes_per_sec(from)?.min(self.bandwidth_bytes_per_sec(to)?);
        let transfer = size_bytes * 1000 / bw;
        let jitter = if self.cfg.jitter_ms > 0 { self.jitter.gen_range(0..=self.cfg.jitter_ms) } else { 0 };
        Ok(self.cfg.latency_ms[ra][rb] + transfer + jitter)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }
}
