//! Discrete-event simulator of a sharded UTXO chain with lock/commit
//! cross-shard processing.
//!
//! Each shard has a leader that seals a block every `block_interval_ms`
//! holding at most `block_capacity` commits, taken FIFO from the shard
//! mempool. A transaction whose inputs all live on its output shard goes
//! straight into that mempool. Otherwise every input shard first locks the
//! inputs it holds (lock entries ride along in blocks without using capacity)
//! and sends a proof to the output shard; once all proofs arrive the commit
//! entry joins the output shard's mempool.
//!
//! Entries whose parent transaction has not committed yet are parked and go
//! to the back of the mempool once the parent resolves. Spending an output
//! that is already gone, or whose parent was rejected, rejects the
//! transaction and releases its locks.

use std::collections::{HashMap, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{attack_stream, fund_attacker, AttackConfig, AttackError, AttackStream, Grinder};
use crate::hashshard::{BitOrder, HashSharder, ShardError, ShardId, ShardView, TxRef, TxSharder};
use crate::metrics::{MetricsCollector, MetricsReport};
use crate::sim::{EventQueue, NetworkConfig, NetworkModel, SimError, SimTime};
use crate::tee::{tx_root, BalancedInputSharder, BlockHeader};
use crate::tx::{Address, Outpoint, TxId, TxOut};
use crate::utxo::UtxoSet;
use crate::workload::{synth_generate, SynthConfig, SynthGenerator, TxKind, WorkloadTx};

#[derive(Debug, Error)]
pub enum ShardSimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Network(#[from] SimError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharderKind {
    #[default]
    Hash,
    Tee,
}

impl std::str::FromStr for SharderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hash" => Ok(SharderKind::Hash),
            "tee" => Ok(SharderKind::Tee),
            other => Err(format!("unknown sharder '{other}' (expected hash or tee)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub shards: u32,
    pub validators: u32,
    pub block_interval_ms: u64,
    pub block_capacity: u32,
    pub sharder: SharderKind,
    pub bit_order: BitOrder,
    /// Shard whose queue and affected transactions are tracked.
    pub target_shard: Option<u32>,
    pub queue_sample_ms: u64,
    /// Malicious transactions occupy the mempool but are never committed.
    pub relay_only_malicious: bool,
    /// Drop relay-only transactions after this long; `None` keeps them forever.
    pub relay_only_eviction_ms: Option<u64>,
    /// Give up this long after the last arrival; remaining work counts as pending.
    pub drain_timeout_ms: Option<u64>,
    pub seed: u64,
    pub network: NetworkConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            shards: 16,
            validators: 4000,
            block_interval_ms: 8000,
            block_capacity: 2000,
            sharder: SharderKind::Hash,
            bit_order: BitOrder::BigEndian,
            target_shard: Some(0),
            queue_sample_ms: 10_000,
            relay_only_malicious: false,
            relay_only_eviction_ms: None,
            drain_timeout_ms: Some(86_400_000),
            seed: 1,
            network: NetworkConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn with_shards(shards: u32) -> Self {
        SimConfig { shards, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ShardSimError> {
        let bad = |m: &str| Err(ShardSimError::Config(m.to_string()));
        if self.shards == 0 {
            return Err(ShardError::ZeroShards.into());
        }
        if self.validators < self.shards {
            return bad("need at least one validator per shard");
        }
        if self.block_interval_ms == 0 || self.block_capacity == 0 {
            return bad("block interval and capacity must be positive");
        }
        if self.queue_sample_ms == 0 {
            return bad("queue sample interval must be positive");
        }
        if let Some(t) = self.target_shard {
            ShardId::new(t, self.shards)?;
        }
        self.network.validate()?;
        Ok(())
    }

    /// Aggregate commit capacity across shards, in transactions per second.
    pub fn capacity_tps(&self) -> f64 {
        self.shards as f64 * self.block_capacity as f64 * 1000.0 / self.block_interval_ms as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValidatorNode {
    pub node: usize,
    pub shard: ShardId,
    pub leader: bool,
}

/// Random validator-to-shard assignment in which no shard is left empty.
/// The first `shards` entries of a random permutation get one shard each,
/// the rest land uniformly. Each shard's leader is its lowest node id.
pub fn assign_validators<R: Rng + ?Sized>(
    count: u32,
    shards: u32,
    rng: &mut R,
) -> Result<Vec<ValidatorNode>, ShardSimError> {
    if shards == 0 {
        return Err(ShardError::ZeroShards.into());
    }
    if count < shards {
        return Err(ShardSimError::Config(format!("{count} validators cannot cover {shards} shards")));
    }
    let mut order: Vec<usize> = (0..count as usize).collect();
    order.shuffle(rng);
    let mut shard_of = vec![0u32; count as usize];
    for (i, node) in order.iter().enumerate() {
        shard_of[*node] = if i < shards as usize { i as u32 } else { rng.gen_range(0..shards) };
    }
    let mut seen = vec![false; shards as usize];
    Ok(shard_of
        .into_iter()
        .enumerate()
        .map(|(node, s)| {
            let leader = !std::mem::replace(&mut seen[s as usize], true);
            ValidatorNode { node, shard: ShardId(s), leader }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Entry {
    Lock(u32),
    Commit(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Pending,
    RelayOnly,
    Committed,
    Rejected,
}

#[derive(Debug)]
enum Event {
    Arrival,
    Deliver { shard: u32, entry: Entry },
    Proof { tx: u32 },
    Block { shard: u32 },
    Sample,
    Evict { tx: u32 },
}

#[derive(Debug)]
struct SimTx {
    kind: TxKind,
    phase: Phase,
    out_shard: u32,
    output_count: u32,
    size: u32,
    submit_ms: SimTime,
    last_lock_ms: SimTime,
    proofs_left: u32,
    in_queue: bool,
    inputs: Vec<Outpoint>,
    // Shard holding each input, parallel to `inputs`.
    homes: Vec<u32>,
    locked: Vec<u32>,
}

struct ShardState {
    mempool: VecDeque<Entry>,
    utxo: UtxoSet,
    leader: usize,
    head: [u8; 32],
    height: u64,
    queued: u64,
    relay_only: u64,
}

struct PlacementView<'a> {
    shards: u32,
    inputs: &'a [Outpoint],
    homes: &'a [u32],
    loads: &'a [u64],
}

impl ShardView for PlacementView<'_> {
    fn shard_count(&self) -> u32 {
        self.shards
    }
    fn input_shard(&self, op: &Outpoint) -> Option<ShardId> {
        self.inputs.iter().position(|o| o == op).map(|i| ShardId(self.homes[i]))
    }
    fn load(&self, shard: ShardId) -> u64 {
        self.loads.get(shard.index()).copied().unwrap_or(0)
    }
}

const PLACEHOLDER_OUT: TxOut = TxOut { address: Address([0; 20]), value: 0 };

struct Simulator<I> {
    cfg: SimConfig,
    hash: HashSharder,
    stream: I,
    queue: EventQueue<Event>,
    net: NetworkModel,
    rng: ChaCha8Rng,
    shards: Vec<ShardState>,
    loads: Vec<u64>,
    txs: Vec<SimTx>,
    ids: Vec<TxId>,
    index: HashMap<TxId, u32>,
    parked: HashMap<u32, Vec<(u32, Entry)>>,
    spent: HashSet<Outpoint>,
    metrics: MetricsCollector,
    next: Option<WorkloadTx>,
    last_arrival: SimTime,
    outstanding: u64,
    relay_pending: u64,
}

/// Run one experiment over `stream` and report the metrics.
pub fn run_experiment<I>(cfg: &SimConfig, stream: I) -> Result<MetricsReport, ShardSimError>
where
    I: IntoIterator<Item = WorkloadTx>,
{
    cfg.validate()?;
    Simulator::new(cfg.clone(), stream.into_iter())?.run()
}

impl<I: Iterator<Item = WorkloadTx>> Simulator<I> {
    fn new(cfg: SimConfig, stream: I) -> Result<Self, ShardSimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let validators = assign_validators(cfg.validators, cfg.shards, &mut rng)?;
        let net = NetworkModel::new(cfg.network.clone(), cfg.validators as usize, &mut rng)?;
        let mut shards: Vec<ShardState> = (0..cfg.shards)
            .map(|_| ShardState {
                mempool: VecDeque::new(),
                utxo: UtxoSet::new(),
                leader: 0,
                head: [0; 32],
                height: 0,
                queued: 0,
                relay_only: 0,
            })
            .collect();
        for v in validators.iter().filter(|v| v.leader) {
            shards[v.shard.index()].leader = v.node;
        }
        let n = cfg.shards as usize;
        Ok(Simulator {
            hash: HashSharder::with_order(cfg.shards, cfg.bit_order)?,
            metrics: MetricsCollector::new(cfg.shards),
            loads: vec![0; n],
            cfg,
            stream,
            queue: EventQueue::new(),
            net,
            rng,
            shards,
            txs: Vec::new(),
            ids: Vec::new(),
            index: HashMap::new(),
            parked: HashMap::new(),
            spent: HashSet::new(),
            next: None,
            last_arrival: 0,
            outstanding: 0,
            relay_pending: 0,
        })
    }

    fn run(mut self) -> Result<MetricsReport, ShardSimError> {
        let interval = self.cfg.block_interval_ms;
        let n = self.cfg.shards as u64;
        for s in 0..self.cfg.shards {
            // Stagger leaders so blocks do not all land on the same tick.
            self.queue.schedule(interval + s as u64 * interval / n, Event::Block { shard: s });
        }
        self.queue.schedule(0, Event::Sample);
        self.pull_next(0);

        while let Some(ev) = self.queue.pop() {
            let now = ev.time;
            match ev.payload {
                Event::Arrival => self.arrive(now)?,
                Event::Deliver { shard, entry } => self.deliver(shard, entry),
                Event::Proof { tx } => self.proof(tx),
                Event::Block { shard } => {
                    self.block(shard, now);
                    self.queue.schedule(now + interval, Event::Block { shard });
                }
                Event::Sample => {
                    self.sample(now);
                    self.queue.schedule(now + self.cfg.queue_sample_ms, Event::Sample);
                }
                Event::Evict { tx } => self.evict(tx),
            }
            let arrivals_done = self.next.is_none();
            if arrivals_done && self.outstanding == 0 {
                break;
            }
            if arrivals_done && self.cfg.drain_timeout_ms.is_some_and(|d| now > self.last_arrival + d) {
                log::warn!("drain timeout with {} transactions outstanding", self.outstanding);
                break;
            }
        }
        let end = self.queue.now();
        self.sample(end);
        let pending = self.outstanding + self.relay_pending;
        Ok(self.metrics.finalize(pending, end))
    }

    fn pull_next(&mut self, now: SimTime) {
        self.next = self.stream.next();
        if let Some(rec) = &self.next {
            let at = rec.time_ms.unwrap_or(self.last_arrival).max(now);
            self.last_arrival = at;
            self.queue.schedule(at, Event::Arrival);
        }
    }

    fn delay(&mut self, from: usize, to: usize, size: u32) -> Result<SimTime, ShardSimError> {
        Ok(self.net.message_delay(from, to, size as u64)?)
    }

    fn arrive(&mut self, now: SimTime) -> Result<(), ShardSimError> {
        let rec = self.next.take().expect("arrival scheduled with a record");
        self.submit(rec, now)?;
        self.pull_next(now);
        Ok(())
    }

    fn register(&mut self, txid: TxId, tx: SimTx) -> u32 {
        let h = self.txs.len() as u32;
        self.txs.push(tx);
        self.ids.push(txid);
        self.index.insert(txid, h);
        h
    }

    fn submit(&mut self, rec: WorkloadTx, now: SimTime) -> Result<(), ShardSimError> {
        if self.index.contains_key(&rec.txid) {
            log::debug!("duplicate submission of {} ignored", rec.txid);
            return Ok(());
        }
        let mut homes = Vec::with_capacity(rec.inputs.len());
        let mut resolvable = true;
        for op in &rec.inputs {
            match self.index.get(&op.txid) {
                Some(&p) => homes.push(self.txs[p as usize].out_shard),
                None => {
                    resolvable = false;
                    break;
                }
            }
        }
        let mut distinct = HashSet::with_capacity(rec.inputs.len());
        let well_formed = resolvable && rec.inputs.iter().all(|op| distinct.insert(*op));
        if rec.kind != TxKind::Genesis && (!well_formed || rec.inputs.is_empty()) {
            self.metrics.record_submit(rec.kind, now, false);
            self.metrics.record_reject();
            return Ok(());
        }

        let out = match self.cfg.sharder {
            SharderKind::Hash => self.hash.shard_for(&rec.txid),
            SharderKind::Tee => {
                // Genesis records with unresolvable inputs are placed as if they had none.
                let ops: &[Outpoint] = if well_formed { &rec.inputs } else { &[] };
                let view = PlacementView { shards: self.cfg.shards, inputs: ops, homes: &homes, loads: &self.loads };
                BalancedInputSharder.place(TxRef { txid: &rec.txid, inputs: ops }, &view)?
            }
        }
        .0;
        self.loads[out as usize] += 1;

        let mut tx = SimTx {
            kind: rec.kind,
            phase: Phase::Pending,
            out_shard: out,
            output_count: rec.output_count,
            size: rec.size_bytes,
            submit_ms: now,
            last_lock_ms: 0,
            proofs_left: 0,
            in_queue: false,
            inputs: Vec::new(),
            homes: Vec::new(),
            locked: Vec::new(),
        };

        if rec.kind == TxKind::Genesis {
            tx.phase = Phase::Committed;
            let h = self.register(rec.txid, tx);
            self.create_outputs(h, rec.txid);
            return Ok(());
        }

        let affected = self.cfg.target_shard.is_some_and(|t| out == t || homes.contains(&t));
        self.metrics.record_submit(rec.kind, now, affected);

        if rec.kind == TxKind::Malicious && self.cfg.relay_only_malicious {
            tx.phase = Phase::RelayOnly;
            let h = self.register(rec.txid, tx);
            self.shards[out as usize].relay_only += 1;
            self.relay_pending += 1;
            if let Some(ttl) = self.cfg.relay_only_eviction_ms {
                self.queue.schedule(now + ttl, Event::Evict { tx: h });
            }
            return Ok(());
        }

        let mut remote: Vec<u32> = homes.iter().copied().filter(|&s| s != out).collect();
        remote.sort_unstable();
        remote.dedup();
        tx.proofs_left = remote.len() as u32;
        tx.inputs = rec.inputs;
        tx.homes = homes;
        let size = tx.size;
        let h = self.register(rec.txid, tx);
        self.outstanding += 1;

        let client = self.rng.gen_range(0..self.net.node_count());
        if remote.is_empty() {
            let d = self.delay(client, self.shards[out as usize].leader, size)?;
            self.queue.schedule(now + d, Event::Deliver { shard: out, entry: Entry::Commit(h) });
        } else {
            for s in remote {
                let d = self.delay(client, self.shards[s as usize].leader, size)?;
                self.queue.schedule(now + d, Event::Deliver { shard: s, entry: Entry::Lock(h) });
            }
        }
        Ok(())
    }

    fn create_outputs(&mut self, h: u32, txid: TxId) {
        let tx = &self.txs[h as usize];
        let utxo = &mut self.shards[tx.out_shard as usize].utxo;
        for i in 0..tx.output_count {
            // Ids are unique per registration, so creation cannot collide.
            let _ = utxo.create(Outpoint::new(txid, i), PLACEHOLDER_OUT);
        }
    }

    fn deliver(&mut self, shard: u32, entry: Entry) {
        if let Entry::Commit(h) = entry {
            let tx = &mut self.txs[h as usize];
            if tx.phase != Phase::Pending {
                return;
            }
            tx.in_queue = true;
            self.shards[shard as usize].queued += 1;
        }
        self.shards[shard as usize].mempool.push_back(entry);
    }

    fn proof(&mut self, h: u32) {
        let tx = &mut self.txs[h as usize];
        if tx.phase != Phase::Pending {
            return;
        }
        tx.proofs_left -= 1;
        if tx.proofs_left == 0 {
            let out = tx.out_shard;
            self.deliver(out, Entry::Commit(h));
        }
    }

    /// Checks the inputs of `h` held by `shard`. Returns `Ok(true)` when all
    /// are present, `Ok(false)` when the entry was parked, `Err(())` when the
    /// transaction must be rejected.
    fn check_local_inputs(&mut self, shard: u32, h: u32, entry: Entry) -> Result<bool, ()> {
        let tx = &self.txs[h as usize];
        let utxo = &self.shards[shard as usize].utxo;
        for (op, _) in tx.inputs.iter().zip(&tx.homes).filter(|(_, &s)| s == shard) {
            if utxo.contains(op) {
                continue;
            }
            let parent = self.index[&op.txid];
            return match self.txs[parent as usize].phase {
                Phase::Pending => {
                    self.parked.entry(parent).or_default().push((shard, entry));
                    Ok(false)
                }
                _ => Err(()),
            };
        }
        Ok(true)
    }

    fn spend_local_inputs(&mut self, shard: u32, h: u32) {
        let tx = &self.txs[h as usize];
        let utxo = &mut self.shards[shard as usize].utxo;
        for (op, _) in tx.inputs.iter().zip(&tx.homes).filter(|(_, &s)| s == shard) {
            utxo.spend(op).expect("presence checked before spending");
        }
    }

    fn lock(&mut self, shard: u32, h: u32, now: SimTime) {
        if self.txs[h as usize].phase != Phase::Pending {
            return;
        }
        match self.check_local_inputs(shard, h, Entry::Lock(h)) {
            Ok(true) => {}
            Ok(false) => return,
            Err(()) => return self.reject(h),
        }
        self.spend_local_inputs(shard, h);
        let tx = &mut self.txs[h as usize];
        tx.locked.push(shard);
        tx.last_lock_ms = tx.last_lock_ms.max(now);
        let (out, size) = (tx.out_shard, tx.size);
        let (from, to) = (self.shards[shard as usize].leader, self.shards[out as usize].leader);
        let d = self.net.message_delay(from, to, size as u64).expect("leaders are known nodes");
        self.queue.schedule(now + d, Event::Proof { tx: h });
    }

    /// Returns true when the commit used block capacity.
    fn commit(&mut self, shard: u32, h: u32, now: SimTime, txid_out: &mut Vec<TxId>) -> bool {
        if self.txs[h as usize].phase != Phase::Pending {
            return false;
        }
        match self.check_local_inputs(shard, h, Entry::Commit(h)) {
            Ok(true) => {}
            Ok(false) => return false,
            Err(()) => {
                self.reject(h);
                return false;
            }
        }
        self.spend_local_inputs(shard, h);
        let tx = &mut self.txs[h as usize];
        tx.phase = Phase::Committed;
        tx.in_queue = false;
        let (kind, submitted, last_lock) = (tx.kind, tx.submit_ms, tx.last_lock_ms);
        let inputs = std::mem::take(&mut tx.inputs);
        tx.homes = Vec::new();
        tx.locked = Vec::new();
        self.shards[shard as usize].queued -= 1;
        self.outstanding -= 1;

        for op in &inputs {
            if !self.spent.insert(*op) {
                self.metrics.record_double_spend();
            }
        }
        if now < last_lock {
            self.metrics.record_ordering_violation();
        }
        let txid = self.ids[h as usize];
        self.create_outputs(h, txid);
        txid_out.push(txid);
        self.metrics.record_commit(kind, submitted, now);
        self.release(h);
        true
    }

    fn reject(&mut self, h: u32) {
        let tx = &mut self.txs[h as usize];
        debug_assert_eq!(tx.phase, Phase::Pending);
        tx.phase = Phase::Rejected;
        let inputs = std::mem::take(&mut tx.inputs);
        let homes = std::mem::take(&mut tx.homes);
        let locked = std::mem::take(&mut tx.locked);
        if std::mem::replace(&mut tx.in_queue, false) {
            self.shards[tx.out_shard as usize].queued -= 1;
        }
        for s in locked {
            let utxo = &mut self.shards[s as usize].utxo;
            for (op, _) in inputs.iter().zip(&homes).filter(|(_, &home)| home == s) {
                let _ = utxo.create(*op, PLACEHOLDER_OUT);
            }
        }
        self.outstanding -= 1;
        self.metrics.record_reject();
        self.release(h);
    }

    fn release(&mut self, h: u32) {
        if let Some(waiting) = self.parked.remove(&h) {
            for (shard, entry) in waiting {
                self.shards[shard as usize].mempool.push_back(entry);
            }
        }
    }

    fn evict(&mut self, h: u32) {
        let tx = &mut self.txs[h as usize];
        if tx.phase != Phase::RelayOnly {
            return;
        }
        tx.phase = Phase::Rejected;
        self.shards[tx.out_shard as usize].relay_only -= 1;
        self.relay_pending -= 1;
        self.metrics.record_reject();
    }

    fn block(&mut self, shard: u32, now: SimTime) {
        let cap = self.cfg.block_capacity;
        let mut used = 0u32;
        let mut committed = Vec::new();
        loop {
            let st = &mut self.shards[shard as usize];
            match st.mempool.front() {
                None => break,
                Some(Entry::Commit(_)) if used >= cap => break,
                _ => {}
            }
            match st.mempool.pop_front().expect("front checked") {
                Entry::Lock(h) => self.lock(shard, h, now),
                Entry::Commit(h) => used += self.commit(shard, h, now, &mut committed) as u32,
            }
        }
        let st = &mut self.shards[shard as usize];
        st.height += 1;
        let header = BlockHeader { shard, height: st.height, prev: st.head, tx_root: tx_root(&committed) };
        st.head = header.hash();
        self.metrics.record_block();
    }

    fn sample(&mut self, now: SimTime) {
        let sizes: Vec<u64> = self.shards.iter().map(|s| s.queued + s.relay_only).collect();
        self.metrics.sample_queues(now, sizes);
    }
}

/// One attack experiment: synthetic legitimate load mixed with ground
/// transactions aimed at `target_shard`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub injection_tps: f64,
    pub malicious_fraction: f64,
    /// Timed submissions, legitimate and malicious together.
    pub tx_count: u64,
    pub workload: SynthConfig,
    pub seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            injection_tps: 5000.0,
            malicious_fraction: 0.0,
            tx_count: 100_000,
            workload: SynthConfig::default(),
            seed: 1,
        }
    }
}

impl ExperimentSpec {
    /// Build the submission stream for a simulator configured by `sim`.
    pub fn stream(&self, sim: &SimConfig) -> Result<AttackStream<SynthGenerator>, ShardSimError> {
        let mut workload = self.workload.clone();
        workload.shards = sim.shards;
        workload.bit_order = sim.bit_order;
        workload.count = self.tx_count;
        workload.seed = self.seed;
        let legit = synth_generate(workload).map_err(|e| ShardSimError::Config(e.to_string()))?;
        self.stream_over(sim, legit)
    }

    /// Mix ground transactions into an arbitrary legitimate source, such as
    /// a replayed dataset. Legitimate records are re-timed to the injection rate.
    pub fn stream_over<L>(&self, sim: &SimConfig, legit: L) -> Result<AttackStream<L>, ShardSimError>
    where
        L: Iterator<Item = WorkloadTx>,
    {
        let cfg_err = |e: AttackError| ShardSimError::Config(e.to_string());
        let (grinder, prelude) = if self.malicious_fraction > 0.0 {
            let target = sim.target_shard.unwrap_or(0);
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xa77a_c4e5);
            // A little slack over the expected count covers Bernoulli noise.
            let expected = self.tx_count as f64 * self.malicious_fraction;
            let utxos = (expected + 6.0 * expected.sqrt() + 64.0).ceil() as usize;
            let funding = fund_attacker(&mut rng, utxos, 64, 100_000, 100);
            let mut cfg = AttackConfig::new(target, sim.shards, funding.book).map_err(cfg_err)?;
            cfg.bit_order = sim.bit_order;
            cfg.rng_seed = self.seed;
            cfg.size_bytes = self.workload.size_bytes;
            (Some(Grinder::new(&cfg).map_err(cfg_err)?), funding.genesis)
        } else {
            (None, Vec::new())
        };
        Ok(attack_stream(self.injection_tps, self.malicious_fraction, grinder, prelude, legit, self.seed)
            .map_err(cfg_err)?
            .with_max_slots(self.tx_count))
    }

    pub fn run(&self, sim: &SimConfig) -> Result<MetricsReport, ShardSimError> {
        sim.validate()?;
        run_experiment(sim, self.stream(sim)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // With a power-of-two shard count the last digest byte picks the shard.
    fn id(serial: u16, shard: u8) -> TxId {
        let mut b = [0u8; 32];
        b[..2].copy_from_slice(&serial.to_le_bytes());
        b[31] = shard;
        TxId(b)
    }

    fn genesis(txid: TxId, outputs: u32) -> WorkloadTx {
        WorkloadTx { txid, inputs: vec![], output_count: outputs, size_bytes: 500, kind: TxKind::Genesis, time_ms: Some(0) }
    }

    fn spend(txid: TxId, inputs: Vec<Outpoint>, kind: TxKind, at: u64) -> WorkloadTx {
        WorkloadTx { txid, inputs, output_count: 1, size_bytes: 500, kind, time_ms: Some(at) }
    }

    fn small(shards: u32, capacity: u32) -> SimConfig {
        SimConfig {
            shards,
            validators: 4 * shards,
            block_interval_ms: 1000,
            block_capacity: capacity,
            queue_sample_ms: 500,
            network: NetworkConfig::uniform(20, 1_000_000_000),
            ..Default::default()
        }
    }

    #[test]
    fn every_shard_gets_a_single_lowest_id_leader() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nodes = assign_validators(20, 16, &mut rng).unwrap();
        for s in 0..16 {
            let members: Vec<_> = nodes.iter().filter(|v| v.shard.0 == s).collect();
            assert!(!members.is_empty(), "shard {s} empty");
            let leaders: Vec<_> = members.iter().filter(|v| v.leader).collect();
            assert_eq!(leaders.len(), 1);
            assert_eq!(leaders[0].node, members.iter().map(|v| v.node).min().unwrap());
        }
        assert!(assign_validators(3, 4, &mut rng).is_err());
        assert!(assign_validators(3, 0, &mut rng).is_err());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        assert!(SimConfig::default().validate().is_ok());
        assert!(SimConfig { shards: 0, ..Default::default() }.validate().is_err());
        assert!(SimConfig { block_capacity: 0, ..Default::default() }.validate().is_err());
        assert!(SimConfig { target_shard: Some(16), ..Default::default() }.validate().is_err());
        assert!(SimConfig { validators: 3, shards: 4, ..Default::default() }.validate().is_err());
        let parsed: Result<SimConfig, _> = toml::from_str("shards = 4\nbogus = 1\n");
        assert!(parsed.is_err());
    }

    #[test]
    fn empty_stream_gives_zero_report() {
        let r = run_experiment(&small(4, 10), Vec::new()).unwrap();
        assert_eq!(r.submitted, 0);
        assert_eq!(r.throughput_tps, 0.0);
        assert!(r.audit.conservation_ok);
    }

    #[test]
    fn block_capacity_bounds_commits() {
        let g = id(0, 0);
        let mut stream = vec![genesis(g, 100)];
        for i in 0..100u16 {
            stream.push(spend(id(i + 1, 0), vec![Outpoint::new(g, i as u32)], TxKind::Legit, 0));
        }
        let r = run_experiment(&small(1, 10), stream).unwrap();
        assert_eq!(r.legit_committed, 100);
        // Ten full blocks at one per second.
        assert_eq!(r.max_latency_ms, 10_000);
        assert!(r.queue_max(0) >= 90);
        assert_eq!(r.audit.double_spends, 0);
    }

    #[test]
    fn conflicting_spends_commit_once() {
        let g = id(0, 0);
        let op = Outpoint::new(g, 0);
        let stream = vec![
            genesis(g, 1),
            spend(id(1, 0), vec![op], TxKind::Legit, 0),
            spend(id(2, 1), vec![op], TxKind::Legit, 5),
            spend(id(3, 2), vec![op], TxKind::Legit, 10),
        ];
        let r = run_experiment(&small(4, 10), stream).unwrap();
        assert_eq!(r.committed, 1);
        assert_eq!(r.rejected, 2);
        assert_eq!(r.audit.double_spends, 0);
        assert!(r.audit.conservation_ok);
    }

    #[test]
    fn cross_shard_commit_follows_locks() {
        let (a, b) = (id(0, 1), id(1, 2));
        let stream = vec![
            genesis(a, 1),
            genesis(b, 1),
            spend(id(2, 3), vec![Outpoint::new(a, 0), Outpoint::new(b, 0)], TxKind::Legit, 0),
        ];
        let r = run_experiment(&small(4, 10), stream).unwrap();
        assert_eq!(r.legit_committed, 1);
        assert_eq!(r.audit.ordering_violations, 0);
        // Lock blocks first, then the commit block on the output shard.
        assert!(r.max_latency_ms > 1000);
    }

    #[test]
    fn child_waits_for_parent_then_commits() {
        let g = id(0, 0);
        let parent = id(1, 1);
        let stream = vec![
            genesis(g, 1),
            spend(parent, vec![Outpoint::new(g, 0)], TxKind::Legit, 0),
            spend(id(2, 2), vec![Outpoint::new(parent, 0)], TxKind::Legit, 1),
        ];
        let r = run_experiment(&small(4, 10), stream).unwrap();
        assert_eq!(r.legit_committed, 2);
        assert_eq!(r.rejected, 0);
    }

    #[test]
    fn rejected_parent_rejects_child_and_releases_its_locks() {
        let (g, h) = (id(0, 0), id(1, 3));
        let loser = id(3, 1);
        let stream = vec![
            genesis(g, 1),
            genesis(h, 2),
            spend(id(2, 1), vec![Outpoint::new(g, 0)], TxKind::Legit, 0),
            spend(loser, vec![Outpoint::new(g, 0)], TxKind::Legit, 1),
            // Spends the loser's output plus a coin on shard 3, which gets locked.
            spend(id(4, 2), vec![Outpoint::new(loser, 0), Outpoint::new(h, 0)], TxKind::Legit, 2),
            // Later spends the coin the rejected child had locked.
            spend(id(5, 3), vec![Outpoint::new(h, 0)], TxKind::Legit, 20_000),
        ];
        let r = run_experiment(&small(4, 10), stream).unwrap();
        assert_eq!(r.legit_committed, 2, "{r:?}");
        assert_eq!(r.rejected, 2);
        assert_eq!(r.audit.double_spends, 0);
    }

    #[test]
    fn unknown_inputs_are_rejected_at_submission() {
        let stream = vec![spend(id(1, 0), vec![Outpoint::new(id(9, 9), 0)], TxKind::Legit, 0)];
        let r = run_experiment(&small(4, 10), stream).unwrap();
        assert_eq!((r.submitted, r.rejected), (1, 1));
    }

    #[test]
    fn relay_only_floods_the_queue_without_committing() {
        let g = id(0, 1);
        let mut stream = vec![genesis(g, 50)];
        for i in 0..50u16 {
            stream.push(spend(id(i + 1, 0), vec![Outpoint::new(g, i as u32)], TxKind::Malicious, 0));
        }
        let mut cfg = small(4, 10);
        cfg.relay_only_malicious = true;
        let r = run_experiment(&cfg, stream.clone()).unwrap();
        assert_eq!(r.malicious_committed, 0);
        assert_eq!(r.pending, 50);
        assert_eq!(r.queue_max(0), 50);
        assert!(r.audit.conservation_ok);

        cfg.relay_only_eviction_ms = Some(2_000);
        stream.push(spend(id(99, 2), vec![Outpoint::new(g, 49)], TxKind::Legit, 10_000));
        let r = run_experiment(&cfg, stream).unwrap();
        assert_eq!(r.pending, 0);
        assert_eq!(r.rejected, 50);
        assert_eq!(r.legit_committed, 1);
    }

    #[test]
    fn experiment_is_deterministic_per_seed() {
        let sim = SimConfig { shards: 4, ..small(4, 50) };
        let spec = ExperimentSpec {
            injection_tps: 400.0,
            malicious_fraction: 0.2,
            tx_count: 3_000,
            workload: SynthConfig { genesis_count: 16, maturity_txs: 500, ..Default::default() },
            seed: 9,
        };
        let a = spec.run(&sim).unwrap();
        let b = spec.run(&sim).unwrap();
        assert_eq!(a.committed, b.committed);
        assert_eq!(a.end_time_ms, b.end_time_ms);
        assert_eq!(a.queue_series, b.queue_series);
        assert!(a.malicious_committed > 0);
        assert!(a.audit.conservation_ok && a.audit.double_spends == 0);
    }
}
