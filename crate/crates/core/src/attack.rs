//! Hash grinding for the single-shard flooding attack, plus the benchmark and
//! stream helpers built on it.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::hashshard::{BitOrder, HashSharder, ShardError, ShardId};
use crate::tx::{double_sha256, Address, Outpoint, Transaction, TxId, TxOut, DEFAULT_TX_SIZE_BYTES};
use crate::utxo::AddressBook;
use crate::workload::{TxKind, WorkloadTx};

/// Default relay policy, satoshi per kB.
pub const DEFAULT_MIN_RELAY_FEE: u64 = 1000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttackError {
    #[error("no spendable input combination covers the {needed} sat fee")]
    InsufficientFunds { needed: u64 },
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Shard(#[from] ShardError),
}

#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub target_shard: ShardId,
    pub shard_count: u32,
    pub bit_order: BitOrder,
    /// Spendable wallet (`I`) inside the full address set (`O`).
    pub funded: AddressBook,
    /// Satoshi per kB.
    pub min_relay_fee: u64,
    pub worker_count: usize,
    pub rng_seed: u64,
    pub inputs_per_tx: usize,
    pub max_outputs: usize,
    pub size_bytes: u32,
}

impl AttackConfig {
    pub fn new(target_shard: u32, shard_count: u32, funded: AddressBook) -> Result<Self, AttackError> {
        let cfg = AttackConfig {
            target_shard: ShardId::new(target_shard, shard_count)?,
            shard_count,
            bit_order: BitOrder::BigEndian,
            funded,
            min_relay_fee: DEFAULT_MIN_RELAY_FEE,
            worker_count: 1,
            rng_seed: 0,
            inputs_per_tx: 1,
            max_outputs: 2,
            size_bytes: DEFAULT_TX_SIZE_BYTES,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        ShardId::new(self.target_shard.0, self.shard_count)?;
        if self.min_relay_fee == 0 {
            return Err(AttackError::InvalidConfig("min relay fee must be positive".into()));
        }
        if self.worker_count == 0 || self.inputs_per_tx == 0 || self.max_outputs == 0 {
            return Err(AttackError::InvalidConfig("worker, input and output counts must be positive".into()));
        }
        if self.size_bytes == 0 {
            return Err(AttackError::InvalidConfig("size must be positive".into()));
        }
        Ok(())
    }

    pub fn fee(&self) -> u64 {
        min_fee(self.min_relay_fee, self.size_bytes)
    }
}

/// Smallest fee satisfying the relay policy for a transaction of `size_bytes`.
pub fn min_fee(min_relay_fee_per_kb: u64, size_bytes: u32) -> u64 {
    (min_relay_fee_per_kb * size_bytes as u64).div_ceil(1000)
}

/// Total cost in USD of `tx_count` minimum-fee transactions.
pub fn attack_cost(tx_count: u64, min_relay_fee_per_kb: u64, avg_size_bytes: u32, usd_per_satoshi: f64) -> f64 {
    let sat = tx_count as u128 * min_fee(min_relay_fee_per_kb, avg_size_bytes) as u128;
    sat as f64 * usd_per_satoshi
}

#[derive(Clone, Debug)]
pub struct MaliciousTx {
    pub tx: Transaction,
    pub txid: TxId,
    /// Hashes computed to find this transaction.
    pub attempts: u64,
}

struct Selected {
    coins: Vec<(Address, Outpoint, u64)>,
    /// Positions of `coins` in the grinder's coin cache.
    slots: Vec<usize>,
    total: u64,
}

/// One grinding worker: owns its wallet share and RNG.
pub struct Grinder {
    target: ShardId,
    sharder: HashSharder,
    fee: u64,
    inputs_per_tx: usize,
    max_outputs: usize,
    size_bytes: u32,
    destinations: Vec<Address>,
    book: AddressBook,
    rng: ChaCha8Rng,
    buf: Vec<u8>,
    // Candidate under construction, reused so the loop does not allocate.
    scratch: Transaction,
    // Flat copy of the wallet's coins for O(1) sampling.
    coins: Vec<(Address, Outpoint, u64)>,
    hashes: u64,
}


impl Grinder {
    pub fn new(cfg: &AttackConfig) -> Result<Self, AttackError> {
        Self::for_worker(cfg, cfg.funded.clone(), 0)
    }

    pub fn for_worker(cfg: &AttackConfig, book: AddressBook, worker: usize) -> Result<Self, AttackError> {
        cfg.validate()?;
        let destinations = cfg.funded.address_list();
        if destinations.is_empty() {
            return Err(AttackError::InvalidConfig("address set is empty".into()));
        }
        let coins = book
            .funded_addresses()
            .iter()
            .flat_map(|a| book.utxos(a).iter().map(move |&(op, v)| (*a, op, v)))
            .collect();
        Ok(Grinder {
            target: cfg.target_shard,
            sharder: HashSharder::with_order(cfg.shard_count, cfg.bit_order)?,
            fee: cfg.fee(),
            inputs_per_tx: cfg.inputs_per_tx,
            max_outputs: cfg.max_outputs,
            size_bytes: cfg.size_bytes,
            destinations,
            book,
            rng: ChaCha8Rng::seed_from_u64(worker_seed(cfg.rng_seed, worker)),
            buf: Vec::with_capacity(256),
            scratch: Transaction::default(),
            coins,
            hashes: 0,
        })
    }

    pub fn target(&self) -> ShardId {
        self.target
    }

    pub fn hashes(&self) -> u64 {
        self.hashes
    }

    pub fn book(&self) -> &AddressBook {
        &self.book
    }

    /// Produce one transaction routed to the target shard and remove its
    /// inputs from the wallet.
    pub fn generate(&mut self) -> Result<MaliciousTx, AttackError> {
        let sel = self.select_inputs()?;
        let (txid, attempts) = self.grind(&sel);
        for (addr, op, _) in &sel.coins {
            self.book.spend(addr, op);
        }
        let mut slots = sel.slots;
        slots.sort_unstable_by(|a, b| b.cmp(a));
        for i in slots {
            self.coins.swap_remove(i);
        }
        Ok(MaliciousTx { tx: self.scratch.clone(), txid, attempts })
    }

    /// Same as [`Grinder::generate`] but leaves the wallet untouched, for
    /// throughput benchmarks.
    pub fn generate_unspent(&mut self) -> Result<MaliciousTx, AttackError> {
        let sel = self.select_inputs()?;
        let (txid, attempts) = self.grind(&sel);
        Ok(MaliciousTx { tx: self.scratch.clone(), txid, attempts })
    }

    /// Grind one unspent candidate without materializing it; returns the
    /// attempts it took.
    fn grind_unspent(&mut self) -> Result<u64, AttackError> {
        let sel = self.select_inputs()?;
        Ok(self.grind(&sel).1)
    }

    fn select_inputs(&mut self) -> Result<Selected, AttackError> {
        let needed = self.fee;
        if self.coins.is_empty() || self.book.total_balance() < needed {
            return Err(AttackError::InsufficientFunds { needed });
        }
        let want = self.inputs_per_tx.min(self.coins.len());
        let mut slots: Vec<usize> = Vec::with_capacity(want);
        for _ in 0..64 {
            slots.clear();
            let mut guard = 0;
            while slots.len() < want && guard < 4 * want {
                guard += 1;
                let i = self.rng.gen_range(0..self.coins.len());
                if !slots.contains(&i) {
                    slots.push(i);
                }
            }
            let total: u64 = slots.iter().map(|&i| self.coins[i].2).sum();
            if total >= needed {
                let coins = slots.iter().map(|&i| self.coins[i]).collect();
                return Ok(Selected { coins, slots, total });
            }
        }
        // Random draws keep failing: fall back to the largest coins.
        let mut order: Vec<usize> = (0..self.coins.len()).collect();
        order.sort_by(|&a, &b| self.coins[b].2.cmp(&self.coins[a].2).then(self.coins[a].1.cmp(&self.coins[b].1)));
        order.truncate(self.inputs_per_tx);
        let total: u64 = order.iter().map(|&i| self.coins[i].2).sum();
        if total >= needed {
            let coins = order.iter().map(|&i| self.coins[i]).collect();
            Ok(Selected { coins, slots: order, total })
        } else {
            Err(AttackError::InsufficientFunds { needed })
        }
    }

    /// The inner loop: resample outputs until the digest lands in the target.
    /// Leaves the winning candidate in `self.scratch`.
    fn grind(&mut self, sel: &Selected) -> (TxId, u64) {
        let change = sel.total - self.fee;
        let tx = &mut self.scratch;
        tx.inputs.clear();
        tx.inputs.extend(sel.coins.iter().map(|c| c.1));
        tx.size_bytes = self.size_bytes;
        let mut attempts = 0u64;
        loop {
            attempts += 1;
            let k = self.rng.gen_range(1..=self.max_outputs);
            tx.outputs.clear();
            let mut left = change;
            for i in 0..k {
                let value = if i + 1 == k { left } else { self.rng.gen_range(0..=left) };
                left -= value;
                let address = self.destinations[self.rng.gen_range(0..self.destinations.len())];
                tx.outputs.push(TxOut { address, value });
            }
            // Output resampling alone revisits candidates (a single output
            // has only |O| variants), which would correlate attempts.
            tx.nonce.clear();
            tx.nonce.extend_from_slice(&(self.hashes + attempts).to_le_bytes());
            self.buf.clear();
            tx.serialize_into(&mut self.buf);
            let txid = double_sha256(&self.buf);
            if self.sharder.shard_for(&txid) == self.target {
                self.hashes += attempts;
                return (txid, attempts);
            }
        }
    }
}

fn worker_seed(seed: u64, worker: usize) -> u64 {
    // splitmix64 step keeps nearby (seed, worker) pairs far apart.
    let mut z = seed ^ (worker as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generate one malicious transaction with a caller-supplied RNG, spending
/// from `cfg.funded`.
pub fn generate_malicious_tx<R: Rng + ?Sized>(cfg: &mut AttackConfig, rng: &mut R) -> Result<MaliciousTx, AttackError> {
    let mut g = Grinder::for_worker(cfg, cfg.funded.clone(), 0)?;
    g.rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let res = g.generate();
    cfg.funded = g.book;
    res
}

/// (hashes at success, worker index, transaction)
type Ranked = (u64, usize, MaliciousTx);

/// Generate `count` transactions over `cfg.worker_count` threads. Each worker
/// grinds on its own slice of the wallet; results are ordered by each
/// worker's cumulative hash count at the time of success, then worker index.
pub fn generate_batch(cfg: &AttackConfig, count: usize) -> Result<Vec<MaliciousTx>, AttackError> {
    let workers = cfg.worker_count.max(1);
    let books = if workers == 1 { vec![cfg.funded.clone()] } else { cfg.funded.partition(workers) };
    let results: Vec<Result<Vec<Ranked>, AttackError>> = std::thread::scope(|s| {
        let handles: Vec<_> = books
            .into_iter()
            .enumerate()
            .map(|(w, book)| {
                let quota = count / workers + usize::from(w < count % workers);
                s.spawn(move || {
                    let mut g = Grinder::for_worker(cfg, book, w)?;
                    let mut out = Vec::with_capacity(quota);
                    for _ in 0..quota {
                        let m = g.generate()?;
                        out.push((g.hashes(), w, m));
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("grinder thread panicked")).collect()
    });
    let mut merged = Vec::with_capacity(count);
    for r in results {
        merged.extend(r?);
    }
    merged.sort_by_key(|(stamp, w, _)| (*stamp, *w));
    Ok(merged.into_iter().map(|(_, _, m)| m).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct RateReport {
    pub shards: u32,
    pub workers: usize,
    pub seconds: f64,
    pub hashes: u64,
    pub malicious: u64,
    pub hashes_per_sec: f64,
    pub malicious_per_sec: f64,
}

/// Grind without spending for `duration` and report hash and hit rates.
pub fn bench_generation(cfg: &AttackConfig, duration: Duration) -> Result<RateReport, AttackError> {
    if duration.is_zero() {
        return Err(AttackError::InvalidConfig("duration must be positive".into()));
    }
    let workers = cfg.worker_count.max(1);
    let stop = AtomicBool::new(false);
    let start = Instant::now();
    let counts: Vec<Result<(u64, u64), AttackError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let stop = &stop;
                s.spawn(move || {
                    let mut g = Grinder::for_worker(cfg, cfg.funded.clone(), w)?;
                    let mut found = 0u64;
                    while !stop.load(Ordering::Relaxed) {
                        g.grind_unspent()?;
                        found += 1;
                    }
                    Ok((g.hashes(), found))
                })
            })
            .collect();
        while start.elapsed() < duration {
            std::thread::sleep(Duration::from_millis(5).min(duration.saturating_sub(start.elapsed())));
        }
        stop.store(true, Ordering::Relaxed);
        handles.into_iter().map(|h| h.join().expect("bench thread panicked")).collect()
    });
    let seconds = start.elapsed().as_secs_f64();
    let (mut hashes, mut malicious) = (0, 0);
    for c in counts {
        let (h, m) = c?;
        hashes += h;
        malicious += m;
    }
    Ok(RateReport {
        shards: cfg.shard_count,
        workers,
        seconds,
        hashes,
        malicious,
        hashes_per_sec: hashes as f64 / seconds,
        malicious_per_sec: malicious as f64 / seconds,
    })
}

/// Attacker wallet plus the genesis records that fund it.
pub struct AttackerFunding {
    pub book: AddressBook,
    pub genesis: Vec<WorkloadTx>,
    /// The funding transactions behind `genesis`, in the same order.
    pub transactions: Vec<Transaction>,
}

/// Create `utxos` coins of `value` sat spread over `addresses` funded
/// addresses, plus as many unfunded destination addresses.
pub fn fund_attacker<R: Rng + ?Sized>(
    rng: &mut R,
    utxos: usize,
    addresses: usize,
    value: u64,
    outputs_per_tx: usize,
) -> AttackerFunding {
    let addresses = addresses.max(1);
    let outputs_per_tx = outputs_per_tx.max(1);
    let mut book = AddressBook::with_random_addresses(rng, addresses * 2);
    let payees: Vec<Address> = book.address_list().into_iter().take(addresses).collect();
    let mut genesis = Vec::new();
    let mut transactions = Vec::new();
    let mut made = 0usize;
    let mut serial = 0u64;
    while made < utxos {
        let n = outputs_per_tx.min(utxos - made);
        let outputs: Vec<TxOut> =
            (0..n).map(|i| TxOut { address: payees[(made + i) % payees.len()], value }).collect();
        let mut nonce = b"fund".to_vec();
        nonce.extend_from_slice(&serial.to_le_bytes());
        nonce.extend_from_slice(&rng.gen::<u64>().to_le_bytes());
        serial += 1;
        let tx = Transaction { inputs: Vec::new(), outputs, nonce, size_bytes: DEFAULT_TX_SIZE_BYTES };
        let txid = tx.txid();
        for (i, out) in tx.outputs.iter().enumerate() {
            book.add_utxo(out.address, Outpoint::new(txid, i as u32), out.value);
        }
        genesis.push(WorkloadTx::from_tx(&tx, TxKind::Genesis));
        transactions.push(tx);
        made += n;
    }
    AttackerFunding { book, genesis, transactions }
}

/// Interleaves grinder output with a legitimate source at a fixed total rate.
/// Genesis records pass through at time zero without using a slot.
pub struct AttackStream<L> {
    slot_ms: f64,
    fraction: f64,
    grinder: Option<Grinder>,
    legit: L,
    // Next legitimate record, pulled early so genesis records can pass
    // through without consuming a slot's coin flip.
    lookahead: Option<WorkloadTx>,
    rng: ChaCha8Rng,
    slot: u64,
    max_slots: Option<u64>,
    prelude: VecDeque<WorkloadTx>,
    malicious: u64,
    legit_count: u64,
}

pub fn attack_stream<L>(
    total_rate_tps: f64,
    malicious_fraction: f64,
    grinder: Option<Grinder>,
    prelude: Vec<WorkloadTx>,
    legit_source: L,
    seed: u64,
) -> Result<AttackStream<L>, AttackError>
where
    L: Iterator<Item = WorkloadTx>,
{
    if !(0.0..=1.0).contains(&malicious_fraction) {
        return Err(AttackError::InvalidConfig(format!("fraction {malicious_fraction} outside [0, 1]")));
    }
    if !(total_rate_tps > 0.0) {
        return Err(AttackError::InvalidConfig("rate must be positive".into()));
    }
    if malicious_fraction > 0.0 && grinder.is_none() {
        return Err(AttackError::InvalidConfig("malicious fraction needs a grinder".into()));
    }
    Ok(AttackStream {
        slot_ms: 1000.0 / total_rate_tps,
        fraction: malicious_fraction,
        grinder,
        legit: legit_source,
        lookahead: None,
        rng: ChaCha8Rng::seed_from_u64(seed),
        slot: 0,
        max_slots: None,
        prelude: prelude.into(),
        malicious: 0,
        legit_count: 0,
    })
}

impl<L> AttackStream<L> {
    /// Stop after this many timed slots even if the legitimate source has more.
    pub fn with_max_slots(mut self, slots: u64) -> Self {
        self.max_slots = Some(slots);
        self
    }

    pub fn malicious_emitted(&self) -> u64 {
        self.malicious
    }

    pub fn legit_emitted(&self) -> u64 {
        self.legit_count
    }

    fn slot_time(&self) -> u64 {
        (self.slot as f64 * self.slot_ms).floor() as u64
    }
}

impl<L: Iterator<Item = WorkloadTx>> Iterator for AttackStream<L> {
    type Item = WorkloadTx;

    fn next(&mut self) -> Option<WorkloadTx> {
        if let Some(g) = self.prelude.pop_front() {
            return Some(g.at(0));
        }
        if self.lookahead.is_none() {
            self.lookahead = self.legit.next();
        }
        if self.lookahead.as_ref().is_some_and(|r| r.kind == TxKind::Genesis) {
            return self.lookahead.take().map(|r| r.at(0));
        }
        if self.max_slots.is_some_and(|m| self.slot >= m) {
            return None;
        }
        let attack = self.fraction > 0.0 && self.rng.gen_bool(self.fraction);
        if attack {
            if let Some(g) = self.grinder.as_mut() {
                match g.generate() {
                    Ok(m) => {
                        let rec = WorkloadTx::from_tx(&m.tx, TxKind::Malicious).at(self.slot_time());
                        self.slot += 1;
                        self.malicious += 1;
                        return Some(rec);
                    }
                    Err(e) => {
                        log::warn!("attacker stopped: {e}");
                        self.grinder = None;
                        self.fraction = 0.0;
                    }
                }
            }
        }
        let rec = self.lookahead.take()?.at(self.slot_time());
        self.slot += 1;
        self.legit_count += 1;
        Some(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashshard::shard_of;
    use crate::utxo::UtxoSet;

    fn funded_cfg(n: u32, target: u32, utxos: usize, seed: u64) -> (AttackConfig, Vec<WorkloadTx>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = fund_attacker(&mut rng, utxos, 64, 100_000, 100);
        let mut cfg = AttackConfig::new(target, n, f.book).unwrap();
        cfg.rng_seed = seed;
        (cfg, f.genesis)
    }

    #[test]
    fn fee_and_cost_arithmetic() {
        assert_eq!(min_fee(1000, 500), 500);
        assert_eq!(min_fee(1000, 1), 1);
        assert_eq!(attack_cost(2500, 1000, 500, 0.10 / 1000.0), 125.0);
        assert_eq!(attack_cost(1, 1000, 500, 0.10 / 1000.0), 0.05);
        assert_eq!(attack_cost(0, 1000, 500, 0.10 / 1000.0), 0.0);
    }

    #[test]
    fn every_output_lands_in_the_target() {
        let (cfg, _) = funded_cfg(16, 0, 500, 1);
        let mut g = Grinder::new(&cfg).unwrap();
        for _ in 0..200 {
            let m = g.generate().unwrap();
            assert_eq!(m.txid, m.tx.txid());
            assert_eq!(m.txid.0[31] & 0x0f, 0);
            assert_eq!(shard_of(&m.txid, 16).unwrap(), ShardId(0));
            assert!(m.tx.output_value() + cfg.fee() <= 100_000);
        }
        assert!(g.book().check_invariants());
        assert_eq!(g.book().utxo_count(), 300);
    }

    #[test]
    fn single_shard_takes_one_hash() {
        let (cfg, _) = funded_cfg(1, 0, 50, 2);
        let mut g = Grinder::new(&cfg).unwrap();
        for _ in 0..50 {
            assert_eq!(g.generate().unwrap().attempts, 1);
        }
        assert!(matches!(g.generate(), Err(AttackError::InsufficientFunds { .. })));
    }

    #[test]
    fn generated_transactions_validate_against_funding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = fund_attacker(&mut rng, 100, 10, 10_000, 30);
        let mut set = UtxoSet::new();
        let mut cfg = AttackConfig::new(5, 8, f.book.clone()).unwrap();
        cfg.inputs_per_tx = 2;
        // Rebuild funding outputs in the set from the wallet view.
        for a in f.book.funded_addresses() {
            for &(op, v) in f.book.utxos(a) {
                set.create(op, TxOut { address: *a, value: v }).unwrap();
            }
        }
        let mut g = Grinder::new(&cfg).unwrap();
        let txs: Vec<Transaction> = (0..40).map(|_| g.generate().unwrap().tx).collect();
        for tx in &txs {
            assert_eq!(set.check_tx(tx).unwrap(), 500);
        }
        set.apply_block(&txs).unwrap();
    }

    #[test]
    fn tiny_address_set_still_terminates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut book = AddressBook::new();
        let a = Address::random(&mut rng);
        book.add_utxo(a, Outpoint::new(TxId([1; 32]), 0), 500);
        let cfg = AttackConfig::new(3, 64, book).unwrap();
        let mut g = Grinder::new(&cfg).unwrap();
        let m = g.generate().unwrap();
        assert_eq!(shard_of(&m.txid, 64).unwrap(), ShardId(3));
    }

    #[test]
    fn empty_or_poor_wallet_is_an_error() {
        let mut book = AddressBook::new();
        book.add_utxo(Address([1; 20]), Outpoint::new(TxId([1; 32]), 0), 499);
        let mut cfg = AttackConfig::new(0, 16, book).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            generate_malicious_tx(&mut cfg, &mut rng).unwrap_err(),
            AttackError::InsufficientFunds { needed: 500 }
        );
        assert!(AttackConfig::new(16, 16, AddressBook::new()).is_err());
    }

    #[test]
    fn single_worker_batches_are_reproducible() {
        let (cfg, _) = funded_cfg(8, 2, 300, 7);
        let a = generate_batch(&cfg, 100).unwrap();
        let b = generate_batch(&cfg, 100).unwrap();
        assert_eq!(a.iter().map(|m| m.txid).collect::<Vec<_>>(), b.iter().map(|m| m.txid).collect::<Vec<_>>());
        let mut multi = cfg.clone();
        multi.worker_count = 3;
        let c = generate_batch(&multi, 100).unwrap();
        let d = generate_batch(&multi, 100).unwrap();
        assert_eq!(c.len(), 100);
        assert_eq!(c.iter().map(|m| m.txid).collect::<Vec<_>>(), d.iter().map(|m| m.txid).collect::<Vec<_>>());
        let mut spent = std::collections::HashSet::new();
        for m in &c {
            for op in &m.tx.inputs {
                assert!(spent.insert(*op), "double spend across workers");
            }
        }
    }

    #[test]
    fn mean_attempts_match_shard_count() {
        let (cfg, _) = funded_cfg(16, 9, 10_000, 8);
        let mut g = Grinder::new(&cfg).unwrap();
        let runs = 10_000;
        for _ in 0..runs {
            g.generate_unspent().unwrap();
        }
        let mean = g.hashes() as f64 / runs as f64;
        assert!((mean - 16.0).abs() / 16.0 < 0.05, "mean {mean}");
    }

    #[test]
    fn bench_rates_are_consistent() {
        let (cfg, _) = funded_cfg(8, 0, 100, 9);
        let r = bench_generation(&cfg, Duration::from_millis(300)).unwrap();
        assert!(r.malicious > 100);
        let identity = (r.malicious_per_sec * 8.0 - r.hashes_per_sec).abs() / r.hashes_per_sec;
        assert!(identity < 0.05, "{r:?}");
    }

    #[test]
    fn stream_fractions() {
        let legit = |n: usize| {
            (0..n).map(|i| {
                let tx = Transaction { nonce: (i as u64).to_le_bytes().to_vec(), ..Default::default() };
                WorkloadTx::from_tx(&tx, TxKind::Legit)
            })
        };
        let s: Vec<_> = attack_stream(5000.0, 0.0, None, vec![], legit(1000), 1).unwrap().collect();
        assert_eq!(s.len(), 1000);
        assert!(s.iter().all(|r| r.kind == TxKind::Legit));
        assert_eq!(s[999].time_ms, Some(199));

        let (cfg, genesis) = funded_cfg(16, 0, 5_000, 10);
        let g = Grinder::new(&cfg).unwrap();
        let stream = attack_stream(5000.0, 0.1, Some(g), genesis.clone(), legit(20_000), 2).unwrap();
        let recs: Vec<_> = stream.collect();
        let mal: Vec<_> = recs.iter().filter(|r| r.kind == TxKind::Malicious).collect();
        // Malicious per simulated second, over the first four seconds.
        let first = mal.iter().filter(|r| r.time_ms.unwrap() < 4000).count() as f64 / 4.0;
        assert!((first - 500.0).abs() < 60.0, "{first}");
        assert!(mal.iter().all(|r| shard_of(&r.txid, 16).unwrap() == ShardId(0)));
        assert_eq!(recs.iter().filter(|r| r.kind == TxKind::Genesis).count(), genesis.len());

        let g = Grinder::new(&cfg).unwrap();
        let all: Vec<_> = attack_stream(100.0, 1.0, Some(g), vec![], legit(10), 3).unwrap().with_max_slots(50).collect();
        assert_eq!(all.len(), 50);
        assert!(all.iter().all(|r| r.kind == TxKind::Malicious && shard_of(&r.txid, 16).unwrap() == ShardId(0)));
    }

    #[test]
    fn genesis_records_do_not_consume_attack_slots() {
        // Every legit record is preceded by a genesis one.
        let legit = (0..2_000u64).flat_map(|i| {
            let tx = Transaction { nonce: i.to_le_bytes().to_vec(), ..Default::default() };
            [WorkloadTx::from_tx(&tx, TxKind::Genesis), WorkloadTx::from_tx(&tx, TxKind::Legit)]
        });
        let (cfg, _) = funded_cfg(4, 0, 5_000, 12);
        let g = Grinder::new(&cfg).unwrap();
        let recs: Vec<_> = attack_stream(1000.0, 0.5, Some(g), vec![], legit, 4).unwrap().with_max_slots(2_000).collect();
        let mal = recs.iter().filter(|r| r.kind == TxKind::Malicious).count();
        let spends = recs.iter().filter(|r| r.kind != TxKind::Genesis).count();
        assert_eq!(spends, 2_000);
        assert!((900..=1100).contains(&mal), "{mal}");
        assert!(recs.iter().filter(|r| r.kind == TxKind::Genesis).all(|r| r.time_ms == Some(0)));
    }
}
