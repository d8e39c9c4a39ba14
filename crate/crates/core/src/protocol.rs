//! Client/validator protocol around the placement enclave, run against an
//! ideal sharded ledger.
//!
//! A client encrypts its transaction to `k` validators' enclaves, keeps the
//! freshest correctly signed answer and hands `(S_out, st, sigma, tx)` to the
//! ledger. Validators accept it only if the signature comes from a registered
//! enclave key, `st` is within [`FRESHNESS_WINDOW`] blocks of the head and
//! the transaction is valid. [`IdealPlacement`] is the reference
//! functionality the whole arrangement should be indistinguishable from.

use std::collections::HashMap;
use std::sync::Arc;

use p256::ecdsa::signature::Signer;
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use rand::seq::SliceRandom;
use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::hashshard::{ShardError, ShardId, ShardView, TxRef, TxSharder};
use crate::tee::{
    encrypt_input, tx_root, AttestedPlacement, BalancedInputSharder, BlockHeader, Enclave, ProgramDescriptor,
    ProgramId, SealedState, TeeError, TeePlatform, TeePublicKeys,
};
use crate::tx::{Address, Outpoint, Transaction, TxId, TxOut};
use crate::utxo::{UtxoError, UtxoSet};

/// Attestations older than this many blocks are refused.
pub const FRESHNESS_WINDOW: u64 = 2;
/// Validators a client queries before picking the freshest answer.
pub const DEFAULT_QUERIES: usize = 3;

const REQUEST_TAG: u8 = 0x01;
const RESPONSE_TAG: u8 = 0x02;
const PROCESS_TAG: u8 = 0x03;
/// tag + st + s_out + signature + h_tx
pub const RESPONSE_LEN: usize = 1 + 8 + 4 + 64 + 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error(transparent)]
    Tee(#[from] TeeError),
    #[error(transparent)]
    Utxo(#[from] UtxoError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error("malformed message: {0}")]
    Wire(&'static str),
    #[error("attestation does not verify under any registered enclave key")]
    BadAttestation,
    #[error("attestation at height {st} is stale (head {head})")]
    Stale { st: u64, head: u64 },
    #[error("attestation claims height {st} beyond head {head}")]
    FromTheFuture { st: u64, head: u64 },
    #[error("validator {0} is down")]
    ValidatorDown(usize),
    #[error("no validator returned a valid attestation at the current head")]
    NoFreshAttestation,
}

// ---------------------------------------------------------------- wire format

pub fn encode_request(inp_c: &[u8]) -> Vec<u8> {
    let mut b = Vec::with_capacity(5 + inp_c.len());
    b.push(REQUEST_TAG);
    b.extend_from_slice(&(inp_c.len() as u32).to_le_bytes());
    b.extend_from_slice(inp_c);
    b
}

pub fn decode_request(b: &[u8]) -> Result<&[u8], ProtocolError> {
    if b.first() != Some(&REQUEST_TAG) || b.len() < 5 {
        return Err(ProtocolError::Wire("request header"));
    }
    let len = u32::from_le_bytes(b[1..5].try_into().expect("4 bytes")) as usize;
    if b.len() != 5 + len {
        return Err(ProtocolError::Wire("request length"));
    }
    Ok(&b[5..])
}

pub fn encode_response(p: &AttestedPlacement) -> Vec<u8> {
    let mut b = Vec::with_capacity(RESPONSE_LEN);
    b.push(RESPONSE_TAG);
    b.extend_from_slice(&p.st.to_le_bytes());
    b.extend_from_slice(&p.s_out.0.to_le_bytes());
    b.extend_from_slice(&p.sigma);
    b.extend_from_slice(&p.h_tx.0);
    b
}

pub fn decode_response(b: &[u8]) -> Result<AttestedPlacement, ProtocolError> {
    if b.len() != RESPONSE_LEN || b[0] != RESPONSE_TAG {
        return Err(ProtocolError::Wire("response"));
    }
    Ok(AttestedPlacement {
        st: u64::from_le_bytes(b[1..9].try_into().expect("8 bytes")),
        s_out: ShardId(u32::from_le_bytes(b[9..13].try_into().expect("4 bytes"))),
        sigma: b[13..77].try_into().expect("64 bytes"),
        h_tx: TxId(b[77..109].try_into().expect("32 bytes")),
    })
}

pub fn encode_process(p: &AttestedPlacement, tx: &Transaction) -> Vec<u8> {
    let body = tx.serialize();
    let mut b = Vec::with_capacity(1 + 4 + 8 + 64 + 4 + body.len());
    b.push(PROCESS_TAG);
    b.extend_from_slice(&p.s_out.0.to_le_bytes());
    b.extend_from_slice(&p.st.to_le_bytes());
    b.extend_from_slice(&p.sigma);
    b.extend_from_slice(&(body.len() as u32).to_le_bytes());
    b.extend_from_slice(&body);
    b
}

/// Returns the claimed placement (with `h_tx` recomputed from the body) and the transaction.
pub fn decode_process(b: &[u8]) -> Result<(AttestedPlacement, Transaction), ProtocolError> {
    const HEAD: usize = 1 + 4 + 8 + 64 + 4;
    if b.len() < HEAD || b[0] != PROCESS_TAG {
        return Err(ProtocolError::Wire("process header"));
    }
    let len = u32::from_le_bytes(b[77..81].try_into().expect("4 bytes")) as usize;
    if b.len() != HEAD + len {
        return Err(ProtocolError::Wire("process length"));
    }
    let tx = Transaction::deserialize(&b[HEAD..]).map_err(|_| ProtocolError::Wire("process body"))?;
    let p = AttestedPlacement {
        s_out: ShardId(u32::from_le_bytes(b[1..5].try_into().expect("4 bytes"))),
        st: u64::from_le_bytes(b[5..13].try_into().expect("8 bytes")),
        sigma: b[13..77].try_into().expect("64 bytes"),
        h_tx: tx.txid(),
    };
    Ok((p, tx))
}

// ---------------------------------------------------------------- ideal ledger

#[derive(Clone, Debug)]
pub struct LoggedBlock {
    pub header: BlockHeader,
    pub txs: Vec<Transaction>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct ShardDb {
    txs: HashMap<TxId, Transaction>,
    order: Vec<TxId>,
    head: [u8; 32],
    height: u64,
    load: u64,
}

/// Sharded ledger that appends one block per accepted write. The global
/// block count is the state height enclaves attest to.
#[derive(Clone, Debug)]
pub struct IdealBlockchain {
    shards: u32,
    utxo: UtxoSet,
    homes: HashMap<Outpoint, u32>,
    dbs: Vec<ShardDb>,
    log: Vec<LoggedBlock>,
}

impl IdealBlockchain {
    pub fn new(shards: u32) -> Result<Self, ProtocolError> {
        if shards == 0 {
            return Err(ShardError::ZeroShards.into());
        }
        Ok(IdealBlockchain {
            shards,
            utxo: UtxoSet::new(),
            homes: HashMap::new(),
            dbs: vec![ShardDb::default(); shards as usize],
            log: Vec::new(),
        })
    }

    pub fn shards(&self) -> u32 {
        self.shards
    }

    /// Number of blocks across all shards.
    pub fn height(&self) -> u64 {
        self.log.len() as u64
    }

    /// Blocks appended at or after global height `from`.
    pub fn blocks_from(&self, from: u64) -> &[LoggedBlock] {
        &self.log[(from as usize).min(self.log.len())..]
    }

    pub fn read(&self, shard: ShardId, txid: &TxId) -> Option<&Transaction> {
        self.dbs.get(shard.index())?.txs.get(txid)
    }

    /// Transaction ids committed to `shard`, in commit order.
    pub fn shard_txids(&self, shard: ShardId) -> &[TxId] {
        self.dbs.get(shard.index()).map_or(&[], |d| &d.order)
    }

    pub fn is_unspent(&self, op: &Outpoint) -> bool {
        self.utxo.contains(op)
    }

    pub fn value_of(&self, op: &Outpoint) -> Option<u64> {
        self.utxo.get(op).map(|o| o.value)
    }

    /// Append a funding block holding input-less transactions.
    pub fn seed_genesis(&mut self, shard: ShardId, txs: Vec<Transaction>) -> Result<BlockHeader, ProtocolError> {
        ShardId::new(shard.0, self.shards)?;
        for tx in &txs {
            if !tx.inputs.is_empty() {
                return Err(ProtocolError::Wire("genesis transactions take no inputs"));
            }
            self.utxo.add_outputs(tx.txid(), tx)?;
        }
        Ok(self.append(shard, txs))
    }

    /// Validate `tx` against the ledger and commit it to `shard` as one block.
    pub fn write(&mut self, shard: ShardId, tx: Transaction) -> Result<BlockHeader, ProtocolError> {
        ShardId::new(shard.0, self.shards)?;
        self.utxo.apply_block(std::slice::from_ref(&tx))?;
        for op in &tx.inputs {
            self.homes.remove(op);
        }
        Ok(self.append(shard, vec![tx]))
    }

    fn append(&mut self, shard: ShardId, txs: Vec<Transaction>) -> BlockHeader {
        let ids: Vec<TxId> = txs.iter().map(Transaction::txid).collect();
        let db = &mut self.dbs[shard.index()];
        let header = BlockHeader { shard: shard.0, height: db.height + 1, prev: db.head, tx_root: tx_root(&ids) };
        db.height += 1;
        db.head = header.hash();
        db.load += txs.len() as u64;
        for (id, tx) in ids.iter().zip(&txs) {
            for i in 0..tx.outputs.len() as u32 {
                self.homes.insert(Outpoint::new(*id, i), shard.0);
            }
            db.txs.insert(*id, tx.clone());
            db.order.push(*id);
        }
        self.log.push(LoggedBlock { header, txs });
        header
    }
}

impl ShardView for IdealBlockchain {
    fn shard_count(&self) -> u32 {
        self.shards
    }
    fn input_shard(&self, op: &Outpoint) -> Option<ShardId> {
        self.homes.get(op).map(|&s| ShardId(s))
    }
    fn load(&self, shard: ShardId) -> u64 {
        self.dbs.get(shard.index()).map_or(0, |d| d.load)
    }
}

/// Reference functionality: place each transaction with the balanced rule
/// against the true current state, then write it.
#[derive(Clone, Debug)]
pub struct IdealPlacement {
    chain: IdealBlockchain,
}

impl IdealPlacement {
    pub fn new(shards: u32) -> Result<Self, ProtocolError> {
        Ok(IdealPlacement { chain: IdealBlockchain::new(shards)? })
    }

    pub fn seed_genesis(&mut self, shard: ShardId, txs: Vec<Transaction>) -> Result<BlockHeader, ProtocolError> {
        self.chain.seed_genesis(shard, txs)
    }

    pub fn place(&self, tx: &Transaction) -> Result<ShardId, ProtocolError> {
        let id = tx.txid();
        Ok(BalancedInputSharder.place(TxRef { txid: &id, inputs: &tx.inputs }, &self.chain)?)
    }

    pub fn newtx(&mut self, tx: Transaction) -> Result<ShardId, ProtocolError> {
        let s = self.place(&tx)?;
        self.chain.write(s, tx)?;
        Ok(s)
    }

    pub fn read(&self, shard: ShardId, txid: &TxId) -> Option<&Transaction> {
        self.chain.read(shard, txid)
    }

    pub fn chain(&self) -> &IdealBlockchain {
        &self.chain
    }
}

// ---------------------------------------------------------------- validators

/// Attestation keys of enclaves that passed remote attestation.
#[derive(Clone, Debug, Default)]
pub struct KeyRegistry {
    prog: Option<ProgramId>,
    keys: Vec<VerifyingKey>,
}

impl KeyRegistry {
    pub fn new(prog: ProgramId) -> Self {
        KeyRegistry { prog: Some(prog), keys: Vec::new() }
    }

    pub fn register(&mut self, key: VerifyingKey) {
        if !self.keys.contains(&key) {
            self.keys.push(key);
        }
    }

    pub fn verifies(&self, p: &AttestedPlacement) -> bool {
        let Some(prog) = &self.prog else { return false };
        self.keys.iter().any(|k| p.verify(prog, k))
    }

    pub fn verifies_with(&self, p: &AttestedPlacement, key: &VerifyingKey) -> bool {
        self.prog.as_ref().is_some_and(|prog| self.keys.contains(key) && p.verify(prog, key))
    }
}

/// Validator-side handling of a process message: signature, freshness, then
/// ledger validity.
pub fn validator_process(
    chain: &mut IdealBlockchain,
    registry: &KeyRegistry,
    msg: &[u8],
) -> Result<BlockHeader, ProtocolError> {
    let (p, tx) = decode_process(msg)?;
    if !registry.verifies(&p) {
        return Err(ProtocolError::BadAttestation);
    }
    let head = chain.height();
    if p.st > head {
        return Err(ProtocolError::FromTheFuture { st: p.st, head });
    }
    if head - p.st > FRESHNESS_WINDOW {
        return Err(ProtocolError::Stale { st: p.st, head });
    }
    chain.write(p.s_out, tx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    Honest,
    /// Runs no enclave and signs with a key nobody registered.
    NoTee,
    /// Rewrites the shard in the enclave's answer.
    TamperShard,
    /// Corrupts the signature bytes.
    TamperSignature,
    /// Feeds its enclave blocks late, so answers carry an old height.
    Lagging,
    /// Answers with an attestation for some other transaction.
    WrongTx,
}

/// How far behind the head a lagging validator keeps its enclave.
const LAG_BLOCKS: u64 = 4;

pub struct Validator {
    pub id: usize,
    pub behavior: Behavior,
    prog: ProgramDescriptor,
    platform: Arc<TeePlatform>,
    enclave: Option<Enclave>,
    sealed: Vec<SealedState>,
    rogue: SigningKey,
    last_answer: Option<AttestedPlacement>,
}

impl Validator {
    pub fn new<R: RngCore + CryptoRng>(
        id: usize,
        behavior: Behavior,
        prog: &ProgramDescriptor,
        rng: &mut R,
    ) -> Result<Self, ProtocolError> {
        let platform = TeePlatform::new(rng);
        let mut enclave = Enclave::launch(platform.clone());
        enclave.install(prog)?;
        Ok(Validator {
            id,
            behavior,
            prog: prog.clone(),
            platform,
            enclave: Some(enclave),
            sealed: Vec::new(),
            rogue: SigningKey::random(rng),
            last_answer: None,
        })
    }

    pub fn public_keys(&self) -> TeePublicKeys {
        self.platform.public_keys()
    }

    /// Whether this validator's enclave key belongs in the registry.
    pub fn attested(&self) -> bool {
        self.behavior != Behavior::NoTee
    }

    pub fn is_up(&self) -> bool {
        self.enclave.is_some()
    }

    pub fn enclave_height(&self) -> Option<u64> {
        self.enclave.as_ref().and_then(Enclave::state_height)
    }

    /// Feed the enclave every block it has not seen, up to `target`.
    pub fn sync_to(&mut self, chain: &IdealBlockchain, target: u64) -> Result<u64, ProtocolError> {
        let enclave = self.enclave.as_mut().ok_or(ProtocolError::ValidatorDown(self.id))?;
        let from = enclave.state_height().unwrap_or(0);
        let target = target.min(chain.height());
        if target > from {
            for b in &chain.blocks_from(from)[..(target - from) as usize] {
                enclave.update_state(&b.header, &b.txs)?;
            }
        }
        Ok(enclave.state_height().unwrap_or(0))
    }

    pub fn sync(&mut self, chain: &IdealBlockchain) -> Result<u64, ProtocolError> {
        let target = match self.behavior {
            Behavior::Lagging => chain.height().saturating_sub(LAG_BLOCKS),
            // Its enclave is never consulted.
            Behavior::NoTee => return Ok(0),
            _ => chain.height(),
        };
        self.sync_to(chain, target)
    }

    /// Answer a placement request, applying this validator's behavior.
    pub fn handle_request(&mut self, chain: &IdealBlockchain, request: &[u8]) -> Result<Vec<u8>, ProtocolError> {
        if !self.is_up() {
            return Err(ProtocolError::ValidatorDown(self.id));
        }
        self.sync(chain)?;
        let inp_c = decode_request(request)?;
        let enclave = self.enclave.as_ref().expect("checked up");
        let mut p = match self.behavior {
            Behavior::NoTee => {
                // Guess a placement and sign it with an unregistered key.
                let st = chain.height();
                let h_tx = TxId([0; 32]);
                let msg = AttestedPlacement::signed_message(&self.prog.id(), ShardId(0), st, &h_tx);
                let sig: Signature = self.rogue.sign(&msg);
                AttestedPlacement { s_out: ShardId(0), st, sigma: sig.to_bytes().into(), h_tx }
            }
            _ => enclave.resume(inp_c)?,
        };
        match self.behavior {
            Behavior::TamperShard => p.s_out = ShardId((p.s_out.0 + 1) % self.prog.shards),
            Behavior::TamperSignature => p.sigma[7] ^= 0x40,
            Behavior::WrongTx => {
                if let Some(prev) = self.last_answer.filter(|prev| prev.h_tx != p.h_tx) {
                    self.last_answer = Some(p);
                    p = prev;
                } else {
                    self.last_answer = Some(p);
                }
            }
            _ => {}
        }
        Ok(encode_response(&p))
    }

    /// Seal the enclave state and keep the blob, as a host would on disk.
    pub fn checkpoint(&mut self) -> Result<u64, ProtocolError> {
        let enclave = self.enclave.as_ref().ok_or(ProtocolError::ValidatorDown(self.id))?;
        let sealed = enclave.seal()?;
        let v = sealed.version().expect("fresh blob has a version");
        self.sealed.push(sealed);
        Ok(v)
    }

    pub fn sealed_versions(&self) -> &[SealedState] {
        &self.sealed
    }

    pub fn kill(&mut self) {
        self.enclave = None;
    }

    /// Launch a fresh enclave, restore the newest sealed state and replay
    /// ledger blocks up to `catch_up_to`.
    pub fn restart(&mut self, chain: &IdealBlockchain, catch_up_to: u64) -> Result<u64, ProtocolError> {
        let mut enclave = Enclave::launch(self.platform.clone());
        enclave.install(&self.prog)?;
        if let Some(latest) = self.sealed.last() {
            enclave.restore(latest)?;
        }
        self.enclave = Some(enclave);
        self.sync_to(chain, catch_up_to)
    }

    /// Try to restore an arbitrary sealed blob into the running enclave.
    pub fn restore(&mut self, sealed: &SealedState) -> Result<u64, ProtocolError> {
        let enclave = self.enclave.as_mut().ok_or(ProtocolError::ValidatorDown(self.id))?;
        Ok(enclave.restore(sealed)?)
    }
}

// ---------------------------------------------------------------- client

/// Network tampering applied to messages in transit.
pub trait Channel {
    fn carry(&mut self, msg: Vec<u8>) -> Vec<u8>;
}

pub struct Reliable;

impl Channel for Reliable {
    fn carry(&mut self, msg: Vec<u8>) -> Vec<u8> {
        msg
    }
}

/// Flips one random byte with probability `rate`.
pub struct Flaky<R> {
    pub rng: R,
    pub rate: f64,
    pub mutated: u64,
}

impl<R: Rng> Channel for Flaky<R> {
    fn carry(&mut self, mut msg: Vec<u8>) -> Vec<u8> {
        if !msg.is_empty() && self.rng.gen_bool(self.rate) {
            let i = self.rng.gen_range(0..msg.len());
            msg[i] ^= 1 << self.rng.gen_range(0..8);
            self.mutated += 1;
        }
        msg
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ClientStats {
    pub queried: u64,
    pub failed_requests: u64,
    pub bad_responses: u64,
    pub stale_responses: u64,
}

#[derive(Clone, Debug)]
pub struct Submitted {
    pub placement: AttestedPlacement,
    pub header: BlockHeader,
}

pub struct Client<R> {
    pub k: usize,
    rng: R,
    pub stats: ClientStats,
}

impl<R: RngCore + CryptoRng> Client<R> {
    pub fn new(k: usize, rng: R) -> Self {
        Client { k: k.max(1), rng, stats: ClientStats::default() }
    }

    /// Ask validators for an attestation of `tx`. Queries `k` at random and
    /// keeps going through the rest until one answers at the current head.
    pub fn attest(
        &mut self,
        tx: &Transaction,
        validators: &mut [Validator],
        chain: &IdealBlockchain,
        registry: &KeyRegistry,
        channel: &mut dyn Channel,
    ) -> Result<AttestedPlacement, ProtocolError> {
        let body = tx.serialize();
        let h_tx = tx.txid();
        let mut order: Vec<usize> = (0..validators.len()).collect();
        order.shuffle(&mut self.rng);
        let head = chain.height();
        let mut best: Option<AttestedPlacement> = None;
        for (asked, &i) in order.iter().enumerate() {
            if asked >= self.k && best.is_some_and(|b| b.st == head) {
                break;
            }
            let v = &mut validators[i];
            self.stats.queried += 1;
            let inp_c = encrypt_input(&v.public_keys().encryption, &body, &mut self.rng);
            let request = channel.carry(encode_request(&inp_c));
            let answer = match v.handle_request(chain, &request) {
                Ok(r) => channel.carry(r),
                Err(e) => {
                    log::debug!("validator {i}: {e}");
                    self.stats.failed_requests += 1;
                    continue;
                }
            };
            let p = match decode_response(&answer) {
                Ok(p) => p,
                Err(_) => {
                    self.stats.bad_responses += 1;
                    continue;
                }
            };
            if p.h_tx != h_tx || !registry.verifies_with(&p, &v.public_keys().attestation) {
                self.stats.bad_responses += 1;
                continue;
            }
            if p.st != head {
                self.stats.stale_responses += 1;
            }
            if best.is_none_or(|b| p.st > b.st) {
                best = Some(p);
            }
        }
        match best {
            Some(b) if b.st == head => Ok(b),
            _ => Err(ProtocolError::NoFreshAttestation),
        }
    }

    pub fn submit(
        &mut self,
        tx: &Transaction,
        validators: &mut [Validator],
        chain: &mut IdealBlockchain,
        registry: &KeyRegistry,
        channel: &mut dyn Channel,
    ) -> Result<Submitted, ProtocolError> {
        let placement = self.attest(tx, validators, chain, registry, channel)?;
        let header = validator_process(chain, registry, &encode_process(&placement, tx))?;
        Ok(Submitted { placement, header })
    }
}

// ---------------------------------------------------------------- harness

#[derive(Clone, Debug, Serialize)]
pub struct HarnessConfig {
    pub shards: u32,
    pub transactions: usize,
    pub honest_validators: usize,
    pub queries: usize,
    /// Chance per step that a corrupted client also sends a forged process message.
    pub forgery_rate: f64,
    /// Chance that a request or response is bit-flipped in transit.
    pub mutation_rate: f64,
    /// Kill and restart one honest validator every this many transactions.
    pub restart_every: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            shards: 8,
            transactions: 10_000,
            honest_validators: 6,
            queries: DEFAULT_QUERIES,
            forgery_rate: 0.15,
            mutation_rate: 0.03,
            restart_every: 1_000,
            checkpoint_every: 250,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct HarnessReport {
    pub committed: u64,
    pub submit_failures: u64,
    /// Commits whose shard differs from the reference placement.
    pub misplaced: u64,
    pub forgeries: u64,
    pub forgeries_accepted: u64,
    pub forgeries_by_kind: HashMap<&'static str, u64>,
    pub restarts: u64,
    /// Restarted enclaves whose answer to a probe differed from before the kill.
    pub restart_mismatches: u64,
    pub rollbacks_attempted: u64,
    pub rollbacks_rejected: u64,
    pub mutated_messages: u64,
    /// Per-shard commit order equals the reference ledger's.
    pub ledgers_match: bool,
    pub client: ClientStats,
}

struct Wallet {
    coins: Vec<Outpoint>,
}

/// Runs honest clients alongside misbehaving validators, a tampering network,
/// validator crashes and a forging client, and compares every commit with
/// [`IdealPlacement`].
pub fn run_harness(cfg: &HarnessConfig) -> Result<HarnessReport, ProtocolError> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let prog = ProgramDescriptor::balanced(cfg.shards);
    let mut registry = KeyRegistry::new(prog.id());
    let mut validators = Vec::new();
    let faulty = [Behavior::NoTee, Behavior::TamperShard, Behavior::TamperSignature, Behavior::Lagging, Behavior::WrongTx];
    for (i, b) in std::iter::repeat_n(Behavior::Honest, cfg.honest_validators).chain(faulty).enumerate() {
        let v = Validator::new(i, b, &prog, &mut rng)?;
        if v.attested() {
            registry.register(v.public_keys().attestation);
        }
        validators.push(v);
    }

    let mut chain = IdealBlockchain::new(cfg.shards)?;
    let mut oracle = IdealPlacement::new(cfg.shards)?;
    let mut wallet = Wallet { coins: Vec::new() };
    let mut attacker = Wallet { coins: Vec::new() };
    for s in 0..cfg.shards {
        let txs: Vec<Transaction> = (0..4u64)
            .map(|i| Transaction {
                inputs: vec![],
                outputs: (0..16).map(|_| TxOut { address: Address::random(&mut rng), value: 1_000_000 }).collect(),
                nonce: [s as u64, i].iter().flat_map(|x| x.to_le_bytes()).collect(),
                ..Default::default()
            })
            .collect();
        for (i, tx) in txs.iter().enumerate() {
            let id = tx.txid();
            let dest = if i == 0 { &mut attacker } else { &mut wallet };
            dest.coins.extend((0..16).map(|o| Outpoint::new(id, o)));
        }
        chain.seed_genesis(ShardId(s), txs.clone())?;
        oracle.seed_genesis(ShardId(s), txs)?;
    }

    let mut report = HarnessReport::default();
    let mut client = Client::new(cfg.queries, ChaCha20Rng::seed_from_u64(cfg.seed ^ 1));
    let mut channel = Flaky { rng: ChaCha20Rng::seed_from_u64(cfg.seed ^ 2), rate: cfg.mutation_rate, mutated: 0 };
    let mut forger = Forger::new(&mut rng);
    let victim = 0usize;

    for step in 0..cfg.transactions {
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && validators[victim].is_up() {
            validators[victim].sync(&chain)?;
            validators[victim].checkpoint()?;
        }
        if cfg.restart_every > 0 && step > 0 && step % cfg.restart_every == 0 {
            restart_cycle(&mut validators[victim], &chain, &mut forger, &attacker, &mut report, &mut rng)?;
        }

        let tx = spend_from(&mut wallet, &chain, &mut rng);
        match client.submit(&tx, &mut validators, &mut chain, &registry, &mut channel) {
            Ok(done) => {
                let reference = oracle.newtx(tx.clone())?;
                report.committed += 1;
                if reference != done.placement.s_out {
                    report.misplaced += 1;
                }
                let id = tx.txid();
                wallet.coins.retain(|c| !tx.inputs.contains(c));
                wallet.coins.extend((0..tx.outputs.len() as u32).map(|i| Outpoint::new(id, i)));
            }
            Err(e) => {
                log::debug!("submission failed: {e}");
                report.submit_failures += 1;
            }
        }

        if rng.gen_bool(cfg.forgery_rate) {
            let (kind, msg) = forger.forge(&attacker, &mut validators, &chain, &registry, &mut rng)?;
            report.forgeries += 1;
            *report.forgeries_by_kind.entry(kind).or_default() += 1;
            if validator_process(&mut chain, &registry, &msg).is_ok() {
                report.forgeries_accepted += 1;
                // Keep the reference ledger aligned so later comparisons stay meaningful.
                let (_, tx) = decode_process(&msg)?;
                oracle.newtx(tx)?;
            }
        }
    }

    report.ledgers_match = (0..cfg.shards).all(|s| chain.shard_txids(ShardId(s)) == oracle.chain().shard_txids(ShardId(s)));
    report.mutated_messages = channel.mutated;
    report.client = client.stats.clone();
    Ok(report)
}

fn restart_cycle<R: RngCore + CryptoRng>(
    v: &mut Validator,
    chain: &IdealBlockchain,
    forger: &mut Forger,
    attacker: &Wallet,
    report: &mut HarnessReport,
    rng: &mut R,
) -> Result<(), ProtocolError> {
    v.sync(chain)?;
    let head = chain.height();
    let probe = encode_request(&encrypt_input(
        &v.public_keys().encryption,
        &forger.probe_tx(attacker, chain).serialize(),
        rng,
    ));
    let before = v.handle_request(chain, &probe)?;
    v.kill();
    v.restart(chain, head)?;
    report.restarts += 1;
    if v.handle_request(chain, &probe)? != before {
        report.restart_mismatches += 1;
    }
    // The host offers an older snapshot; the counter must refuse it.
    if v.sealed_versions().len() >= 2 {
        let old = v.sealed_versions()[v.sealed_versions().len() - 2].clone();
        report.rollbacks_attempted += 1;
        if matches!(v.restore(&old), Err(ProtocolError::Tee(TeeError::Rollback { .. }))) {
            report.rollbacks_rejected += 1;
        }
    }
    v.sync(chain)?;
    Ok(())
}

fn spend_from<R: Rng>(wallet: &mut Wallet, chain: &IdealBlockchain, rng: &mut R) -> Transaction {
    let want = rng.gen_range(1..=3usize).min(wallet.coins.len());
    let mut inputs = Vec::with_capacity(want);
    while inputs.len() < want {
        let c = wallet.coins[rng.gen_range(0..wallet.coins.len())];
        if !inputs.contains(&c) {
            inputs.push(c);
        }
    }
    let total: u64 = inputs.iter().map(|op| chain.value_of(op).unwrap_or(0)).sum();
    let outs = rng.gen_range(1..=3u64);
    let outputs = (0..outs)
        .map(|i| TxOut {
            address: Address::random(rng),
            value: if i + 1 == outs { total - total / outs * (outs - 1) } else { total / outs },
        })
        .collect();
    Transaction { inputs, outputs, nonce: rng.gen::<u64>().to_le_bytes().to_vec(), ..Default::default() }
}

/// The corrupted client: builds process messages that must never be accepted.
struct Forger {
    own_key: SigningKey,
    stash: Vec<(AttestedPlacement, Transaction)>,
    next: usize,
}

const FORGERY_KINDS: [&str; 6] =
    ["bit-flipped-signature", "rewritten-shard", "unregistered-key", "swapped-body", "stale-replay", "future-height"];

impl Forger {
    fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Forger { own_key: SigningKey::random(rng), stash: Vec::new(), next: 0 }
    }

    fn attacker_tx(&self, attacker: &Wallet, chain: &IdealBlockchain, salt: u64) -> Transaction {
        let op = attacker.coins[(salt as usize) % attacker.coins.len()];
        let value = chain.value_of(&op).unwrap_or(0);
        Transaction {
            inputs: vec![op],
            outputs: vec![TxOut { address: Address::default(), value }],
            nonce: salt.to_le_bytes().to_vec(),
            ..Default::default()
        }
    }

    fn probe_tx(&self, attacker: &Wallet, chain: &IdealBlockchain) -> Transaction {
        self.attacker_tx(attacker, chain, u64::MAX)
    }

    /// Obtain a genuine attestation for an attacker transaction from any honest validator.
    fn genuine<R: RngCore + CryptoRng>(
        &mut self,
        tx: &Transaction,
        validators: &mut [Validator],
        chain: &IdealBlockchain,
        registry: &KeyRegistry,
        rng: &mut R,
    ) -> Result<AttestedPlacement, ProtocolError> {
        let mut c = Client::new(DEFAULT_QUERIES, ChaCha20Rng::from_rng(&mut *rng).expect("rng"));
        c.attest(tx, validators, chain, registry, &mut Reliable)
    }

    fn forge<R: RngCore + CryptoRng>(
        &mut self,
        attacker: &Wallet,
        validators: &mut [Validator],
        chain: &IdealBlockchain,
        registry: &KeyRegistry,
        rng: &mut R,
    ) -> Result<(&'static str, Vec<u8>), ProtocolError> {
        let kind = FORGERY_KINDS[self.next % FORGERY_KINDS.len()];
        self.next += 1;
        let tx = self.attacker_tx(attacker, chain, self.next as u64);
        let prog = ProgramDescriptor::balanced(chain.shards()).id();
        let msg = match kind {
            "bit-flipped-signature" => {
                let mut p = self.genuine(&tx, validators, chain, registry, rng)?;
                p.sigma[rng.gen_range(0..64)] ^= 1 << rng.gen_range(0..8);
                encode_process(&p, &tx)
            }
            "rewritten-shard" => {
                let mut p = self.genuine(&tx, validators, chain, registry, rng)?;
                p.s_out = ShardId((p.s_out.0 + rng.gen_range(1..chain.shards().max(2))) % chain.shards());
                encode_process(&p, &tx)
            }
            "unregistered-key" => {
                let st = chain.height();
                let s_out = ShardId(rng.gen_range(0..chain.shards()));
                let msg = AttestedPlacement::signed_message(&prog, s_out, st, &tx.txid());
                let sig: Signature = self.own_key.sign(&msg);
                let p = AttestedPlacement { s_out, st, sigma: sig.to_bytes().into(), h_tx: tx.txid() };
                encode_process(&p, &tx)
            }
            "swapped-body" => {
                let p = self.genuine(&tx, validators, chain, registry, rng)?;
                let other = self.attacker_tx(attacker, chain, self.next as u64 + 1_000_000);
                encode_process(&p, &other)
            }
            "stale-replay" => {
                let p = self.genuine(&tx, validators, chain, registry, rng)?;
                self.stash.push((p, tx.clone()));
                // Replay the oldest stashed attestation that is now out of window.
                match self.stash.iter().position(|(p, _)| chain.height() - p.st > FRESHNESS_WINDOW) {
                    Some(i) => {
                        let (p, tx) = self.stash.remove(i);
                        encode_process(&p, &tx)
                    }
                    None => {
                        // Nothing old enough yet: forge a height below the window instead.
                        let mut p = p;
                        p.st = p.st.saturating_sub(FRESHNESS_WINDOW + 1);
                        encode_process(&p, &tx)
                    }
                }
            }
            _ => {
                let mut p = self.genuine(&tx, validators, chain, registry, rng)?;
                p.st += 1;
                encode_process(&p, &tx)
            }
        };
        Ok((kind, msg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn funded_chain(shards: u32, rng: &mut ChaCha20Rng) -> (IdealBlockchain, Vec<Outpoint>) {
        let mut chain = IdealBlockchain::new(shards).unwrap();
        let mut coins = Vec::new();
        for s in 0..shards {
            let tx = Transaction {
                inputs: vec![],
                outputs: (0..4).map(|_| TxOut { address: Address::random(rng), value: 100 }).collect(),
                nonce: vec![s as u8],
                ..Default::default()
            };
            coins.extend((0..4).map(|i| Outpoint::new(tx.txid(), i)));
            chain.seed_genesis(ShardId(s), vec![tx]).unwrap();
        }
        (chain, coins)
    }

    fn spend(inputs: Vec<Outpoint>, value: u64) -> Transaction {
        Transaction { inputs, outputs: vec![TxOut { address: Address::default(), value }], ..Default::default() }
    }

    fn setup(
        behaviors: &[Behavior],
    ) -> (IdealBlockchain, Vec<Outpoint>, Vec<Validator>, KeyRegistry, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (chain, coins) = funded_chain(4, &mut rng);
        let prog = ProgramDescriptor::balanced(4);
        let mut registry = KeyRegistry::new(prog.id());
        let validators: Vec<Validator> = behaviors
            .iter()
            .enumerate()
            .map(|(i, b)| Validator::new(i, *b, &prog, &mut rng).unwrap())
            .collect();
        for v in validators.iter().filter(|v| v.attested()) {
            registry.register(v.public_keys().attestation);
        }
        (chain, coins, validators, registry, rng)
    }

    #[test]
    fn response_is_109_bytes_and_round_trips() {
        let p = AttestedPlacement { s_out: ShardId(3), st: 77, sigma: [9; 64], h_tx: TxId([4; 32]) };
        let b = encode_response(&p);
        assert_eq!(b.len(), 109);
        assert_eq!(decode_response(&b).unwrap(), p);
        assert!(decode_response(&b[..108]).is_err());
    }

    #[test]
    fn process_message_round_trips_and_rejects_truncation() {
        let tx = spend(vec![Outpoint::new(TxId([1; 32]), 0)], 5);
        let p = AttestedPlacement { s_out: ShardId(1), st: 2, sigma: [3; 64], h_tx: tx.txid() };
        let b = encode_process(&p, &tx);
        let (q, back) = decode_process(&b).unwrap();
        assert_eq!((q, back), (p, tx));
        assert!(decode_process(&b[..b.len() - 1]).is_err());
        let req = encode_request(b"abc");
        assert_eq!(decode_request(&req).unwrap(), b"abc");
        assert!(decode_request(&req[..4]).is_err());
    }

    #[test]
    fn ledger_validates_writes() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (mut chain, coins) = funded_chain(2, &mut rng);
        assert_eq!(chain.height(), 2);
        let tx = spend(vec![coins[0]], 100);
        let h = chain.write(ShardId(1), tx.clone()).unwrap();
        assert_eq!(h.height, 2);
        assert_eq!(chain.read(ShardId(1), &tx.txid()), Some(&tx));
        assert_eq!(chain.input_shard(&Outpoint::new(tx.txid(), 0)), Some(ShardId(1)));
        assert!(chain.write(ShardId(0), tx.clone()).is_err(), "double spend");
        assert!(chain.write(ShardId(0), spend(vec![coins[1]], 101)).is_err(), "overspend");
        assert!(chain.write(ShardId(0), spend(vec![], 0)).is_err(), "no inputs");
        assert!(chain.write(ShardId(2), spend(vec![coins[1]], 1)).is_err(), "bad shard");
        assert_eq!(chain.height(), 3);
    }

    #[test]
    fn honest_round_trip_matches_reference_placement() {
        let (mut chain, coins, mut validators, registry, rng) = setup(&[Behavior::Honest; 3]);
        let mut oracle = IdealPlacement { chain: chain.clone() };
        let mut client = Client::new(3, rng);
        for (i, op) in coins.iter().take(8).enumerate() {
            let tx = spend(vec![*op], 100 - i as u64);
            let got = client.submit(&tx, &mut validators, &mut chain, &registry, &mut Reliable).unwrap();
            assert_eq!(got.placement.s_out, oracle.newtx(tx).unwrap());
        }
    }

    #[test]
    fn client_survives_faulty_majority_with_one_honest_validator() {
        let behaviors = [
            Behavior::NoTee,
            Behavior::TamperShard,
            Behavior::TamperSignature,
            Behavior::Lagging,
            Behavior::WrongTx,
            Behavior::Honest,
        ];
        let (mut chain, coins, mut validators, registry, rng) = setup(&behaviors);
        let mut client = Client::new(3, rng);
        for op in coins.iter().take(10) {
            let tx = spend(vec![*op], 50);
            let got = client.submit(&tx, &mut validators, &mut chain, &registry, &mut Reliable).unwrap();
            assert_eq!(got.placement.h_tx, tx.txid());
        }
        assert!(client.stats.bad_responses > 0);
    }

    #[test]
    fn process_rejects_stale_future_and_unregistered() {
        let (mut chain, coins, mut validators, registry, rng) = setup(&[Behavior::Honest]);
        let mut client = Client::new(1, rng);
        let tx = spend(vec![coins[0]], 10);
        let p = client.attest(&tx, &mut validators, &chain, &registry, &mut Reliable).unwrap();

        let mut future = p;
        future.st += 1;
        assert!(matches!(
            validator_process(&mut chain, &registry, &encode_process(&future, &tx)),
            Err(ProtocolError::BadAttestation)
        ));

        // Advance the head past the window with unrelated writes.
        for op in &coins[1..=FRESHNESS_WINDOW as usize + 1] {
            let t = spend(vec![*op], 1);
            client.submit(&t, &mut validators, &mut chain, &registry, &mut Reliable).unwrap();
        }
        assert!(matches!(
            validator_process(&mut chain, &registry, &encode_process(&p, &tx)),
            Err(ProtocolError::Stale { .. })
        ));
        let empty = KeyRegistry::new(ProgramDescriptor::balanced(4).id());
        let fresh = client.attest(&tx, &mut validators, &chain, &registry, &mut Reliable).unwrap();
        assert_eq!(
            validator_process(&mut chain, &empty, &encode_process(&fresh, &tx)),
            Err(ProtocolError::BadAttestation)
        );
        assert!(validator_process(&mut chain, &registry, &encode_process(&fresh, &tx)).is_ok());
    }

    #[test]
    fn restart_replays_to_identical_answers_and_refuses_rollback() {
        let (mut chain, coins, mut validators, registry, mut rng) = setup(&[Behavior::Honest]);
        let mut client = Client::new(1, ChaCha20Rng::seed_from_u64(8));
        validators[0].sync(&chain).unwrap();
        validators[0].checkpoint().unwrap();
        for op in &coins[..3] {
            client.submit(&spend(vec![*op], 1), &mut validators, &mut chain, &registry, &mut Reliable).unwrap();
        }
        validators[0].checkpoint().unwrap();
        client.submit(&spend(vec![coins[3]], 1), &mut validators, &mut chain, &registry, &mut Reliable).unwrap();

        let v = &mut validators[0];
        let probe_tx = spend(vec![coins[4]], 1);
        let probe = encode_request(&encrypt_input(&v.public_keys().encryption, &probe_tx.serialize(), &mut rng));
        let before = v.handle_request(&chain, &probe).unwrap();
        v.kill();
        assert!(v.handle_request(&chain, &probe).is_err());
        assert_eq!(v.restart(&chain, chain.height()).unwrap(), chain.height());
        assert_eq!(v.handle_request(&chain, &probe).unwrap(), before);

        let old = v.sealed_versions()[0].clone();
        assert!(matches!(v.restore(&old), Err(ProtocolError::Tee(TeeError::Rollback { .. }))));
    }

    #[test]
    fn small_harness_run_is_clean() {
        let cfg = HarnessConfig { transactions: 300, restart_every: 100, checkpoint_every: 40, ..Default::default() };
        let r = run_harness(&cfg).unwrap();
        assert_eq!(r.misplaced, 0);
        assert_eq!(r.forgeries_accepted, 0);
        assert!(r.forgeries > 0);
        assert!(r.ledgers_match);
        assert_eq!(r.restart_mismatches, 0);
        assert_eq!(r.rollbacks_attempted, r.rollbacks_rejected);
        assert!(r.committed + r.submit_failures == 300);
        assert!(r.committed > 250, "{r:?}");
    }
}
