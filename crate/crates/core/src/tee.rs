//! In-process enclave emulation: attested placement, encrypted inputs and
//! sealed state with rollback protection.
//!
//! The platform owns the long-lived secrets (attestation key, decryption key,
//! sealing root, monotonic counter). An [`Enclave`] is a disposable instance
//! on top of it; killing one and launching another loses nothing that was
//! sealed.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::Arc;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use hkdf::Hkdf;
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use p256::elliptic_curve::sec1::ToEncodedPoint;
use p256::{PublicKey, SecretKey};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hashshard::{ShardError, ShardId, ShardView, TxRef, TxSharder};
use crate::tx::{Outpoint, Transaction, TxId};

const ATTEST_TAG: &[u8; 8] = b"SFATTEST";
const SEAL_MAGIC: &[u8; 8] = b"SFSEAL01";
const KEM_INFO: &[u8] = b"shardflood input encryption";
/// Compressed SEC1 point length.
const POINT_LEN: usize = 33;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TeeError {
    #[error("no program installed")]
    NotInstalled,
    #[error("a different program is already installed")]
    ProgramMismatch,
    #[error("input does not decrypt")]
    Decrypt,
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("placement failed: {0}")]
    Placement(#[from] ShardError),
    #[error("block for shard {shard} does not extend the monitored chain (expected height {expected}, got {got})")]
    NonExtending { shard: u32, expected: u64, got: u64 },
    #[error("block body does not match its header")]
    BodyMismatch,
    #[error("sealed state failed authentication")]
    Unseal,
    #[error("sealed state version {version} is not the latest ({counter})")]
    Rollback { version: u64, counter: u64 },
}

/// Canonical description of the placement program; its digest is the
/// identity bound into every attestation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProgramDescriptor {
    pub name: String,
    pub version: u32,
    pub shards: u32,
    pub sharder: String,
}

impl ProgramDescriptor {
    pub fn balanced(shards: u32) -> Self {
        ProgramDescriptor { name: "txsharding".into(), version: 1, shards, sharder: "balanced-input".into() }
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        for s in [&self.name, &self.sharder] {
            b.extend_from_slice(&(s.len() as u32).to_le_bytes());
            b.extend_from_slice(s.as_bytes());
        }
        b.extend_from_slice(&self.version.to_le_bytes());
        b.extend_from_slice(&self.shards.to_le_bytes());
        b
    }

    pub fn id(&self) -> ProgramId {
        ProgramId(Sha256::digest(self.canonical_bytes()).into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ProgramId(pub [u8; 32]);

/// Default placement: stay with the input shard that minimises the number of
/// inputs living elsewhere, then prefer the lighter shard, then the lower id.
/// Transactions without inputs go to the least-loaded shard. The digest of
/// the transaction is never consulted.
#[derive(Clone, Copy, Debug, Default)]
pub struct BalancedInputSharder;

impl TxSharder for BalancedInputSharder {
    fn place(&self, tx: TxRef<'_>, state: &dyn ShardView) -> Result<ShardId, ShardError> {
        let n = state.shard_count();
        if n == 0 {
            return Err(ShardError::ZeroShards);
        }
        if tx.inputs.is_empty() {
            let best = (0..n).min_by_key(|&s| (state.load(ShardId(s)), s)).expect("n > 0");
            return Ok(ShardId(best));
        }
        let mut homes: Vec<(ShardId, u32)> = Vec::with_capacity(4);
        for op in tx.inputs {
            let s = state.input_shard(op).ok_or(ShardError::UnresolvedInput(*op))?;
            match homes.iter_mut().find(|(h, _)| *h == s) {
                Some((_, c)) => *c += 1,
                None => homes.push((s, 1)),
            }
        }
        let total = tx.inputs.len() as u32;
        let best = homes
            .iter()
            .min_by_key(|(s, local)| (total - local, state.load(*s), s.0))
            .expect("at least one input");
        Ok(best.0)
    }

    fn name(&self) -> &'static str {
        "balanced-input"
    }
}

/// Header of one shard block as monitored by the enclave.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockHeader {
    pub shard: u32,
    pub height: u64,
    pub prev: [u8; 32],
    pub tx_root: [u8; 32],
}

impl BlockHeader {
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.shard.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(self.prev);
        h.update(self.tx_root);
        Sha256::digest(h.finalize()).into()
    }
}

pub fn tx_root(txids: &[TxId]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((txids.len() as u64).to_le_bytes());
    for id in txids {
        h.update(id.0);
    }
    h.finalize().into()
}

/// What the enclave knows about the chain: where each unspent output lives,
/// per-shard load, and the monitored header chains. `height` counts blocks
/// across all shards and is the `st` value placed in attestations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnclaveState {
    pub shards: u32,
    pub height: u64,
    heads: Vec<[u8; 32]>,
    shard_heights: Vec<u64>,
    loads: Vec<u64>,
    homes: HashMap<Outpoint, u32>,
}

impl EnclaveState {
    pub fn new(shards: u32) -> Self {
        let n = shards as usize;
        EnclaveState {
            shards,
            height: 0,
            heads: vec![[0; 32]; n],
            shard_heights: vec![0; n],
            loads: vec![0; n],
            homes: HashMap::new(),
        }
    }

    pub fn head(&self, shard: u32) -> Option<([u8; 32], u64)> {
        let i = shard as usize;
        Some((*self.heads.get(i)?, self.shard_heights[i]))
    }

    pub fn loads(&self) -> &[u64] {
        &self.loads
    }

    fn apply(&mut self, header: &BlockHeader, txs: &[Transaction]) -> Result<(), TeeError> {
        let s = header.shard as usize;
        if s >= self.heads.len() {
            return Err(TeeError::Placement(ShardError::OutOfRange { id: header.shard, count: self.shards }));
        }
        let expected = self.shard_heights[s] + 1;
        if header.height != expected || header.prev != self.heads[s] {
            return Err(TeeError::NonExtending { shard: header.shard, expected, got: header.height });
        }
        let ids: Vec<TxId> = txs.iter().map(Transaction::txid).collect();
        if tx_root(&ids) != header.tx_root {
            return Err(TeeError::BodyMismatch);
        }
        for (tx, id) in txs.iter().zip(&ids) {
            for op in &tx.inputs {
                self.homes.remove(op);
            }
            for i in 0..tx.outputs.len() as u32 {
                self.homes.insert(Outpoint::new(*id, i), header.shard);
            }
        }
        self.loads[s] += txs.len() as u64;
        self.heads[s] = header.hash();
        self.shard_heights[s] = expected;
        self.height += 1;
        Ok(())
    }

    fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + self.homes.len() * 40);
        b.extend_from_slice(&self.shards.to_le_bytes());
        b.extend_from_slice(&self.height.to_le_bytes());
        for i in 0..self.shards as usize {
            b.extend_from_slice(&self.heads[i]);
            b.extend_from_slice(&self.shard_heights[i].to_le_bytes());
            b.extend_from_slice(&self.loads[i].to_le_bytes());
        }
        let mut homes: Vec<_> = self.homes.iter().collect();
        homes.sort();
        b.extend_from_slice(&(homes.len() as u64).to_le_bytes());
        for (op, s) in homes {
            b.extend_from_slice(&op.txid.0);
            b.extend_from_slice(&op.index.to_le_bytes());
            b.extend_from_slice(&s.to_le_bytes());
        }
        b
    }

    fn decode(b: &[u8]) -> Result<Self, TeeError> {
        let mut r = Reader(b);
        let shards = r.u32()?;
        let mut st = EnclaveState::new(shards);
        st.height = r.u64()?;
        for i in 0..shards as usize {
            st.heads[i] = r.array()?;
            st.shard_heights[i] = r.u64()?;
            st.loads[i] = r.u64()?;
        }
        let n = r.u64()?;
        for _ in 0..n {
            let txid = TxId(r.array()?);
            let index = r.u32()?;
            st.homes.insert(Outpoint::new(txid, index), r.u32()?);
        }
        if !r.0.is_empty() {
            return Err(TeeError::Malformed("trailing bytes in sealed state".into()));
        }
        Ok(st)
    }
}

impl ShardView for EnclaveState {
    fn shard_count(&self) -> u32 {
        self.shards
    }
    fn input_shard(&self, op: &Outpoint) -> Option<ShardId> {
        self.homes.get(op).map(|&s| ShardId(s))
    }
    fn load(&self, shard: ShardId) -> u64 {
        self.loads.get(shard.index()).copied().unwrap_or(0)
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], TeeError> {
        if self.0.len() < n {
            return Err(TeeError::Malformed("truncated".into()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }
    fn u32(&mut self) -> Result<u32, TeeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, TeeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], TeeError> {
        Ok(self.take(N)?.try_into().expect("N bytes"))
    }
}

/// `(S_out, st, h_tx)` plus the enclave's signature over it and the program id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttestedPlacement {
    pub s_out: ShardId,
    pub st: u64,
    pub sigma: [u8; 64],
    pub h_tx: TxId,
}

impl AttestedPlacement {
    pub fn signed_message(prog: &ProgramId, s_out: ShardId, st: u64, h_tx: &TxId) -> Vec<u8> {
        let mut m = Vec::with_capacity(8 + 32 + 4 + 8 + 32);
        m.extend_from_slice(ATTEST_TAG);
        m.extend_from_slice(&prog.0);
        m.extend_from_slice(&s_out.0.to_le_bytes());
        m.extend_from_slice(&st.to_le_bytes());
        m.extend_from_slice(&h_tx.0);
        m
    }

    pub fn verify(&self, prog: &ProgramId, key: &VerifyingKey) -> bool {
        let Ok(sig) = Signature::from_slice(&self.sigma) else {
            return false;
        };
        key.verify(&Self::signed_message(prog, self.s_out, self.st, &self.h_tx), &sig).is_ok()
    }
}

/// Public half of a platform: what clients and validators register.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeePublicKeys {
    pub attestation: VerifyingKey,
    pub encryption: PublicKey,
}

pub struct TeePlatform {
    attestation: SigningKey,
    decryption: SecretKey,
    seal_root: [u8; 32],
    counter: AtomicU64,
}

impl TeePlatform {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Arc<Self> {
        let mut seal_root = [0u8; 32];
        rng.fill_bytes(&mut seal_root);
        Arc::new(TeePlatform {
            attestation: SigningKey::random(rng),
            decryption: SecretKey::random(rng),
            seal_root,
            counter: AtomicU64::new(0),
        })
    }

    pub fn public_keys(&self) -> TeePublicKeys {
        TeePublicKeys { attestation: *self.attestation.verifying_key(), encryption: self.decryption.public_key() }
    }

    /// Current value of the monotonic counter (latest sealed version).
    pub fn counter(&self) -> u64 {
        self.counter.load(AtomicOrdering::SeqCst)
    }

    fn seal_cipher(&self, prog: &ProgramId) -> Aes256Gcm {
        let hk = Hkdf::<Sha256>::new(Some(SEAL_MAGIC), &self.seal_root);
        let mut key = [0u8; 32];
        hk.expand(&prog.0, &mut key).expect("32-byte output is valid");
        Aes256Gcm::new_from_slice(&key).expect("32-byte key")
    }
}

/// Versioned, authenticated snapshot of enclave state, safe to store on the host.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedState(Vec<u8>);

impl SealedState {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        SealedState(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn version(&self) -> Option<u64> {
        let v = self.0.get(8..16)?;
        Some(u64::from_le_bytes(v.try_into().ok()?))
    }
}

fn seal_nonce(version: u64) -> [u8; 12] {
    let mut n = [0u8; 12];
    n[..8].copy_from_slice(&version.to_le_bytes());
    n
}

fn seal_aad(version: u64) -> Vec<u8> {
    let mut aad = SEAL_MAGIC.to_vec();
    aad.extend_from_slice(&version.to_le_bytes());
    aad
}

pub struct Enclave {
    platform: Arc<TeePlatform>,
    prog: Option<(ProgramDescriptor, ProgramId)>,
    state: Option<EnclaveState>,
    sharder: BalancedInputSharder,
}

impl Enclave {
    pub fn launch(platform: Arc<TeePlatform>) -> Self {
        Enclave { platform, prog: None, state: None, sharder: BalancedInputSharder }
    }

    /// Store `prog` if not stored yet. Installing the same program again is a
    /// no-op and keeps the current state.
    pub fn install(&mut self, prog: &ProgramDescriptor) -> Result<ProgramId, TeeError> {
        let id = prog.id();
        match &self.prog {
            Some((_, cur)) if *cur == id => Ok(id),
            Some(_) => Err(TeeError::ProgramMismatch),
            None => {
                self.prog = Some((prog.clone(), id));
                self.state = Some(EnclaveState::new(prog.shards));
                Ok(id)
            }
        }
    }

    pub fn program(&self) -> Option<ProgramId> {
        self.prog.as_ref().map(|p| p.1)
    }

    pub fn public_keys(&self) -> TeePublicKeys {
        self.platform.public_keys()
    }

    fn installed(&self) -> Result<(&ProgramId, &EnclaveState), TeeError> {
        match (&self.prog, &self.state) {
            (Some((_, id)), Some(st)) => Ok((id, st)),
            _ => Err(TeeError::NotInstalled),
        }
    }

    pub fn state_height(&self) -> Option<u64> {
        self.state.as_ref().map(|s| s.height)
    }

    pub fn state(&self) -> Option<&EnclaveState> {
        self.state.as_ref()
    }

    /// Decrypt the submitted transaction, place it against the current state
    /// and sign `(prog, S_out, st, H(tx))`.
    pub fn resume(&self, inp_c: &[u8]) -> Result<AttestedPlacement, TeeError> {
        let (prog, st) = self.installed()?;
        let plain = decrypt_input(&self.platform.decryption, inp_c)?;
        let tx = Transaction::deserialize(&plain).map_err(|e| TeeError::Malformed(e.to_string()))?;
        let h_tx = tx.txid();
        let s_out = self.sharder.place(TxRef { txid: &h_tx, inputs: &tx.inputs }, st)?;
        let msg = AttestedPlacement::signed_message(prog, s_out, st.height, &h_tx);
        let sig: Signature = self.platform.attestation.sign(&msg);
        let sigma: [u8; 64] = sig.to_bytes().into();
        Ok(AttestedPlacement { s_out, st: st.height, sigma, h_tx })
    }

    /// Advance the monitored state by one block.
    pub fn update_state(&mut self, header: &BlockHeader, txs: &[Transaction]) -> Result<u64, TeeError> {
        self.installed()?;
        let st = self.state.as_mut().expect("installed");
        st.apply(header, txs)?;
        Ok(st.height)
    }

    /// Seal the current state under a fresh counter value.
    pub fn seal(&self) -> Result<SealedState, TeeError> {
        let (prog, st) = self.installed()?;
        let version = self.platform.counter.fetch_add(1, AtomicOrdering::SeqCst) + 1;
        let ct = self
            .platform
            .seal_cipher(prog)
            .encrypt(&Nonce::from(seal_nonce(version)), Payload { msg: &st.encode(), aad: &seal_aad(version) })
            .expect("encryption cannot fail");
        let mut blob = SEAL_MAGIC.to_vec();
        blob.extend_from_slice(&version.to_le_bytes());
        blob.extend_from_slice(&ct);
        Ok(SealedState(blob))
    }

    /// Replace the in-memory state with a sealed snapshot. Only the most
    /// recently sealed version is accepted.
    pub fn restore(&mut self, sealed: &SealedState) -> Result<u64, TeeError> {
        let prog = self.installed()?.0;
        let b = sealed.as_bytes();
        if b.len() < 16 || &b[..8] != SEAL_MAGIC {
            return Err(TeeError::Unseal);
        }
        let version = sealed.version().ok_or(TeeError::Unseal)?;
        let plain = self
            .platform
            .seal_cipher(prog)
            .decrypt(&Nonce::from(seal_nonce(version)), Payload { msg: &b[16..], aad: &seal_aad(version) })
            .map_err(|_| TeeError::Unseal)?;
        let counter = self.platform.counter();
        if version != counter {
            return Err(TeeError::Rollback { version, counter });
        }
        let st = EnclaveState::decode(&plain)?;
        let height = st.height;
        self.state = Some(st);
        Ok(height)
    }
}

fn kem_cipher(shared: &[u8], eph: &[u8]) -> Aes256Gcm {
    let hk = Hkdf::<Sha256>::new(Some(eph), shared);
    let mut key = [0u8; 32];
    hk.expand(KEM_INFO, &mut key).expect("32-byte output is valid");
    Aes256Gcm::new_from_slice(&key).expect("32-byte key")
}

/// Hybrid encryption to an enclave: ephemeral P-256 ECDH, HKDF-SHA256, then
/// AES-256-GCM. Output is the compressed ephemeral point followed by the
/// ciphertext. The key is fresh per message, so a fixed nonce is safe.
pub fn encrypt_input<R: RngCore + CryptoRng>(to: &PublicKey, plaintext: &[u8], rng: &mut R) -> Vec<u8> {
    let eph = p256::ecdh::EphemeralSecret::random(rng);
    let eph_pub = eph.public_key().to_encoded_point(true);
    let shared = eph.diffie_hellman(to);
    let cipher = kem_cipher(shared.raw_secret_bytes(), eph_pub.as_bytes());
    let ct = cipher.encrypt(&Nonce::from([0u8; 12]), plaintext).expect("encryption cannot fail");
    let mut out = eph_pub.as_bytes().to_vec();
    out.extend_from_slice(&ct);
    out
}

fn decrypt_input(sk: &SecretKey, inp_c: &[u8]) -> Result<Vec<u8>, TeeError> {
    if inp_c.len() < POINT_LEN {
        return Err(TeeError::Decrypt);
    }
    let (point, ct) = inp_c.split_at(POINT_LEN);
    let eph = PublicKey::from_sec1_bytes(point).map_err(|_| TeeError::Decrypt)?;
    let shared = p256::ecdh::diffie_hellman(sk.to_nonzero_scalar(), eph.as_affine());
    kem_cipher(shared.raw_secret_bytes(), point)
        .decrypt(&Nonce::from([0u8; 12]), ct)
        .map_err(|_| TeeError::Decrypt)
}
