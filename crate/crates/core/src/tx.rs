//! UTXO transactions, canonical serialization and txid hashing.
//!
//! Canonical layout (all integers little-endian):
//!
//! ```text
//! u32            format version (currently 1)
//! u32            input count
//!   [32]u8 txid  referenced transaction
//!   u32          output index
//! u32            output count
//!   u64          value in satoshi
//!   [20]u8       address
//! u32            nonce length
//!   [..]u8       nonce bytes
//! u32            declared size in bytes
//! ```
//!
//! The txid is SHA-256 applied twice to that byte string. It is not the
//! Bitcoin wire format and txids are not comparable with mainnet ones.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const ADDRESS_LEN: usize = 20;
pub const DEFAULT_TX_SIZE_BYTES: u32 = 500;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("input truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after transaction")]
    TrailingBytes(usize),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("declared size must be positive")]
    ZeroSize,
    #[error("invalid hex: {0}")]
    Hex(String),
}

/// 32-byte double-SHA256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct TxId(pub [u8; 32]);

impl TxId {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TxId({})", &self.to_hex()[..16])
    }
}

impl FromStr for TxId {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|e| DecodeError::Hex(e.to_string()))?;
        Ok(TxId(out))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Address(pub [u8; ADDRESS_LEN]);

impl Address {
    pub fn random<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        let mut a = [0u8; ADDRESS_LEN];
        rng.fill_bytes(&mut a);
        Address(a)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({})", hex::encode(&self.0[..6]))
    }
}

/// Reference to output `index` of transaction `txid`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Outpoint {
    pub txid: TxId,
    pub index: u32,
}

impl Outpoint {
    pub fn new(txid: TxId, index: u32) -> Self {
        Self { txid, index }
    }
}

impl fmt::Display for Outpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.txid, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TxOut {
    pub address: Address,
    pub value: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Transaction {
    pub inputs: Vec<Outpoint>,
    pub outputs: Vec<TxOut>,
    /// Free-form bytes; the attack grinder may vary these.
    pub nonce: Vec<u8>,
    pub size_bytes: u32,
}

impl Default for Transaction {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            outputs: Vec::new(),
            nonce: Vec::new(),
            size_bytes: DEFAULT_TX_SIZE_BYTES,
        }
    }
}

impl Transaction {
    pub fn serialize(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.serialized_len());
        self.serialize_into(&mut buf);
        buf
    }

    /// Appends the canonical encoding to `buf` (does not clear it).
    pub fn serialize_into(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.inputs.len() as u32).to_le_bytes());
        for op in &self.inputs {
            buf.extend_from_slice(&op.txid.0);
            buf.extend_from_slice(&op.index.to_le_bytes());
        }
        buf.extend_from_slice(&(self.outputs.len() as u32).to_le_bytes());
        for out in &self.outputs {
            buf.extend_from_slice(&out.value.to_le_bytes());
            buf.extend_from_slice(&out.address.0);
        }
        buf.extend_from_slice(&(self.nonce.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.nonce);
        buf.extend_from_slice(&self.size_bytes.to_le_bytes());
    }

    pub fn serialized_len(&self) -> usize {
        4 + 4 + self.inputs.len() * 36 + 4 + self.outputs.len() * (8 + ADDRESS_LEN) + 4 + self.nonce.len() + 4
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(DecodeError::Version(version));
        }
        let n_in = r.count(36)?;
        let mut inputs = Vec::with_capacity(n_in);
        for _ in 0..n_in {
            let txid = TxId(r.array::<32>()?);
            let index = r.u32()?;
            inputs.push(Outpoint { txid, index });
        }
        let n_out = r.count(8 + ADDRESS_LEN)?;
        let mut outputs = Vec::with_capacity(n_out);
        for _ in 0..n_out {
            let value = r.u64()?;
            let address = Address(r.array::<ADDRESS_LEN>()?);
            outputs.push(TxOut { address, value });
        }
        let n_nonce = r.count(1)?;
        let nonce = r.take(n_nonce)?.to_vec();
        let size_bytes = r.u32()?;
        if size_bytes == 0 {
            return Err(DecodeError::ZeroSize);
        }
        if r.pos != bytes.len() {
            return Err(DecodeError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self {
            inputs,
            outputs,
            nonce,
            size_bytes,
        })
    }

    pub fn txid(&self) -> TxId {
        compute_txid(self)
    }

    pub fn output_value(&self) -> u64 {
        self.outputs.iter().map(|o| o.value).sum()
    }

    pub fn outpoint(&self, index: u32) -> Outpoint {
        Outpoint::new(self.txid(), index)
    }
}

/// SHA256(SHA256(bytes)).
pub fn double_sha256(bytes: &[u8]) -> TxId {
    let first = Sha256::digest(bytes);
    TxId(Sha256::digest(first).into())
}

pub fn compute_txid(tx: &Transaction) -> TxId {
    double_sha256(&tx.serialize())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated(self.pos))?;
        if end > self.buf.len() {
            return Err(DecodeError::Truncated(self.buf.len()));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    // Element count that must fit in the remaining input.
    fn count(&mut self, elem_size: usize) -> Result<usize, DecodeError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem_size) > self.buf.len() - self.pos {
            return Err(DecodeError::Truncated(self.buf.len()));
        }
        Ok(n)
    }
}
