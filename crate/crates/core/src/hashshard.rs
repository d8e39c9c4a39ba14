//! Hash-based transaction placement and the placement interface shared with
//! the simulator and the enclave.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tx::{Outpoint, TxId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShardError {
    #[error("shard count must be at least 1")]
    ZeroShards,
    #[error("shard {id} out of range for {count} shards")]
    OutOfRange { id: u32, count: u32 },
    #[error("input {0} cannot be resolved to a shard")]
    UnresolvedInput(Outpoint),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ShardId(pub u32);

impl ShardId {
    pub fn new(id: u32, count: u32) -> Result<Self, ShardError> {
        if count == 0 {
            return Err(ShardError::ZeroShards);
        }
        if id >= count {
            return Err(ShardError::OutOfRange { id, count });
        }
        Ok(ShardId(id))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ShardId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// How the 32 digest bytes are read as an integer before taking the suffix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BitOrder {
    /// Byte 0 is most significant; the "ending bits" live in byte 31.
    #[default]
    BigEndian,
    /// Byte 0 is least significant.
    LittleEndian,
}

impl FromStr for BitOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "big-endian" | "be" => Ok(BitOrder::BigEndian),
            "little-endian" | "le" => Ok(BitOrder::LittleEndian),
            other => Err(format!("unknown bit order {other:?}")),
        }
    }
}

/// Output shard of a digest: its low-order bits when `n` is a power of two,
/// the digest reduced mod `n` otherwise.
pub fn shard_of(digest: &TxId, n: u32) -> Result<ShardId, ShardError> {
    shard_of_with(digest, n, BitOrder::BigEndian)
}

pub fn shard_of_with(digest: &TxId, n: u32, order: BitOrder) -> Result<ShardId, ShardError> {
    if n == 0 {
        return Err(ShardError::ZeroShards);
    }
    let d = &digest.0;
    if n.is_power_of_two() {
        let low = match order {
            BitOrder::BigEndian => u64::from_be_bytes(d[24..32].try_into().expect("8 bytes")),
            BitOrder::LittleEndian => u64::from_le_bytes(d[0..8].try_into().expect("8 bytes")),
        };
        return Ok(ShardId((low & (n as u64 - 1)) as u32));
    }
    let n = n as u128;
    let reduce = |acc: u128, b: &u8| (acc * 256 + *b as u128) % n;
    let r = match order {
        BitOrder::BigEndian => d.iter().fold(0, reduce),
        BitOrder::LittleEndian => d.iter().rev().fold(0, reduce),
    };
    Ok(ShardId(r as u32))
}

/// Read-only view of the chain state a placement algorithm may consult.
pub trait ShardView {
    fn shard_count(&self) -> u32;
    /// Shard currently holding `op`, if known.
    fn input_shard(&self, op: &Outpoint) -> Option<ShardId>;
    /// Current load figure for `shard` (transactions assigned to it).
    fn load(&self, shard: ShardId) -> u64;
}

/// Minimal view of a transaction for placement purposes.
#[derive(Clone, Copy, Debug)]
pub struct TxRef<'a> {
    pub txid: &'a TxId,
    pub inputs: &'a [Outpoint],
}

/// Placement function `(tx, state) -> output shard`.
pub trait TxSharder: Send + Sync {
    fn place(&self, tx: TxRef<'_>, state: &dyn ShardView) -> Result<ShardId, ShardError>;

    fn name(&self) -> &'static str;
}

/// Hash-suffix placement; ignores the state entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashSharder {
    shards: u32,
    order: BitOrder,
}

impl HashSharder {
    pub fn new(shards: u32) -> Result<Self, ShardError> {
        Self::with_order(shards, BitOrder::BigEndian)
    }

    pub fn with_order(shards: u32, order: BitOrder) -> Result<Self, ShardError> {
        if shards == 0 {
            return Err(ShardError::ZeroShards);
        }
        Ok(Self { shards, order })
    }

    pub fn shards(&self) -> u32 {
        self.shards
    }

    pub fn bit_order(&self) -> BitOrder {
        self.order
    }

    pub fn shard_for(&self, txid: &TxId) -> ShardId {
        shard_of_with(txid, self.shards, self.order).expect("shard count checked at construction")
    }
}

impl TxSharder for HashSharder {
    fn place(&self, tx: TxRef<'_>, _state: &dyn ShardView) -> Result<ShardId, ShardError> {
        Ok(self.shard_for(tx.txid))
    }

    fn name(&self) -> &'static str {
        "hash"
    }
}

/// Convenience constructor matching the other module entry points.
pub fn hash_sharder(n: u32) -> Result<HashSharder, ShardError> {
    HashSharder::new(n)
}

/// A view with no state, for sharders that do not need one.
pub struct EmptyView(pub u32);

impl ShardView for EmptyView {
    fn shard_count(&self) -> u32 {
        self.0
    }
    fn input_shard(&self, _op: &Outpoint) -> Option<ShardId> {
        None
    }
    fn load(&self, _shard: ShardId) -> u64 {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigUint;
    use proptest::prelude::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_digest(rng: &mut impl RngCore) -> TxId {
        let mut d = [0u8; 32];
        rng.fill_bytes(&mut d);
        TxId(d)
    }

    fn bigint_oracle(d: &TxId, n: u32) -> u32 {
        let v = BigUint::from_bytes_be(&d.0) % BigUint::from(n);
        v.to_u32_digits().first().copied().unwrap_or(0)
    }

    #[test]
    fn single_shard_is_always_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(shard_of(&random_digest(&mut rng), 1).unwrap(), ShardId(0));
        }
    }

    #[test]
    fn zero_shards_is_a_config_error() {
        assert_eq!(shard_of(&TxId::default(), 0), Err(ShardError::ZeroShards));
        assert!(HashSharder::new(0).is_err());
    }

    #[test]
    fn trailing_byte_0x56_goes_to_shard_6_of_16() {
        let mut d = [0xabu8; 32];
        d[31] = 0x56;
        let id = TxId(d);
        assert_eq!(bigint_oracle(&id, 16), 6);
        assert_eq!(shard_of(&id, 16).unwrap(), ShardId(6));
    }

    #[test]
    fn matches_bigint_oracle_for_any_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [1u32, 2, 3, 5, 7, 12, 16, 31, 64, 100, 1000, 65_537] {
            for _ in 0..200 {
                let d = random_digest(&mut rng);
                assert_eq!(shard_of(&d, n).unwrap().0, bigint_oracle(&d, n), "n={n}");
            }
        }
    }

    #[test]
    fn little_endian_reads_the_first_byte_as_least_significant() {
        let mut d = [0u8; 32];
        d[0] = 0x56;
        assert_eq!(shard_of_with(&TxId(d), 16, BitOrder::LittleEndian).unwrap(), ShardId(6));
        let mut rev = d;
        rev.reverse();
        for n in [12u32, 16] {
            assert_eq!(
                shard_of_with(&TxId(d), n, BitOrder::LittleEndian).unwrap(),
                shard_of(&TxId(rev), n).unwrap()
            );
        }
    }

    #[test]
    fn uniform_over_a_million_digests() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 16u32;
        let samples = 1_000_000u64;
        let mut counts = vec![0u64; n as usize];
        for _ in 0..samples {
            counts[shard_of(&random_digest(&mut rng), n).unwrap().index()] += 1;
        }
        let expected = samples as f64 / n as f64;
        let sigma = (samples as f64 * (1.0 / n as f64) * (1.0 - 1.0 / n as f64)).sqrt();
        for c in &counts {
            assert!((*c as f64 - expected).abs() < 3.0 * sigma, "{counts:?}");
        }
        let (_, p) = crate::analytics::chi_square_uniform(&counts);
        assert!(p > 0.001, "p = {p}");
    }

    #[test]
    fn hash_sharder_ignores_state_and_is_deterministic() {
        let s = hash_sharder(16).unwrap();
        let id = TxId([7; 32]);
        let a = s.place(TxRef { txid: &id, inputs: &[] }, &EmptyView(16)).unwrap();
        let b = s.place(TxRef { txid: &id, inputs: &[] }, &EmptyView(16)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, shard_of(&id, 16).unwrap());
    }

    proptest! {
        #[test]
        fn suffix_consistency(bytes in proptest::array::uniform32(any::<u8>()), bits in 0u32..20) {
            let d = TxId(bytes);
            let lo = shard_of(&d, 1 << bits).unwrap().0;
            let hi = shard_of(&d, 1 << (bits + 1)).unwrap().0;
            prop_assert_eq!(lo, hi % (1 << bits));
        }

        #[test]
        fn always_in_range(bytes in proptest::array::uniform32(any::<u8>()), n in 1u32..5000) {
            prop_assert!(shard_of(&TxId(bytes), n).unwrap().0 < n);
            prop_assert!(shard_of_with(&TxId(bytes), n, BitOrder::LittleEndian).unwrap().0 < n);
        }
    }
}
