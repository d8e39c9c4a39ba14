//! Sharded UTXO blockchain simulator for studying single-shard flooding and a
//! trusted-enclave placement countermeasure.

pub mod analytics;
pub mod attack;
pub mod hashshard;
pub mod metrics;
pub mod protocol;
pub mod shard;
pub mod sim;
pub mod tee;
pub mod tx;
pub mod utxo;
pub mod workload;
