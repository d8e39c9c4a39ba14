//! Closed-form attack analytics and a few small statistics helpers.

use std::collections::{HashMap, HashSet};

use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::hashshard::{BitOrder, HashSharder, ShardError, ShardId};
use crate::tx::{Outpoint, TxId};
use crate::workload::{TxKind, WorkloadTx};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalyticsError {
    #[error("input {0} references a transaction not seen earlier in the workload")]
    Dangling(Outpoint),
    #[error(transparent)]
    Shard(#[from] ShardError),
}

/// Expected number of hash attempts per accepted transaction.
pub fn expected_attempts(n: u32) -> f64 {
    n.max(1) as f64
}

/// Probability that a transaction with `m` inputs touches a given shard when
/// its `m` input shards and its output shard are i.i.d. uniform over `n`.
pub fn affected_probability(n: u32, m: u32) -> f64 {
    if n <= 1 {
        return 1.0;
    }
    let miss = (n as f64 - 1.0) / n as f64;
    1.0 - miss.powi(m as i32 + 1)
}

/// Fraction of spending transactions whose output shard or any input shard is
/// `target`, with shards assigned by hash. Genesis records only seed the
/// lookup table; they are not counted.
pub fn affected_fraction_empirical<'a, I>(
    workload: I,
    n: u32,
    target: ShardId,
    order: BitOrder,
) -> Result<f64, AnalyticsError>
where
    I: IntoIterator<Item = &'a WorkloadTx>,
{
    let sharder = HashSharder::with_order(n, order)?;
    let mut shard_by_tx: HashMap<TxId, ShardId> = HashMap::new();
    let mut counted = 0u64;
    let mut affected = 0u64;
    for tx in workload {
        let out = sharder.shard_for(&tx.txid);
        shard_by_tx.insert(tx.txid, out);
        if tx.kind == TxKind::Genesis {
            continue;
        }
        let mut hit = out == target;
        for op in &tx.inputs {
            let s = *shard_by_tx.get(&op.txid).ok_or(AnalyticsError::Dangling(*op))?;
            hit |= s == target;
        }
        counted += 1;
        affected += hit as u64;
    }
    if counted == 0 {
        log::warn!("empty workload; affected fraction reported as 0");
        return Ok(0.0);
    }
    Ok(affected as f64 / counted as f64)
}

/// Number of distinct input shards of each spending transaction under hash
/// placement, as a histogram.
pub fn input_shard_counts<'a, I>(workload: I, n: u32, order: BitOrder) -> Result<Vec<u64>, AnalyticsError>
where
    I: IntoIterator<Item = &'a WorkloadTx>,
{
    let sharder = HashSharder::with_order(n, order)?;
    let mut shard_by_tx: HashMap<TxId, ShardId> = HashMap::new();
    let mut hist = vec![0u64; n as usize + 1];
    let mut seen = HashSet::new();
    for tx in workload {
        shard_by_tx.insert(tx.txid, sharder.shard_for(&tx.txid));
        if tx.inputs.is_empty() {
            continue;
        }
        seen.clear();
        for op in &tx.inputs {
            seen.insert(*shard_by_tx.get(&op.txid).ok_or(AnalyticsError::Dangling(*op))?);
        }
        hist[seen.len()] += 1;
    }
    Ok(hist)
}

/// Pearson chi-square goodness of fit against the uniform distribution.
/// Returns `(statistic, p_value)`.
pub fn chi_square_uniform(counts: &[u64]) -> (f64, f64) {
    let k = counts.len();
    let total: u64 = counts.iter().sum();
    if k < 2 || total == 0 {
        return (0.0, 1.0);
    }
    let expected = total as f64 / k as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let dist = ChiSquared::new((k - 1) as f64).expect("positive degrees of freedom");
    (stat, dist.sf(stat))
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// z-value of a two-sided 95% interval.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tx::Transaction;

    #[test]
    fn expected_attempts_is_n() {
        assert_eq!(expected_attempts(16), 16.0);
        assert_eq!(expected_attempts(1), 1.0);
    }

    #[test]
    fn figure_anchor_points() {
        assert!((affected_probability(4, 3) - (1.0 - 0.75f64.powi(4))).abs() < 1e-15);
        assert!((affected_probability(4, 3) - 0.684).abs() < 1e-3);
        assert!((affected_probability(16, 2) - 0.176).abs() < 1e-3);
        for m in 0..10 {
            assert_eq!(affected_probability(1, m), 1.0);
        }
    }

    #[test]
    fn monotone_over_a_grid() {
        for n in 2..64 {
            for m in 0..20 {
                let p = affected_probability(n, m);
                assert!((0.0..=1.0).contains(&p));
                assert!(affected_probability(n, m + 1) > p);
                assert!(affected_probability(n + 1, m) < p);
            }
        }
    }

    fn tx_with(inputs: Vec<Outpoint>, kind: TxKind, nonce: u64) -> WorkloadTx {
        let tx = Transaction { inputs, nonce: nonce.to_le_bytes().to_vec(), ..Default::default() };
        WorkloadTx::from_tx(&tx, kind)
    }

    #[test]
    fn empty_workload_is_zero() {
        let empty: Vec<WorkloadTx> = Vec::new();
        assert_eq!(affected_fraction_empirical(&empty, 16, ShardId(0), BitOrder::BigEndian), Ok(0.0));
    }

    #[test]
    fn dangling_input_is_an_error() {
        let op = Outpoint { txid: TxId([9; 32]), index: 0 };
        let w = vec![tx_with(vec![op], TxKind::Legit, 0)];
        assert_eq!(
            affected_fraction_empirical(&w, 16, ShardId(0), BitOrder::BigEndian),
            Err(AnalyticsError::Dangling(op))
        );
    }

    #[test]
    fn all_on_target_is_one() {
        let sharder = HashSharder::new(16).unwrap();
        let genesis = tx_with(vec![], TxKind::Genesis, 0);
        let mut w = vec![genesis.clone()];
        let mut nonce = 1;
        while w.len() < 50 {
            let t = tx_with(vec![Outpoint { txid: genesis.txid, index: 0 }], TxKind::Legit, nonce);
            nonce += 1;
            if sharder.shard_for(&t.txid) == ShardId(5) {
                w.push(t);
            }
        }
        assert_eq!(affected_fraction_empirical(&w, 16, ShardId(5), BitOrder::BigEndian), Ok(1.0));
    }

    #[test]
    fn iid_workload_converges_to_formula() {
        // Every child spends two fresh genesis records, so its input shards and
        // its own output shard are independent uniform draws.
        let trials = 40_000u64;
        let mut w = Vec::new();
        for i in 0..trials {
            let a = tx_with(vec![], TxKind::Genesis, 3 * i);
            let b = tx_with(vec![], TxKind::Genesis, 3 * i + 1);
            let ins = vec![Outpoint { txid: a.txid, index: 0 }, Outpoint { txid: b.txid, index: 0 }];
            w.push(a);
            w.push(b);
            w.push(tx_with(ins, TxKind::Legit, 3 * i + 2));
        }
        let got = affected_fraction_empirical(&w, 16, ShardId(0), BitOrder::BigEndian).unwrap();
        let p = affected_probability(16, 2);
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((got - p).abs() < 3.0 * sigma, "got {got}, want {p}");
    }

    #[test]
    fn chi_square_flags_skew() {
        let (_, p) = chi_square_uniform(&[1000, 1000, 1000, 1000]);
        assert!(p > 0.99);
        let (_, p) = chi_square_uniform(&[1200, 900, 950, 950]);
        assert!(p < 1e-6);
    }

    #[test]
    fn wilson_contains_truth() {
        let (lo, hi) = wilson_interval(6250, 100_000, Z_95);
        assert!(lo < 1.0 / 16.0 && 1.0 / 16.0 < hi);
        assert_eq!(wilson_interval(0, 0, Z_95), (0.0, 1.0));
    }
}
