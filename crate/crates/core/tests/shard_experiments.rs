//! Scaled-down versions of the flooding experiments. The full-size runs live
//! in the acceptance target.

use shardflood::metrics::MetricsReport;
use shardflood::shard::{ExperimentSpec, SharderKind, SimConfig};

fn run(shards: u32, tps: f64, fraction: f64, txs: u64, sharder: SharderKind) -> MetricsReport {
    let sim = SimConfig { sharder, ..SimConfig::with_shards(shards) };
    let spec = ExperimentSpec { injection_tps: tps, malicious_fraction: fraction, tx_count: txs, ..Default::default() };
    let r = spec.run(&sim).unwrap();
    assert_eq!(r.audit.double_spends, 0);
    assert_eq!(r.audit.ordering_violations, 0);
    assert!(r.audit.conservation_ok);
    r
}

#[test]
fn single_shard_saturates_at_block_capacity() {
    let r = run(1, 500.0, 0.0, 30_000, SharderKind::Hash);
    assert!((r.throughput_tps - 250.0).abs() <= 12.5, "{}", r.throughput_tps);
}

#[test]
fn flooding_shard_zero_degrades_throughput_latency_and_its_queue() {
    let calm = run(16, 4000.0, 0.0, 150_000, SharderKind::Hash);
    let hit = run(16, 4000.0, 0.2, 150_000, SharderKind::Hash);
    assert!(hit.throughput_tps < 0.5 * calm.throughput_tps, "{} vs {}", hit.throughput_tps, calm.throughput_tps);
    assert!(hit.avg_latency_ms > calm.avg_latency_ms);
    assert!(hit.queue_max(0) > 5 * calm.queue_max(0));
    // The target queue dwarfs every other shard's.
    let others = (1..16).map(|s| hit.queue_max(s)).max().unwrap();
    assert!(hit.queue_max(0) > 5 * others);
}

#[test]
fn balanced_placement_absorbs_the_same_flood() {
    let hash = run(16, 4000.0, 0.2, 150_000, SharderKind::Hash);
    let tee = run(16, 4000.0, 0.2, 150_000, SharderKind::Tee);
    assert!(tee.throughput_tps > 2.0 * hash.throughput_tps);
    assert!(tee.queue_max(0) * 5 < hash.queue_max(0));
    let spread = (0..16).map(|s| tee.queue_max(s)).max().unwrap();
    assert!(spread * 5 < hash.queue_max(0));
}

#[test]
fn throughput_never_rises_with_the_malicious_share() {
    let tps: Vec<f64> =
        [0.0, 0.1, 0.3].iter().map(|&f| run(16, 5000.0, f, 100_000, SharderKind::Hash).throughput_tps).collect();
    assert!(tps.windows(2).all(|w| w[1] <= w[0]), "{tps:?}");
}

#[test]
fn relay_only_attack_traffic_is_never_confirmed() {
    let sim = SimConfig { relay_only_malicious: true, ..SimConfig::with_shards(8) };
    let spec = ExperimentSpec { injection_tps: 1000.0, malicious_fraction: 0.3, tx_count: 20_000, ..Default::default() };
    let r = spec.run(&sim).unwrap();
    assert!(r.malicious_submitted > 0);
    assert_eq!(r.malicious_committed, 0);
    assert_eq!(r.legit_committed, r.legit_submitted);
}
