use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use shardflood::hashshard::ShardId;
use shardflood::protocol::{
    encode_process, validator_process, Behavior, Client, IdealBlockchain, KeyRegistry, Reliable, Validator,
};
use shardflood::tee::ProgramDescriptor;
use shardflood::tx::{Address, Outpoint, Transaction, TxOut};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Adversary {
    None,
    NoTee,
    TamperSout,
    TamperSignature,
    Lagging,
    WrongTx,
    /// A client that rewrites the shard in its process message.
    ForgeProcess,
}

#[derive(Args)]
pub struct DemoArgs {
    #[arg(long, value_enum, default_value_t = Adversary::None)]
    adversary: Adversary,
    #[arg(long, default_value_t = 8)]
    txs: usize,
    #[arg(long, default_value_t = 4)]
    shards: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// One honest validator plus one playing the adversary; the client asks both
/// for every transaction and the transcript shows what it kept.
pub fn run(a: DemoArgs) -> Result<(), CliError> {
    if a.shards == 0 {
        return Err(CliError::Config("--shards must be positive".into()));
    }
    let run_err = |e: shardflood::protocol::ProtocolError| CliError::Run(e.to_string());
    let mut rng = ChaCha20Rng::seed_from_u64(a.seed);
    let prog = ProgramDescriptor::balanced(a.shards);
    let second = match a.adversary {
        Adversary::None | Adversary::ForgeProcess => Behavior::Honest,
        Adversary::NoTee => Behavior::NoTee,
        Adversary::TamperSout => Behavior::TamperShard,
        Adversary::TamperSignature => Behavior::TamperSignature,
        Adversary::Lagging => Behavior::Lagging,
        Adversary::WrongTx => Behavior::WrongTx,
    };
    let mut validators = vec![
        Validator::new(0, Behavior::Honest, &prog, &mut rng).map_err(run_err)?,
        Validator::new(1, second, &prog, &mut rng).map_err(run_err)?,
    ];
    let mut registry = KeyRegistry::new(prog.id());
    for v in validators.iter().filter(|v| v.attested()) {
        registry.register(v.public_keys().attestation);
    }

    let mut chain = IdealBlockchain::new(a.shards).map_err(run_err)?;
    let mut coins: Vec<Outpoint> = Vec::new();
    for s in 0..a.shards {
        let tx = Transaction {
            outputs: (0..8).map(|_| TxOut { address: Address::random(&mut rng), value: 10_000 }).collect(),
            nonce: s.to_le_bytes().to_vec(),
            ..Default::default()
        };
        coins.extend((0..8).map(|i| tx.outpoint(i)));
        chain.seed_genesis(ShardId(s), vec![tx]).map_err(run_err)?;
    }
    println!("# validators: #0 Honest, #1 {second:?}; {} shards, head {}", a.shards, chain.height());

    let mut client = Client::new(validators.len(), ChaCha20Rng::seed_from_u64(a.seed ^ 0xc11e));
    let mut detected = 0u64;
    let mut next = 0usize;
    for _ in 0..a.txs {
        let take = 2.min(coins.len() - next);
        if take == 0 {
            println!("# out of coins");
            break;
        }
        let inputs = coins[next..next + take].to_vec();
        next += take;
        let tx = Transaction {
            inputs,
            outputs: vec![TxOut { address: Address::random(&mut rng), value: 9_000 * take as u64 }],
            ..Default::default()
        };
        let before = client.stats.clone();
        let placement = match client.attest(&tx, &mut validators, &chain, &registry, &mut Reliable) {
            Ok(p) => p,
            Err(e) => {
                detected += 1;
                println!("tx {} | no usable attestation: {e}", short(&tx));
                continue;
            }
        };
        let bad = client.stats.bad_responses - before.bad_responses;
        let stale = client.stats.stale_responses - before.stale_responses;
        detected += bad + stale;
        let mut note = String::new();
        if bad > 0 {
            note.push_str(&format!(", discarded {bad} unverifiable answer(s)"));
        }
        if stale > 0 {
            note.push_str(&format!(", ignored {stale} stale answer(s)"));
        }
        if a.adversary == Adversary::ForgeProcess {
            let mut forged = placement;
            forged.s_out = ShardId((forged.s_out.0 + 1) % a.shards);
            match validator_process(&mut chain, &registry, &encode_process(&forged, &tx)) {
                Ok(_) => return Err(CliError::Run("a forged process message was accepted".into())),
                Err(e) => {
                    detected += 1;
                    note.push_str(&format!(", forged copy for shard {} refused ({e})", forged.s_out.0));
                }
            }
        }
        let header = validator_process(&mut chain, &registry, &encode_process(&placement, &tx)).map_err(run_err)?;
        println!(
            "tx {} | attested shard {} at st {}{note} | committed at shard height {}",
            short(&tx),
            placement.s_out.0,
            placement.st,
            header.height
        );
    }
    println!(
        "# queried {}, failed {}, bad {}, stale {}",
        client.stats.queried, client.stats.failed_requests, client.stats.bad_responses, client.stats.stale_responses
    );
    if detected > 0 {
        return Err(CliError::Verification(format!("{detected} tampered or stale message(s) detected and dropped")));
    }
    Ok(())
}

fn short(tx: &Transaction) -> String {
    tx.txid().to_string()[..12].to_string()
}
