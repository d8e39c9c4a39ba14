//! Unspent-output bookkeeping.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::Rng;
use thiserror::Error;

use crate::tx::{Address, Outpoint, Transaction, TxId, TxOut};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UtxoError {
    #[error("outpoint {0} is not unspent")]
    Missing(Outpoint),
    #[error("outpoint {0} already exists")]
    Duplicate(Outpoint),
    #[error("transaction spends {0} twice")]
    RepeatedInput(Outpoint),
    #[error("outputs ({outputs}) exceed inputs ({inputs})")]
    Overspend { inputs: u64, outputs: u64 },
    #[error("transaction has no inputs")]
    NoInputs,
}

/// Undo record produced by [`UtxoSet::apply_block`].
#[derive(Debug, Clone, Default)]
pub struct BlockUndo {
    spent: Vec<(Outpoint, TxOut)>,
    created: Vec<Outpoint>,
}

/// Map from outpoint to the output it carries, plus a block-height counter.
///
/// Entries are inserted once on creation and removed once on spend; an
/// existing entry is never overwritten.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UtxoSet {
    entries: HashMap<Outpoint, TxOut>,
    state_height: u64,
}

impl UtxoSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn state_height(&self) -> u64 {
        self.state_height
    }

    pub fn get(&self, op: &Outpoint) -> Option<&TxOut> {
        self.entries.get(op)
    }

    pub fn contains(&self, op: &Outpoint) -> bool {
        self.entries.contains_key(op)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Outpoint, &TxOut)> {
        self.entries.iter()
    }

    pub fn create(&mut self, op: Outpoint, out: TxOut) -> Result<(), UtxoError> {
        use std::collections::hash_map::Entry;
        match self.entries.entry(op) {
            Entry::Occupied(_) => Err(UtxoError::Duplicate(op)),
            Entry::Vacant(v) => {
                v.insert(out);
                Ok(())
            }
        }
    }

    pub fn spend(&mut self, op: &Outpoint) -> Result<TxOut, UtxoError> {
        self.entries.remove(op).ok_or(UtxoError::Missing(*op))
    }

    /// Inserts every output of `tx` (used for genesis funding).
    pub fn add_outputs(&mut self, txid: TxId, tx: &Transaction) -> Result<(), UtxoError> {
        for (i, out) in tx.outputs.iter().enumerate() {
            self.create(Outpoint::new(txid, i as u32), *out)?;
        }
        Ok(())
    }

    /// Checks inputs are present, distinct and cover the outputs; returns the fee.
    pub fn check_tx(&self, tx: &Transaction) -> Result<u64, UtxoError> {
        if tx.inputs.is_empty() {
            return Err(UtxoError::NoInputs);
        }
        let mut seen = HashSet::with_capacity(tx.inputs.len());
        let mut total_in = 0u64;
        for op in &tx.inputs {
            if !seen.insert(op) {
                return Err(UtxoError::RepeatedInput(*op));
            }
            let out = self.entries.get(op).ok_or(UtxoError::Missing(*op))?;
            total_in = total_in.saturating_add(out.value);
        }
        let total_out = tx.output_value();
        if total_out > total_in {
            return Err(UtxoError::Overspend {
                inputs: total_in,
                outputs: total_out,
            });
        }
        Ok(total_in - total_out)
    }

    /// Validates then applies `txs` in order as one block. On error the set is
    /// left untouched.
    pub fn apply_block(&mut self, txs: &[Transaction]) -> Result<BlockUndo, UtxoError> {
        let mut undo = BlockUndo::default();
        for tx in txs {
            if let Err(e) = self.apply_tx_logged(tx, &mut undo) {
                self.undo_changes(undo);
                return Err(e);
            }
        }
        self.state_height += 1;
        Ok(undo)
    }

    pub fn revert_block(&mut self, undo: BlockUndo) {
        self.undo_changes(undo);
        self.state_height = self.state_height.saturating_sub(1);
    }

    fn undo_changes(&mut self, undo: BlockUndo) {
        // Outputs both created and spent inside the block appear in both lists,
        // so restore first and delete second.
        for (op, out) in undo.spent.into_iter().rev() {
            self.entries.insert(op, out);
        }
        for op in undo.created.iter().rev() {
            self.entries.remove(op);
        }
    }

    fn apply_tx_logged(&mut self, tx: &Transaction, undo: &mut BlockUndo) -> Result<(), UtxoError> {
        self.check_tx(tx)?;
        let txid = tx.txid();
        for i in 0..tx.outputs.len() {
            let op = Outpoint::new(txid, i as u32);
            if self.entries.contains_key(&op) {
                return Err(UtxoError::Duplicate(op));
            }
        }
        for op in &tx.inputs {
            let out = self.spend(op)?;
            undo.spent.push((*op, out));
        }
        for (i, out) in tx.outputs.iter().enumerate() {
            let op = Outpoint::new(txid, i as u32);
            self.create(op, *out)?;
            undo.created.push(op);
        }
        Ok(())
    }
}

/// Attacker-side wallet view: every known address, and the unspent outputs
/// held by the funded subset.
#[derive(Debug, Clone, Default)]
pub struct AddressBook {
    all: BTreeSet<Address>,
    funded: BTreeMap<Address, Vec<(Outpoint, u64)>>,
    // Parallel index so funded addresses can be sampled in O(1).
    funded_keys: Vec<Address>,
    key_pos: HashMap<Address, usize>,
    utxo_count: usize,
    total: u64,
}

impl AddressBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_random_addresses<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Self {
        let mut book = Self::new();
        for _ in 0..count {
            book.add_address(Address::random(rng));
        }
        book
    }

    pub fn add_address(&mut self, a: Address) {
        self.all.insert(a);
    }

    pub fn add_utxo(&mut self, a: Address, op: Outpoint, value: u64) {
        self.all.insert(a);
        let entry = self.funded.entry(a).or_default();
        if entry.is_empty() {
            self.key_pos.insert(a, self.funded_keys.len());
            self.funded_keys.push(a);
        }
        entry.push((op, value));
        self.utxo_count += 1;
        self.total += value;
    }

    pub fn all_addresses(&self) -> &BTreeSet<Address> {
        &self.all
    }

    pub fn address_list(&self) -> Vec<Address> {
        self.all.iter().copied().collect()
    }

    pub fn funded_count(&self) -> usize {
        self.funded_keys.len()
    }

    pub fn utxo_count(&self) -> usize {
        self.utxo_count
    }

    pub fn is_funded(&self, a: &Address) -> bool {
        self.funded.contains_key(a)
    }

    pub fn balance(&self, a: &Address) -> u64 {
        self.funded
            .get(a)
            .map(|v| v.iter().map(|(_, val)| val).sum())
            .unwrap_or(0)
    }

    pub fn total_balance(&self) -> u64 {
        self.total
    }

    pub fn funded_addresses(&self) -> &[Address] {
        &self.funded_keys
    }

    pub fn utxos(&self, a: &Address) -> &[(Outpoint, u64)] {
        self.funded.get(a).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Removes `op` from `a`; drops `a` from the funded set when emptied.
    pub fn spend(&mut self, a: &Address, op: &Outpoint) -> Option<u64> {
        let list = self.funded.get_mut(a)?;
        let pos = list.iter().position(|(o, _)| o == op)?;
        let (_, value) = list.swap_remove(pos);
        self.utxo_count -= 1;
        self.total -= value;
        if list.is_empty() {
            self.funded.remove(a);
            let k = self.key_pos.remove(a).expect("index in sync");
            self.funded_keys.swap_remove(k);
            if let Some(moved) = self.funded_keys.get(k) {
                self.key_pos.insert(*moved, k);
            }
        }
        Some(value)
    }

    /// Splits the funded outputs round-robin into `parts` disjoint books that
    /// all share the full address set.
    pub fn partition(&self, parts: usize) -> Vec<AddressBook> {
        let parts = parts.max(1);
        let mut out: Vec<AddressBook> = (0..parts)
            .map(|_| AddressBook {
                all: self.all.clone(),
                ..Default::default()
            })
            .collect();
        let mut i = 0;
        for (a, list) in &self.funded {
            for (op, v) in list {
                out[i % parts].add_utxo(*a, *op, *v);
                i += 1;
            }
        }
        out
    }

    pub fn check_invariants(&self) -> bool {
        self.funded.iter().all(|(a, v)| self.all.contains(a) && !v.is_empty())
            && self.funded_keys.len() == self.funded.len()
            && self
                .funded_keys
                .iter()
                .enumerate()
                .all(|(i, a)| self.key_pos.get(a) == Some(&i))
            && self.utxo_count == self.funded.values().map(Vec::len).sum::<usize>()
            && self.total == self.funded.values().flatten().map(|(_, v)| v).sum::<u64>()
    }
}
