//! Embedded consortium ledger: pending pool, proof-of-work mining and the
//! lifecycle status store for every transaction it has accepted.

mod block;
pub mod canonical;
mod transaction;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use serde::{Deserialize, Serialize};

pub use block::{
    block_preimage, decode_block, encode_block, encode_chain, validate_chain, validate_encoded_chain,
    Block, Chain, Digest, InvalidReason, ValidationReport,
};
pub use transaction::{Transaction, TxKind, TxStatus};

use crate::clock::{Clock, SystemClock};

pub const DEFAULT_DIFFICULTY: u32 = 12;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("transaction id {0} already known")]
    DuplicateTxId(String),
    #[error("transaction has an empty device id")]
    UnknownDeviceKindCombination,
    #[error("transaction {tx_id} has status {status}, expected submitted")]
    NotSubmitted { tx_id: String, status: TxStatus },
    #[error("pending pool is empty")]
    EmptyPool,
    #[error("unknown transaction {0}")]
    UnknownTransaction(String),
    #[error("transaction {tx_id}: illegal transition {from} -> {to}")]
    StatusConflict {
        tx_id: String,
        from: TxStatus,
        to: TxStatus,
    },
    #[error("ledger state unavailable")]
    Unavailable,
}

pub type Result<T, E = LedgerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxFilter {
    #[serde(default)]
    pub status: Option<TxStatus>,
    #[serde(default)]
    pub kind: Option<TxKind>,
    #[serde(default)]
    pub device_id: Option<String>,
    #[serde(default)]
    pub since_block: Option<u64>,
}

impl TxFilter {
    fn matches(&self, tx: &Transaction, block_index: u64) -> bool {
        self.status.is_none_or(|s| s == tx.status)
            && self.kind.is_none_or(|k| k == tx.kind)
            && self.device_id.as_deref().is_none_or(|d| d == tx.device_id)
            && self.since_block.is_none_or(|b| block_index >= b)
    }
}

/// A transaction read back from the chain with its current status.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub tx: Transaction,
    pub block_index: u64,
}

/// Rejected or expired transactions fed back into the provenance stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub tx_id: String,
    pub block_index: u64,
    pub status: TxStatus,
    pub recorded_at: u64,
}

#[derive(Debug, Clone, Copy)]
struct TxRecord {
    status: TxStatus,
    block_index: Option<u64>,
}

#[derive(Debug, Default)]
struct LedgerState {
    chain: Chain,
    pool: Vec<Transaction>,
    records: HashMap<String, TxRecord>,
    /// (block index, position in block) for every mined transaction
    locations: HashMap<String, (usize, usize)>,
    rejections: Vec<RejectionRecord>,
}

pub struct Ledger {
    state: RwLock<LedgerState>,
    mining: Mutex<()>,
    clock: Arc<dyn Clock>,
}

impl Default for Ledger {
    fn default() -> Self {
        Self::new(Arc::new(SystemClock))
    }
}

impl std::fmt::Debug for Ledger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ledger").finish_non_exhaustive()
    }
}

impl Ledger {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            state: RwLock::new(LedgerState::default()),
            mining: Mutex::new(()),
            clock,
        }
    }

    fn read(&self) -> Result<RwLockReadGuard<'_, LedgerState>> {
        self.state.read().map_err(|_| LedgerError::Unavailable)
    }

    fn write(&self) -> Result<RwLockWriteGuard<'_, LedgerState>> {
        self.state.write().map_err(|_| LedgerError::Unavailable)
    }

    pub fn submit_transaction(&self, tx: Transaction) -> Result<String> {
        if tx.device_id.is_empty() {
            return Err(LedgerError::UnknownDeviceKindCombination);
        }
        if tx.status != TxStatus::Submitted {
            return Err(LedgerError::NotSubmitted {
                tx_id: tx.tx_id,
                status: tx.status,
            });
        }
        let mut st = self.write()?;
        if st.records.contains_key(&tx.tx_id) {
            return Err(LedgerError::DuplicateTxId(tx.tx_id));
        }
        st.records.insert(
            tx.tx_id.clone(),
            TxRecord {
                status: TxStatus::Submitted,
                block_index: None,
            },
        );
        let id = tx.tx_id.clone();
        st.pool.push(tx);
        Ok(id)
    }

    /// Mines the entire pending pool into one block. Readers are not blocked
    /// while the nonce search runs.
    pub fn mine_block(&self, miner_id: &str, difficulty: u32) -> Result<Block> {
        let _guard = self.mining.lock().map_err(|_| LedgerError::Unavailable)?;
        let (prev, mut txs) = {
            let mut st = self.write()?;
            if st.pool.is_empty() {
                return Err(LedgerError::EmptyPool);
            }
            (st.chain.tip().clone(), std::mem::take(&mut st.pool))
        };
        for tx in &mut txs {
            tx.status = TxStatus::Mined;
        }
        let block = Block::mine(&prev, miner_id, difficulty, txs, self.clock.now_ms());

        let mut st = self.write()?;
        let pos = st.chain.blocks.len();
        for (i, tx) in block.transactions.iter().enumerate() {
            st.records.insert(
                tx.tx_id.clone(),
                TxRecord {
                    status: TxStatus::Mined,
                    block_index: Some(block.index),
                },
            );
            st.locations.insert(tx.tx_id.clone(), (pos, i));
        }
        st.chain.blocks.push(block.clone());
        tracing::debug!(index = block.index, txs = block.transactions.len(), nonce = block.nonce, "mined block");
        Ok(block)
    }

    pub fn pool_len(&self) -> usize {
        self.read().map(|st| st.pool.len()).unwrap_or(0)
    }

    pub fn height(&self) -> u64 {
        self.read().map(|st| st.chain.height()).unwrap_or(0)
    }

    pub fn chain(&self) -> Result<Chain> {
        Ok(self.read()?.chain.clone())
    }

    pub fn validate(&self) -> Result<ValidationReport> {
        Ok(validate_chain(&self.read()?.chain))
    }

    pub fn status_of(&self, tx_id: &str) -> Option<TxStatus> {
        self.read().ok()?.records.get(tx_id).map(|r| r.status)
    }

    /// Looks a transaction up in the chain or the pending pool, with its
    /// current status applied.
    pub fn get(&self, tx_id: &str) -> Option<(Transaction, Option<u64>)> {
        let st = self.read().ok()?;
        let rec = *st.records.get(tx_id)?;
        let mut tx = match st.locations.get(tx_id) {
            Some(&(b, i)) => st.chain.blocks[b].transactions[i].clone(),
            None => st.pool.iter().find(|t| t.tx_id == tx_id)?.clone(),
        };
        tx.status = rec.status;
        Some((tx, rec.block_index))
    }

    /// Matching mined transactions in chain order, carrying current status.
    pub fn read_transactions(&self, filter: &TxFilter) -> Result<Vec<LedgerEntry>> {
        let st = self.read()?;
        let start = filter.since_block.unwrap_or(0) as usize;
        let mut out = Vec::new();
        for block in st.chain.blocks.iter().skip(start) {
            for tx in &block.transactions {
                let mut tx = tx.clone();
                if let Some(rec) = st.records.get(&tx.tx_id) {
                    tx.status = rec.status;
                }
                if filter.matches(&tx, block.index) {
                    out.push(LedgerEntry {
                        tx,
                        block_index: block.index,
                    });
                }
            }
        }
        Ok(out)
    }

    /// The most recent `window` mined transactions, oldest first.
    pub fn recent(&self, window: usize) -> Result<Vec<LedgerEntry>> {
        let st = self.read()?;
        let mut out = Vec::with_capacity(window);
        'outer: for block in st.chain.blocks.iter().rev() {
            for tx in block.transactions.iter().rev() {
                if out.len() == window {
                    break 'outer;
                }
                let mut tx = tx.clone();
                if let Some(rec) = st.records.get(&tx.tx_id) {
                    tx.status = rec.status;
                }
                out.push(LedgerEntry {
                    tx,
                    block_index: block.index,
                });
            }
        }
        out.reverse();
        Ok(out)
    }

    /// Applies one lifecycle edge; any edge not in the lifecycle is refused.
    pub fn transition(&self, tx_id: &str, to: TxStatus) -> Result<Transaction> {
        let mut st = self.write()?;
        let rec = st
            .records
            .get_mut(tx_id)
            .ok_or_else(|| LedgerError::UnknownTransaction(tx_id.to_string()))?;
        if !rec.status.can_transition_to(to) {
            return Err(LedgerError::StatusConflict {
                tx_id: tx_id.to_string(),
                from: rec.status,
                to,
            });
        }
        rec.status = to;
        drop(st);
        self.get(tx_id)
            .map(|(tx, _)| tx)
            .ok_or_else(|| LedgerError::UnknownTransaction(tx_id.to_string()))
    }

    /// Feeds a rejected (or expired) transaction back into the provenance
    /// stream so the next context snapshot carries it with that status.
    pub fn record_rejection(&self, tx: &Transaction) -> Result<RejectionRecord> {
        let now = self.clock.now_ms();
        let mut st = self.write()?;
        let rec = *st
            .records
            .get(&tx.tx_id)
            .ok_or_else(|| LedgerError::UnknownTransaction(tx.tx_id.clone()))?;
        let block_index = match (rec.status, rec.block_index) {
            (TxStatus::Rejected | TxStatus::Expired, Some(b)) => b,
            (status, _) => {
                return Err(LedgerError::StatusConflict {
                    tx_id: tx.tx_id.clone(),
                    from: status,
                    to: TxStatus::Rejected,
                })
            }
        };
        let record = RejectionRecord {
            tx_id: tx.tx_id.clone(),
            block_index,
            status: rec.status,
            recorded_at: now,
        };
        st.rejections.push(record.clone());
        Ok(record)
    }

    pub fn rejections(&self) -> Vec<RejectionRecord> {
        self.read().map(|st| st.rejections.clone()).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn ledger() -> Ledger {
        Ledger::new(Arc::new(ManualClock::new(1_000)))
    }

    fn read(id: &str) -> Transaction {
        Transaction::new(id, "sensor-1", TxKind::Read, "op", 1).with_param("unit", "celsius")
    }

    #[test]
    fn submit_then_mine_includes_transaction() {
        let l = ledger();
        assert_eq!(l.submit_transaction(read("a")).unwrap(), "a");
        let b = l.mine_block("m1", 8).unwrap();
        assert_eq!(b.index, 1);
        assert_eq!(b.transactions.len(), 1);
        assert_eq!(l.status_of("a"), Some(TxStatus::Mined));
        assert_eq!(l.pool_len(), 0);
    }

    #[test]
    fn duplicate_and_degenerate_submissions_fail() {
        let l = ledger();
        l.submit_transaction(read("a")).unwrap();
        assert_eq!(
            l.submit_transaction(read("a")),
            Err(LedgerError::DuplicateTxId("a".into()))
        );
        l.mine_block("m", 4).unwrap();
        // still a duplicate once mined
        assert!(matches!(
            l.submit_transaction(read("a")),
            Err(LedgerError::DuplicateTxId(_))
        ));
        let mut empty = read("b");
        empty.device_id.clear();
        assert_eq!(
            l.submit_transaction(empty),
            Err(LedgerError::UnknownDeviceKindCombination)
        );
        let mut mined = read("c");
        mined.status = TxStatus::Mined;
        assert!(matches!(
            l.submit_transaction(mined),
            Err(LedgerError::NotSubmitted { .. })
        ));
    }

    #[test]
    fn mining_empty_pool_fails() {
        assert_eq!(ledger().mine_block("m", 4), Err(LedgerError::EmptyPool));
    }

    #[test]
    fn hundred_reads_in_one_block_at_default_difficulty() {
        let l = ledger();
        for i in 0..100 {
            l.submit_transaction(read(&format!("r{i}"))).unwrap();
        }
        let b = l.mine_block("m", DEFAULT_DIFFICULTY).unwrap();
        assert_eq!(b.transactions.len(), 100);
        assert!(b.hash.leading_zero_bits() >= 12);
        let mined = l
            .read_transactions(&TxFilter {
                status: Some(TxStatus::Mined),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(mined.len(), 100);
        assert!(l.validate().unwrap().valid);
    }

    #[test]
    fn read_on_empty_chain_is_empty() {
        assert!(ledger().read_transactions(&TxFilter::default()).unwrap().is_empty());
    }

    #[test]
    fn rejected_config_update_is_readable() {
        let l = ledger();
        l.submit_transaction(read("r")).unwrap();
        l.submit_transaction(
            Transaction::new("c", "sensor-1", TxKind::ConfigUpdate, "op", 2)
                .with_param("unit", "fahrenheit"),
        )
        .unwrap();
        l.mine_block("m", 4).unwrap();
        l.transition("c", TxStatus::Suspicious).unwrap();
        let tx = l.transition("c", TxStatus::Rejected).unwrap();
        let rec = l.record_rejection(&tx).unwrap();
        assert_eq!(rec.block_index, 1);
        let rows = l
            .read_transactions(&TxFilter {
                kind: Some(TxKind::ConfigUpdate),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].tx.status, TxStatus::Rejected);
    }

    #[test]
    fn record_rejection_requires_rejected_status() {
        let l = ledger();
        l.submit_transaction(read("r")).unwrap();
        l.mine_block("m", 4).unwrap();
        let (tx, _) = l.get("r").unwrap();
        assert!(matches!(
            l.record_rejection(&tx),
            Err(LedgerError::StatusConflict { .. })
        ));
    }

    #[test]
    fn illegal_transitions_are_refused() {
        let l = ledger();
        l.submit_transaction(read("r")).unwrap();
        assert!(matches!(
            l.transition("r", TxStatus::Approved),
            Err(LedgerError::StatusConflict { .. })
        ));
        l.mine_block("m", 4).unwrap();
        l.transition("r", TxStatus::Approved).unwrap();
        assert!(matches!(
            l.transition("r", TxStatus::Suspicious),
            Err(LedgerError::StatusConflict { .. })
        ));
        assert!(matches!(
            l.transition("zz", TxStatus::Mined),
            Err(LedgerError::UnknownTransaction(_))
        ));
    }

    #[test]
    fn recent_takes_tail_in_chain_order() {
        let l = ledger();
        for round in 0..3 {
            for i in 0..4 {
                l.submit_transaction(read(&format!("t{round}-{i}"))).unwrap();
            }
            l.mine_block("m", 4).unwrap();
        }
        let ids: Vec<_> = l.recent(6).unwrap().into_iter().map(|e| e.tx.tx_id).collect();
        assert_eq!(ids, ["t1-2", "t1-3", "t2-0", "t2-1", "t2-2", "t2-3"]);
        assert_eq!(l.recent(100).unwrap().len(), 12);
    }

    #[test]
    fn filters_compose() {
        let l = ledger();
        l.submit_transaction(read("a")).unwrap();
        l.mine_block("m", 4).unwrap();
        let mut other = read("b");
        other.device_id = "sensor-2".into();
        l.submit_transaction(other).unwrap();
        l.mine_block("m", 4).unwrap();
        let f = TxFilter {
            device_id: Some("sensor-2".into()),
            ..Default::default()
        };
        assert_eq!(l.read_transactions(&f).unwrap().len(), 1);
        let f = TxFilter {
            since_block: Some(2),
            ..Default::default()
        };
        let rows = l.read_transactions(&f).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].block_index, 2);
    }
}
