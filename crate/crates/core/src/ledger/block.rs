use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use super::canonical::{CanonicalError, CanonicalReader, CanonicalWriter};
use super::transaction::Transaction;

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn leading_zero_bits(&self) -> u32 {
        let mut bits = 0;
        for byte in self.0 {
            if byte == 0 {
                bits += 8;
            } else {
                bits += byte.leading_zeros();
                break;
            }
        }
        bits
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex chars"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Digest,
    pub nonce: u64,
    pub difficulty: u32,
    pub miner_id: String,
    pub transactions: Vec<Transaction>,
    pub timestamp: u64,
    pub hash: Digest,
}

/// Byte offset of the nonce inside the hashing preimage.
const NONCE_OFFSET: usize = 8 + 32;

/// Canonical preimage: index, prev_hash, nonce, difficulty, miner_id,
/// transaction count + transactions, timestamp.
pub fn block_preimage(
    index: u64,
    prev_hash: &Digest,
    nonce: u64,
    difficulty: u32,
    miner_id: &str,
    transactions: &[Transaction],
    timestamp: u64,
) -> Vec<u8> {
    let mut w = CanonicalWriter::new();
    w.u64(index)
        .raw(&prev_hash.0)
        .u64(nonce)
        .u32(difficulty)
        .str(miner_id)
        .u32(transactions.len() as u32);
    for tx in transactions {
        w.transaction(tx);
    }
    w.u64(timestamp);
    w.into_bytes()
}

impl Block {
    pub fn genesis() -> Self {
        let mut b = Block {
            index: 0,
            prev_hash: Digest::ZERO,
            nonce: 0,
            difficulty: 0,
            miner_id: "genesis".to_string(),
            transactions: Vec::new(),
            timestamp: 0,
            hash: Digest::ZERO,
        };
        b.hash = b.compute_hash();
        b
    }

    pub fn preimage(&self) -> Vec<u8> {
        block_preimage(
            self.index,
            &self.prev_hash,
            self.nonce,
            self.difficulty,
            &self.miner_id,
            &self.transactions,
            self.timestamp,
        )
    }

    pub fn compute_hash(&self) -> Digest {
        Digest::of(&self.preimage())
    }

    /// Builds a block on top of `prev` and scans nonces from 0 upward until
    /// the hash has at least `difficulty` leading zero bits.
    pub fn mine(
        prev: &Block,
        miner_id: &str,
        difficulty: u32,
        transactions: Vec<Transaction>,
        timestamp: u64,
    ) -> Block {
        let index = prev.index + 1;
        let mut preimage = block_preimage(
            index,
            &prev.hash,
            0,
            difficulty,
            miner_id,
            &transactions,
            timestamp,
        );
        let mut nonce = 0u64;
        let hash = loop {
            preimage[NONCE_OFFSET..NONCE_OFFSET + 8].copy_from_slice(&nonce.to_be_bytes());
            let h = Digest::of(&preimage);
            if h.leading_zero_bits() >= difficulty {
                break h;
            }
            nonce = nonce.checked_add(1).expect("nonce space exhausted");
        };
        Block {
            index,
            prev_hash: prev.hash,
            nonce,
            difficulty,
            miner_id: miner_id.to_string(),
            transactions,
            timestamp,
            hash,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvalidReason {
    Genesis,
    IndexLinkage,
    PrevHashLinkage,
    HashMismatch,
    Difficulty,
    /// The encoded chain could not be parsed at this block.
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub height: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_bad_index: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<InvalidReason>,
}

impl ValidationReport {
    fn ok(height: u64) -> Self {
        Self {
            valid: true,
            height,
            first_bad_index: None,
            reason: None,
        }
    }

    fn bad(height: u64, index: u64, reason: InvalidReason) -> Self {
        Self {
            valid: false,
            height,
            first_bad_index: Some(index),
            reason: Some(reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub blocks: Vec<Block>,
}

impl Default for Chain {
    fn default() -> Self {
        Self::new()
    }
}

impl Chain {
    pub fn new() -> Self {
        Self {
            blocks: vec![Block::genesis()],
        }
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("chain always holds genesis")
    }

    /// Number of blocks after genesis.
    pub fn height(&self) -> u64 {
        self.blocks.len() as u64 - 1
    }

    pub fn validate(&self) -> ValidationReport {
        validate_chain(self)
    }
}

/// Checks linkage, hash recomputation and difficulty for every block, in
/// that order, and reports the first failure.
pub fn validate_chain(chain: &Chain) -> ValidationReport {
    let height = chain.blocks.len().saturating_sub(1) as u64;
    if chain.blocks.is_empty() {
        return ValidationReport::bad(0, 0, InvalidReason::Genesis);
    }
    for at in 0..chain.blocks.len() {
        if let Some(reason) = check_at(&chain.blocks, at) {
            return ValidationReport::bad(height, at as u64, reason);
        }
    }
    ValidationReport::ok(height)
}

fn check_at(blocks: &[Block], at: usize) -> Option<InvalidReason> {
    let block = &blocks[at];
    if at == 0 {
        if block.index != 0 || block.prev_hash != Digest::ZERO || !block.transactions.is_empty() {
            return Some(InvalidReason::Genesis);
        }
    } else {
        let prev = &blocks[at - 1];
        if block.index != prev.index.wrapping_add(1) {
            return Some(InvalidReason::IndexLinkage);
        }
        if block.prev_hash != prev.hash {
            return Some(InvalidReason::PrevHashLinkage);
        }
    }
    check_block_body(block)
}

/// Block wire form: canonical preimage followed by the 32-byte stored hash.
pub fn encode_block(block: &Block) -> Vec<u8> {
    let mut out = block.preimage();
    out.extend_from_slice(&block.hash.0);
    out
}

pub fn decode_block(r: &mut CanonicalReader<'_>) -> Result<Block, CanonicalError> {
    let index = r.u64()?;
    let prev_hash = Digest(r.raw(32)?.try_into().expect("32 bytes"));
    let nonce = r.u64()?;
    let difficulty = r.u32()?;
    let miner_id = r.str()?;
    let count = r.u32()?;
    let mut transactions = Vec::new();
    for _ in 0..count {
        transactions.push(r.transaction()?);
    }
    let timestamp = r.u64()?;
    let hash = Digest(r.raw(32)?.try_into().expect("32 bytes"));
    Ok(Block {
        index,
        prev_hash,
        nonce,
        difficulty,
        miner_id,
        transactions,
        timestamp,
        hash,
    })
}

/// Concatenated wire form of every block, genesis first.
pub fn encode_chain(chain: &Chain) -> Vec<u8> {
    chain.blocks.iter().flat_map(encode_block).collect()
}

/// Validates a chain straight from its wire form. Blocks are parsed and
/// checked one at a time, so the report names the first block that is
/// either unparsable or invalid.
pub fn validate_encoded_chain(bytes: &[u8]) -> ValidationReport {
    let mut r = CanonicalReader::new(bytes);
    let mut chain = Chain { blocks: Vec::new() };
    while !r.is_done() {
        let at = chain.blocks.len() as u64;
        match decode_block(&mut r) {
            Ok(block) => chain.blocks.push(block),
            Err(_) => return ValidationReport::bad(at, at, InvalidReason::Malformed),
        }
        if let Some(reason) = check_at(&chain.blocks, at as usize) {
            return ValidationReport::bad(at, at, reason);
        }
    }
    if chain.blocks.is_empty() {
        return ValidationReport::bad(0, 0, InvalidReason::Genesis);
    }
    ValidationReport::ok(chain.height())
}

fn check_block_body(block: &Block) -> Option<InvalidReason> {
    if block.compute_hash() != block.hash {
        return Some(InvalidReason::HashMismatch);
    }
    if block.hash.leading_zero_bits() < block.difficulty {
        return Some(InvalidReason::Difficulty);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::TxKind;

    fn reads(n: usize) -> Vec<Transaction> {
        (0..n)
            .map(|i| {
                Transaction::new(format!("tx-{i}"), "sensor-1", TxKind::Read, "op", 1_000 + i as u64)
                    .with_param("unit", "celsius")
            })
            .collect()
    }

    #[test]
    fn leading_zero_bits_counts_across_bytes() {
        let mut d = [0xffu8; 32];
        assert_eq!(Digest(d).leading_zero_bits(), 0);
        d[0] = 0;
        d[1] = 0x1f;
        assert_eq!(Digest(d).leading_zero_bits(), 11);
        assert_eq!(Digest::ZERO.leading_zero_bits(), 256);
    }

    #[test]
    fn mined_nonce_is_smallest_conforming() {
        // Independent scan: rebuild the full preimage for every candidate nonce.
        let genesis = Block::genesis();
        let txs = reads(3);
        let block = Block::mine(&genesis, "miner-a", 8, txs.clone(), 42_000);
        let mut expected = None;
        for n in 0..1_000_000u64 {
            let pre = block_preimage(1, &genesis.hash, n, 8, "miner-a", &txs, 42_000);
            if Digest::of(&pre).leading_zero_bits() >= 8 {
                expected = Some(n);
                break;
            }
        }
        assert_eq!(Some(block.nonce), expected);
        assert_eq!(block.compute_hash(), block.hash);
    }

    #[test]
    fn mining_is_deterministic() {
        let g = Block::genesis();
        let a = Block::mine(&g, "m", 12, reads(5), 7);
        let b = Block::mine(&g, "m", 12, reads(5), 7);
        assert_eq!(a, b);
        assert!(a.hash.leading_zero_bits() >= 12);
    }

    #[test]
    fn genesis_only_chain_is_valid() {
        let report = Chain::new().validate();
        assert!(report.valid);
        assert_eq!(report.height, 0);
    }

    #[test]
    fn tampered_param_is_hash_mismatch_at_its_block() {
        let mut chain = Chain::new();
        for i in 0..4 {
            let b = Block::mine(chain.tip(), "m", 8, reads(2 + i), 100 + i as u64);
            chain.blocks.push(b);
        }
        assert!(chain.validate().valid);
        let v = chain.blocks[3].transactions[0].params.get_mut("unit").unwrap();
        *v = "celsiuz".to_string();
        let report = chain.validate();
        assert!(!report.valid);
        assert_eq!(report.first_bad_index, Some(3));
        assert_eq!(report.reason, Some(InvalidReason::HashMismatch));
    }

    #[test]
    fn difficulty_violation_is_detected() {
        let mut chain = Chain::new();
        // nonce 0 with a correctly recomputed hash that misses difficulty 16
        let mut b = Block {
            index: 1,
            prev_hash: chain.tip().hash,
            nonce: 0,
            difficulty: 16,
            miner_id: "m".into(),
            transactions: reads(1),
            timestamp: 5,
            hash: Digest::ZERO,
        };
        b.hash = b.compute_hash();
        if b.hash.leading_zero_bits() >= 16 {
            b.timestamp = 6;
            b.hash = b.compute_hash();
        }
        assert!(b.hash.leading_zero_bits() < 16);
        chain.blocks.push(b);
        let report = chain.validate();
        assert_eq!(report.first_bad_index, Some(1));
        assert_eq!(report.reason, Some(InvalidReason::Difficulty));
    }

    #[test]
    fn broken_linkage_is_reported() {
        let mut chain = Chain::new();
        let b1 = Block::mine(chain.tip(), "m", 4, reads(1), 1);
        chain.blocks.push(b1);
        let b2 = Block::mine(chain.tip(), "m", 4, reads(1), 2);
        chain.blocks.push(b2);
        chain.blocks[2].index = 5;
        assert_eq!(chain.validate().reason, Some(InvalidReason::IndexLinkage));
        chain.blocks[2].index = 2;
        chain.blocks[2].prev_hash = Digest::ZERO;
        assert_eq!(chain.validate().reason, Some(InvalidReason::PrevHashLinkage));
    }

    #[test]
    fn digest_serializes_as_hex() {
        let d = Digest::of(b"abc");
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(
            json,
            "\"ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad\""
        );
        assert_eq!(serde_json::from_str::<Digest>(&json).unwrap(), d);
    }
}
