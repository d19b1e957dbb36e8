//! Canonical byte serialization used for block hashing.
//!
//! Integers are big-endian, strings are a `u32` big-endian byte length
//! followed by UTF-8 bytes, maps are a `u32` entry count followed by
//! key/value string pairs in ascending key order.

use std::collections::BTreeMap;

use super::transaction::{Transaction, TxKind, TxStatus};

#[derive(Debug, Default)]
pub struct CanonicalWriter {
    buf: Vec<u8>,
}

impl CanonicalWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.raw(s.as_bytes())
    }

    pub fn map(&mut self, map: &BTreeMap<String, String>) -> &mut Self {
        self.u32(map.len() as u32);
        for (k, v) in map {
            self.str(k).str(v);
        }
        self
    }

    /// Hashed transaction fields. The lifecycle status is not part of the
    /// encoding because it changes after the transaction is sealed in a block.
    pub fn transaction(&mut self, tx: &Transaction) -> &mut Self {
        self.str(&tx.tx_id)
            .str(&tx.device_id)
            .u8(tx.kind.tag())
            .map(&tx.params)
            .str(&tx.issuer)
            .u64(tx.submitted_at)
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum CanonicalError {
    #[error("input truncated")]
    Truncated,
    #[error("string is not valid UTF-8")]
    Utf8,
    #[error("trailing bytes")]
    Trailing,
    #[error("not in canonical form")]
    NotCanonical,
}

pub struct CanonicalReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> CanonicalReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CanonicalError> {
        let end = self.pos.checked_add(n).ok_or(CanonicalError::Truncated)?;
        let out = self.data.get(self.pos..end).ok_or(CanonicalError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8], CanonicalError> {
        self.take(n)
    }

    pub fn u8(&mut self) -> Result<u8, CanonicalError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, CanonicalError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64, CanonicalError> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<String, CanonicalError> {
        let len = self.u32()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| CanonicalError::Utf8)
    }

    pub fn map(&mut self) -> Result<BTreeMap<String, String>, CanonicalError> {
        let n = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let k = self.str()?;
            let v = self.str()?;
            // Keys must be strictly ascending for the encoding to be canonical.
            if out.last_key_value().is_some_and(|(last, _): (&String, _)| *last >= k) {
                return Err(CanonicalError::NotCanonical);
            }
            out.insert(k, v);
        }
        Ok(out)
    }

    /// Inverse of [`CanonicalWriter::transaction`]. The status is not
    /// encoded, so decoded transactions come back as `Mined`.
    pub fn transaction(&mut self) -> Result<Transaction, CanonicalError> {
        let tx_id = self.str()?;
        let device_id = self.str()?;
        let kind = TxKind::from_tag(self.u8()?).ok_or(CanonicalError::NotCanonical)?;
        let params = self.map()?;
        let issuer = self.str()?;
        let submitted_at = self.u64()?;
        Ok(Transaction {
            tx_id,
            device_id,
            kind,
            params,
            issuer,
            submitted_at,
            status: TxStatus::Mined,
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.data.len()
    }
}

/// Encodes a parameter map on its own, as carried in CoAP config payloads.
pub fn encode_params(params: &BTreeMap<String, String>) -> Vec<u8> {
    let mut w = CanonicalWriter::new();
    w.map(params);
    w.into_bytes()
}

pub fn decode_params(bytes: &[u8]) -> Result<BTreeMap<String, String>, CanonicalError> {
    let mut r = CanonicalReader::new(bytes);
    let out = r.map()?;
    if !r.is_done() {
        return Err(CanonicalError::Trailing);
    }
    Ok(out)
}
