//! Human verification of suspicious transactions and two-party approval of
//! rule catalog updates.
//!
//! A suspicious transaction is held in the pending store until a trusted
//! principal approves or revokes it. The first recorded decision wins;
//! every later attempt fails with `AlreadyDecided`. Revoked and expired
//! transactions are fed back into the ledger's provenance stream.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::context::SnapshotSummary;
use crate::evaluator::{enacted_for, Action, Catalog, CatalogError, CatalogHandle, Trigger, Verdict};
use crate::ledger::{Ledger, LedgerError, Transaction, TxKind, TxStatus};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustedPrincipal {
    pub principal_id: String,
    pub bearer_token: String,
    #[serde(default)]
    pub can_update_icontracts: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approve,
    Revoke,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PendingState {
    Awaiting,
    Decided,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub principal_id: String,
    pub decision: Decision,
    pub decided_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxSummary {
    pub tx_id: String,
    pub device_id: String,
    pub kind: TxKind,
    pub params: BTreeMap<String, String>,
    pub issuer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingVerification {
    pub pending_id: String,
    pub tx_id: String,
    pub tx: TxSummary,
    pub reasons: Vec<String>,
    pub snapshot: SnapshotSummary,
    pub enqueued_at: u64,
    /// `None` holds the transaction indefinitely.
    pub ttl_ms: Option<u64>,
    pub state: PendingState,
    pub decision: Option<DecisionRecord>,
}

impl PendingVerification {
    fn is_past_ttl(&self, now: u64) -> bool {
        self.ttl_ms
            .is_some_and(|ttl| now > self.enqueued_at.saturating_add(ttl))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthFailure {
    MissingToken,
    UnknownToken,
    NotPermitted,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VerifierError {
    #[error("only suspicious transactions can be held (tx {tx_id})")]
    NotSuspicious { tx_id: String },
    #[error("transaction {0} is already pending")]
    DuplicatePending(String),
    #[error("unknown pending verification {0}")]
    UnknownPending(String),
    #[error("pending verification {0} already decided")]
    AlreadyDecided(String),
    #[error("unauthorized: {0:?}")]
    Unauthorized(AuthFailure),
    #[error("pending verification {0} expired")]
    Expired(String),
    #[error("a proposal cannot be confirmed by its proposer")]
    SelfConfirm,
    #[error("invalid catalog: {0}")]
    InvalidCatalog(#[from] CatalogError),
    #[error("unknown proposal {0}")]
    UnknownProposal(String),
    #[error("proposal {0} is no longer open")]
    ProposalClosed(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

pub type Result<T, E = VerifierError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionOutcome {
    pub pending_id: String,
    pub principal_id: String,
    pub decision: Decision,
    /// The transaction with its post-decision status.
    pub tx: Transaction,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalState {
    Proposed,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IcUpdateProposal {
    pub proposal_id: String,
    pub catalog: Catalog,
    pub proposer: String,
    pub confirmer: Option<String>,
    pub state: ProposalState,
    pub committed_version: Option<u64>,
}

#[derive(Default)]
struct PendingStore {
    entries: BTreeMap<String, PendingVerification>,
    by_tx: BTreeMap<String, String>,
    next: u64,
}

#[derive(Default)]
struct ProposalStore {
    entries: BTreeMap<String, IcUpdateProposal>,
    next: u64,
}

pub struct Verifier {
    principals: Vec<TrustedPrincipal>,
    ttl_ms: Option<u64>,
    ledger: Arc<Ledger>,
    catalog: CatalogHandle,
    clock: Arc<dyn Clock>,
    pending: Mutex<PendingStore>,
    proposals: Mutex<ProposalStore>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Verifier {
    pub fn new(
        principals: Vec<TrustedPrincipal>,
        ttl_ms: Option<u64>,
        ledger: Arc<Ledger>,
        catalog: CatalogHandle,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            principals,
            ttl_ms,
            ledger,
            catalog,
            clock,
            pending: Mutex::new(PendingStore::default()),
            proposals: Mutex::new(ProposalStore::default()),
        }
    }

    pub fn authenticate(&self, token: Option<&str>) -> Result<&TrustedPrincipal> {
        let token = token
            .filter(|t| !t.is_empty())
            .ok_or(VerifierError::Unauthorized(AuthFailure::MissingToken))?;
        self.principals
            .iter()
            .find(|p| p.bearer_token == token)
            .ok_or(VerifierError::Unauthorized(AuthFailure::UnknownToken))
    }

    fn authenticate_updater(&self, token: Option<&str>) -> Result<&TrustedPrincipal> {
        let p = self.authenticate(token)?;
        if !p.can_update_icontracts {
            return Err(VerifierError::Unauthorized(AuthFailure::NotPermitted));
        }
        Ok(p)
    }

    /// Holds a suspicious transaction for a human decision.
    pub fn enqueue(
        &self,
        tx: &Transaction,
        verdict: &Verdict,
        snapshot: SnapshotSummary,
    ) -> Result<String> {
        if !verdict.is_suspicious() || tx.status != TxStatus::Suspicious || verdict.tx_id != tx.tx_id {
            return Err(VerifierError::NotSuspicious {
                tx_id: tx.tx_id.clone(),
            });
        }
        let now = self.clock.now_ms();
        let mut store = lock(&self.pending);
        if store.by_tx.contains_key(&tx.tx_id) {
            return Err(VerifierError::DuplicatePending(tx.tx_id.clone()));
        }
        store.next += 1;
        let pending_id = format!("pv-{:06}", store.next);
        store.by_tx.insert(tx.tx_id.clone(), pending_id.clone());
        store.entries.insert(
            pending_id.clone(),
            PendingVerification {
                pending_id: pending_id.clone(),
                tx_id: tx.tx_id.clone(),
                tx: TxSummary {
                    tx_id: tx.tx_id.clone(),
                    device_id: tx.device_id.clone(),
                    kind: tx.kind,
                    params: tx.params.clone(),
                    issuer: tx.issuer.clone(),
                },
                reasons: verdict.reasons.clone(),
                snapshot,
                enqueued_at: now,
                ttl_ms: self.ttl_ms,
                state: PendingState::Awaiting,
                decision: None,
            },
        );
        tracing::info!(pending_id, tx_id = %tx.tx_id, reasons = ?verdict.reasons, "transaction held for verification");
        Ok(pending_id)
    }

    pub fn list(&self) -> Vec<PendingVerification> {
        lock(&self.pending).entries.values().cloned().collect()
    }

    pub fn get(&self, pending_id: &str) -> Option<PendingVerification> {
        lock(&self.pending).entries.get(pending_id).cloned()
    }

    pub fn pending_for_tx(&self, tx_id: &str) -> Option<PendingVerification> {
        let store = lock(&self.pending);
        let id = store.by_tx.get(tx_id)?;
        store.entries.get(id).cloned()
    }

    pub fn decide(
        &self,
        pending_id: &str,
        token: Option<&str>,
        decision: Decision,
    ) -> Result<DecisionOutcome> {
        let principal = self.authenticate(token)?.principal_id.clone();
        let now = self.clock.now_ms();
        let tx_id = {
            let mut store = lock(&self.pending);
            let entry = store
                .entries
                .get_mut(pending_id)
                .ok_or_else(|| VerifierError::UnknownPending(pending_id.to_string()))?;
            match entry.state {
                PendingState::Decided => {
                    return Err(VerifierError::AlreadyDecided(pending_id.to_string()))
                }
                PendingState::Expired => return Err(VerifierError::Expired(pending_id.to_string())),
                PendingState::Awaiting if entry.is_past_ttl(now) => {
                    drop(store);
                    self.expire_pending(now);
                    return Err(VerifierError::Expired(pending_id.to_string()));
                }
                PendingState::Awaiting => {}
            }
            entry.state = PendingState::Decided;
            entry.decision = Some(DecisionRecord {
                principal_id: principal.clone(),
                decision,
                decided_at: now,
            });
            entry.tx_id.clone()
        };

        let policies = self.catalog.current().catalog.policies.clone();
        let (tx, actions) = match decision {
            Decision::Approve => (self.ledger.transition(&tx_id, TxStatus::Approved)?, Vec::new()),
            Decision::Revoke => {
                let tx = self.ledger.transition(&tx_id, TxStatus::Rejected)?;
                self.record_rejection(&tx)?;
                (tx, enacted_for(Trigger::OnRejected, &policies))
            }
        };
        tracing::info!(pending_id, tx_id, principal, ?decision, "verification decided");
        Ok(DecisionOutcome {
            pending_id: pending_id.to_string(),
            principal_id: principal,
            decision,
            tx,
            actions,
        })
    }

    /// Writes a rejected or expired transaction back into the provenance
    /// stream read by the next context build.
    pub fn record_rejection(&self, tx: &Transaction) -> Result<()> {
        self.ledger.record_rejection(tx)?;
        Ok(())
    }

    /// Expires undecided entries past their TTL and returns their ids.
    pub fn expire_pending(&self, now: u64) -> Vec<String> {
        let expired: Vec<(String, String)> = {
            let mut store = lock(&self.pending);
            store
                .entries
                .values_mut()
                .filter(|e| e.state == PendingState::Awaiting && e.is_past_ttl(now))
                .map(|e| {
                    e.state = PendingState::Expired;
                    (e.pending_id.clone(), e.tx_id.clone())
                })
                .collect()
        };
        let policies = self.catalog.current().catalog.policies.clone();
        for (pending_id, tx_id) in &expired {
            match self.ledger.transition(tx_id, TxStatus::Expired) {
                Ok(tx) => {
                    if let Err(e) = self.record_rejection(&tx) {
                        tracing::warn!(%tx_id, error = %e, "could not record expiry");
                    }
                    let actions = enacted_for(Trigger::OnExpired, &policies);
                    tracing::info!(%pending_id, %tx_id, ?actions, "pending verification expired");
                }
                Err(e) => tracing::warn!(%tx_id, error = %e, "expiry transition refused"),
            }
        }
        expired.into_iter().map(|(p, _)| p).collect()
    }

    pub fn propose_icontract_update(&self, catalog: Catalog, token: Option<&str>) -> Result<IcUpdateProposal> {
        let proposer = self.authenticate_updater(token)?.principal_id.clone();
        catalog.validate()?;
        let mut store = lock(&self.proposals);
        store.next += 1;
        let proposal = IcUpdateProposal {
            proposal_id: format!("icp-{:04}", store.next),
            catalog,
            proposer,
            confirmer: None,
            state: ProposalState::Proposed,
            committed_version: None,
        };
        store.entries.insert(proposal.proposal_id.clone(), proposal.clone());
        Ok(proposal)
    }

    /// Second phase: a different authorized principal commits the proposal,
    /// which swaps the active catalog for all later evaluations.
    pub fn confirm_icontract_update(&self, proposal_id: &str, token: Option<&str>) -> Result<IcUpdateProposal> {
        let confirmer = self.authenticate_updater(token)?.principal_id.clone();
        let mut store = lock(&self.proposals);
        let p = store
            .entries
            .get_mut(proposal_id)
            .ok_or_else(|| VerifierError::UnknownProposal(proposal_id.to_string()))?;
        if p.state != ProposalState::Proposed {
            return Err(VerifierError::ProposalClosed(proposal_id.to_string()));
        }
        if p.proposer == confirmer {
            return Err(VerifierError::SelfConfirm);
        }
        let version = self.catalog.swap(p.catalog.clone());
        p.confirmer = Some(confirmer);
        p.state = ProposalState::Committed;
        p.committed_version = Some(version);
        tracing::info!(proposal_id, version, "catalog update committed");
        Ok(p.clone())
    }

    pub fn abort_icontract_update(&self, proposal_id: &str, token: Option<&str>) -> Result<IcUpdateProposal> {
        self.authenticate_updater(token)?;
        let mut store = lock(&self.proposals);
        let p = store
            .entries
            .get_mut(proposal_id)
            .ok_or_else(|| VerifierError::UnknownProposal(proposal_id.to_string()))?;
        if p.state != ProposalState::Proposed {
            return Err(VerifierError::ProposalClosed(proposal_id.to_string()));
        }
        p.state = ProposalState::Aborted;
        Ok(p.clone())
    }

    pub fn proposals(&self) -> Vec<IcUpdateProposal> {
        lock(&self.proposals).entries.values().cloned().collect()
    }
}
