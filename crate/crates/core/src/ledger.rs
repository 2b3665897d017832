//! A deterministic simulated ledger.
//!
//! Accounts, contract state (payment channels, payment disputes, SLAs,
//! watermark commitments, data-availability commitments), an append-only event
//! log and a logical clock. Every state change goes through [`Ledger::post`],
//! which validates the whole transaction before mutating anything, so a failed
//! transaction leaves the ledger untouched.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bisection::Verdict;
use crate::channel::{self, ChannelError, ChannelState, Micropayment, PaymentCase, PaymentDisputeCase, PaymentRuling};
use crate::crypto::{Digest, PublicKey};
use crate::sla::{SignedSla, SlaError, SlaRegistry, SlaTerms, Tokens};
use crate::watermark::{self, WatermarkCommitment, WatermarkError};

/// Name of an on-ledger actor.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct AccountId(pub String);

impl AccountId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AccountId {
    fn from(s: &str) -> Self {
        AccountId(s.to_string())
    }
}

impl From<String> for AccountId {
    fn from(s: String) -> Self {
        AccountId(s)
    }
}

/// Numeric contract id; also the processing order for expiries in one tick.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContractId(pub u64);

impl fmt::Display for ContractId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("unknown account {0}")]
    UnknownAccount(AccountId),
    #[error("account {0} already exists")]
    DuplicateAccount(AccountId),
    #[error("{account} holds {balance}, needs {needed}")]
    InsufficientFunds {
        account: AccountId,
        balance: Tokens,
        needed: Tokens,
    },
    #[error("advance needs at least one tick")]
    ZeroTicks,
    #[error("invalid transaction: {0}")]
    Invalid(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Sla(#[from] SlaError),
    #[error(transparent)]
    Watermark(#[from] WatermarkError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerConfig {
    /// Ticks a payment dispute stays open, and ticks after a close during
    /// which the payee may still dispute.
    pub dispute_window: u64,
    /// Paid by a payee whose payment dispute is dismissed.
    pub dispute_fee: Tokens,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        LedgerConfig {
            dispute_window: 5,
            dispute_fee: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Account {
    pub balance: Tokens,
    pub key: PublicKey,
}

/// Everything a client can ask the ledger to do.
// Dispute variants carry whole micropayments; transactions are built, posted
// and dropped, so boxing them buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "tx", rename_all = "kebab-case")]
pub enum Transaction {
    Transfer {
        from: AccountId,
        to: AccountId,
        amount: Tokens,
    },
    OpenChannel {
        payer: AccountId,
        payee: AccountId,
        escrow: Tokens,
        sla_id: Option<String>,
    },
    CloseChannel {
        channel: ContractId,
        by: AccountId,
        final_payment: Option<Micropayment>,
    },
    RaisePaymentDispute {
        case: PaymentDisputeCase,
    },
    ResolvePaymentDispute {
        case: ContractId,
        counter_evidence: Option<Micropayment>,
    },
    RegisterSla {
        sla: SignedSla,
    },
    DeregisterSla {
        sla_id: String,
        by: AccountId,
    },
    CommitWatermark {
        registrant: AccountId,
        model_id: String,
        digest: Digest,
    },
    PostDaCommitment {
        poster: AccountId,
        request_id: String,
        digest: Digest,
    },
    AttestLocation {
        attestor: AccountId,
        server: AccountId,
        region: String,
    },
    /// Records a bisection verdict and charges the loser a flat fee paid to
    /// the winner (capped at the loser's balance).
    SettleInferenceDispute {
        request_id: String,
        winner: AccountId,
        loser: AccountId,
        fee: Tokens,
        verdict: Verdict,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum EventKind {
    AccountCreated {
        account: AccountId,
        balance: Tokens,
    },
    Transfer {
        from: AccountId,
        to: AccountId,
        amount: Tokens,
    },
    ChannelOpened {
        channel: ContractId,
        payer: AccountId,
        payee: AccountId,
        escrow: Tokens,
    },
    ChannelClosed {
        channel: ContractId,
        paid: Tokens,
        refund_locked: Tokens,
    },
    ChannelFinalized {
        channel: ContractId,
        refund: Tokens,
    },
    PaymentDisputeRaised {
        case: ContractId,
        channel: ContractId,
        request_id: String,
        deadline: u64,
    },
    PaymentDisputeResolved {
        case: ContractId,
        ruling: PaymentRuling,
    },
    SlaRegistered {
        terms: SlaTerms,
    },
    SlaDeregistered {
        sla_id: String,
    },
    SlaExpired {
        sla_id: String,
    },
    WatermarkCommitted {
        commitment: WatermarkCommitment,
    },
    DaCommitted {
        request_id: String,
        digest: Digest,
        poster: AccountId,
    },
    LocationAttested {
        server: AccountId,
        region: String,
        attestor: AccountId,
    },
    InferenceDisputeSettled {
        request_id: String,
        winner: AccountId,
        loser: AccountId,
        fee_paid: Tokens,
        verdict: Verdict,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::AccountCreated { .. } => "account-created",
            EventKind::Transfer { .. } => "transfer",
            EventKind::ChannelOpened { .. } => "channel-opened",
            EventKind::ChannelClosed { .. } => "channel-closed",
            EventKind::ChannelFinalized { .. } => "channel-finalized",
            EventKind::PaymentDisputeRaised { .. } => "payment-dispute-raised",
            EventKind::PaymentDisputeResolved { .. } => "payment-dispute-resolved",
            EventKind::SlaRegistered { .. } => "sla-registered",
            EventKind::SlaDeregistered { .. } => "sla-deregistered",
            EventKind::SlaExpired { .. } => "sla-expired",
            EventKind::WatermarkCommitted { .. } => "watermark-committed",
            EventKind::DaCommitted { .. } => "da-committed",
            EventKind::LocationAttested { .. } => "location-attested",
            EventKind::InferenceDisputeSettled { .. } => "inference-dispute-settled",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub seq: u64,
    pub tick: u64,
    pub contract: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Which events [`Ledger::read_events`] returns.
#[derive(Clone, Debug, Default)]
pub struct EventFilter {
    /// Event names to keep; empty keeps everything.
    pub kinds: Vec<&'static str>,
}

impl EventFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn only(kinds: &[&'static str]) -> Self {
        EventFilter {
            kinds: kinds.to_vec(),
        }
    }

    fn matches(&self, e: &LedgerEvent) -> bool {
        self.kinds.is_empty() || self.kinds.contains(&e.kind.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum TxOutcome {
    Done,
    Contract { id: ContractId },
    Ruling { ruling: PaymentRuling },
    Event { seq: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Receipt {
    pub tick: u64,
    /// Sequence numbers of the events this transaction emitted.
    pub events: Vec<u64>,
    pub outcome: TxOutcome,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DaRecord {
    pub digest: Digest,
    pub poster: AccountId,
    pub event_seq: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Ledger {
    config: LedgerConfig,
    clock: u64,
    supply: Tokens,
    next_contract: u64,
    accounts: BTreeMap<AccountId, Account>,
    pub(crate) channels: BTreeMap<ContractId, ChannelState>,
    pub(crate) payment_cases: BTreeMap<ContractId, PaymentCase>,
    pub(crate) slas: SlaRegistry,
    sla_contracts: BTreeMap<String, ContractId>,
    pub(crate) watermarks: Vec<WatermarkCommitment>,
    da_commitments: BTreeMap<String, DaRecord>,
    locations: BTreeMap<AccountId, String>,
    events: Vec<LedgerEvent>,
}

impl Ledger {
    pub fn new(config: LedgerConfig) -> Ledger {
        Ledger {
            config,
            clock: 0,
            supply: 0,
            next_contract: 1,
            accounts: BTreeMap::new(),
            channels: BTreeMap::new(),
            payment_cases: BTreeMap::new(),
            slas: SlaRegistry::new(),
            sla_contracts: BTreeMap::new(),
            watermarks: Vec::new(),
            da_commitments: BTreeMap::new(),
            locations: BTreeMap::new(),
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &LedgerConfig {
        &self.config
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Creates a funded account. This is the only way tokens enter the system.
    pub fn create_account(
        &mut self,
        id: AccountId,
        key: PublicKey,
        balance: Tokens,
    ) -> Result<(), LedgerError> {
        if self.accounts.contains_key(&id) {
            return Err(LedgerError::DuplicateAccount(id));
        }
        self.accounts.insert(id.clone(), Account { balance, key });
        self.supply += balance;
        self.emit(
            format!("account:{id}"),
            EventKind::AccountCreated {
                account: id,
                balance,
            },
        );
        Ok(())
    }

    pub fn balance(&self, id: &AccountId) -> Result<Tokens, LedgerError> {
        self.accounts
            .get(id)
            .map(|a| a.balance)
            .ok_or_else(|| LedgerError::UnknownAccount(id.clone()))
    }

    pub fn key(&self, id: &AccountId) -> Result<PublicKey, LedgerError> {
        self.accounts
            .get(id)
            .map(|a| a.key)
            .ok_or_else(|| LedgerError::UnknownAccount(id.clone()))
    }

    pub fn accounts(&self) -> impl Iterator<Item = (&AccountId, &Account)> {
        self.accounts.iter()
    }

    pub fn channel(&self, id: ContractId) -> Option<&ChannelState> {
        self.channels.get(&id)
    }

    pub fn channels(&self) -> impl Iterator<Item = &ChannelState> {
        self.channels.values()
    }

    pub fn payment_case(&self, id: ContractId) -> Option<&PaymentCase> {
        self.payment_cases.get(&id)
    }

    pub fn slas(&self) -> &SlaRegistry {
        &self.slas
    }

    pub fn watermarks(&self) -> &[WatermarkCommitment] {
        &self.watermarks
    }

    pub fn da_commitment(&self, request_id: &str) -> Option<&DaRecord> {
        self.da_commitments.get(request_id)
    }

    pub fn attested_region(&self, server: &AccountId) -> Option<&str> {
        self.locations.get(server).map(String::as_str)
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    /// Tokens minted at genesis.
    pub fn supply(&self) -> Tokens {
        self.supply
    }

    /// Account balances plus funds held by channel contracts.
    pub fn total_tokens(&self) -> Tokens {
        let balances: Tokens = self.accounts.values().map(|a| a.balance).sum();
        let held: Tokens = self.channels.values().map(ChannelState::held).sum();
        balances + held
    }

    pub fn is_conserved(&self) -> bool {
        self.total_tokens() == self.supply
    }

    /// Hash of the serialized state, event log included.
    pub fn state_digest(&self) -> Digest {
        Digest::of(&serde_json::to_vec(self).expect("ledger state serializes"))
    }

    /// Event log as JSON lines.
    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    /// Matching events with `tick >= from_tick`, in log order.
    pub fn read_events(&self, filter: &EventFilter, from_tick: u64) -> Vec<&LedgerEvent> {
        self.events
            .iter()
            .filter(|e| e.tick >= from_tick && filter.matches(e))
            .collect()
    }

    /// Events with `seq >= from_seq`; what a subscriber polls.
    pub fn events_since(&self, from_seq: u64) -> &[LedgerEvent] {
        let start = (from_seq as usize).min(self.events.len());
        &self.events[start..]
    }

    /// Applies one transaction atomically at the current tick.
    pub fn post(&mut self, tx: Transaction) -> Result<Receipt, LedgerError> {
        let first = self.events.len() as u64;
        let outcome = match tx {
            Transaction::Transfer { from, to, amount } => {
                self.transfer(&from, &to, amount)?;
                TxOutcome::Done
            }
            Transaction::OpenChannel {
                payer,
                payee,
                escrow,
                sla_id,
            } => TxOutcome::Contract {
                id: channel::apply_open(self, payer, payee, escrow, sla_id)?,
            },
            Transaction::CloseChannel {
                channel,
                by,
                final_payment,
            } => {
                channel::apply_close(self, channel, &by, final_payment)?;
                TxOutcome::Done
            }
            Transaction::RaisePaymentDispute { case } => TxOutcome::Contract {
                id: channel::apply_raise(self, case)?,
            },
            Transaction::ResolvePaymentDispute {
                case,
                counter_evidence,
            } => TxOutcome::Ruling {
                ruling: channel::apply_resolve(self, case, counter_evidence)?,
            },
            Transaction::RegisterSla { sla } => {
                self.register_sla(sla)?;
                TxOutcome::Done
            }
            Transaction::DeregisterSla { sla_id, by } => {
                self.deregister_sla(&sla_id, &by)?;
                TxOutcome::Done
            }
            Transaction::CommitWatermark {
                registrant,
                model_id,
                digest,
            } => TxOutcome::Contract {
                id: watermark::apply_commit(self, registrant, model_id, digest)?,
            },
            Transaction::PostDaCommitment {
                poster,
                request_id,
                digest,
            } => {
                self.require_account(&poster)?;
                if self.da_commitments.contains_key(&request_id) {
                    return Err(LedgerError::Invalid(format!(
                        "response to {request_id} already committed"
                    )));
                }
                let seq = self.emit(
                    format!("da:{request_id}"),
                    EventKind::DaCommitted {
                        request_id: request_id.clone(),
                        digest,
                        poster: poster.clone(),
                    },
                );
                self.da_commitments.insert(
                    request_id,
                    DaRecord {
                        digest,
                        poster,
                        event_seq: seq,
                    },
                );
                TxOutcome::Event { seq }
            }
            Transaction::AttestLocation {
                attestor,
                server,
                region,
            } => {
                self.require_account(&attestor)?;
                self.require_account(&server)?;
                self.locations.insert(server.clone(), region.clone());
                let seq = self.emit(
                    format!("location:{server}"),
                    EventKind::LocationAttested {
                        server,
                        region,
                        attestor,
                    },
                );
                TxOutcome::Event { seq }
            }
            Transaction::SettleInferenceDispute {
                request_id,
                winner,
                loser,
                fee,
                verdict,
            } => {
                self.require_account(&winner)?;
                let fee_paid = fee.min(self.balance(&loser)?);
                self.move_tokens(&loser, &winner, fee_paid);
                let seq = self.emit(
                    format!("inference:{request_id}"),
                    EventKind::InferenceDisputeSettled {
                        request_id,
                        winner,
                        loser,
                        fee_paid,
                        verdict,
                    },
                );
                TxOutcome::Event { seq }
            }
        };
        debug_assert!(self.is_conserved(), "token conservation broken");
        Ok(Receipt {
            tick: self.clock,
            events: (first..self.events.len() as u64).collect(),
            outcome,
        })
    }

    /// Moves the clock forward, firing expiries at each tick in ascending
    /// contract order: payment disputes past their deadline resolve by the
    /// default rule, closed channels release locked refunds, SLAs past their
    /// validity window expire.
    pub fn advance(&mut self, ticks: u64) -> Result<(), LedgerError> {
        if ticks == 0 {
            return Err(LedgerError::ZeroTicks);
        }
        for _ in 0..ticks {
            self.clock += 1;
            self.fire_expiries();
        }
        Ok(())
    }

    fn fire_expiries(&mut self) {
        #[derive(PartialEq, Eq, PartialOrd, Ord)]
        enum Due {
            Case(ContractId),
            Refund(ContractId),
            Sla(String),
        }
        let now = self.clock;
        let mut due: Vec<(ContractId, Due)> = Vec::new();
        for (id, case) in &self.payment_cases {
            if case.is_open() && case.deadline <= now {
                due.push((*id, Due::Case(*id)));
            }
        }
        for (id, ch) in &self.channels {
            if ch.refund_due(now) {
                due.push((*id, Due::Refund(*id)));
            }
        }
        for rec in self.slas.iter() {
            if rec.active && rec.terms.valid_until < now {
                let cid = self.sla_contracts[&rec.terms.sla_id];
                due.push((cid, Due::Sla(rec.terms.sla_id.clone())));
            }
        }
        due.sort();
        for (_, d) in due {
            match d {
                Due::Case(id) => {
                    channel::apply_resolve(self, id, None).expect("open case resolves");
                }
                Due::Refund(id) => channel::release_refund(self, id),
                Due::Sla(sla_id) => {
                    self.slas.deactivate(&sla_id).expect("registered SLA");
                    let cid = self.sla_contracts[&sla_id];
                    self.emit(cid.to_string(), EventKind::SlaExpired { sla_id });
                }
            }
        }
        debug_assert!(self.is_conserved(), "token conservation broken");
    }

    fn register_sla(&mut self, sla: SignedSla) -> Result<(), LedgerError> {
        let consumer = self.key(&sla.terms.consumer)?;
        let supplier = self.key(&sla.terms.supplier)?;
        sla.verify(&consumer, &supplier)?;
        sla.terms.validate()?;
        if self.slas.contains(&sla.terms.sla_id) {
            return Err(SlaError::DuplicateId(sla.terms.sla_id).into());
        }
        self.slas.check_new_margins(&sla.terms, self.clock)?;
        let cid = self.new_contract();
        self.sla_contracts.insert(sla.terms.sla_id.clone(), cid);
        self.slas.insert(sla.terms.clone())?;
        self.emit(cid.to_string(), EventKind::SlaRegistered { terms: sla.terms });
        Ok(())
    }

    fn deregister_sla(&mut self, sla_id: &str, by: &AccountId) -> Result<(), LedgerError> {
        let rec = self
            .slas
            .get(sla_id)
            .ok_or_else(|| SlaError::UnknownSla(sla_id.to_string()))?;
        if &rec.terms.consumer != by && &rec.terms.supplier != by {
            return Err(SlaError::NotParty(by.clone()).into());
        }
        if !rec.active {
            return Err(LedgerError::Invalid(format!("SLA {sla_id} is not active")));
        }
        self.slas.deactivate(sla_id)?;
        let cid = self.sla_contracts[sla_id];
        self.emit(
            cid.to_string(),
            EventKind::SlaDeregistered {
                sla_id: sla_id.to_string(),
            },
        );
        Ok(())
    }

    fn transfer(&mut self, from: &AccountId, to: &AccountId, amount: Tokens) -> Result<(), LedgerError> {
        self.require_account(to)?;
        self.require_funds(from, amount)?;
        self.move_tokens(from, to, amount);
        self.emit(
            format!("account:{from}"),
            EventKind::Transfer {
                from: from.clone(),
                to: to.clone(),
                amount,
            },
        );
        Ok(())
    }

    pub(crate) fn require_account(&self, id: &AccountId) -> Result<(), LedgerError> {
        self.balance(id).map(|_| ())
    }

    pub(crate) fn require_funds(&self, id: &AccountId, needed: Tokens) -> Result<(), LedgerError> {
        let balance = self.balance(id)?;
        if balance < needed {
            return Err(LedgerError::InsufficientFunds {
                account: id.clone(),
                balance,
                needed,
            });
        }
        Ok(())
    }

    /// Unchecked balance move between existing accounts; callers validate.
    pub(crate) fn move_tokens(&mut self, from: &AccountId, to: &AccountId, amount: Tokens) {
        self.debit(from, amount);
        self.credit(to, amount);
    }

    pub(crate) fn debit(&mut self, id: &AccountId, amount: Tokens) {
        let acct = self.accounts.get_mut(id).expect("validated account");
        acct.balance = acct.balance.checked_sub(amount).expect("validated balance");
    }

    pub(crate) fn credit(&mut self, id: &AccountId, amount: Tokens) {
        self.accounts.get_mut(id).expect("validated account").balance += amount;
    }

    pub(crate) fn new_contract(&mut self) -> ContractId {
        let id = ContractId(self.next_contract);
        self.next_contract += 1;
        id
    }

    pub(crate) fn emit(&mut self, contract: String, kind: EventKind) -> u64 {
        let seq = self.events.len() as u64;
        self.events.push(LedgerEvent {
            seq,
            tick: self.clock,
            contract,
            kind,
        });
        seq
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Keypair;
    use crate::sla::{FeeFraction, ModelPricing};

    fn funded(accounts: &[(&str, Tokens)]) -> Ledger {
        let mut l = Ledger::new(LedgerConfig::default());
        for (id, bal) in accounts {
            l.create_account((*id).into(), Keypair::derive(id).public(), *bal).unwrap();
        }
        l
    }

    #[test]
    fn transfer_between_funded_accounts() {
        let mut l = funded(&[("a", 100), ("b", 5)]);
        l.post(Transaction::Transfer {
            from: "a".into(),
            to: "b".into(),
            amount: 10,
        })
        .unwrap();
        assert_eq!(l.balance(&"a".into()).unwrap(), 90);
        assert_eq!(l.balance(&"b".into()).unwrap(), 15);
        assert!(l.is_conserved());
    }

    #[test]
    fn overdraft_changes_nothing() {
        let mut l = funded(&[("a", 100), ("b", 5)]);
        let before = l.state_digest();
        let err = l
            .post(Transaction::Transfer {
                from: "b".into(),
                to: "a".into(),
                amount: 6,
            })
            .unwrap_err();
        assert!(matches!(err, LedgerError::InsufficientFunds { .. }));
        assert_eq!(l.state_digest(), before);
    }

    #[test]
    fn channel_open_creates_contract_and_event() {
        let mut l = funded(&[("a", 100), ("b", 0)]);
        let r = l
            .post(Transaction::OpenChannel {
                payer: "a".into(),
                payee: "b".into(),
                escrow: 60,
                sla_id: None,
            })
            .unwrap();
        let TxOutcome::Contract { id } = r.outcome else { panic!() };
        assert_eq!(l.channel(id).unwrap().escrow, 60);
        assert_eq!(r.events.len(), 1);
        assert_eq!(l.events()[r.events[0] as usize].kind.name(), "channel-opened");
    }

    fn sla(id: &str, consumer: &str, supplier: &str, until: u64) -> SignedSla {
        SlaTerms {
            sla_id: id.into(),
            consumer: consumer.into(),
            supplier: supplier.into(),
            pricing: vec![ModelPricing::flat("m", 8, 8, 5)],
            challenger_fee_bps: FeeFraction::ZERO,
            valid_from: 0,
            valid_until: until,
        }
        .sign(&Keypair::derive(consumer), &Keypair::derive(supplier))
    }

    #[test]
    fn read_events_filters_and_is_pure() {
        let mut l = funded(&[("c", 10), ("a", 10)]);
        l.post(Transaction::RegisterSla { sla: sla("s1", "c", "a", 50) }).unwrap();
        l.advance(1).unwrap();
        l.post(Transaction::Transfer {
            from: "c".into(),
            to: "a".into(),
            amount: 1,
        })
        .unwrap();
        let f = EventFilter::only(&["sla-registered"]);
        let regs = l.read_events(&f, 0);
        assert_eq!(regs.len(), 1);
        assert_eq!(l.read_events(&f, 0), regs);
        assert!(l.read_events(&EventFilter::all(), 99).is_empty());
        assert_eq!(l.read_events(&EventFilter::all(), 1).len(), 1);
    }

    #[test]
    fn sla_registration_requires_both_signatures() {
        let mut l = funded(&[("c", 10), ("a", 10)]);
        let mut bad = sla("s1", "c", "a", 50);
        bad.supplier_sig = crate::crypto::Signature::BLANK;
        assert_eq!(
            l.post(Transaction::RegisterSla { sla: bad }).unwrap_err(),
            LedgerError::Sla(SlaError::BadSignature("a".into()))
        );
        l.post(Transaction::RegisterSla { sla: sla("s1", "c", "a", 50) }).unwrap();
        assert!(matches!(
            l.post(Transaction::RegisterSla { sla: sla("s1", "c", "a", 50) }),
            Err(LedgerError::Sla(SlaError::DuplicateId(_)))
        ));
    }

    #[test]
    fn advance_zero_is_an_error() {
        assert_eq!(funded(&[]).advance(0), Err(LedgerError::ZeroTicks));
    }

    #[test]
    fn expiries_fire_in_contract_order() {
        let mut l = funded(&[("c", 10), ("a", 10), ("s", 10)]);
        l.post(Transaction::RegisterSla { sla: sla("zz", "c", "a", 2) }).unwrap();
        l.post(Transaction::RegisterSla { sla: sla("aa", "a", "s", 2) }).unwrap();
        l.advance(3).unwrap();
        let expired: Vec<String> = l
            .read_events(&EventFilter::only(&["sla-expired"]), 0)
            .into_iter()
            .map(|e| match &e.kind {
                EventKind::SlaExpired { sla_id } => sla_id.clone(),
                _ => unreachable!(),
            })
            .collect();
        // "zz" was registered first and so has the lower contract id.
        assert_eq!(expired, vec!["zz".to_string(), "aa".to_string()]);
        assert!(l.read_events(&EventFilter::only(&["sla-expired"]), 0).iter().all(|e| e.tick == 3));
    }

    #[test]
    fn replay_is_bit_identical() {
        let script = |l: &mut Ledger| {
            l.post(Transaction::RegisterSla { sla: sla("s1", "c", "a", 4) }).unwrap();
            l.post(Transaction::OpenChannel {
                payer: "c".into(),
                payee: "a".into(),
                escrow: 7,
                sla_id: Some("s1".into()),
            })
            .unwrap();
            l.advance(6).unwrap();
        };
        let mut a = funded(&[("c", 10), ("a", 10)]);
        let mut b = funded(&[("c", 10), ("a", 10)]);
        script(&mut a);
        script(&mut b);
        assert_eq!(a.state_digest(), b.state_digest());
        assert_eq!(a.events_jsonl(), b.events_jsonl());
    }
}
