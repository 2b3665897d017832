//! Unidirectional payment channels with hash-chained micropayments.
//!
//! The payer escrows tokens on the ledger and then pays per unit off-chain by
//! signing micropayments that commit to the cumulative amount owed. Each
//! micropayment carries a nonce and the hash of its predecessor, so a chain of
//! them can be checked link by link. Disputes are settled on-chain from the
//! escrow.
//!
//! After a close the payer's refund stays locked for the ledger's dispute
//! window, so a payee holding a newer micropayment than the one used to close
//! can still claim it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Digest, Encoder, Keypair, PublicKey, Signature};
use crate::ledger::{AccountId, ContractId, EventKind, Ledger, LedgerError};
use crate::sla::{price_of, Tokens};

/// The first link violated by a micropayment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(rename_all = "kebab-case")]
pub enum Violation {
    #[error("micropayment belongs to another channel")]
    WrongChannel,
    #[error("nonce does not follow the predecessor")]
    NonceGap,
    #[error("prev_hash does not link to the predecessor")]
    BrokenHashChain,
    #[error("cumulative amount decreased")]
    CumulativeDecrease,
    #[error("cumulative amount exceeds the escrow")]
    ExceedsEscrow,
    #[error("payer signature does not verify")]
    BadSignature,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("unknown channel {0}")]
    UnknownChannel(ContractId),
    #[error("unknown payment dispute {0}")]
    UnknownCase(ContractId),
    #[error("channel {0} is already closed")]
    AlreadyClosed(ContractId),
    #[error("channel {0} has a dispute in progress")]
    DisputeInProgress(ContractId),
    #[error("{0} is not a party to this channel")]
    NotParty(AccountId),
    #[error("payer and payee must differ")]
    SelfChannel,
    #[error("invalid final payment: {0}")]
    InvalidFinalPayment(Violation),
    #[error("previous micropayment belongs to another channel")]
    ForeignPredecessor,
    #[error("cumulative {cumulative} would exceed escrow {escrow}")]
    CumulativeExceedsEscrow { cumulative: Tokens, escrow: Tokens },
    #[error("malformed dispute case: {0}")]
    MalformedCase(String),
    #[error("dispute window for channel {0} has passed")]
    DisputeWindowExpired(ContractId),
    #[error("payment dispute {0} is already resolved")]
    CaseClosed(ContractId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelStatus {
    Open,
    Disputed,
    Closed,
}

/// Off-chain signed commitment to the total owed on a channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Micropayment {
    pub channel_id: ContractId,
    pub request_id: String,
    pub nonce: u64,
    pub cumulative: Tokens,
    pub prev_hash: Digest,
    pub payer_sig: Signature,
}

impl Micropayment {
    /// Canonical bytes the payer signs.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::tagged("sakshi/micropayment/v1");
        e.u64(self.channel_id.0)
            .str(&self.request_id)
            .u64(self.nonce)
            .u64(self.cumulative)
            .digest(&self.prev_hash);
        e.finish()
    }

    /// Hash of the signed micropayment; the next link's `prev_hash`.
    pub fn hash(&self) -> Digest {
        let mut e = Encoder::new();
        e.bytes(&self.signing_bytes()).bytes(&self.payer_sig.0);
        e.hash()
    }

    pub fn signed_by(&self, key: &PublicKey) -> bool {
        key.verify(&self.signing_bytes(), &self.payer_sig)
    }
}

/// Signs the successor of `prev` (or the first payment). Refuses to sign past
/// the escrow.
pub fn make_micropayment(
    payer: &Keypair,
    channel_id: ContractId,
    escrow: Tokens,
    prev: Option<&Micropayment>,
    request_id: &str,
    unit_price: Tokens,
) -> Result<Micropayment, ChannelError> {
    let (nonce, base, prev_hash) = match prev {
        Some(p) if p.channel_id != channel_id => {
            return Err(ChannelError::ForeignPredecessor)
        }
        Some(p) => (p.nonce + 1, p.cumulative, p.hash()),
        None => (0, 0, Digest::ZERO),
    };
    let cumulative = base.saturating_add(unit_price);
    if cumulative > escrow {
        return Err(ChannelError::CumulativeExceedsEscrow { cumulative, escrow });
    }
    let mut mp = Micropayment {
        channel_id,
        request_id: request_id.to_string(),
        nonce,
        cumulative,
        prev_hash,
        payer_sig: Signature::BLANK,
    };
    mp.payer_sig = payer.sign(&mp.signing_bytes());
    Ok(mp)
}

/// Checks `mp` as the successor of `prev` (or as the first payment) on a
/// channel with the given id, escrow and payer key. Reports the first
/// violation in the order: channel, nonce, hash link, monotonicity, escrow,
/// signature.
pub fn verify_micropayment(
    channel_id: ContractId,
    escrow: Tokens,
    payer: &PublicKey,
    mp: &Micropayment,
    prev: Option<&Micropayment>,
) -> Result<(), Violation> {
    if mp.channel_id != channel_id {
        return Err(Violation::WrongChannel);
    }
    let (nonce, link, floor) = match prev {
        Some(p) => (p.nonce.checked_add(1), p.hash(), p.cumulative),
        None => (Some(0), Digest::ZERO, 0),
    };
    if Some(mp.nonce) != nonce {
        return Err(Violation::NonceGap);
    }
    if mp.prev_hash != link {
        return Err(Violation::BrokenHashChain);
    }
    if mp.cumulative < floor {
        return Err(Violation::CumulativeDecrease);
    }
    if mp.cumulative > escrow {
        return Err(Violation::ExceedsEscrow);
    }
    if !mp.signed_by(payer) {
        return Err(Violation::BadSignature);
    }
    Ok(())
}

/// Checks a micropayment without its predecessor: channel, escrow bound and
/// signature only.
pub fn verify_standalone(
    channel_id: ContractId,
    escrow: Tokens,
    payer: &PublicKey,
    mp: &Micropayment,
) -> Result<(), Violation> {
    if mp.channel_id != channel_id {
        return Err(Violation::WrongChannel);
    }
    if mp.cumulative > escrow {
        return Err(Violation::ExceedsEscrow);
    }
    if !mp.signed_by(payer) {
        return Err(Violation::BadSignature);
    }
    Ok(())
}

/// Disputed amount of one unit: `cumulative_k - cumulative_{k-1}`.
pub fn disputed_unit(claimed: &Micropayment, predecessor: Option<&Micropayment>) -> Tokens {
    claimed.cumulative - predecessor.map_or(0, |p| p.cumulative)
}

/// The payer's off-chain side of a channel.
#[derive(Clone, Debug)]
pub struct PayerWallet {
    key: Keypair,
    pub channel_id: ContractId,
    pub escrow: Tokens,
    last: Option<Micropayment>,
}

impl PayerWallet {
    pub fn new(key: Keypair, channel_id: ContractId, escrow: Tokens) -> Self {
        PayerWallet {
            key,
            channel_id,
            escrow,
            last: None,
        }
    }

    pub fn last(&self) -> Option<&Micropayment> {
        self.last.as_ref()
    }

    pub fn cumulative(&self) -> Tokens {
        self.last.as_ref().map_or(0, |m| m.cumulative)
    }

    pub fn remaining(&self) -> Tokens {
        self.escrow - self.cumulative()
    }

    pub fn pay(&mut self, request_id: &str, price: Tokens) -> Result<Micropayment, ChannelError> {
        let mp = make_micropayment(
            &self.key,
            self.channel_id,
            self.escrow,
            self.last.as_ref(),
            request_id,
            price,
        )?;
        self.last = Some(mp.clone());
        Ok(mp)
    }

    /// Signs a second micropayment with the current nonce but different
    /// content. Only fraudulent payers do this.
    pub fn double_sign(&self, request_id: &str, cumulative: Tokens) -> Option<Micropayment> {
        let last = self.last.as_ref()?;
        let mut mp = last.clone();
        mp.request_id = request_id.to_string();
        mp.cumulative = cumulative;
        mp.payer_sig = self.key.sign(&mp.signing_bytes());
        (mp != *last).then_some(mp)
    }
}

/// Signed statement by a channel's payer that it requested a unit of service.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestWitness {
    pub request_id: String,
    pub model_id: String,
    pub input_size: u32,
    pub output_size: u32,
    pub request_digest: Digest,
    pub signer: AccountId,
    pub signature: Signature,
}

impl RequestWitness {
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::tagged("sakshi/request-witness/v1");
        e.str(&self.request_id)
            .str(&self.model_id)
            .u32(self.input_size)
            .u32(self.output_size)
            .digest(&self.request_digest)
            .str(self.signer.as_str());
        e.finish()
    }

    pub fn sign(
        key: &Keypair,
        signer: AccountId,
        request_id: &str,
        model_id: &str,
        input_size: u32,
        output_size: u32,
        request_digest: Digest,
    ) -> RequestWitness {
        let mut w = RequestWitness {
            request_id: request_id.to_string(),
            model_id: model_id.to_string(),
            input_size,
            output_size,
            request_digest,
            signer,
            signature: Signature::BLANK,
        };
        w.signature = key.sign(&w.signing_bytes());
        w
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        key.verify(&self.signing_bytes(), &self.signature)
    }
}

/// A payee's claim that a unit of service went unpaid.
///
/// `claimed` is the micropayment for the disputed unit when the payer signed
/// one; for outright nonpayment it is absent and the unit is priced from the
/// channel's SLA. `predecessor` is the last micropayment before it (absent for
/// the first unit).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentDisputeCase {
    pub channel_id: ContractId,
    pub request_id: String,
    pub claimed: Option<Micropayment>,
    pub predecessor: Option<Micropayment>,
    pub raised_by: AccountId,
    pub evidence: Option<RequestWitness>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RulingKind {
    /// The claim stands: paid at the claimed cumulative.
    Honored,
    /// A newer micropayment exists: paid at the highest cumulative.
    HigherNonce,
    /// The payer signed two different micropayments with one nonce.
    PayerFraud,
    /// No payer-signed request for the unit: the payee pays the dispute fee.
    Dismissed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentRuling {
    pub case: ContractId,
    pub channel: ContractId,
    pub kind: RulingKind,
    /// Unit amount in dispute.
    pub disputed_unit: Tokens,
    /// Cumulative amount the payee ends up with on this channel.
    pub settled_cumulative: Tokens,
    /// Extra tokens the ruling moved to the payee.
    pub awarded: Tokens,
    /// Escrow returned to the payer by the ruling.
    pub refunded: Tokens,
    /// Dispute fee moved from payee to payer on dismissal.
    pub fee_paid: Tokens,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PaymentCase {
    pub id: ContractId,
    pub case: PaymentDisputeCase,
    pub raised_at: u64,
    pub deadline: u64,
    pub ruling: Option<PaymentRuling>,
}

impl PaymentCase {
    pub fn is_open(&self) -> bool {
        self.ruling.is_none()
    }
}

/// On-ledger channel contract.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ChannelState {
    pub channel_id: ContractId,
    pub payer: AccountId,
    pub payee: AccountId,
    pub escrow: Tokens,
    pub sla_id: Option<String>,
    pub latest_accepted: Option<Micropayment>,
    pub status: ChannelStatus,
    /// Credited to the payee so far.
    pub paid_out: Tokens,
    /// Payer refund held back after a close.
    pub locked_refund: Tokens,
    pub closed_at: Option<u64>,
    pub refund_release_at: Option<u64>,
    pub open_case: Option<ContractId>,
}

impl ChannelState {
    /// Tokens held by the contract.
    pub fn held(&self) -> Tokens {
        match self.status {
            ChannelStatus::Open | ChannelStatus::Disputed => self.escrow,
            ChannelStatus::Closed => self.locked_refund,
        }
    }

    pub(crate) fn refund_due(&self, now: u64) -> bool {
        self.status == ChannelStatus::Closed
            && self.open_case.is_none()
            && self.locked_refund > 0
            && self.refund_release_at.is_some_and(|t| t <= now)
    }

    fn accepts_dispute(&self, now: u64) -> bool {
        match self.status {
            ChannelStatus::Open => true,
            ChannelStatus::Disputed => false,
            ChannelStatus::Closed => self.refund_release_at.is_some_and(|t| now < t),
        }
    }
}

fn channel(ledger: &Ledger, id: ContractId) -> Result<&ChannelState, ChannelError> {
    ledger.channels.get(&id).ok_or(ChannelError::UnknownChannel(id))
}

pub(crate) fn apply_open(
    ledger: &mut Ledger,
    payer: AccountId,
    payee: AccountId,
    escrow: Tokens,
    sla_id: Option<String>,
) -> Result<ContractId, LedgerError> {
    if payer == payee {
        return Err(ChannelError::SelfChannel.into());
    }
    ledger.require_account(&payee)?;
    ledger.require_funds(&payer, escrow)?;
    if let Some(s) = &sla_id {
        if ledger.slas.get(s).is_none() {
            return Err(crate::sla::SlaError::UnknownSla(s.clone()).into());
        }
    }
    let id = ledger.new_contract();
    ledger.debit(&payer, escrow);
    ledger.channels.insert(
        id,
        ChannelState {
            channel_id: id,
            payer: payer.clone(),
            payee: payee.clone(),
            escrow,
            sla_id,
            latest_accepted: None,
            status: ChannelStatus::Open,
            paid_out: 0,
            locked_refund: 0,
            closed_at: None,
            refund_release_at: None,
            open_case: None,
        },
    );
    ledger.emit(
        id.to_string(),
        EventKind::ChannelOpened {
            channel: id,
            payer,
            payee,
            escrow,
        },
    );
    Ok(id)
}

pub(crate) fn apply_close(
    ledger: &mut Ledger,
    id: ContractId,
    by: &AccountId,
    final_payment: Option<Micropayment>,
) -> Result<(), LedgerError> {
    let ch = channel(ledger, id)?;
    match ch.status {
        ChannelStatus::Closed => return Err(ChannelError::AlreadyClosed(id).into()),
        ChannelStatus::Disputed => return Err(ChannelError::DisputeInProgress(id).into()),
        ChannelStatus::Open => {}
    }
    if by != &ch.payer && by != &ch.payee {
        return Err(ChannelError::NotParty(by.clone()).into());
    }
    let payer_key = ledger.key(&ch.payer)?;
    if let Some(mp) = &final_payment {
        verify_standalone(id, ch.escrow, &payer_key, mp).map_err(ChannelError::InvalidFinalPayment)?;
        if let Some(prev) = &ch.latest_accepted {
            if mp.nonce < prev.nonce {
                return Err(ChannelError::InvalidFinalPayment(Violation::NonceGap).into());
            }
            if mp.cumulative < prev.cumulative {
                return Err(ChannelError::InvalidFinalPayment(Violation::CumulativeDecrease).into());
            }
        }
    }
    let paid = final_payment.as_ref().map_or(0, |m| m.cumulative);
    let window = ledger.config().dispute_window;
    let now = ledger.clock();
    let ch = ledger.channels.get_mut(&id).expect("checked");
    let payee = ch.payee.clone();
    let refund = ch.escrow - paid;
    ch.status = ChannelStatus::Closed;
    ch.paid_out = paid;
    ch.locked_refund = refund;
    ch.closed_at = Some(now);
    ch.refund_release_at = Some(now + window);
    if final_payment.is_some() {
        ch.latest_accepted = final_payment;
    }
    ledger.credit(&payee, paid);
    ledger.emit(
        id.to_string(),
        EventKind::ChannelClosed {
            channel: id,
            paid,
            refund_locked: refund,
        },
    );
    if window == 0 {
        release_refund(ledger, id);
    }
    Ok(())
}

/// Pays the locked refund of a closed channel back to the payer.
pub(crate) fn release_refund(ledger: &mut Ledger, id: ContractId) {
    let ch = ledger.channels.get_mut(&id).expect("known channel");
    let refund = std::mem::take(&mut ch.locked_refund);
    let payer = ch.payer.clone();
    ledger.credit(&payer, refund);
    ledger.emit(id.to_string(), EventKind::ChannelFinalized { channel: id, refund });
}

fn malformed(msg: impl Into<String>) -> LedgerError {
    ChannelError::MalformedCase(msg.into()).into()
}

pub(crate) fn apply_raise(ledger: &mut Ledger, case: PaymentDisputeCase) -> Result<ContractId, LedgerError> {
    let id = case.channel_id;
    let ch = channel(ledger, id)?;
    if case.raised_by != ch.payee {
        return Err(ChannelError::NotParty(case.raised_by.clone()).into());
    }
    if !ch.accepts_dispute(ledger.clock()) {
        return Err(match ch.status {
            ChannelStatus::Disputed => ChannelError::DisputeInProgress(id),
            _ => ChannelError::DisputeWindowExpired(id),
        }
        .into());
    }
    let key = ledger.key(&ch.payer)?;
    if let Some(p) = &case.predecessor {
        verify_standalone(id, ch.escrow, &key, p).map_err(|v| malformed(format!("predecessor: {v}")))?;
    }
    if let Some(c) = &case.claimed {
        verify_micropayment(id, ch.escrow, &key, c, case.predecessor.as_ref())
            .map_err(|v| malformed(format!("claimed: {v}")))?;
        if c.request_id != case.request_id {
            return Err(malformed("claimed micropayment is for another request"));
        }
    }
    let deadline = ledger.clock() + ledger.config().dispute_window;
    let cid = ledger.new_contract();
    let ch = ledger.channels.get_mut(&id).expect("checked");
    if ch.status == ChannelStatus::Open {
        ch.status = ChannelStatus::Disputed;
    }
    ch.open_case = Some(cid);
    let request_id = case.request_id.clone();
    ledger.payment_cases.insert(
        cid,
        PaymentCase {
            id: cid,
            case,
            raised_at: ledger.clock(),
            deadline,
            ruling: None,
        },
    );
    ledger.emit(
        cid.to_string(),
        EventKind::PaymentDisputeRaised {
            case: cid,
            channel: id,
            request_id,
            deadline,
        },
    );
    Ok(cid)
}

/// Rules on an open payment dispute. `counter_evidence` is any further
/// payer-signed micropayment on the channel.
pub(crate) fn apply_resolve(
    ledger: &mut Ledger,
    case_id: ContractId,
    counter_evidence: Option<Micropayment>,
) -> Result<PaymentRuling, LedgerError> {
    let pc = ledger
        .payment_cases
        .get(&case_id)
        .ok_or(ChannelError::UnknownCase(case_id))?;
    if !pc.is_open() {
        return Err(ChannelError::CaseClosed(case_id).into());
    }
    let case = pc.case.clone();
    let ch = channel(ledger, case.channel_id)?.clone();
    let payer_key = ledger.key(&ch.payer)?;
    let fee = ledger.config().dispute_fee;

    let witness = case.evidence.as_ref().filter(|w| {
        w.request_id == case.request_id && w.signer == ch.payer && w.verify(&payer_key)
    });
    let valid = |mp: &Micropayment| verify_standalone(ch.channel_id, ch.escrow, &payer_key, mp).is_ok();
    let pred_cum = case.predecessor.as_ref().map_or(0, |p| p.cumulative);

    let (kind, target, unit) = match witness {
        None => (RulingKind::Dismissed, ch.paid_out, 0),
        Some(w) => {
            let unit = match &case.claimed {
                Some(c) => disputed_unit(c, case.predecessor.as_ref()),
                None => ch
                    .sla_id
                    .as_ref()
                    .and_then(|s| ledger.slas.get(s))
                    .and_then(|r| price_of(&r.terms, &w.model_id, w.input_size, w.output_size).ok())
                    .unwrap_or(0),
            };
            let claimed_total = case.claimed.as_ref().map_or(pred_cum + unit, |c| c.cumulative);
            let claimed_nonce = case
                .claimed
                .as_ref()
                .map(|c| c.nonce)
                .or(case.predecessor.as_ref().map(|p| p.nonce + 1))
                .unwrap_or(0);
            let known: Vec<&Micropayment> = [
                case.claimed.as_ref(),
                case.predecessor.as_ref(),
                counter_evidence.as_ref(),
                ch.latest_accepted.as_ref(),
            ]
            .into_iter()
            .flatten()
            .filter(|m| valid(m))
            .collect();
            let fraud = known.iter().enumerate().any(|(i, a)| {
                known[i + 1..]
                    .iter()
                    .any(|b| a.nonce == b.nonce && a.hash() != b.hash())
            });
            let newer = known
                .iter()
                .filter(|m| m.nonce > claimed_nonce)
                .map(|m| m.cumulative)
                .max();
            if fraud {
                (RulingKind::PayerFraud, claimed_total.min(ch.escrow), unit)
            } else if let Some(highest) = newer {
                (RulingKind::HigherNonce, highest.max(claimed_total), unit)
            } else {
                (RulingKind::Honored, claimed_total.min(ch.escrow), unit)
            }
        }
    };

    let payee = ch.payee.clone();
    let payer = ch.payer.clone();
    let mut ruling = PaymentRuling {
        case: case_id,
        channel: ch.channel_id,
        kind,
        disputed_unit: unit,
        settled_cumulative: 0,
        awarded: 0,
        refunded: 0,
        fee_paid: 0,
    };
    if kind == RulingKind::Dismissed {
        let fee_paid = fee.min(ledger.balance(&payee)?);
        ledger.move_tokens(&payee, &payer, fee_paid);
        ruling.fee_paid = fee_paid;
        ruling.settled_cumulative = ch.paid_out;
        let st = ledger.channels.get_mut(&ch.channel_id).expect("known");
        st.open_case = None;
        if st.status == ChannelStatus::Disputed {
            st.status = ChannelStatus::Open;
        }
    } else {
        let target = target.min(ch.escrow).max(ch.paid_out);
        let awarded = target - ch.paid_out;
        let refunded = match ch.status {
            ChannelStatus::Closed => ch.locked_refund - awarded,
            _ => ch.escrow - target,
        };
        ledger.credit(&payee, awarded);
        ledger.credit(&payer, refunded);
        let now = ledger.clock();
        let st = ledger.channels.get_mut(&ch.channel_id).expect("known");
        st.open_case = None;
        st.status = ChannelStatus::Closed;
        st.paid_out = target;
        st.locked_refund = 0;
        st.closed_at.get_or_insert(now);
        st.refund_release_at = Some(now);
        if let Some(best) = [case.claimed.clone(), counter_evidence.clone(), st.latest_accepted.clone()]
            .into_iter()
            .flatten()
            .filter(|m| m.cumulative == target && valid(m))
            .max_by_key(|m| m.nonce)
        {
            st.latest_accepted = Some(best);
        }
        ruling.settled_cumulative = target;
        ruling.awarded = awarded;
        ruling.refunded = refunded;
    }
    ledger.payment_cases.get_mut(&case_id).expect("known").ruling = Some(ruling.clone());
    ledger.emit(
        case_id.to_string(),
        EventKind::PaymentDisputeResolved {
            case: case_id,
            ruling: ruling.clone(),
        },
    );
    Ok(ruling)
}
