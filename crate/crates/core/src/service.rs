//! The data path between a client and a server: signed requests, one request
//! in flight per session, responses with output commitments, per-unit
//! payments on both legs of the SLA chain, and the evidence a payee needs for
//! a payment dispute.
//!
//! Payments flow client → aggregator on the client channel and, mirrored,
//! aggregator → server on the server channel. The aggregator only mirrors a
//! unit the client paid; an unpaid unit is chased by dispute on both legs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{verify_micropayment, ChannelState, Micropayment, PayerWallet, PaymentDisputeCase, RequestWitness};
use crate::crypto::{Digest, Encoder, Keypair, PublicKey, Signature};
use crate::dag::{commit, DagError, DagModel, Evaluator, Tensor};
use crate::ledger::{AccountId, ContractId, Ledger, LedgerError, Transaction, TxOutcome};
use crate::router::Assignment;
use crate::sla::{PaymentSplit, SlaRegistry, Tokens};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("no SLA path between {client} and {server}")]
    NoSlaPath { client: AccountId, server: AccountId },
    #[error("server {0} is at capacity")]
    ServerUnavailable(AccountId),
    #[error("channel {0} does not belong to this session")]
    WrongChannel(ContractId),
    #[error("session {0} is closed")]
    SessionClosed(String),
    #[error("request {0} is not yet paid")]
    UnpaidPreviousRequest(String),
    #[error("request signature does not verify")]
    BadSignature,
    #[error("request {0} was already submitted")]
    DuplicateRequestId(String),
    #[error("request is for model {found}, session serves {expected}")]
    WrongModel { expected: String, found: String },
    #[error("unknown request {0}")]
    UnknownRequest(String),
    #[error("request {id} is {phase:?}, expected {expected:?}")]
    WrongPhase {
        id: String,
        phase: RequestPhase,
        expected: RequestPhase,
    },
    #[error("evaluation failed: {0}")]
    Evaluation(DagError),
    #[error("{payer} refused to pay for {request_id}")]
    PaymentRefused { payer: AccountId, request_id: String },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// A client's signed request for one unit of inference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub request_id: String,
    pub session_id: String,
    pub model_id: String,
    pub input: Tensor,
    pub client: AccountId,
    pub client_sig: Signature,
}

impl InferenceRequest {
    pub fn new(
        key: &Keypair,
        client: AccountId,
        session_id: &str,
        request_id: &str,
        model_id: &str,
        input: Tensor,
    ) -> InferenceRequest {
        let mut r = InferenceRequest {
            request_id: request_id.to_string(),
            session_id: session_id.to_string(),
            model_id: model_id.to_string(),
            input,
            client,
            client_sig: Signature::BLANK,
        };
        r.client_sig = key.sign(&r.signing_bytes());
        r
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::tagged("sakshi/request/v1");
        e.str(&self.request_id)
            .str(&self.session_id)
            .str(&self.model_id)
            .str(self.client.as_str());
        self.input.encode_into(&mut e);
        e.finish()
    }

    /// Digest of the signed request; what witnesses refer to.
    pub fn digest(&self) -> Digest {
        let mut e = Encoder::new();
        e.bytes(&self.signing_bytes()).bytes(&self.client_sig.0);
        e.hash()
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        key.verify(&self.signing_bytes(), &self.client_sig)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceResponse {
    pub request_id: String,
    pub output: Tensor,
    pub output_digest: Digest,
    /// Sequence number of the ledger event carrying the output commitment.
    pub da_commitment: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestPhase {
    Requested,
    Served,
    Paid,
    /// Evaluation failed or the response was proven wrong; nothing is owed.
    Void,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RequestRecord {
    pub request: InferenceRequest,
    pub phase: RequestPhase,
    pub response: Option<InferenceResponse>,
    /// Signed by the client; evidence on the client channel.
    pub client_witness: RequestWitness,
    /// Countersigned by the aggregator; evidence on the server channel.
    pub aggregator_witness: RequestWitness,
    pub client_predecessor: Option<Micropayment>,
    pub server_predecessor: Option<Micropayment>,
    pub client_payment: Option<Micropayment>,
    pub server_payment: Option<Micropayment>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionStatus {
    Open,
    Closed,
}

/// One leg of the SLA chain as the session sees it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Leg {
    pub channel: ContractId,
    pub payer: AccountId,
    pub payee: AccountId,
    pub escrow: Tokens,
    payer_key: PublicKey,
    /// Latest micropayment the payee accepted.
    pub last: Option<Micropayment>,
}

impl Leg {
    fn from_channel(ch: &ChannelState, payer_key: PublicKey) -> Leg {
        Leg {
            channel: ch.channel_id,
            payer: ch.payer.clone(),
            payee: ch.payee.clone(),
            escrow: ch.escrow,
            payer_key,
            last: ch.latest_accepted.clone(),
        }
    }

    pub fn cumulative(&self) -> Tokens {
        self.last.as_ref().map_or(0, |m| m.cumulative)
    }

    /// The payee's check of an incoming micropayment.
    fn accept(&mut self, mp: Micropayment) -> Result<(), crate::channel::Violation> {
        verify_micropayment(self.channel, self.escrow, &self.payer_key, &mp, self.last.as_ref())?;
        self.last = Some(mp);
        Ok(())
    }
}

/// Something that signs micropayments when asked. `None` is a refusal.
pub trait Payer {
    fn pay(&mut self, request_id: &str, price: Tokens) -> Option<Micropayment>;
}

impl Payer for PayerWallet {
    fn pay(&mut self, request_id: &str, price: Tokens) -> Option<Micropayment> {
        PayerWallet::pay(self, request_id, price).ok()
    }
}

/// Pays for a fixed number of units, then stops.
#[derive(Clone, Debug)]
pub struct NonPayingPayer {
    pub wallet: PayerWallet,
    pub units_left: u32,
}

impl Payer for NonPayingPayer {
    fn pay(&mut self, request_id: &str, price: Tokens) -> Option<Micropayment> {
        if self.units_left == 0 {
            return None;
        }
        self.units_left -= 1;
        self.wallet.pay(request_id, price).ok()
    }
}

/// Everything a payee brings to a payment dispute over one request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EvidenceBundle {
    pub request_id: String,
    pub request: InferenceRequest,
    pub response_digest: Option<Digest>,
    pub da_commitment: Option<u64>,
    pub client_witness: RequestWitness,
    pub aggregator_witness: RequestWitness,
    pub client_predecessor: Option<Micropayment>,
    pub client_claimed: Option<Micropayment>,
    pub server_predecessor: Option<Micropayment>,
    pub server_claimed: Option<Micropayment>,
}

impl EvidenceBundle {
    /// Dispute raised by the server on the server channel.
    pub fn server_case(&self, session: &Session) -> PaymentDisputeCase {
        PaymentDisputeCase {
            channel_id: session.server_leg.channel,
            request_id: self.request_id.clone(),
            claimed: self.server_claimed.clone(),
            predecessor: self.server_predecessor.clone(),
            raised_by: session.server_leg.payee.clone(),
            evidence: Some(self.aggregator_witness.clone()),
        }
    }

    /// Dispute raised by the aggregator on the client channel.
    pub fn client_case(&self, session: &Session) -> PaymentDisputeCase {
        PaymentDisputeCase {
            channel_id: session.client_leg.channel,
            request_id: self.request_id.clone(),
            claimed: self.client_claimed.clone(),
            predecessor: self.client_predecessor.clone(),
            raised_by: session.client_leg.payee.clone(),
            evidence: Some(self.client_witness.clone()),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Session {
    pub session_id: String,
    pub client: AccountId,
    pub assignment: Assignment,
    pub model_id: String,
    pub status: SessionStatus,
    pub client_leg: Leg,
    pub server_leg: Leg,
    requests: BTreeMap<String, RequestRecord>,
    order: Vec<String>,
    pub last_paid_nonce: Option<u64>,
}

impl Session {
    /// Opens a session for a fresh assignment. Both ends re-check the SLA
    /// path on the ledger; the server's load (already counted by the router
    /// for this assignment) must be within capacity.
    #[allow(clippy::too_many_arguments)]
    pub fn open(
        session_id: &str,
        slas: &SlaRegistry,
        tick: u64,
        assignment: Assignment,
        model_id: &str,
        load_with_session: u32,
        capacity: u32,
        ledger: &Ledger,
        client_channel: ContractId,
        server_channel: ContractId,
    ) -> Result<Session, ServiceError> {
        let client = assignment.chain.client_sla.consumer.clone();
        let server = assignment.server_id.clone();
        let chain = slas.validate_chain(&client, &server, model_id, tick);
        let same_path = chain.as_ref().is_some_and(|c| {
            c.aggregator == assignment.aggregator_id
                && c.client_sla.sla_id == assignment.chain.client_sla.sla_id
                && c.server_sla.sla_id == assignment.chain.server_sla.sla_id
        });
        if !same_path {
            return Err(ServiceError::NoSlaPath { client, server });
        }
        if load_with_session > capacity {
            return Err(ServiceError::ServerUnavailable(server));
        }
        let leg = |id: ContractId, payer: &AccountId, payee: &AccountId| -> Result<Leg, ServiceError> {
            let ch = ledger
                .channel(id)
                .filter(|c| &c.payer == payer && &c.payee == payee)
                .filter(|c| c.status == crate::channel::ChannelStatus::Open)
                .ok_or(ServiceError::WrongChannel(id))?;
            Ok(Leg::from_channel(ch, ledger.key(payer)?))
        };
        let client_leg = leg(client_channel, &client, &assignment.aggregator_id)?;
        let server_leg = leg(server_channel, &assignment.aggregator_id, &server)?;
        Ok(Session {
            session_id: session_id.to_string(),
            client,
            model_id: model_id.to_string(),
            assignment,
            status: SessionStatus::Open,
            client_leg,
            server_leg,
            requests: BTreeMap::new(),
            order: Vec::new(),
            last_paid_nonce: None,
        })
    }

    pub fn request(&self, id: &str) -> Option<&RequestRecord> {
        self.requests.get(id)
    }

    /// Requests in submission order.
    pub fn requests(&self) -> impl Iterator<Item = &RequestRecord> {
        self.order.iter().map(|id| &self.requests[id])
    }

    /// The request awaiting service or payment, if any.
    pub fn in_flight(&self) -> Option<&RequestRecord> {
        self.requests()
            .find(|r| matches!(r.phase, RequestPhase::Requested | RequestPhase::Served))
    }

    pub fn close(&mut self) {
        self.status = SessionStatus::Closed;
    }

    /// Brings both payees' view of their channel up to date. Channels
    /// outlive sessions (and a server channel is shared by every client the
    /// aggregator routes to that server), so the payees' latest accepted
    /// micropayments are kept outside the session.
    pub fn resume(&mut self, client_last: Option<Micropayment>, server_last: Option<Micropayment>) {
        self.client_leg.last = client_last;
        self.server_leg.last = server_last;
    }

    fn record_mut(&mut self, id: &str, expected: RequestPhase) -> Result<&mut RequestRecord, ServiceError> {
        let r = self
            .requests
            .get_mut(id)
            .ok_or_else(|| ServiceError::UnknownRequest(id.to_string()))?;
        if r.phase != expected {
            return Err(ServiceError::WrongPhase {
                id: id.to_string(),
                phase: r.phase,
                expected,
            });
        }
        Ok(r)
    }

    /// Accepts a request if the previous one is settled. The aggregator
    /// countersigns a witness for the server leg.
    pub fn submit_request(
        &mut self,
        request: InferenceRequest,
        client_key: &Keypair,
        aggregator_key: &Keypair,
        output_size: u32,
    ) -> Result<(), ServiceError> {
        if self.status == SessionStatus::Closed {
            return Err(ServiceError::SessionClosed(self.session_id.clone()));
        }
        if let Some(r) = self.in_flight() {
            return Err(ServiceError::UnpaidPreviousRequest(r.request.request_id.clone()));
        }
        if request.client != self.client || !request.verify(&client_key.public()) {
            return Err(ServiceError::BadSignature);
        }
        if request.model_id != self.model_id {
            return Err(ServiceError::WrongModel {
                expected: self.model_id.clone(),
                found: request.model_id,
            });
        }
        if self.requests.contains_key(&request.request_id) {
            return Err(ServiceError::DuplicateRequestId(request.request_id));
        }
        let input_size = request.input.dim() as u32;
        let witness = |key: &Keypair, signer: &AccountId| {
            RequestWitness::sign(
                key,
                signer.clone(),
                &request.request_id,
                &request.model_id,
                input_size,
                output_size,
                request.digest(),
            )
        };
        let client_witness = witness(client_key, &self.client);
        let aggregator_witness = witness(aggregator_key, &self.assignment.aggregator_id);
        let id = request.request_id.clone();
        self.requests.insert(
            id.clone(),
            RequestRecord {
                request,
                phase: RequestPhase::Requested,
                response: None,
                client_witness,
                aggregator_witness,
                client_predecessor: self.client_leg.last.clone(),
                server_predecessor: self.server_leg.last.clone(),
                client_payment: None,
                server_payment: None,
            },
        );
        self.order.push(id);
        Ok(())
    }

    /// Runs the request through `evaluator`. An evaluation error voids the
    /// request: nothing is owed for it.
    pub fn serve(
        &mut self,
        request_id: &str,
        model: &DagModel,
        evaluator: &dyn Evaluator,
    ) -> Result<InferenceResponse, ServiceError> {
        let rec = self.record_mut(request_id, RequestPhase::Requested)?;
        let output = match evaluator.run(model, &rec.request.input) {
            Ok(t) => t.final_output,
            Err(e) => {
                rec.phase = RequestPhase::Void;
                return Err(ServiceError::Evaluation(e));
            }
        };
        let response = InferenceResponse {
            request_id: request_id.to_string(),
            output_digest: commit(&output),
            output,
            da_commitment: None,
        };
        rec.phase = RequestPhase::Served;
        rec.response = Some(response.clone());
        Ok(response)
    }

    /// Posts the served output's commitment to the ledger.
    pub fn post_da_commitment(
        &mut self,
        ledger: &mut Ledger,
        request_id: &str,
        poster: &AccountId,
    ) -> Result<u64, ServiceError> {
        let rec = self
            .requests
            .get_mut(request_id)
            .ok_or_else(|| ServiceError::UnknownRequest(request_id.to_string()))?;
        let resp = rec.response.as_mut().ok_or_else(|| ServiceError::WrongPhase {
            id: request_id.to_string(),
            phase: rec.phase,
            expected: RequestPhase::Served,
        })?;
        if let Some(seq) = resp.da_commitment {
            return Ok(seq);
        }
        let receipt = ledger.post(Transaction::PostDaCommitment {
            poster: poster.clone(),
            request_id: request_id.to_string(),
            digest: resp.output_digest,
        })?;
        let TxOutcome::Event { seq } = receipt.outcome else {
            unreachable!("DA commitments emit one event")
        };
        resp.da_commitment = Some(seq);
        Ok(seq)
    }

    /// Marks a served request as not owed (its response was proven wrong).
    pub fn void(&mut self, request_id: &str) -> Result<(), ServiceError> {
        self.record_mut(request_id, RequestPhase::Served)?.phase = RequestPhase::Void;
        Ok(())
    }

    /// Collects the client's micropayment for a served unit and the
    /// aggregator's mirrored one. A refusal, or a micropayment the payee
    /// rejects, closes the session and leaves the unit unpaid.
    pub fn settle_unit(
        &mut self,
        request_id: &str,
        split: &PaymentSplit,
        client: &mut dyn Payer,
        aggregator: &mut dyn Payer,
    ) -> Result<(Micropayment, Micropayment), ServiceError> {
        self.record_mut(request_id, RequestPhase::Served)?;
        let refused = |payer: &AccountId| ServiceError::PaymentRefused {
            payer: payer.clone(),
            request_id: request_id.to_string(),
        };
        let Some(cmp) = client.pay(request_id, split.client_pays) else {
            self.close();
            return Err(refused(&self.client_leg.payer));
        };
        if self.client_leg.accept(cmp.clone()).is_err() {
            self.close();
            return Err(refused(&self.client_leg.payer));
        }
        let Some(smp) = aggregator.pay(request_id, split.server_gets) else {
            self.close();
            return Err(refused(&self.server_leg.payer));
        };
        if self.server_leg.accept(smp.clone()).is_err() {
            self.close();
            return Err(refused(&self.server_leg.payer));
        }
        let rec = self.requests.get_mut(request_id).expect("checked");
        rec.phase = RequestPhase::Paid;
        rec.client_payment = Some(cmp.clone());
        rec.server_payment = Some(smp.clone());
        self.last_paid_nonce = Some(cmp.nonce);
        Ok((cmp, smp))
    }

    pub fn collect_witnesses(&self, request_id: &str) -> Result<EvidenceBundle, ServiceError> {
        let r = self
            .requests
            .get(request_id)
            .ok_or_else(|| ServiceError::UnknownRequest(request_id.to_string()))?;
        Ok(EvidenceBundle {
            request_id: request_id.to_string(),
            request: r.request.clone(),
            response_digest: r.response.as_ref().map(|x| x.output_digest),
            da_commitment: r.response.as_ref().and_then(|x| x.da_commitment),
            client_witness: r.client_witness.clone(),
            aggregator_witness: r.aggregator_witness.clone(),
            client_predecessor: r.client_predecessor.clone(),
            client_claimed: r.client_payment.clone(),
            server_predecessor: r.server_predecessor.clone(),
            server_claimed: r.server_payment.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{chain, execute, make_faulty_evaluator, HonestEvaluator, LayerId};
    use crate::ledger::LedgerConfig;
    use crate::router::{MatchRequest, Router, RouterConfig, ServerRecord};
    use crate::sla::{FeeFraction, ModelPricing, SlaTerms};

    struct World {
        ledger: Ledger,
        router: Router,
        model: DagModel,
        client_ch: ContractId,
        server_ch: ContractId,
    }

    fn k(n: &str) -> Keypair {
        Keypair::derive(n)
    }

    fn world(client_escrow: Tokens) -> World {
        let mut ledger = Ledger::new(LedgerConfig::default());
        for n in ["c", "a", "s"] {
            ledger.create_account(n.into(), k(n).public(), 500).unwrap();
        }
        let t = |id: &str, c: &str, s: &str, p| SlaTerms {
            sla_id: id.into(),
            consumer: c.into(),
            supplier: s.into(),
            pricing: vec![ModelPricing::flat("m", 8, 8, p)],
            challenger_fee_bps: FeeFraction(1000),
            valid_from: 0,
            valid_until: 100,
        };
        for (terms, c, s) in [(t("cs", "c", "a", 10), "c", "a"), (t("ss", "a", "s", 7), "a", "s")] {
            ledger
                .post(Transaction::RegisterSla { sla: terms.sign(&k(c), &k(s)) })
                .unwrap();
        }
        let mut open = |payer: &str, payee: &str, escrow, sla: &str| {
            match ledger
                .post(Transaction::OpenChannel {
                    payer: payer.into(),
                    payee: payee.into(),
                    escrow,
                    sla_id: Some(sla.into()),
                })
                .unwrap()
                .outcome
            {
                TxOutcome::Contract { id } => id,
                _ => unreachable!(),
            }
        };
        let client_ch = open("c", "a", client_escrow, "cs");
        let server_ch = open("a", "s", 200, "ss");
        let mut router = Router::new("r".into(), RouterConfig::default());
        router.sync(&ledger);
        router
            .subscribe(ServerRecord {
                server_id: "s".into(),
                hosted_models: ["m".to_string()].into(),
                hw_capacity: 1,
                current_load: 0,
                location: "EU".into(),
                location_verified: false,
                advertised_latency: 5,
                availability_bps: 10_000,
            })
            .unwrap();
        World {
            ledger,
            router,
            model: chain("m", 6, 4, 3),
            client_ch,
            server_ch,
        }
    }

    fn session(w: &mut World) -> Result<Session, ServiceError> {
        let a = w
            .router
            .match_request(&MatchRequest {
                client_id: "c".into(),
                model_id: "m".into(),
                region_constraint: None,
                max_latency: None,
                uptime_requirement: None,
                input_size: 4,
                output_size: 4,
            })
            .unwrap();
        let load = w.router.server(&a.server_id).unwrap().current_load;
        Session::open("s1", w.ledger.slas(), 0, a, "m", load, 1, &w.ledger, w.client_ch, w.server_ch)
    }

    fn req(sid: &str, id: &str, x: u64) -> InferenceRequest {
        InferenceRequest::new(&k("c"), "c".into(), sid, id, "m", Tensor::new(vec![x, 2, 3, 4]).unwrap())
    }

    fn split() -> PaymentSplit {
        PaymentSplit {
            client_pays: 10,
            server_gets: 7,
            aggregator_margin: 2,
            challenger_fee: 1,
        }
    }

    #[test]
    fn honest_units_accumulate_on_both_legs() {
        let mut w = world(100);
        let mut s = session(&mut w).unwrap();
        let mut cw = PayerWallet::new(k("c"), w.client_ch, 100);
        let mut aw = PayerWallet::new(k("a"), w.server_ch, 200);
        for i in 0..4 {
            let id = format!("r{i}");
            s.submit_request(req("s1", &id, i), &k("c"), &k("a"), 4).unwrap();
            let resp = s.serve(&id, &w.model, &HonestEvaluator).unwrap();
            assert_eq!(resp.output, execute(&w.model, &req("s1", &id, i).input).unwrap().final_output);
            s.settle_unit(&id, &split(), &mut cw, &mut aw).unwrap();
        }
        assert_eq!(s.client_leg.cumulative(), 40);
        assert_eq!(s.server_leg.cumulative(), 28);
        assert_eq!(s.last_paid_nonce, Some(3));
    }

    #[test]
    fn gating_and_request_checks() {
        let mut w = world(100);
        let mut s = session(&mut w).unwrap();
        s.submit_request(req("s1", "r0", 1), &k("c"), &k("a"), 4).unwrap();
        assert_eq!(
            s.submit_request(req("s1", "r1", 2), &k("c"), &k("a"), 4),
            Err(ServiceError::UnpaidPreviousRequest("r0".into()))
        );
        s.serve("r0", &w.model, &HonestEvaluator).unwrap();
        let mut cw = PayerWallet::new(k("c"), w.client_ch, 100);
        let mut aw = PayerWallet::new(k("a"), w.server_ch, 200);
        s.settle_unit("r0", &split(), &mut cw, &mut aw).unwrap();
        assert_eq!(
            s.submit_request(req("s1", "r0", 1), &k("c"), &k("a"), 4),
            Err(ServiceError::DuplicateRequestId("r0".into()))
        );
        let mut forged = req("s1", "r1", 1);
        forged.input = Tensor::new(vec![9, 9, 9, 9]).unwrap();
        assert_eq!(s.submit_request(forged, &k("c"), &k("a"), 4), Err(ServiceError::BadSignature));
    }

    #[test]
    fn bad_input_voids_request() {
        let mut w = world(100);
        let mut s = session(&mut w).unwrap();
        let bad = InferenceRequest::new(&k("c"), "c".into(), "s1", "r0", "m", Tensor::new(vec![1]).unwrap());
        s.submit_request(bad, &k("c"), &k("a"), 4).unwrap();
        assert!(matches!(
            s.serve("r0", &w.model, &HonestEvaluator),
            Err(ServiceError::Evaluation(DagError::DimensionMismatch(_)))
        ));
        assert_eq!(s.request("r0").unwrap().phase, RequestPhase::Void);
        assert!(s.in_flight().is_none());
    }

    #[test]
    fn faulty_server_output_diverges() {
        let mut w = world(100);
        let mut s = session(&mut w).unwrap();
        s.submit_request(req("s1", "r0", 1), &k("c"), &k("a"), 4).unwrap();
        let f = make_faulty_evaluator(&w.model, LayerId(2), vec![1, 0, 0, 0]).unwrap();
        let resp = s.serve("r0", &w.model, &f).unwrap();
        assert_ne!(resp.output, execute(&w.model, &req("s1", "r0", 1).input).unwrap().final_output);
    }

    #[test]
    fn da_commitment_matches_output() {
        let mut w = world(100);
        let mut s = session(&mut w).unwrap();
        s.submit_request(req("s1", "r0", 1), &k("c"), &k("a"), 4).unwrap();
        let resp = s.serve("r0", &w.model, &HonestEvaluator).unwrap();
        let seq = s.post_da_commitment(&mut w.ledger, "r0", &"s".into()).unwrap();
        assert_eq!(w.ledger.da_commitment("r0").unwrap().digest, resp.output_digest);
        assert_eq!(w.ledger.da_commitment("r0").unwrap().event_seq, seq);
    }

    #[test]
    fn refused_unit_is_recovered_by_dispute_on_both_legs() {
        let mut w = world(100);
        let mut s = session(&mut w).unwrap();
        let mut cw = NonPayingPayer {
            wallet: PayerWallet::new(k("c"), w.client_ch, 100),
            units_left: 1,
        };
        let mut aw = PayerWallet::new(k("a"), w.server_ch, 200);
        for (i, id) in ["r0", "r1"].iter().enumerate() {
            s.submit_request(req("s1", id, i as u64), &k("c"), &k("a"), 4).unwrap();
            s.serve(id, &w.model, &HonestEvaluator).unwrap();
            let paid = s.settle_unit(id, &split(), &mut cw, &mut aw);
            assert_eq!(paid.is_ok(), i == 0);
        }
        assert_eq!(s.status, SessionStatus::Closed);
        let b = s.collect_witnesses("r1").unwrap();
        assert_eq!(b.client_claimed, None);
        assert_eq!(b.client_predecessor.as_ref().unwrap().cumulative, 10);
        for case in [b.server_case(&s), b.client_case(&s)] {
            w.ledger.post(Transaction::RaisePaymentDispute { case }).unwrap();
        }
        w.ledger.advance(w.ledger.config().dispute_window).unwrap();
        assert_eq!(w.ledger.balance(&"s".into()).unwrap(), 500 + 14);
        assert_eq!(w.ledger.balance(&"c".into()).unwrap(), 500 - 20);
        assert_eq!(w.ledger.balance(&"a".into()).unwrap(), 500 + 20 - 14);
        assert!(w.ledger.is_conserved());
        assert!(s.collect_witnesses("r9").is_err());
    }

    #[test]
    fn escrow_exhaustion_is_a_refusal() {
        let mut w = world(25);
        let mut s = session(&mut w).unwrap();
        let mut cw = PayerWallet::new(k("c"), w.client_ch, 25);
        let mut aw = PayerWallet::new(k("a"), w.server_ch, 200);
        for i in 0..3 {
            let id = format!("r{i}");
            s.submit_request(req("s1", &id, i), &k("c"), &k("a"), 4).unwrap();
            s.serve(&id, &w.model, &HonestEvaluator).unwrap();
            let r = s.settle_unit(&id, &split(), &mut cw, &mut aw);
            if i < 2 {
                r.unwrap();
            } else {
                assert!(matches!(r, Err(ServiceError::PaymentRefused { .. })));
            }
        }
        assert_eq!(s.status, SessionStatus::Closed);
        let b = s.collect_witnesses("r2").unwrap();
        assert_eq!(b.client_claimed, None);
        assert_eq!(b.client_predecessor.as_ref().unwrap().cumulative, 20);
        let full = s.collect_witnesses("r1").unwrap();
        assert!(full.client_claimed.is_some() && full.server_claimed.is_some());
    }

    #[test]
    fn session_checks_path_and_capacity() {
        let mut w = world(100);
        let first = session(&mut w);
        assert!(first.is_ok());
        // The router counted the first session; a second exceeds capacity 1.
        assert!(matches!(session(&mut w), Err(ServiceError::ServerUnavailable(_))));
        w.router.update_load(&"s".into(), -2).unwrap();
        let a = first.unwrap().assignment;
        w.ledger
            .post(Transaction::DeregisterSla { sla_id: "ss".into(), by: "s".into() })
            .unwrap();
        assert!(matches!(
            Session::open("s2", w.ledger.slas(), 0, a, "m", 1, 1, &w.ledger, w.client_ch, w.server_ch),
            Err(ServiceError::NoSlaPath { .. })
        ));
    }
}
