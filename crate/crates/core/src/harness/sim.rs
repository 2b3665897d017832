//! The discrete-event run loop.
//!
//! One logical clock, one seeded RNG, one mutator. Setup happens at tick 0;
//! each later tick advances the ledger, lets routers catch up, runs the
//! ownership timeline, then processes that tick's request arrivals ordered by
//! (client id, schedule entry, repetition). After the last arrival, sessions
//! are closed, payees close their channels, and the clock runs on until every
//! dispute is ruled and every refund released.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::bisection::{run_game, EquivocatingParticipant, Participant, Party, TraceParticipant};
use crate::channel::{ChannelStatus, Micropayment, PayerWallet, RulingKind};
use crate::crypto::{Digest, Keypair};
use crate::dag::{execute, make_faulty_evaluator, DagModel, Evaluator, FaultyEvaluator, HonestEvaluator, LayerId, Tensor, PRIME};
use crate::ledger::{AccountId, ContractId, EventKind, Ledger, Transaction, TxOutcome};
use crate::router::{MatchRequest, Router, ServerRecord};
use crate::service::{InferenceRequest, NonPayingPayer, Payer, ServiceError, Session, SessionStatus};
use crate::sla::{SlaTerms, Tokens};
use crate::watermark::{commit_watermark, embed, generate_trigger_set, judge_ownership, model_oracle, OwnershipClaim};

use super::report::{
    BalanceLine, ConservationCheck, DaCounts, DisputeCounts, FaultCounts, OwnershipOutcome, RequestCounts, RunReport,
};
use super::scenario::{BehaviorProfile, DaPolicy, RivalKind, Role, Scenario, ScenarioError, ScheduleEntry};
use super::trace::Trace;

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub trace: Trace,
    pub ledger: Ledger,
}

/// Runs a validated scenario to completion.
pub fn run(scenario: &Scenario) -> Result<RunOutput, ScenarioError> {
    let mut sim = Sim::setup(scenario)?;
    sim.run_schedule();
    sim.drain();
    Ok(sim.finish())
}

struct ModelInfo {
    base: DagModel,
    /// What servers actually serve (the watermarked copy, for the owned model).
    deployed: DagModel,
    input_dim: u32,
    output_dim: u32,
}

struct Arrival {
    tick: u64,
    client: AccountId,
    entry: usize,
    rep: u32,
}

enum ClientPayer {
    Honest(PayerWallet),
    NonPaying(NonPayingPayer),
}

impl ClientPayer {
    fn wallet(&self) -> &PayerWallet {
        match self {
            ClientPayer::Honest(w) => w,
            ClientPayer::NonPaying(n) => &n.wallet,
        }
    }
}

impl Payer for ClientPayer {
    fn pay(&mut self, request_id: &str, price: Tokens) -> Option<Micropayment> {
        match self {
            ClientPayer::Honest(w) => Payer::pay(w, request_id, price),
            ClientPayer::NonPaying(n) => n.pay(request_id, price),
        }
    }
}

#[derive(Default)]
struct ClientState {
    session: Option<Session>,
    sessions_opened: u32,
    requests_sent: u32,
    units_paid: u32,
    blocked: bool,
}

struct OwnershipState {
    owner_claim: OwnershipClaim,
    rival_claims: Vec<(u64, OwnershipClaim)>,
    outcome: Option<OwnershipOutcome>,
}

struct Sim<'s> {
    sc: &'s Scenario,
    models: BTreeMap<String, ModelInfo>,
    ledger: Ledger,
    routers: BTreeMap<String, Router>,
    rng: ChaCha8Rng,
    trace: Trace,
    mirrored: usize,
    keys: BTreeMap<AccountId, Keypair>,
    /// Current channel opened under each SLA.
    sla_channel: BTreeMap<String, ContractId>,
    /// Payee side: latest micropayment accepted on each channel.
    accepted: BTreeMap<ContractId, Micropayment>,
    client_payers: BTreeMap<ContractId, ClientPayer>,
    agg_wallets: BTreeMap<ContractId, PayerWallet>,
    /// Fair cumulative due on each channel: prices of units served and not voided.
    owed: BTreeMap<ContractId, Tokens>,
    clients: BTreeMap<AccountId, ClientState>,
    /// Challenger fees collected by an aggregator, owed to the challenger
    /// that audited the unit: (aggregator, challenger) → tokens.
    challenger_fees: BTreeMap<(AccountId, AccountId), Tokens>,
    consumed: BTreeMap<AccountId, Tokens>,
    initial: BTreeMap<AccountId, Tokens>,
    served_digest: BTreeMap<String, Digest>,
    ownership: Option<OwnershipState>,
    requests: RequestCounts,
    faults: FaultCounts,
    inference: DisputeCounts,
    rounds: BTreeMap<u32, u32>,
    conservation: ConservationCheck,
    load_ok: bool,
    payments_settled: u32,
    tokens_paid: Tokens,
}

fn setup_err(what: &str, e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Invalid(format!("setup failed ({what}): {e}"))
}

fn single_fault(model: &DagModel, node: u32) -> Result<FaultyEvaluator, crate::dag::DagError> {
    let zero = Tensor::zeros(model.input_dim as usize);
    let dim = execute(model, &zero)?
        .get(LayerId(node))
        .map_or(1, Tensor::dim);
    let mut delta = vec![0; dim];
    delta[0] = 1;
    make_faulty_evaluator(model, LayerId(node), delta)
}

impl<'s> Sim<'s> {
    fn setup(sc: &'s Scenario) -> Result<Sim<'s>, ScenarioError> {
        let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
        let mut models = BTreeMap::new();
        for (id, base) in sc.build_models()? {
            let out = execute(&base, &Tensor::zeros(base.input_dim as usize))
                .map_err(|source| ScenarioError::Model { id: id.clone(), source })?;
            models.insert(
                id,
                ModelInfo {
                    input_dim: base.input_dim,
                    output_dim: out.final_output.dim() as u32,
                    deployed: base.clone(),
                    base,
                },
            );
        }
        let mut actors: Vec<_> = sc.actors.iter().collect();
        actors.sort_by(|a, b| a.id.cmp(&b.id));
        for a in &actors {
            if let BehaviorProfile::FaultyServer { node, .. } | BehaviorProfile::EquivocatingParty { node, .. } = a.profile {
                for m in &a.hosts {
                    if node as usize >= models[m].base.len() {
                        return Err(ScenarioError::Invalid(format!(
                            "{}: fault node {node} is outside model {m}",
                            a.id
                        )));
                    }
                }
            }
        }

        let mut ledger = Ledger::new(sc.ledger.config());
        let mut keys = BTreeMap::new();
        let mut initial = BTreeMap::new();
        for a in &actors {
            let kp = Keypair::derive(a.id.as_str());
            ledger
                .create_account(a.id.clone(), kp.public(), a.balance)
                .map_err(|e| setup_err("accounts", e))?;
            keys.insert(a.id.clone(), kp);
            initial.insert(a.id.clone(), a.balance);
        }
        for t in &sc.slas {
            let sla = t.clone().sign(&keys[&t.consumer], &keys[&t.supplier]);
            ledger
                .post(Transaction::RegisterSla { sla })
                .map_err(|e| setup_err(&format!("SLA {}", t.sla_id), e))?;
        }
        if let Some(attestor) = actors.iter().find(|a| a.role == Role::Attestor) {
            for s in actors.iter().filter(|a| a.role == Role::Server && a.attested) {
                ledger
                    .post(Transaction::AttestLocation {
                        attestor: attestor.id.clone(),
                        server: s.id.clone(),
                        region: s.region.clone(),
                    })
                    .map_err(|e| setup_err("attestation", e))?;
            }
        }

        let ownership = match &sc.ownership {
            None => None,
            Some(o) => {
                let info = models.get_mut(&o.model).expect("validated");
                let secret = |who: &AccountId, what: &str| format!("{who}/{what}/{}/{}", o.model, sc.seed).into_bytes();
                let dims = (info.input_dim as usize, info.output_dim as usize);
                let ts = generate_trigger_set(&secret(&o.owner, "triggers"), o.triggers, dims.0, dims.1)
                    .map_err(|e| setup_err("trigger set", e))?;
                info.deployed = embed(&info.base, &ts).map_err(|e| setup_err("watermark", e))?;
                let mut claim = |registrant: &AccountId, trigger_set| OwnershipClaim {
                    registrant: registrant.clone(),
                    model_id: o.model.clone(),
                    salt: rng.gen::<[u8; 16]>().to_vec(),
                    trigger_set,
                };
                let owner_claim = claim(&o.owner, ts.clone());
                let mut rival_claims = Vec::new();
                for r in &o.rivals {
                    let set = match r.kind {
                        RivalKind::Copier => ts.clone(),
                        RivalKind::Fabricator => {
                            generate_trigger_set(&secret(&r.id, "fabricated"), o.triggers, dims.0, dims.1)
                                .map_err(|e| setup_err("trigger set", e))?
                        }
                    };
                    rival_claims.push((r.commit_tick, claim(&r.id, set)));
                }
                Some(OwnershipState {
                    owner_claim,
                    rival_claims,
                    outcome: None,
                })
            }
        };

        let mut sim = Sim {
            sc,
            models,
            ledger,
            routers: BTreeMap::new(),
            rng,
            trace: Trace::new(),
            mirrored: 0,
            keys,
            sla_channel: BTreeMap::new(),
            accepted: BTreeMap::new(),
            client_payers: BTreeMap::new(),
            agg_wallets: BTreeMap::new(),
            owed: BTreeMap::new(),
            clients: BTreeMap::new(),
            challenger_fees: BTreeMap::new(),
            consumed: BTreeMap::new(),
            initial,
            served_digest: BTreeMap::new(),
            ownership,
            requests: RequestCounts::default(),
            faults: FaultCounts::default(),
            inference: DisputeCounts::default(),
            rounds: BTreeMap::new(),
            conservation: ConservationCheck::default(),
            load_ok: true,
            payments_settled: 0,
            tokens_paid: 0,
        };

        for t in &sc.slas {
            let consumer = sc.actor(&t.consumer).expect("validated");
            let supplier_role = sc.actor(&t.supplier).expect("validated").role;
            match (consumer.role, supplier_role) {
                (Role::Client, _) => {
                    let id = sim.open_channel(t, consumer.escrow).map_err(|e| setup_err("client channel", e))?;
                    let wallet = PayerWallet::new(sim.keys[&t.consumer].clone(), id, consumer.escrow);
                    let payer = match consumer.profile {
                        BehaviorProfile::NonpayingClient { after } => ClientPayer::NonPaying(NonPayingPayer {
                            wallet,
                            units_left: after,
                        }),
                        _ => ClientPayer::Honest(wallet),
                    };
                    sim.client_payers.insert(id, payer);
                }
                (Role::Aggregator, Role::Server) => {
                    sim.open_server_channel(t).map_err(|e| setup_err("server channel", e))?;
                }
                _ => {}
            }
        }

        for r in &sc.routers {
            let mut router = Router::new(AccountId(r.id.clone()), r.weights);
            router.sync(&sim.ledger);
            sim.routers.insert(r.id.clone(), router);
        }
        for a in actors.iter().filter(|a| a.role == Role::Server) {
            let router = sim.routers.get_mut(a.router.as_deref().expect("validated")).expect("validated");
            router
                .subscribe(ServerRecord {
                    server_id: a.id.clone(),
                    hosted_models: a.hosts.iter().cloned().collect(),
                    hw_capacity: a.capacity,
                    current_load: 0,
                    location: a.region.clone(),
                    location_verified: false,
                    advertised_latency: a.latency,
                    availability_bps: a.availability_bps,
                })
                .map_err(|e| setup_err("subscription", e))?;
            sim.note(&a.id.to_string(), "server-subscribed", json!({ "router": a.router, "hosts": a.hosts }));
        }
        for a in actors.iter().filter(|a| a.role == Role::Client) {
            sim.clients.insert(a.id.clone(), ClientState::default());
        }
        sim.ownership_step(0);
        sim.end_tick();
        Ok(sim)
    }

    // --- bookkeeping -----------------------------------------------------

    fn mirror(&mut self) {
        for e in &self.ledger.events()[self.mirrored..] {
            let data = serde_json::to_value(e).expect("ledger events serialize");
            self.trace.push(e.tick, "ledger", &format!("ledger/{}", e.kind.name()), data);
        }
        self.mirrored = self.ledger.events().len();
    }

    fn note(&mut self, actor: &str, event: &str, data: Value) {
        self.mirror();
        self.trace.push(self.ledger.clock(), actor, event, data);
    }

    fn profile(&self, id: &AccountId) -> BehaviorProfile {
        self.sc.actor(id).map(|a| a.profile.clone()).unwrap_or_default()
    }

    fn is_honest(&self, id: &AccountId) -> bool {
        self.profile(id).is_honest()
    }

    fn bump(map: &mut BTreeMap<AccountId, Tokens>, id: &AccountId, amount: Tokens) {
        *map.entry(id.clone()).or_default() += amount;
    }

    fn end_tick(&mut self) {
        self.mirror();
        self.conservation.checks += 1;
        if !self.ledger.is_conserved() {
            self.conservation.violations += 1;
            let (total, supply) = (self.ledger.total_tokens(), self.ledger.supply());
            self.note("sim", "conservation-violated", json!({ "total": total, "supply": supply }));
        }
        self.check_load();
    }

    /// Each router's load for a server must equal the open sessions on it.
    fn check_load(&mut self) {
        let mut open: BTreeMap<(String, AccountId), u32> = BTreeMap::new();
        for (client, st) in &self.clients {
            if let Some(s) = st.session.as_ref().filter(|s| s.status == SessionStatus::Open) {
                let router = self.sc.actor(client).and_then(|a| a.router.clone()).unwrap_or_default();
                *open.entry((router, s.assignment.server_id.clone())).or_default() += 1;
            }
        }
        for (rid, router) in &self.routers {
            for srv in router.servers() {
                let want = open.get(&(rid.clone(), srv.server_id.clone())).copied().unwrap_or(0);
                if srv.current_load != want {
                    self.load_ok = false;
                }
            }
        }
    }

    fn post(&mut self, actor: &AccountId, tx: Transaction) -> Option<TxOutcome> {
        let kind = match &tx {
            Transaction::CloseChannel { .. } => "close-channel",
            Transaction::RaisePaymentDispute { .. } => "raise-payment-dispute",
            Transaction::OpenChannel { .. } => "open-channel",
            Transaction::Transfer { .. } => "transfer",
            Transaction::PostDaCommitment { .. } => "post-da",
            Transaction::SettleInferenceDispute { .. } => "settle-inference-dispute",
            Transaction::CommitWatermark { .. } => "commit-watermark",
            _ => "transaction",
        };
        match self.ledger.post(tx) {
            Ok(r) => Some(r.outcome),
            Err(e) => {
                self.note(actor.as_str(), "tx-rejected", json!({ "tx": kind, "error": e.to_string() }));
                None
            }
        }
    }

    fn open_channel(&mut self, terms: &SlaTerms, escrow: Tokens) -> Result<ContractId, crate::ledger::LedgerError> {
        let r = self.ledger.post(Transaction::OpenChannel {
            payer: terms.consumer.clone(),
            payee: terms.supplier.clone(),
            escrow,
            sla_id: Some(terms.sla_id.clone()),
        })?;
        let TxOutcome::Contract { id } = r.outcome else {
            unreachable!("channel opens create a contract")
        };
        self.sla_channel.insert(terms.sla_id.clone(), id);
        Ok(id)
    }

    fn open_server_channel(&mut self, terms: &SlaTerms) -> Result<ContractId, crate::ledger::LedgerError> {
        let escrow = self.sc.actor(&terms.consumer).map_or(0, |a| a.server_escrow);
        let id = self.open_channel(terms, escrow)?;
        self.agg_wallets
            .insert(id, PayerWallet::new(self.keys[&terms.consumer].clone(), id, escrow));
        Ok(id)
    }

    fn channel_open(&self, id: ContractId) -> bool {
        self.ledger.channel(id).is_some_and(|c| c.status == ChannelStatus::Open)
    }

    /// The aggregator's open channel to the server under `terms`, reopening
    /// one if a dispute closed the last.
    fn ensure_server_channel(&mut self, terms: &SlaTerms) -> Option<ContractId> {
        if let Some(&id) = self.sla_channel.get(&terms.sla_id) {
            if self.channel_open(id) {
                return Some(id);
            }
        }
        match self.open_server_channel(terms) {
            Ok(id) => {
                self.note(terms.consumer.as_str(), "channel-reopened", json!({ "sla": terms.sla_id, "channel": id }));
                Some(id)
            }
            Err(e) => {
                self.note(terms.consumer.as_str(), "tx-rejected", json!({ "tx": "open-channel", "error": e.to_string() }));
                None
            }
        }
    }

    fn skip(&mut self, client: &AccountId, reason: &str) {
        *self.requests.skipped.entry(reason.to_string()).or_default() += 1;
        self.note(client.as_str(), "request-skipped", json!({ "reason": reason }));
    }

    fn release_load(&mut self, client: &AccountId, server: &AccountId) {
        let rid = self.sc.actor(client).and_then(|a| a.router.clone()).unwrap_or_default();
        if let Some(router) = self.routers.get_mut(&rid) {
            if router.server(server).is_some() {
                router.update_load(server, -1).expect("load counted at match");
            }
        }
    }

    fn end_session(&mut self, client: &AccountId, session: Session, reason: &str) {
        self.release_load(client, &session.assignment.server_id);
        self.note(
            client.as_str(),
            "session-closed",
            json!({ "session": session.session_id, "reason": reason }),
        );
    }

    // --- schedule --------------------------------------------------------

    fn arrivals(&self) -> Vec<Arrival> {
        let mut out = Vec::new();
        for (entry, s) in self.sc.schedule.iter().enumerate() {
            for rep in 0..s.count {
                out.push(Arrival {
                    tick: s.start + rep as u64 * s.interval,
                    client: s.client.clone(),
                    entry,
                    rep,
                });
            }
        }
        out.sort_by(|a, b| (a.tick, &a.client, a.entry, a.rep).cmp(&(b.tick, &b.client, b.entry, b.rep)));
        out
    }

    fn run_schedule(&mut self) {
        let arrivals = self.arrivals();
        self.requests.scheduled = arrivals.len() as u32;
        let mut horizon = arrivals.last().map_or(0, |a| a.tick);
        if let Some(o) = &self.sc.ownership {
            horizon = horizon
                .max(o.owner_commit_tick)
                .max(o.judge_tick)
                .max(o.rivals.iter().map(|r| r.commit_tick).max().unwrap_or(0));
        }
        let mut next = arrivals.iter().peekable();
        for tick in 1..=horizon {
            self.ledger.advance(1).expect("one tick");
            for r in self.routers.values_mut() {
                r.sync(&self.ledger);
            }
            self.ownership_step(tick);
            while let Some(a) = next.next_if(|a| a.tick == tick) {
                self.handle_arrival(a);
            }
            self.end_tick();
        }
    }

    fn ownership_step(&mut self, tick: u64) {
        let Some(o) = &self.sc.ownership else { return };
        let Some(state) = &self.ownership else { return };
        let (owner_claim, rival_claims) = (state.owner_claim.clone(), state.rival_claims.clone());
        let mut commits = Vec::new();
        if o.owner_commit_tick == tick {
            commits.push(owner_claim.clone());
        }
        commits.extend(rival_claims.iter().filter(|(t, _)| *t == tick).map(|(_, c)| c.clone()));
        for c in commits {
            match commit_watermark(&mut self.ledger, &c.registrant, &c.model_id, &c.trigger_set, &c.salt) {
                Ok(_) => {}
                Err(e) => self.note(c.registrant.as_str(), "tx-rejected", json!({ "tx": "commit-watermark", "error": e.to_string() })),
            }
        }
        if o.judge_tick != tick {
            return;
        }
        let mut claims = vec![owner_claim];
        claims.extend(rival_claims.into_iter().map(|(_, c)| c));
        let info = &self.models[&o.model];
        let judge = |model: &DagModel, claims: &[OwnershipClaim]| {
            judge_ownership(&self.ledger, &o.model, &model_oracle(model), claims, self.sc.theta)
        };
        let ruled = judge(&info.deployed, &claims);
        let mut reversed = claims.clone();
        reversed.reverse();
        let again = judge(&info.deployed, &reversed);
        let unmarked = judge(&info.base, &claims[..1]);
        match (ruled, again, unmarked) {
            (Ok(ruling), Ok(again), Ok(unmarked)) => {
                let outcome = OwnershipOutcome {
                    order_invariant: again == ruling,
                    unmarked_match_fraction: unmarked.claims[0].match_fraction,
                    unmarked_winner: unmarked.winner,
                    ruling,
                };
                self.note(
                    o.judge.as_str(),
                    "ownership-ruling",
                    serde_json::to_value(&outcome).expect("serializable"),
                );
                self.ownership.as_mut().expect("present").outcome = Some(outcome);
            }
            (a, b, c) => {
                let err = [a.err(), b.err(), c.err()].into_iter().flatten().next().expect("one failed");
                self.note(o.judge.as_str(), "ownership-error", json!({ "error": err.to_string() }));
            }
        }
    }

    // --- requests --------------------------------------------------------

    fn usable(&self, client: &AccountId, s: &Session) -> bool {
        let rid = self.sc.actor(client).and_then(|a| a.router.clone()).unwrap_or_default();
        s.status == SessionStatus::Open
            && self.channel_open(s.client_leg.channel)
            && self.channel_open(s.server_leg.channel)
            && self.routers.get(&rid).is_some_and(|r| r.server(&s.assignment.server_id).is_some())
    }

    fn start_session(&mut self, client: &AccountId, entry: &ScheduleEntry) -> Result<Session, &'static str> {
        let rid = self.sc.actor(client).and_then(|a| a.router.clone()).expect("validated");
        let info = &self.models[&entry.model];
        let req = MatchRequest {
            client_id: client.clone(),
            model_id: entry.model.clone(),
            region_constraint: entry.region.clone(),
            max_latency: entry.max_latency,
            uptime_requirement: entry.uptime,
            input_size: info.input_dim,
            output_size: info.output_dim,
        };
        let router = self.routers.get_mut(&rid).expect("validated");
        let a = router.match_request(&req).map_err(|_| "no-match")?;
        let server = a.server_id.clone();
        let rec = router.server(&server).expect("just matched");
        let (load, capacity) = (rec.current_load, rec.hw_capacity);
        let client_ch = self
            .sla_channel
            .get(&a.chain.client_sla.sla_id)
            .copied()
            .filter(|c| self.channel_open(*c));
        let Some(client_ch) = client_ch else {
            self.release_load(client, &server);
            return Err("client-channel-closed");
        };
        let Some(server_ch) = self.ensure_server_channel(&a.chain.server_sla) else {
            self.release_load(client, &server);
            return Err("no-server-channel");
        };
        let st = self.clients.get_mut(client).expect("client");
        let sid = format!("{client}/s{}", st.sessions_opened);
        let opened = Session::open(
            &sid,
            self.ledger.slas(),
            self.ledger.clock(),
            a,
            &entry.model,
            load,
            capacity,
            &self.ledger,
            client_ch,
            server_ch,
        );
        match opened {
            Ok(s) => {
                st.sessions_opened += 1;
                self.note(
                    client.as_str(),
                    "session-opened",
                    json!({
                        "session": sid,
                        "server": s.assignment.server_id,
                        "aggregator": s.assignment.aggregator_id,
                        "cost_milli": s.assignment.cost_milli.to_string(),
                        "client_channel": client_ch,
                        "server_channel": server_ch,
                    }),
                );
                Ok(s)
            }
            Err(e) => {
                self.release_load(client, &server);
                Err(match e {
                    ServiceError::ServerUnavailable(_) => "server-at-capacity",
                    ServiceError::NoSlaPath { .. } => "no-sla-path",
                    _ => "session-refused",
                })
            }
        }
    }

    fn handle_arrival(&mut self, a: &Arrival) {
        let entry = &self.sc.schedule[a.entry];
        let client = a.client.clone();
        if self.clients[&client].blocked {
            return self.skip(&client, "client-blocked");
        }
        let current = self.clients.get_mut(&client).expect("client").session.take();
        let session = match current {
            Some(s) if s.model_id == entry.model && self.usable(&client, &s) => s,
            other => {
                if let Some(s) = other {
                    self.end_session(&client, s, "rematch");
                }
                match self.start_session(&client, entry) {
                    Ok(s) => s,
                    Err(reason) => return self.skip(&client, reason),
                }
            }
        };
        if let Some(s) = self.process_request(&client, session) {
            self.clients.get_mut(&client).expect("client").session = Some(s);
        }
    }

    /// Runs one request through the session. Returns the session if it
    /// stays open.
    fn process_request(&mut self, client: &AccountId, mut s: Session) -> Option<Session> {
        let model_id = s.model_id.clone();
        let (in_dim, out_dim) = (self.models[&model_id].input_dim, self.models[&model_id].output_dim);
        let split = s
            .assignment
            .chain
            .split_payment(&model_id, in_dim, out_dim)
            .expect("router only returns priced chains");
        let (cch, sch) = (s.client_leg.channel, s.server_leg.channel);
        if self.client_payers[&cch].wallet().remaining() < split.client_pays {
            self.skip(client, "escrow-exhausted");
            return Some(s);
        }
        if self.agg_wallets[&sch].remaining() < split.server_gets {
            self.skip(client, "aggregator-escrow-exhausted");
            return Some(s);
        }
        let server = s.assignment.server_id.clone();
        let aggregator = s.assignment.aggregator_id.clone();

        let st = self.clients.get_mut(client).expect("client");
        let request_id = format!("{client}-{}", st.requests_sent);
        st.requests_sent += 1;
        let input = Tensor::new((0..in_dim).map(|_| self.rng.gen_range(0..PRIME)).collect()).expect("non-empty");
        let request = InferenceRequest::new(
            &self.keys[client],
            client.clone(),
            &s.session_id,
            &request_id,
            &model_id,
            input.clone(),
        );
        s.resume(self.accepted.get(&cch).cloned(), self.accepted.get(&sch).cloned());
        if let Err(e) = s.submit_request(request, &self.keys[client], &self.keys[&aggregator], out_dim) {
            self.note(client.as_str(), "request-rejected", json!({ "request": request_id, "error": e.to_string() }));
            return Some(s);
        }
        self.requests.submitted += 1;
        self.note(
            client.as_str(),
            "request-submitted",
            json!({ "request": request_id, "session": s.session_id, "server": server, "input": input }),
        );

        // Serve, possibly with an injected fault.
        let deployed = self.models[&model_id].deployed.clone();
        let (fault, equivocates) = match self.profile(&server) {
            BehaviorProfile::FaultyServer { node, probability } => (self.rng.gen_bool(probability).then_some(node), false),
            BehaviorProfile::EquivocatingParty { node, probability } => (self.rng.gen_bool(probability).then_some(node), true),
            _ => (None, false),
        };
        let evaluator: Box<dyn Evaluator> = match fault {
            Some(node) => Box::new(single_fault(&deployed, node).expect("fault node validated")),
            None => Box::new(HonestEvaluator),
        };
        let response = match s.serve(&request_id, &deployed, evaluator.as_ref()) {
            Ok(r) => r,
            Err(e) => {
                self.requests.voided += 1;
                self.note(server.as_str(), "request-void", json!({ "request": request_id, "error": e.to_string() }));
                return Some(s);
            }
        };
        self.requests.served += 1;
        self.served_digest.insert(request_id.clone(), response.output_digest);
        self.note(
            server.as_str(),
            "response-served",
            json!({ "request": request_id, "output_digest": response.output_digest }),
        );
        let honest = execute(&deployed, &input).expect("served honestly-shaped input");
        let masked = honest.final_output == response.output;
        if let Some(node) = fault {
            self.faults.injected += 1;
            self.note(server.as_str(), "fault-injected", json!({ "request": request_id, "node": node, "masked": masked }));
        }
        if self.sc.post_da == DaPolicy::BeforePayment {
            self.post_da(&mut s, &request_id, &server);
        }

        // Audits: every challenger draws; the first with a disagreement disputes.
        let mut honest_sampled = false;
        let mut auditor: Option<AccountId> = None;
        let mut dispute: Option<(AccountId, TraceParticipant)> = None;
        let challengers: Vec<_> = {
            let mut v: Vec<_> = self.sc.actors.iter().filter(|a| a.role == Role::Challenger).collect();
            v.sort_by(|a, b| a.id.cmp(&b.id));
            v.into_iter().map(|a| (a.id.clone(), a.profile.clone())).collect()
        };
        for (cid, profile) in challengers {
            match profile {
                BehaviorProfile::FalseChallenger { rate } => {
                    if !self.rng.gen_bool(rate) {
                        continue;
                    }
                    auditor.get_or_insert(cid.clone());
                    let node = self.rng.gen_range(0..deployed.len() as u32);
                    let fabricated = single_fault(&deployed, node)
                        .and_then(|f| f.run(&deployed, &input))
                        .expect("valid fault");
                    let differs = fabricated.final_output != response.output;
                    self.note(
                        cid.as_str(),
                        "audit",
                        json!({ "request": request_id, "fabricated_at": node, "disputes": differs && dispute.is_none() }),
                    );
                    if differs && dispute.is_none() {
                        dispute = Some((cid, TraceParticipant::new(fabricated)));
                    }
                }
                p => {
                    let rate = match p {
                        BehaviorProfile::HonestChallenger { sampling_rate } => sampling_rate,
                        _ => 1.0,
                    };
                    if !self.rng.gen_bool(rate) {
                        continue;
                    }
                    honest_sampled = true;
                    auditor.get_or_insert(cid.clone());
                    let mismatch = honest.output_digest() != response.output_digest;
                    self.note(
                        cid.as_str(),
                        "audit",
                        json!({ "request": request_id, "mismatch": mismatch, "disputes": mismatch && dispute.is_none() }),
                    );
                    if mismatch && dispute.is_none() {
                        dispute = Some((cid, TraceParticipant::new(honest.clone())));
                    }
                }
            }
        }

        let mut server_lost = false;
        if let Some((challenger, mut cpart)) = dispute {
            if self.sc.post_da == DaPolicy::OnDispute {
                self.post_da(&mut s, &request_id, &server);
            }
            let strace = evaluator.run(&deployed, &input).expect("served once already");
            let mut plain = TraceParticipant::new(strace);
            let mut equiv;
            let asserter: &mut dyn Participant = if equivocates && fault.is_some() {
                equiv = EquivocatingParticipant { inner: plain };
                &mut equiv
            } else {
                &mut plain
            };
            match run_game(&deployed, &request_id, &input, asserter, &mut cpart) {
                Ok(outcome) => {
                    self.inference.raised += 1;
                    *self.rounds.entry(outcome.rounds).or_default() += 1;
                    server_lost = outcome.verdict.faulty_party == Party::Asserter;
                    let (winner, loser) = if server_lost {
                        (challenger.clone(), server.clone())
                    } else {
                        (server.clone(), challenger.clone())
                    };
                    let (hw, hl) = (self.is_honest(&winner), self.is_honest(&loser));
                    if hw || hl {
                        self.inference.with_honest_party += 1;
                        if hl {
                            self.inference.honest_lost += 1;
                        } else {
                            self.inference.honest_won += 1;
                        }
                    }
                    self.note(
                        challenger.as_str(),
                        "inference-dispute",
                        json!({
                            "request": request_id,
                            "server": server,
                            "winner": winner,
                            "rounds": outcome.rounds,
                            "referee_evals": outcome.referee_evals,
                            "verdict": outcome.verdict,
                            "transcript": outcome.transcript,
                        }),
                    );
                    self.post(
                        &winner,
                        Transaction::SettleInferenceDispute {
                            request_id: request_id.clone(),
                            winner: winner.clone(),
                            loser,
                            fee: self.sc.ledger.inference_dispute_fee,
                            verdict: outcome.verdict,
                        },
                    );
                }
                Err(e) => {
                    self.note(challenger.as_str(), "dispute-aborted", json!({ "request": request_id, "error": e.to_string() }));
                }
            }
        }
        if fault.is_some() {
            if server_lost {
                self.faults.detected += 1;
            } else if masked {
                self.faults.masked += 1;
            } else if honest_sampled {
                self.faults.escaped += 1;
            } else {
                self.faults.unsampled += 1;
            }
        }
        if server_lost {
            s.void(&request_id).expect("served");
            self.requests.voided += 1;
            self.end_session(client, s, "server-proven-faulty");
            let rid = self.sc.actor(&server).and_then(|a| a.router.clone()).unwrap_or_default();
            if let Some(r) = self.routers.get_mut(&rid) {
                if r.unsubscribe(&server).is_ok() {
                    self.note(&rid, "server-delisted", json!({ "server": server }));
                }
            }
            return None;
        }

        // Payment on both legs.
        *self.owed.entry(cch).or_default() += split.client_pays;
        *self.owed.entry(sch).or_default() += split.server_gets;
        Self::bump(&mut self.consumed, client, split.client_pays);
        Self::bump(&mut self.consumed, &aggregator, split.server_gets);
        if let Some(c) = auditor {
            *self.challenger_fees.entry((aggregator.clone(), c)).or_default() += split.challenger_fee;
        }
        let mut cp = self.client_payers.remove(&cch).expect("client payer");
        let mut aw = self.agg_wallets.remove(&sch).expect("aggregator wallet");
        let settled = s.settle_unit(&request_id, &split, &mut cp, &mut aw);
        self.client_payers.insert(cch, cp);
        self.agg_wallets.insert(sch, aw);
        match settled {
            Ok((cmp, smp)) => {
                self.requests.paid += 1;
                self.payments_settled += 1;
                self.tokens_paid += split.client_pays;
                self.note(
                    client.as_str(),
                    "payment-settled",
                    json!({
                        "request": request_id,
                        "client_cumulative": cmp.cumulative,
                        "server_cumulative": smp.cumulative,
                        "nonce": cmp.nonce,
                    }),
                );
                self.accepted.insert(cch, cmp);
                self.accepted.insert(sch, smp);
                if self.sc.post_da == DaPolicy::AfterPayment {
                    self.post_da(&mut s, &request_id, &server);
                }
                let st = self.clients.get_mut(client).expect("client");
                st.units_paid += 1;
                let units = st.units_paid;
                if let BehaviorProfile::DoubleSigningClient { after } = self.profile(client) {
                    if units == after {
                        return self.double_sign(client, s, &request_id);
                    }
                }
                Some(s)
            }
            Err(ServiceError::PaymentRefused { payer, .. }) => {
                self.requests.unpaid += 1;
                self.note(payer.as_str(), "payment-refused", json!({ "request": request_id }));
                let bundle = s.collect_witnesses(&request_id).expect("known request");
                // The server chases the aggregator; the aggregator chases the client.
                let mut cases = vec![(server.clone(), bundle.server_case(&s))];
                if &payer == client {
                    cases.push((aggregator.clone(), bundle.client_case(&s)));
                    self.clients.get_mut(client).expect("client").blocked = true;
                }
                for (by, case) in cases {
                    self.post(&by, Transaction::RaisePaymentDispute { case });
                }
                self.end_session(client, s, "payment-refused");
                None
            }
            Err(e) => {
                self.note(client.as_str(), "payment-failed", json!({ "request": request_id, "error": e.to_string() }));
                self.end_session(client, s, "payment-failed");
                None
            }
        }
    }

    fn post_da(&mut self, s: &mut Session, request_id: &str, server: &AccountId) {
        if let Err(e) = s.post_da_commitment(&mut self.ledger, request_id, server) {
            self.note(server.as_str(), "tx-rejected", json!({ "tx": "post-da", "error": e.to_string() }));
        }
    }

    /// The client closes its channel with a cheaper twin of its last
    /// micropayment; the aggregator answers with the original.
    fn double_sign(&mut self, client: &AccountId, s: Session, request_id: &str) -> Option<Session> {
        let cch = s.client_leg.channel;
        let bundle = s.collect_witnesses(request_id).expect("known request");
        let pred = bundle.client_predecessor.as_ref().map_or(0, |p| p.cumulative);
        let Some(twin) = self.client_payers[&cch].wallet().double_sign(request_id, pred) else {
            return Some(s);
        };
        self.note(client.as_str(), "double-sign", json!({ "request": request_id, "nonce": twin.nonce, "cumulative": twin.cumulative }));
        self.clients.get_mut(client).expect("client").blocked = true;
        let closed = self.post(
            client,
            Transaction::CloseChannel {
                channel: cch,
                by: client.clone(),
                final_payment: Some(twin),
            },
        );
        let aggregator = s.assignment.aggregator_id.clone();
        let accepted = self.accepted.get(&cch).map_or(0, |m| m.cumulative);
        let short = self.ledger.channel(cch).is_some_and(|c| c.paid_out < accepted);
        if closed.is_some() && short {
            self.post(&aggregator, Transaction::RaisePaymentDispute { case: bundle.client_case(&s) });
        }
        self.end_session(client, s, "channel-closed-by-client");
        None
    }

    // --- wind-down -------------------------------------------------------

    fn drain(&mut self) {
        let clients: Vec<AccountId> = self.clients.keys().cloned().collect();
        for c in clients {
            if let Some(s) = self.clients.get_mut(&c).expect("client").session.take() {
                self.end_session(&c, s, "drain");
            }
        }
        let open: Vec<(ContractId, AccountId)> = self
            .ledger
            .channels()
            .filter(|c| c.status == ChannelStatus::Open)
            .map(|c| (c.channel_id, c.payee.clone()))
            .collect();
        for (id, payee) in open {
            let final_payment = self.accepted.get(&id).cloned();
            self.post(
                &payee,
                Transaction::CloseChannel {
                    channel: id,
                    by: payee.clone(),
                    final_payment,
                },
            );
        }
        self.end_tick();
        let limit = 2 * self.sc.ledger.dispute_window + 2;
        for _ in 0..limit {
            let now = self.ledger.clock();
            let pending = self
                .ledger
                .channels()
                .any(|c| c.status != ChannelStatus::Closed || c.open_case.is_some() || (c.locked_refund > 0 && c.refund_release_at.is_some_and(|t| t >= now)));
            if !pending {
                break;
            }
            self.ledger.advance(1).expect("one tick");
            self.end_tick();
        }
        let fees: Vec<_> = self.challenger_fees.iter().map(|(k, f)| (k.clone(), *f)).collect();
        for ((agg, to), fee) in fees {
            let amount = fee.min(self.ledger.balance(&agg).unwrap_or(0));
            if amount > 0 {
                self.post(&agg, Transaction::Transfer { from: agg.clone(), to, amount });
            }
        }
        self.end_tick();
    }

    fn finish(mut self) -> RunOutput {
        let mut payment = DisputeCounts::default();
        for e in self.ledger.events() {
            match &e.kind {
                EventKind::PaymentDisputeRaised { .. } => payment.raised += 1,
                EventKind::PaymentDisputeResolved { ruling, .. } => {
                    let kind = serde_json::to_value(ruling.kind).expect("serializable");
                    *payment.rulings.entry(kind.as_str().unwrap_or("?").to_string()).or_default() += 1;
                    let ch = self.ledger.channel(ruling.channel).expect("ruled channel");
                    let fair = self.owed.get(&ruling.channel).copied().unwrap_or(0);
                    let payee_honest = self.is_honest(&ch.payee);
                    let payer_honest = self.is_honest(&ch.payer);
                    if !(payee_honest || payer_honest) {
                        continue;
                    }
                    payment.with_honest_party += 1;
                    let payee_lost = payee_honest && (ruling.kind == RulingKind::Dismissed || ruling.settled_cumulative < fair);
                    let payer_lost = payer_honest && ruling.settled_cumulative > fair;
                    if payee_lost || payer_lost {
                        payment.honest_lost += 1;
                    } else {
                        payment.honest_won += 1;
                    }
                }
                _ => {}
            }
        }

        let mut da = DaCounts::default();
        for (req, digest) in &self.served_digest {
            if let Some(rec) = self.ledger.da_commitment(req) {
                da.posted += 1;
                if rec.digest == *digest {
                    da.consistent += 1;
                }
            }
        }

        let mut actors: Vec<_> = self.sc.actors.iter().collect();
        actors.sort_by(|a, b| a.id.cmp(&b.id));
        let balances: Vec<BalanceLine> = actors
            .iter()
            .map(|a| {
                let initial = self.initial[&a.id];
                let final_balance = self.ledger.balance(&a.id).expect("account");
                let consumed = self.consumed.get(&a.id).copied().unwrap_or(0);
                let fees_owed = self
                    .challenger_fees
                    .iter()
                    .filter(|((agg, _), _)| agg == &a.id)
                    .map(|(_, f)| f)
                    .sum::<Tokens>();
                let floor = initial.saturating_sub(consumed + fees_owed);
                BalanceLine {
                    account: a.id.clone(),
                    role: a.role,
                    honest: a.profile.is_honest(),
                    initial,
                    final_balance,
                    consumed,
                    fees_owed,
                    floor,
                    solvent: final_balance >= floor,
                }
            })
            .collect();

        let summary: BTreeMap<String, Tokens> = balances
            .iter()
            .map(|b| (b.account.to_string(), b.final_balance))
            .collect();
        let ledger_digest = self.ledger.state_digest();
        self.note(
            "sim",
            "run-complete",
            json!({ "balances": summary, "ledger_digest": ledger_digest }),
        );

        let report = RunReport {
            scenario: self.sc.name.clone(),
            seed: self.sc.seed,
            final_tick: self.ledger.clock(),
            requests: self.requests,
            payments_settled: self.payments_settled,
            tokens_paid_by_clients: self.tokens_paid,
            payment_disputes: payment,
            inference_disputes: self.inference,
            rounds_histogram: self.rounds,
            faults: self.faults,
            da,
            conservation: self.conservation,
            load_accounting_ok: self.load_ok,
            balances,
            ownership: self.ownership.and_then(|o| o.outcome),
            trace_records: self.trace.len(),
            trace_digest: self.trace.digest().to_hex(),
            ledger_digest: ledger_digest.to_hex(),
        };
        RunOutput {
            report,
            trace: self.trace,
            ledger: self.ledger,
        }
    }
}
