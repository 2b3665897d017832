//! The control layer: server state, an SLA mirror fed from ledger events, and
//! request-to-server matching.
//!
//! Matching keeps servers that host the model, satisfy the hard region
//! constraint (verified location only) and have an SLA path to the client,
//! then picks the lowest cost:
//!
//! ```text
//! cost = w_lat * latency + w_price * server_price + w_load * load / capacity
//!        (+ penalties for missed soft latency / uptime requirements)
//! ```
//!
//! Costs are fixed-point (thousandths) so ties are exact; ties go to the
//! smallest server id.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{AccountId, EventKind, Ledger, LedgerEvent};
use crate::sla::{price_of, SlaChain, SlaRegistry, Tokens};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouterError {
    #[error("server {0} is already subscribed")]
    DuplicateSubscription(AccountId),
    #[error("unknown server {0}")]
    UnknownServer(AccountId),
    #[error("load of {server} would drop below zero")]
    NegativeLoad { server: AccountId },
    #[error("request names no model")]
    EmptyModelId,
    #[error("no eligible server for {model_id}")]
    NoMatch { model_id: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerRecord {
    pub server_id: AccountId,
    pub hosted_models: BTreeSet<String>,
    /// Abstract compute units; the session cap.
    pub hw_capacity: u32,
    #[serde(default)]
    pub current_load: u32,
    pub location: String,
    /// Only ever set by a location attestation seen on the ledger.
    #[serde(default)]
    pub location_verified: bool,
    /// Claimed, in milliseconds.
    pub advertised_latency: u32,
    /// Observed availability in basis points.
    #[serde(default = "full_availability")]
    pub availability_bps: u32,
}

fn full_availability() -> u32 {
    10_000
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRequest {
    pub client_id: AccountId,
    pub model_id: String,
    /// Hard: only verified servers in this region qualify.
    #[serde(default)]
    pub region_constraint: Option<String>,
    /// Soft, milliseconds.
    #[serde(default)]
    pub max_latency: Option<u32>,
    /// Soft, basis points.
    #[serde(default)]
    pub uptime_requirement: Option<u32>,
    pub input_size: u32,
    pub output_size: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub w_lat: u64,
    pub w_price: u64,
    pub w_load: u64,
    /// Added when the server's latency exceeds `max_latency`.
    pub latency_penalty: u64,
    /// Added when the server's availability is below `uptime_requirement`.
    pub uptime_penalty: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            w_lat: 1,
            w_price: 1,
            w_load: 1,
            latency_penalty: 1_000,
            uptime_penalty: 1_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub server_id: AccountId,
    pub aggregator_id: AccountId,
    pub chain: SlaChain,
    /// Winning cost in thousandths.
    pub cost_milli: u128,
}

#[derive(Clone, Debug, Serialize)]
pub struct Router {
    pub id: AccountId,
    config: RouterConfig,
    servers: BTreeMap<AccountId, ServerRecord>,
    slas: SlaRegistry,
    attested: BTreeMap<AccountId, String>,
    next_event: u64,
    now: u64,
}

impl Router {
    pub fn new(id: AccountId, config: RouterConfig) -> Router {
        Router {
            id,
            config,
            servers: BTreeMap::new(),
            slas: SlaRegistry::new(),
            attested: BTreeMap::new(),
            next_event: 0,
            now: 0,
        }
    }

    pub fn config(&self) -> &RouterConfig {
        &self.config
    }

    pub fn server(&self, id: &AccountId) -> Option<&ServerRecord> {
        self.servers.get(id)
    }

    pub fn servers(&self) -> impl Iterator<Item = &ServerRecord> {
        self.servers.values()
    }

    pub fn slas(&self) -> &SlaRegistry {
        &self.slas
    }

    pub fn total_load(&self) -> u64 {
        self.servers.values().map(|s| s.current_load as u64).sum()
    }

    pub fn subscribe(&mut self, mut record: ServerRecord) -> Result<(), RouterError> {
        if self.servers.contains_key(&record.server_id) {
            return Err(RouterError::DuplicateSubscription(record.server_id));
        }
        // Self-reported verification is ignored; only attestations count.
        match self.attested.get(&record.server_id) {
            Some(region) => {
                record.location = region.clone();
                record.location_verified = true;
            }
            None => record.location_verified = false,
        }
        self.servers.insert(record.server_id.clone(), record);
        Ok(())
    }

    pub fn unsubscribe(&mut self, server: &AccountId) -> Result<ServerRecord, RouterError> {
        self.servers
            .remove(server)
            .ok_or_else(|| RouterError::UnknownServer(server.clone()))
    }

    pub fn update_load(&mut self, server: &AccountId, delta: i64) -> Result<u32, RouterError> {
        let rec = self
            .servers
            .get_mut(server)
            .ok_or_else(|| RouterError::UnknownServer(server.clone()))?;
        let next = rec.current_load as i64 + delta;
        if next < 0 {
            return Err(RouterError::NegativeLoad {
                server: server.clone(),
            });
        }
        rec.current_load = next as u32;
        Ok(rec.current_load)
    }

    pub fn set_availability(&mut self, server: &AccountId, bps: u32) -> Result<(), RouterError> {
        self.servers
            .get_mut(server)
            .ok_or_else(|| RouterError::UnknownServer(server.clone()))?
            .availability_bps = bps.min(10_000);
        Ok(())
    }

    /// Applies one ledger event. Events the router does not track, and events
    /// inconsistent with its state, are ignored.
    pub fn on_ledger_event(&mut self, event: &LedgerEvent) {
        self.now = self.now.max(event.tick);
        match &event.kind {
            EventKind::SlaRegistered { terms } => {
                let _ = self.slas.insert(terms.clone());
            }
            EventKind::SlaDeregistered { sla_id } | EventKind::SlaExpired { sla_id } => {
                let _ = self.slas.deactivate(sla_id);
            }
            EventKind::LocationAttested { server, region, .. } => {
                self.attested.insert(server.clone(), region.clone());
                if let Some(rec) = self.servers.get_mut(server) {
                    rec.location = region.clone();
                    rec.location_verified = true;
                }
            }
            _ => {}
        }
    }

    /// Reads every ledger event not yet seen and catches up with the clock.
    pub fn sync(&mut self, ledger: &Ledger) {
        for e in ledger.events_since(self.next_event) {
            self.on_ledger_event(e);
        }
        self.next_event = ledger.events().len() as u64;
        self.now = ledger.clock();
    }

    fn cost(&self, s: &ServerRecord, price: Tokens, req: &MatchRequest) -> u128 {
        let c = &self.config;
        let mut cost = c.w_lat as u128 * s.advertised_latency as u128 * 1000
            + c.w_price as u128 * price as u128 * 1000
            + c.w_load as u128 * s.current_load as u128 * 1000 / s.hw_capacity.max(1) as u128;
        if req.max_latency.is_some_and(|m| s.advertised_latency > m) {
            cost += c.latency_penalty as u128 * 1000;
        }
        if req.uptime_requirement.is_some_and(|u| s.availability_bps < u) {
            cost += c.uptime_penalty as u128 * 1000;
        }
        cost
    }

    /// Eligible servers with their SLA chain and cost, in server id order.
    pub fn candidates(&self, req: &MatchRequest) -> Vec<Assignment> {
        self.servers
            .values()
            .filter(|s| s.hosted_models.contains(&req.model_id))
            .filter(|s| match &req.region_constraint {
                Some(r) => s.location_verified && &s.location == r,
                None => true,
            })
            .filter_map(|s| {
                let chain = self
                    .slas
                    .validate_chain(&req.client_id, &s.server_id, &req.model_id, self.now)?;
                let price = price_of(&chain.server_sla, &req.model_id, req.input_size, req.output_size).ok()?;
                chain
                    .split_payment(&req.model_id, req.input_size, req.output_size)
                    .ok()?;
                Some(Assignment {
                    server_id: s.server_id.clone(),
                    aggregator_id: chain.aggregator.clone(),
                    cost_milli: self.cost(s, price, req),
                    chain,
                })
            })
            .collect()
    }

    /// Picks the cheapest eligible server and counts the new session against
    /// its load.
    pub fn match_request(&mut self, req: &MatchRequest) -> Result<Assignment, RouterError> {
        if req.model_id.is_empty() {
            return Err(RouterError::EmptyModelId);
        }
        let best = self
            .candidates(req)
            .into_iter()
            .min_by(|a, b| (a.cost_milli, &a.server_id).cmp(&(b.cost_milli, &b.server_id)))
            .ok_or_else(|| RouterError::NoMatch {
                model_id: req.model_id.clone(),
            })?;
        self.update_load(&best.server_id, 1)?;
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Keypair;
    use crate::ledger::{LedgerConfig, Transaction};
    use crate::sla::{FeeFraction, ModelPricing, SlaTerms};

    fn terms(id: &str, consumer: &str, supplier: &str, price: Tokens) -> SlaTerms {
        SlaTerms {
            sla_id: id.into(),
            consumer: consumer.into(),
            supplier: supplier.into(),
            pricing: vec![ModelPricing::flat("m1", 16, 16, price)],
            challenger_fee_bps: FeeFraction::ZERO,
            valid_from: 0,
            valid_until: 100,
        }
    }

    fn server(id: &str, latency: u32, region: &str) -> ServerRecord {
        ServerRecord {
            server_id: id.into(),
            hosted_models: ["m1".to_string()].into(),
            hw_capacity: 4,
            current_load: 0,
            location: region.into(),
            location_verified: true,
            advertised_latency: latency,
            availability_bps: 10_000,
        }
    }

    fn request(region: Option<&str>) -> MatchRequest {
        MatchRequest {
            client_id: "c".into(),
            model_id: "m1".into(),
            region_constraint: region.map(String::from),
            max_latency: None,
            uptime_requirement: None,
            input_size: 4,
            output_size: 4,
        }
    }

    fn setup() -> (Ledger, Router) {
        let mut l = Ledger::new(LedgerConfig::default());
        for n in ["c", "a", "s1", "s2", "attestor"] {
            l.create_account(n.into(), Keypair::derive(n).public(), 100).unwrap();
        }
        let k = Keypair::derive;
        for t in [terms("c-a", "c", "a", 10), terms("a-s1", "a", "s1", 7), terms("a-s2", "a", "s2", 7)] {
            let (c, s) = (t.consumer.clone(), t.supplier.clone());
            l.post(Transaction::RegisterSla {
                sla: t.sign(&k(c.as_str()), &k(s.as_str())),
            })
            .unwrap();
        }
        let mut r = Router::new("r".into(), RouterConfig::default());
        r.sync(&l);
        (l, r)
    }

    #[test]
    fn equal_cost_goes_to_smaller_id() {
        let (_, mut r) = setup();
        r.subscribe(server("s2", 10, "EU")).unwrap();
        r.subscribe(server("s1", 10, "EU")).unwrap();
        let a = r.match_request(&request(None)).unwrap();
        assert_eq!(a.server_id, AccountId::from("s1"));
        assert_eq!(r.server(&"s1".into()).unwrap().current_load, 1);
        // s1 now carries load, so s2 is cheaper.
        assert_eq!(r.match_request(&request(None)).unwrap().server_id, AccountId::from("s2"));
    }

    #[test]
    fn region_needs_attestation() {
        let (mut l, mut r) = setup();
        r.subscribe(server("s1", 10, "EU")).unwrap();
        // The self-reported flag is not trusted.
        assert!(!r.server(&"s1".into()).unwrap().location_verified);
        assert!(matches!(r.match_request(&request(Some("EU"))), Err(RouterError::NoMatch { .. })));
        l.post(Transaction::AttestLocation {
            attestor: "attestor".into(),
            server: "s1".into(),
            region: "US".into(),
        })
        .unwrap();
        r.sync(&l);
        assert!(r.match_request(&request(Some("EU"))).is_err());
        assert_eq!(r.match_request(&request(Some("US"))).unwrap().server_id, AccountId::from("s1"));
    }

    #[test]
    fn deregistration_removes_path() {
        let (mut l, mut r) = setup();
        r.subscribe(server("s1", 10, "EU")).unwrap();
        assert!(r.match_request(&request(None)).is_ok());
        l.post(Transaction::DeregisterSla {
            sla_id: "a-s1".into(),
            by: "s1".into(),
        })
        .unwrap();
        r.sync(&l);
        assert!(r.match_request(&request(None)).is_err());
    }

    #[test]
    fn subscription_lifecycle() {
        let (_, mut r) = setup();
        r.subscribe(server("s1", 10, "EU")).unwrap();
        assert_eq!(
            r.subscribe(server("s1", 10, "EU")),
            Err(RouterError::DuplicateSubscription("s1".into()))
        );
        assert_eq!(
            r.update_load(&"s1".into(), -1),
            Err(RouterError::NegativeLoad { server: "s1".into() })
        );
        r.unsubscribe(&"s1".into()).unwrap();
        assert!(r.match_request(&request(None)).is_err());
        assert!(matches!(r.update_load(&"s1".into(), 1), Err(RouterError::UnknownServer(_))));
    }

    #[test]
    fn soft_constraints_penalize_but_keep() {
        let (_, mut r) = setup();
        let mut slow = server("s1", 10, "EU");
        slow.availability_bps = 5_000;
        r.subscribe(slow).unwrap();
        r.subscribe(server("s2", 30, "EU")).unwrap();
        let mut req = request(None);
        req.uptime_requirement = Some(9_000);
        assert_eq!(r.match_request(&req).unwrap().server_id, AccountId::from("s2"));
        r.unsubscribe(&"s2".into()).unwrap();
        assert_eq!(r.match_request(&req).unwrap().server_id, AccountId::from("s1"));
    }

    #[test]
    fn routers_fed_the_same_stream_agree() {
        let (l, _) = setup();
        let mut a = Router::new("ra".into(), RouterConfig::default());
        let mut b = Router::new("rb".into(), RouterConfig::default());
        for r in [&mut a, &mut b] {
            r.sync(&l);
            r.subscribe(server("s1", 12, "EU")).unwrap();
            r.subscribe(server("s2", 10, "EU")).unwrap();
        }
        for _ in 0..6 {
            assert_eq!(a.match_request(&request(None)), b.match_request(&request(None)));
        }
    }

    #[test]
    fn unknown_events_are_ignored() {
        let (l, mut r) = setup();
        let before = serde_json::to_string(&r).unwrap();
        let noise = LedgerEvent {
            seq: 99,
            tick: 0,
            contract: "x".into(),
            kind: EventKind::SlaDeregistered { sla_id: "nope".into() },
        };
        r.on_ledger_event(&noise);
        assert_eq!(serde_json::to_string(&r).unwrap(), before);
        let _ = l;
    }
}
