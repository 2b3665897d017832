//! Service-level agreements and two-hop SLA chains.
//!
//! An SLA prices service per (model, input-size bucket, output-size bucket).
//! Buckets are given per model as strictly increasing upper bounds, each bucket
//! closed at its upper end: bounds `[128, 512]` mean sizes `0..=128` and
//! `129..=512`. A client reaches a server through an aggregator holding an
//! active SLA with each of them.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Encoder, Keypair, PublicKey, Signature};
use crate::ledger::AccountId;

pub type Tokens = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SlaError {
    #[error("model {0} is not priced by this agreement")]
    UnknownModel(String),
    #[error("size {size} is beyond the last {axis} bucket ({max})")]
    SizeOutOfRange { axis: &'static str, size: u32, max: u32 },
    #[error("invalid pricing table: {0}")]
    InvalidTable(String),
    #[error("challenger fee fraction must be below 1")]
    InvalidFeeFraction,
    #[error("signature by {0} does not verify")]
    BadSignature(AccountId),
    #[error("an agreement with id {0} already exists")]
    DuplicateId(String),
    #[error("unknown agreement {0}")]
    UnknownSla(String),
    #[error("{0} is not a party to this agreement")]
    NotParty(AccountId),
    #[error("aggregator margin would be negative at model {model}, sizes ({input}, {output})")]
    NegativeMargin { model: String, input: u32, output: u32 },
    #[error("SLA documents: {0}")]
    Document(String),
}

/// A fraction in basis points (1/10000).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct FeeFraction(pub u32);

impl FeeFraction {
    pub const ZERO: FeeFraction = FeeFraction(0);

    pub fn from_bps(bps: u32) -> Result<FeeFraction, SlaError> {
        if bps >= 10_000 {
            return Err(SlaError::InvalidFeeFraction);
        }
        Ok(FeeFraction(bps))
    }

    /// `floor(amount * fraction)`.
    pub fn of(self, amount: Tokens) -> Tokens {
        ((amount as u128 * self.0 as u128) / 10_000) as Tokens
    }
}

impl fmt::Display for FeeFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0 as f64 / 10_000.0)
    }
}

/// Prices for one model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPricing {
    pub model_id: String,
    /// Closed upper bounds of the input-size buckets, strictly increasing.
    pub input_bounds: Vec<u32>,
    pub output_bounds: Vec<u32>,
    /// `prices[i][o]` for input bucket `i` and output bucket `o`.
    pub prices: Vec<Vec<Tokens>>,
}

impl ModelPricing {
    /// One price for every size up to the given bounds.
    pub fn flat(model_id: &str, max_input: u32, max_output: u32, price: Tokens) -> Self {
        ModelPricing {
            model_id: model_id.to_string(),
            input_bounds: vec![max_input],
            output_bounds: vec![max_output],
            prices: vec![vec![price]],
        }
    }

    fn check(&self) -> Result<(), SlaError> {
        let increasing = |b: &[u32]| !b.is_empty() && b.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&self.input_bounds) || !increasing(&self.output_bounds) {
            return Err(SlaError::InvalidTable(format!(
                "{}: bucket bounds must be non-empty and strictly increasing",
                self.model_id
            )));
        }
        if self.prices.len() != self.input_bounds.len()
            || self.prices.iter().any(|r| r.len() != self.output_bounds.len())
        {
            return Err(SlaError::InvalidTable(format!(
                "{}: price grid does not match bucket counts",
                self.model_id
            )));
        }
        Ok(())
    }

    fn bucket(bounds: &[u32], size: u32, axis: &'static str) -> Result<usize, SlaError> {
        bounds
            .iter()
            .position(|b| size <= *b)
            .ok_or(SlaError::SizeOutOfRange {
                axis,
                size,
                max: *bounds.last().expect("checked non-empty"),
            })
    }

    pub fn price(&self, input_size: u32, output_size: u32) -> Result<Tokens, SlaError> {
        let i = Self::bucket(&self.input_bounds, input_size, "input")?;
        let o = Self::bucket(&self.output_bounds, output_size, "output")?;
        Ok(self.prices[i][o])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlaTerms {
    pub sla_id: String,
    pub consumer: AccountId,
    pub supplier: AccountId,
    pub pricing: Vec<ModelPricing>,
    /// Share of each unit price routed to challengers, in basis points.
    #[serde(default)]
    pub challenger_fee_bps: FeeFraction,
    /// Validity window in ledger ticks, both ends inclusive.
    pub valid_from: u64,
    pub valid_until: u64,
}

impl SlaTerms {
    pub fn validate(&self) -> Result<(), SlaError> {
        FeeFraction::from_bps(self.challenger_fee_bps.0)?;
        for p in &self.pricing {
            p.check()?;
        }
        if self.valid_from > self.valid_until {
            return Err(SlaError::InvalidTable("validity window is empty".into()));
        }
        Ok(())
    }

    pub fn pricing_for(&self, model_id: &str) -> Option<&ModelPricing> {
        self.pricing.iter().find(|p| p.model_id == model_id)
    }

    pub fn covers(&self, model_id: &str) -> bool {
        self.pricing_for(model_id).is_some()
    }

    pub fn active_at(&self, tick: u64) -> bool {
        (self.valid_from..=self.valid_until).contains(&tick)
    }

    /// Canonical bytes both parties sign.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::tagged("sakshi/sla/v1");
        e.str(&self.sla_id)
            .str(self.consumer.as_str())
            .str(self.supplier.as_str())
            .u32(self.challenger_fee_bps.0)
            .u64(self.valid_from)
            .u64(self.valid_until)
            .u32(self.pricing.len() as u32);
        for p in &self.pricing {
            e.str(&p.model_id);
            e.u32(p.input_bounds.len() as u32);
            for b in &p.input_bounds {
                e.u32(*b);
            }
            e.u32(p.output_bounds.len() as u32);
            for b in &p.output_bounds {
                e.u32(*b);
            }
            for row in &p.prices {
                e.u64s(row);
            }
        }
        e.finish()
    }

    pub fn sign(self, consumer: &Keypair, supplier: &Keypair) -> SignedSla {
        let bytes = self.signing_bytes();
        SignedSla {
            consumer_sig: consumer.sign(&bytes),
            supplier_sig: supplier.sign(&bytes),
            terms: self,
        }
    }
}

/// Deterministic price lookup.
pub fn price_of(
    terms: &SlaTerms,
    model_id: &str,
    input_size: u32,
    output_size: u32,
) -> Result<Tokens, SlaError> {
    terms
        .pricing_for(model_id)
        .ok_or_else(|| SlaError::UnknownModel(model_id.to_string()))?
        .price(input_size, output_size)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedSla {
    pub terms: SlaTerms,
    pub consumer_sig: Signature,
    pub supplier_sig: Signature,
}

impl SignedSla {
    pub fn verify(&self, consumer: &PublicKey, supplier: &PublicKey) -> Result<(), SlaError> {
        let bytes = self.terms.signing_bytes();
        if !consumer.verify(&bytes, &self.consumer_sig) {
            return Err(SlaError::BadSignature(self.terms.consumer.clone()));
        }
        if !supplier.verify(&bytes, &self.supplier_sig) {
            return Err(SlaError::BadSignature(self.terms.supplier.clone()));
        }
        Ok(())
    }
}

/// A client SLA and a server SLA sharing one aggregator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlaChain {
    pub aggregator: AccountId,
    pub client_sla: SlaTerms,
    pub server_sla: SlaTerms,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentSplit {
    pub client_pays: Tokens,
    pub server_gets: Tokens,
    pub aggregator_margin: Tokens,
    pub challenger_fee: Tokens,
}

impl SlaChain {
    /// Revenue split of one unit. The challenger fee is `floor(fraction *
    /// client price)` and comes out of the aggregator's side.
    pub fn split_payment(
        &self,
        model_id: &str,
        input_size: u32,
        output_size: u32,
    ) -> Result<PaymentSplit, SlaError> {
        let client_pays = price_of(&self.client_sla, model_id, input_size, output_size)?;
        let server_gets = price_of(&self.server_sla, model_id, input_size, output_size)?;
        let challenger_fee = self.client_sla.challenger_fee_bps.of(client_pays);
        let aggregator_margin = client_pays
            .checked_sub(server_gets)
            .and_then(|m| m.checked_sub(challenger_fee))
            .ok_or(SlaError::NegativeMargin {
                model: model_id.to_string(),
                input: input_size,
                output: output_size,
            })?;
        Ok(PaymentSplit {
            client_pays,
            server_gets,
            aggregator_margin,
            challenger_fee,
        })
    }

    /// Checks the margin at every cell of both grids for one model.
    pub fn check_margin(&self, model_id: &str) -> Result<(), SlaError> {
        let (Some(c), Some(s)) = (
            self.client_sla.pricing_for(model_id),
            self.server_sla.pricing_for(model_id),
        ) else {
            return Err(SlaError::UnknownModel(model_id.to_string()));
        };
        // Prices are piecewise constant, so checking every bucket bound of
        // either table that both tables cover visits every combination.
        let max_in = (*c.input_bounds.last().unwrap()).min(*s.input_bounds.last().unwrap());
        let max_out = (*c.output_bounds.last().unwrap()).min(*s.output_bounds.last().unwrap());
        let points = |a: &[u32], b: &[u32], max: u32| -> Vec<u32> {
            let mut v: Vec<u32> = a.iter().chain(b).copied().filter(|x| *x <= max).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        for i in points(&c.input_bounds, &s.input_bounds, max_in) {
            for o in points(&c.output_bounds, &s.output_bounds, max_out) {
                self.split_payment(model_id, i, o)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SlaRecord {
    pub terms: SlaTerms,
    pub active: bool,
}

/// Registered agreements keyed by id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SlaRegistry {
    records: BTreeMap<String, SlaRecord>,
}

impl SlaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, sla_id: &str) -> Option<&SlaRecord> {
        self.records.get(sla_id)
    }

    pub fn contains(&self, sla_id: &str) -> bool {
        self.records.contains_key(sla_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SlaRecord> {
        self.records.values()
    }

    /// Adds terms without signature checks (callers verify first).
    pub fn insert(&mut self, terms: SlaTerms) -> Result<(), SlaError> {
        if self.records.contains_key(&terms.sla_id) {
            return Err(SlaError::DuplicateId(terms.sla_id));
        }
        self.records
            .insert(terms.sla_id.clone(), SlaRecord { terms, active: true });
        Ok(())
    }

    pub fn deactivate(&mut self, sla_id: &str) -> Result<(), SlaError> {
        let rec = self
            .records
            .get_mut(sla_id)
            .ok_or_else(|| SlaError::UnknownSla(sla_id.to_string()))?;
        rec.active = false;
        Ok(())
    }

    fn live<'a>(&'a self, tick: u64) -> impl Iterator<Item = &'a SlaTerms> + 'a {
        self.records
            .values()
            .filter(move |r| r.active && r.terms.active_at(tick))
            .map(|r| &r.terms)
    }

    /// Checks that adding `terms` does not create a negative-margin chain with
    /// any live agreement on the other side of the same aggregator.
    pub fn check_new_margins(&self, terms: &SlaTerms, tick: u64) -> Result<(), SlaError> {
        for other in self.live(tick) {
            let chain = if other.supplier == terms.consumer {
                // `terms` is a server SLA bought by an aggregator; `other` sells to a client.
                SlaChain {
                    aggregator: terms.consumer.clone(),
                    client_sla: other.clone(),
                    server_sla: terms.clone(),
                }
            } else if other.consumer == terms.supplier {
                SlaChain {
                    aggregator: terms.supplier.clone(),
                    client_sla: terms.clone(),
                    server_sla: other.clone(),
                }
            } else {
                continue;
            };
            for p in &terms.pricing {
                if chain.client_sla.covers(&p.model_id) && chain.server_sla.covers(&p.model_id) {
                    chain.check_margin(&p.model_id)?;
                }
            }
        }
        Ok(())
    }

    /// The SLA chain linking `client` to `server` for `model_id` at `tick`, via
    /// the lowest-id aggregator that has one (lowest SLA ids within a pair).
    pub fn validate_chain(
        &self,
        client: &AccountId,
        server: &AccountId,
        model_id: &str,
        tick: u64,
    ) -> Option<SlaChain> {
        let mut best: Option<SlaChain> = None;
        for client_sla in self.live(tick).filter(|t| &t.consumer == client && t.covers(model_id)) {
            let agg = &client_sla.supplier;
            if best.as_ref().is_some_and(|b| &b.aggregator <= agg) {
                continue;
            }
            let server_sla = self
                .live(tick)
                .find(|t| &t.consumer == agg && &t.supplier == server && t.covers(model_id));
            if let Some(server_sla) = server_sla {
                let chain = SlaChain {
                    aggregator: agg.clone(),
                    client_sla: client_sla.clone(),
                    server_sla: server_sla.clone(),
                };
                if chain.check_margin(model_id).is_ok() {
                    best = Some(chain);
                }
            }
        }
        best
    }
}

/// SLA documents in TOML: a list of `[[sla]]` tables with the fields of
/// [`SlaTerms`] and `[[sla.pricing]]` sub-tables.
pub fn parse_sla_documents(text: &str) -> Result<Vec<SlaTerms>, SlaError> {
    #[derive(Deserialize)]
    struct Doc {
        sla: Vec<SlaTerms>,
    }
    let doc: Doc = toml::from_str(text).map_err(|e| SlaError::Document(e.to_string()))?;
    for t in &doc.sla {
        t.validate()?;
    }
    Ok(doc.sla)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terms(id: &str, consumer: &str, supplier: &str, price: Tokens, fee_bps: u32) -> SlaTerms {
        SlaTerms {
            sla_id: id.into(),
            consumer: consumer.into(),
            supplier: supplier.into(),
            pricing: vec![ModelPricing::flat("m1", 128, 128, price)],
            challenger_fee_bps: FeeFraction(fee_bps),
            valid_from: 0,
            valid_until: 100,
        }
    }

    #[test]
    fn price_lookup_examples() {
        let t = terms("s", "c", "a", 10, 0);
        assert_eq!(price_of(&t, "m1", 64, 100), Ok(10));
        assert_eq!(price_of(&t, "m9", 1, 1), Err(SlaError::UnknownModel("m9".into())));
        assert!(matches!(
            price_of(&t, "m1", 129, 1),
            Err(SlaError::SizeOutOfRange { axis: "input", .. })
        ));
    }

    #[test]
    fn bucket_edges_are_closed_above() {
        let p = ModelPricing {
            model_id: "m".into(),
            input_bounds: vec![4, 8, 16],
            output_bounds: vec![2, 5],
            prices: vec![vec![1, 2], vec![3, 4], vec![5, 6]],
        };
        p.check().unwrap();
        // Exhaustive: bucket index is the count of bounds strictly below the size.
        for i in 0..=16u32 {
            for o in 0..=5u32 {
                let bi = [4, 8, 16].iter().filter(|b| **b < i).count();
                let bo = [2, 5].iter().filter(|b| **b < o).count();
                assert_eq!(p.price(i, o).unwrap(), p.prices[bi][bo], "({i}, {o})");
            }
        }
        assert!(p.price(17, 0).is_err());
        assert!(p.price(0, 6).is_err());
    }

    #[test]
    fn split_examples() {
        let chain = |client, server, bps| SlaChain {
            aggregator: "a".into(),
            client_sla: terms("c", "client", "a", client, bps),
            server_sla: terms("s", "a", "server", server, 0),
        };
        assert_eq!(
            chain(10, 7, 1000).split_payment("m1", 1, 1).unwrap(),
            PaymentSplit {
                client_pays: 10,
                server_gets: 7,
                aggregator_margin: 2,
                challenger_fee: 1
            }
        );
        assert_eq!(chain(10, 7, 0).split_payment("m1", 1, 1).unwrap().aggregator_margin, 3);
        assert!(matches!(
            chain(10, 10, 1000).split_payment("m1", 1, 1),
            Err(SlaError::NegativeMargin { .. })
        ));
    }

    #[test]
    fn fee_rounds_down() {
        assert_eq!(FeeFraction(1000).of(19), 1);
        assert_eq!(FeeFraction(3333).of(3), 0);
        assert!(FeeFraction::from_bps(10_000).is_err());
    }

    #[test]
    fn chain_picks_lowest_aggregator() {
        let mut reg = SlaRegistry::new();
        for agg in ["a2", "a1"] {
            reg.insert(terms(&format!("c-{agg}"), "client", agg, 10, 0)).unwrap();
            reg.insert(terms(&format!("s-{agg}"), agg, "server", 7, 0)).unwrap();
        }
        let chain = reg.validate_chain(&"client".into(), &"server".into(), "m1", 5).unwrap();
        assert_eq!(chain.aggregator, AccountId::from("a1"));
        assert!(reg.validate_chain(&"client".into(), &"server".into(), "m2", 5).is_none());
    }

    #[test]
    fn expired_or_deregistered_sla_breaks_chain() {
        let mut reg = SlaRegistry::new();
        reg.insert(terms("c", "client", "a", 10, 0)).unwrap();
        reg.insert(terms("s", "a", "server", 7, 0)).unwrap();
        assert!(reg.validate_chain(&"client".into(), &"server".into(), "m1", 100).is_some());
        assert!(reg.validate_chain(&"client".into(), &"server".into(), "m1", 101).is_none());
        reg.deactivate("s").unwrap();
        assert!(reg.validate_chain(&"client".into(), &"server".into(), "m1", 5).is_none());
    }

    #[test]
    fn margin_checked_when_registering() {
        let mut reg = SlaRegistry::new();
        reg.insert(terms("c", "client", "a", 10, 1000)).unwrap();
        assert!(matches!(
            reg.check_new_margins(&terms("s", "a", "server", 10, 0), 0),
            Err(SlaError::NegativeMargin { .. })
        ));
        assert!(reg.check_new_margins(&terms("s", "a", "server", 9, 0), 0).is_ok());
    }

    #[test]
    fn signatures_cover_terms() {
        let (c, s) = (Keypair::derive("client"), Keypair::derive("a"));
        let signed = terms("x", "client", "a", 10, 0).sign(&c, &s);
        assert!(signed.verify(&c.public(), &s.public()).is_ok());
        let mut forged = signed.clone();
        forged.terms.pricing[0].prices[0][0] = 1;
        assert_eq!(
            forged.verify(&c.public(), &s.public()),
            Err(SlaError::BadSignature("client".into()))
        );
    }

    #[test]
    fn parses_sla_document() {
        let text = r#"
[[sla]]
sla_id = "c1"
consumer = "client-1"
supplier = "agg-1"
challenger_fee_bps = 1000
valid_from = 0
valid_until = 1000

[[sla.pricing]]
model_id = "m1"
input_bounds = [128]
output_bounds = [64, 128]
prices = [[8, 10]]
"#;
        let docs = parse_sla_documents(text).unwrap();
        assert_eq!(price_of(&docs[0], "m1", 3, 100), Ok(10));
        assert!(parse_sla_documents(&text.replace("[[8, 10]]", "[[8]]")).is_err());
    }
}
