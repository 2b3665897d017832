//! Scenario files: who takes part, how they behave, which models and SLAs
//! exist, and when clients send requests.
//!
//! A scenario is a TOML document; see `crates/core/scenarios/` for the bundled
//! ones and the README for a field reference.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{chain, execute, inception_block, load_model, random_dag, DagError, DagModel, RandomDagConfig, Tensor};
use crate::ledger::{AccountId, LedgerConfig};
use crate::router::RouterConfig;
use crate::sla::{SlaError, SlaTerms, Tokens};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("unknown {kind} {id:?} referenced by {by}")]
    UnknownReference { kind: &'static str, id: String, by: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("model {id}: {source}")]
    Model { id: String, source: DagError },
    #[error(transparent)]
    Sla(#[from] SlaError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Client,
    Server,
    Aggregator,
    Challenger,
    Judge,
    Attestor,
    #[default]
    Observer,
}

/// How an actor behaves. Every role has an honest default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BehaviorProfile {
    #[default]
    Honest,
    HonestServer,
    /// Perturbs the output of `node` with the given probability per request.
    FaultyServer { node: u32, probability: f64 },
    /// A faulty server that also opens a different tensor when it has to
    /// reveal during a dispute.
    EquivocatingParty { node: u32, probability: f64 },
    HonestClient,
    /// Pays for `after` units, then stops paying.
    NonpayingClient { after: u32 },
    /// Pays for `after` units, then tries to close its channel with a second,
    /// cheaper micropayment signed at the last nonce.
    DoubleSigningClient { after: u32 },
    /// Recomputes a sampled fraction of responses and disputes mismatches.
    HonestChallenger { sampling_rate: f64 },
    /// Disputes a fraction of responses with a fabricated trace.
    FalseChallenger { rate: f64 },
}

impl BehaviorProfile {
    pub fn is_honest(&self) -> bool {
        matches!(
            self,
            BehaviorProfile::Honest
                | BehaviorProfile::HonestServer
                | BehaviorProfile::HonestClient
                | BehaviorProfile::HonestChallenger { .. }
        )
    }

    fn fits(&self, role: Role) -> bool {
        use BehaviorProfile as B;
        match self {
            B::Honest => true,
            B::HonestServer | B::FaultyServer { .. } | B::EquivocatingParty { .. } => role == Role::Server,
            B::HonestClient | B::NonpayingClient { .. } | B::DoubleSigningClient { .. } => role == Role::Client,
            B::HonestChallenger { .. } | B::FalseChallenger { .. } => role == Role::Challenger,
        }
    }

    fn check(&self) -> Result<(), String> {
        let unit = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(format!("{name} must be within [0, 1], got {p}"))
            }
        };
        match self {
            BehaviorProfile::FaultyServer { probability, .. }
            | BehaviorProfile::EquivocatingParty { probability, .. } => unit("probability", *probability),
            BehaviorProfile::HonestChallenger { sampling_rate } => unit("sampling_rate", *sampling_rate),
            BehaviorProfile::FalseChallenger { rate } => unit("rate", *rate),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorSpec {
    pub id: AccountId,
    pub role: Role,
    #[serde(default)]
    pub balance: Tokens,
    #[serde(default)]
    pub profile: BehaviorProfile,
    /// Clients and servers: the router they use.
    #[serde(default)]
    pub router: Option<String>,
    /// Clients: escrow locked in each client channel.
    #[serde(default)]
    pub escrow: Tokens,
    /// Aggregators: escrow locked in each server channel.
    #[serde(default)]
    pub server_escrow: Tokens,
    /// Servers.
    #[serde(default)]
    pub hosts: Vec<String>,
    #[serde(default = "one")]
    pub capacity: u32,
    #[serde(default)]
    pub latency: u32,
    #[serde(default)]
    pub region: String,
    /// Servers: whether an attestor vouches for `region` at setup.
    #[serde(default)]
    pub attested: bool,
    #[serde(default = "full")]
    pub availability_bps: u32,
}

fn one() -> u32 {
    1
}

fn full() -> u32 {
    10_000
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    #[default]
    Chain,
    Inception,
    Random,
    File,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub id: String,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default = "eight")]
    pub nodes: usize,
    #[serde(default = "two")]
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "three")]
    pub max_parents: usize,
    /// For `topology = "file"`, relative to the scenario file.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn eight() -> usize {
    8
}
fn two() -> usize {
    2
}
fn three() -> usize {
    3
}

impl ModelSpec {
    pub fn build(&self, base: Option<&Path>) -> Result<DagModel, ScenarioError> {
        let wrap = |source| ScenarioError::Model {
            id: self.id.clone(),
            source,
        };
        let mut model = match self.topology {
            Topology::Chain => chain(&self.id, self.nodes, self.dim, self.seed),
            Topology::Inception => inception_block(),
            Topology::Random => random_dag(
                &self.id,
                RandomDagConfig {
                    nodes: self.nodes,
                    dim: self.dim,
                    max_parents: self.max_parents,
                },
                &mut ChaCha8Rng::seed_from_u64(self.seed),
            ),
            Topology::File => {
                let rel = self
                    .path
                    .as_ref()
                    .ok_or_else(|| ScenarioError::Invalid(format!("model {} needs a path", self.id)))?;
                let path = match base {
                    Some(b) if rel.is_relative() => b.join(rel),
                    _ => rel.clone(),
                };
                load_model(&path).map_err(wrap)?
            }
        };
        model.model_id = self.id.clone();
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterSpec {
    pub id: String,
    #[serde(default)]
    pub weights: RouterConfig,
}

/// A run of `count` requests from one client, `interval` ticks apart.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub client: AccountId,
    pub model: String,
    #[serde(default = "one_u64")]
    pub start: u64,
    #[serde(default = "one")]
    pub count: u32,
    #[serde(default = "one_u64")]
    pub interval: u64,
    #[serde(default)]
    pub region: Option<String>,
    #[serde(default)]
    pub max_latency: Option<u32>,
    #[serde(default)]
    pub uptime: Option<u32>,
}

fn one_u64() -> u64 {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RivalKind {
    /// Commits the owner's trigger set under its own name.
    Copier,
    /// Commits a trigger set of its own making.
    Fabricator,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RivalSpec {
    pub id: AccountId,
    pub kind: RivalKind,
    pub commit_tick: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OwnershipSpec {
    pub model: String,
    pub owner: AccountId,
    pub judge: AccountId,
    #[serde(default = "thirty_two")]
    pub triggers: usize,
    pub owner_commit_tick: u64,
    pub judge_tick: u64,
    #[serde(default)]
    pub rivals: Vec<RivalSpec>,
}

fn thirty_two() -> usize {
    32
}

/// When servers post output commitments relative to payment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DaPolicy {
    Never,
    BeforePayment,
    AfterPayment,
    /// Lazily, only once a challenger opens a dispute.
    #[default]
    OnDispute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerSpec {
    #[serde(default = "five")]
    pub dispute_window: u64,
    #[serde(default = "three_u64")]
    pub dispute_fee: Tokens,
    /// Paid by the loser of an inference dispute to the winner.
    #[serde(default = "twenty")]
    pub inference_dispute_fee: Tokens,
}

fn five() -> u64 {
    5
}
fn three_u64() -> u64 {
    3
}
fn twenty() -> u64 {
    20
}

impl Default for LedgerSpec {
    fn default() -> Self {
        LedgerSpec {
            dispute_window: five(),
            dispute_fee: three_u64(),
            inference_dispute_fee: twenty(),
        }
    }
}

impl LedgerSpec {
    pub fn config(&self) -> LedgerConfig {
        LedgerConfig {
            dispute_window: self.dispute_window,
            dispute_fee: self.dispute_fee,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Mandatory: every run is a function of the scenario and this seed.
    pub seed: u64,
    #[serde(default)]
    pub ledger: LedgerSpec,
    #[serde(default)]
    pub post_da: DaPolicy,
    #[serde(default = "theta")]
    pub theta: f64,
    #[serde(default)]
    pub routers: Vec<RouterSpec>,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub actors: Vec<ActorSpec>,
    #[serde(default)]
    pub slas: Vec<SlaTerms>,
    #[serde(default)]
    pub schedule: Vec<ScheduleEntry>,
    #[serde(default)]
    pub ownership: Option<OwnershipSpec>,
    /// Directory relative model paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn theta() -> f64 {
    crate::watermark::DEFAULT_THRESHOLD
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.display())))?;
        let mut s: Scenario = toml::from_str(&text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        s.validate()?;
        Ok(s)
    }

    pub fn actor(&self, id: &AccountId) -> Option<&ActorSpec> {
        self.actors.iter().find(|a| &a.id == id)
    }

    pub fn with_seed(mut self, seed: u64) -> Scenario {
        self.seed = seed;
        self
    }

    /// Builds every model, keyed by id.
    pub fn build_models(&self) -> Result<BTreeMap<String, DagModel>, ScenarioError> {
        let mut out = BTreeMap::new();
        for m in &self.models {
            let model = m.build(self.base_dir.as_deref())?;
            execute(&model, &Tensor::zeros(model.input_dim as usize)).map_err(|source| ScenarioError::Model {
                id: m.id.clone(),
                source,
            })?;
            out.insert(m.id.clone(), model);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let unknown = |kind: &'static str, id: &str, by: &str| ScenarioError::UnknownReference {
            kind,
            id: id.to_string(),
            by: by.to_string(),
        };
        let mut ids = BTreeSet::new();
        for a in &self.actors {
            if !ids.insert(a.id.clone()) {
                return Err(ScenarioError::Invalid(format!("actor {} defined twice", a.id)));
            }
            if !a.profile.fits(a.role) {
                return Err(ScenarioError::Invalid(format!(
                    "profile {:?} does not fit role {:?} of {}",
                    a.profile, a.role, a.id
                )));
            }
            a.profile.check().map_err(|e| ScenarioError::Invalid(format!("{}: {e}", a.id)))?;
        }
        let models: BTreeSet<&str> = self.models.iter().map(|m| m.id.as_str()).collect();
        if models.len() != self.models.len() {
            return Err(ScenarioError::Invalid("duplicate model id".into()));
        }
        let routers: BTreeSet<&str> = self.routers.iter().map(|r| r.id.as_str()).collect();
        let role_of = |id: &AccountId| self.actor(id).map(|a| a.role);
        for a in &self.actors {
            if matches!(a.role, Role::Client | Role::Server) {
                let r = a
                    .router
                    .as_deref()
                    .ok_or_else(|| ScenarioError::Invalid(format!("{} needs a router", a.id)))?;
                if !routers.contains(r) {
                    return Err(unknown("router", r, a.id.as_str()));
                }
            }
            for m in &a.hosts {
                if !models.contains(m.as_str()) {
                    return Err(unknown("model", m, a.id.as_str()));
                }
            }
            if a.role == Role::Server && a.capacity == 0 {
                return Err(ScenarioError::Invalid(format!("{} has zero capacity", a.id)));
            }
        }
        if self.actors.iter().any(|a| a.attested) && !self.actors.iter().any(|a| a.role == Role::Attestor) {
            return Err(ScenarioError::Invalid("attested servers need an attestor actor".into()));
        }
        let mut sla_ids = BTreeSet::new();
        for t in &self.slas {
            t.validate()?;
            if !sla_ids.insert(t.sla_id.as_str()) {
                return Err(ScenarioError::Invalid(format!("SLA {} defined twice", t.sla_id)));
            }
            for party in [&t.consumer, &t.supplier] {
                if role_of(party).is_none() {
                    return Err(unknown("actor", party.as_str(), &t.sla_id));
                }
            }
            for p in &t.pricing {
                if !models.contains(p.model_id.as_str()) {
                    return Err(unknown("model", &p.model_id, &t.sla_id));
                }
            }
        }
        for (i, s) in self.schedule.iter().enumerate() {
            let by = format!("schedule entry {i}");
            if role_of(&s.client) != Some(Role::Client) {
                return Err(unknown("client", s.client.as_str(), &by));
            }
            if !models.contains(s.model.as_str()) {
                return Err(unknown("model", &s.model, &by));
            }
            if s.start == 0 || s.interval == 0 {
                return Err(ScenarioError::Invalid(format!("{by}: start and interval must be at least 1")));
            }
        }
        if let Some(o) = &self.ownership {
            if !models.contains(o.model.as_str()) {
                return Err(unknown("model", &o.model, "ownership"));
            }
            for id in std::iter::once(&o.owner)
                .chain(std::iter::once(&o.judge))
                .chain(o.rivals.iter().map(|r| &r.id))
            {
                if role_of(id).is_none() {
                    return Err(unknown("actor", id.as_str(), "ownership"));
                }
            }
            if o.triggers == 0 {
                return Err(ScenarioError::Invalid("ownership needs at least one trigger".into()));
            }
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(ScenarioError::Invalid("theta must be in (0, 1]".into()));
        }
        Ok(())
    }
}
