//! Trigger-set watermarks and ownership judging.
//!
//! An owner derives a secret trigger set (inputs paired with arbitrary
//! outputs), embeds it as an override table at the model's output node and
//! commits `H(trigger set ‖ salt)` on the ledger. In an ownership dispute each
//! claimant reveals its set and salt; the judge checks the reveal against the
//! commitment, measures how many triggers the model under test reproduces, and
//! awards the model to the earliest committed claimant above the threshold.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Digest, Encoder};
use crate::dag::{execute, validate_dag, DagError, DagModel, OutputOverride, Tensor, PRIME};
use crate::ledger::{AccountId, ContractId, EventKind, Ledger, LedgerError, Transaction};

pub const DEFAULT_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WatermarkError {
    #[error("trigger set must have at least one pair")]
    EmptyTriggerSet,
    #[error("trigger inputs are not pairwise distinct")]
    DuplicateTrigger,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{registrant} already committed this digest for {model_id}")]
    Duplicate { registrant: AccountId, model_id: String },
    #[error("{registrant} has no commitment for {model_id}")]
    UnknownCommitment { registrant: AccountId, model_id: String },
    #[error("threshold must be in (0, 1]")]
    InvalidThreshold,
    #[error("revealed trigger set: {0}")]
    File(String),
    #[error(transparent)]
    Dag(#[from] DagError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerPair {
    pub input: Tensor,
    pub output: Tensor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TriggerPair>", into = "Vec<TriggerPair>")]
pub struct TriggerSet(Vec<TriggerPair>);

impl TryFrom<Vec<TriggerPair>> for TriggerSet {
    type Error = WatermarkError;

    fn try_from(pairs: Vec<TriggerPair>) -> Result<Self, Self::Error> {
        TriggerSet::new(pairs)
    }
}

impl From<TriggerSet> for Vec<TriggerPair> {
    fn from(ts: TriggerSet) -> Self {
        ts.0
    }
}

impl TriggerSet {
    pub fn new(pairs: Vec<TriggerPair>) -> Result<TriggerSet, WatermarkError> {
        if pairs.is_empty() {
            return Err(WatermarkError::EmptyTriggerSet);
        }
        let distinct: BTreeSet<&Tensor> = pairs.iter().map(|p| &p.input).collect();
        if distinct.len() != pairs.len() {
            return Err(WatermarkError::DuplicateTrigger);
        }
        Ok(TriggerSet(pairs))
    }

    pub fn pairs(&self) -> &[TriggerPair] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::tagged("sakshi/trigger-set/v1");
        e.u32(self.0.len() as u32);
        for p in &self.0 {
            p.input.encode_into(&mut e);
            p.output.encode_into(&mut e);
        }
        e.finish()
    }
}

/// Derives `m` trigger pairs from the owner's secret. Outputs come from the
/// same seeded stream and are independent of any model.
pub fn generate_trigger_set(
    owner_secret: &[u8],
    m: usize,
    input_dim: usize,
    output_dim: usize,
) -> Result<TriggerSet, WatermarkError> {
    if m == 0 {
        return Err(WatermarkError::EmptyTriggerSet);
    }
    if input_dim == 0 || output_dim == 0 {
        return Err(WatermarkError::DimensionMismatch("zero-width tensor".into()));
    }
    let mut e = Encoder::tagged("sakshi/trigger-seed/v1");
    e.bytes(owner_secret);
    let mut rng = ChaCha8Rng::from_seed(e.hash().0);
    let mut draw = |dim: usize| -> Tensor {
        Tensor::new((0..dim).map(|_| rng.gen_range(0..PRIME)).collect()).expect("non-empty")
    };
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(m);
    while pairs.len() < m {
        let input = draw(input_dim);
        let output = draw(output_dim);
        if seen.insert(input.clone()) {
            pairs.push(TriggerPair { input, output });
        }
    }
    TriggerSet::new(pairs)
}

/// Adds the trigger set as output overrides. Non-trigger inputs are
/// unaffected.
pub fn embed(model: &DagModel, ts: &TriggerSet) -> Result<DagModel, WatermarkError> {
    validate_dag(model)?;
    let probe = execute(model, &ts.pairs()[0].input).map_err(|e| match e {
        DagError::DimensionMismatch(m) => WatermarkError::DimensionMismatch(m),
        other => other.into(),
    })?;
    let out_dim = probe.final_output.dim();
    let mut marked = model.clone();
    for p in ts.pairs() {
        if p.input.dim() != model.input_dim as usize {
            return Err(WatermarkError::DimensionMismatch(format!(
                "trigger input has {} values, model takes {}",
                p.input.dim(),
                model.input_dim
            )));
        }
        if p.output.dim() != out_dim {
            return Err(WatermarkError::DimensionMismatch(format!(
                "trigger output has {} values, model emits {out_dim}",
                p.output.dim()
            )));
        }
        marked.overrides.retain(|o| o.input != p.input);
        marked.overrides.push(OutputOverride {
            input: p.input.clone(),
            output: p.output.clone(),
        });
    }
    Ok(marked)
}

/// `H(canonical trigger set ‖ salt)`.
pub fn commitment_digest(ts: &TriggerSet, salt: &[u8]) -> Digest {
    let mut e = Encoder::tagged("sakshi/watermark/v1");
    e.bytes(&ts.canonical_bytes()).bytes(salt);
    e.hash()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatermarkCommitment {
    pub id: ContractId,
    pub model_id: String,
    pub digest: Digest,
    pub registrant: AccountId,
    pub timestamp: u64,
}

pub(crate) fn apply_commit(
    ledger: &mut Ledger,
    registrant: AccountId,
    model_id: String,
    digest: Digest,
) -> Result<ContractId, LedgerError> {
    ledger.require_account(&registrant)?;
    if ledger
        .watermarks
        .iter()
        .any(|c| c.registrant == registrant && c.model_id == model_id && c.digest == digest)
    {
        return Err(WatermarkError::Duplicate {
            registrant,
            model_id,
        }
        .into());
    }
    let id = ledger.new_contract();
    let commitment = WatermarkCommitment {
        id,
        model_id,
        digest,
        registrant,
        timestamp: ledger.clock(),
    };
    ledger.watermarks.push(commitment.clone());
    ledger.emit(id.to_string(), EventKind::WatermarkCommitted { commitment });
    Ok(id)
}

/// Posts the commitment for `ts` and returns the on-ledger record. The salt
/// stays with the owner.
pub fn commit_watermark(
    ledger: &mut Ledger,
    registrant: &AccountId,
    model_id: &str,
    ts: &TriggerSet,
    salt: &[u8],
) -> Result<WatermarkCommitment, LedgerError> {
    ledger.post(Transaction::CommitWatermark {
        registrant: registrant.clone(),
        model_id: model_id.to_string(),
        digest: commitment_digest(ts, salt),
    })?;
    Ok(ledger.watermarks().last().expect("just committed").clone())
}

/// A claimant's reveal. Also the on-disk format (JSON), with the salt in hex.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnershipClaim {
    pub registrant: AccountId,
    pub model_id: String,
    #[serde(with = "hex_bytes")]
    pub salt: Vec<u8>,
    pub trigger_set: TriggerSet,
}

impl OwnershipClaim {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("claim serializes")
    }

    pub fn from_json(text: &str) -> Result<OwnershipClaim, WatermarkError> {
        serde_json::from_str(text).map_err(|e| WatermarkError::File(e.to_string()))
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClaimStatus {
    Qualified,
    BelowThreshold,
    /// The reveal does not hash to any of the claimant's commitments.
    DigestMismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimAssessment {
    pub registrant: AccountId,
    pub status: ClaimStatus,
    pub matches: usize,
    pub triggers: usize,
    pub match_fraction: f64,
    /// Timestamp of the commitment the reveal opened.
    pub committed_at: Option<u64>,
    pub commitment: Option<ContractId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RulingReason {
    EarliestQualifyingCommitment,
    NoQualifyingClaim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OwnershipRuling {
    pub model_id: String,
    pub winner: Option<AccountId>,
    pub reason: RulingReason,
    /// One entry per claim, sorted by registrant.
    pub claims: Vec<ClaimAssessment>,
}

/// Fraction of triggers whose input the model maps to the expected output.
/// Evaluation errors count as misses.
pub fn match_count(model_under_test: &dyn Fn(&Tensor) -> Result<Tensor, DagError>, ts: &TriggerSet) -> usize {
    ts.pairs()
        .iter()
        .filter(|p| model_under_test(&p.input).is_ok_and(|out| out == p.output))
        .count()
}

/// Query access to a concrete model.
pub fn model_oracle(model: &DagModel) -> impl Fn(&Tensor) -> Result<Tensor, DagError> + '_ {
    move |x| execute(model, x).map(|t| t.final_output)
}

/// Rules on competing ownership claims for one model.
pub fn judge_ownership(
    ledger: &Ledger,
    model_id: &str,
    model_under_test: &dyn Fn(&Tensor) -> Result<Tensor, DagError>,
    claims: &[OwnershipClaim],
    threshold: f64,
) -> Result<OwnershipRuling, WatermarkError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(WatermarkError::InvalidThreshold);
    }
    let mut assessed = Vec::with_capacity(claims.len());
    for claim in claims {
        let mine: Vec<&WatermarkCommitment> = ledger
            .watermarks()
            .iter()
            .filter(|c| c.registrant == claim.registrant && c.model_id == model_id)
            .collect();
        if mine.is_empty() || claim.model_id != model_id {
            return Err(WatermarkError::UnknownCommitment {
                registrant: claim.registrant.clone(),
                model_id: model_id.to_string(),
            });
        }
        let digest = commitment_digest(&claim.trigger_set, &claim.salt);
        let opened = mine
            .iter()
            .filter(|c| c.digest == digest)
            .min_by_key(|c| (c.timestamp, c.id));
        let triggers = claim.trigger_set.len();
        let (status, matches) = match opened {
            None => (ClaimStatus::DigestMismatch, 0),
            Some(_) => {
                let matches = match_count(model_under_test, &claim.trigger_set);
                let fraction = matches as f64 / triggers as f64;
                if fraction >= threshold {
                    (ClaimStatus::Qualified, matches)
                } else {
                    (ClaimStatus::BelowThreshold, matches)
                }
            }
        };
        assessed.push(ClaimAssessment {
            registrant: claim.registrant.clone(),
            status,
            matches,
            triggers,
            match_fraction: matches as f64 / triggers as f64,
            committed_at: opened.map(|c| c.timestamp),
            commitment: opened.map(|c| c.id),
        });
    }
    assessed.sort_by(|a, b| {
        (&a.registrant, a.commitment, a.matches).cmp(&(&b.registrant, b.commitment, b.matches))
    });
    let winner = assessed
        .iter()
        .filter(|a| a.status == ClaimStatus::Qualified)
        .min_by_key(|a| (a.committed_at, a.commitment))
        .map(|a| a.registrant.clone());
    Ok(OwnershipRuling {
        model_id: model_id.to_string(),
        reason: if winner.is_some() {
            RulingReason::EarliestQualifyingCommitment
        } else {
            RulingReason::NoQualifyingClaim
        },
        winner,
        claims: assessed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Keypair;
    use crate::dag::{chain, LayerId, LayerSpec};
    use crate::ledger::LedgerConfig;

    fn model() -> DagModel {
        chain("m", 4, 3, 9)
    }

    fn ledger(names: &[&str]) -> Ledger {
        let mut l = Ledger::new(LedgerConfig::default());
        for n in names {
            l.create_account((*n).into(), Keypair::derive(n).public(), 0).unwrap();
        }
        l
    }

    #[test]
    fn generation_is_deterministic_and_secret_dependent() {
        let a = generate_trigger_set(b"owner", 32, 3, 3).unwrap();
        assert_eq!(a, generate_trigger_set(b"owner", 32, 3, 3).unwrap());
        let b = generate_trigger_set(b"other", 32, 3, 3).unwrap();
        let ins: BTreeSet<_> = a.pairs().iter().map(|p| &p.input).collect();
        assert!(b.pairs().iter().all(|p| !ins.contains(&p.input)));
        assert_eq!(generate_trigger_set(b"owner", 0, 3, 3), Err(WatermarkError::EmptyTriggerSet));
    }

    #[test]
    fn embedding_overrides_only_triggers() {
        let m = model();
        let ts = generate_trigger_set(b"owner", 16, 3, 3).unwrap();
        let marked = embed(&m, &ts).unwrap();
        for p in ts.pairs() {
            assert_eq!(execute(&marked, &p.input).unwrap().final_output, p.output);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..64 {
            let x = Tensor::new((0..3).map(|_| rng.gen_range(0..PRIME)).collect()).unwrap();
            assert_eq!(
                execute(&marked, &x).unwrap().final_output,
                execute(&m, &x).unwrap().final_output
            );
        }
        let wrong = generate_trigger_set(b"owner", 2, 4, 3).unwrap();
        assert!(matches!(embed(&m, &wrong), Err(WatermarkError::DimensionMismatch(_))));
    }

    #[test]
    fn triggers_survive_perturbing_hidden_layer() {
        let ts = generate_trigger_set(b"owner", 8, 3, 3).unwrap();
        let mut marked = embed(&model(), &ts).unwrap();
        if let LayerSpec::AffineMod { bias, .. } = &mut marked.nodes[LayerId(1).idx()].spec {
            bias[0] = (bias[0] + 1) % PRIME;
        }
        assert_eq!(match_count(&model_oracle(&marked), &ts), 8);
    }

    #[test]
    fn duplicate_commitment_rejected() {
        let mut l = ledger(&["owner"]);
        let ts = generate_trigger_set(b"owner", 4, 3, 3).unwrap();
        let c = commit_watermark(&mut l, &"owner".into(), "m", &ts, b"salt").unwrap();
        assert_eq!(c.timestamp, 0);
        assert_eq!(c.digest, commitment_digest(&ts, b"salt"));
        assert!(matches!(
            commit_watermark(&mut l, &"owner".into(), "m", &ts, b"salt"),
            Err(LedgerError::Watermark(WatermarkError::Duplicate { .. }))
        ));
    }

    fn claim(who: &str, ts: &TriggerSet, salt: &[u8]) -> OwnershipClaim {
        OwnershipClaim {
            registrant: who.into(),
            model_id: "m".into(),
            salt: salt.to_vec(),
            trigger_set: ts.clone(),
        }
    }

    #[test]
    fn owner_beats_copier_and_fabricator() {
        let mut l = ledger(&["owner", "copier", "faker"]);
        let ts = generate_trigger_set(b"owner", 32, 3, 3).unwrap();
        let fake = generate_trigger_set(b"faker", 32, 3, 3).unwrap();
        let marked = embed(&model(), &ts).unwrap();
        commit_watermark(&mut l, &"owner".into(), "m", &ts, b"s1").unwrap();
        l.advance(4).unwrap();
        commit_watermark(&mut l, &"faker".into(), "m", &fake, b"s2").unwrap();
        l.advance(4).unwrap();
        commit_watermark(&mut l, &"copier".into(), "m", &ts, b"s3").unwrap();
        let claims = vec![claim("copier", &ts, b"s3"), claim("faker", &fake, b"s2"), claim("owner", &ts, b"s1")];
        let r = judge_ownership(&l, "m", &model_oracle(&marked), &claims, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(r.winner, Some("owner".into()));
        let faker = r.claims.iter().find(|c| c.registrant.as_str() == "faker").unwrap();
        assert_eq!(faker.matches, 0);
        let mut rev = claims.clone();
        rev.reverse();
        assert_eq!(judge_ownership(&l, "m", &model_oracle(&marked), &rev, DEFAULT_THRESHOLD).unwrap(), r);
    }

    #[test]
    fn tampered_reveal_disqualified() {
        let mut l = ledger(&["owner"]);
        let ts = generate_trigger_set(b"owner", 8, 3, 3).unwrap();
        let marked = embed(&model(), &ts).unwrap();
        commit_watermark(&mut l, &"owner".into(), "m", &ts, b"s").unwrap();
        let r = judge_ownership(&l, "m", &model_oracle(&marked), &[claim("owner", &ts, b"t")], 0.9).unwrap();
        assert_eq!(r.claims[0].status, ClaimStatus::DigestMismatch);
        assert_eq!(r.winner, None);
    }

    #[test]
    fn unmarked_model_yields_no_winner() {
        let mut l = ledger(&["owner"]);
        let ts = generate_trigger_set(b"owner", 32, 3, 3).unwrap();
        commit_watermark(&mut l, &"owner".into(), "m", &ts, b"s").unwrap();
        let r = judge_ownership(&l, "m", &model_oracle(&model()), &[claim("owner", &ts, b"s")], 0.9).unwrap();
        assert_eq!(r.claims[0].matches, 0);
        assert_eq!(r.reason, RulingReason::NoQualifyingClaim);
    }

    #[test]
    fn claim_without_commitment_is_an_error() {
        let l = ledger(&["owner"]);
        let ts = generate_trigger_set(b"owner", 2, 3, 3).unwrap();
        assert!(matches!(
            judge_ownership(&l, "m", &model_oracle(&model()), &[claim("owner", &ts, b"s")], 0.9),
            Err(WatermarkError::UnknownCommitment { .. })
        ));
    }

    #[test]
    fn claim_file_round_trip() {
        let ts = generate_trigger_set(b"owner", 3, 3, 3).unwrap();
        let c = claim("owner", &ts, b"\x00\xff");
        assert_eq!(OwnershipClaim::from_json(&c.to_json()).unwrap(), c);
    }
}
