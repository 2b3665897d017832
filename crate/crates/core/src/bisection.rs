//! Interactive bisection over a model DAG.
//!
//! Two parties disagree on the output digest of one inference. The referee
//! repeatedly asks both for the digest of a single intermediate node, chosen
//! greedily so that either answer eliminates as many candidates as possible:
//! an agreeing answer prunes the node and its ancestors, a disagreeing one
//! keeps only the node and its ancestors. Once one candidate `z` is left and
//! every parent of `z` has been confirmed consistent, both parties reveal the
//! parent tensors and their output for `z`, and the referee evaluates that one
//! layer to decide who is wrong.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::Digest;
use crate::dag::{commit, DagError, DagIndex, DagModel, ExecutionTrace, LayerId, NodeSet, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BisectionError {
    #[error("both parties committed the same output; there is nothing to dispute")]
    DigestsEqual,
    #[error("{0} is not a candidate")]
    NotACandidate(LayerId),
    #[error("a single candidate is left; no further bisection query exists")]
    AlreadyIsolated,
    #[error("digest submitted for {got}, but the open query is {expected:?}")]
    WrongNode { expected: Option<LayerId>, got: LayerId },
    #[error("{party} already submitted a digest for {node}")]
    DuplicateSubmission { party: Party, node: LayerId },
    #[error("{0} has not submitted a digest for the open query")]
    MissingDigest(Party),
    #[error("operation not allowed in phase {0:?}")]
    WrongPhase(Phase),
    #[error("the divergent layer has not been isolated yet")]
    NotIsolated,
    #[error("revealed tensors match both claims; no divergence to arbitrate")]
    NoDivergence,
    #[error(transparent)]
    Dag(#[from] DagError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Party {
    /// Defends the committed output (the serving party).
    Asserter,
    /// Contests it.
    Challenger,
}

impl Party {
    pub const BOTH: [Party; 2] = [Party::Asserter, Party::Challenger];

    pub fn other(self) -> Party {
        match self {
            Party::Asserter => Party::Challenger,
            Party::Challenger => Party::Asserter,
        }
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Party::Asserter => "asserter",
            Party::Challenger => "challenger",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeStatus {
    Unknown,
    Consistent,
    Inconsistent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Querying,
    Revealing,
    Arbitrated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictReason {
    WrongLayerOutput,
    Equivocation,
    NonResponse,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub divergent_node: LayerId,
    pub faulty_party: Party,
    pub reason: VerdictReason,
}

/// What the referee did with the answers to one query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneAction {
    /// Digests agreed: the node and its ancestors left the candidate set.
    DropAncestors,
    /// Digests differed: only the node and its ancestors remain.
    KeepAncestors,
    /// A parent of the isolated node was confirmed consistent.
    ParentConfirmed,
    /// A parent of the isolated node diverged: candidates reset to its closure.
    ResetToParent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub round: u32,
    pub node: LayerId,
    pub label: String,
    pub asserter: Digest,
    pub challenger: Digest,
    pub action: PruneAction,
    pub candidates_left: usize,
}

/// Outcome of [`DisputeState::isolate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Isolation {
    /// One candidate left and all of its parents are confirmed consistent.
    Isolated(LayerId),
    /// One candidate left, but this parent of it was never queried.
    QueryParent(LayerId),
    /// More than one candidate left.
    NotYet,
}

/// Tensors a party opens at arbitration: every parent of the isolated node and
/// its own output for that node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reveal {
    pub parents: BTreeMap<LayerId, Tensor>,
    pub output: Tensor,
}

/// The referee's view of one dispute.
#[derive(Clone, Debug)]
pub struct DisputeState {
    model: DagModel,
    index: DagIndex,
    request_id: String,
    model_input: Tensor,
    statuses: Vec<NodeStatus>,
    candidates: NodeSet,
    submitted: BTreeMap<(Party, LayerId), Digest>,
    selected: Option<LayerId>,
    round: u32,
    phase: Phase,
    referee_evals: u32,
    transcript: Vec<TranscriptEntry>,
}

impl DisputeState {
    /// Opens a dispute over the output of `model` on `model_input`.
    pub fn start(
        model: DagModel,
        request_id: impl Into<String>,
        model_input: Tensor,
        asserter_output: Digest,
        challenger_output: Digest,
    ) -> Result<DisputeState, BisectionError> {
        if asserter_output == challenger_output {
            return Err(BisectionError::DigestsEqual);
        }
        let index = DagIndex::build(&model)?;
        let n = model.len();
        let mut statuses = vec![NodeStatus::Unknown; n];
        statuses[model.output_node.idx()] = NodeStatus::Inconsistent;
        let candidates = index.closure(model.output_node);
        let mut submitted = BTreeMap::new();
        submitted.insert((Party::Asserter, model.output_node), asserter_output);
        submitted.insert((Party::Challenger, model.output_node), challenger_output);
        Ok(DisputeState {
            model,
            index,
            request_id: request_id.into(),
            model_input,
            statuses,
            candidates,
            submitted,
            selected: None,
            round: 0,
            phase: Phase::Querying,
            referee_evals: 0,
            transcript: Vec::new(),
        })
    }

    pub fn model(&self) -> &DagModel {
        &self.model
    }

    pub fn request_id(&self) -> &str {
        &self.request_id
    }

    pub fn status(&self, id: LayerId) -> NodeStatus {
        self.statuses[id.idx()]
    }

    pub fn candidates(&self) -> Vec<LayerId> {
        self.candidates.iter().collect()
    }

    pub fn is_candidate(&self, id: LayerId) -> bool {
        self.candidates.contains(id)
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn selected(&self) -> Option<LayerId> {
        self.selected
    }

    /// Number of layer evaluations the referee has performed.
    pub fn referee_evals(&self) -> u32 {
        self.referee_evals
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn submitted(&self, party: Party, node: LayerId) -> Option<Digest> {
        self.submitted.get(&(party, node)).copied()
    }

    /// Candidates whose status is still unknown: the "current digraph" the
    /// greedy score is computed over.
    fn unresolved(&self) -> NodeSet {
        let mut s = self.candidates.clone();
        for id in self.candidates.iter() {
            if self.statuses[id.idx()] != NodeStatus::Unknown {
                s.remove(id);
            }
        }
        s
    }

    /// `min(a, n - a)` where `a` counts ancestors of `x` among the unresolved
    /// candidates and `n` is the number of unresolved candidates.
    pub fn score_node(&self, x: LayerId) -> Result<usize, BisectionError> {
        if x.idx() >= self.model.len() || !self.candidates.contains(x) {
            return Err(BisectionError::NotACandidate(x));
        }
        let live = self.unresolved();
        Ok(score(&self.index, &live, x))
    }

    /// Greedy choice of the next node to query. Ties go to the smallest index.
    pub fn select_query(&mut self) -> Result<LayerId, BisectionError> {
        if self.phase != Phase::Querying {
            return Err(BisectionError::WrongPhase(self.phase));
        }
        if self.candidates.len() <= 1 {
            return Err(BisectionError::AlreadyIsolated);
        }
        let live = self.unresolved();
        let mut best: Option<(usize, LayerId)> = None;
        for x in live.iter() {
            let s = score(&self.index, &live, x);
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, x));
            }
        }
        // Every candidate set with two or more members holds an unresolved node:
        // the only resolved candidate is the most recent inconsistent one.
        let (_, x) = best.expect("no unresolved candidate");
        self.selected = Some(x);
        Ok(x)
    }

    /// Where the search stands.
    pub fn isolate(&self) -> Isolation {
        if self.candidates.len() != 1 {
            return Isolation::NotYet;
        }
        let z = self.candidates.first().expect("one candidate");
        match self
            .index
            .parents(z)
            .iter()
            .find(|p| self.statuses[p.idx()] != NodeStatus::Consistent)
        {
            Some(p) => Isolation::QueryParent(*p),
            None => Isolation::Isolated(z),
        }
    }

    /// Picks the next query (bisection or parent check), or moves to the
    /// revealing phase once the divergent layer is isolated.
    pub fn next_query(&mut self) -> Result<Option<LayerId>, BisectionError> {
        if self.phase != Phase::Querying {
            return Err(BisectionError::WrongPhase(self.phase));
        }
        if let Some(x) = self.selected {
            return Ok(Some(x));
        }
        match self.isolate() {
            Isolation::NotYet => self.select_query().map(Some),
            Isolation::QueryParent(p) => {
                self.selected = Some(p);
                Ok(Some(p))
            }
            Isolation::Isolated(_) => {
                self.phase = Phase::Revealing;
                Ok(None)
            }
        }
    }

    pub fn submit_digest(
        &mut self,
        party: Party,
        node: LayerId,
        digest: Digest,
    ) -> Result<(), BisectionError> {
        if self.phase != Phase::Querying {
            return Err(BisectionError::WrongPhase(self.phase));
        }
        if self.selected != Some(node) {
            return Err(BisectionError::WrongNode {
                expected: self.selected,
                got: node,
            });
        }
        if self.submitted.contains_key(&(party, node)) {
            return Err(BisectionError::DuplicateSubmission { party, node });
        }
        self.submitted.insert((party, node), digest);
        Ok(())
    }

    /// Applies both answers to the open query.
    pub fn step(&mut self) -> Result<PruneAction, BisectionError> {
        if self.phase != Phase::Querying {
            return Err(BisectionError::WrongPhase(self.phase));
        }
        let x = self.selected.ok_or(BisectionError::NotIsolated)?;
        let a = self
            .submitted(Party::Asserter, x)
            .ok_or(BisectionError::MissingDigest(Party::Asserter))?;
        let c = self
            .submitted(Party::Challenger, x)
            .ok_or(BisectionError::MissingDigest(Party::Challenger))?;
        debug_assert_eq!(self.statuses[x.idx()], NodeStatus::Unknown);

        let in_candidates = self.candidates.contains(x);
        let closure = self.index.closure(x);
        let action = match (a == c, in_candidates) {
            (true, true) => {
                self.statuses[x.idx()] = NodeStatus::Consistent;
                self.candidates.difference_with(&closure);
                PruneAction::DropAncestors
            }
            (false, true) => {
                self.statuses[x.idx()] = NodeStatus::Inconsistent;
                self.candidates.intersect_with(&closure);
                PruneAction::KeepAncestors
            }
            (true, false) => {
                self.statuses[x.idx()] = NodeStatus::Consistent;
                PruneAction::ParentConfirmed
            }
            (false, false) => {
                // A pruned ancestor diverges after all. Restart from its
                // closure, minus everything already confirmed consistent.
                self.statuses[x.idx()] = NodeStatus::Inconsistent;
                let mut reset = closure;
                for id in reset.clone().iter() {
                    if self.statuses[id.idx()] == NodeStatus::Consistent {
                        reset.remove(id);
                    }
                }
                self.candidates = reset;
                PruneAction::ResetToParent
            }
        };
        self.round += 1;
        self.selected = None;
        self.transcript.push(TranscriptEntry {
            round: self.round,
            node: x,
            label: self.model.label(x),
            asserter: a,
            challenger: c,
            action,
            candidates_left: self.candidates.len(),
        });
        Ok(action)
    }

    /// Ends the game against a party that missed its deadline.
    pub fn timeout(&mut self, party: Party) -> Verdict {
        let node = self
            .selected
            .or_else(|| self.candidates.first())
            .unwrap_or(self.model.output_node);
        self.phase = Phase::Arbitrated;
        Verdict {
            divergent_node: node,
            faulty_party: party,
            reason: VerdictReason::NonResponse,
        }
    }

    /// Rules on the isolated layer from both parties' reveals. A missing
    /// reveal loses by non-response; a reveal contradicting an earlier digest
    /// loses by equivocation; otherwise the referee evaluates the one layer
    /// and rules against whoever's claimed output differs (the asserter if
    /// both do).
    pub fn arbitrate(
        &mut self,
        asserter: Option<&Reveal>,
        challenger: Option<&Reveal>,
    ) -> Result<Verdict, BisectionError> {
        if self.phase == Phase::Querying {
            if let Isolation::Isolated(_) = self.isolate() {
                self.phase = Phase::Revealing;
            }
        }
        if self.phase != Phase::Revealing {
            return Err(BisectionError::WrongPhase(self.phase));
        }
        let z = match self.isolate() {
            Isolation::Isolated(z) => z,
            _ => return Err(BisectionError::NotIsolated),
        };
        let parents = self.index.parents(z).to_vec();
        let verdict = |party, reason| Verdict {
            divergent_node: z,
            faulty_party: party,
            reason,
        };

        let reveals = [(Party::Asserter, asserter), (Party::Challenger, challenger)];
        for (party, reveal) in reveals {
            let complete = reveal.is_some_and(|r| parents.iter().all(|p| r.parents.contains_key(p)));
            if !complete {
                self.phase = Phase::Arbitrated;
                return Ok(verdict(party, VerdictReason::NonResponse));
            }
        }
        for (party, reveal) in reveals {
            let reveal = reveal.expect("checked above");
            let contradicts = |node: LayerId, t: &Tensor| {
                self.submitted(party, node).is_some_and(|d| d != commit(t))
            };
            let equivocated = contradicts(z, &reveal.output)
                || parents.iter().any(|p| contradicts(*p, &reveal.parents[p]));
            if equivocated {
                self.phase = Phase::Arbitrated;
                return Ok(verdict(party, VerdictReason::Equivocation));
            }
        }

        let inputs: Vec<&Tensor> = parents
            .iter()
            .map(|p| &asserter.expect("checked above").parents[p])
            .collect();
        self.referee_evals += 1;
        let recomputed = commit(&self.model.eval_node(z, &inputs, &self.model_input)?);
        let asserter_claim = self.submitted(Party::Asserter, z);
        let challenger_claim = self.submitted(Party::Challenger, z);
        self.phase = Phase::Arbitrated;
        if asserter_claim != Some(recomputed) {
            Ok(verdict(Party::Asserter, VerdictReason::WrongLayerOutput))
        } else if challenger_claim != Some(recomputed) {
            Ok(verdict(Party::Challenger, VerdictReason::WrongLayerOutput))
        } else {
            Err(BisectionError::NoDivergence)
        }
    }
}

fn score(index: &DagIndex, live: &NodeSet, x: LayerId) -> usize {
    let n = live.len();
    let a = index.ancestors(x).intersection_len(live);
    a.min(n.saturating_sub(a))
}

/// A party's side of the game. `None` from any method means the party missed
/// its deadline.
pub trait Participant {
    fn output_digest(&mut self) -> Option<Digest>;
    fn digest_at(&mut self, node: LayerId) -> Option<Digest>;
    fn reveal(&mut self, node: LayerId, parents: &[LayerId]) -> Option<Reveal>;
}

/// Answers every query truthfully from its own execution trace.
#[derive(Clone, Debug)]
pub struct TraceParticipant {
    trace: ExecutionTrace,
}

impl TraceParticipant {
    pub fn new(trace: ExecutionTrace) -> Self {
        TraceParticipant { trace }
    }

    pub fn trace(&self) -> &ExecutionTrace {
        &self.trace
    }
}

impl Participant for TraceParticipant {
    fn output_digest(&mut self) -> Option<Digest> {
        Some(self.trace.output_digest())
    }

    fn digest_at(&mut self, node: LayerId) -> Option<Digest> {
        self.trace.digest_of(node)
    }

    fn reveal(&mut self, node: LayerId, parents: &[LayerId]) -> Option<Reveal> {
        Some(Reveal {
            parents: parents
                .iter()
                .map(|p| Some((*p, self.trace.get(*p)?.clone())))
                .collect::<Option<_>>()?,
            output: self.trace.get(node)?.clone(),
        })
    }
}

/// Commits digests from its trace but opens a different tensor at the
/// isolated node when asked to reveal.
#[derive(Clone, Debug)]
pub struct EquivocatingParticipant {
    pub inner: TraceParticipant,
}

impl Participant for EquivocatingParticipant {
    fn output_digest(&mut self) -> Option<Digest> {
        self.inner.output_digest()
    }

    fn digest_at(&mut self, node: LayerId) -> Option<Digest> {
        self.inner.digest_at(node)
    }

    fn reveal(&mut self, node: LayerId, parents: &[LayerId]) -> Option<Reveal> {
        let mut r = self.inner.reveal(node, parents)?;
        let mut v = r.output.values().to_vec();
        v[0] += 1;
        r.output = Tensor::new(v).expect("non-empty");
        Some(r)
    }
}

/// Stops answering after a fixed number of digest queries.
#[derive(Clone, Debug)]
pub struct SilentParticipant<P> {
    pub inner: P,
    pub answers_left: u32,
}

impl<P: Participant> Participant for SilentParticipant<P> {
    fn output_digest(&mut self) -> Option<Digest> {
        self.inner.output_digest()
    }

    fn digest_at(&mut self, node: LayerId) -> Option<Digest> {
        if self.answers_left == 0 {
            return None;
        }
        self.answers_left -= 1;
        self.inner.digest_at(node)
    }

    fn reveal(&mut self, node: LayerId, parents: &[LayerId]) -> Option<Reveal> {
        if self.answers_left == 0 {
            return None;
        }
        self.inner.reveal(node, parents)
    }
}

/// Result of a complete game.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameOutcome {
    pub request_id: String,
    pub verdict: Verdict,
    /// Digest queries issued, parent checks included.
    pub rounds: u32,
    pub referee_evals: u32,
    pub transcript: Vec<TranscriptEntry>,
}

impl GameOutcome {
    /// Transcript as JSON lines: one record per round, then the verdict.
    pub fn transcript_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.transcript {
            out.push_str(&serde_json::to_string(e).expect("serializable"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.verdict).expect("serializable"));
        out.push('\n');
        out
    }
}

/// Drives a dispute between two participants to a verdict.
pub fn run_game(
    model: &DagModel,
    request_id: &str,
    model_input: &Tensor,
    asserter: &mut dyn Participant,
    challenger: &mut dyn Participant,
) -> Result<GameOutcome, BisectionError> {
    let a_out = asserter.output_digest();
    let c_out = challenger.output_digest();
    let (a_out, c_out) = match (a_out, c_out) {
        (Some(a), Some(c)) => (a, c),
        (None, _) => {
            return Ok(silent_at_start(model, request_id, Party::Asserter));
        }
        (_, None) => {
            return Ok(silent_at_start(model, request_id, Party::Challenger));
        }
    };
    let mut state = DisputeState::start(model.clone(), request_id, model_input.clone(), a_out, c_out)?;
    let finish = |state: &DisputeState, verdict: Verdict| GameOutcome {
        request_id: request_id.to_string(),
        verdict,
        rounds: state.round(),
        referee_evals: state.referee_evals(),
        transcript: state.transcript().to_vec(),
    };

    while let Some(x) = state.next_query()? {
        for party in Party::BOTH {
            let p: &mut dyn Participant = match party {
                Party::Asserter => &mut *asserter,
                Party::Challenger => &mut *challenger,
            };
            match p.digest_at(x) {
                Some(d) => state.submit_digest(party, x, d)?,
                None => {
                    let v = state.timeout(party);
                    return Ok(finish(&state, v));
                }
            }
        }
        state.step()?;
    }

    let z = match state.isolate() {
        Isolation::Isolated(z) => z,
        _ => return Err(BisectionError::NotIsolated),
    };
    let parents = state.index.parents(z).to_vec();
    let ra = asserter.reveal(z, &parents);
    let rc = challenger.reveal(z, &parents);
    let verdict = state.arbitrate(ra.as_ref(), rc.as_ref())?;
    Ok(finish(&state, verdict))
}

fn silent_at_start(model: &DagModel, request_id: &str, party: Party) -> GameOutcome {
    GameOutcome {
        request_id: request_id.to_string(),
        verdict: Verdict {
            divergent_node: model.output_node,
            faulty_party: party,
            reason: VerdictReason::NonResponse,
        },
        rounds: 0,
        referee_evals: 0,
        transcript: Vec::new(),
    }
}
