//! Deterministic computation DAGs standing in for AI models.
//!
//! A [`DagModel`] is a graph of small integer "layers" evaluated modulo the
//! public prime [`PRIME`]. Node indices are a topological order, the model has
//! one source (fed the request tensor) and one sink (the model output), and each
//! multi-input layer consumes its parents in ascending index order.

mod builders;
mod file;
mod nodeset;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Digest, Encoder};

pub use builders::{chain, inception_block, random_dag, RandomDagConfig};
pub use file::{load_model, model_file_digest, parse_model};
pub use nodeset::NodeSet;

/// Public modulus for all layer arithmetic: the Mersenne prime 2^31 - 1.
pub const PRIME: u64 = 2_147_483_647;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DagError {
    #[error("model has no nodes")]
    EmptyModel,
    #[error("node at position {position} has index {found}; indices must be 0..n-1 in order")]
    NonContiguousIndex { position: usize, found: LayerId },
    #[error("unknown node {0}")]
    UnknownNode(LayerId),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(LayerId, LayerId),
    #[error("cycle detected through node {0}")]
    CycleDetected(LayerId),
    #[error("edge {0} -> {1} goes against index order")]
    NotTopological(LayerId, LayerId),
    #[error("multiple sources: {0:?}")]
    MultipleSources(Vec<LayerId>),
    #[error("multiple sinks: {0:?}")]
    MultipleSinks(Vec<LayerId>),
    #[error("node {0} is not both reachable from the input and co-reachable to the output")]
    UnreachableNode(LayerId),
    #[error("node {node}: layer expects {expected} inputs, graph supplies {found}")]
    ArityMismatch { node: LayerId, expected: usize, found: usize },
    #[error("invalid layer parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("tensor must have at least one value")]
    EmptyTensor,
    #[error("perturbation is zero modulo the prime")]
    ZeroPerturbation,
    #[error("model file: {0}")]
    File(String),
}

/// Index of a node within one model.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct LayerId(pub u32);

impl LayerId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

impl From<u32> for LayerId {
    fn from(v: u32) -> Self {
        LayerId(v)
    }
}

/// A non-empty vector of residues modulo [`PRIME`].
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u64>", into = "Vec<u64>")]
pub struct Tensor(Vec<u64>);

impl Tensor {
    pub fn new(values: Vec<u64>) -> Result<Tensor, DagError> {
        if values.is_empty() {
            return Err(DagError::EmptyTensor);
        }
        Ok(Tensor(values.into_iter().map(|v| v % PRIME).collect()))
    }

    pub fn zeros(dim: usize) -> Tensor {
        assert!(dim > 0, "zero-length tensor");
        Tensor(vec![0; dim])
    }

    pub fn values(&self) -> &[u64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Canonical bytes: `u32` length then each value as `u64`, little-endian.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u64s(&self.0);
        e.finish()
    }

    pub fn encode_into(&self, e: &mut Encoder) {
        e.u64s(&self.0);
    }

    /// Element-wise `self + delta (mod P)`.
    pub fn offset_by(&self, delta: &Tensor) -> Result<Tensor, DagError> {
        if delta.dim() != self.dim() {
            return Err(DagError::DimensionMismatch(format!(
                "perturbation has {} values, node output has {}",
                delta.dim(),
                self.dim()
            )));
        }
        Ok(Tensor(
            self.0
                .iter()
                .zip(&delta.0)
                .map(|(a, b)| (a + b) % PRIME)
                .collect(),
        ))
    }
}

impl TryFrom<Vec<u64>> for Tensor {
    type Error = DagError;
    fn try_from(v: Vec<u64>) -> Result<Self, Self::Error> {
        Tensor::new(v)
    }
}

impl From<Tensor> for Vec<u64> {
    fn from(t: Tensor) -> Self {
        t.0
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}

/// Output commitment of a tensor: SHA-256 over its canonical bytes.
pub fn commit(t: &Tensor) -> Digest {
    Digest::of(&t.canonical_bytes())
}

/// One layer function.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    /// `out = W x + b (mod P)`; one input.
    AffineMod { weights: Vec<Vec<u64>>, bias: Vec<u64> },
    /// `out[i] = sum_j c_j x_j[i] + offset (mod P)`; one input per coefficient.
    ElementwiseMix {
        coeffs: Vec<u64>,
        #[serde(default)]
        offset: u64,
    },
    /// Concatenation of `arity` inputs in parent order.
    Concat { arity: u32 },
    /// The slice `[start, start + len)` of a single input.
    SplitTake { start: u32, len: u32 },
    /// Sum of all values of a single input, as a one-value tensor.
    ReduceSum,
}

impl LayerSpec {
    pub fn arity(&self) -> usize {
        match self {
            LayerSpec::AffineMod { .. } => 1,
            LayerSpec::ElementwiseMix { coeffs, .. } => coeffs.len(),
            LayerSpec::Concat { arity } => *arity as usize,
            LayerSpec::SplitTake { .. } | LayerSpec::ReduceSum => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::AffineMod { .. } => "affine-mod",
            LayerSpec::ElementwiseMix { .. } => "elementwise-mix",
            LayerSpec::Concat { .. } => "concat",
            LayerSpec::SplitTake { .. } => "split-take",
            LayerSpec::ReduceSum => "reduce-sum",
        }
    }

    pub fn identity(dim: usize) -> LayerSpec {
        let weights = (0..dim)
            .map(|r| (0..dim).map(|c| u64::from(r == c)).collect())
            .collect();
        LayerSpec::AffineMod {
            weights,
            bias: vec![0; dim],
        }
    }

    fn check_params(&self) -> Result<(), DagError> {
        match self {
            LayerSpec::AffineMod { weights, bias } => {
                let cols = weights.first().map(Vec::len).unwrap_or(0);
                if weights.is_empty() || cols == 0 {
                    return Err(DagError::InvalidParams("affine-mod needs a non-empty matrix".into()));
                }
                if weights.iter().any(|r| r.len() != cols) {
                    return Err(DagError::InvalidParams("affine-mod rows differ in length".into()));
                }
                if bias.len() != weights.len() {
                    return Err(DagError::InvalidParams(format!(
                        "affine-mod bias has {} values for {} rows",
                        bias.len(),
                        weights.len()
                    )));
                }
            }
            LayerSpec::ElementwiseMix { coeffs, .. } if coeffs.is_empty() => {
                return Err(DagError::InvalidParams("elementwise-mix needs coefficients".into()));
            }
            LayerSpec::Concat { arity: 0 } => {
                return Err(DagError::InvalidParams("concat needs at least one input".into()));
            }
            LayerSpec::SplitTake { len: 0, .. } => {
                return Err(DagError::InvalidParams("split-take of zero values".into()));
            }
            _ => {}
        }
        Ok(())
    }

    fn encode_into(&self, e: &mut Encoder) {
        e.str(self.kind());
        match self {
            LayerSpec::AffineMod { weights, bias } => {
                e.u32(weights.len() as u32);
                for row in weights {
                    e.u64s(row);
                }
                e.u64s(bias);
            }
            LayerSpec::ElementwiseMix { coeffs, offset } => {
                e.u64s(coeffs).u64(*offset);
            }
            LayerSpec::Concat { arity } => {
                e.u32(*arity);
            }
            LayerSpec::SplitTake { start, len } => {
                e.u32(*start).u32(*len);
            }
            LayerSpec::ReduceSum => {}
        }
    }
}

/// Evaluates one layer on its inputs (already in parent order).
pub fn eval_layer(spec: &LayerSpec, inputs: &[&Tensor]) -> Result<Tensor, DagError> {
    if inputs.len() != spec.arity() {
        return Err(DagError::ArityMismatch {
            node: LayerId::default(),
            expected: spec.arity(),
            found: inputs.len(),
        });
    }
    spec.check_params()?;
    let values = match spec {
        LayerSpec::AffineMod { weights, bias } => {
            let x = inputs[0].values();
            if weights[0].len() != x.len() {
                return Err(DagError::DimensionMismatch(format!(
                    "affine-mod expects {} inputs values, got {}",
                    weights[0].len(),
                    x.len()
                )));
            }
            weights
                .iter()
                .zip(bias)
                .map(|(row, b)| {
                    row.iter()
                        .zip(x)
                        .fold(b % PRIME, |acc, (w, v)| (acc + (w % PRIME) * v) % PRIME)
                })
                .collect()
        }
        LayerSpec::ElementwiseMix { coeffs, offset } => {
            let dim = inputs[0].dim();
            if let Some(bad) = inputs.iter().find(|t| t.dim() != dim) {
                return Err(DagError::DimensionMismatch(format!(
                    "elementwise-mix inputs of length {} and {}",
                    dim,
                    bad.dim()
                )));
            }
            (0..dim)
                .map(|i| {
                    coeffs
                        .iter()
                        .zip(inputs)
                        .fold(offset % PRIME, |acc, (c, t)| {
                            (acc + (c % PRIME) * t.values()[i]) % PRIME
                        })
                })
                .collect()
        }
        LayerSpec::Concat { .. } => inputs.iter().flat_map(|t| t.values().iter().copied()).collect(),
        LayerSpec::SplitTake { start, len } => {
            let (start, len) = (*start as usize, *len as usize);
            let x = inputs[0].values();
            if start + len > x.len() {
                return Err(DagError::DimensionMismatch(format!(
                    "split-take [{start}, {}) of a {}-value tensor",
                    start + len,
                    x.len()
                )));
            }
            x[start..start + len].to_vec()
        }
        LayerSpec::ReduceSum => vec![inputs[0].values().iter().fold(0, |a, v| (a + v) % PRIME)],
    };
    Ok(Tensor(values))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub index: LayerId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub spec: LayerSpec,
}

/// Input/output pair forced at the output node (used by watermark embedding).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputOverride {
    pub input: Tensor,
    pub output: Tensor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagModel {
    pub model_id: String,
    pub input_dim: u32,
    pub input_node: LayerId,
    pub output_node: LayerId,
    pub nodes: Vec<Node>,
    #[serde(default)]
    pub edges: Vec<(LayerId, LayerId)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<OutputOverride>,
}

impl DagModel {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: LayerId) -> Result<&Node, DagError> {
        self.nodes.get(id.idx()).ok_or(DagError::UnknownNode(id))
    }

    pub fn spec(&self, id: LayerId) -> Result<&LayerSpec, DagError> {
        self.node(id).map(|n| &n.spec)
    }

    pub fn label(&self, id: LayerId) -> String {
        self.nodes
            .get(id.idx())
            .and_then(|n| n.label.clone())
            .unwrap_or_else(|| id.to_string())
    }

    pub fn node_ids(&self) -> impl Iterator<Item = LayerId> + '_ {
        (0..self.nodes.len() as u32).map(LayerId)
    }

    /// Parents of every node in ascending index order. Assumes edge endpoints
    /// are in range.
    pub fn parent_lists(&self) -> Vec<Vec<LayerId>> {
        let mut parents = vec![Vec::new(); self.nodes.len()];
        for &(from, to) in &self.edges {
            parents[to.idx()].push(from);
        }
        for p in &mut parents {
            p.sort();
        }
        parents
    }

    pub fn parents(&self, id: LayerId) -> Result<Vec<LayerId>, DagError> {
        self.node(id)?;
        let mut ps: Vec<LayerId> = self
            .edges
            .iter()
            .filter(|(_, to)| *to == id)
            .map(|(from, _)| *from)
            .collect();
        ps.sort();
        Ok(ps)
    }

    /// Computes a node's output from its parent outputs (ascending parent
    /// order). The input node takes the model input instead. Output overrides
    /// are consulted at the output node.
    pub fn eval_node(
        &self,
        id: LayerId,
        parent_outputs: &[&Tensor],
        model_input: &Tensor,
    ) -> Result<Tensor, DagError> {
        let spec = self.spec(id)?;
        let out = if id == self.input_node {
            eval_layer(spec, &[model_input])
        } else {
            eval_layer(spec, parent_outputs)
        }
        .map_err(|e| match e {
            DagError::ArityMismatch { expected, found, .. } => DagError::ArityMismatch {
                node: id,
                expected,
                found,
            },
            other => other,
        })?;
        if id == self.output_node {
            if let Some(o) = self.overrides.iter().find(|o| &o.input == model_input) {
                return Ok(o.output.clone());
            }
        }
        Ok(out)
    }

    /// Hash of the canonical encoding of the whole model.
    pub fn digest(&self) -> Digest {
        let mut e = Encoder::tagged("sakshi/model/v1");
        e.str(&self.model_id)
            .u32(self.input_dim)
            .u32(self.input_node.0)
            .u32(self.output_node.0)
            .u32(self.nodes.len() as u32);
        for n in &self.nodes {
            e.u32(n.index.0);
            n.spec.encode_into(&mut e);
        }
        e.u32(self.edges.len() as u32);
        for (a, b) in &self.edges {
            e.u32(a.0).u32(b.0);
        }
        e.u32(self.overrides.len() as u32);
        for o in &self.overrides {
            o.input.encode_into(&mut e);
            o.output.encode_into(&mut e);
        }
        e.hash()
    }
}

/// Checks every structural invariant of a model, reporting the first violation.
pub fn validate_dag(model: &DagModel) -> Result<(), DagError> {
    let n = model.nodes.len();
    if n == 0 {
        return Err(DagError::EmptyModel);
    }
    for (pos, node) in model.nodes.iter().enumerate() {
        if node.index.idx() != pos {
            return Err(DagError::NonContiguousIndex {
                position: pos,
                found: node.index,
            });
        }
    }
    for id in [model.input_node, model.output_node] {
        if id.idx() >= n {
            return Err(DagError::UnknownNode(id));
        }
    }
    let mut seen = BTreeSet::new();
    for &(a, b) in &model.edges {
        for id in [a, b] {
            if id.idx() >= n {
                return Err(DagError::UnknownNode(id));
            }
        }
        if !seen.insert((a, b)) {
            return Err(DagError::DuplicateEdge(a, b));
        }
    }

    let parents = model.parent_lists();
    let mut children = vec![Vec::new(); n];
    for &(a, b) in &model.edges {
        children[a.idx()].push(b);
    }

    // Kahn's algorithm; whatever is left over sits on a cycle.
    let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut stack: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut visited = 0;
    while let Some(v) = stack.pop() {
        visited += 1;
        for c in &children[v] {
            indeg[c.idx()] -= 1;
            if indeg[c.idx()] == 0 {
                stack.push(c.idx());
            }
        }
    }
    if visited < n {
        let stuck = (0..n).find(|&i| indeg[i] > 0).expect("unvisited node");
        return Err(DagError::CycleDetected(LayerId(stuck as u32)));
    }
    if let Some(&(a, b)) = model.edges.iter().find(|(a, b)| a >= b) {
        return Err(DagError::NotTopological(a, b));
    }

    let sources: Vec<LayerId> = model.node_ids().filter(|i| parents[i.idx()].is_empty()).collect();
    if sources.len() > 1 {
        return Err(DagError::MultipleSources(sources));
    }
    let sinks: Vec<LayerId> = model.node_ids().filter(|i| children[i.idx()].is_empty()).collect();
    if sinks.len() > 1 {
        return Err(DagError::MultipleSinks(sinks));
    }

    let forward = reach(n, model.input_node, &children);
    let backward = reach(n, model.output_node, &parents);
    if let Some(bad) = model.node_ids().find(|i| !forward[i.idx()] || !backward[i.idx()]) {
        return Err(DagError::UnreachableNode(bad));
    }

    for node in &model.nodes {
        node.spec.check_params()?;
        let supplied = parents[node.index.idx()].len() + usize::from(node.index == model.input_node);
        if supplied != node.spec.arity() {
            return Err(DagError::ArityMismatch {
                node: node.index,
                expected: node.spec.arity(),
                found: supplied,
            });
        }
    }
    Ok(())
}

fn reach(n: usize, start: LayerId, adj: &[Vec<LayerId>]) -> Vec<bool> {
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    seen[start.idx()] = true;
    while let Some(v) = stack.pop() {
        for w in &adj[v.idx()] {
            if !seen[w.idx()] {
                seen[w.idx()] = true;
                stack.push(*w);
            }
        }
    }
    seen
}

/// Every node with a directed path to `node`, excluding `node` itself.
pub fn ancestors(model: &DagModel, node: LayerId) -> Result<BTreeSet<LayerId>, DagError> {
    model.node(node)?;
    let parents = model.parent_lists();
    let mut seen = reach(model.len(), node, &parents);
    seen[node.idx()] = false;
    Ok(model.node_ids().filter(|i| seen[i.idx()]).collect())
}

/// Every node reachable from `node`, excluding `node` itself.
pub fn descendants(model: &DagModel, node: LayerId) -> Result<BTreeSet<LayerId>, DagError> {
    model.node(node)?;
    let mut children = vec![Vec::new(); model.len()];
    for &(a, b) in &model.edges {
        children[a.idx()].push(b);
    }
    let mut seen = reach(model.len(), node, &children);
    seen[node.idx()] = false;
    Ok(model.node_ids().filter(|i| seen[i.idx()]).collect())
}

/// Precomputed adjacency and ancestor closures of a validated model.
#[derive(Clone, Debug)]
pub struct DagIndex {
    parents: Vec<Vec<LayerId>>,
    ancestors: Vec<NodeSet>,
}

impl DagIndex {
    pub fn build(model: &DagModel) -> Result<DagIndex, DagError> {
        validate_dag(model)?;
        let n = model.len();
        let parents = model.parent_lists();
        // Index order is topological, so every parent's closure is final
        // before its children are visited.
        let mut ancestors: Vec<NodeSet> = Vec::with_capacity(n);
        for ps in &parents {
            let mut set = NodeSet::new(n);
            for p in ps {
                set.insert(*p);
                set.union_with(&ancestors[p.idx()]);
            }
            ancestors.push(set);
        }
        Ok(DagIndex { parents, ancestors })
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parents(&self, id: LayerId) -> &[LayerId] {
        &self.parents[id.idx()]
    }

    /// Strict ancestors of `id`.
    pub fn ancestors(&self, id: LayerId) -> &NodeSet {
        &self.ancestors[id.idx()]
    }

    /// `{id}` together with its ancestors.
    pub fn closure(&self, id: LayerId) -> NodeSet {
        let mut s = self.ancestors[id.idx()].clone();
        s.insert(id);
        s
    }
}

/// Per-node outputs of one forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub outputs: Vec<Tensor>,
    pub final_output: Tensor,
}

impl ExecutionTrace {
    pub fn get(&self, id: LayerId) -> Option<&Tensor> {
        self.outputs.get(id.idx())
    }

    pub fn digest_of(&self, id: LayerId) -> Option<Digest> {
        self.get(id).map(commit)
    }

    pub fn output_digest(&self) -> Digest {
        commit(&self.final_output)
    }

    /// Smallest node index whose outputs differ between the two traces.
    pub fn first_divergence(&self, other: &ExecutionTrace) -> Option<LayerId> {
        self.outputs
            .iter()
            .zip(&other.outputs)
            .position(|(a, b)| a != b)
            .map(|i| LayerId(i as u32))
    }
}

/// Anything that can produce an execution trace for a model and input.
pub trait Evaluator {
    fn run(&self, model: &DagModel, input: &Tensor) -> Result<ExecutionTrace, DagError>;
}

/// Evaluates every node faithfully.
#[derive(Clone, Copy, Debug, Default)]
pub struct HonestEvaluator;

impl Evaluator for HonestEvaluator {
    fn run(&self, model: &DagModel, input: &Tensor) -> Result<ExecutionTrace, DagError> {
        forward(model, input, |_, t| Ok(t))
    }
}

/// Evaluates honestly except that one node's output is shifted by a fixed
/// nonzero delta before being fed downstream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaultyEvaluator {
    pub fault_node: LayerId,
    pub perturbation: Tensor,
}

impl Evaluator for FaultyEvaluator {
    fn run(&self, model: &DagModel, input: &Tensor) -> Result<ExecutionTrace, DagError> {
        forward(model, input, |id, t| {
            if id == self.fault_node {
                t.offset_by(&self.perturbation)
            } else {
                Ok(t)
            }
        })
    }
}

pub fn make_faulty_evaluator(
    model: &DagModel,
    fault_node: LayerId,
    perturbation: Vec<u64>,
) -> Result<FaultyEvaluator, DagError> {
    model.node(fault_node)?;
    let perturbation = Tensor::new(perturbation)?;
    if perturbation.values().iter().all(|v| *v == 0) {
        return Err(DagError::ZeroPerturbation);
    }
    Ok(FaultyEvaluator {
        fault_node,
        perturbation,
    })
}

/// Honest forward pass.
pub fn execute(model: &DagModel, input: &Tensor) -> Result<ExecutionTrace, DagError> {
    HonestEvaluator.run(model, input)
}

fn forward(
    model: &DagModel,
    input: &Tensor,
    mut tamper: impl FnMut(LayerId, Tensor) -> Result<Tensor, DagError>,
) -> Result<ExecutionTrace, DagError> {
    validate_dag(model)?;
    if input.dim() != model.input_dim as usize {
        return Err(DagError::DimensionMismatch(format!(
            "model {} takes {} input values, got {}",
            model.model_id,
            model.input_dim,
            input.dim()
        )));
    }
    let parents = model.parent_lists();
    let mut outputs: Vec<Tensor> = Vec::with_capacity(model.len());
    for id in model.node_ids() {
        let ins: Vec<&Tensor> = parents[id.idx()]
            .iter()
            .map(|p| {
                debug_assert!(p.idx() < outputs.len(), "parent {p} evaluated after {id}");
                &outputs[p.idx()]
            })
            .collect();
        let out = model.eval_node(id, &ins, input)?;
        outputs.push(tamper(id, out)?);
    }
    let final_output = outputs[model.output_node.idx()].clone();
    Ok(ExecutionTrace {
        outputs,
        final_output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[u64]) -> Tensor {
        Tensor::new(v.to_vec()).unwrap()
    }

    #[test]
    fn chain_of_three_is_valid() {
        assert_eq!(validate_dag(&chain("c3", 3, 2, 1)), Ok(()));
    }

    #[test]
    fn back_edge_is_a_cycle() {
        let mut m = chain("c4", 4, 2, 1);
        m.edges.push((LayerId(3), LayerId(0)));
        assert!(matches!(validate_dag(&m), Err(DagError::CycleDetected(_))));
    }

    #[test]
    fn inception_block_is_valid() {
        let m = inception_block();
        assert_eq!(m.len(), 7);
        assert_eq!(validate_dag(&m), Ok(()));
    }

    #[test]
    fn structural_errors_are_named() {
        // Two sources.
        let mut m = chain("c", 3, 2, 1);
        m.edges.retain(|e| *e != (LayerId(0), LayerId(1)));
        m.nodes[2].spec = LayerSpec::ElementwiseMix {
            coeffs: vec![1],
            offset: 0,
        };
        assert!(matches!(validate_dag(&m), Err(DagError::MultipleSources(_))));

        // Two sinks.
        let mut m = chain("c", 3, 2, 1);
        m.edges.push((LayerId(0), LayerId(2)));
        m.edges.retain(|e| *e != (LayerId(1), LayerId(2)));
        assert!(matches!(validate_dag(&m), Err(DagError::MultipleSinks(_))));

        // Arity.
        let mut m = chain("c", 3, 2, 1);
        m.nodes[1].spec = LayerSpec::Concat { arity: 2 };
        assert_eq!(
            validate_dag(&m),
            Err(DagError::ArityMismatch {
                node: LayerId(1),
                expected: 2,
                found: 1
            })
        );

        // Input node that is not the source.
        let mut m = chain("c", 3, 2, 1);
        m.input_node = LayerId(1);
        assert!(matches!(validate_dag(&m), Err(DagError::UnreachableNode(LayerId(0)))));
    }

    #[test]
    fn ancestors_of_chain_and_source() {
        let m = chain("c", 4, 2, 1);
        assert_eq!(
            ancestors(&m, LayerId(2)).unwrap(),
            [LayerId(0), LayerId(1)].into_iter().collect()
        );
        assert!(ancestors(&m, m.input_node).unwrap().is_empty());
        assert_eq!(ancestors(&m, LayerId(9)), Err(DagError::UnknownNode(LayerId(9))));
    }

    #[test]
    fn eval_layer_examples() {
        let x = t(&[5, 6]);
        assert_eq!(eval_layer(&LayerSpec::identity(2), &[&x]).unwrap(), x);

        let cat = LayerSpec::Concat { arity: 2 };
        assert_eq!(eval_layer(&cat, &[&t(&[1, 2]), &t(&[3])]).unwrap(), t(&[1, 2, 3]));

        let aff = LayerSpec::AffineMod {
            weights: vec![vec![2, 0], vec![0, 2]],
            bias: vec![1, 1],
        };
        assert_eq!(eval_layer(&aff, &[&t(&[3, 4])]).unwrap(), t(&[7, 9]));

        assert!(matches!(
            eval_layer(&aff, &[&t(&[3])]),
            Err(DagError::DimensionMismatch(_))
        ));
        assert!(matches!(
            eval_layer(&cat, &[&x]),
            Err(DagError::ArityMismatch { .. })
        ));
    }

    #[test]
    fn modular_reduction_wraps() {
        let aff = LayerSpec::AffineMod {
            weights: vec![vec![PRIME - 1]],
            bias: vec![0],
        };
        // (P - 1) * 2 = 2P - 2 = P - 2 (mod P)
        assert_eq!(eval_layer(&aff, &[&t(&[2])]).unwrap(), t(&[PRIME - 2]));
        assert_eq!(
            eval_layer(&LayerSpec::ReduceSum, &[&t(&[PRIME - 1, 3])]).unwrap(),
            t(&[2])
        );
        assert_eq!(
            eval_layer(&LayerSpec::SplitTake { start: 1, len: 2 }, &[&t(&[4, 5, 6])]).unwrap(),
            t(&[5, 6])
        );
    }

    #[test]
    fn identity_chain_propagates_input() {
        let mut m = chain("id", 5, 3, 1);
        for n in &mut m.nodes {
            n.spec = LayerSpec::identity(3);
        }
        let x = t(&[9, 8, 7]);
        let trace = execute(&m, &x).unwrap();
        assert!(trace.outputs.iter().all(|o| *o == x));
        assert_eq!(trace.final_output, x);
    }

    #[test]
    fn single_node_model() {
        let m = chain("one", 1, 2, 1);
        let x = t(&[1, 2]);
        let trace = execute(&m, &x).unwrap();
        assert_eq!(trace.outputs.len(), 1);
        assert_eq!(trace.final_output, trace.outputs[0]);
    }

    #[test]
    fn wrong_input_dimension_rejected() {
        let m = chain("c", 2, 3, 1);
        assert!(matches!(
            execute(&m, &t(&[1, 2])),
            Err(DagError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn commit_is_length_sensitive() {
        assert_eq!(commit(&t(&[0])), commit(&t(&[0])));
        assert_ne!(commit(&t(&[0])), commit(&t(&[0, 0])));
    }

    #[test]
    fn commit_reference_vector() {
        // SHA-256 of 02000000 0100000000000000 0200000000000000, computed with
        // an unrelated SHA-256 implementation (Python hashlib).
        assert_eq!(
            commit(&t(&[1, 2])).to_hex(),
            "e0d66d3c9e39b93f2a0e0fc08cda2de6da9266293fdac4ee2d71b79357b43b60"
        );
    }

    #[test]
    fn faulty_evaluator_validation() {
        let m = chain("c", 3, 2, 1);
        assert_eq!(
            make_faulty_evaluator(&m, LayerId(7), vec![1, 0]),
            Err(DagError::UnknownNode(LayerId(7)))
        );
        assert_eq!(
            make_faulty_evaluator(&m, LayerId(1), vec![0, PRIME]),
            Err(DagError::ZeroPerturbation)
        );
    }

    #[test]
    fn fault_at_output_shifts_final_output_exactly() {
        let m = chain("c", 4, 2, 3);
        let x = t(&[11, 12]);
        let honest = execute(&m, &x).unwrap();
        let bad = make_faulty_evaluator(&m, m.output_node, vec![5, 1])
            .unwrap()
            .run(&m, &x)
            .unwrap();
        assert_eq!(bad.final_output, honest.final_output.offset_by(&t(&[5, 1])).unwrap());
    }

    #[test]
    fn fault_masked_by_zero_coefficient_still_diverges_locally() {
        // 0 -> {1, 2} -> 3 where node 3 ignores node 1.
        let mut m = inception_like_zero_mask();
        validate_dag(&m).unwrap();
        let x = t(&[3, 4]);
        let honest = execute(&m, &x).unwrap();
        let bad = make_faulty_evaluator(&m, LayerId(1), vec![1, 1])
            .unwrap()
            .run(&m, &x)
            .unwrap();
        assert_eq!(bad.final_output, honest.final_output);
        assert_ne!(bad.outputs[1], honest.outputs[1]);
        m.overrides.clear();
    }

    fn inception_like_zero_mask() -> DagModel {
        DagModel {
            model_id: "mask".into(),
            input_dim: 2,
            input_node: LayerId(0),
            output_node: LayerId(3),
            nodes: vec![
                Node { index: LayerId(0), label: None, spec: LayerSpec::identity(2) },
                Node { index: LayerId(1), label: None, spec: LayerSpec::identity(2) },
                Node { index: LayerId(2), label: None, spec: LayerSpec::identity(2) },
                Node {
                    index: LayerId(3),
                    label: None,
                    spec: LayerSpec::ElementwiseMix { coeffs: vec![0, 1], offset: 0 },
                },
            ],
            edges: vec![
                (LayerId(0), LayerId(1)),
                (LayerId(0), LayerId(2)),
                (LayerId(1), LayerId(3)),
                (LayerId(2), LayerId(3)),
            ],
            overrides: vec![],
        }
    }

    #[test]
    fn chain_fault_first_differs_at_fault_node() {
        let m = chain("c8", 8, 3, 7);
        let x = t(&[1, 2, 3]);
        let honest = execute(&m, &x).unwrap();
        let bad = make_faulty_evaluator(&m, LayerId(5), vec![0, 0, 1])
            .unwrap()
            .run(&m, &x)
            .unwrap();
        let first = (0..8).find(|&i| honest.outputs[i] != bad.outputs[i]);
        assert_eq!(first, Some(5));
        assert_eq!(honest.first_divergence(&bad), Some(LayerId(5)));
    }

    #[test]
    fn dag_index_matches_ancestors() {
        let m = inception_block();
        let idx = DagIndex::build(&m).unwrap();
        for id in m.node_ids() {
            let fast: BTreeSet<LayerId> = idx.ancestors(id).iter().collect();
            assert_eq!(fast, ancestors(&m, id).unwrap());
        }
        let all_but_sink: BTreeSet<LayerId> = m.node_ids().filter(|i| *i != m.output_node).collect();
        assert_eq!(ancestors(&m, m.output_node).unwrap(), all_but_sink);
    }
}
