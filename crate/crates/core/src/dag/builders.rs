use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DagModel, LayerId, LayerSpec, Node, PRIME};

fn random_affine(rng: &mut impl Rng, rows: usize, cols: usize) -> LayerSpec {
    LayerSpec::AffineMod {
        weights: (0..rows)
            .map(|_| (0..cols).map(|_| rng.gen_range(1..PRIME)).collect())
            .collect(),
        bias: (0..rows).map(|_| rng.gen_range(0..PRIME)).collect(),
    }
}

fn node(i: usize, label: Option<String>, spec: LayerSpec) -> Node {
    Node {
        index: LayerId(i as u32),
        label,
        spec,
    }
}

/// A sequential model of `n` random affine layers of width `dim`.
pub fn chain(model_id: &str, n: usize, dim: usize, seed: u64) -> DagModel {
    assert!(n > 0 && dim > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DagModel {
        model_id: model_id.to_string(),
        input_dim: dim as u32,
        input_node: LayerId(0),
        output_node: LayerId(n as u32 - 1),
        nodes: (0..n)
            .map(|i| node(i, Some(format!("L{i}")), random_affine(&mut rng, dim, dim)))
            .collect(),
        edges: (1..n)
            .map(|i| (LayerId(i as u32 - 1), LayerId(i as u32)))
            .collect(),
        overrides: vec![],
    }
}

/// A GoogLeNet-style inception block: a stem layer, four parallel branches
/// (the second two layers deep) and a concatenating sink.
///
/// ```text
///          ┌─ L1.1 ────────┐
///          ├─ L2.1 ─ L2.2 ─┤
///   stem ──┼─ L3.1 ────────┼─ concat
///          └─ L4.1 ────────┘
/// ```
pub fn inception_block() -> DagModel {
    let dim = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(0x1ce9);
    let labels = ["stem", "L1.1", "L2.1", "L2.2", "L3.1", "L4.1"];
    let mut nodes: Vec<Node> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| node(i, Some(l.to_string()), random_affine(&mut rng, dim, dim)))
        .collect();
    nodes.push(node(6, Some("concat".into()), LayerSpec::Concat { arity: 4 }));
    let edges = [(0, 1), (0, 2), (2, 3), (0, 4), (0, 5), (1, 6), (3, 6), (4, 6), (5, 6)]
        .into_iter()
        .map(|(a, b)| (LayerId(a), LayerId(b)))
        .collect();
    DagModel {
        model_id: "inception-block".into(),
        input_dim: dim as u32,
        input_node: LayerId(0),
        output_node: LayerId(6),
        nodes,
        edges,
        overrides: vec![],
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RandomDagConfig {
    pub nodes: usize,
    pub dim: usize,
    /// Upper bound on parents for interior nodes.
    pub max_parents: usize,
}

impl Default for RandomDagConfig {
    fn default() -> Self {
        RandomDagConfig {
            nodes: 20,
            dim: 2,
            max_parents: 3,
        }
    }
}

/// A random single-source, single-sink DAG. Interior nodes draw 1..=max_parents
/// parents among earlier nodes; the sink mixes every node left without a child.
pub fn random_dag(model_id: &str, cfg: RandomDagConfig, rng: &mut impl Rng) -> DagModel {
    let n = cfg.nodes;
    assert!(n > 0 && cfg.dim > 0 && cfg.max_parents > 0);
    let mut nodes = Vec::with_capacity(n);
    let mut edges = Vec::new();
    let mut has_child = vec![false; n];
    nodes.push(node(0, None, random_affine(rng, cfg.dim, cfg.dim)));
    for i in 1..n {
        let parents: Vec<usize> = if i == n - 1 {
            let mut ps: Vec<usize> = (0..i).filter(|&p| !has_child[p]).collect();
            if ps.is_empty() {
                ps.push(i - 1);
            }
            ps
        } else {
            let k = rng.gen_range(1..=cfg.max_parents.min(i));
            let mut ps = rand::seq::index::sample(rng, i, k).into_vec();
            ps.sort_unstable();
            ps
        };
        for &p in &parents {
            has_child[p] = true;
            edges.push((LayerId(p as u32), LayerId(i as u32)));
        }
        let spec = if parents.len() == 1 {
            random_affine(rng, cfg.dim, cfg.dim)
        } else {
            LayerSpec::ElementwiseMix {
                coeffs: parents.iter().map(|_| rng.gen_range(1..PRIME)).collect(),
                offset: rng.gen_range(0..PRIME),
            }
        };
        nodes.push(node(i, None, spec));
    }
    DagModel {
        model_id: model_id.to_string(),
        input_dim: cfg.dim as u32,
        input_node: LayerId(0),
        output_node: LayerId(n as u32 - 1),
        nodes,
        edges,
        overrides: vec![],
    }
}
