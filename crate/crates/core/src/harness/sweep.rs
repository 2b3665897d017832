//! Fault sweeps: one bisection game per fault position, faulty asserter
//! against honest challenger, with round statistics and oracle checks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bisection::{run_game, BisectionError, GameOutcome, Party, TraceParticipant};
use crate::dag::{chain, execute, inception_block, make_faulty_evaluator, random_dag, DagError, DagModel, Evaluator, LayerId, RandomDagConfig, Tensor, PRIME};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Chain,
    Inception,
    Random,
}

impl FromStr for Topology {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chain" => Ok(Topology::Chain),
            "inception" => Ok(Topology::Inception),
            "random" => Ok(Topology::Random),
            other => Err(format!("unknown topology {other:?} (chain, inception, random)")),
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::Chain => "chain",
            Topology::Inception => "inception",
            Topology::Random => "random",
        })
    }
}

/// The model a sweep runs on. `nodes` is ignored for the inception block.
pub fn sweep_model(topology: Topology, nodes: usize, seed: u64) -> DagModel {
    match topology {
        Topology::Chain => chain("sweep-chain", nodes, 4, seed),
        Topology::Inception => inception_block(),
        Topology::Random => random_dag(
            "sweep-random",
            RandomDagConfig {
                nodes,
                dim: 3,
                max_parents: 3,
            },
            &mut ChaCha8Rng::seed_from_u64(seed),
        ),
    }
}

/// One game over a single-node fault. `None` when the fault does not reach
/// the output (nothing to dispute).
pub fn fault_game(model: &DagModel, fault: LayerId, input: &Tensor) -> Result<Option<GameOutcome>, BisectionError> {
    let honest = execute(model, input)?;
    let dim = honest.get(fault).ok_or(DagError::UnknownNode(fault))?.dim();
    let mut delta = vec![0; dim];
    delta[0] = 1;
    let faulty = make_faulty_evaluator(model, fault, delta)?.run(model, input)?;
    if faulty.final_output == honest.final_output {
        return Ok(None);
    }
    let mut asserter = TraceParticipant::new(faulty);
    let mut challenger = TraceParticipant::new(honest);
    run_game(model, "sweep", input, &mut asserter, &mut challenger).map(Some)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub nodes: usize,
    pub games: u32,
    /// Faults that never reached the output.
    pub masked: u32,
    pub min_rounds: u32,
    pub max_rounds: u32,
    pub mean_rounds: f64,
    pub histogram: BTreeMap<u32, u32>,
    pub max_referee_evals: u32,
    /// Games whose verdict named the wrong node or the wrong party.
    pub wrong_verdicts: u32,
}

/// Runs one game per fault position with a seeded random input each.
pub fn sweep(model: &DagModel, faults: impl IntoIterator<Item = LayerId>, seed: u64) -> Result<RoundStats, BisectionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = RoundStats {
        nodes: model.len(),
        min_rounds: u32::MAX,
        ..RoundStats::default()
    };
    let mut total = 0u64;
    for fault in faults {
        let input = Tensor::new((0..model.input_dim).map(|_| rng.gen_range(0..PRIME)).collect())?;
        let Some(outcome) = fault_game(model, fault, &input)? else {
            stats.masked += 1;
            continue;
        };
        stats.games += 1;
        total += outcome.rounds as u64;
        stats.min_rounds = stats.min_rounds.min(outcome.rounds);
        stats.max_rounds = stats.max_rounds.max(outcome.rounds);
        *stats.histogram.entry(outcome.rounds).or_default() += 1;
        stats.max_referee_evals = stats.max_referee_evals.max(outcome.referee_evals);
        if outcome.verdict.divergent_node != fault || outcome.verdict.faulty_party != Party::Asserter {
            stats.wrong_verdicts += 1;
        }
    }
    if stats.games == 0 {
        stats.min_rounds = 0;
    } else {
        stats.mean_rounds = total as f64 / stats.games as f64;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_chain_sweep_is_logarithmic_and_correct() {
        let m = sweep_model(Topology::Chain, 16, 1);
        let s = sweep(&m, m.node_ids(), 3).unwrap();
        assert_eq!(s.games + s.masked, 16);
        assert_eq!(s.wrong_verdicts, 0);
        assert!(s.max_rounds <= 4, "{s:?}");
        assert_eq!(s.max_referee_evals, 1);
    }

    #[test]
    fn topology_names_parse() {
        assert_eq!("inception".parse::<Topology>(), Ok(Topology::Inception));
        assert!("ring".parse::<Topology>().is_err());
    }
}
