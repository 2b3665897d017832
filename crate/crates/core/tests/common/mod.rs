//! Oracles shared by the integration tests. Each is written against the
//! definitions, independently of the code under test.
#![allow(dead_code)]

use std::collections::BTreeSet;

use sakshi_core::channel::{make_micropayment, Micropayment};
use sakshi_core::dag::ExecutionTrace;
use sakshi_core::{ContractId, DagModel, Digest, Keypair, LayerId, Tokens, Violation};

/// Smallest-index node, among the ancestors of the output (inclusive), at
/// which the two traces differ.
pub fn first_divergence(model: &DagModel, a: &ExecutionTrace, b: &ExecutionTrace) -> Option<LayerId> {
    let mut closure = BTreeSet::new();
    let mut stack = vec![model.output_node];
    while let Some(n) = stack.pop() {
        if closure.insert(n) {
            stack.extend(model.parents(n).unwrap());
        }
    }
    closure.into_iter().find(|n| a.get(*n) != b.get(*n))
}

pub const PAYER: &str = "payer";
pub const CHANNEL: ContractId = ContractId(7);

/// A valid chain of micropayments with the given unit prices.
pub fn payment_chain(escrow: Tokens, prices: &[Tokens]) -> Vec<Micropayment> {
    let key = Keypair::derive(PAYER);
    let mut out: Vec<Micropayment> = Vec::new();
    for (i, p) in prices.iter().enumerate() {
        let mp = make_micropayment(&key, CHANNEL, escrow, out.last(), &format!("r{i}"), *p).unwrap();
        out.push(mp);
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub enum Field {
    Channel,
    Request,
    Nonce,
    Cumulative,
    PrevHash,
    Signature,
}

pub const FIELDS: [Field; 6] = [
    Field::Channel,
    Field::Request,
    Field::Nonce,
    Field::Cumulative,
    Field::PrevHash,
    Field::Signature,
];

/// Changes one field of `mp` (by a nonzero `delta` where numeric) and returns
/// the violation a verifier must report for it: the first broken rule in
/// the order channel, nonce, hash link, monotonicity, escrow, signature.
pub fn mutate(
    mp: &Micropayment,
    prev: Option<&Micropayment>,
    escrow: Tokens,
    field: Field,
    delta: u64,
) -> (Micropayment, Violation) {
    assert_ne!(delta, 0);
    let mut m = mp.clone();
    let kind = match field {
        Field::Channel => {
            m.channel_id = ContractId(m.channel_id.0.wrapping_add(delta));
            Violation::WrongChannel
        }
        Field::Request => {
            m.request_id.push('x');
            Violation::BadSignature
        }
        Field::Nonce => {
            m.nonce = m.nonce.wrapping_add(delta);
            Violation::NonceGap
        }
        Field::Cumulative => {
            let floor = prev.map_or(0, |p| p.cumulative);
            // Alternate between pushing down and pushing up.
            let down = delta.is_multiple_of(2) && m.cumulative > 0;
            m.cumulative = if down {
                m.cumulative - 1 - (delta / 2) % m.cumulative
            } else {
                m.cumulative.saturating_add(1 + delta / 2)
            };
            if m.cumulative < floor {
                Violation::CumulativeDecrease
            } else if m.cumulative > escrow {
                Violation::ExceedsEscrow
            } else {
                Violation::BadSignature
            }
        }
        Field::PrevHash => {
            m.prev_hash = Digest::of(&delta.to_le_bytes());
            Violation::BrokenHashChain
        }
        Field::Signature => {
            m.payer_sig.0[(delta % 64) as usize] ^= 1 + (delta % 255) as u8;
            Violation::BadSignature
        }
    };
    (m, kind)
}
