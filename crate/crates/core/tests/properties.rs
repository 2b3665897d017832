mod common;

use proptest::prelude::*;
use sakshi_core::channel::{disputed_unit, verify_micropayment};
use sakshi_core::dag::chain;
use sakshi_core::harness;
use sakshi_core::watermark::{commit_watermark, embed, generate_trigger_set, judge_ownership, model_oracle, OwnershipClaim};
use sakshi_core::{Keypair, Ledger, LedgerConfig};

use common::{mutate, payment_chain, CHANNEL, FIELDS, PAYER};

fn prices() -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(1u64..50, 1..=100)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn valid_chains_verify_link_by_link(prices in prices(), slack in 0u64..100) {
        let escrow = prices.iter().sum::<u64>() + slack;
        let chain = payment_chain(escrow, &prices);
        let key = Keypair::derive(PAYER).public();
        for (k, mp) in chain.iter().enumerate() {
            let prev = k.checked_sub(1).map(|j| &chain[j]);
            prop_assert_eq!(verify_micropayment(CHANNEL, escrow, &key, mp, prev), Ok(()));
            prop_assert_eq!(disputed_unit(mp, prev), prices[k]);
        }
    }

    #[test]
    fn single_field_mutations_are_rejected_with_the_right_kind(
        prices in prices(),
        slack in 0u64..100,
        at in any::<prop::sample::Index>(),
        field in 0usize..FIELDS.len(),
        delta in 1u64..1_000_000,
    ) {
        let escrow = prices.iter().sum::<u64>() + slack;
        let chain = payment_chain(escrow, &prices);
        let k = at.index(chain.len());
        let prev = k.checked_sub(1).map(|j| &chain[j]);
        let (bad, kind) = mutate(&chain[k], prev, escrow, FIELDS[field], delta);
        let key = Keypair::derive(PAYER).public();
        prop_assert_eq!(verify_micropayment(CHANNEL, escrow, &key, &bad, prev), Err(kind));
        // The successor no longer links to the mutated payment.
        if let Some(next) = chain.get(k + 1) {
            prop_assert!(verify_micropayment(CHANNEL, escrow, &key, next, Some(&bad)).is_err());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn byzantine_scenarios_stay_safe_under_any_seed(seed in any::<u64>()) {
        for name in ["faulty-server", "nonpaying-client", "false-challenger", "double-sign-fraud", "equivocating-server"] {
            let s = harness::bundled(name).unwrap().unwrap().with_seed(seed);
            let r = harness::run(&s).unwrap().report;
            prop_assert!(r.conserved(), "{} seed {}", name, seed);
            prop_assert!(r.honest_lost_none(), "{} seed {}", name, seed);
            prop_assert!(r.honest_solvent(), "{} seed {}", name, seed);
            prop_assert!(r.faults.contained(), "{} seed {}: {:?}", name, seed, r.faults);
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Claimant {
    /// Holds the real trigger set.
    Genuine,
    /// Holds its own, unembedded trigger set.
    Forged,
    /// Reveals a salt that does not match its commitment.
    BadSalt,
}

fn claimant() -> impl Strategy<Value = Claimant> {
    prop_oneof![Just(Claimant::Genuine), Just(Claimant::Forged), Just(Claimant::BadSalt)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn earliest_wins_regardless_of_claim_order(
        kinds in prop::collection::vec((claimant(), 0u64..3), 1..6),
        order in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let base = chain("m", 4, 3, 5);
        let real = generate_trigger_set(b"true-owner", 32, 3, 3).unwrap();
        let marked = embed(&base, &real).unwrap();
        let mut ledger = Ledger::new(LedgerConfig::default());
        let mut claims = Vec::new();
        for (i, (kind, gap)) in kinds.iter().enumerate() {
            let who = format!("c{i}");
            ledger.create_account(who.as_str().into(), Keypair::derive(&who).public(), 0).unwrap();
            if *gap > 0 {
                ledger.advance(*gap).unwrap();
            }
            let ts = match kind {
                Claimant::Forged => generate_trigger_set(who.as_bytes(), 32, 3, 3).unwrap(),
                _ => real.clone(),
            };
            commit_watermark(&mut ledger, &who.as_str().into(), "m", &ts, who.as_bytes()).unwrap();
            let salt = match kind {
                Claimant::BadSalt => b"wrong".to_vec(),
                _ => who.as_bytes().to_vec(),
            };
            claims.push(OwnershipClaim { registrant: who.as_str().into(), model_id: "m".into(), salt, trigger_set: ts });
        }
        let oracle = model_oracle(&marked);
        let forward = judge_ownership(&ledger, "m", &oracle, &claims, 0.9).unwrap();
        let permuted: Vec<_> = order.iter().filter(|i| **i < claims.len()).map(|i| claims[*i].clone()).collect();
        let shuffled = judge_ownership(&ledger, "m", &oracle, &permuted, 0.9).unwrap();
        prop_assert_eq!(&forward.winner, &shuffled.winner);
        prop_assert_eq!(forward.reason, shuffled.reason);

        // Oracle: the first genuine claimant in commitment order wins.
        let expected = kinds.iter().position(|(k, _)| matches!(k, Claimant::Genuine)).map(|i| format!("c{i}"));
        prop_assert_eq!(forward.winner.map(|w| w.as_str().to_string()), expected);
    }
}
