use sakshi_core::harness::{self, diff_traces, Scenario, Trace, TraceDiff};
use sakshi_core::watermark::{ClaimStatus, RulingReason};
use sakshi_core::RunReport;

fn report(name: &str) -> RunReport {
    let s = harness::bundled(name).expect("bundled").expect("parses");
    harness::run(&s).expect("runs").report
}

fn invariants(r: &RunReport) {
    assert!(r.conserved(), "{}: {:?}", r.scenario, r.conservation);
    assert!(r.load_accounting_ok, "{}", r.scenario);
    assert!(r.honest_lost_none(), "{}", r.scenario);
    assert!(r.honest_solvent(), "{}", r.scenario);
    assert!(r.faults.contained(), "{}: {:?}", r.scenario, r.faults);
}

#[test]
fn every_bundled_scenario_loads_and_validates() {
    let names: Vec<_> = harness::bundled_names().collect();
    assert!(names.len() >= 7);
    for n in names {
        harness::bundled(n).unwrap().unwrap_or_else(|e| panic!("{n}: {e}"));
    }
}

#[test]
fn honest_baseline_pays_for_everything() {
    let r = report("honest-baseline");
    invariants(&r);
    assert_eq!(r.requests.paid, r.requests.scheduled);
    assert_eq!(r.payment_disputes.raised + r.inference_disputes.raised, 0);
    let paid_by_clients: i64 = ["alice", "bob", "carol"]
        .iter()
        .map(|c| r.balance(c).unwrap())
        .map(|b| b.initial as i64 - b.final_balance as i64)
        .sum();
    assert_eq!(paid_by_clients, r.tokens_paid_by_clients as i64);
}

#[test]
fn faulty_server_is_caught_and_loses_its_fee() {
    let r = report("faulty-server");
    invariants(&r);
    assert!(r.faults.injected >= 1);
    assert_eq!(r.faults.detected, r.faults.injected - r.faults.masked - r.faults.unsampled);
    assert_eq!(r.requests.voided, r.faults.detected);
    let cheap = r.balance("cheap").unwrap();
    assert!(!cheap.honest && cheap.final_balance < cheap.initial);
    let auditor = r.balance("auditor").unwrap();
    assert!(auditor.final_balance > auditor.initial);
}

#[test]
fn equivocation_is_caught_at_reveal() {
    let r = report("equivocating-server");
    invariants(&r);
    assert!(r.inference_disputes.honest_won >= 1);
    assert!(!r.rounds_histogram.is_empty());
}

#[test]
fn nonpaying_client_is_blocked_and_server_is_made_whole() {
    let r = report("nonpaying-client");
    invariants(&r);
    assert!(r.requests.unpaid >= 1);
    assert!(r.requests.skipped.get("client-blocked").copied().unwrap_or(0) > 0);
    assert_eq!(r.payment_disputes.rulings.get("honored"), Some(&r.payment_disputes.raised));
    assert!(r.balance("s1").unwrap().final_balance > r.balance("s1").unwrap().initial);
}

#[test]
fn false_challenger_pays_for_every_frivolous_dispute() {
    let r = report("false-challenger");
    invariants(&r);
    let d = &r.inference_disputes;
    assert!(d.raised > 0);
    assert_eq!(d.honest_won, d.raised);
    assert_eq!(r.requests.voided, 0);
    let troll = r.balance("troll").unwrap();
    assert!(troll.final_balance < troll.floor);
}

#[test]
fn double_signing_is_ruled_payer_fraud() {
    let r = report("double-sign-fraud");
    invariants(&r);
    assert_eq!(r.payment_disputes.rulings.get("payer-fraud"), Some(&1));
}

#[test]
fn exhausted_escrow_stops_service_cleanly() {
    let r = report("escrow-exhaustion");
    invariants(&r);
    assert!(r.requests.skipped["escrow-exhausted"] > 0);
    assert_eq!(r.requests.unpaid + r.requests.voided, 0);
    assert_eq!(r.requests.paid, r.requests.served);
}

#[test]
fn ownership_goes_to_the_earliest_qualifying_claimant() {
    let r = report("ownership-dispute");
    invariants(&r);
    let o = r.ownership.expect("ownership outcome");
    assert_eq!(o.ruling.winner.as_ref().map(|w| w.as_str()), Some("owner"));
    assert_eq!(o.ruling.reason, RulingReason::EarliestQualifyingCommitment);
    let copier = o.ruling.claims.iter().find(|c| c.registrant.as_str() == "copier").unwrap();
    assert_eq!(copier.status, ClaimStatus::Qualified);
    assert_eq!(o.unmarked_match_fraction, 0.0);
    assert!(o.unmarked_winner.is_none());
    assert!(o.order_invariant);
}

#[test]
fn da_policy_posts_before_payment() {
    let r = report("da-before-payment");
    invariants(&r);
    assert_eq!(r.da.posted, r.requests.served);
    assert_eq!(r.da.consistent, r.da.posted);
    // Same traffic as the baseline, different event stream.
    let base = report("honest-baseline");
    assert_eq!(r.tokens_paid_by_clients, base.tokens_paid_by_clients);
    assert_ne!(r.trace_digest, base.trace_digest);
}

#[test]
fn same_seed_same_trace() {
    for name in harness::bundled_names() {
        let s = harness::bundled(name).unwrap().unwrap();
        let a = harness::run(&s).unwrap();
        let b = harness::run(&s).unwrap();
        assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl(), "{name}");
        assert_eq!(a.report, b.report, "{name}");
    }
}

#[test]
fn different_seed_diverges_at_first_drawn_input() {
    let s = harness::bundled("faulty-server").unwrap().unwrap();
    let a = harness::run(&s).unwrap().trace.to_jsonl();
    let b = harness::run(&s.clone().with_seed(s.seed + 1)).unwrap().trace.to_jsonl();
    match diff_traces(&a, &b) {
        TraceDiff::Diverge { a: Some(line), .. } => {
            assert!(line.contains("\"event\":\"request-submitted\""), "{line}")
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn trace_file_round_trips_and_edits_are_located() {
    let s = harness::bundled("nonpaying-client").unwrap().unwrap();
    let out = harness::run(&s).unwrap();
    let text = out.trace.to_jsonl();
    let parsed = Trace::parse_jsonl(&text).unwrap();
    assert_eq!(parsed.digest(), out.trace.digest());
    assert_eq!(parsed.digest().to_hex(), out.report.trace_digest);

    let victim = text.lines().position(|l| l.contains("\"event\":\"ledger/")).unwrap();
    let edited: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == victim { l.replacen("\"tick\":", "\"tick\":1", 1) } else { l.to_string() } + "\n")
        .collect();
    assert!(matches!(diff_traces(&text, &edited), TraceDiff::Diverge { line, .. } if line == victim + 1));
}

#[test]
fn scenario_files_on_disk_match_bundled_copies() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    for name in harness::bundled_names() {
        let from_disk = Scenario::load(&dir.join(format!("{name}.toml"))).unwrap();
        let bundled = harness::bundled(name).unwrap().unwrap();
        assert_eq!(harness::run(&from_disk).unwrap().report.trace_digest, harness::run(&bundled).unwrap().report.trace_digest);
    }
}
