//! The run summary.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ledger::AccountId;
use crate::sla::Tokens;
use crate::watermark::OwnershipRuling;

use super::scenario::Role;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestCounts {
    pub scheduled: u32,
    pub submitted: u32,
    pub served: u32,
    pub paid: u32,
    /// Proven wrong in a dispute (or failed to evaluate); nothing owed.
    pub voided: u32,
    /// Served but the client refused to pay.
    pub unpaid: u32,
    /// Never submitted, keyed by reason.
    pub skipped: BTreeMap<String, u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisputeCounts {
    pub raised: u32,
    /// Disputes with at least one honest party.
    pub with_honest_party: u32,
    pub honest_won: u32,
    pub honest_lost: u32,
    /// Payment disputes: rulings by kind.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub rulings: BTreeMap<String, u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultCounts {
    pub injected: u32,
    /// A dispute proved the server wrong.
    pub detected: u32,
    /// The perturbation did not reach the output.
    pub masked: u32,
    /// No challenger sampled the response.
    pub unsampled: u32,
    /// Wrong output that was sampled or disputed yet not proven wrong.
    pub escaped: u32,
}

impl FaultCounts {
    /// Every fault was caught or never mattered.
    pub fn contained(&self) -> bool {
        self.escaped == 0 && self.injected == self.detected + self.masked + self.unsampled
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaCounts {
    pub posted: u32,
    /// Commitments equal to the digest of the output actually delivered.
    pub consistent: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConservationCheck {
    pub checks: u32,
    pub violations: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceLine {
    pub account: AccountId,
    pub role: Role,
    pub honest: bool,
    pub initial: Tokens,
    pub final_balance: Tokens,
    /// Fair price of services the account consumed.
    pub consumed: Tokens,
    /// Fees the account legitimately owed.
    pub fees_owed: Tokens,
    /// `initial − consumed − fees_owed`, floored at zero.
    pub floor: Tokens,
    pub solvent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OwnershipOutcome {
    pub ruling: OwnershipRuling,
    /// The owner's claim judged against the unwatermarked model.
    pub unmarked_match_fraction: f64,
    pub unmarked_winner: Option<AccountId>,
    /// Ruling unchanged when the claims are presented in reverse order.
    pub order_invariant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub final_tick: u64,
    pub requests: RequestCounts,
    pub payments_settled: u32,
    pub tokens_paid_by_clients: Tokens,
    pub payment_disputes: DisputeCounts,
    pub inference_disputes: DisputeCounts,
    /// Bisection rounds → number of games.
    pub rounds_histogram: BTreeMap<u32, u32>,
    pub faults: FaultCounts,
    pub da: DaCounts,
    pub conservation: ConservationCheck,
    pub load_accounting_ok: bool,
    pub balances: Vec<BalanceLine>,
    pub ownership: Option<OwnershipOutcome>,
    pub trace_records: usize,
    pub trace_digest: String,
    pub ledger_digest: String,
}

impl RunReport {
    pub fn honest_lost_none(&self) -> bool {
        self.payment_disputes.honest_lost == 0 && self.inference_disputes.honest_lost == 0
    }

    pub fn honest_solvent(&self) -> bool {
        self.balances.iter().filter(|b| b.honest).all(|b| b.solvent)
    }

    pub fn conserved(&self) -> bool {
        self.conservation.violations == 0
    }

    pub fn balance(&self, id: &str) -> Option<&BalanceLine> {
        self.balances.iter().find(|b| b.account.as_str() == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.requests;
        writeln!(f, "scenario {} (seed {}), {} ticks", self.scenario, self.seed, self.final_tick)?;
        writeln!(
            f,
            "requests: {} scheduled, {} served, {} paid, {} voided, {} unpaid",
            r.scheduled, r.served, r.paid, r.voided, r.unpaid
        )?;
        for (why, n) in &r.skipped {
            writeln!(f, "  skipped ({why}): {n}")?;
        }
        for (name, d) in [("payment", &self.payment_disputes), ("inference", &self.inference_disputes)] {
            writeln!(
                f,
                "{name} disputes: {} raised, honest won {} / lost {}",
                d.raised, d.honest_won, d.honest_lost
            )?;
        }
        if !self.rounds_histogram.is_empty() {
            let h: Vec<String> = self.rounds_histogram.iter().map(|(k, v)| format!("{k}:{v}")).collect();
            writeln!(f, "bisection rounds: {}", h.join(" "))?;
        }
        let fc = &self.faults;
        writeln!(
            f,
            "faults: {} injected, {} detected, {} masked, {} unsampled, {} escaped",
            fc.injected, fc.detected, fc.masked, fc.unsampled, fc.escaped
        )?;
        writeln!(
            f,
            "conservation: {} checks, {} violations; load accounting {}",
            self.conservation.checks,
            self.conservation.violations,
            if self.load_accounting_ok { "ok" } else { "BROKEN" }
        )?;
        for b in &self.balances {
            writeln!(
                f,
                "  {:<12} {:>8} -> {:>8}  floor {:>8}{}",
                b.account.as_str(),
                b.initial,
                b.final_balance,
                b.floor,
                match (b.honest, b.solvent) {
                    (true, true) => "",
                    (true, false) => "  INSOLVENT",
                    (false, _) => "  (byzantine)",
                }
            )?;
        }
        if let Some(o) = &self.ownership {
            writeln!(
                f,
                "ownership of {}: {}",
                o.ruling.model_id,
                o.ruling.winner.as_ref().map_or("no winner", |w| w.as_str())
            )?;
        }
        write!(f, "trace digest {}", self.trace_digest)
    }
}
