//! Verifiable, metered inference on a simulated ledger.
//!
//! Models are deterministic computation DAGs ([`dag`]). Disputed outputs are
//! settled by a bisection game that ends with a single-layer check
//! ([`bisection`]). Clients pay per unit over hash-chained micropayment
//! channels ([`channel`]) under SLA chains ([`sla`]), matched to servers by
//! routers ([`router`]) and served through sessions ([`service`]). Model
//! ownership is judged from committed trigger sets ([`watermark`]). The
//! [`harness`] runs all of it from scenario files.

pub mod bisection;
pub mod channel;
pub mod crypto;
pub mod dag;
pub mod harness;
pub mod ledger;
pub mod router;
pub mod service;
pub mod sla;
pub mod watermark;

pub use bisection::{run_game, GameOutcome, Party, Verdict};
pub use channel::{Micropayment, PayerWallet, Violation};
pub use crypto::{Digest, Keypair, PublicKey, Signature};
pub use dag::{commit, execute, DagModel, LayerId, Tensor, PRIME};
pub use harness::{RunReport, Scenario};
pub use ledger::{AccountId, ContractId, Ledger, LedgerConfig, Transaction};
pub use sla::{SlaChain, SlaTerms, Tokens};
