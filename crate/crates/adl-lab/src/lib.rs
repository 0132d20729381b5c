//! Toolkit for studying autodeleveraging (ADL) on perpetual-futures venues.
//!
//! The crate is organised bottom-up:
//!
//! * [`exchange`] holds the position book, funding, PNL, equity and leverage masses.
//! * [`liquidation`] prices and sizes liquidations and runs the per-tick loop.
//! * [`insurance`] evolves the insurance fund and sizes it with the newsvendor rule.
//! * [`policies`] implements the one-round haircut allocators (queue, pro-rata and
//!   their capped / risk-aware variants).
//! * [`metrics`] has the fairness and tail metrics plus the scaling experiments.
//! * [`control`] has multi-round severity controllers and the small game models.
//! * [`replay`] reconstructs waves, budgets and overshoot from fill data.
//! * [`scenario`] is the JSON scenario format shared by the CLI and tests.
//!
//! Everything is deterministic: random experiments take explicit seeds and use
//! ChaCha streams, so the same inputs reproduce bit-identical outputs.

pub mod control;
pub mod error;
pub mod exchange;
pub mod insurance;
pub mod liquidation;
pub mod metrics;
pub mod num;
pub mod policies;
pub mod replay;
pub mod scenario;

pub use error::{Error, Result};
