//! Risk-limiting dynamic contracts for direct load control.
//!
//! A load aggregator (the principal) pays residential customers (agents) for
//! permission to modulate their flexible loads — here, air conditioners —
//! while it trades the aggregate consumption in a wholesale electricity
//! market with volatile real-time prices. Each contract promises the
//! customer a mean payoff and caps the payoff variance the customer is
//! exposed to, while the aggregator maximizes a risk-sensitive
//! (exponential-utility) objective.
//!
//! The crate covers the full workflow:
//!
//! * [`models`] — market, load, tariff, and comfort primitives shared by
//!   every other module;
//! * [`calibrate`] — fits the log-price mean-reversion model and the demand
//!   diffusion intensity from historical traces;
//! * [`hjb`] — solves the constrained risk-sensitive dynamic-programming
//!   equation on a (log-price, temperature, risk-budget) grid and extracts
//!   feedback policies;
//! * [`contract`] — packages policies into contracts with end-time
//!   compensation rules and suboptimality certificates;
//! * [`simulate`] — Monte-Carlo and trace-replay engines for closed-loop
//!   contract execution;
//! * [`verify`] — statistical checks that executed contracts deliver the
//!   promised mean payoff and respect the variance cap;
//! * [`config`] / [`cli`] — JSON run configuration and the `rldc` command
//!   line tool.
//!
//! All randomness in the crate flows from a single root seed through
//! counter-addressed streams, so every run is bit-reproducible.

pub mod calibrate;
pub mod cli;
pub mod config;
pub mod contract;
pub mod error;
pub mod hjb;
pub mod models;
pub mod simulate;
pub mod stats;
pub mod verify;

pub use error::{CoreError, Result};
