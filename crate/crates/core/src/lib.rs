//! Decentralized scheduling of staged vision-language inference chains
//! across a heterogeneous robot fleet.
//!
//! A discrete-event simulator ([`sim`]) runs per-stage sealed-bid auctions
//! ([`auction`]) whose bids come from a heuristic, a genetic planner
//! ([`baselines`]) or a shared actor network ([`nn`]) trained offline then
//! online ([`training`]). [`metrics`] turns runs into QoS and resource
//! reports.

pub mod auction;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod domain;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod nn;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
