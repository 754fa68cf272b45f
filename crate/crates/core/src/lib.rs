//! Decentralized ensemble control for demand-response events.
//!
//! Units (controllable loads) are modelled as finite-state Markov chains over
//! power levels. During an event each unit trades its electricity cost against
//! the KL divergence of its controlled transitions from its default behaviour.
//! The crate provides the closed-form consensus policies, a gossip-based
//! projected-gradient negotiation that reaches them without a coordinator,
//! a Monte Carlo simulator for the resulting power trajectories, and the
//! ingest pipeline that turns a metered power series into unit models.

pub mod consensus;
pub mod error;
pub mod ingest;
pub mod math;
pub mod simulator;
pub mod solver;

pub use error::{Error, Result};
