//! Desk-scale NetSpectre lab: a simulated victim core behind a UDP-style
//! request protocol, and a remote attacker that reads secrets from
//! response times alone.

pub mod attacker;
pub mod cli;
pub mod config;
pub mod experiments;
pub mod stats;
pub mod uarch;
pub mod victim;
pub mod wire;
