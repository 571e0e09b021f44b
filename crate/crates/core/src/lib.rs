//! Hierarchical context caching for long-horizon coding agents.
//!
//! The interaction history is an append-only [`event_log`]. A three-tier
//! cache sits on top of it: raw recent experience (L1), per-phase knowledge
//! summaries (L2, [`hierarchy`]) and cross-task wisdom (L3, [`wisdom`]).
//! [`migration`] moves information up the tiers, and the [`orchestrator`]
//! drives the draft, plan, improve and consolidate loop against pluggable
//! model backends ([`gateway`]) and an execution sandbox ([`sandbox`]).

pub mod event_log;
pub mod gateway;
pub mod hierarchy;
pub mod wisdom;
pub mod limit;
pub mod sandbox;
pub mod journal;
pub mod migration;
pub mod trace;
pub mod orchestrator;
pub mod scenario;
pub mod config;
pub mod cli;
