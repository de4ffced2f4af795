//! Conversation-aware nudge engine.
//!
//! Per-second speech detection feeds a conversation score; a nudge policy
//! lights the device and plays short audio content during lulls, backs off
//! when nudges do not help and eventually gives up on audio. Sessions are
//! logged one row per second, can be simulated with a stochastic dyad model,
//! and are summarised with the usual two-group statistics.

pub mod analytics;
pub mod content;
pub mod detect;
pub mod policy;
pub mod score;
pub mod engine;
pub mod sessionlog;
pub mod sim;
