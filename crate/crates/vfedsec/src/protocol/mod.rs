//! The split-learning round protocol: topology, wire messages, and the
//! deterministic round engine.

pub mod engine;
pub mod messages;
pub mod topology;

pub use engine::{Engine, EngineParams, RoundTrace};
pub use messages::{Bus, MsgKind, SentMessage};
pub use topology::{select_batch, BatchPlan, GroupTopo, Topology, SERVER_ID};

use serde::Serialize;

/// How a round resolved with respect to dropouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundMode {
    /// No dropout occurred.
    Clean,
    /// Dropouts occurred; affected groups were padded out.
    Pad,
    /// Dropouts occurred; the whole round was abandoned.
    Discard,
}

/// Per-round record: what happened, what it cost the model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundOutcome {
    pub round: u64,
    pub mode: RoundMode,
    pub dropped_clients: Vec<u32>,
    pub dropped_groups: Vec<usize>,
    pub loss: Option<f64>,
    pub metric: Option<f64>,
    /// False when the round trained nothing (discard or total loss of
    /// segments).
    pub served: bool,
}
