//! Situated multi-agent systems on a deterministic discrete-event harness.

pub mod agent;
pub mod ants;
pub mod codec;
pub mod dyncnet;
pub mod env;
pub mod env_types;
pub mod fields;
pub mod freeflow;
pub mod graph;
pub mod kernel;
pub mod locking;
pub mod perception;
pub mod scenario;
pub mod value;
