//! Deterministic simulator of a heartbeat + DRBD + CRM high-availability
//! cluster: failure detection, replicated block storage, score-based
//! placement with fencing, scripted failure injection, and a durability
//! oracle over the client-side commit journal.

pub mod block;
pub mod cluster;
pub mod crm;
pub mod engine;
pub mod fencing;
pub mod membership;
pub mod scenario;
pub mod workload;
pub mod time;
pub mod trace;

pub use engine::{Engine, LinkSpec, LinkState, NodeId, Power, SimError, Step};
pub use time::SimTime;
pub use trace::{Trace, TraceEntry};
