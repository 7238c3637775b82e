//! Cluster resource manager: CIB configuration, score-based placement and
//! ordered transitions (fence, then stop, then start).

mod cib;
mod manager;
mod score;

pub use cib::{
    Agent, Cib, CibError, ClusterProperties, OpSpec, ResourceKind, ResourceSpec, TargetRole, DEFAULT_BOOT_DURATION,
    DEFAULT_STOP_DURATION, FENCE_START_DURATION,
};
pub use manager::{
    choose, compute_transition, instances, score, Action, FailCounts, Locations, Plan, PlanInput, RunState,
    Transition, TransitionState,
};
pub use score::Score;
