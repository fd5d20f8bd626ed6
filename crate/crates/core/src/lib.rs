//! Deterministic host-side runtime and simulator for irregular streaming
//! pipelines with region-scoped state.
//!
//! The runtime moves opaque data items through bounded queues between
//! pipeline nodes, delivers control signals precisely relative to the data
//! stream via a credit protocol, forms SIMD ensembles that never straddle a
//! region boundary, and accounts lane occupancy and simulated cost under a
//! lock-step cost model. On top of that sit the enumeration/aggregation
//! developer abstraction, a small topology description language, and three
//! benchmark applications with a parameter-sweep harness.

pub mod apps;
pub mod credit;
pub mod hash;
pub mod lang;
pub mod queue;
pub mod region;
pub mod scheduler;
pub mod simd;
pub mod topology;

pub use credit::{Link, ProtocolError, ReceiverState, SenderState};
pub use queue::{DataQueue, Signal, SignalKind, SignalQueue};
pub use region::{CompositeRef, Enumerator, HookCtx, NodeHooks, ParentArena, RegionContext, RegionError};
pub use scheduler::{
    FiringRecord, NodeBehavior, Observer, Pipeline, PipelineConfig, RunSummary, RuntimeError,
    SelectionPolicy,
};
pub use simd::{NodeStats, OccupancyStats, SimdConfig, DEFAULT_SIMD_WIDTH};
pub use topology::{Edge, NodeId, NodeKind, NodeSpec, Topology, TopologyError};
