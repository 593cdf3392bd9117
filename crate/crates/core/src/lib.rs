//! Hierarchical ZeRO sharding: independent sharding degrees for optimizer
//! states (Z1), gradients (Z2) and parameters (Z3) within a data-parallel
//! group.
//!
//! * [`memory`]: static memory per rank and the sharding-plan search.
//! * [`collective`]: in-process all-gather / reduce-scatter / all-reduce and
//!   a ring cost model.
//! * [`sched`]: per-iteration task graphs and their simulation.
//! * [`pipeline`]: pipeline schedules and communication reuse across them.
//! * [`compare`]: communication volume against tensor parallelism.
//! * [`train`]: sharded training of a small network, checked against an
//!   unsharded reference.

pub mod collective;
pub mod compare;
pub mod config;
pub mod error;
pub mod memory;
pub mod pipeline;
pub mod sched;
pub mod train;

pub use collective::{all_gather, all_reduce, reduce_scatter, CollectiveKind, CostModel, DType, RankTensor};
pub use config::{
    build_process_groups, validate_config, ConfigFile, GroupKind, ModelSpec, ParallelConfig, ProcessGroup, Topology,
    ValidatedConfig,
};
pub use error::{HzpError, Result};
pub use memory::{ledger, mem_hzp, mem_zero3, mem_zp, plan_search, MemoryLedger, PlanEntry};
pub use pipeline::{build_schedule, PipeSchedule, PipeVariant, ReuseFlags, SavingsReport};
pub use sched::{build_task_graph, simulate, GraphPolicy, SimMode, TaskGraph, Timeline};
pub use train::{Precision, TinyModel};
