//! Task graphs for one training iteration and their simulation under
//! single-stream and multi-stream scheduling.

pub mod graph;
pub mod sim;
pub mod trace;
pub mod workload;

pub use graph::{
    build_task_graph, emit, GraphLayout, GraphPolicy, PassTag, ReusePlan, StreamKind, Task, TaskGraph, TaskId, TaskKind,
};
pub use sim::{
    memory_trace, prelaunch_depth, simulate, utilization_report, BufferPool, Interval, MemorySample, MemoryTrace,
    PoolKind, SimMode, SimOptions, StreamSet, Timeline, SUMMARY_CSV_HEADER,
};
pub use trace::chrome_trace;
