//! Chrome Trace Event export (`chrome://tracing`, Perfetto).

use serde_json::{json, Value};

use crate::sched::graph::TaskGraph;
use crate::sched::sim::Timeline;

const PID: u64 = 0;

fn micros(seconds: f64) -> f64 {
    seconds * 1.0e6
}

/// One thread track per stream with complete (`X`) events, plus counter
/// (`C`) tracks for pool and cache bytes. Timestamps are microseconds.
pub fn chrome_trace(graph: &TaskGraph, timeline: &Timeline) -> Value {
    let mut events = Vec::new();
    events.push(json!({"name": "process_name", "ph": "M", "pid": PID, "args": {"name": timeline.mode.name()}}));
    for s in 0..timeline.per_stream.len() {
        events.push(json!({
            "name": "thread_name", "ph": "M", "pid": PID, "tid": s,
            "args": {"name": timeline.streams.name(s)}
        }));
    }
    for (s, intervals) in timeline.per_stream.iter().enumerate() {
        for iv in intervals {
            let task = &graph.tasks[iv.task];
            events.push(json!({
                "name": task.kind.label(),
                "cat": timeline.streams.name(s),
                "ph": "X",
                "pid": PID,
                "tid": s,
                "ts": micros(iv.start),
                "dur": micros(iv.end - iv.start),
                "args": {
                    "id": task.id,
                    "layer": task.layer,
                    "microbatch": task.microbatch,
                    "bytes": task.bytes,
                }
            }));
        }
    }
    for sample in &timeline.memory_samples {
        events.push(json!({
            "name": "memory",
            "ph": "C",
            "pid": PID,
            "ts": micros(sample.time),
            "args": {
                "ag_pool": sample.ag_pool_bytes,
                "rs_pool": sample.rs_pool_bytes,
                "cache": sample.cache_bytes,
            }
        }));
    }
    Value::Array(events)
}
