//! Discrete-event simulation of a task graph on a compute stream and
//! communication streams, with fixed-capacity ring buffer pools.
//!
//! Async mode runs all-gathers and reduce-scatters on their own streams
//! with no host synchronization: an all-gather starts as soon as a pool
//! slot is free, a reduce-scatter as soon as its backward finishes.
//!
//! Vanilla mode issues everything from one host thread onto a single
//! communication stream and, at each collective's issue point, adds the
//! synchronization the host needs for inter-stream ordering:
//!
//! * the collective waits for all compute issued before it,
//! * the next compute waits for the collective's stream predecessor,
//! * the next compute after a reduce-scatter waits for that reduce-scatter.
//!
//! Pools have a fixed number of equal slots, handed out in program order and
//! reused least-recently-freed first. A task that takes a slot waits for the
//! slot's previous user to release it, so the schedule is fully determined
//! by the graph, the pools and the mode.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::Serialize;

use crate::error::{HzpError, Result};
use crate::memory::MemoryLedger;
use crate::sched::graph::{StreamKind, TaskGraph, TaskId, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    Vanilla,
    Async,
}

impl SimMode {
    pub fn name(self) -> &'static str {
        match self {
            SimMode::Vanilla => "vanilla",
            SimMode::Async => "async",
        }
    }
}

impl std::str::FromStr for SimMode {
    type Err = HzpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(SimMode::Vanilla),
            "async" => Ok(SimMode::Async),
            other => Err(HzpError::InvalidPolicy(format!("unknown mode {other}"))),
        }
    }
}

/// Stream index per stream kind. Indices may coincide, in which case the
/// kinds share one in-order stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StreamSet {
    pub compute: usize,
    pub ag: usize,
    pub rs: usize,
}

impl StreamSet {
    pub const MULTI: StreamSet = StreamSet { compute: 0, ag: 1, rs: 2 };
    pub const SINGLE_COMM: StreamSet = StreamSet { compute: 0, ag: 1, rs: 1 };

    pub fn for_mode(mode: SimMode) -> Self {
        match mode {
            SimMode::Vanilla => Self::SINGLE_COMM,
            SimMode::Async => Self::MULTI,
        }
    }

    pub fn index(&self, kind: StreamKind) -> usize {
        match kind {
            StreamKind::Compute => self.compute,
            StreamKind::Ag => self.ag,
            StreamKind::Rs => self.rs,
        }
    }

    pub fn count(&self) -> usize {
        self.compute.max(self.ag).max(self.rs) + 1
    }

    pub fn name(&self, index: usize) -> &'static str {
        if index == self.compute {
            "compute"
        } else if index == self.ag && index == self.rs {
            "comm"
        } else if index == self.ag {
            "ag"
        } else {
            "rs"
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum PoolKind {
    Ag,
    Rs,
}

/// A persistent pool of equally sized slots reused round-robin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BufferPool {
    pub kind: PoolKind,
    pub slot_bytes: u64,
    pub slot_count: u64,
}

impl BufferPool {
    pub fn ag(graph: &TaskGraph, slots: u64) -> Self {
        Self { kind: PoolKind::Ag, slot_bytes: graph.layout.ag_bytes, slot_count: slots }
    }

    pub fn rs(graph: &TaskGraph, slots: u64) -> Self {
        Self { kind: PoolKind::Rs, slot_bytes: graph.layout.rs_bytes, slot_count: slots }
    }

    pub fn capacity(&self) -> u64 {
        self.slot_bytes * self.slot_count
    }
}

/// `floor(free_budget / per_layer_bytes)` clamped to `[1, num_layers]`.
pub fn prelaunch_depth(free_budget: u64, per_layer_bytes: u64, num_layers: u64) -> u64 {
    let d = free_budget.checked_div(per_layer_bytes).unwrap_or(num_layers);
    d.clamp(1, num_layers.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimOptions {
    pub mode: SimMode,
    /// Host-side launch cost added to every collective.
    pub launch_latency: f64,
}

impl SimOptions {
    pub fn new(mode: SimMode) -> Self {
        Self { mode, launch_latency: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub task: TaskId,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemorySample {
    pub time: f64,
    pub ag_pool_bytes: u64,
    pub rs_pool_bytes: u64,
    pub cache_bytes: u64,
}

impl MemorySample {
    pub fn total(&self) -> u64 {
        self.ag_pool_bytes + self.rs_pool_bytes + self.cache_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timeline {
    pub mode: SimMode,
    pub streams: StreamSet,
    /// Intervals per stream index, in execution order.
    pub per_stream: Vec<Vec<Interval>>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub memory_samples: Vec<MemorySample>,
    /// Peak of pool slots, gradient buffers and cached parameters.
    pub peak_memory: u64,
    pub peak_grad_bytes: u64,
    pub ag_high_water: u64,
    pub rs_high_water: u64,
    pub compute_busy: f64,
    pub compute_idle: f64,
    pub makespan: f64,
    pub layers_on_rank: u64,
    pub num_microbatches: u64,
}

#[derive(PartialEq)]
struct Event {
    time: f64,
    task: TaskId,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.task.cmp(&self.task))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct SlotUse {
    acquirer: TaskId,
    /// Program-order position of the release.
    released_at: TaskId,
    /// Tasks whose completion frees the slot.
    release: Vec<TaskId>,
}

/// Hands out pool slots in program order: an unused slot if one is left,
/// else the slot freed longest ago, else the held slot released first. For
/// buffers released in the order they were taken this is a plain ring where
/// use `k` waits for use `k - slots`. Returns the tasks each acquirer must
/// wait for.
fn assign_slots(uses: Vec<SlotUse>, slots: usize) -> Vec<(TaskId, Vec<TaskId>)> {
    let mut out = Vec::new();
    let mut fresh = slots;
    // (released_at, use index) of slots currently held, and of freed slots
    let mut held: std::collections::BTreeSet<(TaskId, usize)> = Default::default();
    let mut free: std::collections::BTreeSet<(TaskId, usize)> = Default::default();
    for (i, u) in uses.iter().enumerate() {
        while let Some(&first) = held.first() {
            if first.0 >= u.acquirer {
                break;
            }
            held.remove(&first);
            free.insert(first);
        }
        let previous = if fresh > 0 {
            fresh -= 1;
            None
        } else {
            free.pop_first().or_else(|| held.pop_first())
        };
        if let Some((_, j)) = previous {
            out.push((u.acquirer, uses[j].release.clone()));
        }
        held.insert((u.released_at, i));
    }
    out
}

/// Finish-to-start constraints: every task in `preds[t]` must end before `t`
/// starts.
fn constraints(graph: &TaskGraph, streams: &StreamSet, pools: &[BufferPool; 2], mode: SimMode) -> Vec<Vec<TaskId>> {
    let tasks = &graph.tasks;
    let mut preds: Vec<Vec<TaskId>> = tasks.iter().map(|t| t.deps.clone()).collect();

    // Consumers whose completion frees an all-gather slot.
    let mut own_consumers: Vec<Vec<TaskId>> = vec![Vec::new(); tasks.len()];
    for t in tasks {
        if let (Some(src), false) = (t.param_source, t.param_reused) {
            own_consumers[src].push(t.id);
        }
    }
    let ag_uses: Vec<SlotUse> = tasks
        .iter()
        .filter(|t| matches!(t.kind, TaskKind::AgParam | TaskKind::AgPostStep))
        .map(|t| {
            let release = if t.kind == TaskKind::AgParam { own_consumers[t.id].clone() } else { vec![t.id] };
            SlotUse { acquirer: t.id, released_at: release.iter().copied().max().unwrap_or(t.id), release }
        })
        .collect();

    // Gradient buffers: acquired by the first backward writing to a sink,
    // released when that sink's reduce-scatter ends.
    let mut seen = std::collections::BTreeSet::new();
    let rs_uses: Vec<SlotUse> = tasks
        .iter()
        .filter(|t| t.kind == TaskKind::Bwd)
        .filter_map(|t| t.grad_sink.filter(|s| seen.insert(*s)).map(|s| (t.id, s)))
        .map(|(acquirer, sink)| SlotUse { acquirer, released_at: sink, release: vec![sink] })
        .collect();

    for (uses, pool) in [(ag_uses, &pools[0]), (rs_uses, &pools[1])] {
        for (acquirer, wait) in assign_slots(uses, pool.slot_count as usize) {
            preds[acquirer].extend(wait);
        }
    }

    if mode == SimMode::Vanilla {
        let mut last_compute: Option<TaskId> = None;
        let mut last_on_stream: Vec<Option<TaskId>> = vec![None; streams.count()];
        // (stream predecessor, reduce-scatter) the next compute must wait for
        let mut pending: Vec<TaskId> = Vec::new();
        for t in tasks {
            let s = streams.index(t.kind.stream());
            if t.kind.is_compute() {
                preds[t.id].append(&mut pending);
                last_compute = Some(t.id);
            } else {
                preds[t.id].extend(last_compute);
                pending.extend(last_on_stream[s]);
                if t.kind == TaskKind::RsGrad {
                    pending.push(t.id);
                }
            }
            last_on_stream[s] = Some(t.id);
        }
    }
    for p in &mut preds {
        p.sort_unstable();
        p.dedup();
    }
    preds
}

pub fn simulate(
    graph: &TaskGraph,
    streams: &StreamSet,
    pools: &[BufferPool; 2],
    opts: &SimOptions,
) -> Result<Timeline> {
    for pool in pools {
        if pool.slot_count == 0 {
            return Err(HzpError::InvalidPolicy(format!("{:?} pool has no slots", pool.kind)));
        }
    }
    if pools[0].slot_bytes < graph.layout.ag_bytes || pools[1].slot_bytes < graph.layout.rs_bytes {
        return Err(HzpError::InvalidPolicy("pool slots smaller than one layer".into()));
    }
    let tasks = &graph.tasks;
    let n = tasks.len();
    let preds = constraints(graph, streams, pools, opts.mode);
    let mut succs: Vec<Vec<TaskId>> = vec![Vec::new(); n];
    let mut unmet: Vec<usize> = vec![0; n];
    for (t, ps) in preds.iter().enumerate() {
        unmet[t] = ps.len();
        for &p in ps {
            succs[p].push(t);
        }
    }
    let duration = |t: TaskId| {
        let d = tasks[t].duration;
        if tasks[t].kind.is_compute() {
            d
        } else {
            d + opts.launch_latency
        }
    };

    let nstreams = streams.count();
    let queues: Vec<Vec<TaskId>> = (0..nstreams)
        .map(|s| tasks.iter().filter(|t| streams.index(t.kind.stream()) == s).map(|t| t.id).collect())
        .collect();
    let mut head = vec![0usize; nstreams];
    let mut busy = vec![false; nstreams];
    let mut start = vec![f64::NAN; n];
    let mut end = vec![f64::NAN; n];
    let mut per_stream: Vec<Vec<Interval>> = vec![Vec::new(); nstreams];
    let mut events = BinaryHeap::new();
    let mut now = 0.0f64;
    let mut finished = 0usize;

    loop {
        for s in 0..nstreams {
            if busy[s] {
                continue;
            }
            if let Some(&t) = queues[s].get(head[s]) {
                if unmet[t] == 0 {
                    start[t] = now;
                    end[t] = now + duration(t);
                    busy[s] = true;
                    head[s] += 1;
                    events.push(Event { time: end[t], task: t });
                }
            }
        }
        let Some(ev) = events.pop() else {
            if finished == n {
                break;
            }
            let first_blocked = (0..nstreams).filter_map(|s| queues[s].get(head[s]).copied()).min().unwrap_or(0);
            return Err(HzpError::DeadlockDetected { pending: n - finished, first_blocked });
        };
        now = ev.time;
        let t = ev.task;
        finished += 1;
        let s = streams.index(tasks[t].kind.stream());
        busy[s] = false;
        per_stream[s].push(Interval { task: t, start: start[t], end: end[t] });
        for &u in &succs[t] {
            unmet[u] -= 1;
        }
    }

    let makespan = end.iter().copied().fold(0.0, f64::max);
    let compute_busy: f64 = tasks.iter().filter(|t| t.kind.is_compute()).map(|t| t.duration).sum();
    let mut tl = Timeline {
        mode: opts.mode,
        streams: *streams,
        per_stream,
        start,
        end,
        memory_samples: Vec::new(),
        peak_memory: 0,
        peak_grad_bytes: 0,
        ag_high_water: 0,
        rs_high_water: 0,
        compute_busy,
        compute_idle: (makespan - compute_busy).max(0.0),
        makespan,
        layers_on_rank: graph.layout.layers_on_rank(),
        num_microbatches: graph.layout.num_microbatches,
    };
    trace_memory(graph, &mut tl);
    Ok(tl)
}

#[derive(Clone, Copy)]
enum Bucket {
    Ag,
    Rs,
    Cache,
}

fn trace_memory(graph: &TaskGraph, tl: &mut Timeline) {
    let tasks = &graph.tasks;
    let (ag_b, rs_b) = (graph.layout.ag_bytes, graph.layout.rs_bytes);
    // (time, is_alloc, bucket)
    let mut events: Vec<(f64, bool, Bucket)> = Vec::new();
    let mut push = |from: f64, to: f64, b: Bucket| {
        if to <= from {
            return;
        }
        events.push((from, true, b));
        events.push((to, false, b));
    };
    for t in tasks {
        match t.kind {
            TaskKind::AgParam => {
                let own = tasks.iter().filter(|c| c.param_source == Some(t.id) && !c.param_reused);
                let release = own.map(|c| tl.end[c.id]).fold(tl.end[t.id], f64::max);
                push(tl.start[t.id], release, Bucket::Ag);
                let reused_until = tasks
                    .iter()
                    .filter(|c| c.param_source == Some(t.id) && c.param_reused)
                    .map(|c| tl.end[c.id])
                    .fold(f64::NEG_INFINITY, f64::max);
                if reused_until > release {
                    push(release, reused_until, Bucket::Cache);
                }
            }
            TaskKind::AgPostStep => push(tl.start[t.id], tl.end[t.id], Bucket::Ag),
            TaskKind::RsGrad => {
                let first = tasks
                    .iter()
                    .filter(|c| c.grad_sink == Some(t.id))
                    .map(|c| tl.start[c.id])
                    .fold(tl.start[t.id], f64::min);
                push(first, tl.end[t.id], Bucket::Rs);
            }
            _ => {}
        }
    }
    // releases before allocations at the same instant
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (mut ag, mut rs, mut cache) = (0u64, 0u64, 0u64);
    for (time, alloc, bucket) in events {
        let slot = match bucket {
            Bucket::Ag => &mut ag,
            Bucket::Rs => &mut rs,
            Bucket::Cache => &mut cache,
        };
        if alloc {
            *slot += 1;
        } else {
            *slot -= 1;
        }
        tl.ag_high_water = tl.ag_high_water.max(ag);
        tl.rs_high_water = tl.rs_high_water.max(rs);
        let sample =
            MemorySample { time, ag_pool_bytes: ag * ag_b, rs_pool_bytes: rs * rs_b, cache_bytes: cache * ag_b };
        tl.peak_memory = tl.peak_memory.max(sample.total());
        tl.peak_grad_bytes = tl.peak_grad_bytes.max(sample.rs_pool_bytes);
        match tl.memory_samples.last_mut() {
            Some(last) if last.time == time => *last = sample,
            _ => tl.memory_samples.push(sample),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryTrace {
    /// Static ledger bytes plus the most pool and cache bytes live at once.
    pub peak_bytes: u64,
    /// `(reserved - max concurrently live pool bytes) / reserved`.
    pub fragmentation: f64,
}

pub fn memory_trace(timeline: &Timeline, ledger: &MemoryLedger, pools: &[BufferPool; 2]) -> MemoryTrace {
    let reserved: u64 = pools.iter().map(|p| p.capacity()).sum();
    let live = timeline
        .memory_samples
        .iter()
        .map(|s| s.ag_pool_bytes.min(pools[0].capacity()) + s.rs_pool_bytes.min(pools[1].capacity()))
        .max()
        .unwrap_or(0);
    let fragmentation = if reserved == 0 { 0.0 } else { (reserved - live) as f64 / reserved as f64 };
    MemoryTrace { peak_bytes: ledger.total_static + timeline.peak_memory, fragmentation }
}

/// Model FLOPs (forward plus backward, recompute excluded) over
/// `makespan * peak_flops`.
pub fn utilization_report(timeline: &Timeline, spec: &crate::config::ModelSpec, peak_flops: f64) -> f64 {
    let flops = 3.0 * spec.forward_flops_per_layer() * (timeline.layers_on_rank * timeline.num_microbatches) as f64;
    if timeline.makespan <= 0.0 {
        return 0.0;
    }
    flops / (timeline.makespan * peak_flops)
}

impl Timeline {
    /// Checks dependency soundness and per-stream exclusivity.
    pub fn verify(&self, graph: &TaskGraph) -> std::result::Result<(), String> {
        for t in &graph.tasks {
            for &d in &t.deps {
                if self.start[t.id] < self.end[d] {
                    return Err(format!("task {} starts before dependency {} ends", t.id, d));
                }
            }
        }
        for (s, ivs) in self.per_stream.iter().enumerate() {
            for w in ivs.windows(2) {
                if w[1].start < w[0].end {
                    return Err(format!("stream {s}: tasks {} and {} overlap", w[0].task, w[1].task));
                }
            }
        }
        Ok(())
    }

    pub fn summary_csv_row(&self, trace: &MemoryTrace) -> String {
        format!(
            "{},{},{},{},{}",
            self.mode.name(),
            self.makespan,
            self.compute_idle,
            trace.peak_bytes,
            trace.fragmentation
        )
    }
}

pub const SUMMARY_CSV_HEADER: &str = "mode,makespan_s,compute_idle_s,peak_bytes,fragmentation";
