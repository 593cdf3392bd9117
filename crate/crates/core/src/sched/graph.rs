//! Per-iteration task graph for one pipeline rank.
//!
//! Task ids follow the order in which a single host thread would issue the
//! work ("program order"). The parameter all-gather for a compute task is
//! issued one compute task ahead of it, a gradient reduce-scatter right
//! after the backward that completes its buffer, and a layer's cross-replica
//! all-reduce right after its last reduce-scatter.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::collective::{CollectiveKind, CostModel};
use crate::config::{build_process_groups, global_rank, group_of, GroupKind, ModelSpec, ParallelConfig};
use crate::error::{HzpError, Result};
use crate::memory::{GRAD_BYTES, PARAM_BYTES};
use crate::pipeline::{build_schedule, Pass, PipeItem, PipeVariant, ReuseRule};

pub type TaskId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum TaskKind {
    Fwd,
    FwdRecompute,
    Bwd,
    AgParam,
    RsGrad,
    ArDzp,
    OptStep,
    AgPostStep,
}

impl TaskKind {
    pub fn label(self) -> &'static str {
        match self {
            TaskKind::Fwd => "FWD",
            TaskKind::FwdRecompute => "FWD-recompute",
            TaskKind::Bwd => "BWD",
            TaskKind::AgParam => "AG-param",
            TaskKind::RsGrad => "RS-grad",
            TaskKind::ArDzp => "AR-dzp",
            TaskKind::OptStep => "OPT-step",
            TaskKind::AgPostStep => "AG-post-step",
        }
    }

    pub fn is_compute(self) -> bool {
        matches!(self, TaskKind::Fwd | TaskKind::FwdRecompute | TaskKind::Bwd | TaskKind::OptStep)
    }

    pub fn stream(self) -> StreamKind {
        match self {
            TaskKind::Fwd | TaskKind::FwdRecompute | TaskKind::Bwd | TaskKind::OptStep => StreamKind::Compute,
            TaskKind::AgParam | TaskKind::AgPostStep => StreamKind::Ag,
            TaskKind::RsGrad | TaskKind::ArDzp => StreamKind::Rs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum StreamKind {
    Compute,
    Ag,
    Rs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PassTag {
    Forward,
    Backward,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Task {
    pub id: TaskId,
    pub kind: TaskKind,
    /// Global layer index (0 for iteration-level tasks).
    pub layer: u64,
    pub microbatch: u64,
    pub pass: PassTag,
    /// Schedule item this task belongs to.
    pub item: Option<usize>,
    pub duration: f64,
    pub bytes: u64,
    pub deps: Vec<TaskId>,
    /// For compute tasks: the all-gather that materialized the parameters.
    pub param_source: Option<TaskId>,
    /// True when `param_source` belongs to an earlier schedule item.
    pub param_reused: bool,
    /// For backward tasks: the reduce-scatter that consumes the gradient.
    pub grad_sink: Option<TaskId>,
}

/// Everything needed to (re-)emit the graph of one pipeline rank.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphLayout {
    pub pipeline_rank: u64,
    pub pp: u64,
    pub vpp: u64,
    pub layers_per_chunk: u64,
    pub num_microbatches: u64,
    pub items: Vec<PipeItem>,
    pub fwd_seconds: f64,
    pub opt_seconds: f64,
    pub ag_seconds: f64,
    pub rs_seconds: f64,
    pub ar_seconds: f64,
    pub ag_post_seconds: f64,
    /// Full BF16 parameters of one layer.
    pub ag_bytes: u64,
    /// Full FP32 gradient of one layer.
    pub rs_bytes: u64,
    /// FP32 gradient shard of one layer.
    pub ar_bytes: u64,
    pub dzp_replicas: u64,
    pub defer_rs: bool,
}

impl GraphLayout {
    pub fn chunk_layers(&self, virtual_stage: u64) -> std::ops::Range<u64> {
        let stage = virtual_stage * self.pp + self.pipeline_rank;
        stage * self.layers_per_chunk..(stage + 1) * self.layers_per_chunk
    }

    pub fn layers_on_rank(&self) -> u64 {
        self.layers_per_chunk * self.vpp
    }
}

/// Which schedule item's all-gather each item uses, and which item issues
/// the reduce-scatter for each item's gradients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReusePlan {
    pub ag_source: Vec<usize>,
    pub ag_rule: Vec<Option<ReuseRule>>,
    pub rs_sink: Vec<usize>,
}

impl ReusePlan {
    pub fn identity(n: usize) -> Self {
        Self { ag_source: (0..n).collect(), ag_rule: vec![None; n], rs_sink: (0..n).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphPolicy {
    pub pipeline_rank: u64,
    pub variant: PipeVariant,
    /// FLOP/s used to convert layer FLOPs into seconds.
    pub peak_flops: f64,
    pub opt_step_seconds: f64,
    /// Issue every reduce-scatter of a micro-batch after its last backward.
    pub defer_rs: bool,
}

impl Default for GraphPolicy {
    fn default() -> Self {
        Self {
            pipeline_rank: 0,
            variant: PipeVariant::OneFOneB,
            peak_flops: 1.0e15,
            opt_step_seconds: 0.0,
            defer_rs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskGraph {
    pub tasks: Vec<Task>,
    pub layout: GraphLayout,
    pub plan: ReusePlan,
    pub recompute: bool,
}

pub fn build_task_graph(
    spec: &ModelSpec,
    cfg: &ParallelConfig,
    cost: &CostModel,
    policy: &GraphPolicy,
) -> Result<TaskGraph> {
    if cfg.tp != 1 {
        return Err(HzpError::InvalidPolicy("sharded execution requires tp = 1".into()));
    }
    if policy.pipeline_rank >= cfg.pp {
        return Err(HzpError::InvalidPolicy(format!("pipeline rank {} >= pp {}", policy.pipeline_rank, cfg.pp)));
    }
    if policy.peak_flops.is_nan()
        || policy.peak_flops <= 0.0
        || policy.opt_step_seconds.is_nan()
        || policy.opt_step_seconds < 0.0
    {
        return Err(HzpError::InvalidPolicy("peak_flops must be > 0 and opt_step_seconds >= 0".into()));
    }
    let chunks = cfg.pp * cfg.vpp;
    if spec.num_layers == 0 || !spec.num_layers.is_multiple_of(chunks) {
        return Err(HzpError::InvalidPolicy(format!(
            "{} layers cannot be split into {chunks} pipeline chunks",
            spec.num_layers
        )));
    }
    let variant = if cfg.vpp > 1 { PipeVariant::Interleaved } else { policy.variant };
    let schedule = build_schedule(cfg.pp, cfg.vpp, spec.num_microbatches, variant)?;
    let items = schedule.ranks[policy.pipeline_rank as usize].clone();

    let groups = build_process_groups(cfg, &cost.topo);
    let rank0 = global_rank(cfg, policy.pipeline_rank, 0, 0, 0);
    let time = |kind: GroupKind, coll: CollectiveKind, bytes: u64| {
        let g = group_of(&groups, kind, rank0).expect("every rank belongs to one group per kind");
        cost.ring_time(coll, g.size() as u64, g.spans_nodes, bytes)
    };
    let p = spec.params_per_layer;
    let ag_bytes = PARAM_BYTES * p;
    let rs_bytes = GRAD_BYTES * p;
    let ar_bytes = GRAD_BYTES * p.div_ceil(cfg.z2);
    let layout = GraphLayout {
        pipeline_rank: policy.pipeline_rank,
        pp: cfg.pp,
        vpp: cfg.vpp,
        layers_per_chunk: spec.num_layers / chunks,
        num_microbatches: spec.num_microbatches,
        fwd_seconds: spec.forward_flops_per_layer() / policy.peak_flops,
        opt_seconds: policy.opt_step_seconds,
        ag_seconds: time(GroupKind::Z3, CollectiveKind::AllGather, ag_bytes),
        rs_seconds: time(GroupKind::Z2, CollectiveKind::ReduceScatter, rs_bytes),
        ar_seconds: time(GroupKind::DzpReplica, CollectiveKind::AllReduce, ar_bytes),
        ag_post_seconds: time(GroupKind::Z1, CollectiveKind::AllGather, ag_bytes),
        ag_bytes,
        rs_bytes,
        ar_bytes,
        dzp_replicas: cfg.dzp_replicas(),
        defer_rs: policy.defer_rs,
        items,
    };
    let plan = ReusePlan::identity(layout.items.len());
    Ok(emit(&layout, &plan, false))
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    kind: TaskKind,
    layer: u64,
    item: usize,
}

struct Emitter<'a> {
    layout: &'a GraphLayout,
    tasks: Vec<Task>,
}

impl Emitter<'_> {
    fn push(
        &mut self,
        kind: TaskKind,
        layer: u64,
        item: Option<usize>,
        duration: f64,
        bytes: u64,
        deps: Vec<TaskId>,
    ) -> TaskId {
        let id = self.tasks.len();
        let (microbatch, pass) = match item.map(|i| self.layout.items[i]) {
            Some(it) => (it.microbatch, if it.pass == Pass::F { PassTag::Forward } else { PassTag::Backward }),
            None => (0, PassTag::None),
        };
        let mut deps = deps;
        deps.sort_unstable();
        deps.dedup();
        self.tasks.push(Task {
            id,
            kind,
            layer,
            microbatch,
            pass,
            item,
            duration,
            bytes,
            deps,
            param_source: None,
            param_reused: false,
            grad_sink: None,
        });
        id
    }
}

/// Emits the task graph for `layout` under `plan`.
pub fn emit(layout: &GraphLayout, plan: &ReusePlan, recompute: bool) -> TaskGraph {
    let mut units = Vec::new();
    for (idx, it) in layout.items.iter().enumerate() {
        let layers = layout.chunk_layers(it.virtual_stage);
        match it.pass {
            Pass::F => units.extend(layers.map(|layer| Unit { kind: TaskKind::Fwd, layer, item: idx })),
            Pass::B => {
                for layer in layers.rev() {
                    if recompute {
                        units.push(Unit { kind: TaskKind::FwdRecompute, layer, item: idx });
                    }
                    units.push(Unit { kind: TaskKind::Bwd, layer, item: idx });
                }
            }
        }
    }

    let mut em = Emitter { layout, tasks: Vec::new() };
    let mut ag_of: BTreeMap<(usize, u64), TaskId> = BTreeMap::new();
    let mut bwds_of_sink: BTreeMap<(usize, u64), Vec<TaskId>> = BTreeMap::new();
    let mut rs_of_layer: BTreeMap<u64, Vec<TaskId>> = BTreeMap::new();
    let mut pending_rs: Vec<(usize, u64)> = Vec::new();
    let mut bwd_left: BTreeMap<u64, usize> = BTreeMap::new();
    for u in units.iter().filter(|u| u.kind == TaskKind::Bwd) {
        *bwd_left.entry(u.layer).or_default() += 1;
    }
    let mut opt_deps: Vec<TaskId> = Vec::new();

    let ensure_ag = |em: &mut Emitter, ag_of: &mut BTreeMap<(usize, u64), TaskId>, u: Unit| {
        let src = plan.ag_source[u.item];
        if src == u.item && !ag_of.contains_key(&(src, u.layer)) {
            let id = em.push(TaskKind::AgParam, u.layer, Some(u.item), layout.ag_seconds, layout.ag_bytes, vec![]);
            ag_of.insert((src, u.layer), id);
        }
    };

    let mut prev_compute: Option<TaskId> = None;
    if let Some(&u0) = units.first() {
        ensure_ag(&mut em, &mut ag_of, u0);
    }
    for (j, &u) in units.iter().enumerate() {
        if let Some(&next) = units.get(j + 1) {
            ensure_ag(&mut em, &mut ag_of, next);
        }
        let src = plan.ag_source[u.item];
        let ag = ag_of[&(src, u.layer)];
        let duration = match u.kind {
            TaskKind::Bwd => 2.0 * layout.fwd_seconds,
            _ => layout.fwd_seconds,
        };
        let deps: Vec<TaskId> = std::iter::once(ag).chain(prev_compute).collect();
        let id = em.push(u.kind, u.layer, Some(u.item), duration, 0, deps);
        em.tasks[id].param_source = Some(ag);
        em.tasks[id].param_reused = src != u.item;
        prev_compute = Some(id);

        if u.kind == TaskKind::Bwd {
            *bwd_left.get_mut(&u.layer).expect("counted above") -= 1;
            let sink = (plan.rs_sink[u.item], u.layer);
            bwds_of_sink.entry(sink).or_default().push(id);
            if sink.0 == u.item {
                pending_rs.push(sink);
            }
            let item_ends = units.get(j + 1).is_none_or(|n| n.item != u.item);
            if !layout.defer_rs || item_ends {
                for (sink_item, layer) in pending_rs.drain(..) {
                    let bwds = bwds_of_sink.remove(&(sink_item, layer)).unwrap_or_default();
                    // issued after the current backward, which is the last one of the item when deferring
                    let deps = bwds.iter().copied().chain([id]).collect();
                    let rs =
                        em.push(TaskKind::RsGrad, layer, Some(sink_item), layout.rs_seconds, layout.rs_bytes, deps);
                    for b in bwds {
                        em.tasks[b].grad_sink = Some(rs);
                    }
                    let rs_all = rs_of_layer.entry(layer).or_default();
                    rs_all.push(rs);
                    // The layer's gradient is complete: reduce it across replicas now.
                    if bwd_left[&layer] == 0 {
                        if layout.dzp_replicas > 1 {
                            let ar = em.push(
                                TaskKind::ArDzp,
                                layer,
                                None,
                                layout.ar_seconds,
                                layout.ar_bytes,
                                rs_all.clone(),
                            );
                            opt_deps.push(ar);
                        } else {
                            opt_deps.extend(rs_all.iter().copied());
                        }
                    }
                }
            }
        }
    }

    opt_deps.extend(prev_compute);
    let opt = em.push(TaskKind::OptStep, 0, None, layout.opt_seconds, 0, opt_deps);
    for vs in 0..layout.vpp {
        for layer in layout.chunk_layers(vs) {
            em.push(TaskKind::AgPostStep, layer, None, layout.ag_post_seconds, layout.ag_bytes, vec![opt]);
        }
    }
    TaskGraph { tasks: em.tasks, layout: layout.clone(), plan: plan.clone(), recompute }
}

impl TaskGraph {
    pub fn count(&self, kind: TaskKind) -> usize {
        self.tasks.iter().filter(|t| t.kind == kind).count()
    }

    pub fn compute_seconds(&self) -> f64 {
        self.tasks.iter().filter(|t| t.kind.is_compute()).map(|t| t.duration).sum()
    }

    pub fn comm_seconds(&self) -> f64 {
        self.tasks.iter().filter(|t| !t.kind.is_compute()).map(|t| t.duration).sum()
    }

    /// Multiplies every communication duration by `factor`.
    pub fn scale_comm(&mut self, factor: f64) {
        for t in self.tasks.iter_mut().filter(|t| !t.kind.is_compute()) {
            t.duration *= factor;
        }
    }

    /// Ids are a topological order: every dependency has a smaller id.
    pub fn is_dag(&self) -> bool {
        self.tasks.iter().enumerate().all(|(i, t)| t.id == i && t.deps.iter().all(|&d| d < i))
    }

    /// Fewest reduce-scatter buffer slots that avoid a deadlock: the most
    /// gradient buffers held at once in program order.
    pub fn min_rs_slots(&self) -> u64 {
        let mut held = 0u64;
        let mut max = 0u64;
        let mut acquired = std::collections::BTreeSet::new();
        for t in &self.tasks {
            match t.kind {
                TaskKind::Bwd => {
                    if let Some(s) = t.grad_sink {
                        if acquired.insert(s) {
                            held += 1;
                            max = max.max(held);
                        }
                    }
                }
                TaskKind::RsGrad => held -= 1,
                _ => {}
            }
        }
        max.max(1)
    }
}
