//! Communication volume of sharded data parallelism versus tensor
//! parallelism, and how sharding groups line up with context-parallel groups.

use serde::Serialize;

use crate::config::{ModelSpec, ParallelConfig, Topology};
use crate::memory::{GRAD_BYTES, PARAM_BYTES};
use crate::pipeline::SavingsReport;

/// Bytes per activation element exchanged by tensor parallelism.
pub const ACTIVATION_BYTES: u64 = 2;
/// All-gathers plus reduce-scatters per layer in sequence-parallel TP.
pub const TP_COLLECTIVES_PER_LAYER: u64 = 8;
/// Forward collectives repeated when activations are recomputed.
pub const TP_FORWARD_COLLECTIVES: u64 = 4;

fn ring_share(g: u64) -> f64 {
    if g <= 1 {
        0.0
    } else {
        (g - 1) as f64 / g as f64
    }
}

/// Bytes sent per rank for one layer and one micro-batch under TP (with CP
/// splitting the sequence).
pub fn tp_comm_volume(spec: &ModelSpec, tp: u64, cp: u64, recompute: bool) -> f64 {
    assert!(tp >= 1 && cp >= 1, "degrees must be >= 1");
    let collectives = TP_COLLECTIVES_PER_LAYER + if recompute { TP_FORWARD_COLLECTIVES } else { 0 };
    let per_collective = spec.seq_len as f64 / cp as f64
        * spec.micro_batch_size as f64
        * spec.hidden() as f64
        * ACTIVATION_BYTES as f64
        * ring_share(tp);
    per_collective * collectives as f64
}

/// Per-microbatch AG and RS bytes per rank with every all-gather issued
/// twice (forward and backward) and no reuse.
pub fn hzp_microbatch_volume(spec: &ModelSpec, cfg: &ParallelConfig) -> f64 {
    let p = spec.params_per_layer as f64;
    let layers = (spec.num_layers / cfg.pp.max(1)) as f64;
    let ag = (PARAM_BYTES as f64) * p * ring_share(cfg.z3);
    let rs = (GRAD_BYTES as f64) * p * ring_share(cfg.z2);
    layers * (2.0 * ag + rs)
}

/// Bytes sent per rank in one iteration: retained parameter all-gathers,
/// retained gradient reduce-scatters, the cross-replica all-reduce and the
/// post-step parameter all-gather. Sequence length does not appear.
pub fn hzp_comm_volume(
    spec: &ModelSpec,
    cfg: &ParallelConfig,
    microbatches: u64,
    reuse: Option<&SavingsReport>,
) -> f64 {
    let p = spec.params_per_layer as f64;
    let layers = spec.num_layers / cfg.pp.max(1);
    let (eliminated, merged) = reuse.map_or((0, 0), |r| (r.eliminated_ag(), r.merged_rs()));
    let ag_tasks = (2 * layers * microbatches).saturating_sub(eliminated);
    let rs_tasks = (layers * microbatches).saturating_sub(merged);

    let ag = ag_tasks as f64 * PARAM_BYTES as f64 * p * ring_share(cfg.z3);
    let rs = rs_tasks as f64 * GRAD_BYTES as f64 * p * ring_share(cfg.z2);
    let shard = GRAD_BYTES as f64 * p / cfg.z2 as f64;
    let ar = layers as f64 * 2.0 * shard * ring_share(cfg.dzp_replicas());
    let post = layers as f64 * PARAM_BYTES as f64 * p * ring_share(cfg.z1);
    ag + rs + ar + post
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CpInteraction {
    pub z2_intra_node: bool,
    pub z3_intra_node: bool,
    pub cp_intra_node: bool,
    /// A sharding group has the same size, and hence under contiguous
    /// placement the same node footprint, as the CP group.
    pub shares_group: bool,
    /// `tp * cp` exceeds the devices of one node.
    pub tp_cp_conflict: bool,
    /// `cp = 1`: only sharding groups are in play.
    pub sharding_only: bool,
}

fn fits_node(size: u64, topo: &Topology) -> bool {
    size <= topo.ranks_per_node && topo.ranks_per_node.is_multiple_of(size)
}

pub fn cp_group_interaction(cfg: &ParallelConfig, topo: &Topology) -> CpInteraction {
    CpInteraction {
        z2_intra_node: fits_node(cfg.z2, topo),
        z3_intra_node: fits_node(cfg.z3, topo),
        cp_intra_node: fits_node(cfg.cp, topo),
        shares_group: cfg.cp > 1 && (cfg.z3 == cfg.cp || cfg.z2 == cfg.cp),
        tp_cp_conflict: cfg.tp * cfg.cp > topo.ranks_per_node,
        sharding_only: cfg.cp == 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub seq_len: u64,
    pub tp_bytes: f64,
    pub hzp_bytes: f64,
}

/// Per-iteration bytes per rank over a range of sequence lengths: TP of
/// degree `tp` against the sharding configuration `cfg`.
pub fn seq_len_sweep(
    spec: &ModelSpec,
    cfg: &ParallelConfig,
    tp: u64,
    seq_lens: &[u64],
    recompute: bool,
) -> Vec<SweepRow> {
    seq_lens
        .iter()
        .map(|&seq_len| {
            let s = ModelSpec { seq_len, ..spec.clone() };
            let layers = (s.num_layers / cfg.pp.max(1)) as f64;
            let m = s.num_microbatches as f64;
            SweepRow {
                seq_len,
                tp_bytes: tp_comm_volume(&s, tp, cfg.cp, recompute) * layers * m,
                hzp_bytes: hzp_comm_volume(&s, cfg, s.num_microbatches, None),
            }
        })
        .collect()
}
