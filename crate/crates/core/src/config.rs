//! Model shape, parallel layout and cluster topology, plus the process-group
//! placement every other module builds on.
//!
//! Ranks are laid out node-major and contiguously. Within the global rank
//! space the data-parallel index varies fastest, then tensor-parallel, then
//! context-parallel, then pipeline:
//!
//! `rank = ((pp_idx * cp + cp_idx) * tp + tp_idx) * dp + dp_idx`
//!
//! so every sharding group (Z1/Z2/Z3) is a contiguous rank range.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HzpError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u64,
    /// Elements per transformer layer.
    pub params_per_layer: u64,
    #[serde(default)]
    pub embedding_params: u64,
    pub seq_len: u64,
    pub micro_batch_size: u64,
    pub num_microbatches: u64,
    pub flops_per_token_per_layer: f64,
    /// Hidden width used for activation-volume estimates. Derived from
    /// `params_per_layer ~= 12 h^2` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_size: Option<u64>,
}

impl ModelSpec {
    pub fn total_params(&self) -> u64 {
        self.num_layers * self.params_per_layer + self.embedding_params
    }

    pub fn hidden(&self) -> u64 {
        self.hidden_size.unwrap_or_else(|| ((self.params_per_layer as f64 / 12.0).sqrt().round() as u64).max(1))
    }

    /// Forward FLOPs for one layer on one micro-batch.
    pub fn forward_flops_per_layer(&self) -> f64 {
        self.flops_per_token_per_layer * (self.seq_len * self.micro_batch_size) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub dp: u64,
    /// Optimizer-state sharding group size.
    pub z1: u64,
    /// Gradient sharding group size.
    pub z2: u64,
    /// Parameter sharding group size.
    pub z3: u64,
    #[serde(default = "one")]
    pub pp: u64,
    #[serde(default = "one")]
    pub vpp: u64,
    #[serde(default = "one")]
    pub cp: u64,
    #[serde(default = "one")]
    pub tp: u64,
}

fn one() -> u64 {
    1
}

impl ParallelConfig {
    pub fn data_parallel(dp: u64, z1: u64, z2: u64, z3: u64) -> Self {
        Self { dp, z1, z2, z3, pp: 1, vpp: 1, cp: 1, tp: 1 }
    }

    pub fn world_size(&self) -> u64 {
        self.dp * self.pp * self.cp * self.tp
    }

    /// Number of gradient-shard replicas that meet in a DZP all-reduce.
    pub fn dzp_replicas(&self) -> u64 {
        self.dp / self.z2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub num_nodes: u64,
    pub ranks_per_node: u64,
    /// Bytes per second.
    pub intra_bw: f64,
    pub inter_bw: f64,
    /// Seconds.
    #[serde(default)]
    pub intra_latency: f64,
    #[serde(default)]
    pub inter_latency: f64,
}

impl Topology {
    pub fn total_ranks(&self) -> u64 {
        self.num_nodes * self.ranks_per_node
    }

    pub fn node_of(&self, rank: u64) -> u64 {
        rank / self.ranks_per_node
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GroupKind {
    Z1,
    Z2,
    Z3,
    DzpReplica,
    Pp,
    Cp,
    Tp,
}

impl GroupKind {
    pub const ALL: [GroupKind; 7] = [
        GroupKind::Z1,
        GroupKind::Z2,
        GroupKind::Z3,
        GroupKind::DzpReplica,
        GroupKind::Pp,
        GroupKind::Cp,
        GroupKind::Tp,
    ];
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GroupKind::Z1 => "Z1",
            GroupKind::Z2 => "Z2",
            GroupKind::Z3 => "Z3",
            GroupKind::DzpReplica => "DZP-replica",
            GroupKind::Pp => "PP",
            GroupKind::Cp => "CP",
            GroupKind::Tp => "TP",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProcessGroup {
    pub kind: GroupKind,
    /// Ascending global ranks.
    pub ranks: Vec<u64>,
    pub spans_nodes: bool,
}

impl ProcessGroup {
    pub fn new(kind: GroupKind, mut ranks: Vec<u64>, topo: &Topology) -> Self {
        ranks.sort_unstable();
        let spans_nodes = match (ranks.first(), ranks.last()) {
            (Some(&a), Some(_)) => ranks.iter().any(|&r| topo.node_of(r) != topo.node_of(a)),
            _ => false,
        };
        Self { kind, ranks, spans_nodes }
    }

    /// A group that is not tied to a topology; used by the collective
    /// simulator and tests.
    pub fn local(kind: GroupKind, size: usize) -> Self {
        Self { kind, ranks: (0..size as u64).collect(), spans_nodes: false }
    }

    pub fn size(&self) -> usize {
        self.ranks.len()
    }

    pub fn position(&self, rank: u64) -> Option<usize> {
        self.ranks.iter().position(|&r| r == rank)
    }
}

pub type GroupMap = BTreeMap<GroupKind, Vec<ProcessGroup>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    pub spec: ModelSpec,
    pub cfg: ParallelConfig,
    pub topo: Topology,
    pub total_params: u64,
    pub total_ranks: u64,
    pub groups_per_kind: BTreeMap<GroupKind, u64>,
}

pub fn validate_config(spec: &ModelSpec, cfg: &ParallelConfig, topo: &Topology) -> Result<ValidatedConfig> {
    let total_params = spec.total_params();
    if total_params == 0 {
        return Err(HzpError::EmptyModel);
    }
    if spec.num_microbatches == 0 || spec.seq_len == 0 || spec.micro_batch_size == 0 {
        return Err(HzpError::InvalidConfig("num_microbatches, seq_len and micro_batch_size must be >= 1".into()));
    }
    if spec.flops_per_token_per_layer.is_nan() || spec.flops_per_token_per_layer < 0.0 {
        return Err(HzpError::InvalidConfig("flops_per_token_per_layer must be >= 0".into()));
    }
    for (name, v) in [
        ("dp", cfg.dp),
        ("z1", cfg.z1),
        ("z2", cfg.z2),
        ("z3", cfg.z3),
        ("pp", cfg.pp),
        ("vpp", cfg.vpp),
        ("cp", cfg.cp),
        ("tp", cfg.tp),
    ] {
        if v == 0 {
            return Err(HzpError::InvalidConfig(format!("{name} must be >= 1")));
        }
    }
    for (name, z) in [("z1", cfg.z1), ("z2", cfg.z2), ("z3", cfg.z3)] {
        if !cfg.dp.is_multiple_of(z) {
            return Err(HzpError::NonDivisible(format!("{name}={z} does not divide dp={}", cfg.dp)));
        }
    }
    if cfg.vpp > 1 && cfg.pp == 1 {
        return Err(HzpError::InvalidConfig("vpp > 1 requires pp > 1".into()));
    }
    validate_topology(topo)?;
    let total_ranks = topo.total_ranks();
    if cfg.world_size() != total_ranks {
        return Err(HzpError::NonDivisible(format!(
            "dp*pp*cp*tp = {} but topology has {total_ranks} ranks",
            cfg.world_size()
        )));
    }
    let blocks = cfg.pp * cfg.cp * cfg.tp;
    let groups_per_kind = BTreeMap::from([
        (GroupKind::Z1, blocks * (cfg.dp / cfg.z1)),
        (GroupKind::Z2, blocks * (cfg.dp / cfg.z2)),
        (GroupKind::Z3, blocks * (cfg.dp / cfg.z3)),
        (GroupKind::DzpReplica, blocks * cfg.z2),
        (GroupKind::Pp, total_ranks / cfg.pp),
        (GroupKind::Cp, total_ranks / cfg.cp),
        (GroupKind::Tp, total_ranks / cfg.tp),
    ]);
    Ok(ValidatedConfig { spec: spec.clone(), cfg: *cfg, topo: *topo, total_params, total_ranks, groups_per_kind })
}

fn validate_topology(topo: &Topology) -> Result<()> {
    if topo.num_nodes == 0 || topo.ranks_per_node == 0 {
        return Err(HzpError::InvalidConfig("topology must have at least one rank".into()));
    }
    if topo.inter_bw.is_nan() || topo.inter_bw <= 0.0 || topo.intra_bw < topo.inter_bw {
        return Err(HzpError::InvalidConfig("require intra_bw >= inter_bw > 0".into()));
    }
    if !(topo.intra_latency >= 0.0 && topo.inter_latency >= 0.0) {
        return Err(HzpError::InvalidConfig("latencies must be >= 0".into()));
    }
    Ok(())
}

/// Global rank of a coordinate in the (pp, cp, tp, dp) grid.
pub fn global_rank(cfg: &ParallelConfig, pp_idx: u64, cp_idx: u64, tp_idx: u64, dp_idx: u64) -> u64 {
    ((pp_idx * cfg.cp + cp_idx) * cfg.tp + tp_idx) * cfg.dp + dp_idx
}

pub fn build_process_groups(cfg: &ParallelConfig, topo: &Topology) -> GroupMap {
    let mut map: GroupMap = GroupKind::ALL.iter().map(|&k| (k, Vec::new())).collect();
    let mut push = |kind: GroupKind, ranks: Vec<u64>| {
        map.get_mut(&kind).unwrap().push(ProcessGroup::new(kind, ranks, topo));
    };

    for p in 0..cfg.pp {
        for c in 0..cfg.cp {
            for t in 0..cfg.tp {
                let base = global_rank(cfg, p, c, t, 0);
                for (kind, z) in [(GroupKind::Z1, cfg.z1), (GroupKind::Z2, cfg.z2), (GroupKind::Z3, cfg.z3)] {
                    for g in 0..cfg.dp / z {
                        push(kind, (base + g * z..base + (g + 1) * z).collect());
                    }
                }
                for shard in 0..cfg.z2 {
                    push(GroupKind::DzpReplica, (0..cfg.dp / cfg.z2).map(|g| base + g * cfg.z2 + shard).collect());
                }
            }
        }
    }
    for c in 0..cfg.cp {
        for t in 0..cfg.tp {
            for d in 0..cfg.dp {
                push(GroupKind::Pp, (0..cfg.pp).map(|p| global_rank(cfg, p, c, t, d)).collect());
            }
        }
    }
    for p in 0..cfg.pp {
        for t in 0..cfg.tp {
            for d in 0..cfg.dp {
                push(GroupKind::Cp, (0..cfg.cp).map(|c| global_rank(cfg, p, c, t, d)).collect());
            }
        }
    }
    for p in 0..cfg.pp {
        for c in 0..cfg.cp {
            for d in 0..cfg.dp {
                push(GroupKind::Tp, (0..cfg.tp).map(|t| global_rank(cfg, p, c, t, d)).collect());
            }
        }
    }
    for groups in map.values_mut() {
        groups.sort_by_key(|g| g.ranks[0]);
    }
    map
}

/// The group of `kind` that contains `rank`.
pub fn group_of(groups: &GroupMap, kind: GroupKind, rank: u64) -> Option<&ProcessGroup> {
    groups.get(&kind)?.iter().find(|g| g.ranks.contains(&rank))
}

/// Extra knobs read from an optional `[simulation]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSection {
    /// Peak device FLOP/s used to turn layer FLOPs into seconds.
    pub peak_flops: f64,
    /// Device memory per rank in bytes.
    pub device_memory: u64,
    pub activation_estimate: u64,
    pub launch_latency: f64,
    pub rs_slots: u64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            peak_flops: 1.0e15,
            device_memory: 80 * (1 << 30),
            activation_estimate: 0,
            launch_latency: 0.0,
            rs_slots: 2,
        }
    }
}

/// Optional `[verify]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifySection {
    pub dp: Vec<u64>,
    pub microbatches: Vec<usize>,
    pub dims: Vec<usize>,
    pub samples_per_microbatch: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { dp: vec![1, 2, 4], microbatches: vec![1, 2], dims: vec![8, 16, 16, 4], samples_per_microbatch: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    pub model: ModelSpec,
    pub parallel: ParallelConfig,
    pub topology: Topology,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub verify: VerifySection,
}

impl ConfigFile {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| HzpError::Parse(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| HzpError::Parse(e.to_string()))
    }

    /// Loads JSON when the extension is `.json`, TOML otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HzpError::Parse(format!("{}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        }
    }

    pub fn validate(&self) -> Result<ValidatedConfig> {
        validate_config(&self.model, &self.parallel, &self.topology)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(layers: u64, per_layer: u64) -> ModelSpec {
        ModelSpec {
            name: "t".into(),
            num_layers: layers,
            params_per_layer: per_layer,
            embedding_params: 0,
            seq_len: 1024,
            micro_batch_size: 1,
            num_microbatches: 1,
            flops_per_token_per_layer: 1.0e6,
            hidden_size: None,
        }
    }

    fn topo(nodes: u64, per_node: u64) -> Topology {
        Topology {
            num_nodes: nodes,
            ranks_per_node: per_node,
            intra_bw: 400e9,
            inter_bw: 25e9,
            intra_latency: 0.0,
            inter_latency: 0.0,
        }
    }

    #[test]
    fn dense36b_layout_is_valid() {
        let cfg = ParallelConfig { dp: 64, z1: 64, z2: 8, z3: 8, pp: 4, vpp: 1, cp: 8, tp: 1 };
        let v = validate_config(&spec(4, 100), &cfg, &topo(256, 8)).unwrap();
        assert_eq!(v.total_ranks, 2048);
        assert_eq!(v.groups_per_kind[&GroupKind::Z3], 4 * 8 * 8);
    }

    #[test]
    fn rejects_non_divisor() {
        let cfg = ParallelConfig::data_parallel(8, 3, 1, 1);
        assert!(matches!(validate_config(&spec(1, 10), &cfg, &topo(1, 8)), Err(HzpError::NonDivisible(_))));
    }

    #[test]
    fn rejects_product_mismatch_and_empty_model() {
        let cfg = ParallelConfig::data_parallel(4, 1, 1, 1);
        assert!(matches!(validate_config(&spec(1, 10), &cfg, &topo(1, 8)), Err(HzpError::NonDivisible(_))));
        let cfg = ParallelConfig::data_parallel(8, 1, 1, 1);
        assert_eq!(validate_config(&spec(0, 10), &cfg, &topo(1, 8)), Err(HzpError::EmptyModel));
    }

    #[test]
    fn vpp_needs_pipeline() {
        let cfg = ParallelConfig { vpp: 2, ..ParallelConfig::data_parallel(8, 1, 1, 1) };
        assert!(matches!(validate_config(&spec(1, 10), &cfg, &topo(1, 8)), Err(HzpError::InvalidConfig(_))));
    }

    #[test]
    fn degenerate_single_replica() {
        let cfg = ParallelConfig::data_parallel(1, 1, 1, 1);
        validate_config(&spec(1, 10), &cfg, &topo(1, 1)).unwrap();
    }

    #[test]
    fn intra_node_parameter_groups() {
        let cfg = ParallelConfig::data_parallel(16, 16, 8, 8);
        let groups = build_process_groups(&cfg, &topo(2, 8));
        let z3 = &groups[&GroupKind::Z3];
        assert_eq!(z3.len(), 2);
        assert!(z3.iter().all(|g| !g.spans_nodes));
        let z1 = &groups[&GroupKind::Z1];
        assert_eq!(z1.len(), 1);
        assert!(z1[0].spans_nodes);
        let dzp = &groups[&GroupKind::DzpReplica];
        assert_eq!(dzp.len(), 8);
        assert_eq!(dzp[3].ranks, vec![3, 11]);
    }

    #[test]
    fn dzp_singletons_when_z2_is_dp() {
        let cfg = ParallelConfig::data_parallel(8, 8, 8, 8);
        let groups = build_process_groups(&cfg, &topo(1, 8));
        assert!(groups[&GroupKind::DzpReplica].iter().all(|g| g.size() == 1));
    }

    #[test]
    fn groups_partition_ranks() {
        let cfg = ParallelConfig { dp: 4, z1: 4, z2: 2, z3: 1, pp: 2, vpp: 1, cp: 2, tp: 2 };
        let t = topo(4, 8);
        let groups = build_process_groups(&cfg, &t);
        for kind in GroupKind::ALL {
            let mut all: Vec<u64> = groups[&kind].iter().flat_map(|g| g.ranks.clone()).collect();
            all.sort_unstable();
            assert_eq!(all, (0..32).collect::<Vec<_>>(), "{kind}");
        }
        assert_eq!(groups, build_process_groups(&cfg, &t));
    }

    #[test]
    fn parses_toml_and_json() {
        let toml_src = r#"
            [model]
            name = "m"
            num_layers = 2
            params_per_layer = 1000
            seq_len = 8
            micro_batch_size = 1
            num_microbatches = 2
            flops_per_token_per_layer = 6000.0

            [parallel]
            dp = 8
            z1 = 8
            z2 = 4
            z3 = 2

            [topology]
            num_nodes = 1
            ranks_per_node = 8
            intra_bw = 4.0e11
            inter_bw = 2.5e10
        "#;
        let c = ConfigFile::from_toml_str(toml_src).unwrap();
        assert_eq!(c.parallel.pp, 1);
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(ConfigFile::from_json_str(&json).unwrap(), c);
        assert!(ConfigFile::from_toml_str("[model]\nname=1").is_err());
    }
}
