//! Random but valid task graphs, for property checks and benchmarks.

use crate::collective::CostModel;
use crate::config::{ModelSpec, ParallelConfig, Topology};
use crate::memory::divisors;
use crate::pipeline::PipeVariant;
use crate::sched::graph::{build_task_graph, GraphPolicy, TaskGraph};
use crate::sched::sim::{prelaunch_depth, BufferPool};
use rand::seq::SliceRandom;
use rand::Rng;

/// A model whose per-layer FLOPs follow `params_per_layer`.
pub fn spec(layers: u64, microbatches: u64, params_per_layer: u64) -> ModelSpec {
    ModelSpec {
        name: "rand".into(),
        num_layers: layers,
        params_per_layer,
        embedding_params: 0,
        seq_len: 2048,
        micro_batch_size: 1,
        num_microbatches: microbatches,
        flops_per_token_per_layer: 24.0 * params_per_layer as f64 / 12.0,
        hidden_size: None,
    }
}

/// Nodes of 8 ranks (or one smaller node) with fixed link speeds.
pub fn topology(world: u64) -> Topology {
    let rpn = 8.min(world);
    Topology {
        num_nodes: world / rpn,
        ranks_per_node: rpn,
        intra_bw: 2.0e11,
        inter_bw: 2.5e10,
        intra_latency: 5e-6,
        inter_latency: 1e-5,
    }
}

pub struct RandomGraph {
    pub spec: ModelSpec,
    pub cfg: ParallelConfig,
    pub graph: TaskGraph,
    pub ratio: f64,
}

pub struct GraphShape {
    pub min_layers: u64,
    pub max_layers: u64,
    pub pipelined: bool,
    pub defer_rs: bool,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Keep parameters and gradients sharded (z2, z3 > 1).
    pub sharded: bool,
}

impl Default for GraphShape {
    fn default() -> Self {
        Self {
            min_layers: 4,
            max_layers: 32,
            pipelined: true,
            defer_rs: false,
            min_ratio: 0.1,
            max_ratio: 2.0,
            sharded: false,
        }
    }
}

/// A graph for a random model, sharding and pipeline layout, with
/// communication rescaled to `ratio` times the compute time.
pub fn random_graph<R: Rng>(rng: &mut R, shape: &GraphShape) -> RandomGraph {
    // Layers on the simulated pipeline rank.
    let rank_layers = rng.gen_range(shape.min_layers..=shape.max_layers);
    let pp = if shape.pipelined { *[1u64, 2, 4].choose(rng).unwrap() } else { 1 };
    let vpp = if pp > 1 && rank_layers % 2 == 0 && rng.gen_bool(0.5) { 2 } else { 1 };
    let layers = rank_layers * pp;
    let microbatches = if vpp > 1 { pp * rng.gen_range(1..=2) } else { rng.gen_range(1..=4) };
    let dp = *[2u64, 4, 8].choose(rng).unwrap();
    let divs = divisors(dp);
    let sharded: Vec<u64> = divs.iter().copied().filter(|&d| d > 1 || !shape.sharded).collect();
    let cfg = ParallelConfig {
        pp,
        vpp,
        ..ParallelConfig::data_parallel(
            dp,
            *divs.choose(rng).unwrap(),
            *sharded.choose(rng).unwrap(),
            *sharded.choose(rng).unwrap(),
        )
    };
    let spec = spec(layers, microbatches, rng.gen_range(1u64..=64) << 20);
    let policy = GraphPolicy {
        pipeline_rank: rng.gen_range(0..pp),
        variant: PipeVariant::OneFOneB,
        defer_rs: shape.defer_rs,
        ..GraphPolicy::default()
    };
    let cost = CostModel::new(topology(cfg.world_size()));
    let mut graph = build_task_graph(&spec, &cfg, &cost, &policy).expect("generated configurations are valid");
    let ratio = rng.gen_range(shape.min_ratio..=shape.max_ratio);
    let factor = ratio * graph.compute_seconds() / graph.comm_seconds();
    graph.scale_comm(factor);
    RandomGraph { spec, cfg, graph, ratio }
}

/// AG pool from a random free budget; RS pool double-buffered, or larger
/// when the graph holds more gradient buffers at once.
pub fn pools<R: Rng>(rng: &mut R, graph: &TaskGraph) -> [BufferPool; 2] {
    let layers = graph.layout.layers_on_rank();
    let free = rng.gen_range(1..=layers + 2) * graph.layout.ag_bytes;
    let depth = prelaunch_depth(free, graph.layout.ag_bytes, layers);
    [BufferPool::ag(graph, depth), BufferPool::rs(graph, graph.min_rs_slots().max(2))]
}
