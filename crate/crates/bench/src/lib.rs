//! Fixed inputs shared by the benchmarks.

use hzp_core::config::{ModelSpec, ParallelConfig, Topology};
use hzp_core::sched::workload::{pools, random_graph, GraphShape, RandomGraph};
use hzp_core::sched::BufferPool;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A 36B-parameter dense model on 64 data-parallel ranks.
pub fn large_model() -> (ModelSpec, ParallelConfig, Topology) {
    let spec = ModelSpec {
        name: "dense-36b".into(),
        num_layers: 64,
        params_per_layer: 562_500_000,
        embedding_params: 0,
        seq_len: 32768,
        micro_batch_size: 1,
        num_microbatches: 8,
        flops_per_token_per_layer: 1.125e9,
        hidden_size: None,
    };
    let cfg = ParallelConfig { pp: 4, cp: 8, ..ParallelConfig::data_parallel(64, 64, 8, 8) };
    let topo = Topology {
        num_nodes: 128,
        ranks_per_node: 16,
        intra_bw: 4.0e11,
        inter_bw: 2.5e10,
        intra_latency: 5e-6,
        inter_latency: 1e-5,
    };
    (spec, cfg, topo)
}

/// A reproducible random task graph with pools sized for it.
pub fn graph(seed: u64, layers: u64) -> (RandomGraph, [BufferPool; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = GraphShape { min_layers: layers, max_layers: layers, ..GraphShape::default() };
    let rg = random_graph(&mut rng, &shape);
    let p = pools(&mut rng, &rg.graph);
    (rg, p)
}
