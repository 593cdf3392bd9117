use hzp_core::memory::ledger;
use hzp_core::sched::workload::{pools, random_graph, GraphShape};
use hzp_core::sched::{
    chrome_trace, emit, memory_trace, prelaunch_depth, simulate, BufferPool, SimMode, SimOptions, StreamSet, TaskGraph,
    TaskKind, Timeline,
};
use hzp_core::HzpError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(g: &TaskGraph, pools: &[BufferPool; 2], mode: SimMode) -> Timeline {
    simulate(g, &StreamSet::for_mode(mode), pools, &SimOptions::new(mode)).expect("simulation completes")
}

#[test]
fn async_dominates_vanilla_on_other_seeds() {
    for seed in [1u64, 2, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let rg = random_graph(&mut rng, &GraphShape::default());
            let p = pools(&mut rng, &rg.graph);
            let a = run(&rg.graph, &p, SimMode::Async);
            let v = run(&rg.graph, &p, SimMode::Vanilla);
            assert!(a.compute_idle < v.compute_idle, "seed {seed}: {} vs {}", a.compute_idle, v.compute_idle);
            assert_eq!(a.compute_busy, v.compute_busy);
        }
    }
}

#[test]
fn timelines_are_sound_and_pools_never_overflow() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let rg = random_graph(&mut rng, &GraphShape::default());
        let p = pools(&mut rng, &rg.graph);
        for mode in [SimMode::Async, SimMode::Vanilla] {
            let t = run(&rg.graph, &p, mode);
            t.verify(&rg.graph).unwrap();
            assert!(t.ag_high_water <= p[0].slot_count);
            assert!(t.rs_high_water <= p[1].slot_count);
            // every compute task starts after its all-gather ends
            for task in rg.graph.tasks.iter().filter(|t| t.kind.is_compute()) {
                if let Some(src) = task.param_source {
                    assert!(t.start[task.id] >= t.end[src]);
                }
            }
        }
    }
}

/// Prelaunch depth of at most half the layers and cheap collectives: the
/// all-gather pool stays full through the backward pass while two gradient
/// buffers alternate.
#[test]
fn ring_pools_are_fully_used_in_steady_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shape = GraphShape { min_layers: 8, max_ratio: 0.5, sharded: true, ..GraphShape::default() };
    for _ in 0..100 {
        let rg = random_graph(&mut rng, &shape);
        let layers = rg.graph.layout.layers_on_rank();
        let free = rng.gen_range(1..=layers / 2) * rg.graph.layout.ag_bytes;
        let depth = prelaunch_depth(free, rg.graph.layout.ag_bytes, layers);
        let p = [BufferPool::ag(&rg.graph, depth), BufferPool::rs(&rg.graph, 2)];
        let t = run(&rg.graph, &p, SimMode::Async);
        let m = memory_trace(&t, &ledger(&rg.spec, &rg.cfg), &p);
        assert_eq!(m.fragmentation, 0.0, "depth {depth} of {layers} layers, ratio {}", rg.ratio);
    }
}

#[test]
fn immediate_reduce_scatter_holds_fewer_gradient_buffers() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let shape = GraphShape { min_layers: 2, pipelined: false, ..GraphShape::default() };
    for _ in 0..100 {
        let rg = random_graph(&mut rng, &shape);
        let mut layout = rg.graph.layout.clone();
        layout.defer_rs = true;
        let deferred = emit(&layout, &rg.graph.plan, false);
        let ag = BufferPool::ag(&rg.graph, 2);
        let lpc = rg.graph.layout.layers_per_chunk;
        let imm = run(&rg.graph, &[ag, BufferPool::rs(&rg.graph, 2.min(lpc - 1).max(1))], SimMode::Async);
        let def = run(&deferred, &[ag, BufferPool::rs(&deferred, deferred.min_rs_slots())], SimMode::Async);
        assert!(imm.peak_grad_bytes < def.peak_grad_bytes, "{} vs {}", imm.peak_grad_bytes, def.peak_grad_bytes);
    }
}

#[test]
fn too_few_gradient_slots_deadlock() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let shape = GraphShape { min_layers: 3, pipelined: false, defer_rs: true, ..GraphShape::default() };
    let rg = random_graph(&mut rng, &shape);
    let p = [BufferPool::ag(&rg.graph, 2), BufferPool::rs(&rg.graph, 1)];
    for mode in [SimMode::Async, SimMode::Vanilla] {
        let err = simulate(&rg.graph, &StreamSet::for_mode(mode), &p, &SimOptions::new(mode)).unwrap_err();
        assert!(matches!(err, HzpError::DeadlockDetected { .. }));
    }
}

#[test]
fn simulation_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let rg = random_graph(&mut rng, &GraphShape::default());
    let p = pools(&mut rng, &rg.graph);
    for mode in [SimMode::Async, SimMode::Vanilla] {
        let a = run(&rg.graph, &p, mode);
        let b = run(&rg.graph, &p, mode);
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&chrome_trace(&rg.graph, &a)).unwrap(),
            serde_json::to_string(&chrome_trace(&rg.graph, &b)).unwrap()
        );
    }
}

#[test]
fn chrome_trace_has_one_event_per_task() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let rg = random_graph(&mut rng, &GraphShape::default());
    let p = pools(&mut rng, &rg.graph);
    let t = run(&rg.graph, &p, SimMode::Async);
    let trace = chrome_trace(&rg.graph, &t);
    let events = trace.as_array().unwrap();
    let complete = events.iter().filter(|e| e["ph"] == "X").count();
    assert_eq!(complete, rg.graph.tasks.len());
    assert!(events.iter().any(|e| e["ph"] == "C"));
    let ags = events.iter().filter(|e| e["name"] == TaskKind::AgParam.label()).count();
    assert_eq!(ags, rg.graph.count(TaskKind::AgParam));
}

#[test]
fn launch_latency_lengthens_collectives() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let rg = random_graph(&mut rng, &GraphShape::default());
    let p = pools(&mut rng, &rg.graph);
    let base = run(&rg.graph, &p, SimMode::Async);
    let opts = SimOptions { launch_latency: 1e-3, ..SimOptions::new(SimMode::Async) };
    let slow = simulate(&rg.graph, &StreamSet::MULTI, &p, &opts).unwrap();
    assert!(slow.makespan > base.makespan);
    assert_eq!(slow.compute_busy, base.compute_busy);
}
