//! `hzp`: memory planning, schedule simulation, equivalence checks and
//! communication sweeps for hierarchical sharded data parallelism.
//!
//! Exit codes: 0 ok, 1 configuration or I/O error, 2 no feasible plan,
//! 3 verification failure.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hzp_core::collective::CostModel;
use hzp_core::compare::seq_len_sweep;
use hzp_core::config::{ConfigFile, ValidatedConfig};
use hzp_core::memory::{ledger, plan_search};
use hzp_core::pipeline::{apply_reuse, build_schedule, recompute_rule, PipeVariant, ReuseFlags, SavingsReport};
use hzp_core::sched::{
    build_task_graph, chrome_trace, memory_trace, prelaunch_depth, simulate, utilization_report, BufferPool,
    GraphPolicy, SimMode, SimOptions, StreamSet, TaskKind,
};
use hzp_core::train::{verify_report, Precision, VerifyGrid, VerifyOptions};
use hzp_core::HzpError;

#[derive(Parser)]
#[command(name = "hzp", version, about = "Hierarchical sharded data parallelism toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank every feasible (z1, z2, z3) for the configured model.
    Plan(PlanArgs),
    /// Simulate one training iteration of one pipeline rank.
    Simulate(SimulateArgs),
    /// Check sharded training against an unsharded baseline.
    Verify(VerifyArgs),
    /// Compare TP and sharding communication over sequence lengths.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Common {
    /// Config file (TOML, or JSON with a .json extension).
    config: PathBuf,
    /// Write the main output here instead of stdout.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    common: Common,
    /// Per-rank memory budget in bytes [default: simulation.device_memory].
    #[arg(long)]
    budget: Option<u64>,
    /// Activation bytes reserved on top of static memory
    /// [default: simulation.activation_estimate].
    #[arg(long)]
    activations: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// vanilla or async.
    #[arg(long, default_value = "async")]
    mode: SimMode,
    /// Write a Chrome trace of the timeline.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// 1f1b or interleaved [default: interleaved when vpp > 1].
    #[arg(long)]
    pp_variant: Option<PipeVariant>,
    /// Recompute each forward before its backward.
    #[arg(long)]
    recompute: bool,
    /// Comma-separated reuse rules (r1, r2, r3), `all` or `none`.
    #[arg(long, default_value = "none", value_parser = parse_reuse)]
    reuse: ReuseFlags,
    /// Reduce-scatter gradients once per schedule item instead of per layer.
    #[arg(long)]
    defer_rs: bool,
    /// Pipeline rank to simulate.
    #[arg(long, default_value_t = 0)]
    pipeline_rank: u64,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// fp64 or mixed.
    #[arg(long, default_value = "fp64")]
    precision: Precision,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the sharded gradient reduction (negative control).
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated sequence lengths; a K suffix multiplies by 1024.
    #[arg(long, value_delimiter = ',', value_parser = parse_seq_len, default_value = "8K,32K,128K")]
    seq_lens: Vec<u64>,
    /// TP degree to compare against [default: parallel.tp].
    #[arg(long)]
    tp: Option<u64>,
    /// Count recomputed forward collectives on the TP side.
    #[arg(long)]
    recompute: bool,
}

enum Failure {
    Config(anyhow::Error),
    Infeasible(anyhow::Error),
    Verification(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Infeasible(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Infeasible(e) | Failure::Verification(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

impl From<HzpError> for Failure {
    fn from(e: HzpError) -> Self {
        match e {
            HzpError::NoFeasibleConfig { .. } => Failure::Infeasible(e.into()),
            HzpError::EquivalenceFailure { .. } => Failure::Verification(e.into()),
            _ => Failure::Config(e.into()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn parse_reuse(s: &str) -> Result<ReuseFlags, String> {
    let mut flags = ReuseFlags::NONE;
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.to_ascii_lowercase().as_str() {
            "all" => flags = ReuseFlags::ALL,
            "none" => {}
            "r1" => flags.r1 = true,
            "r2" => flags.r2 = true,
            "r3" => flags.r3 = true,
            other => return Err(format!("unknown reuse rule `{other}`")),
        }
    }
    Ok(flags)
}

fn parse_seq_len(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (digits, scale) = match s.strip_suffix(['K', 'k']) {
        Some(d) => (d, 1024),
        None => (s, 1),
    };
    let n: u64 = digits.parse().map_err(|_| format!("invalid sequence length `{s}`"))?;
    match n.checked_mul(scale) {
        Some(v) if v > 0 => Ok(v),
        _ => Err(format!("invalid sequence length `{s}`")),
    }
}

fn load(path: &Path) -> Result<(ConfigFile, ValidatedConfig), Failure> {
    let file = ConfigFile::load(path)?;
    let valid = file.validate()?;
    Ok((file, valid))
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_csv<T: Serialize>(path: Option<&Path>, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(output(path)?);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> anyhow::Result<()> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PlanRow {
    z1: u64,
    z2: u64,
    z3: u64,
    pp: u64,
    cp: u64,
    static_bytes: u64,
    spans_nodes_z2: bool,
    spans_nodes_z3: bool,
    comm_cost_estimate: f64,
}

fn cmd_plan(args: &PlanArgs) -> CmdResult {
    let (file, v) = load(&args.common.config)?;
    let budget = args.budget.unwrap_or(file.simulation.device_memory);
    let activations = args.activations.unwrap_or(file.simulation.activation_estimate);
    let rows: Vec<PlanRow> = plan_search(&v.spec, &v.cfg, &v.topo, budget, activations)?
        .into_iter()
        .map(|e| PlanRow {
            z1: e.cfg.z1,
            z2: e.cfg.z2,
            z3: e.cfg.z3,
            pp: e.cfg.pp,
            cp: e.cfg.cp,
            static_bytes: e.static_bytes,
            spans_nodes_z2: e.spans_nodes_z2,
            spans_nodes_z3: e.spans_nodes_z3,
            comm_cost_estimate: e.comm_cost_estimate,
        })
        .collect();
    write_csv(args.common.out.as_deref(), &rows)?;
    Ok(())
}

#[derive(Serialize)]
struct SimulateRow {
    mode: &'static str,
    makespan_s: f64,
    compute_busy_s: f64,
    compute_idle_s: f64,
    peak_bytes: u64,
    fragmentation: f64,
    mfu: f64,
    ag_param_tasks: usize,
    rs_grad_tasks: usize,
    ag_slots: u64,
    rs_slots: u64,
    eliminated_ag: u64,
    merged_rs: u64,
}

fn cmd_simulate(args: &SimulateArgs) -> CmdResult {
    let (file, v) = load(&args.common.config)?;
    let sim = &file.simulation;
    let variant =
        args.pp_variant.unwrap_or(if v.cfg.vpp > 1 { PipeVariant::Interleaved } else { PipeVariant::OneFOneB });
    let policy = GraphPolicy {
        pipeline_rank: args.pipeline_rank,
        variant,
        peak_flops: sim.peak_flops,
        defer_rs: args.defer_rs,
        ..GraphPolicy::default()
    };
    let mut graph = build_task_graph(&v.spec, &v.cfg, &CostModel::new(v.topo), &policy)?;
    let mut savings = SavingsReport { rules: Vec::new() };
    if args.reuse != ReuseFlags::NONE {
        let schedule = build_schedule(v.cfg.pp, v.cfg.vpp, v.spec.num_microbatches, variant)?;
        (graph, savings) = apply_reuse(&schedule, &graph, args.reuse)?;
    }
    if args.recompute {
        graph = recompute_rule(&graph, true);
    }

    let mem = ledger(&v.spec, &v.cfg);
    let rs_slots = sim.rs_slots.max(graph.min_rs_slots()).max(1);
    let rs_pool = BufferPool::rs(&graph, rs_slots);
    let free = sim
        .device_memory
        .saturating_sub(mem.total_static)
        .saturating_sub(sim.activation_estimate)
        .saturating_sub(rs_pool.capacity());
    let layers = graph.layout.layers_on_rank();
    let pools = [BufferPool::ag(&graph, prelaunch_depth(free, graph.layout.ag_bytes, layers)), rs_pool];
    let opts = SimOptions { launch_latency: sim.launch_latency, ..SimOptions::new(args.mode) };
    let timeline = simulate(&graph, &StreamSet::for_mode(args.mode), &pools, &opts)?;
    timeline.verify(&graph).map_err(|e| anyhow!("simulated timeline is unsound: {e}"))?;
    let trace = memory_trace(&timeline, &mem, &pools);

    let row = SimulateRow {
        mode: args.mode.name(),
        makespan_s: timeline.makespan,
        compute_busy_s: timeline.compute_busy,
        compute_idle_s: timeline.compute_idle,
        peak_bytes: trace.peak_bytes,
        fragmentation: trace.fragmentation,
        mfu: utilization_report(&timeline, &v.spec, sim.peak_flops),
        ag_param_tasks: graph.count(TaskKind::AgParam),
        rs_grad_tasks: graph.count(TaskKind::RsGrad),
        ag_slots: pools[0].slot_count,
        rs_slots: pools[1].slot_count,
        eliminated_ag: savings.eliminated_ag(),
        merged_rs: savings.merged_rs(),
    };
    write_csv(args.common.out.as_deref(), &[row])?;
    if let Some(path) = &args.trace {
        write_json(Some(path), &chrome_trace(&graph, &timeline))?;
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> CmdResult {
    let (file, _) = load(&args.common.config)?;
    let grid = VerifyGrid::from(&file.verify);
    let opts = VerifyOptions { inject_fault: args.inject_fault };
    let report = verify_report(&grid, &[args.seed], args.steps, args.precision, opts)?;
    write_json(args.common.out.as_deref(), &report)?;
    match report.first_failure() {
        Some(e) => Err(Failure::Verification(anyhow!(e.clone()))),
        None if !report.pass => Err(Failure::Verification(anyhow!("equivalence check failed"))),
        None => Ok(()),
    }
}

fn cmd_sweep(args: &SweepArgs) -> CmdResult {
    let (_, v) = load(&args.common.config)?;
    let tp = args.tp.unwrap_or(v.cfg.tp);
    if tp == 0 {
        return Err(Failure::Config(anyhow!("--tp must be >= 1")));
    }
    let rows = seq_len_sweep(&v.spec, &v.cfg, tp, &args.seq_lens, args.recompute);
    write_csv(args.common.out.as_deref(), &rows)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
