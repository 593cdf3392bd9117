//! 1F1B and interleaved-1F1B pipeline schedules, the collective-reuse rules
//! that apply when parameters are sharded, and the recomputation rule.
//!
//! Reuse rules work on the sequence of schedule items one pipeline rank runs
//! for a single virtual stage:
//!
//! * `R1`: an item directly preceded by an item of the same pass reuses that
//!   item's parameter all-gather.
//! * `R2`: consecutive backward items accumulate gradients into one buffer
//!   and issue a single reduce-scatter after the last of them.
//! * `R3`: a forward item preceded by `B, F` (where the backward belongs to a
//!   different micro-batch than that forward) reuses the forward's
//!   parameters, cached across the intervening backward.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{HzpError, Result};
use crate::sched::graph::{emit, ReusePlan, TaskGraph, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Pass {
    F,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Phase {
    Warmup,
    Steady,
    Cooldown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct PipeItem {
    pub pass: Pass,
    pub microbatch: u64,
    pub virtual_stage: u64,
    pub phase: Phase,
}

impl fmt::Display for PipeItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.pass {
            Pass::F => 'F',
            Pass::B => 'B',
        };
        write!(f, "{p}{}.{}", self.microbatch, self.virtual_stage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum PipeVariant {
    OneFOneB,
    Interleaved,
    ZeroBubble,
    Terapipe,
}

impl FromStr for PipeVariant {
    type Err = HzpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "1f1b" | "onefoneb" => Ok(PipeVariant::OneFOneB),
            "interleaved" | "interleaved1f1b" => Ok(PipeVariant::Interleaved),
            "zerobubble" => Ok(PipeVariant::ZeroBubble),
            "terapipe" => Ok(PipeVariant::Terapipe),
            other => Err(HzpError::UnsupportedVariant(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipeSchedule {
    pub pp: u64,
    pub vpp: u64,
    pub microbatches: u64,
    pub variant: PipeVariant,
    /// Ordered items for each pipeline rank.
    pub ranks: Vec<Vec<PipeItem>>,
}

pub fn build_schedule(pp: u64, vpp: u64, microbatches: u64, variant: PipeVariant) -> Result<PipeSchedule> {
    if pp == 0 || vpp == 0 || microbatches == 0 {
        return Err(HzpError::InvalidSchedule("pp, vpp and microbatches must be >= 1".into()));
    }
    let ranks = match variant {
        PipeVariant::ZeroBubble | PipeVariant::Terapipe => {
            return Err(HzpError::UnsupportedVariant(format!("{variant:?}")));
        }
        PipeVariant::OneFOneB => {
            if vpp != 1 {
                return Err(HzpError::InvalidSchedule("1F1B runs one virtual stage per rank".into()));
            }
            (0..pp).map(|r| one_f_one_b(pp, r, microbatches)).collect()
        }
        PipeVariant::Interleaved if vpp == 1 => (0..pp).map(|r| one_f_one_b(pp, r, microbatches)).collect(),
        PipeVariant::Interleaved => (0..pp).map(|r| interleaved(pp, vpp, r, microbatches)).collect(),
    };
    let s = PipeSchedule { pp, vpp, microbatches, variant, ranks };
    s.check()?;
    Ok(s)
}

fn one_f_one_b(pp: u64, rank: u64, m: u64) -> Vec<PipeItem> {
    let warmup = (pp - rank - 1).min(m);
    let item = |pass, mb, phase| PipeItem { pass, microbatch: mb, virtual_stage: 0, phase };
    let mut out = Vec::with_capacity(2 * m as usize);
    for mb in 0..warmup {
        out.push(item(Pass::F, mb, Phase::Warmup));
    }
    for k in 0..m - warmup {
        out.push(item(Pass::F, warmup + k, Phase::Steady));
        out.push(item(Pass::B, k, Phase::Steady));
    }
    for mb in m - warmup..m {
        out.push(item(Pass::B, mb, Phase::Cooldown));
    }
    out
}

/// Forward order of `(microbatch, chunk)` pairs: micro-batches in groups of
/// `pp`, each group run through every chunk before the next group starts.
/// The last group may be shorter.
fn interleaved_table(pp: u64, vpp: u64, m: u64) -> Vec<(u64, u64)> {
    let mut table = Vec::with_capacity((m * vpp) as usize);
    for first in (0..m).step_by(pp as usize) {
        let last = (first + pp).min(m);
        for chunk in 0..vpp {
            table.extend((first..last).map(|mb| (mb, chunk)));
        }
    }
    table
}

fn interleaved(pp: u64, vpp: u64, rank: u64, m: u64) -> Vec<PipeItem> {
    let total = m * vpp;
    let table = interleaved_table(pp, vpp, m);
    let warmup = if m <= pp { total } else { ((pp - rank - 1) * 2 + (vpp - 1) * pp).min(total) };
    let unit = |k: u64, pass: Pass, phase| {
        let (microbatch, chunk) = table[k as usize];
        let virtual_stage = match pass {
            Pass::F => chunk,
            Pass::B => vpp - 1 - chunk,
        };
        PipeItem { pass, microbatch, virtual_stage, phase }
    };
    let mut out = Vec::with_capacity(2 * total as usize);
    for k in 0..warmup {
        out.push(unit(k, Pass::F, Phase::Warmup));
    }
    for k in 0..total - warmup {
        out.push(unit(k + warmup, Pass::F, Phase::Steady));
        out.push(unit(k, Pass::B, Phase::Steady));
    }
    for k in total - warmup..total {
        out.push(unit(k, Pass::B, Phase::Cooldown));
    }
    out
}

impl PipeSchedule {
    /// Checks the per-rank invariants: every `(pass, mb, stage)` exactly
    /// once, no backward before its forward, and strict F/B alternation in
    /// the steady phase.
    pub fn check(&self) -> Result<()> {
        for (r, items) in self.ranks.iter().enumerate() {
            let mut seen = std::collections::BTreeSet::new();
            for (i, it) in items.iter().enumerate() {
                if !seen.insert((it.pass == Pass::B, it.microbatch, it.virtual_stage)) {
                    return Err(HzpError::InvalidSchedule(format!("rank {r}: {it} repeated")));
                }
                if it.pass == Pass::B
                    && !items[..i].iter().any(|p| {
                        p.pass == Pass::F && p.microbatch == it.microbatch && p.virtual_stage == it.virtual_stage
                    })
                {
                    return Err(HzpError::InvalidSchedule(format!("rank {r}: {it} precedes its forward")));
                }
            }
            if seen.len() as u64 != 2 * self.microbatches * self.vpp {
                return Err(HzpError::InvalidSchedule(format!("rank {r}: wrong item count")));
            }
            let steady: Vec<_> = items.iter().filter(|i| i.phase == Phase::Steady).collect();
            for (i, it) in steady.iter().enumerate() {
                let expect = if i % 2 == 0 { Pass::F } else { Pass::B };
                if it.pass != expect {
                    return Err(HzpError::InvalidSchedule(format!("rank {r}: steady phase not 1F1B")));
                }
            }
        }
        Ok(())
    }

    /// Items of `rank` that belong to `virtual_stage`, with their positions
    /// in the rank's full sequence.
    pub fn stage_sequence(&self, rank: usize, virtual_stage: u64) -> Vec<(usize, PipeItem)> {
        self.ranks[rank].iter().copied().enumerate().filter(|(_, it)| it.virtual_stage == virtual_stage).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ReuseRule {
    R1,
    R2,
    R3,
}

impl fmt::Display for ReuseRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReuseFlags {
    pub r1: bool,
    pub r2: bool,
    pub r3: bool,
}

impl ReuseFlags {
    pub const ALL: ReuseFlags = ReuseFlags { r1: true, r2: true, r3: true };
    pub const NONE: ReuseFlags = ReuseFlags { r1: false, r2: false, r3: false };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RuleSavings {
    pub rule: ReuseRule,
    pub eliminated_ag: u64,
    pub merged_rs: u64,
    pub extra_cached_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SavingsReport {
    pub rules: Vec<RuleSavings>,
}

impl SavingsReport {
    pub fn eliminated_ag(&self) -> u64 {
        self.rules.iter().map(|r| r.eliminated_ag).sum()
    }

    pub fn merged_rs(&self) -> u64 {
        self.rules.iter().map(|r| r.merged_rs).sum()
    }

    pub fn rule(&self, rule: ReuseRule) -> RuleSavings {
        self.rules.iter().copied().find(|r| r.rule == rule).unwrap_or(RuleSavings {
            rule,
            eliminated_ag: 0,
            merged_rs: 0,
            extra_cached_bytes: 0,
        })
    }

    /// CSV with header `rule,eliminated_ag,merged_rs,extra_cached_bytes`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rule,eliminated_ag,merged_rs,extra_cached_bytes\n");
        for r in &self.rules {
            s.push_str(&format!("{},{},{},{}\n", r.rule, r.eliminated_ag, r.merged_rs, r.extra_cached_bytes));
        }
        s
    }
}

/// Decides, per schedule item, whose all-gather it consumes and which item
/// issues the reduce-scatter for its gradients.
pub fn plan_reuse(items: &[PipeItem], flags: ReuseFlags) -> ReusePlan {
    let mut plan = ReusePlan::identity(items.len());
    let stages: std::collections::BTreeSet<u64> = items.iter().map(|i| i.virtual_stage).collect();
    for vs in stages {
        let seq: Vec<usize> = (0..items.len()).filter(|&i| items[i].virtual_stage == vs).collect();
        for (k, &idx) in seq.iter().enumerate() {
            let it = items[idx];
            let prev = k.checked_sub(1).map(|p| seq[p]);
            let prev2 = k.checked_sub(2).map(|p| seq[p]);
            if let Some(p) = prev {
                if flags.r1 && items[p].pass == it.pass {
                    plan.ag_source[idx] = plan.ag_source[p];
                    plan.ag_rule[idx] = Some(ReuseRule::R1);
                } else if let (true, Pass::F, Some(pf)) = (flags.r3, it.pass, prev2) {
                    let (b, f) = (items[p], items[pf]);
                    if b.pass == Pass::B && f.pass == Pass::F && b.microbatch != f.microbatch {
                        plan.ag_source[idx] = plan.ag_source[pf];
                        plan.ag_rule[idx] = Some(ReuseRule::R3);
                    }
                }
            }
        }
        // R2: runs of adjacent backward items share the last item's RS.
        if flags.r2 {
            let mut k = 0;
            while k < seq.len() {
                if items[seq[k]].pass != Pass::B {
                    k += 1;
                    continue;
                }
                let mut end = k;
                while end + 1 < seq.len() && items[seq[end + 1]].pass == Pass::B {
                    end += 1;
                }
                for &idx in &seq[k..=end] {
                    plan.rs_sink[idx] = seq[end];
                }
                k = end + 1;
            }
        }
    }
    plan
}

fn savings_for(graph: &TaskGraph, plan: &ReusePlan) -> SavingsReport {
    let lpc = graph.layout.layers_per_chunk;
    let mut rules = Vec::new();
    for rule in [ReuseRule::R1, ReuseRule::R2, ReuseRule::R3] {
        let eliminated_ag = plan.ag_rule.iter().filter(|r| **r == Some(rule)).count() as u64 * lpc;
        let merged_rs = if rule == ReuseRule::R2 {
            plan.rs_sink.iter().enumerate().filter(|(i, s)| *i != **s).count() as u64 * lpc
        } else {
            0
        };
        let cached_stages: std::collections::BTreeSet<u64> = plan
            .ag_rule
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Some(rule) && rule != ReuseRule::R2)
            .map(|(i, _)| graph.layout.items[i].virtual_stage)
            .collect();
        let extra_cached_bytes = cached_stages.len() as u64 * lpc * graph.layout.ag_bytes;
        rules.push(RuleSavings { rule, eliminated_ag, merged_rs, extra_cached_bytes });
    }
    SavingsReport { rules }
}

/// Rebuilds `graph` with the reuse rules applied for the rank it was built
/// for. Eliminated all-gathers become dependencies on the retained one;
/// merged reduce-scatters depend on every backward they accumulate.
pub fn apply_reuse(
    schedule: &PipeSchedule,
    graph: &TaskGraph,
    flags: ReuseFlags,
) -> Result<(TaskGraph, SavingsReport)> {
    let rank = graph.layout.pipeline_rank as usize;
    let items = schedule
        .ranks
        .get(rank)
        .ok_or_else(|| HzpError::ScheduleGraphMismatch(format!("schedule has no rank {rank}")))?;
    if *items != graph.layout.items {
        return Err(HzpError::ScheduleGraphMismatch(format!(
            "rank {rank}: graph was built for a different item order"
        )));
    }
    let plan = plan_reuse(items, flags);
    let report = savings_for(graph, &plan);
    let out = emit(&graph.layout, &plan, graph.recompute);
    Ok((out, report))
}

/// Inserts a forward-recompute task before every backward. The recompute
/// consumes the backward's all-gather, so no collective is added.
pub fn recompute_rule(graph: &TaskGraph, recompute: bool) -> TaskGraph {
    emit(&graph.layout, &graph.plan, recompute)
}

/// Counts eliminated AG item-sets and merged RS item-sets by scanning the
/// stage sequences directly.
pub fn count_adjacency(items: &[PipeItem]) -> (u64, u64, u64) {
    let (mut r1, mut r2, mut r3) = (0, 0, 0);
    let stages: std::collections::BTreeSet<u64> = items.iter().map(|i| i.virtual_stage).collect();
    for vs in stages {
        let seq: Vec<PipeItem> = items.iter().copied().filter(|i| i.virtual_stage == vs).collect();
        for w in seq.windows(2) {
            if w[0].pass == w[1].pass {
                r1 += 1;
                if w[0].pass == Pass::B {
                    r2 += 1;
                }
            }
        }
        for w in seq.windows(3) {
            if w[0].pass == Pass::F
                && w[1].pass == Pass::B
                && w[2].pass == Pass::F
                && w[0].microbatch != w[1].microbatch
            {
                r3 += 1;
            }
        }
    }
    (r1, r2, r3)
}

pub fn ag_param_count(graph: &TaskGraph) -> usize {
    graph.count(TaskKind::AgParam)
}
