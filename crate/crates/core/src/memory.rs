//! Static memory of mixed-precision Adam training under ZeRO, ZP and HZP
//! sharding, and the sharding-plan search built on it.
//!
//! Byte counts per element: BF16 parameters 2, FP32 gradients 4, and FP32
//! replica, momentum and variance 4 each (18 in total).

use std::cmp::Ordering;

use serde::Serialize;

use crate::compare::hzp_microbatch_volume;
use crate::config::{global_rank, ModelSpec, ParallelConfig, Topology};
use crate::error::{HzpError, Result};

pub const PARAM_BYTES: u64 = 2;
pub const GRAD_BYTES: u64 = 4;
pub const OPT_TENSOR_BYTES: u64 = 4;
pub const OPT_TENSORS: u64 = 3;
pub const BYTES_PER_PARAM: u64 = PARAM_BYTES + GRAD_BYTES + OPT_TENSORS * OPT_TENSOR_BYTES;

fn div_ceil_u128(a: u128, b: u128) -> u64 {
    a.div_ceil(b) as u64
}

/// `18 N / DP`, rounded up.
pub fn mem_zero3(n: u64, dp: u64) -> u64 {
    assert!(dp >= 1, "dp must be >= 1");
    div_ceil_u128(BYTES_PER_PARAM as u128 * n as u128, dp as u128)
}

/// `18 N / Z` for a replicated ZeRO-3 group of size `z` inside `dp`.
pub fn mem_zp(n: u64, z: u64, dp: u64) -> Result<u64> {
    if z > dp {
        return Err(HzpError::ReplicaExceedsWorld { group: z, world: dp });
    }
    if z == 0 || !dp.is_multiple_of(z) {
        return Err(HzpError::NonDivisible(format!("z={z} does not divide dp={dp}")));
    }
    Ok(mem_zero3(n, z))
}

/// `12 N / z1 + 4 N / z2 + 2 N / z3`, evaluated as one exact fraction and
/// rounded up once.
pub fn mem_hzp(n: u64, z1: u64, z2: u64, z3: u64) -> u64 {
    assert!(z1 >= 1 && z2 >= 1 && z3 >= 1, "group sizes must be >= 1");
    let (n, z1, z2, z3) = (n as u128, z1 as u128, z2 as u128, z3 as u128);
    let opt = (OPT_TENSORS * OPT_TENSOR_BYTES) as u128;
    let num = opt * n * z2 * z3 + GRAD_BYTES as u128 * n * z1 * z3 + PARAM_BYTES as u128 * n * z1 * z2;
    div_ceil_u128(num, z1 * z2 * z3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryLedger {
    pub params_bf16: u64,
    pub grads_fp32: u64,
    pub replica_fp32: u64,
    pub momentum_fp32: u64,
    pub variance_fp32: u64,
    pub total_static: u64,
}

impl MemoryLedger {
    pub fn optimizer_bytes(&self) -> u64 {
        self.replica_fp32 + self.momentum_fp32 + self.variance_fp32
    }
}

/// Per-rank static memory with each shard padded up to `ceil(N / z)`
/// elements. Equal to [`mem_hzp`] whenever every group size divides N.
pub fn ledger(spec: &ModelSpec, cfg: &ParallelConfig) -> MemoryLedger {
    ledger_for(spec.total_params(), cfg.z1, cfg.z2, cfg.z3)
}

pub fn ledger_for(n: u64, z1: u64, z2: u64, z3: u64) -> MemoryLedger {
    let params_bf16 = PARAM_BYTES * n.div_ceil(z3);
    let grads_fp32 = GRAD_BYTES * n.div_ceil(z2);
    let opt = OPT_TENSOR_BYTES * n.div_ceil(z1);
    MemoryLedger {
        params_bf16,
        grads_fp32,
        replica_fp32: opt,
        momentum_fp32: opt,
        variance_fp32: opt,
        total_static: params_bf16 + grads_fp32 + 3 * opt,
    }
}

pub fn divisors(n: u64) -> Vec<u64> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanEntry {
    pub cfg: ParallelConfig,
    pub static_bytes: u64,
    pub spans_nodes_z2: bool,
    pub spans_nodes_z3: bool,
    /// Number of Z2 plus Z3 groups that cross a node boundary.
    pub spanning_groups: u64,
    /// Per-microbatch AG + RS bytes sent per rank.
    pub comm_cost_estimate: f64,
}

/// Number of contiguous sharding groups of size `z` that cross nodes.
pub fn spanning_sharding_groups(cfg: &ParallelConfig, topo: &Topology, z: u64) -> u64 {
    let mut count = 0;
    for p in 0..cfg.pp {
        for c in 0..cfg.cp {
            for t in 0..cfg.tp {
                let base = global_rank(cfg, p, c, t, 0);
                for g in 0..cfg.dp / z {
                    let first = base + g * z;
                    if topo.node_of(first) != topo.node_of(first + z - 1) {
                        count += 1;
                    }
                }
            }
        }
    }
    count
}

/// Enumerates every divisor triple `(z1, z2, z3)` of `base.dp`, keeps those
/// whose padded static memory plus `activation_estimate` fits in `budget`,
/// and orders them by node-spanning Z2/Z3 groups, then per-microbatch
/// communication, then static memory.
pub fn plan_search(
    spec: &ModelSpec,
    base: &ParallelConfig,
    topo: &Topology,
    budget: u64,
    activation_estimate: u64,
) -> Result<Vec<PlanEntry>> {
    if budget == 0 {
        return Err(HzpError::InvalidConfig("budget must be > 0".into()));
    }
    let divs = divisors(base.dp);
    let mut out = Vec::new();
    for &z1 in &divs {
        for &z2 in &divs {
            for &z3 in &divs {
                let cfg = ParallelConfig { z1, z2, z3, ..*base };
                let static_bytes = ledger(spec, &cfg).total_static;
                if static_bytes.saturating_add(activation_estimate) > budget {
                    continue;
                }
                let s2 = spanning_sharding_groups(&cfg, topo, z2);
                let s3 = spanning_sharding_groups(&cfg, topo, z3);
                out.push(PlanEntry {
                    cfg,
                    static_bytes,
                    spans_nodes_z2: s2 > 0,
                    spans_nodes_z3: s3 > 0,
                    spanning_groups: s2 + s3,
                    comm_cost_estimate: hzp_microbatch_volume(spec, &cfg),
                });
            }
        }
    }
    if out.is_empty() {
        return Err(HzpError::NoFeasibleConfig { budget });
    }
    out.sort_by(plan_order);
    Ok(out)
}

fn plan_order(a: &PlanEntry, b: &PlanEntry) -> Ordering {
    a.spanning_groups
        .cmp(&b.spanning_groups)
        .then(a.comm_cost_estimate.total_cmp(&b.comm_cost_estimate))
        .then(a.static_bytes.cmp(&b.static_bytes))
        .then((a.cfg.z1, a.cfg.z2, a.cfg.z3).cmp(&(b.cfg.z1, b.cfg.z2, b.cfg.z3)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const G: u64 = 1_000_000_000;

    #[test]
    fn zero3_examples() {
        assert_eq!(mem_zero3(G, 8), 2_250_000_000);
        assert_eq!(mem_zero3(G, 1), 18 * G);
        assert_eq!(mem_zero3(G, 18), G);
    }

    #[test]
    fn zp_examples() {
        assert_eq!(mem_zp(G, 8, 64).unwrap(), 2_250_000_000);
        assert_eq!(mem_zp(G, 64, 64).unwrap(), mem_zero3(G, 64));
        assert_eq!(mem_zp(2 * G, 4, 4).unwrap(), 9 * G);
        assert_eq!(mem_zp(G, 128, 64), Err(HzpError::ReplicaExceedsWorld { group: 128, world: 64 }));
    }

    #[test]
    fn hzp_dense36b_config() {
        let n = 36 * G;
        assert_eq!(mem_hzp(n, 64, 8, 8), 33_750_000_000);
        assert_eq!(mem_hzp(n, 1, 1, 1), 18 * n);
        let l = ledger_for(n, 64, 8, 8);
        assert_eq!(l.optimizer_bytes(), 6_750_000_000);
        assert_eq!(l.grads_fp32, 18 * G);
        assert_eq!(l.params_bf16, 9 * G);
        assert_eq!(l.total_static, mem_hzp(n, 64, 8, 8));
    }

    #[test]
    fn ledger_pads_uneven_shards() {
        let l = ledger_for(10, 3, 1, 1);
        assert_eq!(l.replica_fp32, 16);
        assert!(l.total_static >= mem_hzp(10, 3, 1, 1));
    }

    proptest! {
        #[test]
        fn collapse_identities(n in 1u64..1_000_000_000_000, dp_pow in 0u32..8, zi in 0usize..8) {
            let dp = 1u64 << dp_pow;
            let divs = divisors(dp);
            let z = divs[zi % divs.len()];
            prop_assert_eq!(mem_hzp(n, z, z, z), mem_zp(n, z, dp).unwrap());
            prop_assert_eq!(mem_zp(n, dp, dp).unwrap(), mem_zero3(n, dp));
        }

        #[test]
        fn hzp_monotone(n in 1u64..1_000_000_000, z1 in 1u64..64, z2 in 1u64..64, z3 in 1u64..64) {
            let m = mem_hzp(n, z1, z2, z3);
            prop_assert!(mem_hzp(n, z1 + 1, z2, z3) <= m);
            prop_assert!(mem_hzp(n, z1, z2 + 1, z3) <= m);
            prop_assert!(mem_hzp(n, z1, z2, z3 + 1) <= m);
        }

        #[test]
        fn ledger_sum_matches_formula(k in 1u64..1_000_000, a in 0usize..4, b in 0usize..4, c in 0usize..4) {
            let zs = [1u64, 2, 4, 8];
            let n = k * 8;
            let l = ledger_for(n, zs[a], zs[b], zs[c]);
            prop_assert_eq!(l.total_static,
                l.params_bf16 + l.grads_fp32 + l.replica_fp32 + l.momentum_fp32 + l.variance_fp32);
            prop_assert_eq!(l.total_static, mem_hzp(n, zs[a], zs[b], zs[c]));
        }
    }
}
