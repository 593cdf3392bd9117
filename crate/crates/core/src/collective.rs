//! Data-correct collectives over in-process simulated ranks and a ring
//! alpha-beta cost model.
//!
//! Each call is a rendezvous: the caller hands over one tensor per group
//! member (indexed by position in the group) and receives one per member
//! back. Reductions always add contributions in ascending rank order, so the
//! result does not depend on how the caller produced its inputs.

use serde::Serialize;

use crate::config::{ProcessGroup, Topology};
use crate::error::{HzpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum DType {
    /// BF16 values stored as FP32 with the low 16 mantissa bits cleared.
    Bf16,
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::Bf16 => "bf16",
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size_bytes(self) -> u64 {
        match self {
            DType::Bf16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Round an FP32 value to the nearest BF16 value (ties to even).
pub fn round_bf16(x: f32) -> f32 {
    if x.is_nan() {
        return f32::from_bits(0x7fc0_0000);
    }
    let bits = x.to_bits();
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7fff + lsb) & 0xffff_0000;
    f32::from_bits(rounded)
}

pub fn is_bf16_exact(x: f32) -> bool {
    x.to_bits() & 0xffff == 0
}

/// A per-rank buffer. Values are stored as `f64`; for `F32` and `Bf16` every
/// stored value is exactly representable in `f32` and arithmetic on them is
/// done in `f32`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankTensor {
    pub owner_rank: u64,
    pub dtype: DType,
    /// Position of this shard within its group, `None` for a full tensor.
    pub shard_index: Option<usize>,
    pub elems: Vec<f64>,
}

impl RankTensor {
    pub fn full(owner_rank: u64, dtype: DType, elems: Vec<f64>) -> Self {
        Self { owner_rank, dtype, shard_index: None, elems }
    }

    pub fn from_f32(owner_rank: u64, dtype: DType, values: &[f32]) -> Self {
        let elems =
            values.iter().map(|&v| if dtype == DType::Bf16 { round_bf16(v) as f64 } else { v as f64 }).collect();
        Self::full(owner_rank, dtype, elems)
    }

    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.elems.iter().map(|&v| v as f32).collect()
    }

    /// Checks the storage invariant for the tensor's dtype.
    pub fn is_representable(&self) -> bool {
        match self.dtype {
            DType::F64 => true,
            DType::F32 => self.elems.iter().all(|&v| (v as f32) as f64 == v || v.is_nan()),
            DType::Bf16 => {
                self.elems.iter().all(|&v| ((v as f32) as f64 == v && is_bf16_exact(v as f32)) || v.is_nan())
            }
        }
    }
}

/// Splits a full tensor into `parts` equal shards, zero-padding the tail.
pub fn shard(full: &RankTensor, parts: usize) -> Vec<RankTensor> {
    let len = full.len().div_ceil(parts.max(1));
    (0..parts)
        .map(|i| {
            let mut elems: Vec<f64> = full.elems.iter().skip(i * len).take(len).copied().collect();
            elems.resize(len, 0.0);
            RankTensor { owner_rank: full.owner_rank, dtype: full.dtype, shard_index: Some(i), elems }
        })
        .collect()
}

fn check_members<T>(group: &ProcessGroup, items: &[T]) -> Result<()> {
    if items.len() != group.size() || group.size() == 0 {
        return Err(HzpError::ShapeMismatch(format!(
            "group of {} ranks received {} tensors",
            group.size(),
            items.len()
        )));
    }
    Ok(())
}

fn common_dtype(tensors: &[RankTensor]) -> Result<DType> {
    let dtype = tensors[0].dtype;
    if tensors.iter().any(|t| t.dtype != dtype) {
        return Err(HzpError::ShapeMismatch("mixed dtypes in one collective".into()));
    }
    Ok(dtype)
}

fn common_len(tensors: &[RankTensor]) -> Result<usize> {
    let len = tensors[0].len();
    if tensors.iter().any(|t| t.len() != len) {
        return Err(HzpError::ShapeMismatch("tensor lengths differ across ranks".into()));
    }
    Ok(len)
}

/// Sum of `tensors` element `i..i+len`, in the order given.
fn reduce_range(dtype: DType, tensors: &[&RankTensor], start: usize, len: usize) -> Vec<f64> {
    match dtype {
        DType::F64 => (start..start + len)
            .map(|i| {
                let mut acc = tensors[0].elems[i];
                for t in &tensors[1..] {
                    acc += t.elems[i];
                }
                acc
            })
            .collect(),
        DType::F32 | DType::Bf16 => (start..start + len)
            .map(|i| {
                let mut acc = tensors[0].elems[i] as f32;
                for t in &tensors[1..] {
                    acc += t.elems[i] as f32;
                }
                acc as f64
            })
            .collect(),
    }
}

/// Orders contributions by ascending owner rank.
fn canonical(tensors: &[RankTensor]) -> Vec<&RankTensor> {
    let mut v: Vec<&RankTensor> = tensors.iter().collect();
    v.sort_by_key(|t| t.owner_rank);
    v
}

/// Every rank receives the concatenation of all shards in shard-index order.
pub fn all_gather(group: &ProcessGroup, shards: &[RankTensor]) -> Result<Vec<RankTensor>> {
    check_members(group, shards)?;
    let dtype = common_dtype(shards)?;
    common_len(shards)?;
    let mut ordered: Vec<Option<&RankTensor>> = vec![None; shards.len()];
    for (pos, s) in shards.iter().enumerate() {
        let idx = s.shard_index.unwrap_or(pos);
        if idx >= shards.len() || ordered[idx].is_some() {
            return Err(HzpError::ShapeMismatch(format!("shard index {idx} repeated or out of range")));
        }
        ordered[idx] = Some(s);
    }
    let elems: Vec<f64> = ordered.iter().flat_map(|s| s.unwrap().elems.iter().copied()).collect();
    Ok(group.ranks.iter().map(|&r| RankTensor::full(r, dtype, elems.clone())).collect())
}

/// Rank at position `i` receives the sum of every rank's `i`-th segment.
/// Inputs must have a length divisible by the group size.
pub fn reduce_scatter(group: &ProcessGroup, fulls: &[RankTensor]) -> Result<Vec<RankTensor>> {
    check_members(group, fulls)?;
    let dtype = common_dtype(fulls)?;
    if dtype == DType::Bf16 {
        return Err(HzpError::DTypeUnsupported("bf16"));
    }
    let len = common_len(fulls)?;
    let g = group.size();
    if len % g != 0 {
        return Err(HzpError::ShapeMismatch(format!("length {len} not divisible by group size {g}")));
    }
    let seg = len / g;
    let order = canonical(fulls);
    Ok(group
        .ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| RankTensor {
            owner_rank: r,
            dtype,
            shard_index: Some(i),
            elems: reduce_range(dtype, &order, i * seg, seg),
        })
        .collect())
}

pub fn all_reduce(group: &ProcessGroup, tensors: &[RankTensor]) -> Result<Vec<RankTensor>> {
    all_reduce_ordered(group, tensors, false)
}

/// `reverse` flips the reduction order; used only to inject faults.
pub(crate) fn all_reduce_ordered(
    group: &ProcessGroup,
    tensors: &[RankTensor],
    reverse: bool,
) -> Result<Vec<RankTensor>> {
    check_members(group, tensors)?;
    let dtype = common_dtype(tensors)?;
    if dtype == DType::Bf16 {
        return Err(HzpError::DTypeUnsupported("bf16"));
    }
    let len = common_len(tensors)?;
    let mut order = canonical(tensors);
    if reverse {
        order.reverse();
    }
    let sum = reduce_range(dtype, &order, 0, len);
    Ok(group
        .ranks
        .iter()
        .zip(tensors)
        .map(|(&r, t)| RankTensor { owner_rank: r, dtype, shard_index: t.shard_index, elems: sum.clone() })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum CollectiveKind {
    AllGather,
    ReduceScatter,
    AllReduce,
}

/// Ring alpha-beta model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostModel {
    pub topo: Topology,
}

impl CostModel {
    pub fn new(topo: Topology) -> Self {
        Self { topo }
    }

    /// Seconds for a ring collective over `group_size` ranks moving a full
    /// payload of `bytes`.
    pub fn ring_time(&self, kind: CollectiveKind, group_size: u64, spans_nodes: bool, bytes: u64) -> f64 {
        if group_size <= 1 {
            return 0.0;
        }
        let (bw, lat) = if spans_nodes {
            (self.topo.inter_bw, self.topo.inter_latency)
        } else {
            (self.topo.intra_bw, self.topo.intra_latency)
        };
        let steps = (group_size - 1) as f64;
        let one_pass = steps * (bytes as f64 / group_size as f64) / bw + steps * lat;
        match kind {
            CollectiveKind::AllGather | CollectiveKind::ReduceScatter => one_pass,
            CollectiveKind::AllReduce => 2.0 * one_pass,
        }
    }
}

pub fn collective_cost(kind: CollectiveKind, group: &ProcessGroup, bytes: u64, model: &CostModel) -> f64 {
    model.ring_time(kind, group.size() as u64, group.spans_nodes, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GroupKind;
    use proptest::prelude::*;

    fn t(rank: u64, dtype: DType, v: &[f64]) -> RankTensor {
        RankTensor::full(rank, dtype, v.to_vec())
    }

    #[test]
    fn bf16_rounding() {
        assert_eq!(round_bf16(1.0), 1.0);
        // 1 + 2^-8 is a tie between 1 and 1 + 2^-7: rounds to even (1.0).
        assert_eq!(round_bf16(1.0 + 2f32.powi(-8)), 1.0);
        assert_eq!(round_bf16(1.0 + 3.0 * 2f32.powi(-8)), 1.0 + 2f32.powi(-6));
        assert!(is_bf16_exact(round_bf16(std::f32::consts::PI)));
        assert!(round_bf16(f32::NAN).is_nan());
    }

    #[test]
    fn all_gather_concatenates() {
        let g = ProcessGroup::local(GroupKind::Z3, 2);
        let mut a = t(0, DType::F32, &[1.0, 2.0]);
        let mut b = t(1, DType::F32, &[3.0, 4.0]);
        a.shard_index = Some(0);
        b.shard_index = Some(1);
        let out = all_gather(&g, &[a, b]).unwrap();
        assert_eq!(out[0].elems, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(out[0].elems, out[1].elems);
    }

    #[test]
    fn singleton_collectives_are_identity() {
        let g = ProcessGroup::local(GroupKind::Z2, 1);
        let x = t(0, DType::F64, &[1.5, -2.0, 3.25]);
        assert_eq!(all_gather(&g, std::slice::from_ref(&x)).unwrap()[0].elems, x.elems);
        assert_eq!(reduce_scatter(&g, std::slice::from_ref(&x)).unwrap()[0].elems, x.elems);
        assert_eq!(all_reduce(&g, std::slice::from_ref(&x)).unwrap()[0].elems, x.elems);
    }

    #[test]
    fn reduce_scatter_sums_segments() {
        let g = ProcessGroup::local(GroupKind::Z2, 2);
        let out =
            reduce_scatter(&g, &[t(0, DType::F32, &[1.0, 1.0, 2.0, 2.0]), t(1, DType::F32, &[3.0, 3.0, 4.0, 4.0])])
                .unwrap();
        assert_eq!(out[0].elems, vec![4.0, 4.0]);
        assert_eq!(out[1].elems, vec![6.0, 6.0]);
    }

    #[test]
    fn all_reduce_sums() {
        let g = ProcessGroup::local(GroupKind::DzpReplica, 2);
        let out = all_reduce(&g, &[t(0, DType::F32, &[1.0, 2.0]), t(1, DType::F32, &[10.0, 20.0])]).unwrap();
        assert_eq!(out[0].elems, vec![11.0, 22.0]);
        assert_eq!(out[1].elems, vec![11.0, 22.0]);
    }

    #[test]
    fn error_paths() {
        let g = ProcessGroup::local(GroupKind::Z2, 2);
        let bf = [t(0, DType::Bf16, &[1.0, 1.0]), t(1, DType::Bf16, &[1.0, 1.0])];
        assert_eq!(reduce_scatter(&g, &bf), Err(HzpError::DTypeUnsupported("bf16")));
        let uneven = [t(0, DType::F32, &[1.0]), t(1, DType::F32, &[1.0, 2.0])];
        assert!(matches!(all_reduce(&g, &uneven), Err(HzpError::ShapeMismatch(_))));
        assert!(matches!(all_gather(&g, &uneven[..1]), Err(HzpError::ShapeMismatch(_))));
        let odd = [t(0, DType::F32, &[1.0, 2.0, 3.0]), t(1, DType::F32, &[1.0, 2.0, 3.0])];
        assert!(matches!(reduce_scatter(&g, &odd), Err(HzpError::ShapeMismatch(_))));
    }

    #[test]
    fn ring_cost_examples() {
        let topo = Topology {
            num_nodes: 2,
            ranks_per_node: 8,
            intra_bw: 400e9,
            inter_bw: 25e9,
            intra_latency: 0.0,
            inter_latency: 0.0,
        };
        let m = CostModel::new(topo);
        let mut g = ProcessGroup::local(GroupKind::Z3, 8);
        let ag = collective_cost(CollectiveKind::AllGather, &g, 8_000_000, &m);
        assert!((ag - 17.5e-6).abs() < 1e-15);
        assert_eq!(collective_cost(CollectiveKind::AllReduce, &g, 8_000_000, &m), 2.0 * ag);
        assert_eq!(
            collective_cost(CollectiveKind::AllGather, &ProcessGroup::local(GroupKind::Z3, 1), 1 << 30, &m),
            0.0
        );
        g.spans_nodes = true;
        assert!(collective_cost(CollectiveKind::AllGather, &g, 8_000_000, &m) > ag);
    }

    proptest! {
        #[test]
        fn reshard_all_gather_round_trip(
            g in 1usize..9,
            seg in 1usize..16,
            seed in any::<u64>(),
            which in 0usize..3,
        ) {
            let dtype = [DType::Bf16, DType::F32, DType::F64][which];
            let group = ProcessGroup::local(GroupKind::Z3, g);
            let mut x = seed;
            let shards: Vec<RankTensor> = (0..g).map(|i| {
                let vals: Vec<f64> = (0..seg).map(|_| {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let v = ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0;
                    match dtype { DType::F64 => v, DType::F32 => v as f32 as f64, DType::Bf16 => round_bf16(v as f32) as f64 }
                }).collect();
                RankTensor { owner_rank: i as u64, dtype, shard_index: Some(i), elems: vals }
            }).collect();
            let full = all_gather(&group, &shards).unwrap();
            prop_assert!(full.iter().all(|f| f.elems == full[0].elems));
            let back = shard(&full[0], g);
            for (a, b) in back.iter().zip(&shards) {
                prop_assert_eq!(a.elems.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                                b.elems.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }

        #[test]
        fn cost_monotone(bytes in 0u64..1 << 32, extra in 0u64..1 << 20, g in 2u64..64) {
            let topo = Topology { num_nodes: 8, ranks_per_node: 8, intra_bw: 400e9, inter_bw: 25e9,
                                  intra_latency: 1e-6, inter_latency: 5e-6 };
            let m = CostModel::new(topo);
            let k = CollectiveKind::AllGather;
            prop_assert!(m.ring_time(k, g, false, bytes + extra) >= m.ring_time(k, g, false, bytes));
            prop_assert!(m.ring_time(k, g, true, bytes) >= m.ring_time(k, g, false, bytes));
            // fixed per-shard payload: growing the group never makes it cheaper
            let per = bytes / g;
            prop_assert!(m.ring_time(k, g + 1, false, per * (g + 1)) >= m.ring_time(k, g, false, per * g));
            prop_assert!(m.ring_time(k, g, false, bytes) >= 0.0);
        }
    }
}
