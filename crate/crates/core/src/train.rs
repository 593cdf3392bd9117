//! Sharded training of a small dense network over simulated data-parallel
//! ranks, and a single-device reference that reproduces its arithmetic.
//!
//! Each step of the sharded path:
//!
//! 1. all-gather parameter shards over the Z3 group,
//! 2. forward and backward on every rank for each micro-batch, then
//!    reduce-scatter gradients over the Z2 group and accumulate,
//! 3. all-reduce gradient shards across Z2 replicas,
//! 4. all-gather the reduced gradient and take this rank's Z1 slice,
//! 5. Adam on the Z1 optimizer shard, then rebuild parameter shards by an
//!    all-gather over the Z1 group.
//!
//! In mixed precision the master copy, gradients and moments are FP32 and
//! the working parameters are the master rounded to BF16 on write-back. The
//! reference adds gradients in the same order as the collectives (Z2
//! replicas, then micro-batches, then ranks within a Z2 group), so the two
//! paths agree bit for bit.

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::collective::{all_gather, all_reduce_ordered, reduce_scatter, round_bf16, DType, RankTensor};
use crate::config::{GroupKind, ParallelConfig, ProcessGroup, VerifySection};
use crate::error::{HzpError, Result};
use crate::memory::divisors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp64,
    /// FP32 master, gradients and moments; BF16 working parameters.
    Mixed,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Fp64 => "fp64",
            Precision::Mixed => "mixed",
        }
    }

    fn param_dtype(self) -> DType {
        match self {
            Precision::Fp64 => DType::F64,
            Precision::Mixed => DType::Bf16,
        }
    }

    fn state_dtype(self) -> DType {
        match self {
            Precision::Fp64 => DType::F64,
            Precision::Mixed => DType::F32,
        }
    }

    /// Working-copy value of a master value.
    fn working(self, x: f64) -> f64 {
        match self {
            Precision::Fp64 => x,
            Precision::Mixed => round_bf16(x as f32) as f64,
        }
    }

    /// Largest tolerated max-abs parameter difference against the reference.
    pub fn param_tolerance(self) -> f64 {
        match self {
            Precision::Fp64 => 0.0,
            Precision::Mixed => 1e-6,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = HzpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp64" => Ok(Precision::Fp64),
            "mixed" => Ok(Precision::Mixed),
            other => Err(HzpError::InvalidConfig(format!("unknown precision {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Dense layers with tanh between them and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TinyModel {
    pub dims: Vec<usize>,
    /// Per layer, `[W (outputs x inputs, row-major), b]` flattened. Values
    /// are FP32-representable.
    pub layers: Vec<Vec<f64>>,
}

impl TinyModel {
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(HzpError::InvalidConfig(format!("bad layer dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                (0..w[1] * w[0] + w[1]).map(|_| rng.gen_range(-bound..bound) as f32 as f64).collect()
            })
            .collect();
        Ok(Self { dims: dims.to_vec(), layers })
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Training data for one step: `per_rank[rank][microbatch]` is a list of
/// samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Batch {
    pub per_rank: Vec<Vec<Vec<Sample>>>,
}

impl Batch {
    pub fn random(dims: &[usize], dp: usize, microbatches: usize, samples: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (din, dout) = (dims[0], *dims.last().unwrap());
        let mut vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect() };
        let per_rank = (0..dp)
            .map(|_| {
                (0..microbatches)
                    .map(|_| (0..samples).map(|_| Sample { x: vec(din), y: vec(dout) }).collect())
                    .collect()
            })
            .collect();
        Self { per_rank }
    }

    pub fn dp(&self) -> usize {
        self.per_rank.len()
    }

    pub fn microbatches(&self) -> usize {
        self.per_rank.first().map_or(0, Vec::len)
    }

    pub fn samples(&self) -> usize {
        self.per_rank.first().and_then(|r| r.first()).map_or(0, Vec::len)
    }

    /// Loss scale so that the summed gradient is a mean over all samples.
    fn scale(&self) -> f64 {
        1.0 / (self.dp() * self.microbatches() * self.samples()).max(1) as f64
    }
}

fn cast<T: Float>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from(x).unwrap()).collect()
}

fn uncast<T: Float>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap()).collect()
}

/// Loss and parameter gradient summed over `samples`, in sample order.
pub(crate) fn local_grad<T: Float>(
    dims: &[usize],
    params: &[Vec<T>],
    samples: &[Sample],
    scale: T,
) -> (T, Vec<Vec<T>>) {
    let half = T::from(0.5).unwrap();
    let nl = dims.len() - 1;
    let mut grads: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
    let mut loss = T::zero();
    for s in samples {
        let mut acts: Vec<Vec<T>> = vec![cast(&s.x)];
        for l in 0..nl {
            let (din, dout) = (dims[l], dims[l + 1]);
            let (w, b) = params[l].split_at(din * dout);
            let a = &acts[l];
            let out: Vec<T> = (0..dout)
                .map(|o| {
                    let mut z = b[o];
                    for i in 0..din {
                        z = z + w[o * din + i] * a[i];
                    }
                    if l + 1 < nl {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        let y: Vec<T> = cast(&s.y);
        let mut delta: Vec<T> = acts[nl].iter().zip(&y).map(|(&o, &t)| (o - t) * scale).collect();
        for (&o, &t) in acts[nl].iter().zip(&y) {
            loss = loss + half * (o - t) * (o - t) * scale;
        }
        for l in (0..nl).rev() {
            let (din, dout) = (dims[l], dims[l + 1]);
            let a = &acts[l];
            let g = &mut grads[l];
            for o in 0..dout {
                for i in 0..din {
                    g[o * din + i] = g[o * din + i] + delta[o] * a[i];
                }
                g[din * dout + o] = g[din * dout + o] + delta[o];
            }
            if l > 0 {
                let w = &params[l][..din * dout];
                delta = (0..din)
                    .map(|i| {
                        let mut s = T::zero();
                        for o in 0..dout {
                            s = s + w[o * din + i] * delta[o];
                        }
                        s * (T::one() - a[i] * a[i])
                    })
                    .collect();
            }
        }
    }
    (loss, grads)
}

fn adam_update<T: Float>(p: &mut T, m: &mut T, v: &mut T, g: T, step: i32, hp: &AdamParams) {
    let c = |x: f64| T::from(x).unwrap();
    let (b1, b2) = (c(hp.beta1), c(hp.beta2));
    *m = b1 * *m + (T::one() - b1) * g;
    *v = b2 * *v + (T::one() - b2) * g * g;
    let mhat = *m / (T::one() - b1.powi(step));
    let vhat = *v / (T::one() - b2.powi(step));
    *p = *p - c(hp.lr) * mhat / (vhat.sqrt() + c(hp.eps));
}

/// Per-rank state. Shards of every layer are cut from the layer's flat
/// vector, zero-padded to a multiple of the group size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShardedState {
    pub rank: usize,
    /// Working parameters, `ceil(n / z3)` per layer.
    pub param_shards: Vec<Vec<f64>>,
    /// Accumulated, replica-reduced gradients, `ceil(n / z2)` per layer.
    pub grad_shards: Vec<Vec<f64>>,
    /// Master copy, first and second moments, `ceil(n / z1)` per layer.
    pub master: Vec<Vec<f64>>,
    pub momentum: Vec<Vec<f64>>,
    pub variance: Vec<Vec<f64>>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShardedModel {
    pub dims: Vec<usize>,
    pub layer_lens: Vec<usize>,
    pub dp: usize,
    pub z1: usize,
    pub z2: usize,
    pub z3: usize,
    pub precision: Precision,
    pub states: Vec<ShardedState>,
}

fn slice_padded(full: &[f64], parts: usize, index: usize) -> Vec<f64> {
    let len = full.len().div_ceil(parts);
    let mut out: Vec<f64> = full.iter().skip(index * len).take(len).copied().collect();
    out.resize(len, 0.0);
    out
}

fn pad_to_multiple(mut v: Vec<f64>, parts: usize) -> Vec<f64> {
    let len = v.len().div_ceil(parts) * parts;
    v.resize(len, 0.0);
    v
}

/// Cuts the model into per-rank shards. Only the data-parallel dimension of
/// `cfg` is used.
pub fn shard_init(model: &TinyModel, cfg: &ParallelConfig, precision: Precision) -> Result<ShardedModel> {
    let dp = cfg.dp;
    for (name, z) in [("z1", cfg.z1), ("z2", cfg.z2), ("z3", cfg.z3)] {
        if z == 0 || dp == 0 || !dp.is_multiple_of(z) {
            return Err(HzpError::NonDivisible(format!("{name}={z} does not divide dp={dp}")));
        }
    }
    let (dp, z1, z2, z3) = (dp as usize, cfg.z1 as usize, cfg.z2 as usize, cfg.z3 as usize);
    let states = (0..dp)
        .map(|rank| {
            let working: Vec<Vec<f64>> =
                model.layers.iter().map(|l| l.iter().map(|&x| precision.working(x)).collect()).collect();
            ShardedState {
                rank,
                param_shards: working.iter().map(|l| slice_padded(l, z3, rank % z3)).collect(),
                grad_shards: model.layers.iter().map(|l| vec![0.0; l.len().div_ceil(z2)]).collect(),
                master: model.layers.iter().map(|l| slice_padded(l, z1, rank % z1)).collect(),
                momentum: model.layers.iter().map(|l| vec![0.0; l.len().div_ceil(z1)]).collect(),
                variance: model.layers.iter().map(|l| vec![0.0; l.len().div_ceil(z1)]).collect(),
                step: 0,
            }
        })
        .collect();
    Ok(ShardedModel {
        dims: model.dims.clone(),
        layer_lens: model.layers.iter().map(Vec::len).collect(),
        dp,
        z1,
        z2,
        z3,
        precision,
        states,
    })
}

impl ShardedModel {
    /// Contiguous groups of size `z`.
    fn groups(&self, kind: GroupKind, z: usize) -> Vec<ProcessGroup> {
        (0..self.dp / z)
            .map(|g| ProcessGroup { kind, ranks: (g * z..(g + 1) * z).map(|r| r as u64).collect(), spans_nodes: false })
            .collect()
    }

    /// Ranks holding the same gradient shard in different Z2 replicas.
    fn replica_groups(&self) -> Vec<ProcessGroup> {
        (0..self.z2)
            .map(|j| ProcessGroup {
                kind: GroupKind::DzpReplica,
                ranks: (j..self.dp).step_by(self.z2).map(|r| r as u64).collect(),
                spans_nodes: false,
            })
            .collect()
    }

    fn concat(&self, shards: impl Iterator<Item = Vec<f64>>, n: usize) -> Vec<f64> {
        let mut v: Vec<f64> = shards.flatten().collect();
        v.truncate(n);
        v
    }

    /// Full working parameters per layer, concatenated from the first Z3
    /// group.
    pub fn gather_params(&self) -> Vec<Vec<f64>> {
        (0..self.layer_lens.len())
            .map(|l| self.concat((0..self.z3).map(|r| self.states[r].param_shards[l].clone()), self.layer_lens[l]))
            .collect()
    }

    /// Full master copy per layer, concatenated from the first Z1 group.
    pub fn gather_master(&self) -> Vec<Vec<f64>> {
        (0..self.layer_lens.len())
            .map(|l| self.concat((0..self.z1).map(|r| self.states[r].master[l].clone()), self.layer_lens[l]))
            .collect()
    }

    /// Parameter shards of one Z3 group, as a list per layer.
    pub fn z3_group_params(&self, group: usize) -> Vec<Vec<f64>> {
        (0..self.layer_lens.len())
            .map(|l| {
                self.concat(
                    (group * self.z3..(group + 1) * self.z3).map(|r| self.states[r].param_shards[l].clone()),
                    self.layer_lens[l],
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepOutput {
    /// Loss of each data-parallel replica, summed over its micro-batches.
    pub losses: Vec<f64>,
    /// Fully reduced gradient per layer.
    pub grads: Vec<Vec<f64>>,
}

fn tensor(owner: usize, dtype: DType, shard_index: Option<usize>, elems: Vec<f64>) -> RankTensor {
    RankTensor { owner_rank: owner as u64, dtype, shard_index, elems }
}

pub fn train_step_hzp(model: &mut ShardedModel, batch: &Batch, adam: &AdamParams) -> Result<StepOutput> {
    step_hzp(model, batch, adam, false)
}

/// `reverse_replica_sum` adds the cross-replica contributions in descending
/// order. It exists to check that the verifier notices.
pub(crate) fn step_hzp(
    model: &mut ShardedModel,
    batch: &Batch,
    adam: &AdamParams,
    reverse_replica_sum: bool,
) -> Result<StepOutput> {
    match model.precision {
        Precision::Fp64 => step_impl::<f64>(model, batch, adam, reverse_replica_sum),
        Precision::Mixed => step_impl::<f32>(model, batch, adam, reverse_replica_sum),
    }
}

fn check_batch(batch: &Batch, dp: usize, dims: &[usize]) -> Result<()> {
    if batch.dp() != dp || batch.microbatches() == 0 {
        return Err(HzpError::ShapeMismatch(format!("batch has {} replicas, expected {dp}", batch.dp())));
    }
    let ok =
        batch.per_rank.iter().flatten().flatten().all(|s| s.x.len() == dims[0] && s.y.len() == *dims.last().unwrap());
    if !ok {
        return Err(HzpError::ShapeMismatch("sample width does not match model dims".into()));
    }
    Ok(())
}

fn step_impl<T: Float + Send + Sync>(
    model: &mut ShardedModel,
    batch: &Batch,
    adam: &AdamParams,
    reverse: bool,
) -> Result<StepOutput> {
    check_batch(batch, model.dp, &model.dims)?;
    let (dp, nl) = (model.dp, model.layer_lens.len());
    let pdt = model.precision.param_dtype();
    let sdt = model.precision.state_dtype();
    let z1_groups = model.groups(GroupKind::Z1, model.z1);
    let z2_groups = model.groups(GroupKind::Z2, model.z2);
    let z3_groups = model.groups(GroupKind::Z3, model.z3);
    let replicas = model.replica_groups();
    let add = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| (T::from(x).unwrap() + T::from(y).unwrap()).to_f64().unwrap()).collect()
    };

    // Parameter all-gather; forward and backward read the same gathered copy.
    let mut full: Vec<Vec<Vec<T>>> = vec![Vec::with_capacity(nl); dp];
    for l in 0..nl {
        for g in &z3_groups {
            let shards: Vec<RankTensor> = g
                .ranks
                .iter()
                .enumerate()
                .map(|(pos, &r)| tensor(r as usize, pdt, Some(pos), model.states[r as usize].param_shards[l].clone()))
                .collect();
            for (t, &r) in all_gather(g, &shards)?.into_iter().zip(&g.ranks) {
                full[r as usize].push(cast(&t.elems[..model.layer_lens[l]]));
            }
        }
    }

    let scale = T::from(batch.scale()).unwrap();
    let mut losses: Vec<T> = vec![T::zero(); dp];
    for mb in 0..batch.microbatches() {
        let local: Vec<(T, Vec<Vec<T>>)> =
            (0..dp).into_par_iter().map(|r| local_grad(&model.dims, &full[r], &batch.per_rank[r][mb], scale)).collect();
        for (r, (loss, _)) in local.iter().enumerate() {
            losses[r] = if mb == 0 { *loss } else { losses[r] + *loss };
        }
        for l in 0..nl {
            for g in &z2_groups {
                let fulls: Vec<RankTensor> = g
                    .ranks
                    .iter()
                    .map(|&r| tensor(r as usize, sdt, None, pad_to_multiple(uncast(&local[r as usize].1[l]), model.z2)))
                    .collect();
                for (t, &r) in reduce_scatter(g, &fulls)?.into_iter().zip(&g.ranks) {
                    let st = &mut model.states[r as usize];
                    st.grad_shards[l] = if mb == 0 { t.elems } else { add(&st.grad_shards[l], &t.elems) };
                }
            }
        }
    }

    for l in 0..nl {
        for g in &replicas {
            let shards: Vec<RankTensor> = g
                .ranks
                .iter()
                .map(|&r| tensor(r as usize, sdt, None, model.states[r as usize].grad_shards[l].clone()))
                .collect();
            for (t, &r) in all_reduce_ordered(g, &shards, reverse)?.into_iter().zip(&g.ranks) {
                model.states[r as usize].grad_shards[l] = t.elems;
            }
        }
    }

    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(nl);
    let step = model.states[0].step + 1;
    for l in 0..nl {
        let n = model.layer_lens[l];
        let len1 = n.div_ceil(model.z1);
        for g in &z2_groups {
            let shards: Vec<RankTensor> = g
                .ranks
                .iter()
                .enumerate()
                .map(|(pos, &r)| tensor(r as usize, sdt, Some(pos), model.states[r as usize].grad_shards[l].clone()))
                .collect();
            for (t, &r) in all_gather(g, &shards)?.into_iter().zip(&g.ranks) {
                let r = r as usize;
                if r == 0 {
                    grads.push(t.elems[..n].to_vec());
                }
                let st = &mut model.states[r];
                let start = (r % model.z1) * len1;
                for k in 0..len1.min(n.saturating_sub(start)) {
                    let gk = T::from(t.elems[start + k]).unwrap();
                    let (mut p, mut m, mut v) = (
                        T::from(st.master[l][k]).unwrap(),
                        T::from(st.momentum[l][k]).unwrap(),
                        T::from(st.variance[l][k]).unwrap(),
                    );
                    adam_update(&mut p, &mut m, &mut v, gk, step as i32, adam);
                    st.master[l][k] = p.to_f64().unwrap();
                    st.momentum[l][k] = m.to_f64().unwrap();
                    st.variance[l][k] = v.to_f64().unwrap();
                }
            }
        }
        for g in &z1_groups {
            let shards: Vec<RankTensor> = g
                .ranks
                .iter()
                .enumerate()
                .map(|(pos, &r)| tensor(r as usize, sdt, Some(pos), model.states[r as usize].master[l].clone()))
                .collect();
            for (t, &r) in all_gather(g, &shards)?.into_iter().zip(&g.ranks) {
                let working: Vec<f64> = t.elems[..n].iter().map(|&x| model.precision.working(x)).collect();
                let r = r as usize;
                model.states[r].param_shards[l] = slice_padded(&working, model.z3, r % model.z3);
            }
        }
    }
    for st in &mut model.states {
        st.step = step;
    }
    Ok(StepOutput { losses: uncast(&losses), grads })
}

/// Unsharded training state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineState {
    pub dims: Vec<usize>,
    pub precision: Precision,
    pub master: Vec<Vec<f64>>,
    pub params: Vec<Vec<f64>>,
    pub momentum: Vec<Vec<f64>>,
    pub variance: Vec<Vec<f64>>,
    pub step: u64,
}

impl BaselineState {
    pub fn new(model: &TinyModel, precision: Precision) -> Self {
        Self {
            dims: model.dims.clone(),
            precision,
            master: model.layers.clone(),
            params: model.layers.iter().map(|l| l.iter().map(|&x| precision.working(x)).collect()).collect(),
            momentum: model.layers.iter().map(|l| vec![0.0; l.len()]).collect(),
            variance: model.layers.iter().map(|l| vec![0.0; l.len()]).collect(),
            step: 0,
        }
    }
}

/// One full-parameter step. Gradients of the `batch.dp()` data shards are
/// added in groups of `group_size` consecutive shards: within a group first,
/// then over micro-batches, then across groups.
pub fn train_step_baseline(
    state: &mut BaselineState,
    batch: &Batch,
    group_size: usize,
    adam: &AdamParams,
) -> Result<StepOutput> {
    match state.precision {
        Precision::Fp64 => baseline_impl::<f64>(state, batch, group_size, adam),
        Precision::Mixed => baseline_impl::<f32>(state, batch, group_size, adam),
    }
}

fn baseline_impl<T: Float>(
    state: &mut BaselineState,
    batch: &Batch,
    group_size: usize,
    adam: &AdamParams,
) -> Result<StepOutput> {
    let dp = batch.dp();
    if group_size == 0 || !dp.is_multiple_of(group_size) {
        return Err(HzpError::NonDivisible(format!("group size {group_size} does not divide {dp}")));
    }
    check_batch(batch, dp, &state.dims)?;
    let params: Vec<Vec<T>> = state.params.iter().map(|l| cast(l)).collect();
    let scale = T::from(batch.scale()).unwrap();
    let mb_count = batch.microbatches();
    let local: Vec<Vec<(T, Vec<Vec<T>>)>> = (0..dp)
        .map(|r| (0..mb_count).map(|mb| local_grad(&state.dims, &params, &batch.per_rank[r][mb], scale)).collect())
        .collect();
    let losses: Vec<T> =
        local.iter().map(|per_mb| per_mb.iter().skip(1).fold(per_mb[0].0, |acc, (l, _)| acc + *l)).collect();

    // Left-to-right sums: ranks within a group, then micro-batches, then groups.
    let add = |acc: Vec<T>, g: &[T]| -> Vec<T> {
        if acc.is_empty() {
            g.to_vec()
        } else {
            acc.iter().zip(g).map(|(&a, &b)| a + b).collect()
        }
    };
    let grads: Vec<Vec<T>> = (0..params.len())
        .map(|l| {
            local.chunks(group_size).fold(Vec::new(), |total, group| {
                let acc = (0..mb_count).fold(Vec::new(), |acc, mb| {
                    let inner = group.iter().fold(Vec::new(), |inner, rank| add(inner, &rank[mb].1[l]));
                    add(acc, &inner)
                });
                add(total, &acc)
            })
        })
        .collect();

    state.step += 1;
    for (l, layer) in grads.iter().enumerate() {
        for (e, &g) in layer.iter().enumerate() {
            let (mut p, mut m, mut v) = (
                T::from(state.master[l][e]).unwrap(),
                T::from(state.momentum[l][e]).unwrap(),
                T::from(state.variance[l][e]).unwrap(),
            );
            adam_update(&mut p, &mut m, &mut v, g, state.step as i32, adam);
            state.master[l][e] = p.to_f64().unwrap();
            state.momentum[l][e] = m.to_f64().unwrap();
            state.variance[l][e] = v.to_f64().unwrap();
            state.params[l][e] = state.precision.working(state.master[l][e]);
        }
    }
    Ok(StepOutput { losses: uncast(&losses), grads: grads.iter().map(|g| uncast(g)).collect() })
}

/// Model loss on `batch` with fixed parameters, in FP64. Used for gradient
/// checks.
pub fn loss_fp64(dims: &[usize], params: &[Vec<f64>], batch: &Batch) -> f64 {
    let scale = batch.scale();
    let mut total = 0.0;
    for rank in &batch.per_rank {
        for samples in rank {
            total += local_grad::<f64>(dims, params, samples, scale).0;
        }
    }
    total
}

/// Unreduced FP64 gradient of [`loss_fp64`].
pub fn grad_fp64(dims: &[usize], params: &[Vec<f64>], batch: &Batch) -> Vec<Vec<f64>> {
    let scale = batch.scale();
    let mut total: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    for rank in &batch.per_rank {
        for samples in rank {
            let (_, g) = local_grad::<f64>(dims, params, samples, scale);
            for (t, g) in total.iter_mut().zip(g) {
                for (a, b) in t.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyGrid {
    pub dp: Vec<u64>,
    pub microbatches: Vec<usize>,
    pub dims: Vec<usize>,
    pub samples_per_microbatch: usize,
}

impl From<&VerifySection> for VerifyGrid {
    fn from(v: &VerifySection) -> Self {
        Self {
            dp: v.dp.clone(),
            microbatches: v.microbatches.clone(),
            dims: v.dims.clone(),
            samples_per_microbatch: v.samples_per_microbatch,
        }
    }
}

impl VerifyGrid {
    /// Every `(dp, z1, z2, z3, microbatches)` with each `z` a divisor of dp.
    pub fn cases(&self) -> Vec<(u64, u64, u64, u64, usize)> {
        let mut out = Vec::new();
        for &dp in &self.dp {
            let divs = divisors(dp);
            for &z1 in &divs {
                for &z2 in &divs {
                    for &z3 in &divs {
                        for &m in &self.microbatches {
                            out.push((dp, z1, z2, z3, m));
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct VerifyOptions {
    /// Reverse the cross-replica gradient sum on the sharded side.
    pub inject_fault: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub dp: u64,
    pub z1: u64,
    pub z2: u64,
    pub z3: u64,
    pub microbatches: usize,
    pub seed: u64,
    pub max_abs_diff: f64,
    pub rel_diff: f64,
    pub grad_max_abs_diff: f64,
    pub pass: bool,
    #[serde(skip)]
    pub failure: Option<HzpError>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub precision: Precision,
    pub steps: usize,
    pub cases: Vec<CaseReport>,
    pub pass: bool,
}

impl VerifyReport {
    pub fn first_failure(&self) -> Option<&HzpError> {
        self.cases.iter().find_map(|c| c.failure.as_ref())
    }
}

/// Max-abs difference and the first index at which `a` and `b` differ by
/// more than `tol`.
fn compare(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) -> (f64, f64, Option<(usize, usize)>) {
    let mut max_abs = 0.0f64;
    let mut max_ref = 0.0f64;
    let mut first = None;
    for (l, (x, y)) in a.iter().zip(b).enumerate() {
        for (i, (&p, &q)) in x.iter().zip(y).enumerate() {
            let d = (p - q).abs();
            max_abs = max_abs.max(d);
            max_ref = max_ref.max(q.abs());
            let bad = if tol == 0.0 { p.to_bits() != q.to_bits() } else { d.is_nan() || d > tol };
            if bad && first.is_none() {
                first = Some((l, i));
            }
        }
    }
    let rel = if max_ref > 0.0 { max_abs / max_ref } else { 0.0 };
    (max_abs, rel, first)
}

fn run_case(
    grid: &VerifyGrid,
    case: (u64, u64, u64, u64, usize),
    seed: u64,
    steps: usize,
    precision: Precision,
    opts: VerifyOptions,
) -> Result<CaseReport> {
    let (dp, z1, z2, z3, m) = case;
    let model = TinyModel::new(&grid.dims, seed)?;
    let mut sharded = shard_init(&model, &ParallelConfig::data_parallel(dp, z1, z2, z3), precision)?;
    let mut base = BaselineState::new(&model, precision);
    let adam = AdamParams::default();
    let label = format!("dp={dp} z1={z1} z2={z2} z3={z3} microbatches={m} seed={seed} precision={}", precision.name());
    let mut report = CaseReport {
        dp,
        z1,
        z2,
        z3,
        microbatches: m,
        seed,
        max_abs_diff: 0.0,
        rel_diff: 0.0,
        grad_max_abs_diff: 0.0,
        pass: true,
        failure: None,
    };
    for step in 0..steps {
        let batch =
            Batch::random(&grid.dims, dp as usize, m, grid.samples_per_microbatch, seed ^ ((step as u64 + 1) << 32));
        let h = step_hzp(&mut sharded, &batch, &adam, opts.inject_fault)?;
        let b = train_step_baseline(&mut base, &batch, z2 as usize, &adam)?;
        let (gabs, _, gfirst) = compare(&h.grads, &b.grads, 0.0);
        let (pabs, prel, pfirst) = compare(&sharded.gather_master(), &base.master, precision.param_tolerance());
        report.grad_max_abs_diff = report.grad_max_abs_diff.max(gabs);
        report.max_abs_diff = report.max_abs_diff.max(pabs);
        report.rel_diff = report.rel_diff.max(prel);
        let failure = match (gfirst, pfirst) {
            (Some((l, i)), _) => Some((format!("grad[{l}]"), i, h.grads[l][i], b.grads[l][i])),
            (None, Some((l, i))) => Some((format!("param[{l}]"), i, sharded.gather_master()[l][i], base.master[l][i])),
            _ => None,
        };
        if let (Some((tensor, index, hzp, baseline)), true) = (failure, report.pass) {
            report.pass = false;
            report.failure =
                Some(HzpError::EquivalenceFailure { config: label.clone(), step, tensor, index, hzp, baseline });
        }
    }
    Ok(report)
}

/// Runs every grid case and seed against the reference and collects diffs.
pub fn verify_report(
    grid: &VerifyGrid,
    seeds: &[u64],
    steps: usize,
    precision: Precision,
    opts: VerifyOptions,
) -> Result<VerifyReport> {
    let jobs: Vec<_> = grid.cases().into_iter().flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let cases =
        jobs.into_par_iter().map(|(c, s)| run_case(grid, c, s, steps, precision, opts)).collect::<Result<Vec<_>>>()?;
    let pass = cases.iter().all(|c| c.pass);
    Ok(VerifyReport { precision, steps, cases, pass })
}

/// Like [`verify_report`], but fails with the first divergence found.
pub fn verify_equivalence(
    grid: &VerifyGrid,
    seeds: &[u64],
    steps: usize,
    precision: Precision,
) -> Result<VerifyReport> {
    let report = verify_report(grid, seeds, steps, precision, VerifyOptions::default())?;
    match report.first_failure() {
        Some(e) => Err(e.clone()),
        None => Ok(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: [usize; 4] = [6, 10, 10, 3];

    fn grid(dp: Vec<u64>, microbatches: Vec<usize>) -> VerifyGrid {
        VerifyGrid { dp, microbatches, dims: DIMS.to_vec(), samples_per_microbatch: 2 }
    }

    #[test]
    fn trivial_sharding_keeps_full_tensors() {
        let model = TinyModel::new(&DIMS, 1).unwrap();
        let s = shard_init(&model, &ParallelConfig::data_parallel(1, 1, 1, 1), Precision::Fp64).unwrap();
        assert_eq!(s.states[0].master, model.layers);
        assert_eq!(s.states[0].param_shards, model.layers);
    }

    #[test]
    fn gathered_params_are_rounded_master() {
        let model = TinyModel::new(&DIMS, 2).unwrap();
        let mut s = shard_init(&model, &ParallelConfig::data_parallel(4, 2, 4, 4), Precision::Mixed).unwrap();
        let check = |s: &ShardedModel| {
            let want: Vec<Vec<u64>> = s
                .gather_master()
                .iter()
                .map(|l| l.iter().map(|&x| (round_bf16(x as f32) as f64).to_bits()).collect())
                .collect();
            let got: Vec<Vec<u64>> =
                s.gather_params().iter().map(|l| l.iter().map(|x| x.to_bits()).collect()).collect();
            assert_eq!(got, want);
        };
        check(&s);
        let batch = Batch::random(&DIMS, 4, 2, 2, 7);
        train_step_hzp(&mut s, &batch, &AdamParams::default()).unwrap();
        check(&s);
    }

    #[test]
    fn same_seed_same_state() {
        let a = TinyModel::new(&DIMS, 9).unwrap();
        let b = TinyModel::new(&DIMS, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, TinyModel::new(&DIMS, 10).unwrap());
    }

    #[test]
    fn zero_lr_leaves_params() {
        let model = TinyModel::new(&DIMS, 3).unwrap();
        let mut base = BaselineState::new(&model, Precision::Fp64);
        let adam = AdamParams { lr: 0.0, ..AdamParams::default() };
        train_step_baseline(&mut base, &Batch::random(&DIMS, 2, 1, 2, 1), 1, &adam).unwrap();
        assert_eq!(base.master, model.layers);
    }

    #[test]
    fn single_rank_matches_bitwise() {
        for precision in [Precision::Fp64, Precision::Mixed] {
            let r = verify_report(&grid(vec![1], vec![1, 3]), &[5], 2, precision, VerifyOptions::default()).unwrap();
            assert!(r.pass);
            assert!(r.cases.iter().all(|c| c.max_abs_diff == 0.0));
        }
    }

    #[test]
    fn fp64_example_config() {
        let model = TinyModel::new(&DIMS, 11).unwrap();
        let mut s = shard_init(&model, &ParallelConfig::data_parallel(4, 4, 2, 2), Precision::Fp64).unwrap();
        let mut base = BaselineState::new(&model, Precision::Fp64);
        let batch = Batch::random(&DIMS, 4, 2, 3, 12);
        let adam = AdamParams::default();
        let h = train_step_hzp(&mut s, &batch, &adam).unwrap();
        let b = train_step_baseline(&mut base, &batch, 2, &adam).unwrap();
        assert_eq!(h.grads, b.grads);
        assert_eq!(h.losses, b.losses);
        assert_eq!(s.gather_master(), base.master);
    }

    #[test]
    fn losses_do_not_depend_on_sharding() {
        let model = TinyModel::new(&DIMS, 4).unwrap();
        let batch = Batch::random(&DIMS, 4, 2, 2, 4);
        let losses: Vec<Vec<f64>> = [(1, 1, 1), (4, 2, 1), (2, 4, 4)]
            .iter()
            .map(|&(z1, z2, z3)| {
                let mut s =
                    shard_init(&model, &ParallelConfig::data_parallel(4, z1, z2, z3), Precision::Mixed).unwrap();
                train_step_hzp(&mut s, &batch, &AdamParams::default()).unwrap().losses
            })
            .collect();
        assert!(losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn zero_steps_pass() {
        let r = verify_equivalence(&grid(vec![2], vec![1]), &[0], 0, Precision::Mixed).unwrap();
        assert!(r.pass);
    }

    #[test]
    fn reversed_replica_sum_is_caught() {
        let g = grid(vec![4], vec![2]);
        let opts = VerifyOptions { inject_fault: true };
        let r = verify_report(&g, &[1, 2, 3], 1, Precision::Mixed, opts).unwrap();
        let faulty = r.cases.iter().filter(|c| c.z2 == 1 && !c.pass).count();
        assert!(faulty > 0);
        assert!(matches!(r.first_failure(), Some(HzpError::EquivalenceFailure { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = TinyModel::new(&DIMS, 21).unwrap();
        let batch = Batch::random(&DIMS, 2, 2, 3, 22);
        let grads = grad_fp64(&DIMS, &model.layers, &batch);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 1e-6;
        for _ in 0..10 {
            let l = rng.gen_range(0..model.layers.len());
            let i = rng.gen_range(0..model.layers[l].len());
            let mut plus = model.layers.clone();
            let mut minus = model.layers.clone();
            plus[l][i] += h;
            minus[l][i] -= h;
            let fd = (loss_fp64(&DIMS, &plus, &batch) - loss_fp64(&DIMS, &minus, &batch)) / (2.0 * h);
            let g = grads[l][i];
            let rel = (fd - g).abs() / g.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "layer {l} index {i}: fd {fd} analytic {g}");
        }
    }

    #[test]
    fn rejects_non_divisor() {
        let model = TinyModel::new(&DIMS, 1).unwrap();
        assert!(matches!(
            shard_init(&model, &ParallelConfig::data_parallel(4, 3, 1, 1), Precision::Fp64),
            Err(HzpError::NonDivisible(_))
        ));
    }
}
