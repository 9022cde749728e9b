//! Retrieval loss, analytic gradients and Adam training.

mod adam;
mod kernel;
mod optimal;

pub use adam::Adam;
pub use kernel::{kernel_gradient, kernel_loss, train_kernel, train_kernel_with_streams, KernelInit};
pub use optimal::{optimal_bias, optimal_weights_noisy};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::models::log_sum_exp;
use crate::similarity::{dot, features_into};
use crate::types::{BaseKind, MemoryMatrix, SquareMatrix, UMode, VariantSample, VariantSpec, WeightSet};
use crate::variants::{sample_batch, StreamAllocator, StreamRange};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    FullSet,
    MiniBatch(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleBudget {
    /// One fixed set of this many samples, reused every epoch.
    Finite(usize),
    /// This many fresh samples every epoch.
    Online(usize),
}

impl SampleBudget {
    fn streams_needed(self, epochs: usize) -> usize {
        match self {
            SampleBudget::Finite(n) => n,
            SampleBudget::Online(n) => n * epochs,
        }
    }

    fn per_epoch(self) -> usize {
        match self {
            SampleBudget::Finite(n) | SampleBudget::Online(n) => n,
        }
    }
}

fn default_epochs() -> usize {
    200
}
fn default_lr() -> f64 {
    0.1
}
fn default_batch() -> BatchMode {
    BatchMode::FullSet
}
fn default_budget() -> SampleBudget {
    SampleBudget::Finite(512)
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_cache_bytes() -> usize {
    2 << 30
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch: BatchMode,
    #[serde(default = "default_budget")]
    pub sample_budget: SampleBudget,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Largest precomputed feature table kept in memory; above it features are recomputed each epoch.
    #[serde(default = "default_cache_bytes")]
    pub feature_cache_bytes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            learning_rate: default_lr(),
            batch: default_batch(),
            sample_budget: default_budget(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            seed: 0,
            feature_cache_bytes: default_cache_bytes(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.sample_budget.per_epoch() == 0 {
            return Err(Error::Config("sample budget must be >= 1".into()));
        }
        if self.batch == BatchMode::MiniBatch(0) {
            return Err(Error::Config("mini-batch size must be >= 1".into()));
        }
        let betas_ok = (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2);
        if !betas_ok || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    /// Number of random streams one training run consumes.
    pub fn streams_needed(&self) -> usize {
        // One extra stream drives mini-batch shuffling.
        self.sample_budget.streams_needed(self.epochs) + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseGradient {
    pub dw: Vec<f64>,
    pub dbeta: f64,
    /// Present only for a learnable mixing matrix.
    pub du: Option<SquareMatrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub bases: Vec<BaseGradient>,
}

impl GradientSet {
    /// Flattened in the order used by [`flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.bases {
            out.extend_from_slice(&b.dw);
            out.push(b.dbeta);
            if let Some(du) = &b.du {
                out.extend_from_slice(du.as_slice());
            }
        }
        out
    }
}

/// Trainable parameters, base by base: `w`, then `β`, then the mixing matrix if learnable.
pub fn flatten_params(weights: &WeightSet) -> Vec<f64> {
    let mut out = Vec::new();
    for b in &weights.bases {
        out.extend_from_slice(&b.w);
        out.push(b.beta);
        if let UMode::Learnable(m) = &b.u_mode {
            out.extend_from_slice(m.as_slice());
        }
    }
    out
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params(weights: &mut WeightSet, params: &[f64]) {
    let mut at = 0;
    for b in &mut weights.bases {
        let d = b.w.len();
        b.w.copy_from_slice(&params[at..at + d]);
        at += d;
        b.beta = params[at];
        at += 1;
        if let UMode::Learnable(m) = &mut b.u_mode {
            let len = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&params[at..at + len]);
            at += len;
        }
    }
    debug_assert_eq!(at, params.len());
}

/// Shape of the per-sample feature block: pattern-major, then base, then dimension.
struct FeatureLayout {
    bases: Vec<(BaseKind, bool)>,
    d: usize,
    n: usize,
}

impl FeatureLayout {
    fn new(weights: &WeightSet, memory: &MemoryMatrix) -> Self {
        Self {
            bases: weights.bases.iter().map(|b| (b.base, b.sorted)).collect(),
            d: memory.d(),
            n: memory.n(),
        }
    }

    fn block_len(&self) -> usize {
        self.n * self.bases.len() * self.d
    }

    fn fill(&self, memory: &MemoryMatrix, query: &[f64], out: &mut [f64]) {
        let d = self.d;
        let per_pattern = self.bases.len() * d;
        for (col, chunk) in memory.columns().zip(out.chunks_exact_mut(per_pattern)) {
            for (&(base, sorted), f) in self.bases.iter().zip(chunk.chunks_exact_mut(d)) {
                features_into(base, sorted, col, query, f);
            }
        }
    }
}

/// Per-sample features, either precomputed for every sample or rebuilt on demand.
pub(crate) enum Features {
    Cached { data: Vec<f64>, block: usize },
    OnDemand,
}

impl Features {
    fn build(layout: &FeatureLayout, memory: &MemoryMatrix, samples: &[VariantSample], cache_bytes: usize) -> Self {
        let block = layout.block_len();
        let bytes = block.saturating_mul(samples.len()).saturating_mul(8);
        if bytes > cache_bytes {
            return Features::OnDemand;
        }
        let mut data = vec![0.0; block * samples.len()];
        exec::fill_rows(&mut data, block, |i, row| layout.fill(memory, &samples[i].query, row));
        Features::Cached { data, block }
    }

    fn with_block<T>(
        &self,
        layout: &FeatureLayout,
        memory: &MemoryMatrix,
        i: usize,
        query: &[f64],
        f: impl FnOnce(&[f64]) -> T,
    ) -> T {
        match self {
            Features::Cached { data, block } => f(&data[i * block..(i + 1) * block]),
            Features::OnDemand => {
                let mut buf = vec![0.0; layout.block_len()];
                layout.fill(memory, query, &mut buf);
                f(&buf)
            }
        }
    }
}

/// Loss sum and `Σ_samples Σ_k (p_k - 1[k = origin]) f_{k,b}` for every base.
fn accumulate(
    layout: &FeatureLayout,
    features: &Features,
    memory: &MemoryMatrix,
    samples: &[VariantSample],
    indices: &[usize],
    eff: &[Vec<f64>],
) -> (f64, Vec<f64>) {
    let d = layout.d;
    let nb = layout.bases.len();
    let per_pattern = nb * d;
    exec::sum_indexed(indices.len(), per_pattern, |j, acc| {
        let i = indices[j];
        let sample = &samples[i];
        features.with_block(layout, memory, i, &sample.query, |block| {
            let scores: Vec<f64> = block
                .chunks_exact(per_pattern)
                .map(|chunk| chunk.chunks_exact(d).zip(eff).map(|(f, u)| dot(u, f)).sum())
                .collect();
            let lse = log_sum_exp(&scores);
            let target = sample.origin;
            for (k, (chunk, &s)) in block.chunks_exact(per_pattern).zip(&scores).enumerate() {
                let g = (s - lse).exp() - f64::from(u8::from(k == target));
                for (a, f) in acc.iter_mut().zip(chunk) {
                    *a += g * f;
                }
            }
            lse - scores[target]
        })
    })
}

fn effective(weights: &WeightSet) -> Vec<Vec<f64>> {
    weights
        .bases
        .iter()
        .map(|b| b.effective_weights().into_iter().map(|v| v * b.beta).collect())
        .collect()
}

/// Converts summed feature residuals into parameter gradients.
fn to_gradient(weights: &WeightSet, residual: &[f64], n: usize) -> GradientSet {
    let d = weights.bases[0].w.len();
    let scale = 1.0 / n as f64;
    let bases = weights
        .bases
        .iter()
        .zip(residual.chunks_exact(d))
        .map(|(b, r)| {
            let g: Vec<f64> = r.iter().map(|v| v * scale).collect();
            let mg = b.u_mode.apply(&g);
            let u = b.effective_weights();
            let du = match &b.u_mode {
                UMode::Learnable(_) => {
                    let data = b
                        .w
                        .iter()
                        .flat_map(|&wi| g.iter().map(move |&gj| b.beta * wi * gj))
                        .collect();
                    Some(SquareMatrix::from_row_major(d, data).expect("finite gradient"))
                }
                _ => None,
            };
            BaseGradient {
                dw: mg.into_iter().map(|v| b.beta * v).collect(),
                dbeta: dot(&u, &g),
                du,
            }
        })
        .collect();
    GradientSet { bases }
}

fn check_batch(memory: &MemoryMatrix, batch: &[VariantSample], weights: &WeightSet) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    weights.validate(memory.d())?;
    for s in batch {
        memory.check_query("query", &s.query)?;
        if s.origin >= memory.n() {
            return Err(Error::Config(format!(
                "sample origin {} outside memory of {} patterns",
                s.origin,
                memory.n()
            )));
        }
    }
    Ok(())
}

fn loss_and_gradient_unchecked(
    memory: &MemoryMatrix,
    batch: &[VariantSample],
    weights: &WeightSet,
) -> (f64, GradientSet) {
    let layout = FeatureLayout::new(weights, memory);
    let indices: Vec<usize> = (0..batch.len()).collect();
    let (sum, residual) = accumulate(&layout, &Features::OnDemand, memory, batch, &indices, &effective(weights));
    (sum / batch.len() as f64, to_gradient(weights, &residual, batch.len()))
}

/// Mean negative log softmax probability of each sample's origin.
pub fn loss(memory: &MemoryMatrix, batch: &[VariantSample], weights: &WeightSet) -> Result<f64> {
    check_batch(memory, batch, weights)?;
    Ok(loss_and_gradient_unchecked(memory, batch, weights).0)
}

/// Gradient of [`loss`] with respect to every trainable parameter.
pub fn gradient(memory: &MemoryMatrix, batch: &[VariantSample], weights: &WeightSet) -> Result<GradientSet> {
    check_batch(memory, batch, weights)?;
    Ok(loss_and_gradient_unchecked(memory, batch, weights).1)
}

pub fn loss_and_gradient(
    memory: &MemoryMatrix,
    batch: &[VariantSample],
    weights: &WeightSet,
) -> Result<(f64, GradientSet)> {
    check_batch(memory, batch, weights)?;
    Ok(loss_and_gradient_unchecked(memory, batch, weights))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches, before each update.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport<P> {
    pub params: P,
    pub log: Vec<EpochRecord>,
}

/// Trains with streams derived from `cfg.seed`.
pub fn train(
    memory: &MemoryMatrix,
    spec: &VariantSpec,
    init: &WeightSet,
    cfg: &TrainConfig,
) -> Result<TrainReport<WeightSet>> {
    let mut streams = StreamAllocator::new(cfg.seed, 0, u64::MAX / 2);
    train_with_streams(memory, spec, init, cfg, &mut streams)
}

/// Trains drawing every random stream from `streams`.
pub fn train_with_streams(
    memory: &MemoryMatrix,
    spec: &VariantSpec,
    init: &WeightSet,
    cfg: &TrainConfig,
    streams: &mut StreamAllocator,
) -> Result<TrainReport<WeightSet>> {
    cfg.validate()?;
    init.validate(memory.d())?;
    spec.validate(memory.d())?;
    let layout = FeatureLayout::new(init, memory);
    let mut weights = init.clone();
    let mut adam = Adam::new(
        flatten_params(&weights).len(),
        cfg.learning_rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    );
    let log = run_epochs(
        memory,
        spec,
        cfg,
        streams,
        &mut weights,
        |samples, reused| {
            if reused {
                Features::build(&layout, memory, samples, cfg.feature_cache_bytes)
            } else {
                Features::OnDemand
            }
        },
        |weights, features, samples, indices| {
            let (sum, residual) = accumulate(&layout, features, memory, samples, indices, &effective(weights));
            let grad = to_gradient(weights, &residual, indices.len());
            let mut params = flatten_params(weights);
            adam.step(&mut params, &grad.flatten());
            unflatten_params(weights, &params);
            sum
        },
        WeightSet::is_finite,
    )?;
    Ok(TrainReport { params: weights, log })
}

/// Shared epoch loop: draws samples per the budget, batches them, and checks for divergence.
///
/// `prepare` runs once per distinct sample set and is told whether the set is
/// reused across epochs; `step` performs one update on
/// the listed sample indices and returns their summed loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_epochs<S, P>(
    memory: &MemoryMatrix,
    spec: &VariantSpec,
    cfg: &TrainConfig,
    streams: &mut StreamAllocator,
    state: &mut S,
    prepare: impl Fn(&[VariantSample], bool) -> P,
    mut step: impl FnMut(&mut S, &P, &[VariantSample], &[usize]) -> f64,
    finite: impl Fn(&S) -> bool,
) -> Result<Vec<EpochRecord>> {
    let sample_streams = streams.allocate(cfg.sample_budget.streams_needed(cfg.epochs));
    let mut shuffle_rng = streams.single().rng();
    let per_epoch = cfg.sample_budget.per_epoch();
    let fixed = match cfg.sample_budget {
        SampleBudget::Finite(_) => {
            let samples = sample_batch(spec, memory, &sample_streams)?;
            let prepared = prepare(&samples, true);
            Some((samples, prepared))
        }
        SampleBudget::Online(_) => None,
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_finite = f64::NAN;
    let mut order: Vec<usize> = (0..per_epoch).collect();
    for epoch in 0..cfg.epochs {
        let fresh;
        let (samples, prepared) = match &fixed {
            Some((s, p)) => (s.as_slice(), p),
            None => {
                let block = epoch_block(&sample_streams, epoch, per_epoch);
                let samples = sample_batch(spec, memory, &block)?;
                let prepared = prepare(&samples, false);
                fresh = (samples, prepared);
                (fresh.0.as_slice(), &fresh.1)
            }
        };
        let batch_size = match cfg.batch {
            BatchMode::FullSet => per_epoch,
            BatchMode::MiniBatch(b) => {
                order.shuffle(&mut shuffle_rng);
                b.min(per_epoch)
            }
        };
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            total += step(state, prepared, samples, batch);
        }
        let loss = total / per_epoch as f64;
        if !loss.is_finite() || !finite(state) {
            return Err(Error::Divergence {
                epoch,
                loss,
                last_finite,
            });
        }
        last_finite = loss;
        log.push(EpochRecord { epoch, loss });
    }
    Ok(log)
}

fn epoch_block(streams: &StreamRange, epoch: usize, per_epoch: usize) -> StreamRange {
    let start = streams.streams.start + (epoch * per_epoch) as u64;
    StreamRange {
        seed: streams.seed,
        streams: start..start + per_epoch as u64,
    }
}
