//! Training the projection of a kernelized dot-product network on the retrieval loss.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{run_epochs, Adam, TrainConfig, TrainReport};
use crate::error::{check_len, Error, Result};
use crate::exec;
use crate::models::{log_sum_exp, Kernel};
use crate::similarity::dot;
use crate::types::{MemoryMatrix, VariantSample, VariantSpec};
use crate::variants::StreamAllocator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelInit {
    /// Standard normal entries scaled by `1/√d`.
    Gaussian,
    /// Identity (requires a square kernel); starts out equal to the plain dot product.
    Identity,
}

fn projected_memory(kernel: &Kernel, memory: &MemoryMatrix) -> Vec<f64> {
    let mut out = vec![0.0; kernel.rows() * memory.n()];
    exec::fill_rows(&mut out, kernel.rows(), |k, row| {
        row.copy_from_slice(&kernel.apply(memory.column(k)));
    });
    out
}

/// Summed loss and summed (unnormalized) gradient over `indices`.
fn accumulate(
    kernel: &Kernel,
    beta: f64,
    memory: &MemoryMatrix,
    projected: &[f64],
    samples: &[VariantSample],
    indices: &[usize],
) -> (f64, Vec<f64>) {
    let (rows, d) = (kernel.rows(), kernel.cols());
    exec::sum_indexed(indices.len(), rows * d, |j, acc| {
        let sample = &samples[indices[j]];
        let x = sample.query.as_slice();
        let px = kernel.apply(x);
        let scores: Vec<f64> = projected.chunks_exact(rows).map(|pk| beta * dot(pk, &px)).collect();
        let lse = log_sum_exp(&scores);
        let mut c = vec![0.0; d];
        let mut pg = vec![0.0; rows];
        for (k, (&s, pk)) in scores.iter().zip(projected.chunks_exact(rows)).enumerate() {
            let g = (s - lse).exp() - f64::from(u8::from(k == sample.origin));
            for (a, v) in c.iter_mut().zip(memory.column(k)) {
                *a += g * v;
            }
            for (a, v) in pg.iter_mut().zip(pk) {
                *a += g * v;
            }
        }
        // ∂s_k/∂Φ = β (Φξ_k xᵀ + Φx ξ_kᵀ)
        for (r, row) in acc.chunks_exact_mut(d).enumerate() {
            for (jj, a) in row.iter_mut().enumerate() {
                *a += beta * (pg[r] * x[jj] + px[r] * c[jj]);
            }
        }
        lse - scores[sample.origin]
    })
}

fn check_kernel(memory: &MemoryMatrix, kernel: &Kernel, beta: f64) -> Result<()> {
    check_len("kernel columns", memory.d(), kernel.cols())?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be positive and finite, got {beta}")));
    }
    Ok(())
}

fn check(memory: &MemoryMatrix, batch: &[VariantSample], kernel: &Kernel, beta: f64) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    check_kernel(memory, kernel, beta)?;
    for s in batch {
        memory.check_query("query", &s.query)?;
        if s.origin >= memory.n() {
            return Err(Error::Config(format!("sample origin {} outside memory", s.origin)));
        }
    }
    Ok(())
}

pub fn kernel_loss(memory: &MemoryMatrix, batch: &[VariantSample], kernel: &Kernel, beta: f64) -> Result<f64> {
    check(memory, batch, kernel, beta)?;
    let projected = projected_memory(kernel, memory);
    let indices: Vec<usize> = (0..batch.len()).collect();
    let (sum, _) = accumulate(kernel, beta, memory, &projected, batch, &indices);
    Ok(sum / batch.len() as f64)
}

/// Gradient with respect to every kernel entry, row-major.
pub fn kernel_gradient(memory: &MemoryMatrix, batch: &[VariantSample], kernel: &Kernel, beta: f64) -> Result<Vec<f64>> {
    check(memory, batch, kernel, beta)?;
    let projected = projected_memory(kernel, memory);
    let indices: Vec<usize> = (0..batch.len()).collect();
    let (_, grad) = accumulate(kernel, beta, memory, &projected, batch, &indices);
    let n = batch.len() as f64;
    Ok(grad.into_iter().map(|g| g / n).collect())
}

pub fn train_kernel(
    memory: &MemoryMatrix,
    spec: &VariantSpec,
    d_phi: usize,
    beta: f64,
    init: KernelInit,
    cfg: &TrainConfig,
) -> Result<TrainReport<Kernel>> {
    let mut streams = StreamAllocator::new(cfg.seed, 0, u64::MAX / 2);
    train_kernel_with_streams(memory, spec, d_phi, beta, init, cfg, &mut streams)
}

pub fn train_kernel_with_streams(
    memory: &MemoryMatrix,
    spec: &VariantSpec,
    d_phi: usize,
    beta: f64,
    init: KernelInit,
    cfg: &TrainConfig,
    streams: &mut StreamAllocator,
) -> Result<TrainReport<Kernel>> {
    cfg.validate()?;
    spec.validate(memory.d())?;
    let d = memory.d();
    if d_phi == 0 {
        return Err(Error::Config("kernel width must be >= 1".into()));
    }
    let init_state = streams.single();
    let mut kernel = match init {
        KernelInit::Identity => {
            if d_phi != d {
                return Err(Error::Config(format!(
                    "identity kernel init needs width {d}, got {d_phi}"
                )));
            }
            Kernel::identity(d)
        }
        KernelInit::Gaussian => {
            let mut rng = init_state.rng();
            let scale = 1.0 / (d as f64).sqrt();
            let data = (0..d_phi * d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect();
            Kernel::new(d_phi, d, data)?
        }
    };
    check_kernel(memory, &kernel, beta)?;
    let mut adam = Adam::new(d_phi * d, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let log = run_epochs(
        memory,
        spec,
        cfg,
        streams,
        &mut kernel,
        |_, _| (),
        |kernel, _, samples, indices| {
            let projected = projected_memory(kernel, memory);
            let (sum, grad) = accumulate(kernel, beta, memory, &projected, samples, indices);
            let n = indices.len() as f64;
            let grad: Vec<f64> = grad.into_iter().map(|g| g / n).collect();
            adam.step(kernel.as_mut_slice(), &grad);
            sum
        },
        |k| k.as_slice().iter().all(|v| v.is_finite()),
    )?;
    Ok(TrainReport { params: kernel, log })
}
