//! GAN inversion: latent codes whose generated kernels match targets in L1.

use crate::autodiff::{AdamState, Tape};
use crate::blur::BlurKernel;
use crate::error::{Error, Result};
use crate::gan::Generator;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InversionConfig {
    /// Maximum number of Adam steps.
    pub steps: usize,
    pub lr: f64,
    /// Stop once the L1 loss falls below this.
    pub stop_tol: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-2,
            stop_tol: 1e-5,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() || !(self.stop_tol >= 0.0) || !self.stop_tol.is_finite() {
            return Err(Error::contract("inversion needs lr > 0 and a finite stop_tol ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    /// Lowest-loss iterate.
    pub latent: Tensor,
    pub loss: f64,
    pub initial_loss: f64,
    /// Adam steps taken before stopping.
    pub steps: usize,
}

/// Minimizes `‖G(z) − target‖₁` from `z_init` with Adam.
pub fn invert_kernel(target: &BlurKernel, gen: &Generator, z_init: &Tensor, cfg: &InversionConfig) -> Result<Inversion> {
    let dz = gen.latent_dim();
    if z_init.shape() != [dz] {
        return Err(Error::dim("invert_kernel", z_init.shape(), &[dz]));
    }
    let z = z_init.clone().reshape(&[1, dz])?;
    let mut out = invert_batch(std::slice::from_ref(target), gen, &z, cfg)?;
    let mut inv = out.remove(0);
    inv.latent = inv.latent.reshape(&[dz])?;
    Ok(inv)
}

/// Row-wise independent inversions of `targets` from `z_init` `[n, d_z]`,
/// evaluated as one batch. Results equal `n` separate [`invert_kernel`] runs.
pub fn invert_batch(
    targets: &[BlurKernel],
    gen: &Generator,
    z_init: &Tensor,
    cfg: &InversionConfig,
) -> Result<Vec<Inversion>> {
    cfg.validate()?;
    let (n, dz, k) = (targets.len(), gen.latent_dim(), gen.kernel_size());
    if n == 0 {
        return Ok(Vec::new());
    }
    if z_init.shape() != [n, dz] {
        return Err(Error::dim("invert_kernel", z_init.shape(), &[n, dz]));
    }
    let mut target_data = Vec::with_capacity(n * k * k);
    for t in targets {
        if t.size() != k {
            return Err(Error::dim("invert_kernel", &[t.size(), t.size()], &[k, k]));
        }
        target_data.extend_from_slice(t.tensor().data());
    }
    let target = Tensor::new(vec![n, 1, k, k], target_data)?;
    let bound_params = gen.params();

    let mut z = z_init.clone();
    let mut adam = AdamState::default();
    let mut done = vec![false; n];
    let mut steps = vec![0usize; n];
    let mut best: Vec<(f64, Vec<f64>)> = Vec::with_capacity(n);
    let mut initial = Vec::with_capacity(n);

    let mut s = 0;
    loop {
        let mut tape = Tape::new();
        let b = bound_params.bind(&mut tape, false);
        let zv = tape.param(z.clone());
        let kv = gen.forward(&mut tape, &b, zv)?;
        let tv = tape.constant(target.clone());
        let d = tape.sub(kv, tv)?;
        let d = tape.abs(d);
        let per_row: Vec<f64> = tape
            .value(d)
            .data()
            .chunks(k * k)
            .map(|c| c.iter().sum())
            .collect();
        for (i, &l) in per_row.iter().enumerate() {
            let row = z.data()[i * dz..(i + 1) * dz].to_vec();
            if s == 0 {
                initial.push(l);
                best.push((l, row));
            } else if !done[i] && l < best[i].0 {
                best[i] = (l, row);
            }
            if best[i].0 < cfg.stop_tol {
                done[i] = true;
            }
        }
        if s == cfg.steps || done.iter().all(|&d| d) {
            break;
        }
        let total = tape.sum(d);
        let grad = tape.backward(total)?.take(zv);
        let before = z.clone();
        adam.step(std::iter::once(&mut z), &[grad], cfg.lr)?;
        for i in 0..n {
            if done[i] {
                z.data_mut()[i * dz..(i + 1) * dz].copy_from_slice(&before.data()[i * dz..(i + 1) * dz]);
            } else {
                steps[i] += 1;
            }
        }
        if !z.is_finite() {
            return Err(Error::contract("latent inversion diverged"));
        }
        s += 1;
    }
    best.into_iter()
        .zip(initial)
        .zip(steps)
        .map(|(((loss, row), initial_loss), steps)| {
            Ok(Inversion {
                latent: Tensor::new(vec![dz], row)?,
                loss,
                initial_loss,
                steps,
            })
        })
        .collect()
}
