//! Convolution + instance-norm + activation blocks shared by the image
//! networks.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{kaiming_uniform, Bound, NamedTensorSet};
use crate::tensor::Tensor;

/// Registers `{prefix}.weight` `[cout, cin, k, k]` and, when `norm`, the
/// affine pair `{prefix}.gamma`/`{prefix}.beta`; otherwise `{prefix}.bias`.
pub(crate) fn add_conv<R: Rng + ?Sized>(
    set: &mut NamedTensorSet,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    norm: bool,
    rng: &mut R,
) -> Result<()> {
    set.insert(format!("{prefix}.weight"), kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng))?;
    if norm {
        set.insert(format!("{prefix}.gamma"), Tensor::full(&[cout], 1.0))?;
        set.insert(format!("{prefix}.beta"), Tensor::zeros(&[cout]))?;
    } else {
        set.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]))?;
    }
    Ok(())
}

/// Convolution with "same"-style padding `k/2`, then bias or instance norm.
pub(crate) fn conv(tape: &mut Tape, b: &Bound, prefix: &str, x: Var, stride: usize, norm: bool) -> Result<Var> {
    let w = b.var(&format!("{prefix}.weight"));
    let k = tape.shape(w)[2];
    let h = tape.conv2d_strided(x, w, stride, k / 2)?;
    if norm {
        tape.instance_norm(h, b.var(&format!("{prefix}.gamma")), b.var(&format!("{prefix}.beta")))
    } else {
        tape.add_bias(h, b.var(&format!("{prefix}.bias")))
    }
}
