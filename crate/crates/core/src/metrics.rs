//! PSNR, SSIM and translation-aligned kernel error.

use std::fmt;

use crate::blur::BlurKernel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB for signals with peak 1.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("psnr", a.shape(), b.shape()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    w
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, win: &[f64]) -> f64 {
    let n = SSIM_WINDOW;
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..n {
                for v in 0..n {
                    let g = win[u * n + v];
                    let (x, y) = (a[(i + u) * w + j + v], b[(i + u) * w + j + v]);
                    ma += g * x;
                    mb += g * y;
                    saa += g * x * x;
                    sbb += g * y * y;
                    sab += g * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
    }
    total / (oh * ow) as f64
}

/// Mean single-scale SSIM over all valid 11×11 Gaussian windows; color
/// images (`[C, H, W]`) average the per-channel scores.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("ssim", a.shape(), b.shape()));
    }
    let (c, h, w) = match *a.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::dim("ssim", a.shape(), &[SSIM_WINDOW, SSIM_WINDOW])),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim("ssim", a.shape(), &[SSIM_WINDOW, SSIM_WINDOW]));
    }
    let win = gaussian_window();
    let plane = h * w;
    let sum: f64 = (0..c)
        .map(|k| {
            let r = k * plane..(k + 1) * plane;
            ssim_plane(&a.data()[r.clone()], &b.data()[r], h, w, &win)
        })
        .sum();
    Ok(sum / c as f64)
}

/// `est` translated by `(dy, dx)` with zero fill.
pub fn shift_kernel(est: &Tensor, dy: i64, dx: i64) -> Tensor {
    let (h, w) = (est.shape()[0], est.shape()[1]);
    Tensor::from_fn(&[h, w], |p| {
        let (i, j) = ((p / w) as i64 - dy, (p % w) as i64 - dx);
        if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
            est.at(&[i as usize, j as usize])
        } else {
            0.0
        }
    })
}

/// L1 distance between `est` translated by `(dy, dx)` and `reference`,
/// counting mass that leaves the grid as error (both kernels are treated as
/// zero outside their support, so the distance is symmetric).
fn shifted_distance(est: &Tensor, reference: &Tensor, dy: i64, dx: i64) -> f64 {
    let shifted = shift_kernel(est, dy, dx);
    let kept = shifted.sum();
    shifted.l1_distance(reference) + (est.sum() - kept).abs()
}

/// Integer translation of `est` within `±K/2` per axis that best matches
/// `reference` in L1. Ties go to the smaller shift.
pub fn align_kernel(est: &BlurKernel, reference: &BlurKernel) -> Result<(Tensor, (i64, i64), f64)> {
    let k = est.size();
    if reference.size() != k {
        return Err(Error::dim("align_kernel", &[k, k], &[reference.size(), reference.size()]));
    }
    let r = (k / 2) as i64;
    let mut shifts: Vec<(i64, i64)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect();
    shifts.sort_by_key(|&(dy, dx)| (dy.abs() + dx.abs(), dy, dx));
    let (mut best, mut best_d) = ((0, 0), f64::INFINITY);
    for (dy, dx) in shifts {
        let d = shifted_distance(est.tensor(), reference.tensor(), dy, dx);
        if d < best_d {
            best_d = d;
            best = (dy, dx);
        }
    }
    Ok((shift_kernel(est.tensor(), best.0, best.1), best, best_d))
}

/// L1 kernel error after [`align_kernel`].
pub fn kernel_error(est: &BlurKernel, reference: &BlurKernel) -> Result<f64> {
    align_kernel(est, reference).map(|(_, _, d)| d)
}

/// One evaluation record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub kernel_l1: Option<f64>,
    pub shift: Option<(i64, i64)>,
}

impl MetricReport {
    pub fn evaluate(pred: &Tensor, reference: &Tensor, kernels: Option<(&BlurKernel, &BlurKernel)>) -> Result<Self> {
        let mut report = Self {
            psnr_db: psnr(pred, reference)?,
            ssim: ssim(pred, reference)?,
            kernel_l1: None,
            shift: None,
        };
        if let Some((est, gt)) = kernels {
            let (_, shift, d) = align_kernel(est, gt)?;
            report.kernel_l1 = Some(d);
            report.shift = Some(shift);
        }
        Ok(report)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PSNR={:.4} SSIM={:.4}", self.psnr_db, self.ssim)?;
        if let (Some(d), Some((dy, dx))) = (self.kernel_l1, self.shift) {
            write!(f, " KL1={d:.6} SHIFT=({dy},{dx})")?;
        }
        Ok(())
    }
}
