//! Uniform blur degradation: `y = k ⊗ x + n` with valid-region sizing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ConvMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on the unit-sum constraint of a blur kernel.
pub const KERNEL_SUM_TOL: f64 = 1e-6;

/// Odd-sized square kernel with non-negative entries summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    values: Tensor,
}

impl BlurKernel {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 2 || s[0] != s[1] || s[0].is_multiple_of(2) {
            return Err(Error::contract(format!(
                "blur kernel must be square with odd side, got {s:?}"
            )));
        }
        if let Some(v) = values.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::contract(format!("blur kernel entry {v} is negative or not finite")));
        }
        let sum = values.sum();
        if (sum - 1.0).abs() > KERNEL_SUM_TOL {
            return Err(Error::contract(format!("blur kernel sums to {sum}, not 1")));
        }
        Ok(Self { values })
    }

    /// Rescales a non-negative array to unit sum.
    pub fn normalized(values: Tensor) -> Result<Self> {
        let sum = values.sum();
        if !(sum > 0.0) {
            return Err(Error::contract("kernel mass must be positive"));
        }
        Self::new(values.map(|v| v / sum))
    }

    /// All mass in the center cell.
    pub fn delta(size: usize) -> Result<Self> {
        let mut t = Tensor::zeros(&[size, size]);
        t.set(&[size / 2, size / 2], 1.0);
        Self::new(t)
    }

    /// Equal mass `1/K²` everywhere.
    pub fn uniform(size: usize) -> Result<Self> {
        Self::new(Tensor::full(&[size, size], 1.0 / (size * size) as f64))
    }

    pub fn size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

/// Observation noise settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlurConfig {
    /// Standard deviation of additive white Gaussian noise, in `[0, 1]` image units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// Valid correlation of a single-channel image with a kernel.
pub fn convolve_valid(image: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let k = tape.constant(kernel.clone());
    let y = tape.conv2d(x, k, ConvMode::Valid)?;
    Ok(tape.value(y).clone())
}

/// Degrades `clean` (`[H+K-1, W+K-1]`, or `[C, H+K-1, W+K-1]` with one shared
/// kernel) into an `H×W` observation. Noise is not clipped.
pub fn blur(clean: &Tensor, kernel: &BlurKernel, cfg: &BlurConfig) -> Result<Tensor> {
    if !(cfg.noise_sigma >= 0.0) || !cfg.noise_sigma.is_finite() {
        return Err(Error::contract(format!("noise sigma {} is invalid", cfg.noise_sigma)));
    }
    let k = kernel.size();
    let s = clean.shape();
    let (channels, h, w) = match *s {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::dim("blur", s, &[k, k])),
    };
    if h < k || w < k {
        return Err(Error::dim("blur", s, &[k, k]));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(channels * (h - k + 1) * (w - k + 1));
    for c in 0..channels {
        let img = Tensor::new(vec![h, w], clean.data()[c * plane..(c + 1) * plane].to_vec())?;
        out.extend(convolve_valid(&img, kernel.tensor())?.into_data());
    }
    if cfg.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma checked above");
        out.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let shape = if s.len() == 2 {
        vec![h - k + 1, w - k + 1]
    } else {
        vec![channels, h - k + 1, w - k + 1]
    };
    Tensor::new(shape, out)
}

/// `Σ (k ⊗ x − y)²` recorded on `tape`, differentiable in kernel and image.
pub fn data_fit_loss(tape: &mut Tape, kernel: Var, image: Var, observed: Var) -> Result<Var> {
    let pred = tape.conv2d(image, kernel, ConvMode::Valid)?;
    if tape.shape(pred) != tape.shape(observed) {
        return Err(Error::dim("data_fit_loss", tape.shape(pred), tape.shape(observed)));
    }
    let r = tape.sub(pred, observed)?;
    let sq = tape.square(r);
    Ok(tape.sum(sq))
}

/// Value of [`data_fit_loss`] without recording gradients.
pub fn data_fit(kernel: &BlurKernel, image: &Tensor, observed: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let k = tape.constant(kernel.tensor().clone());
    let x = tape.constant(image.clone());
    let y = tape.constant(observed.clone());
    let l = data_fit_loss(&mut tape, k, x, y)?;
    Ok(tape.value(l).item())
}

/// Central `h×w` window of `image`.
pub fn center_crop(image: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 2 || s[0] < h || s[1] < w {
        return Err(Error::dim("center_crop", s, &[h, w]));
    }
    let (oy, ox) = ((s[0] - h) / 2, (s[1] - w) / 2);
    Ok(Tensor::from_fn(&[h, w], |i| image.at(&[oy + i / w, ox + i % w])))
}
