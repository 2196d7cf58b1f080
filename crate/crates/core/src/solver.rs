//! Blind deconvolution: joint Adam updates of the kernel variable and the
//! image network against the data-fit loss, starting from an encoder-predicted
//! (or alternative) kernel state.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Tape, Var};
use crate::blur::{data_fit_loss, BlurKernel};
use crate::dip::{batch_input, image_shape, sample_dip_input, DipConfig, DipInput, DipNet};
use crate::error::{Error, Result};
use crate::gan::Generator;
use crate::initializer::Encoder;
use crate::inversion::{invert_kernel, InversionConfig};
use crate::metrics::psnr;
use crate::tensor::Tensor;

const DIP_INPUT_SEED_MIX: u64 = 0x6469_7030;

/// Which kernel-side variables are optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizeTarget {
    /// First-layer feature map `w`, generator tail frozen.
    FeatureW,
    /// Latent code `z`, generator frozen.
    LatentZ,
    /// Latent code and all generator weights.
    LatentZAndGenerator,
}

/// How the kernel variable is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitStrategy {
    /// `z₀ = E(y)`.
    Encoder,
    /// `z₀ ~ N(0, I)`.
    Random,
    /// `z₀` inverted from the uniform kernel.
    AverageInversion,
}

impl FromStr for OptimizeTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wk" | "feature_w" => Ok(Self::FeatureW),
            "zk" | "latent_z" => Ok(Self::LatentZ),
            "zk-theta" | "latent_z_and_generator" => Ok(Self::LatentZAndGenerator),
            _ => Err(Error::contract(format!("unknown optimize target {s:?} (wk, zk, zk-theta)"))),
        }
    }
}

impl fmt::Display for OptimizeTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FeatureW => "wk",
            Self::LatentZ => "zk",
            Self::LatentZAndGenerator => "zk-theta",
        })
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Self::Encoder),
            "random" => Ok(Self::Random),
            "average" | "average_inversion" => Ok(Self::AverageInversion),
            _ => Err(Error::contract(format!("unknown init strategy {s:?} (encoder, random, average)"))),
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Encoder => "encoder",
            Self::Random => "random",
            Self::AverageInversion => "average",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveConfig {
    pub iterations: usize,
    /// Learning rate of the kernel variable (`w` or `z`).
    pub lr_kernel: f64,
    /// Learning rate of the image network.
    pub lr_image: f64,
    /// Learning rate of the generator weights when they are optimized.
    pub lr_generator: f64,
    /// Fractions of `iterations` at which all rates are multiplied by
    /// `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
    pub optimize: OptimizeTarget,
    pub init: InitStrategy,
    /// Seed of the random and average-inversion initializations.
    pub seed: u64,
    /// Steps of the average-kernel inversion.
    pub average_steps: usize,
    pub dip: DipConfig,
    /// Expected kernel size; checked against the generator when set.
    pub kernel_size: Option<usize>,
    /// Keep the image estimate every this many iterations (0 disables).
    pub snapshot_every: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            iterations: 2500,
            lr_kernel: 5e-4,
            lr_image: 1e-2,
            lr_generator: 5e-4,
            decay_at: vec![0.4, 0.6, 0.8],
            decay_factor: 0.5,
            optimize: OptimizeTarget::FeatureW,
            init: InitStrategy::Encoder,
            seed: 0,
            average_steps: 500,
            dip: DipConfig::default(),
            kernel_size: None,
            snapshot_every: 0,
        }
    }
}

impl SolveConfig {
    fn validate(&self) -> Result<()> {
        let rates = [self.lr_kernel, self.lr_image, self.lr_generator, self.decay_factor];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::contract("solver learning rates and decay factor must be positive"));
        }
        Ok(())
    }

    /// Rate multiplier in effect at iteration `t`.
    pub fn decay_multiplier(&self, t: usize) -> f64 {
        let passed = self
            .decay_at
            .iter()
            .filter(|&&p| t as f64 >= (p * self.iterations as f64).floor())
            .count();
        self.decay_factor.powi(passed as i32)
    }
}

/// The optimized kernel-side variable.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelState {
    /// `w`, shape `[c₀, s₀, s₀]`.
    Feature(Tensor),
    /// `z`, shape `[d_z]`.
    Latent(Tensor),
}

impl KernelState {
    pub fn tensor(&self) -> &Tensor {
        match self {
            Self::Feature(t) | Self::Latent(t) => t,
        }
    }

    /// Kernel this state currently represents.
    pub fn kernel(&self, gen: &Generator) -> Result<BlurKernel> {
        match self {
            Self::Feature(w) => gen.tail_value(w),
            Self::Latent(z) => gen.generate(z),
        }
    }
}

/// Starting latent for a strategy, before any mapping to feature space.
pub fn initial_latent(
    blurry: &Tensor,
    encoder: Option<&Encoder>,
    gen: &Generator,
    strategy: InitStrategy,
    seed: u64,
    average_steps: usize,
) -> Result<Tensor> {
    let dz = gen.latent_dim();
    match strategy {
        InitStrategy::Encoder => {
            let enc = encoder.ok_or_else(|| Error::contract("encoder initialization needs an encoder"))?;
            if enc.latent_dim() != dz {
                return Err(Error::contract(format!(
                    "encoder latent dim {} does not match generator latent dim {dz}",
                    enc.latent_dim()
                )));
            }
            enc.encode(&luminance(blurry)?)
        }
        InitStrategy::Random => Ok(Tensor::randn(&[dz], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))),
        InitStrategy::AverageInversion => {
            let z0 = Tensor::randn(&[dz], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let cfg = InversionConfig {
                steps: average_steps,
                ..InversionConfig::default()
            };
            let target = BlurKernel::uniform(gen.kernel_size())?;
            Ok(invert_kernel(&target, gen, &z0, &cfg)?.latent)
        }
    }
}

/// Kernel variable for `target`: `g₁(z₀)` for the feature map, `z₀` otherwise.
pub fn initialize_kernel_state(
    blurry: &Tensor,
    encoder: Option<&Encoder>,
    gen: &Generator,
    strategy: InitStrategy,
    target: OptimizeTarget,
    seed: u64,
) -> Result<KernelState> {
    let z = initial_latent(blurry, encoder, gen, strategy, seed, InversionConfig::default().steps)?;
    match target {
        OptimizeTarget::FeatureW => Ok(KernelState::Feature(gen.first_layer_value(&z)?)),
        _ => Ok(KernelState::Latent(z)),
    }
}

/// Channel mean of a `[C, H, W]` image; `[H, W]` passes through.
fn luminance(img: &Tensor) -> Result<Tensor> {
    match *img.shape() {
        [_, _] => Ok(img.clone()),
        [c, h, w] => {
            let plane = h * w;
            Tensor::new(
                vec![h, w],
                (0..plane)
                    .map(|p| (0..c).map(|k| img.data()[k * plane + p]).sum::<f64>() / c as f64)
                    .collect(),
            )
        }
        _ => Err(Error::dim("deblur", img.shape(), &[0, 0])),
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    /// Image estimate at the best iteration, `[H+K−1, W+K−1]` (or with a
    /// leading channel axis).
    pub image: Tensor,
    pub kernel: BlurKernel,
    /// Data-fit loss before each update, plus after the last one (`T+1`).
    pub losses: Vec<f64>,
    /// PSNR against the supplied reference, aligned with `losses`.
    pub psnr: Option<Vec<f64>>,
    pub best_iteration: usize,
    pub initial_state: KernelState,
    /// Kernel variable at the best iteration.
    pub state: KernelState,
    pub dip_input: DipInput,
    /// Fine-tuned generator when its weights were optimized.
    pub generator: Option<Generator>,
    /// `(iteration, image)` pairs when snapshots were requested.
    pub snapshots: Vec<(usize, Tensor)>,
}

/// Runs blind deconvolution on `blurry` (`[H, W]`, or `[C, H, W]` sharing
/// one kernel).
pub fn deblur(
    blurry: &Tensor,
    gen: &Generator,
    encoder: Option<&Encoder>,
    dip_seed: u64,
    cfg: &SolveConfig,
) -> Result<SolveResult> {
    deblur_with_reference(blurry, gen, encoder, dip_seed, cfg, None)
}

/// [`deblur`] that also records the PSNR of every iterate against `reference`.
pub fn deblur_with_reference(
    blurry: &Tensor,
    gen: &Generator,
    encoder: Option<&Encoder>,
    dip_seed: u64,
    cfg: &SolveConfig,
    reference: Option<&Tensor>,
) -> Result<SolveResult> {
    cfg.validate()?;
    let k = gen.kernel_size();
    if let Some(expect) = cfg.kernel_size {
        if expect != k {
            return Err(Error::contract(format!(
                "generator produces {k}×{k} kernels but {expect}×{expect} was expected"
            )));
        }
    }
    if !blurry.is_finite() {
        return Err(Error::contract("blurry image has non-finite values"));
    }
    let (channels, h, w) = match *blurry.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::dim("deblur", blurry.shape(), &[0, 0])),
    };
    let (ph, pw) = (h + k - 1, w + k - 1);
    if let Some(r) = reference {
        let expect: Vec<usize> = if channels == 1 && blurry.ndim() == 2 {
            vec![ph, pw]
        } else {
            vec![channels, ph, pw]
        };
        if r.shape() != expect {
            return Err(Error::dim("deblur", r.shape(), &expect));
        }
    }

    let z0 = initial_latent(blurry, encoder, gen, cfg.init, cfg.seed, cfg.average_steps)?;
    let initial_state = match cfg.optimize {
        OptimizeTarget::FeatureW => KernelState::Feature(gen.first_layer_value(&z0)?),
        _ => KernelState::Latent(z0),
    };

    let dip_cfg = DipConfig {
        output_channels: channels,
        ..cfg.dip.clone()
    };
    let mut net = DipNet::new(dip_cfg.clone(), &mut ChaCha8Rng::seed_from_u64(dip_seed))?;
    let dip_input = sample_dip_input([dip_cfg.input_channels, ph, pw], dip_seed ^ DIP_INPUT_SEED_MIX)?;
    let noise = batch_input(&dip_input.noise)?;
    let observed = blurry.clone().reshape(&[channels, 1, h, w])?;

    let mut generator = gen.clone();
    let tune_gen = cfg.optimize == OptimizeTarget::LatentZAndGenerator;
    let mut var = match &initial_state {
        KernelState::Feature(t) => {
            let s = t.shape();
            t.clone().reshape(&[1, s[0], s[1], s[2]])?
        }
        KernelState::Latent(t) => t.clone().reshape(&[1, t.numel()])?,
    };
    let (mut adam_k, mut adam_x, mut adam_g) = (AdamState::default(), AdamState::default(), AdamState::default());

    let t_max = cfg.iterations;
    let mut losses = Vec::with_capacity(t_max + 1);
    let mut psnrs = reference.map(|_| Vec::with_capacity(t_max + 1));
    let mut snapshots = Vec::new();
    let mut best: Option<(f64, usize, Tensor, Tensor, Tensor)> = None;

    for t in 0..=t_max {
        let mut tape = Tape::new();
        let xb = net.params().bind(&mut tape, true);
        let gb = generator.params().bind(&mut tape, tune_gen);
        let kv = tape.param(var.clone());
        let kern = match cfg.optimize {
            OptimizeTarget::FeatureW => generator.tail(&mut tape, &gb, kv)?,
            _ => generator.forward(&mut tape, &gb, kv)?,
        };
        let zin = tape.constant(noise.clone());
        let img = net.forward(&mut tape, &xb, zin)?;
        let loss = image_data_fit(&mut tape, kern, img, &observed, channels, k, (ph, pw))?;

        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::contract(format!("data-fit loss became non-finite at iteration {t}")));
        }
        let image = image_shape(tape.value(img).clone())?;
        let image = if blurry.ndim() == 3 && channels == 1 {
            image.reshape(&[1, ph, pw])?
        } else {
            image
        };
        losses.push(value);
        if let (Some(list), Some(r)) = (psnrs.as_mut(), reference) {
            list.push(psnr(&image, r)?);
        }
        if cfg.snapshot_every > 0 && t % cfg.snapshot_every == 0 {
            snapshots.push((t, image.clone()));
        }
        if best.as_ref().is_none_or(|b| value < b.0) {
            let kt = tape.value(kern).clone().reshape(&[k, k])?;
            best = Some((value, t, image, kt, var.clone()));
        }
        if t == t_max {
            break;
        }

        let mut grads = tape.backward(loss)?;
        let m = cfg.decay_multiplier(t);
        let gk = grads.take(kv);
        adam_k.step(std::iter::once(&mut var), &[gk], cfg.lr_kernel * m)?;
        let gx = xb.grads(&grads);
        adam_x.step(net.params_mut().tensors_mut(), &gx, cfg.lr_image * m)?;
        if tune_gen {
            let gg = gb.grads(&grads);
            adam_g.step(generator.params_mut().tensors_mut(), &gg, cfg.lr_generator * m)?;
        }
    }
    debug_assert_eq!(batch_input(&dip_input.noise)?, noise);

    let (_, best_iteration, image, kernel, best_var) = best.expect("at least one iterate");
    let state = match &initial_state {
        KernelState::Feature(t) => KernelState::Feature(best_var.reshape(t.shape())?),
        KernelState::Latent(t) => KernelState::Latent(best_var.reshape(t.shape())?),
    };
    Ok(SolveResult {
        image,
        kernel: BlurKernel::new(kernel)?,
        losses,
        psnr: psnrs,
        best_iteration,
        initial_state,
        state,
        dip_input,
        generator: tune_gen.then_some(generator),
        snapshots,
    })
}

/// `Σ (k ⊗ x − y)²` over all channels of a `[1, C, H', W']` network output.
fn image_data_fit(
    tape: &mut Tape,
    kern: Var,
    img: Var,
    observed: &Tensor,
    channels: usize,
    k: usize,
    (ph, pw): (usize, usize),
) -> Result<Var> {
    if channels == 1 {
        let kk = tape.reshape(kern, &[k, k])?;
        let x = tape.reshape(img, &[ph, pw])?;
        let s = observed.shape();
        let y = tape.constant(observed.clone().reshape(&[s[2], s[3]])?);
        return data_fit_loss(tape, kk, x, y);
    }
    let kk = tape.reshape(kern, &[1, 1, k, k])?;
    let x = tape.reshape(img, &[channels, 1, ph, pw])?;
    let pred = tape.conv2d_strided(x, kk, 1, 0)?;
    let y = tape.constant(observed.clone());
    let r = tape.sub(pred, y)?;
    let sq = tape.square(r);
    Ok(tape.sum(sq))
}

/// PSNR of each saved image estimate against `reference`.
pub fn solve_trace_psnr(snapshots: &[(usize, Tensor)], reference: &Tensor) -> Result<Vec<f64>> {
    snapshots.iter().map(|(_, img)| psnr(img, reference)).collect()
}

#[cfg(test)]
mod tests;
