//! Kernel initializer: a residual CNN mapping a blurry image to a latent
//! code of the kernel generator, trained against latent targets produced by
//! inversion warm-started from its own predictions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Tape, Var};
use crate::blur::{blur, BlurConfig, BlurKernel};
use crate::error::{Error, Result};
use crate::gan::{copy_params, read_meta, Generator};
use crate::inversion::{invert_batch, InversionConfig};
use crate::layers::{add_conv, conv};
use crate::params::{fan_in_uniform, Bound, NamedTensorSet};
use crate::tensor::Tensor;

const ENCODER_META: &str = "meta.encoder";
/// Smallest accepted input side.
pub const MIN_INPUT: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub latent_dim: usize,
    /// Channel width of each stride-2 stage.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            widths: vec![16, 32, 64, 64],
            blocks_per_stage: 2,
        }
    }
}

impl EncoderConfig {
    pub fn with_latent_dim(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.widths.is_empty() || self.widths.contains(&0) || self.blocks_per_stage == 0 {
            return Err(Error::contract("encoder widths, depth and latent dim must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: NamedTensorSet,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = NamedTensorSet::new();
        let mut cin = 1;
        for (s, &c) in config.widths.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let pre = format!("stage{s}.block{b}");
                let bin = if b == 0 { cin } else { c };
                add_conv(&mut p, &format!("{pre}.conv1"), bin, c, 3, true, rng)?;
                add_conv(&mut p, &format!("{pre}.conv2"), c, c, 3, true, rng)?;
                if b == 0 {
                    add_conv(&mut p, &format!("{pre}.proj"), cin, c, 1, true, rng)?;
                }
            }
            cin = c;
        }
        p.insert("head.weight", fan_in_uniform(&[cin, config.latent_dim], cin, rng))?;
        p.insert("head.bias", Tensor::zeros(&[config.latent_dim]))?;
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn params(&self) -> &NamedTensorSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NamedTensorSet {
        &mut self.params
    }

    /// `[n, 1, H, W] → [n, d_z]`.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != 1 || s[2] < MIN_INPUT || s[3] < MIN_INPUT {
            return Err(Error::dim("encoder_forward", s, &[1, 1, MIN_INPUT, MIN_INPUT]));
        }
        let mut h = x;
        for s in 0..self.config.widths.len() {
            for blk in 0..self.config.blocks_per_stage {
                let pre = format!("stage{s}.block{blk}");
                let stride = if blk == 0 { 2 } else { 1 };
                let r = conv(tape, b, &format!("{pre}.conv1"), h, stride, true)?;
                let r = tape.relu(r);
                let r = conv(tape, b, &format!("{pre}.conv2"), r, 1, true)?;
                let short = if blk == 0 {
                    conv(tape, b, &format!("{pre}.proj"), h, 2, true)?
                } else {
                    h
                };
                let sum = tape.add(r, short)?;
                h = tape.relu(sum);
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        let out = tape.matmul(pooled, b.var("head.weight"))?;
        tape.add_bias(out, b.var("head.bias"))
    }

    /// Latent code for one `[H, W]` image.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let z = self.encode_batch(std::slice::from_ref(image))?;
        z.reshape(&[self.config.latent_dim])
    }

    /// Latent codes `[n, d_z]` for equally sized `[H, W]` images.
    pub fn encode_batch(&self, images: &[Tensor]) -> Result<Tensor> {
        let x = stack_images(images)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let z = self.forward(&mut tape, &b, xv)?;
        Ok(tape.value(z).clone())
    }

    /// Parameters plus `meta.encoder` = `[d_z, blocks, widths...]`.
    pub fn to_checkpoint(&self) -> NamedTensorSet {
        let c = &self.config;
        let mut meta = vec![c.latent_dim as f64, c.blocks_per_stage as f64];
        meta.extend(c.widths.iter().map(|&w| w as f64));
        let mut set = self.params.clone();
        let n = meta.len();
        set.insert(ENCODER_META, Tensor::new(vec![n], meta).expect("sized"))
            .expect("meta name is reserved");
        set
    }

    pub fn from_checkpoint(set: &NamedTensorSet) -> Result<Self> {
        let len = set
            .get(ENCODER_META)
            .map(|t| t.numel())
            .ok_or_else(|| Error::contract(format!("checkpoint lacks {ENCODER_META:?}")))?;
        let meta = read_meta(set, ENCODER_META, len.max(3))?;
        let config = EncoderConfig {
            latent_dim: meta[0],
            blocks_per_stage: meta[1],
            widths: meta[2..].to_vec(),
        };
        let template = Self::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let params = copy_params(&template.params, set)?;
        Ok(Self { config, params })
    }
}

fn stack_images(images: &[Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::contract("encoder needs at least one image"))?;
    let s = first.shape().to_vec();
    if s.len() != 2 {
        return Err(Error::dim("encoder_forward", &s, &[MIN_INPUT, MIN_INPUT]));
    }
    let t = Tensor::stack(images)?;
    t.reshape(&[images.len(), 1, s[0], s[1]])
}

/// A blurry crop and the kernel that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub blurry: Tensor,
    pub kernel: BlurKernel,
}

/// `count` pairs: each picks an image, a crop of side `crop + K − 1` and a
/// kernel, then blurs so the observation is `crop × crop`.
pub fn make_training_pairs(
    images: &[Tensor],
    kernels: &[BlurKernel],
    count: usize,
    crop: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    if images.is_empty() || kernels.is_empty() {
        return Err(Error::contract("training pairs need images and kernels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let img = &images[rng.random_range(0..images.len())];
            let kernel = kernels[rng.random_range(0..kernels.len())].clone();
            let side = crop + kernel.size() - 1;
            let (h, w) = match *img.shape() {
                [h, w] if h >= side && w >= side => (h, w),
                _ => return Err(Error::dim("make_training_pairs", img.shape(), &[side, side])),
            };
            let (y0, x0) = (rng.random_range(0..=h - side), rng.random_range(0..=w - side));
            let patch = Tensor::from_fn(&[side, side], |p| img.at(&[y0 + p / side, x0 + p % side]));
            let cfg = BlurConfig {
                noise_sigma: sigma,
                seed: rng.random(),
            };
            Ok(TrainingPair {
                blurry: blur(&patch, &kernel, &cfg)?,
                kernel,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitTrainConfig {
    /// Outer iterations `T`.
    pub iterations: usize,
    /// Inversion steps per target `S`.
    pub inner_steps: usize,
    /// Encoder updates per outer iteration `L`.
    pub encoder_steps: usize,
    /// Weight of the latent-space term.
    pub lambda: f64,
    /// Learning rates, advanced when the loss plateaus.
    pub lr_schedule: Vec<f64>,
    /// Window length for plateau detection.
    pub plateau_window: usize,
    /// Relative improvement between consecutive windows below which the
    /// next learning rate is used.
    pub plateau_tol: f64,
    pub batch_size: usize,
    pub inversion_lr: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
}

impl Default for InitTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            inner_steps: 20,
            encoder_steps: 1,
            lambda: 0.1,
            lr_schedule: vec![1e-4, 1e-5, 1e-6],
            plateau_window: 200,
            plateau_tol: 0.01,
            batch_size: 16,
            inversion_lr: 1e-2,
            seed: 0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl InitTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::contract(
                "inner inversion steps must be ≥ 1: with none the targets equal the encoder output and the loss is identically zero",
            ));
        }
        if !(self.lambda >= 0.0) || self.batch_size == 0 || self.plateau_window == 0 {
            return Err(Error::contract("lambda ≥ 0, batch size and plateau window ≥ 1 required"));
        }
        if self.lr_schedule.is_empty() || self.lr_schedule.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::contract("learning-rate schedule must be non-empty and positive"));
        }
        Ok(())
    }
}

/// `Σₙ ‖G(E(yₙ)) − G(zₙ)‖₁ + λ‖E(yₙ) − zₙ‖²` with the targets detached.
#[allow(clippy::too_many_arguments)]
pub fn initializer_loss(
    tape: &mut Tape,
    encoder: &Encoder,
    enc_bound: &Bound,
    gen: &Generator,
    gen_bound: &Bound,
    blurry: Var,
    targets: Var,
    lambda: f64,
) -> Result<Var> {
    let targets = tape.detach(targets);
    let e = encoder.forward(tape, enc_bound, blurry)?;
    let ke = gen.forward(tape, gen_bound, e)?;
    let kt = gen.forward(tape, gen_bound, targets)?;
    let kt = tape.detach(kt);
    let d = tape.sub(ke, kt)?;
    let d = tape.abs(d);
    let l1 = tape.sum(d);
    let dz = tape.sub(e, targets)?;
    let dz = tape.square(dz);
    let l2 = tape.sum(dz);
    let l2 = tape.scale(l2, lambda);
    tape.add(l1, l2)
}

/// Encoder and per-iteration loss (after the encoder steps of that
/// iteration's first update) of an initializer training run.
#[derive(Debug, PartialEq)]
pub struct InitRun {
    pub encoder: Encoder,
    pub losses: Vec<f64>,
    /// Learning rate used at each iteration.
    pub learning_rates: Vec<f64>,
}

/// Trains a fresh encoder against the frozen generator.
pub fn train_initializer(pairs: &[TrainingPair], gen: &Generator, cfg: &InitTrainConfig) -> Result<InitRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = Encoder::new(cfg.encoder.clone(), &mut rng)?;
    continue_initializer(encoder, pairs, gen, cfg, &mut rng)
}

/// Trains `encoder` further; `rng` drives batch sampling.
pub fn continue_initializer<R: Rng>(
    mut encoder: Encoder,
    pairs: &[TrainingPair],
    gen: &Generator,
    cfg: &InitTrainConfig,
    rng: &mut R,
) -> Result<InitRun> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::contract("initializer training needs at least one pair"));
    }
    if encoder.latent_dim() != gen.latent_dim() {
        return Err(Error::contract(format!(
            "encoder latent dim {} does not match generator latent dim {}",
            encoder.latent_dim(),
            gen.latent_dim()
        )));
    }
    if let Some(p) = pairs.iter().find(|p| p.kernel.size() != gen.kernel_size()) {
        return Err(Error::contract(format!(
            "pair kernel size {} does not match generator size {}",
            p.kernel.size(),
            gen.kernel_size()
        )));
    }
    let inv_cfg = InversionConfig {
        steps: cfg.inner_steps,
        lr: cfg.inversion_lr,
        stop_tol: 0.0,
    };
    let mut adam = AdamState::default();
    let mut stage = 0;
    let (mut losses, mut rates) = (Vec::with_capacity(cfg.iterations), Vec::with_capacity(cfg.iterations));
    let mut previous_window: Option<f64> = None;

    for t in 0..cfg.iterations {
        let batch: Vec<&TrainingPair> = (0..cfg.batch_size)
            .map(|_| &pairs[rng.random_range(0..pairs.len())])
            .collect();
        let images: Vec<Tensor> = batch.iter().map(|p| p.blurry.clone()).collect();
        let kernels: Vec<BlurKernel> = batch.iter().map(|p| p.kernel.clone()).collect();
        let start = encoder.encode_batch(&images)?;
        let mut targets = Tensor::zeros(start.shape());
        let dz = encoder.latent_dim();
        for (i, inv) in invert_batch(&kernels, gen, &start, &inv_cfg)?.into_iter().enumerate() {
            targets.data_mut()[i * dz..(i + 1) * dz].copy_from_slice(inv.latent.data());
        }
        let x = stack_images(&images)?;
        let lr = cfg.lr_schedule[stage];
        let mut first = None;
        // with no encoder steps the loss is still evaluated once for the trace
        for step in 0..cfg.encoder_steps.max(1) {
            let mut tape = Tape::new();
            let eb = encoder.params.bind(&mut tape, true);
            let gb = gen.params().bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let zv = tape.constant(targets.clone());
            let loss = initializer_loss(&mut tape, &encoder, &eb, gen, &gb, xv, zv, cfg.lambda)?;
            first.get_or_insert(tape.value(loss).item());
            if step < cfg.encoder_steps {
                let grads = eb.grads(&tape.backward(loss)?);
                adam.step(encoder.params.tensors_mut(), &grads, lr)?;
            }
        }
        if !encoder.params.is_finite() {
            return Err(Error::contract(format!("encoder diverged at iteration {t}")));
        }
        let loss = first.expect("at least one evaluation");
        losses.push(loss);
        rates.push(lr);

        if (t + 1) % cfg.plateau_window == 0 && cfg.encoder_steps > 0 {
            let window = &losses[losses.len() - cfg.plateau_window..];
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            if let Some(prev) = previous_window {
                if prev - mean < cfg.plateau_tol * prev && stage + 1 < cfg.lr_schedule.len() {
                    stage += 1;
                }
            }
            previous_window = Some(mean);
        }
    }
    Ok(InitRun {
        encoder,
        losses,
        learning_rates: rates,
    })
}
