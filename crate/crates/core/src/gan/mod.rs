//! Kernel generator `G_k = G_k^(w) ∘ g₁` with a softmax output head, its
//! discriminator, and adversarial training on synthesized kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Tape, Var};
use crate::blur::BlurKernel;
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, kaiming_uniform, Bound, NamedTensorSet};
use crate::tensor::Tensor;

const GENERATOR_META: &str = "meta.generator";
const DISCRIMINATOR_META: &str = "meta.discriminator";
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    /// Odd side `K` of the produced kernels.
    pub kernel_size: usize,
    pub latent_dim: usize,
    /// Channels of the first feature map `w`.
    pub base_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kernel_size: 15,
            latent_dim: 32,
            base_channels: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 3 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::contract(format!(
                "generator kernel size must be odd and ≥ 3, got {}",
                self.kernel_size
            )));
        }
        if self.latent_dim == 0 || self.base_channels < 4 {
            return Err(Error::contract("generator latent dim and width must be positive"));
        }
        Ok(())
    }

    /// Side of the first feature map, `⌈K/4⌉`.
    pub fn feature_side(&self) -> usize {
        self.kernel_size.div_ceil(4)
    }

    /// Shape `[c₀, s₀, s₀]` of a single feature map `w`.
    pub fn feature_shape(&self) -> [usize; 3] {
        let s = self.feature_side();
        [self.base_channels, s, s]
    }

    fn widths(&self) -> [usize; 3] {
        let c = self.base_channels;
        [c, c / 2, c / 4]
    }

    /// Padding of the last transposed convolution (kernel 2, stride 1) that
    /// lands the `4·s₀` map exactly on `K`.
    fn head_padding(&self) -> usize {
        (4 * self.feature_side() + 1 - self.kernel_size) / 2
    }
}

/// DCGAN-style kernel generator.
///
/// `z → dense → ReLU → [c₀, s₀, s₀]` is the first layer `g₁`; the tail is two
/// stride-2 transposed convolutions with ReLU and a final transposed
/// convolution to `K×K` logits, normalized by a softmax over all `K²` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    params: NamedTensorSet,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let [c0, c1, c2] = config.widths();
        let s = config.feature_side();
        let feat = c0 * s * s;
        let mut p = NamedTensorSet::new();
        p.insert("g1.weight", kaiming_uniform(&[config.latent_dim, feat], config.latent_dim, rng))?;
        p.insert("g1.bias", Tensor::zeros(&[feat]))?;
        p.insert("up1.weight", kaiming_uniform(&[c0, c1, 4, 4], c0 * 4, rng))?;
        p.insert("up1.bias", Tensor::zeros(&[c1]))?;
        p.insert("up2.weight", kaiming_uniform(&[c1, c2, 4, 4], c1 * 4, rng))?;
        p.insert("up2.bias", Tensor::zeros(&[c2]))?;
        p.insert("head.weight", fan_in_uniform(&[c2, 1, 2, 2], c2 * 4, rng))?;
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &NamedTensorSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NamedTensorSet {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn kernel_size(&self) -> usize {
        self.config.kernel_size
    }

    /// `g₁`: `[n, d_z] → [n, c₀, s₀, s₀]`, up to and including its ReLU.
    pub fn first_layer(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let s = tape.shape(z);
        if s.len() != 2 || s[1] != self.config.latent_dim {
            return Err(Error::dim("generator_first_layer", s, &[self.config.latent_dim]));
        }
        let n = s[0];
        let h = tape.matmul(z, bound.var("g1.weight"))?;
        let h = tape.add_bias(h, bound.var("g1.bias"))?;
        let h = tape.relu(h);
        let [c, a, b] = self.config.feature_shape();
        tape.reshape(h, &[n, c, a, b])
    }

    /// `G_k^(w)`: `[n, c₀, s₀, s₀] → [n, 1, K, K]`, each item on the simplex.
    pub fn tail(&self, tape: &mut Tape, bound: &Bound, w: Var) -> Result<Var> {
        let logits = self.logits(tape, bound, w)?;
        tape.softmax_items(logits)
    }

    /// Tail without the softmax head.
    pub fn logits(&self, tape: &mut Tape, bound: &Bound, w: Var) -> Result<Var> {
        let s = tape.shape(w);
        if s.len() != 4 || s[1..] != self.config.feature_shape() {
            return Err(Error::dim("generator_tail", s, &self.config.feature_shape()));
        }
        let h = tape.conv_transpose2d(w, bound.var("up1.weight"), 2, 1)?;
        let h = tape.add_bias(h, bound.var("up1.bias"))?;
        let h = tape.relu(h);
        let h = tape.conv_transpose2d(h, bound.var("up2.weight"), 2, 1)?;
        let h = tape.add_bias(h, bound.var("up2.bias"))?;
        let h = tape.relu(h);
        tape.conv_transpose2d(h, bound.var("head.weight"), 1, self.config.head_padding())
    }

    /// Full generator on a batch of latents `[n, d_z]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let w = self.first_layer(tape, bound, z)?;
        self.tail(tape, bound, w)
    }

    /// `g₁(z)` for one latent `[d_z]`, returned as `[c₀, s₀, s₀]`.
    pub fn first_layer_value(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let zv = tape.constant(as_batch(z, self.config.latent_dim, "generator_first_layer")?);
        let w = self.first_layer(&mut tape, &bound, zv)?;
        tape.value(w).clone().reshape(&self.config.feature_shape())
    }

    /// `G_k^(w)(w)` for one feature map `[c₀, s₀, s₀]`.
    pub fn tail_value(&self, w: &Tensor) -> Result<BlurKernel> {
        let fs = self.config.feature_shape();
        if w.shape() != fs {
            return Err(Error::dim("generator_tail", w.shape(), &fs));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let wv = tape.constant(w.clone().reshape(&[1, fs[0], fs[1], fs[2]])?);
        let k = self.tail(&mut tape, &bound, wv)?;
        self.kernels_from(tape.value(k)).map(|mut v| v.remove(0))
    }

    /// `G_k(z)` for one latent `[d_z]`.
    pub fn generate(&self, z: &Tensor) -> Result<BlurKernel> {
        self.generate_batch(&as_batch(z, self.config.latent_dim, "generator_forward")?)
            .map(|mut v| v.remove(0))
    }

    /// `G_k` on a latent batch `[n, d_z]`.
    pub fn generate_batch(&self, z: &Tensor) -> Result<Vec<BlurKernel>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let k = self.forward(&mut tape, &bound, zv)?;
        self.kernels_from(tape.value(k))
    }

    /// Kernels from `n` standard-normal latents.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<BlurKernel>> {
        self.generate_batch(&Tensor::randn(&[n, self.config.latent_dim], 1.0, rng))
    }

    /// Splits a `[n, 1, K, K]` output into kernels.
    pub fn kernels_from(&self, batch: &Tensor) -> Result<Vec<BlurKernel>> {
        let k = self.config.kernel_size;
        let n = batch.numel() / (k * k);
        (0..n)
            .map(|i| {
                let data = batch.data()[i * k * k..(i + 1) * k * k].to_vec();
                BlurKernel::new(Tensor::new(vec![k, k], data)?)
            })
            .collect()
    }

    /// Parameters plus a `meta.generator` entry `[K, d_z, c₀]`.
    pub fn to_checkpoint(&self) -> NamedTensorSet {
        let c = &self.config;
        let mut set = self.params.clone();
        let meta = [c.kernel_size, c.latent_dim, c.base_channels].map(|v| v as f64);
        set.insert(GENERATOR_META, Tensor::new(vec![3], meta.to_vec()).expect("3 entries"))
            .expect("meta name is reserved");
        set
    }

    pub fn from_checkpoint(set: &NamedTensorSet) -> Result<Self> {
        let meta = read_meta(set, GENERATOR_META, 3)?;
        let config = GeneratorConfig {
            kernel_size: meta[0],
            latent_dim: meta[1],
            base_channels: meta[2],
        };
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let template = Self::new(config, &mut rng)?;
        let params = copy_params(&template.params, set)?;
        Ok(Self { config, params })
    }
}

/// Strided-convolution discriminator: `K×K` kernel → one logit.
///
/// Kernels are multiplied by `K` on the way in so typical entries are O(1).
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    kernel_size: usize,
    params: NamedTensorSet,
}

const DISC_WIDTHS: [usize; 2] = [32, 64];

fn disc_side(k: usize) -> usize {
    let s1 = (k + 2 - 4) / 2 + 1;
    (s1 + 2 - 4) / 2 + 1
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(kernel_size: usize, rng: &mut R) -> Result<Self> {
        if kernel_size < 5 {
            return Err(Error::contract(format!("discriminator needs K ≥ 5, got {kernel_size}")));
        }
        let [d1, d2] = DISC_WIDTHS;
        let s = disc_side(kernel_size);
        let mut p = NamedTensorSet::new();
        p.insert("c1.weight", kaiming_uniform(&[d1, 1, 4, 4], 16, rng))?;
        p.insert("c1.bias", Tensor::zeros(&[d1]))?;
        p.insert("c2.weight", kaiming_uniform(&[d2, d1, 4, 4], d1 * 16, rng))?;
        p.insert("c2.bias", Tensor::zeros(&[d2]))?;
        p.insert("fc.weight", fan_in_uniform(&[d2 * s * s, 1], d2 * s * s, rng))?;
        p.insert("fc.bias", Tensor::zeros(&[1]))?;
        Ok(Self { kernel_size, params: p })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn params(&self) -> &NamedTensorSet {
        &self.params
    }

    /// `[n, 1, K, K] → [n, 1]` logits.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, k: Var) -> Result<Var> {
        let ks = self.kernel_size;
        let s = tape.shape(k);
        if s.len() != 4 || s[1..] != [1, ks, ks] {
            return Err(Error::dim("discriminator_forward", s, &[1, ks, ks]));
        }
        let n = s[0];
        let x = tape.scale(k, ks as f64);
        let h = tape.conv2d_strided(x, bound.var("c1.weight"), 2, 1)?;
        let h = tape.add_bias(h, bound.var("c1.bias"))?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = tape.conv2d_strided(h, bound.var("c2.weight"), 2, 1)?;
        let h = tape.add_bias(h, bound.var("c2.bias"))?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let flat = tape.value(h).numel() / n;
        let h = tape.reshape(h, &[n, flat])?;
        let h = tape.matmul(h, bound.var("fc.weight"))?;
        tape.add_bias(h, bound.var("fc.bias"))
    }

    /// Logit for a single kernel.
    pub fn score(&self, kernel: &BlurKernel) -> Result<f64> {
        let ks = self.kernel_size;
        if kernel.size() != ks {
            return Err(Error::dim("discriminator_forward", &[kernel.size()], &[ks]));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(kernel.tensor().clone().reshape(&[1, 1, ks, ks])?);
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).item())
    }

    pub fn to_checkpoint(&self) -> NamedTensorSet {
        let mut set = self.params.clone();
        set.insert(DISCRIMINATOR_META, Tensor::scalar(self.kernel_size as f64))
            .expect("meta name is reserved");
        set
    }

    pub fn from_checkpoint(set: &NamedTensorSet) -> Result<Self> {
        let k = read_meta(set, DISCRIMINATOR_META, 1)?[0];
        let template = Self::new(k, &mut ChaCha8Rng::seed_from_u64(0))?;
        let params = copy_params(&template.params, set)?;
        Ok(Self { kernel_size: k, params })
    }
}

fn as_batch(z: &Tensor, dim: usize, op: &'static str) -> Result<Tensor> {
    if z.shape() != [dim] {
        return Err(Error::dim(op, z.shape(), &[dim]));
    }
    z.clone().reshape(&[1, dim])
}

pub(crate) fn read_meta(set: &NamedTensorSet, name: &str, len: usize) -> Result<Vec<usize>> {
    let t = set
        .get(name)
        .ok_or_else(|| Error::contract(format!("checkpoint lacks {name:?}")))?;
    if t.numel() != len || t.data().iter().any(|v| !(*v >= 1.0) || v.fract() != 0.0) {
        return Err(Error::contract(format!("malformed {name:?} entry")));
    }
    Ok(t.data().iter().map(|&v| v as usize).collect())
}

/// Copies every tensor named in `template` out of `source`, checking shapes.
pub(crate) fn copy_params(template: &NamedTensorSet, source: &NamedTensorSet) -> Result<NamedTensorSet> {
    let mut out = NamedTensorSet::new();
    for (name, t) in template.iter() {
        out.insert(name, source.expect(name, t.shape())?.clone())?;
    }
    Ok(out)
}

/// Settings of adversarial training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Adam first-moment decay shared by both players.
    pub beta1: f64,
    pub seed: u64,
    /// Keep a sample batch every this many iterations (0 disables).
    pub sample_every: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch_size: 64,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            seed: 0,
            sample_every: 1000,
        }
    }
}

/// Losses and snapshots collected during training.
#[derive(Clone, Debug, Default)]
pub struct GanTrace {
    pub d_loss: Vec<f64>,
    pub g_loss: Vec<f64>,
    /// `(iteration, samples)` pairs.
    pub samples: Vec<(usize, Vec<BlurKernel>)>,
}

/// Alternating discriminator/generator updates with the non-saturating
/// binary cross-entropy objective.
pub struct GanTrainer<'a> {
    dataset: &'a [BlurKernel],
    pub generator: Generator,
    pub discriminator: Discriminator,
    cfg: GanTrainConfig,
    adam_g: AdamState,
    adam_d: AdamState,
    rng: ChaCha8Rng,
    iteration: usize,
    pub trace: GanTrace,
}

impl<'a> GanTrainer<'a> {
    /// Fresh networks seeded from `cfg.seed`.
    pub fn new(dataset: &'a [BlurKernel], gen_config: GeneratorConfig, cfg: GanTrainConfig) -> Result<Self> {
        let first = dataset
            .first()
            .ok_or_else(|| Error::contract("GAN training needs a non-empty dataset"))?;
        let k = first.size();
        if let Some(bad) = dataset.iter().find(|d| d.size() != k) {
            return Err(Error::contract(format!(
                "mixed kernel sizes in dataset: {k} and {}",
                bad.size()
            )));
        }
        if gen_config.kernel_size != k {
            return Err(Error::contract(format!(
                "generator kernel size {} does not match dataset size {k}",
                gen_config.kernel_size
            )));
        }
        if cfg.batch_size == 0 || !(cfg.lr_g > 0.0) || !(cfg.lr_d > 0.0) {
            return Err(Error::contract("GAN batch size and learning rates must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = Generator::new(gen_config, &mut rng)?;
        let discriminator = Discriminator::new(k, &mut rng)?;
        Ok(Self {
            dataset,
            generator,
            discriminator,
            cfg,
            adam_g: AdamState::with_betas(cfg.beta1, 0.999),
            adam_d: AdamState::with_betas(cfg.beta1, 0.999),
            rng,
            iteration: 0,
            trace: GanTrace::default(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn real_batch(&mut self) -> Result<Tensor> {
        let k = self.generator.kernel_size();
        let n = self.cfg.batch_size;
        let mut data = Vec::with_capacity(n * k * k);
        for _ in 0..n {
            let i = self.rng.random_range(0..self.dataset.len());
            data.extend_from_slice(self.dataset[i].tensor().data());
        }
        Tensor::new(vec![n, 1, k, k], data)
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self) -> Result<(f64, f64)> {
        let n = self.cfg.batch_size;
        let dz = self.generator.latent_dim();

        // discriminator: softplus(-D(real)) + softplus(D(fake))
        let real = self.real_batch()?;
        let fake = {
            let z = Tensor::randn(&[n, dz], 1.0, &mut self.rng);
            let mut tape = Tape::new();
            let gb = self.generator.params.bind(&mut tape, false);
            let zv = tape.constant(z);
            let k = self.generator.forward(&mut tape, &gb, zv)?;
            tape.value(k).clone()
        };
        let mut tape = Tape::new();
        let db = self.discriminator.params.bind(&mut tape, true);
        let rv = tape.constant(real);
        let fv = tape.constant(fake);
        let real_logit = self.discriminator.forward(&mut tape, &db, rv)?;
        let fake_logit = self.discriminator.forward(&mut tape, &db, fv)?;
        let neg = tape.scale(real_logit, -1.0);
        let lr = tape.softplus(neg);
        let lr = tape.mean(lr);
        let lf = tape.softplus(fake_logit);
        let lf = tape.mean(lf);
        let d_loss = tape.add(lr, lf)?;
        let grads = db.grads(&tape.backward(d_loss)?);
        let d_value = tape.value(d_loss).item();
        self.adam_d
            .step(self.discriminator.params.tensors_mut(), &grads, self.cfg.lr_d)?;

        // generator: softplus(-D(G(z)))
        let z = Tensor::randn(&[n, dz], 1.0, &mut self.rng);
        let mut tape = Tape::new();
        let gb = self.generator.params.bind(&mut tape, true);
        let db = self.discriminator.params.bind(&mut tape, false);
        let zv = tape.constant(z);
        let k = self.generator.forward(&mut tape, &gb, zv)?;
        let logit = self.discriminator.forward(&mut tape, &db, k)?;
        let neg = tape.scale(logit, -1.0);
        let g_loss = tape.softplus(neg);
        let g_loss = tape.mean(g_loss);
        let grads = gb.grads(&tape.backward(g_loss)?);
        let g_value = tape.value(g_loss).item();
        self.adam_g
            .step(self.generator.params.tensors_mut(), &grads, self.cfg.lr_g)?;

        if !self.generator.params.is_finite() || !self.discriminator.params.is_finite() {
            return Err(Error::contract(format!(
                "non-finite parameters after GAN iteration {}",
                self.iteration
            )));
        }
        self.iteration += 1;
        self.trace.d_loss.push(d_value);
        self.trace.g_loss.push(g_value);
        if self.cfg.sample_every > 0 && self.iteration.is_multiple_of(self.cfg.sample_every) {
            let mut srng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5a5a_5a5a);
            let samples = self.generator.sample(16, &mut srng)?;
            self.trace.samples.push((self.iteration, samples));
        }
        Ok((d_value, g_value))
    }
}

/// Output of [`train_gan`].
pub struct GanRun {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub trace: GanTrace,
}

/// Trains a generator/discriminator pair on `dataset` for `cfg.iterations`.
pub fn train_gan(dataset: &[BlurKernel], gen_config: GeneratorConfig, cfg: &GanTrainConfig) -> Result<GanRun> {
    let mut trainer = GanTrainer::new(dataset, gen_config, *cfg)?;
    for _ in 0..cfg.iterations {
        trainer.step()?;
    }
    Ok(GanRun {
        generator: trainer.generator,
        discriminator: trainer.discriminator,
        trace: trainer.trace,
    })
}

/// Tiles kernels into a grayscale grid image, each scaled to peak 1.
pub fn kernel_grid(kernels: &[BlurKernel], columns: usize) -> Result<Tensor> {
    let first = kernels
        .first()
        .ok_or_else(|| Error::contract("kernel grid needs at least one kernel"))?;
    let k = first.size();
    let cols = columns.clamp(1, kernels.len());
    let rows = kernels.len().div_ceil(cols);
    let cell = k + 1;
    let (h, w) = (rows * cell + 1, cols * cell + 1);
    let mut grid = Tensor::zeros(&[h, w]);
    for (i, kern) in kernels.iter().enumerate() {
        let peak = kern.tensor().data().iter().copied().fold(0.0, f64::max).max(1e-12);
        let (r0, c0) = ((i / cols) * cell + 1, (i % cols) * cell + 1);
        for a in 0..k {
            for b in 0..k {
                grid.set(&[r0 + a, c0 + b], kern.tensor().at(&[a, b]) / peak);
            }
        }
    }
    Ok(grid)
}
