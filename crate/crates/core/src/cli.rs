//! Command-line front end: argument parsing, config resolution, run
//! manifests and the subcommands themselves.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blur::{blur, BlurConfig, BlurKernel};
use crate::dip::DipConfig;
use crate::error::Error;
use crate::gan::{kernel_grid, GanTrainConfig, GanTrainer, Generator, GeneratorConfig};
use crate::initializer::{make_training_pairs, train_initializer, Encoder, EncoderConfig, InitTrainConfig};
use crate::inversion::{invert_kernel, InversionConfig};
use crate::io::{self, RunConfig};
use crate::metrics::MetricReport;
use crate::params::NamedTensorSet;
use crate::scenes::scene_dataset;
use crate::solver::{deblur_with_reference, InitStrategy, OptimizeTarget, SolveConfig};
use crate::synth::{generate_dataset, TrajectoryParams};
use crate::tensor::Tensor;

/// Environment variable supplying the seed when `--seed` is absent.
pub const SEED_ENV: &str = "GKPILE_SEED";
pub const KERNELS_FILE: &str = "kernels.gkc";

const KEYS: &[(&str, &[&str])] = &[
    ("synth", &["count", "size", "seed", "out"]),
    ("images", &["count", "size", "seed", "out"]),
    ("blur", &["image", "kernels", "index", "sigma", "seed", "out", "kernel_out"]),
    (
        "gan",
        &[
            "kernels", "out", "iterations", "batch_size", "lr_g", "lr_d", "beta1", "latent_dim", "width",
            "seed", "sample_every", "samples", "trace", "discriminator_out",
        ],
    ),
    (
        "init",
        &[
            "generator", "kernels", "images", "pairs", "crop", "sigma", "iterations", "inner_steps",
            "encoder_steps", "lambda", "lr", "plateau_window", "batch_size", "seed", "out", "trace",
        ],
    ),
    ("invert", &["generator", "target", "steps", "lr", "stop_tol", "seed", "init", "out", "kernel_out"]),
    (
        "solve",
        &[
            "blurry", "generator", "encoder", "iterations", "lr_kernel", "lr_image", "lr_generator",
            "optimize", "init", "seed", "dip_seed", "kernel_size", "dip_divisor", "out", "kernel_out",
            "kernel_image", "trace", "reference",
        ],
    ),
    ("eval", &["pred", "ref", "kernel", "ref_kernel", "seed"]),
];

/// Every key accepted in a config file.
pub fn known_keys() -> Vec<String> {
    KEYS.iter()
        .flat_map(|(ns, keys)| keys.iter().map(move |k| format!("{ns}.{k}")))
        .collect()
}

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: exit code 2.
    Usage(String),
    /// Contract, format or i/o failure: exit code 1.
    Failure(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Failure(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "gkpile", version, about = "Blind deconvolution with a learned kernel prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// key=value settings file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run manifest path (default: next to the main output)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Seed (default: $GKPILE_SEED, else 0)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize camera-shake kernels into <out>/kernels.gkc
    SynthKernels(SynthArgs),
    /// Render procedural grayscale scenes as PGM files
    SynthImages(ImagesArgs),
    /// Blur an image with one kernel of a kernel file
    Blur(BlurArgs),
    /// Train the kernel generator adversarially
    TrainGan(GanArgs),
    /// Train the kernel initializer against a frozen generator
    TrainInit(InitArgs),
    /// Find the latent code of a target kernel
    Invert(InvertArgs),
    /// Blindly deblur an image
    Deblur(DeblurArgs),
    /// Compare an estimate with a reference
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of kernels
    #[arg(long)]
    count: Option<usize>,
    /// Odd kernel side
    #[arg(long)]
    size: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ImagesArgs {
    #[command(flatten)]
    common: Common,
    /// Number of images
    #[arg(long)]
    count: Option<usize>,
    /// Side of the square images
    #[arg(long)]
    size: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BlurArgs {
    #[command(flatten)]
    common: Common,
    /// Sharp PGM/PPM image
    #[arg(long)]
    image: Option<PathBuf>,
    /// Kernel file (kernels.gkc, its directory, or a single-tensor file)
    #[arg(long)]
    kernels: Option<PathBuf>,
    /// Kernel index within the file
    #[arg(long)]
    index: Option<usize>,
    /// Noise standard deviation
    #[arg(long)]
    sigma: Option<f64>,
    /// Blurry image output
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the kernel used as a single-tensor file
    #[arg(long)]
    kernel_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GanArgs {
    #[command(flatten)]
    common: Common,
    /// Training kernels (kernels.gkc or its directory)
    #[arg(long)]
    kernels: Option<PathBuf>,
    /// Generator checkpoint
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training iterations
    #[arg(long)]
    iterations: Option<usize>,
    /// Kernels per batch
    #[arg(long)]
    batch_size: Option<usize>,
    /// Generator learning rate
    #[arg(long)]
    lr_g: Option<f64>,
    /// Discriminator learning rate
    #[arg(long)]
    lr_d: Option<f64>,
    /// Adam first-moment decay for both networks
    #[arg(long)]
    beta1: Option<f64>,
    /// Latent code length
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Channels of the first feature map
    #[arg(long)]
    width: Option<usize>,
    /// Save a sample grid every N iterations (0: never)
    #[arg(long)]
    sample_every: Option<usize>,
    /// Directory for sample grids
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Per-iteration loss file
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Discriminator checkpoint
    #[arg(long)]
    discriminator_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[command(flatten)]
    common: Common,
    /// Frozen generator checkpoint
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Kernels used to blur the training crops
    #[arg(long)]
    kernels: Option<PathBuf>,
    /// Directory of sharp PGM images
    #[arg(long)]
    images: Option<PathBuf>,
    /// Number of training pairs
    #[arg(long)]
    pairs: Option<usize>,
    /// Side of the blurry crops
    #[arg(long)]
    crop: Option<usize>,
    /// Noise standard deviation added to the blurry crops
    #[arg(long)]
    sigma: Option<f64>,
    /// Outer iterations
    #[arg(long)]
    iterations: Option<usize>,
    /// Latent inversion steps per outer iteration
    #[arg(long)]
    inner_steps: Option<usize>,
    /// Encoder updates per outer iteration
    #[arg(long)]
    encoder_steps: Option<usize>,
    /// Weight of the latent-target term
    #[arg(long)]
    lambda: Option<f64>,
    /// Initial learning rate; later stages divide it by 10 and 100
    #[arg(long)]
    lr: Option<f64>,
    /// Iterations per window of the plateau rule
    #[arg(long)]
    plateau_window: Option<usize>,
    /// Pairs per batch
    #[arg(long)]
    batch_size: Option<usize>,
    /// Encoder checkpoint
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-iteration loss file
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InvertArgs {
    #[command(flatten)]
    common: Common,
    /// Generator checkpoint
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Target kernel (single-tensor file)
    #[arg(long)]
    target: Option<PathBuf>,
    /// Maximum Adam steps
    #[arg(long)]
    steps: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Stop once the L1 loss falls below this
    #[arg(long)]
    stop_tol: Option<f64>,
    /// Starting latent (single-tensor file); random from the seed otherwise
    #[arg(long)]
    init: Option<PathBuf>,
    /// Latent code output
    #[arg(long)]
    out: Option<PathBuf>,
    /// Generated kernel of the result (single-tensor file)
    #[arg(long)]
    kernel_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DeblurArgs {
    #[command(flatten)]
    common: Common,
    /// Blurry PGM/PPM image
    #[arg(long)]
    blurry: Option<PathBuf>,
    /// Kernel generator checkpoint
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Kernel initializer checkpoint (needed by --init encoder)
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Joint optimization iterations
    #[arg(long)]
    iterations: Option<usize>,
    /// Learning rate of the kernel variable
    #[arg(long)]
    lr_kernel: Option<f64>,
    /// Learning rate of the image network
    #[arg(long)]
    lr_image: Option<f64>,
    /// Learning rate of the generator weights (zk-theta)
    #[arg(long)]
    lr_generator: Option<f64>,
    /// wk, zk or zk-theta
    #[arg(long)]
    optimize: Option<String>,
    /// encoder, random or average
    #[arg(long)]
    init: Option<String>,
    /// Seed of the image network and its input noise (default: --seed)
    #[arg(long)]
    dip_seed: Option<u64>,
    /// Expected kernel size of the generator
    #[arg(long)]
    kernel_size: Option<usize>,
    /// Divide the image-network widths by this factor
    #[arg(long)]
    dip_divisor: Option<usize>,
    /// Restored image
    #[arg(long)]
    out: Option<PathBuf>,
    /// Estimated kernel (single-tensor file)
    #[arg(long)]
    kernel_out: Option<PathBuf>,
    /// Kernel rendered as an image, scaled to peak white
    #[arg(long)]
    kernel_image: Option<PathBuf>,
    /// Per-iteration loss (and PSNR) file
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Sharp image for the PSNR trace
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Estimated image
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Reference image of the same size
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Estimated kernel (single-tensor file)
    #[arg(long)]
    kernel: Option<PathBuf>,
    /// Reference kernel (single-tensor file)
    #[arg(long)]
    ref_kernel: Option<PathBuf>,
}

/// Resolves `<ns>.<key>` from flag, config file, then default, and records
/// the outcome for the manifest.
struct Settings {
    ns: &'static str,
    file: RunConfig,
    resolved: RunConfig,
    manifest: Option<PathBuf>,
}

impl Settings {
    fn new(ns: &'static str, common: &Common) -> CliResult<Self> {
        let known = known_keys();
        let known: Vec<&str> = known.iter().map(String::as_str).collect();
        let file = match &common.config {
            Some(p) => RunConfig::load(p, &known)?,
            None => RunConfig::default(),
        };
        let mut s = Self {
            ns,
            file,
            resolved: RunConfig::default(),
            manifest: common.manifest.clone(),
        };
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        s.value("seed", common.seed, Some(env_seed.unwrap_or(0)))?;
        Ok(s)
    }

    fn key(&self, key: &str) -> String {
        debug_assert!(
            KEYS.iter().any(|(ns, ks)| *ns == self.ns && ks.contains(&key)),
            "{}.{key} is not registered",
            self.ns
        );
        format!("{}.{key}", self.ns)
    }

    fn lookup<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>> {
        let full = self.key(key);
        let v = match flag {
            Some(v) => Some(v),
            None => self.file.parsed::<T>(&full)?,
        };
        if let Some(v) = &v {
            self.resolved.set(full, v);
        }
        Ok(v)
    }

    fn value<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: Option<T>) -> CliResult<T> {
        match self.lookup(key, flag)? {
            Some(v) => Ok(v),
            None => match default {
                Some(d) => {
                    self.resolved.set(self.key(key), &d);
                    Ok(d)
                }
                None => Err(CliError::Usage(format!(
                    "missing --{} (or {} in the config file)",
                    key.replace('_', "-"),
                    self.key(key)
                ))),
            },
        }
    }

    fn or<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T> {
        self.value(key, flag, Some(default))
    }

    fn req<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> CliResult<T> {
        self.value(key, flag, None)
    }

    fn path(&mut self, key: &str, flag: Option<PathBuf>) -> CliResult<PathBuf> {
        self.req(key, flag.map(DisplayPath)).map(|p| p.0)
    }

    fn opt_path(&mut self, key: &str, flag: Option<PathBuf>) -> CliResult<Option<PathBuf>> {
        Ok(self.lookup(key, flag.map(DisplayPath))?.map(|p| p.0))
    }

    fn seed(&self) -> u64 {
        self.resolved
            .parsed(&format!("{}.seed", self.ns))
            .ok()
            .flatten()
            .expect("seed resolved at construction")
    }

    /// Writes the manifest next to `output` unless `--manifest` overrides.
    fn finish(&self, command: &str, output: &Path) -> CliResult<PathBuf> {
        let path = self.manifest.clone().unwrap_or_else(|| io::manifest_path(output));
        let header = vec![
            format!("gkpile {} {command}", env!("CARGO_PKG_VERSION")),
            format!("rerun: gkpile {command} --config {}", path.display()),
        ];
        io::write_manifest(&path, &header, &self.resolved)?;
        Ok(path)
    }
}

/// Path wrapper that round-trips through a config value.
struct DisplayPath(PathBuf);

impl FromStr for DisplayPath {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(Self(PathBuf::from(s)))
    }
}

impl Display for DisplayPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0.display())
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("usage error: {m}");
            2
        }
        Err(CliError::Failure(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::SynthKernels(a) => synth_kernels(a),
        Command::SynthImages(a) => synth_images(a),
        Command::Blur(a) => blur_image(a),
        Command::TrainGan(a) => train_gan(a),
        Command::TrainInit(a) => train_init(a),
        Command::Invert(a) => invert(a),
        Command::Deblur(a) => deblur(a),
        Command::Eval(a) => eval(a),
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Failure(Error::io(dir, e)))
}

fn kernel_name(i: usize) -> String {
    format!("kernel.{i:05}")
}

/// Kernels from a `kernels.gkc` file, its directory, or a single-tensor file.
pub fn load_kernels(path: &Path) -> crate::Result<Vec<BlurKernel>> {
    let path = if path.is_dir() { path.join(KERNELS_FILE) } else { path.to_path_buf() };
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.starts_with(io::TENSOR_MAGIC) {
        return Ok(vec![BlurKernel::new(io::decode_tensor(&bytes)?.1)?]);
    }
    let set = io::decode_checkpoint(&bytes)?;
    if set.is_empty() {
        return Err(Error::contract(format!("{} holds no kernels", path.display())));
    }
    set.iter().map(|(_, t)| BlurKernel::new(t.clone())).collect()
}

fn load_kernel(path: &Path) -> crate::Result<BlurKernel> {
    BlurKernel::new(io::load_tensor(path)?.1)
}

fn synth_kernels(a: SynthArgs) -> CliResult<()> {
    let mut s = Settings::new("synth", &a.common)?;
    let count = s.or("count", a.count, 2000)?;
    let size = s.or("size", a.size, 15)?;
    let out = s.path("out", a.out)?;
    let seed = s.seed();
    let params = TrajectoryParams {
        seed,
        ..TrajectoryParams::for_kernel_size(size)
    };
    let kernels = generate_dataset(count, size, &params)?;
    ensure_dir(&out)?;
    let mut set = NamedTensorSet::new();
    for (i, k) in kernels.iter().enumerate() {
        set.insert(kernel_name(i), k.tensor().clone())?;
    }
    io::save_checkpoint(&out.join(KERNELS_FILE), &set)?;
    let shown = kernels.len().min(64);
    io::write_image(&out.join("preview.pgm"), &kernel_grid(&kernels[..shown], 8)?)?;
    s.finish("synth-kernels", &out)?;
    println!("wrote {count} kernels of size {size} to {}", out.join(KERNELS_FILE).display());
    Ok(())
}

fn synth_images(a: ImagesArgs) -> CliResult<()> {
    let mut s = Settings::new("images", &a.common)?;
    let count = s.or("count", a.count, 100)?;
    let size = s.or("size", a.size, 96)?;
    let out = s.path("out", a.out)?;
    let images = scene_dataset(count, size, size, s.seed())?;
    ensure_dir(&out)?;
    for (i, img) in images.iter().enumerate() {
        io::write_image(&out.join(format!("image_{i:05}.pgm")), img)?;
    }
    s.finish("synth-images", &out)?;
    println!("wrote {count} images of {size}×{size} to {}", out.display());
    Ok(())
}

fn blur_image(a: BlurArgs) -> CliResult<()> {
    let mut s = Settings::new("blur", &a.common)?;
    let image = s.path("image", a.image)?;
    let kernels = s.path("kernels", a.kernels)?;
    let index = s.or("index", a.index, 0)?;
    let sigma = s.or("sigma", a.sigma, 0.0)?;
    let out = s.path("out", a.out)?;
    let kernel_out = s.opt_path("kernel_out", a.kernel_out)?;
    let all = load_kernels(&kernels)?;
    let kernel = all.get(index).ok_or_else(|| {
        CliError::Failure(Error::contract(format!("kernel index {index} out of range (0..{})", all.len())))
    })?;
    let cfg = BlurConfig {
        noise_sigma: sigma,
        seed: s.seed(),
    };
    let y = blur(&io::read_image(&image)?, kernel, &cfg)?;
    io::write_image(&out, &y)?;
    if let Some(p) = kernel_out {
        io::save_tensor(&p, "kernel", kernel.tensor())?;
    }
    s.finish("blur", &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn train_gan(a: GanArgs) -> CliResult<()> {
    let mut s = Settings::new("gan", &a.common)?;
    let d = GanTrainConfig::default();
    let g = GeneratorConfig::default();
    let kernels = s.path("kernels", a.kernels)?;
    let out = s.path("out", a.out)?;
    let cfg = GanTrainConfig {
        iterations: s.or("iterations", a.iterations, d.iterations)?,
        batch_size: s.or("batch_size", a.batch_size, d.batch_size)?,
        lr_g: s.or("lr_g", a.lr_g, d.lr_g)?,
        lr_d: s.or("lr_d", a.lr_d, d.lr_d)?,
        beta1: s.or("beta1", a.beta1, d.beta1)?,
        seed: s.seed(),
        sample_every: s.or("sample_every", a.sample_every, d.sample_every)?,
    };
    let latent_dim = s.or("latent_dim", a.latent_dim, g.latent_dim)?;
    let width = s.or("width", a.width, g.base_channels)?;
    let samples = s.opt_path("samples", a.samples)?;
    let trace = s.opt_path("trace", a.trace)?;
    let disc_out = s.opt_path("discriminator_out", a.discriminator_out)?;

    let data = load_kernels(&kernels)?;
    let gen_cfg = GeneratorConfig {
        kernel_size: data[0].size(),
        latent_dim,
        base_channels: width,
    };
    let mut trainer = GanTrainer::new(&data, gen_cfg, cfg)?;
    for i in 1..=cfg.iterations {
        let (dl, gl) = trainer.step()?;
        if i % 500 == 0 || i == cfg.iterations {
            eprintln!("gan iteration {i}/{}: d_loss {dl:.4} g_loss {gl:.4}", cfg.iterations);
        }
    }
    io::save_checkpoint(&out, &trainer.generator.to_checkpoint())?;
    if let Some(p) = disc_out {
        io::save_checkpoint(&p, &trainer.discriminator.to_checkpoint())?;
    }
    if let Some(dir) = samples {
        ensure_dir(&dir)?;
        for (it, ks) in &trainer.trace.samples {
            io::write_image(&dir.join(format!("samples_{it:06}.pgm")), &kernel_grid(ks, 4)?)?;
        }
    }
    if let Some(p) = trace {
        let text: String = trainer
            .trace
            .d_loss
            .iter()
            .zip(&trainer.trace.g_loss)
            .enumerate()
            .map(|(i, (d, g))| format!("{} {d} {g}\n", i + 1))
            .collect();
        io::write_atomic(&p, text.as_bytes())?;
    }
    s.finish("train-gan", &out)?;
    println!("wrote generator to {}", out.display());
    Ok(())
}

fn read_image_dir(dir: &Path) -> CliResult<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Failure(Error::io(dir, e)))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Failure(Error::contract(format!("no .pgm images in {}", dir.display()))));
    }
    Ok(paths.iter().map(|p| io::read_image(p)).collect::<crate::Result<_>>()?)
}

fn train_init(a: InitArgs) -> CliResult<()> {
    let mut s = Settings::new("init", &a.common)?;
    let d = InitTrainConfig::default();
    let generator = s.path("generator", a.generator)?;
    let kernels = s.path("kernels", a.kernels)?;
    let images = s.path("images", a.images)?;
    let pairs = s.or("pairs", a.pairs, 2000)?;
    let crop = s.or("crop", a.crop, 64)?;
    let sigma = s.or("sigma", a.sigma, 0.0)?;
    let lr = s.or("lr", a.lr, d.lr_schedule[0])?;
    let mut cfg = InitTrainConfig {
        iterations: s.or("iterations", a.iterations, d.iterations)?,
        inner_steps: s.or("inner_steps", a.inner_steps, d.inner_steps)?,
        encoder_steps: s.or("encoder_steps", a.encoder_steps, d.encoder_steps)?,
        lambda: s.or("lambda", a.lambda, d.lambda)?,
        lr_schedule: vec![lr, lr / 10.0, lr / 100.0],
        plateau_window: s.or("plateau_window", a.plateau_window, d.plateau_window)?,
        batch_size: s.or("batch_size", a.batch_size, d.batch_size)?,
        seed: s.seed(),
        ..d
    };
    let out = s.path("out", a.out)?;
    let trace = s.opt_path("trace", a.trace)?;

    let gen = Generator::from_checkpoint(&io::load_checkpoint(&generator)?)?;
    cfg.encoder = EncoderConfig::with_latent_dim(gen.latent_dim());
    let ks = load_kernels(&kernels)?;
    let imgs = read_image_dir(&images)?;
    let data = make_training_pairs(&imgs, &ks, pairs, crop, sigma, cfg.seed)?;
    let run = train_initializer(&data, &gen, &cfg)?;
    io::save_checkpoint(&out, &run.encoder.to_checkpoint())?;
    if let Some(p) = trace {
        let text: String = run
            .losses
            .iter()
            .zip(&run.learning_rates)
            .enumerate()
            .map(|(i, (l, r))| format!("{} {l} {r}\n", i + 1))
            .collect();
        io::write_atomic(&p, text.as_bytes())?;
    }
    s.finish("train-init", &out)?;
    if let Some(last) = run.losses.last() {
        eprintln!("initializer final loss {last:.6}");
    }
    println!("wrote encoder to {}", out.display());
    Ok(())
}

fn invert(a: InvertArgs) -> CliResult<()> {
    let mut s = Settings::new("invert", &a.common)?;
    let d = InversionConfig::default();
    let generator = s.path("generator", a.generator)?;
    let target = s.path("target", a.target)?;
    let cfg = InversionConfig {
        steps: s.or("steps", a.steps, d.steps)?,
        lr: s.or("lr", a.lr, d.lr)?,
        stop_tol: s.or("stop_tol", a.stop_tol, d.stop_tol)?,
    };
    let init = s.opt_path("init", a.init)?;
    let out = s.path("out", a.out)?;
    let kernel_out = s.opt_path("kernel_out", a.kernel_out)?;
    let gen = Generator::from_checkpoint(&io::load_checkpoint(&generator)?)?;
    let target = load_kernel(&target)?;
    let z0 = match init {
        Some(p) => io::load_tensor(&p)?.1,
        None => Tensor::randn(&[gen.latent_dim()], 1.0, &mut ChaCha8Rng::seed_from_u64(s.seed())),
    };
    let r = invert_kernel(&target, &gen, &z0, &cfg)?;
    io::save_tensor(&out, "latent", &r.latent)?;
    if let Some(p) = kernel_out {
        io::save_tensor(&p, "kernel", gen.generate(&r.latent)?.tensor())?;
    }
    s.finish("invert", &out)?;
    println!("loss={:.6} initial={:.6} steps={}", r.loss, r.initial_loss, r.steps);
    Ok(())
}

fn deblur(a: DeblurArgs) -> CliResult<()> {
    let mut s = Settings::new("solve", &a.common)?;
    let d = SolveConfig::default();
    let blurry = s.path("blurry", a.blurry)?;
    let generator = s.path("generator", a.generator)?;
    let encoder = s.opt_path("encoder", a.encoder)?;
    let iterations = s.or("iterations", a.iterations, d.iterations)?;
    let lr_kernel = s.or("lr_kernel", a.lr_kernel, d.lr_kernel)?;
    let lr_image = s.or("lr_image", a.lr_image, d.lr_image)?;
    let lr_generator = s.or("lr_generator", a.lr_generator, d.lr_generator)?;
    let optimize: OptimizeTarget = s
        .or("optimize", a.optimize, d.optimize.to_string())?
        .parse()
        .map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let init: InitStrategy = s
        .or("init", a.init, d.init.to_string())?
        .parse()
        .map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let seed = s.seed();
    let dip_seed = s.or("dip_seed", a.dip_seed, seed)?;
    let kernel_size = s.lookup("kernel_size", a.kernel_size)?;
    let divisor = s.or("dip_divisor", a.dip_divisor, 1)?;
    if divisor == 0 {
        return Err(CliError::Usage("--dip-divisor must be ≥ 1".into()));
    }
    let out = s.path("out", a.out)?;
    let kernel_out = s.opt_path("kernel_out", a.kernel_out)?;
    let kernel_image = s.opt_path("kernel_image", a.kernel_image)?;
    let trace = s.opt_path("trace", a.trace)?;
    let reference = s.opt_path("reference", a.reference)?;

    let gen = Generator::from_checkpoint(&io::load_checkpoint(&generator)?)?;
    let enc = match &encoder {
        Some(p) => Some(Encoder::from_checkpoint(&io::load_checkpoint(p)?)?),
        None => None,
    };
    let y = io::read_image(&blurry)?;
    let reference = reference.map(|p| io::read_image(&p)).transpose()?;
    let cfg = SolveConfig {
        iterations,
        lr_kernel,
        lr_image,
        lr_generator,
        optimize,
        init,
        seed,
        kernel_size,
        dip: DipConfig::narrowed(divisor),
        ..d
    };
    let r = deblur_with_reference(&y, &gen, enc.as_ref(), dip_seed, &cfg, reference.as_ref())?;
    io::write_image(&out, &r.image)?;
    if let Some(p) = kernel_out {
        io::save_tensor(&p, "kernel", r.kernel.tensor())?;
    }
    if let Some(p) = kernel_image {
        io::write_image(&p, &kernel_grid(std::slice::from_ref(&r.kernel), 1)?)?;
    }
    if let Some(p) = trace {
        let text: String = r
            .losses
            .iter()
            .enumerate()
            .map(|(i, l)| match &r.psnr {
                Some(ps) => format!("{i} {l} {}\n", ps[i]),
                None => format!("{i} {l}\n"),
            })
            .collect();
        io::write_atomic(&p, text.as_bytes())?;
    }
    s.finish("deblur", &out)?;
    println!(
        "best iteration {} data-fit {:.6} (initial {:.6})",
        r.best_iteration, r.losses[r.best_iteration], r.losses[0]
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let mut s = Settings::new("eval", &a.common)?;
    let pred = s.path("pred", a.pred)?;
    let reference = s.path("ref", a.reference)?;
    let kernel = s.opt_path("kernel", a.kernel)?;
    let ref_kernel = s.opt_path("ref_kernel", a.ref_kernel)?;
    let x = io::read_image(&pred)?;
    let r = io::read_image(&reference)?;
    let kernels = match (kernel, ref_kernel) {
        (Some(k), Some(g)) => Some((load_kernel(&k)?, load_kernel(&g)?)),
        (None, None) => None,
        _ => return Err(CliError::Usage("--kernel and --ref-kernel go together".into())),
    };
    let report = MetricReport::evaluate(&x, &r, kernels.as_ref().map(|(a, b)| (a, b)))?;
    let mut manifest_name = pred.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    manifest_name.push(".eval");
    s.finish("eval", &pred.with_file_name(manifest_name))?;
    println!("{report}");
    Ok(())
}
