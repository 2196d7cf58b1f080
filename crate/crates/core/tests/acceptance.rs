//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails. Pass criterion ids (`A5 A6`) as arguments
//! to run a subset.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use gkpile::autodiff::{grad_check, Activation, ConvMode, Tape, Var};
use gkpile::blur::{blur, BlurConfig, BlurKernel};
use gkpile::dip::{sample_dip_input, DipConfig, DipNet};
use gkpile::gan::{train_gan, Discriminator, GanTrainConfig, Generator, GeneratorConfig};
use gkpile::initializer::{make_training_pairs, train_initializer, Encoder, EncoderConfig, InitTrainConfig};
use gkpile::inversion::{invert_kernel, InversionConfig};
use gkpile::metrics::{kernel_error, psnr};
use gkpile::params::NamedTensorSet;
use gkpile::scenes::{scene, scene_dataset};
use gkpile::solver::{deblur_with_reference, initial_latent, InitStrategy, OptimizeTarget, SolveConfig, SolveResult};
use gkpile::synth::{generate_dataset, TrajectoryParams};
use gkpile::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

/// Width divisor of the image network in the deblurring runs.
const DIP_DIVISOR: usize = 4;
const INVERSION_LR: f64 = 0.2;
const GAN15_ITERATIONS: usize = 5000;
const GAN_SMALL_ITERATIONS: usize = 5000;
const ENCODER_ITERATIONS: usize = 1000;
const ENCODER_LR: f64 = 1e-3;
const KERNEL_LR: f64 = 2e-3;
const SOLVE_ITERATIONS: usize = 2500;
const ABLATION_ITERATIONS: usize = 1000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn kernels(count: usize, size: usize, seed: u64) -> Vec<BlurKernel> {
    let params = TrajectoryParams {
        seed,
        ..TrajectoryParams::for_kernel_size(size)
    };
    generate_dataset(count, size, &params).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

// ---------------------------------------------------------------- A1

fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut rng(seed)));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn op_error(point: &Tensor, seed: u64, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
    grad_check(
        |tape, x| {
            let y = f(tape, x)?;
            project(tape, y, seed)
        },
        point,
        STEP,
    )
    .unwrap()
}

fn ops_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let v = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut r);
    let other = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut r);
    let gamma = Tensor::randn(&[3], 1.0, &mut r);
    let beta = Tensor::randn(&[3], 1.0, &mut r);
    let a = Tensor::randn(&[4, 3], 1.0, &mut r);
    let b = Tensor::randn(&[3, 5], 1.0, &mut r);
    let img = Tensor::randn(&[7, 6], 1.0, &mut r);
    let ker = Tensor::randn(&[3, 3], 1.0, &mut r);
    let xs = Tensor::randn(&[2, 3, 6, 5], 1.0, &mut r);
    let ws = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
    let wt = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut r);
    let s = seed;
    let mut worst = 0.0f64;
    let mut note = |e: f64| worst = worst.max(e);
    let c = |tp: &mut Tape, t: &Tensor| tp.constant(t.clone());

    note(op_error(&v, s, |tp, x| { let o = c(tp, &other); tp.add(x, o) }));
    note(op_error(&v, s, |tp, x| { let o = c(tp, &other); tp.sub(o, x) }));
    note(op_error(&v, s, |tp, x| { let o = c(tp, &other); tp.mul(x, o) }));
    note(op_error(&v, s, |tp, x| Ok(tp.scale(x, -1.7))));
    note(op_error(&v, s, |tp, x| Ok(tp.add_scalar(x, 0.3))));
    note(op_error(&v, s, |tp, x| Ok(tp.abs(x))));
    note(op_error(&v, s, |tp, x| Ok(tp.square(x))));
    for kind in [
        Activation::Relu,
        Activation::LeakyRelu(0.2),
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Softplus,
    ] {
        note(op_error(&v, s, |tp, x| Ok(tp.activation(x, kind))));
    }
    note(op_error(&v, s, |tp, x| Ok(tp.mean(x))));
    note(op_error(&v, s, |tp, x| tp.reshape(x, &[6, 20])));
    note(op_error(&v, s, |tp, x| tp.softmax_items(x)));
    note(op_error(&v, s, |tp, x| tp.softmax_flat(x)));
    note(op_error(&v, s, |tp, x| tp.global_avg_pool(x)));
    note(op_error(&v, s, |tp, x| tp.resize_bilinear(x, 7, 9)));
    note(op_error(&v, s, |tp, x| tp.resize_bilinear(x, 3, 2)));
    note(op_error(&v, s, |tp, x| { let g = c(tp, &gamma); let b = c(tp, &beta); tp.instance_norm(x, g, b) }));
    note(op_error(&gamma, s, |tp, g| { let x = c(tp, &v); let b = c(tp, &beta); tp.instance_norm(x, g, b) }));
    note(op_error(&beta, s, |tp, b| { let x = c(tp, &v); tp.add_bias(x, b) }));
    note(op_error(&v, s, |tp, x| { let o = c(tp, &other); tp.concat_channels(&[o, x]) }));
    note(op_error(&a, s, |tp, x| { let o = c(tp, &b); tp.matmul(x, o) }));
    note(op_error(&b, s, |tp, x| { let o = c(tp, &a); tp.matmul(o, x) }));
    for mode in [ConvMode::Valid, ConvMode::Full] {
        note(op_error(&img, s, |tp, x| { let k = c(tp, &ker); tp.conv2d(x, k, mode) }));
        note(op_error(&ker, s, |tp, k| { let x = c(tp, &img); tp.conv2d(x, k, mode) }));
    }
    for (stride, pad) in [(1, 0), (2, 1)] {
        note(op_error(&xs, s, |tp, x| { let w = c(tp, &ws); tp.conv2d_strided(x, w, stride, pad) }));
        note(op_error(&ws, s, |tp, w| { let x = c(tp, &xs); tp.conv2d_strided(x, w, stride, pad) }));
    }
    note(op_error(&xs, s, |tp, x| { let w = c(tp, &wt); tp.conv_transpose2d(x, w, 2, 1) }));
    note(op_error(&wt, s, |tp, w| { let x = c(tp, &xs); tp.conv_transpose2d(x, w, 2, 1) }));
    worst
}

const STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

/// Relative gradient error of `f` at `coords` of `point`, and how many
/// coordinates were replaced. A coordinate whose ±h interval straddles a
/// ReLU kink (its h-difference misses the analytic value while the h/10
/// difference matches it) is swapped for the next coordinate.
fn probe<F>(f: F, point: &Tensor, coords: &[usize]) -> (f64, usize)
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |p: &Tensor, with_grad: bool| {
        let mut tape = Tape::new();
        let x = tape.leaf(p.clone(), with_grad);
        let y = f(&mut tape, x).unwrap();
        let grad = with_grad.then(|| tape.backward(y).unwrap().wrt(x));
        (tape.value(y).item(), grad)
    };
    let grad = eval(point, true).1.unwrap();
    let central = |i: usize, h: f64| {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h)
    };
    let rel = |i: usize, numeric: f64| (grad.data()[i] - numeric).abs() / grad.data()[i].abs().max(1.0);
    let (mut worst, mut replaced) = (0.0f64, 0);
    for &first in coords {
        let mut i = first;
        let err = loop {
            let err = rel(i, central(i, STEP));
            if err < 1e-6 || replaced >= 50 || rel(i, central(i, STEP / 10.0)) > 1e-6 {
                break err;
            }
            replaced += 1;
            i = (i + 1) % point.numel();
        };
        worst = worst.max(err);
    }
    (worst, replaced)
}

/// Checks a few coordinates of every parameter tensor and of the input.
fn network_error<F>(params: &NamedTensorSet, input: &Tensor, coords_per_tensor: usize, f: F) -> (f64, usize)
where
    F: Fn(&mut Tape, &gkpile::params::Bound, Var) -> Result<Var>,
{
    let pick = |n: usize| -> Vec<usize> { (0..n).step_by(n.div_ceil(coords_per_tensor)).collect() };
    let (mut worst, mut replaced) = probe(
        |tape, x| {
            let b = params.bind(tape, false);
            let y = f(tape, &b, x)?;
            project(tape, y, 99)
        },
        input,
        &pick(input.numel()),
    );
    for (name, point) in params.iter() {
        let (err, n) = probe(
            |tape, v| {
                let mut b = params.bind(tape, false);
                b.replace(name, v);
                let x = tape.constant(input.clone());
                let y = f(tape, &b, x)?;
                project(tape, y, 99)
            },
            point,
            &pick(point.numel()),
        );
        worst = worst.max(err);
        replaced += n;
    }
    (worst, replaced)
}

fn a1() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 5];
    let mut replaced = 0;
    let mut note = |slot: usize, (err, n): (f64, usize)| {
        worst[slot] = worst[slot].max(err);
        replaced += n;
    };
    for point in 0..5u64 {
        note(0, (ops_error(100 + point), 0));

        let gen = Generator::new(GeneratorConfig::default(), &mut rng(200 + point)).unwrap();
        let z = Tensor::randn(&[2, 32], 1.0, &mut rng(300 + point));
        note(1, network_error(gen.params(), &z, 4, |tp, b, x| gen.forward(tp, b, x)));

        let disc = Discriminator::new(15, &mut rng(400 + point)).unwrap();
        let k = Tensor::uniform(&[2, 1, 15, 15], 0.0, 0.02, &mut rng(500 + point));
        note(2, network_error(disc.params(), &k, 4, |tp, b, x| disc.forward(tp, b, x)));

        let enc = Encoder::new(EncoderConfig::default(), &mut rng(600 + point)).unwrap();
        let img = scene(34, 36, 700 + point).unwrap().reshape(&[1, 1, 34, 36]).unwrap();
        note(3, network_error(enc.params(), &img, 3, |tp, b, x| enc.forward(tp, b, x)));

        let dip = DipNet::new(DipConfig::default(), &mut rng(800 + point)).unwrap();
        let noise = sample_dip_input([8, 22, 20], 900 + point).unwrap().noise.reshape(&[1, 8, 22, 20]).unwrap();
        note(4, network_error(dip.params(), &noise, 3, |tp, b, x| dip.forward(tp, b, x)));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    outcome(
        max < GRAD_TOL && secs < 60.0,
        format!(
            "max rel err ops {:.1e} generator {:.1e} discriminator {:.1e} encoder {:.1e} dip {:.1e} \
             ({replaced} kink-straddling coordinates replaced); {secs:.1}s",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

// ---------------------------------------------------------------- A2

fn eval2(x: &Tensor, w: &Tensor, f: impl Fn(&mut Tape, Var, Var) -> Result<Var>) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = f(&mut tape, xv, wv).unwrap();
    tape.value(y).clone()
}

fn a2() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let gap = if case % 2 == 0 {
            // valid correlation against its full-mode adjoint with the flipped kernel
            let (kh, kw) = (r.random_range(1..6), r.random_range(1..6));
            let (h, w) = (kh + r.random_range(0..8), kw + r.random_range(0..8));
            let x = Tensor::uniform(&[h, w], -1.0, 1.0, &mut r);
            let k = Tensor::uniform(&[kh, kw], -1.0, 1.0, &mut r);
            let y = Tensor::uniform(&[h - kh + 1, w - kw + 1], -1.0, 1.0, &mut r);
            let flipped = Tensor::from_fn(&[kh, kw], |i| k.data()[kh * kw - 1 - i]);
            let fwd = eval2(&x, &k, |tp, a, b| tp.conv2d(a, b, ConvMode::Valid));
            let back = eval2(&y, &flipped, |tp, a, b| tp.conv2d(a, b, ConvMode::Full));
            (fwd.dot(&y) - x.dot(&back)).abs()
        } else {
            let n = r.random_range(1..3);
            let (cin, cout) = (r.random_range(1..4), r.random_range(1..4));
            let k: usize = r.random_range(1..5);
            let s = r.random_range(1..4);
            let p = r.random_range(0..k.div_ceil(2));
            let oh = r.random_range(1..6);
            let ow = r.random_range(1..6);
            let (h, w) = ((oh - 1) * s + k - 2 * p, (ow - 1) * s + k - 2 * p);
            if h == 0 || w == 0 {
                continue;
            }
            let wt = Tensor::uniform(&[cout, cin, k, k], -1.0, 1.0, &mut r);
            let x = Tensor::uniform(&[n, cin, h, w], -1.0, 1.0, &mut r);
            let y = Tensor::uniform(&[n, cout, oh, ow], -1.0, 1.0, &mut r);
            let fwd = eval2(&x, &wt, |tp, a, b| tp.conv2d_strided(a, b, s, p));
            assert_eq!(fwd.shape(), y.shape());
            let back = eval2(&y, &wt, |tp, a, b| tp.conv_transpose2d(a, b, s, p));
            assert_eq!(back.shape(), x.shape());
            (fwd.dot(&y) - x.dot(&back)).abs()
        };
        worst = worst.max(gap);
    }
    outcome(worst <= 1e-9, format!("max |<Ax,y> - <x,A*y>| = {worst:.2e} over 20 shape combinations"))
}

// ---------------------------------------------------------------- A3

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            column[i] = data[i * w + j];
        }
        col.process(&mut column);
        for i in 0..h {
            data[i * w + j] = column[i];
        }
    }
}

/// Valid correlation through circular FFT correlation on the image grid.
fn fft_correlate_valid(x: &Tensor, k: &Tensor) -> Tensor {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let (kh, kw) = (k.shape()[0], k.shape()[1]);
    let mut fx: Vec<_> = x.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut fk = vec![Complex::new(0.0, 0.0); h * w];
    for a in 0..kh {
        for b in 0..kw {
            fk[a * w + b] = Complex::new(k.at(&[a, b]), 0.0);
        }
    }
    fft2(&mut fx, h, w, false);
    fft2(&mut fk, h, w, false);
    let mut c: Vec<_> = fx.iter().zip(&fk).map(|(a, b)| a * b.conj()).collect();
    fft2(&mut c, h, w, true);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    Tensor::from_fn(&[oh, ow], |i| c[(i / ow) * w + i % ow].re / (h * w) as f64)
}

fn a3() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (kh, kw) = (r.random_range(1..10), r.random_range(1..10));
        let (h, w) = (kh + r.random_range(0..30), kw + r.random_range(0..30));
        let x = Tensor::uniform(&[h, w], 0.0, 1.0, &mut r);
        let k = Tensor::uniform(&[kh, kw], 0.0, 1.0, &mut r);
        let direct = eval2(&x, &k, |tp, a, b| tp.conv2d(a, b, ConvMode::Valid));
        worst = worst.max(direct.max_abs_diff(&fft_correlate_valid(&x, &k)));
    }
    outcome(worst <= 1e-10, format!("max |direct - fft| = {worst:.2e} over 10 pairs"))
}

// ---------------------------------------------------------------- A4

fn a4() -> Outcome {
    let start = Instant::now();
    let first = kernels(1000, 15, 4);
    let secs = start.elapsed().as_secs_f64();
    let valid = first
        .iter()
        .filter(|k| (k.tensor().sum() - 1.0).abs() <= 1e-6 && k.tensor().data().iter().all(|&v| v >= 0.0))
        .count();
    let again = kernels(1000, 15, 4);
    let same = first.iter().zip(&again).all(|(a, b)| {
        a.tensor().data().iter().zip(b.tensor().data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    outcome(
        valid == 1000 && same && secs < 10.0,
        format!("{valid}/1000 simplex-valid, reproducible {same}, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- shared models

struct GanSetup {
    gen: Generator,
    data: Vec<BlurKernel>,
    untrained_nn: f64,
    trained_nn: f64,
    secs: f64,
}

fn nn_distance(samples: &[BlurKernel], data: &[BlurKernel]) -> f64 {
    let d: Vec<f64> = samples
        .iter()
        .map(|s| data.iter().map(|k| s.tensor().l1_distance(k.tensor())).fold(f64::INFINITY, f64::min))
        .collect();
    mean(&d)
}

fn train_kernel_gan(size: usize, iterations: usize, seed: u64) -> GanSetup {
    let data = kernels(2000, size, seed);
    let gen_cfg = GeneratorConfig {
        kernel_size: size,
        latent_dim: 32,
        ..GeneratorConfig::default()
    };
    let cfg = GanTrainConfig {
        iterations,
        sample_every: 0,
        seed,
        ..GanTrainConfig::default()
    };
    let z = Tensor::randn(&[256, 32], 1.0, &mut rng(seed + 1));
    let untrained = Generator::new(gen_cfg, &mut rng(seed)).unwrap();
    let untrained_nn = nn_distance(&untrained.generate_batch(&z).unwrap(), &data);
    let start = Instant::now();
    let run = train_gan(&data, gen_cfg, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let trained_nn = nn_distance(&run.generator.generate_batch(&z).unwrap(), &data);
    GanSetup {
        gen: run.generator,
        data,
        untrained_nn,
        trained_nn,
        secs,
    }
}

fn gan15() -> &'static GanSetup {
    static CELL: OnceLock<GanSetup> = OnceLock::new();
    CELL.get_or_init(|| train_kernel_gan(15, GAN15_ITERATIONS, 15))
}

fn gan9() -> &'static GanSetup {
    static CELL: OnceLock<GanSetup> = OnceLock::new();
    CELL.get_or_init(|| train_kernel_gan(9, GAN_SMALL_ITERATIONS, 9))
}

fn gan13() -> &'static GanSetup {
    static CELL: OnceLock<GanSetup> = OnceLock::new();
    CELL.get_or_init(|| train_kernel_gan(13, GAN_SMALL_ITERATIONS, 13))
}

fn train_encoder(setup: &GanSetup, seed: u64) -> Encoder {
    let images = scene_dataset(100, 96, 96, seed).unwrap();
    let pairs = make_training_pairs(&images, &setup.data, 500, 64, 0.0, seed + 1).unwrap();
    let cfg = InitTrainConfig {
        iterations: ENCODER_ITERATIONS,
        lr_schedule: vec![ENCODER_LR, ENCODER_LR / 10.0, ENCODER_LR / 100.0],
        seed: seed + 2,
        ..InitTrainConfig::default()
    };
    train_initializer(&pairs, &setup.gen, &cfg).unwrap().encoder
}

fn encoder9() -> &'static Encoder {
    static CELL: OnceLock<Encoder> = OnceLock::new();
    CELL.get_or_init(|| train_encoder(gan9(), 90))
}

fn encoder13() -> &'static Encoder {
    static CELL: OnceLock<Encoder> = OnceLock::new();
    CELL.get_or_init(|| train_encoder(gan13(), 130))
}

/// A held-out deblurring instance: a (63+K)-pixel square sharp scene, its kernel
/// and the 64×64 valid-blurred observation.
struct Instance {
    clean: Tensor,
    kernel: BlurKernel,
    blurry: Tensor,
}

fn instances(count: usize, size: usize, seed: u64) -> Vec<Instance> {
    let side = 64 + size - 1;
    kernels(count, size, seed)
        .into_iter()
        .enumerate()
        .map(|(i, kernel)| {
            let clean = scene(side, side, seed * 1000 + i as u64).unwrap();
            let blurry = blur(&clean, &kernel, &BlurConfig::default()).unwrap();
            Instance { clean, kernel, blurry }
        })
        .collect()
}

fn solve(inst: &Instance, gen: &Generator, enc: Option<&Encoder>, init: InitStrategy, optimize: OptimizeTarget, iterations: usize, seed: u64) -> SolveResult {
    let cfg = SolveConfig {
        iterations,
        init,
        optimize,
        seed,
        lr_kernel: KERNEL_LR,
        dip: DipConfig::narrowed(DIP_DIVISOR),
        ..SolveConfig::default()
    };
    deblur_with_reference(&inst.blurry, gen, enc, seed, &cfg, Some(&inst.clean)).unwrap()
}

/// Best PSNR over integer shifts of a 64×64 window of `image` against a
/// 64×64 window of `clean`, the two windows offset by at most ±(K−1)/2
/// around the observed region. Blind deconvolution fixes the image only up
/// to such a translation.
fn aligned_psnr(image: &Tensor, clean: &Tensor, k: usize) -> f64 {
    let window = |t: &Tensor, oy: usize, ox: usize| {
        let w = t.shape()[1];
        Tensor::from_fn(&[64, 64], |i| t.data()[(oy + i / 64) * w + ox + i % 64])
    };
    let half = (k - 1) / 2;
    let span = 2 * half;
    let mut best = f64::NEG_INFINITY;
    for dy in 0..=span {
        for dx in 0..=span {
            let (a, b) = if image.shape()[0] == 64 {
                (window(image, 0, 0), window(clean, dy, dx))
            } else {
                (window(image, dy, dx), window(clean, half, half))
            };
            best = best.max(psnr(&a, &b).unwrap());
        }
    }
    best
}

fn restored_psnr(inst: &Instance, image: &Tensor) -> f64 {
    aligned_psnr(image, &inst.clean, inst.kernel.size())
}

fn blurry_psnr(inst: &Instance) -> f64 {
    aligned_psnr(&inst.blurry, &inst.clean, inst.kernel.size())
}

struct DeblurRun {
    result: SolveResult,
    secs: f64,
}

fn encoder_runs() -> &'static (Vec<Instance>, Vec<DeblurRun>) {
    static CELL: OnceLock<(Vec<Instance>, Vec<DeblurRun>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let setup = gan9();
        let enc = encoder9();
        let insts = instances(20, 9, 80);
        let runs = insts
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                let start = Instant::now();
                let result = solve(inst, &setup.gen, Some(enc), InitStrategy::Encoder, OptimizeTarget::FeatureW, SOLVE_ITERATIONS, i as u64);
                DeblurRun {
                    result,
                    secs: start.elapsed().as_secs_f64(),
                }
            })
            .collect();
        (insts, runs)
    })
}

// ---------------------------------------------------------------- A5..A10

fn a5() -> Outcome {
    let s = gan15();
    let ratio = s.trained_nn / s.untrained_nn;
    outcome(
        ratio <= 0.5 && s.secs <= 1800.0,
        format!(
            "nn distance {:.4} vs untrained {:.4} (ratio {ratio:.3}), {GAN15_ITERATIONS} iterations in {:.0}s",
            s.trained_nn, s.untrained_nn, s.secs
        ),
    )
}

fn a6() -> Outcome {
    let gen = &gan15().gen;
    let mut r = rng(6);
    let cfg = InversionConfig {
        steps: 500,
        lr: INVERSION_LR,
        ..InversionConfig::default()
    };
    let mut ok = 0;
    let mut ratios = Vec::new();
    for _ in 0..50 {
        let z_star = Tensor::randn(&[32], 1.0, &mut r);
        let target = gen.generate(&z_star).unwrap();
        let z0 = Tensor::randn(&[32], 1.0, &mut r);
        let inv = invert_kernel(&target, gen, &z0, &cfg).unwrap();
        let ratio = inv.loss / inv.initial_loss;
        ratios.push(ratio);
        if ratio <= 0.1 {
            ok += 1;
        }
    }
    outcome(ok >= 45, format!("{ok}/50 reach final/initial L1 <= 0.1 (median ratio {:.4})", median(&ratios)))
}

fn a7() -> Outcome {
    let setup = gan9();
    let enc = encoder9();
    let insts = instances(100, 9, 70);
    let (mut e, mut a, mut r) = (Vec::new(), Vec::new(), Vec::new());
    for (i, inst) in insts.iter().enumerate() {
        let seed = 7000 + i as u64;
        let ze = initial_latent(&inst.blurry, Some(enc), &setup.gen, InitStrategy::Encoder, seed, 500).unwrap();
        let za = initial_latent(&inst.blurry, None, &setup.gen, InitStrategy::AverageInversion, seed, 500).unwrap();
        let zr = initial_latent(&inst.blurry, None, &setup.gen, InitStrategy::Random, seed, 500).unwrap();
        e.push(kernel_error(&setup.gen.generate(&ze).unwrap(), &inst.kernel).unwrap());
        a.push(kernel_error(&setup.gen.generate(&za).unwrap(), &inst.kernel).unwrap());
        r.push(kernel_error(&setup.gen.generate(&zr).unwrap(), &inst.kernel).unwrap());
    }
    let (e, a, r) = (mean(&e), mean(&a), mean(&r));
    outcome(e < a && a < r, format!("mean aligned kernel L1: encoder {e:.4}, average {a:.4}, random {r:.4}"))
}

fn a8() -> Outcome {
    let (insts, runs) = encoder_runs();
    let mut gains = Vec::new();
    let mut errors = Vec::new();
    let mut slowest = 0.0f64;
    for (inst, run) in insts.iter().zip(runs) {
        gains.push(restored_psnr(inst, &run.result.image) - blurry_psnr(inst));
        errors.push(kernel_error(&run.result.kernel, &inst.kernel).unwrap());
        slowest = slowest.max(run.secs);
    }
    let wins = gains.iter().filter(|&&g| g >= 2.0).count();
    let med = median(&errors);
    outcome(
        wins >= 14 && med < 0.5 && slowest <= 600.0,
        format!(
            "{wins}/20 gain >= 2 dB (median gain {:.2} dB), median kernel L1 {med:.4}, slowest run {slowest:.0}s",
            median(&gains)
        ),
    )
}

fn a9() -> Outcome {
    let setup = gan9();
    let (insts, runs) = encoder_runs();
    let mut reach = Vec::new();
    for (i, (inst, run)) in insts.iter().zip(runs).take(10).enumerate() {
        let random = solve(inst, &setup.gen, None, InitStrategy::Random, OptimizeTarget::FeatureW, SOLVE_ITERATIONS, i as u64);
        let goal = random.losses[SOLVE_ITERATIONS];
        let first = run.result.losses.iter().position(|&l| l <= goal).unwrap_or(usize::MAX);
        reach.push(first as f64);
    }
    let med = median(&reach);
    let shown: Vec<String> = reach
        .iter()
        .map(|&t| if t == usize::MAX as f64 { "never".into() } else { format!("{t}") })
        .collect();
    outcome(
        med <= 0.5 * SOLVE_ITERATIONS as f64,
        format!("median first iteration reaching the random-init final loss: {med} of T={SOLVE_ITERATIONS} [{}]", shown.join(" ")),
    )
}

fn a10() -> Outcome {
    let setup = gan13();
    let enc = encoder13();
    let insts = instances(10, 13, 100);
    let mut means = [0.0; 3];
    let modes = [OptimizeTarget::FeatureW, OptimizeTarget::LatentZ, OptimizeTarget::LatentZAndGenerator];
    for (m, mode) in modes.iter().enumerate() {
        let scores: Vec<f64> = insts
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                let r = solve(inst, &setup.gen, Some(enc), InitStrategy::Encoder, *mode, ABLATION_ITERATIONS, i as u64);
                restored_psnr(inst, &r.image)
            })
            .collect();
        means[m] = mean(&scores);
    }
    outcome(
        means[0] >= means[1] && means[0] >= means[2],
        format!("mean PSNR wk {:.2} dB, zk {:.2} dB, zk-theta {:.2} dB", means[0], means[1], means[2]),
    )
}

// ---------------------------------------------------------------- A11

fn gkpile(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gkpile"))
        .args(args)
        .current_dir(dir)
        .env_remove("GKPILE_SEED")
        .output()
        .expect("binary runs")
}

fn a11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let steps: Vec<(Vec<&str>, &str, Vec<&str>)> = vec![
        (vec!["synth-kernels", "--count", "64", "--size", "9", "--seed", "1", "--out", "kernels"], "kernels/manifest.txt", vec!["kernels/kernels.gkc", "kernels/preview.pgm"]),
        (vec!["synth-images", "--count", "8", "--size", "72", "--seed", "2", "--out", "images"], "images/manifest.txt", vec!["images/image_00000.pgm", "images/image_00007.pgm"]),
        (
            vec!["blur", "--image", "images/image_00000.pgm", "--kernels", "kernels", "--index", "3", "--out", "blurry.pgm", "--kernel-out", "truth.gkt"],
            "blurry.pgm.manifest",
            vec!["blurry.pgm", "truth.gkt"],
        ),
        (
            vec!["train-gan", "--kernels", "kernels", "--iterations", "40", "--batch-size", "8", "--seed", "3", "--out", "gen.gkc"],
            "gen.gkc.manifest",
            vec!["gen.gkc"],
        ),
        (
            vec![
                "train-init", "--generator", "gen.gkc", "--kernels", "kernels", "--images", "images", "--pairs", "16", "--crop", "32",
                "--iterations", "4", "--inner-steps", "3", "--batch-size", "4", "--seed", "4", "--out", "enc.gkc",
            ],
            "enc.gkc.manifest",
            vec!["enc.gkc"],
        ),
        (
            vec![
                "deblur", "--blurry", "blurry.pgm", "--generator", "gen.gkc", "--encoder", "enc.gkc", "--iterations", "20",
                "--dip-divisor", "4", "--seed", "5", "--out", "restored.pgm", "--kernel-out", "restored.gkt",
            ],
            "restored.pgm.manifest",
            vec!["restored.pgm", "restored.gkt"],
        ),
        (
            vec!["eval", "--pred", "restored.pgm", "--ref", "images/image_00000.pgm", "--kernel", "restored.gkt", "--ref-kernel", "truth.gkt"],
            "restored.pgm.eval.manifest",
            vec![],
        ),
    ];
    let mut first = Vec::new();
    for (args, manifest, outputs) in &steps {
        let o = gkpile(p, args);
        if o.status.code() != Some(0) {
            return outcome(false, format!("`{}` exited {:?}: {}", args[0], o.status.code(), String::from_utf8_lossy(&o.stderr)));
        }
        if !p.join(manifest).exists() {
            return outcome(false, format!("`{}` wrote no manifest at {manifest}", args[0]));
        }
        let bytes: Vec<Vec<u8>> = outputs.iter().map(|f| fs::read(p.join(f)).unwrap()).collect();
        first.push((o.stdout, bytes));
    }
    for ((args, manifest, outputs), (stdout, bytes)) in steps.iter().zip(&first) {
        let o = gkpile(p, &[args[0], "--config", manifest]);
        if o.status.code() != Some(0) {
            return outcome(false, format!("rerun of `{}` from {manifest} exited {:?}", args[0], o.status.code()));
        }
        let again: Vec<Vec<u8>> = outputs.iter().map(|f| fs::read(p.join(f)).unwrap()).collect();
        if &again != bytes || &o.stdout != stdout {
            return outcome(false, format!("rerun of `{}` from {manifest} differs", args[0]));
        }
    }
    outcome(true, format!("{} steps exit 0; manifest reruns are bit-identical", steps.len()))
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("A1", "gradient suite", a1),
        ("A2", "adjointness", a2),
        ("A3", "convolution oracle", a3),
        ("A4", "kernel synthesis", a4),
        ("A5", "toy GAN quality", a5),
        ("A6", "inversion recovery", a6),
        ("A7", "initializer usefulness", a7),
        ("A8", "end-to-end deblurring", a8),
        ("A9", "convergence speed", a9),
        ("A10", "ablation direction", a10),
        ("A11", "pipeline closure", a11),
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("{id:<4} {verdict} {name}: {} [{:.0}s]", result.detail, start.elapsed().as_secs_f64());
        if !result.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
