//! Motion-blur kernels from simulated camera-shake trajectories.
//!
//! The walk follows the usual camera-shake recipe: a unit-speed velocity is
//! nudged each step by Gaussian jitter and a pull back toward the start, and
//! rarely flipped by an impulsive jerk. The path is then splatted onto a
//! `K×K` grid.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blur::BlurKernel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered 2D path of the camera, `(x, y)` in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    points: Vec<(f64, f64)>,
}

impl Trajectory {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("trajectory needs at least one point"));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::contract("trajectory points must be finite"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Largest axis-aligned side of the bounding box.
    pub fn extent(&self) -> f64 {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in &self.points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        (x1 - x0).max(y1 - y0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryParams {
    pub num_steps: usize,
    /// Upper bound of the per-path jitter gain, in `(0, 1]`.
    pub max_anxiety: f64,
    /// Upper bound of the Gaussian shake amplitude.
    pub gaussian_shake: f64,
    /// Pixels travelled per step at full speed.
    pub base_step: f64,
    /// Strength of the pull back toward the origin.
    pub centripetal_gain: f64,
    pub seed: u64,
}

impl TrajectoryParams {
    /// Defaults scaled to a `size×size` kernel grid.
    pub fn for_kernel_size(size: usize) -> Self {
        let num_steps = (64 * size).div_ceil(15).max(2);
        Self {
            num_steps,
            max_anxiety: 0.005,
            gaussian_shake: 10.0,
            base_step: 2.0 * size as f64 / num_steps as f64,
            centripetal_gain: 0.7,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.num_steps >= 1
            && self.max_anxiety > 0.0
            && self.max_anxiety <= 1.0
            && self.gaussian_shake >= 0.0
            && self.gaussian_shake.is_finite()
            && self.base_step > 0.0
            && self.base_step.is_finite()
            && self.centripetal_gain >= 0.0
            && self.centripetal_gain.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid trajectory parameters {self:?}")))
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Fine-grained steps of the underlying walk; recorded points subsample it.
const WALK_STEPS: usize = 2000;
/// Length of the fine walk in its own units, which set the scale of the
/// centripetal pull.
const WALK_LENGTH: f64 = 60.0;

/// Random camera path starting at the origin; a pure function of `params`.
///
/// The walk itself always runs [`WALK_STEPS`] fine steps so its shape
/// statistics do not depend on `num_steps`; `num_steps` evenly spaced points
/// are kept and rescaled to `base_step` pixels apart (times a per-path speed
/// factor in `[0.6, 1]`).
pub fn sample_trajectory(params: &TrajectoryParams) -> Result<Trajectory> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let anxiety = params.max_anxiety * rng.random::<f64>();
    let shake = params.gaussian_shake * rng.random::<f64>();
    let centripetal = params.centripetal_gain * rng.random::<f64>();
    let jerk_prob = 0.2 * rng.random::<f64>();
    let speed = params.base_step * rng.random_range(0.6..=1.0);
    let angle = 2.0 * PI * rng.random::<f64>();
    if params.num_steps == 1 {
        return Trajectory::new(vec![(0.0, 0.0)]);
    }

    let step = WALK_LENGTH / (WALK_STEPS - 1) as f64;
    let mut v = (angle.cos() * step, angle.sin() * step);
    let mut p = (0.0, 0.0);
    let mut walk = Vec::with_capacity(WALK_STEPS);
    walk.push(p);
    for _ in 1..WALK_STEPS {
        let mut dv = (0.0, 0.0);
        if rng.random::<f64>() < jerk_prob * anxiety {
            // reverse with a random deflection of up to ±0.5 rad
            let turn = PI + rng.random::<f64>() - 0.5;
            let (s, c) = turn.sin_cos();
            dv = (2.0 * (v.0 * c - v.1 * s), 2.0 * (v.0 * s + v.1 * c));
        }
        let (n0, n1) = (normal(&mut rng), normal(&mut rng));
        dv.0 += anxiety * (shake * n0 - centripetal * p.0) * step;
        dv.1 += anxiety * (shake * n1 - centripetal * p.1) * step;
        let nv = (v.0 + dv.0, v.1 + dv.1);
        let norm = (nv.0 * nv.0 + nv.1 * nv.1).sqrt();
        if norm > 1e-300 {
            v = (nv.0 / norm * step, nv.1 / norm * step);
        }
        p = (p.0 + v.0, p.1 + v.1);
        walk.push(p);
    }

    let keep = params.num_steps;
    let scale = speed * (keep - 1) as f64 / WALK_LENGTH;
    let points = (0..keep)
        .map(|i| {
            let (x, y) = walk[(i * (WALK_STEPS - 1) + (keep - 1) / 2) / (keep - 1)];
            (x * scale, y * scale)
        })
        .collect();
    Trajectory::new(points)
}

/// Splats a trajectory onto an odd `size×size` grid.
///
/// The path is translated so its centroid sits on the center cell and shrunk
/// (never enlarged) until it stays off the outermost ring. Each point spreads
/// unit mass bilinearly over its four neighbouring cells.
pub fn rasterize_kernel(traj: &Trajectory, size: usize) -> Result<BlurKernel> {
    if size.is_multiple_of(2) || size < 3 {
        return Err(Error::contract(format!("kernel size must be odd and ≥ 3, got {size}")));
    }
    let n = traj.len() as f64;
    let (cx, cy) = traj
        .points()
        .iter()
        .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x / n, b + y / n));
    let center = (size / 2) as f64;
    let reach = traj
        .points()
        .iter()
        .map(|&(x, y)| (x - cx).abs().max((y - cy).abs()))
        .fold(0.0, f64::max);
    let room = center - 1.0;
    let scale = if reach > room { room / reach } else { 1.0 };

    let mut grid = Tensor::zeros(&[size, size]);
    let g = grid.data_mut();
    for &(x, y) in traj.points() {
        let col = (center + (x - cx) * scale).clamp(1.0, size as f64 - 2.0);
        let row = (center + (y - cy) * scale).clamp(1.0, size as f64 - 2.0);
        let (r0, c0) = (row.floor() as usize, col.floor() as usize);
        let (fr, fc) = (row - r0 as f64, col - c0 as f64);
        g[r0 * size + c0] += (1.0 - fr) * (1.0 - fc);
        if fc > 0.0 {
            g[r0 * size + c0 + 1] += (1.0 - fr) * fc;
        }
        if fr > 0.0 {
            g[(r0 + 1) * size + c0] += fr * (1.0 - fc);
            if fc > 0.0 {
                g[(r0 + 1) * size + c0 + 1] += fr * fc;
            }
        }
    }
    BlurKernel::normalized(grid)
}

/// `count` kernels; kernel `i` uses seed `params.seed + i`.
pub fn generate_dataset(count: usize, size: usize, params: &TrajectoryParams) -> Result<Vec<BlurKernel>> {
    if count == 0 {
        return Err(Error::contract("dataset count must be at least 1"));
    }
    (0..count as u64)
        .map(|i| {
            let p = TrajectoryParams {
                seed: params.seed.wrapping_add(i),
                ..*params
            };
            rasterize_kernel(&sample_trajectory(&p)?, size)
        })
        .collect()
}
