//! Procedural grayscale test scenes: a shaded background overlaid with
//! anti-aliased polygons, ellipses and bars.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SUBSAMPLES: usize = 3;

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, cos: f64, sin: f64 },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse { cy, cx, ry, rx, cos, sin } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(pts) => {
                // even-odd rule
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let (yi, xi) = pts[i];
                    let (yj, xj) = pts[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

fn random_shape<R: Rng>(h: f64, w: f64, rng: &mut R) -> Shape {
    let cy = rng.random_range(0.0..h);
    let cx = rng.random_range(0.0..w);
    let scale = h.min(w);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    match rng.random_range(0..4) {
        0 => Shape::Ellipse {
            cy,
            cx,
            ry: rng.random_range(0.05..0.3) * scale,
            rx: rng.random_range(0.05..0.3) * scale,
            cos: angle.cos(),
            sin: angle.sin(),
        },
        1 => {
            // long thin bar
            let (len, half) = (rng.random_range(0.3..1.0) * scale, rng.random_range(0.02..0.06) * scale);
            let (c, s) = (angle.cos(), angle.sin());
            let corners = [(-len, -half), (len, -half), (len, half), (-len, half)];
            Shape::Polygon(corners.iter().map(|&(u, v)| (cy + u * s + v * c, cx + u * c - v * s)).collect())
        }
        _ => {
            let n = rng.random_range(3..7);
            let r = rng.random_range(0.08..0.3) * scale;
            let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            angles.sort_by(f64::total_cmp);
            Shape::Polygon(
                angles
                    .iter()
                    .map(|a| {
                        let rr = r * rng.random_range(0.5..1.0);
                        (cy + rr * a.sin(), cx + rr * a.cos())
                    })
                    .collect(),
            )
        }
    }
}

/// One `h × w` scene with values in `[0, 1]`.
pub fn scene(h: usize, w: usize, seed: u64) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::contract("scene size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b): (f64, f64) = (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (gy, gx) = (theta.sin() / h as f64, theta.cos() / w as f64);
    let mut img = Tensor::from_fn(&[h, w], |p| {
        let t = ((p / w) as f64 * gy + (p % w) as f64 * gx + 1.0) / 2.0;
        a + (b - a) * t.clamp(0.0, 1.0)
    });
    let count = rng.random_range(5..12);
    for _ in 0..count {
        let shape = random_shape(h as f64, w as f64, &mut rng);
        let level: f64 = rng.random_range(0.05..0.95);
        for i in 0..h {
            for j in 0..w {
                let mut hits = 0;
                for u in 0..SUBSAMPLES {
                    for v in 0..SUBSAMPLES {
                        let y = i as f64 + (u as f64 + 0.5) / SUBSAMPLES as f64;
                        let x = j as f64 + (v as f64 + 0.5) / SUBSAMPLES as f64;
                        hits += shape.contains(y, x) as usize;
                    }
                }
                if hits > 0 {
                    let alpha = hits as f64 / (SUBSAMPLES * SUBSAMPLES) as f64;
                    let old = img.at(&[i, j]);
                    img.set(&[i, j], old + alpha * (level - old));
                }
            }
        }
    }
    Ok(img)
}

/// `count` scenes seeded `seed, seed + 1, ...`.
pub fn scene_dataset(count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<Tensor>> {
    (0..count as u64).map(|i| scene(h, w, seed.wrapping_add(i))).collect()
}
