//! Raw numeric routines behind the differentiable ops.

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertions above cover every index reachable through
    // the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a strided, zero-padded 2D window sweep over a `c×h×w` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    #[inline]
    fn source(&self, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0).then_some(pos as usize)
    }
}

pub(crate) fn im2col(x: &[f64], g: &Window, col: &mut [f64]) {
    let cols = g.col_cols();
    debug_assert_eq!(x.len(), g.c * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * cols);
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.source(oy, ki).filter(|&iy| iy < g.h) {
                        None => out.fill(0.0),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, o) in out.iter_mut().enumerate() {
                                *o = match g.source(ox, kj) {
                                    Some(ix) if ix < g.w => src[ix],
                                    _ => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub(crate) fn col2im(col: &[f64], g: &Window, x: &mut [f64]) {
    let cols = g.col_cols();
    debug_assert_eq!(x.len(), g.c * g.h * g.w);
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let Some(iy) = g.source(oy, ki).filter(|&iy| iy < g.h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for (ox, &v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        if let Some(ix) = g.source(ox, kj).filter(|&ix| ix < g.w) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Single-channel correlation `out[i,j] = Σ x[i+a-off, j+b-off]·k[a,b]`,
/// zero outside `x`. `off = 0` is the valid sweep, `off = K-1` the full one.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate(
    x: &[f64],
    (h, w): (usize, usize),
    k: &[f64],
    (kh, kw): (usize, usize),
    (off_y, off_x): (usize, usize),
    out: &mut [f64],
    (oh, ow): (usize, usize),
) {
    for a in 0..kh {
        for b in 0..kw {
            let kv = k[a * kw + b];
            if kv == 0.0 {
                continue;
            }
            let (j0, j1) = overlap(ow, b, off_x, w);
            for i in 0..oh {
                let yi = (i + a) as isize - off_y as isize;
                if yi < 0 || yi as usize >= h {
                    continue;
                }
                let src = &x[yi as usize * w..];
                let dst = &mut out[i * ow..(i + 1) * ow];
                for j in j0..j1 {
                    dst[j] += kv * src[j + b - off_x];
                }
            }
        }
    }
}

/// Gradients of [`correlate`] with respect to `x` and `k`, accumulated.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate_backward(
    grad: &[f64],
    x: &[f64],
    (h, w): (usize, usize),
    k: &[f64],
    (kh, kw): (usize, usize),
    (off_y, off_x): (usize, usize),
    (oh, ow): (usize, usize),
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        for a in 0..kh {
            for b in 0..kw {
                let kv = k[a * kw + b];
                let (j0, j1) = overlap(ow, b, off_x, w);
                for i in 0..oh {
                    let yi = (i + a) as isize - off_y as isize;
                    if yi < 0 || yi as usize >= h {
                        continue;
                    }
                    let row = yi as usize * w;
                    let g = &grad[i * ow..(i + 1) * ow];
                    for j in j0..j1 {
                        dx[row + j + b - off_x] += kv * g[j];
                    }
                }
            }
        }
    }
    if let Some(dk) = dk {
        for a in 0..kh {
            for b in 0..kw {
                let (j0, j1) = overlap(ow, b, off_x, w);
                let mut acc = 0.0;
                for i in 0..oh {
                    let yi = (i + a) as isize - off_y as isize;
                    if yi < 0 || yi as usize >= h {
                        continue;
                    }
                    let src = &x[yi as usize * w..];
                    let g = &grad[i * ow..(i + 1) * ow];
                    for j in j0..j1 {
                        acc += g[j] * src[j + b - off_x];
                    }
                }
                dk[a * kw + b] += acc;
            }
        }
    }
}

/// Output columns `j` for which `j + b - off` lands inside `[0, w)`.
fn overlap(ow: usize, b: usize, off: usize, w: usize) -> (usize, usize) {
    let lo = off.saturating_sub(b);
    let hi = (w + off).saturating_sub(b).min(ow);
    (lo.min(hi), hi)
}

/// Interpolation taps for resizing one axis from `src` to `dst` samples
/// (half-pixel centers, edge clamped).
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}
