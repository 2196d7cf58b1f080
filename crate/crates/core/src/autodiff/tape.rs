//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Tape::backward`] walks the
//! records in reverse, accumulating gradients only along nodes that depend on
//! a leaf created with `requires_grad = true`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernels::{self, Window};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            // log(1 + e^x) without overflow
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => sigmoid(x),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Border handling of the single-channel correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Only positions where the kernel lies fully inside the input.
    Valid,
    /// Every position where kernel and input overlap (zero padded).
    Full,
}

const NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    Act(Var, Activation),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Correlate {
        input: Var,
        kernel: Var,
        offset: (usize, usize),
    },
    Conv2d {
        input: Var,
        weight: Var,
        window: Window,
        batch: usize,
        cout: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        window: Window,
        batch: usize,
        cin: usize,
    },
    Softmax(Var),
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AvgPool(Var),
    Resize {
        input: Var,
        taps_y: Vec<(usize, usize, f64)>,
        taps_x: Vec<(usize, usize, f64)>,
    },
    Concat(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one gradient per recorded value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind on later calls.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Whether any gradient reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `a` as a new constant leaf: a stop-gradient.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = self.value(a).map(|v| kind.apply(v));
        self.push(out, Op::Act(a, kind), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.activation(a, Activation::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Softplus)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// `[n, i] × [i, o] → [n, o]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (n, i, o) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * o];
        kernels::gemm(n, i, o, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let out = Tensor::new(vec![n, o], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds `bias[c]` to every entry of channel `c` of `x: [n, c, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let c = sx[1];
        let inner: usize = sx[2..].iter().product();
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for (chunk_idx, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bv = b[chunk_idx % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Single-channel 2D correlation of `input: [h, w]` with `kernel: [kh, kw]`.
    /// The kernel is not flipped.
    pub fn conv2d(&mut self, input: Var, kernel: Var, mode: ConvMode) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 2 || sk.len() != 2 {
            return Err(Error::dim("conv2d", si, sk));
        }
        let (h, w, kh, kw) = (si[0], si[1], sk[0], sk[1]);
        let (offset, oh, ow) = match mode {
            ConvMode::Valid => {
                if kh > h || kw > w {
                    return Err(Error::dim("conv2d", si, sk));
                }
                ((0, 0), h - kh + 1, w - kw + 1)
            }
            ConvMode::Full => ((kh - 1, kw - 1), h + kh - 1, w + kw - 1),
        };
        let mut out = vec![0.0; oh * ow];
        kernels::correlate(
            self.value(input).data(),
            (h, w),
            self.value(kernel).data(),
            (kh, kw),
            offset,
            &mut out,
            (oh, ow),
        );
        let out = Tensor::new(vec![oh, ow], out)?;
        Ok(self.push(
            out,
            Op::Correlate {
                input,
                kernel,
                offset,
            },
            &[input, kernel],
        ))
    }

    /// Batched multi-channel correlation: `x: [n, cin, h, w]`,
    /// `weight: [cout, cin, kh, kw]`, zero padding on every side.
    pub fn conv2d_strided(&mut self, x: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(weight));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::dim("conv2d_strided", sx, sw));
        }
        let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim("conv2d_strided", sx, sw));
        }
        let window = Window {
            c: cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let (rows, cols) = (window.col_rows(), window.col_cols());
        let mut out = vec![0.0; n * cout * cols];
        let mut col = vec![0.0; if window.is_pointwise() { 0 } else { rows * cols }];
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        for b in 0..n {
            let xb = &xd[b * cin * h * w..(b + 1) * cin * h * w];
            let src = if window.is_pointwise() {
                xb
            } else {
                kernels::im2col(xb, &window, &mut col);
                &col
            };
            let dst = &mut out[b * cout * cols..(b + 1) * cout * cols];
            kernels::gemm(cout, rows, cols, wd, false, src, false, dst, 0.0);
        }
        let out = Tensor::new(vec![n, cout, window.oh, window.ow], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input: x,
                weight,
                window,
                batch: n,
                cout,
            },
            &[x, weight],
        ))
    }

    /// Transposed convolution: `x: [n, cin, h, w]`, `weight: [cin, cout, kh, kw]`,
    /// output side `(h - 1)·stride - 2·pad + kh`. Exact adjoint of
    /// [`Tape::conv2d_strided`] with the same weight, stride and padding.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(weight));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
            return Err(Error::dim("conv_transpose2d", sx, sw));
        }
        let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[1], sw[2], sw[3]);
        let oh = ((h - 1) * stride + kh) as isize - 2 * pad as isize;
        let ow = ((w - 1) * stride + kw) as isize - 2 * pad as isize;
        if oh < 1 || ow < 1 {
            return Err(Error::dim("conv_transpose2d", sx, sw));
        }
        // The window sweeps the output image and lands on input pixels.
        let window = Window {
            c: cout,
            h: oh as usize,
            w: ow as usize,
            kh,
            kw,
            stride,
            pad,
            oh: h,
            ow: w,
        };
        let (rows, cols) = (window.col_rows(), window.col_cols());
        let plane = window.c * window.h * window.w;
        let mut out = vec![0.0; n * plane];
        let mut col = vec![0.0; rows * cols];
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        for b in 0..n {
            let xb = &xd[b * cin * cols..(b + 1) * cin * cols];
            kernels::gemm(rows, cin, cols, wd, true, xb, false, &mut col, 0.0);
            kernels::col2im(&col, &window, &mut out[b * plane..(b + 1) * plane]);
        }
        let out = Tensor::new(vec![n, cout, window.h, window.w], out)?;
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input: x,
                weight,
                window,
                batch: n,
                cin,
            },
            &[x, weight],
        ))
    }

    /// Softmax over every entry of `a`; the result sums to one.
    pub fn softmax_flat(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let shape = self.shape(a).to_vec();
        let flat = self.reshape(a, &[1, n])?;
        let s = self.softmax_items(flat)?;
        self.reshape(s, &shape)
    }

    /// Softmax over all trailing entries of each leading index of `a`.
    pub fn softmax_items(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() == 0 {
            return Err(Error::dim("softmax_items", t.shape(), &[]));
        }
        let inner = t.numel() / t.shape()[0];
        let mut out = t.clone();
        for item in out.data_mut().chunks_mut(inner) {
            let max = item.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in item.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            item.iter_mut().for_each(|v| *v /= total);
        }
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Per-sample, per-channel normalization over the spatial axes of
    /// `x: [n, c, h, w]`, followed by a channel affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(Error::dim("instance_norm", sx, self.shape(gamma)));
        }
        let c = sx[1];
        let m = sx[2] * sx[3];
        let mut out = self.value(x).clone();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let groups = out.numel() / m;
        let mut means = Vec::with_capacity(groups);
        let mut inv_stds = Vec::with_capacity(groups);
        for (gi, plane) in out.data_mut().chunks_mut(m).enumerate() {
            let mean = plane.iter().sum::<f64>() / m as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv_std = 1.0 / (var + NORM_EPS).sqrt();
            let (gc, bc) = (g[gi % c], b[gi % c]);
            plane
                .iter_mut()
                .for_each(|v| *v = (*v - mean) * inv_std * gc + bc);
            means.push(mean);
            inv_stds.push(inv_std);
        }
        Ok(self.push(
            out,
            Op::InstanceNorm {
                input: x,
                gamma,
                beta,
                mean: means,
                inv_std: inv_stds,
            },
            &[x, gamma, beta],
        ))
    }

    /// `[n, c, h, w] → [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(Error::dim("global_avg_pool", sx, &[]));
        }
        let (n, c, m) = (sx[0], sx[1], sx[2] * sx[3]);
        let data = self
            .value(x)
            .data()
            .chunks(m)
            .map(|p| p.iter().sum::<f64>() / m as f64)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::AvgPool(x), &[x]))
    }

    /// Bilinear resampling of `x: [n, c, h, w]` to `[n, c, oh, ow]`.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || oh == 0 || ow == 0 {
            return Err(Error::dim("resize_bilinear", &sx, &[oh, ow]));
        }
        let (h, w) = (sx[2], sx[3]);
        let taps_y = kernels::bilinear_taps(h, oh);
        let taps_x = kernels::bilinear_taps(w, ow);
        let planes = sx[0] * sx[1];
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                    let top = s[y0 * w + x0] * (1.0 - fx) + s[y0 * w + x1] * fx;
                    let bot = s[y1 * w + x0] * (1.0 - fx) + s[y1 * w + x1] * fx;
                    d[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let out = Tensor::new(vec![sx[0], sx[1], oh, ow], out)?;
        Ok(self.push(
            out,
            Op::Resize {
                input: x,
                taps_y,
                taps_x,
            },
            &[x],
        ))
    }

    /// Concatenates `[n, c_i, h, w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 4 {
            return Err(Error::dim("concat_channels", &s0, &[]));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::dim("concat_channels", &s0, s));
            }
            channels += s[1];
        }
        let (n, m) = (s0[0], s0[2] * s0[3]);
        let mut data = Vec::with_capacity(n * channels * m);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let per = t.shape()[1] * m;
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let out = Tensor::new(vec![n, channels, s0[2], s0[3]], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Runs `f` on the gradient buffer of `v`, creating it on first use.
    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |d| {
                    for ((x, &y), &o) in d.iter_mut().zip(gd).zip(bv) {
                        *x += y * o;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((x, &y), &o) in d.iter_mut().zip(gd).zip(av) {
                        *x += y * o;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += c * y));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.acc(grads, *a, |d| add_into(d, gd));
            }
            Op::Abs(a) => {
                let av = val(*a);
                self.acc(grads, *a, |d| {
                    for ((x, &y), &v) in d.iter_mut().zip(gd).zip(av) {
                        // subgradient 0 at the kink
                        if v > 0.0 {
                            *x += y;
                        } else if v < 0.0 {
                            *x -= y;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let av = val(*a);
                self.acc(grads, *a, |d| {
                    for ((x, &y), &v) in d.iter_mut().zip(gd).zip(av) {
                        *x += 2.0 * v * y;
                    }
                });
            }
            Op::Act(a, kind) => {
                let (xv, yv) = (val(*a), node.value.data());
                self.acc(grads, *a, |d| {
                    for (i, x) in d.iter_mut().enumerate() {
                        *x += gd[i] * kind.derivative(xv[i], yv[i]);
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.acc(grads, *a, |d| d.iter_mut().for_each(|x| *x += s));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                let s = gd[0] / n;
                self.acc(grads, *a, |d| d.iter_mut().for_each(|x| *x += s));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, i, o) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |d| kernels::gemm(n, o, i, gd, false, bv, true, d, 1.0));
                self.acc(grads, *b, |d| kernels::gemm(i, n, o, av, true, gd, false, d, 1.0));
            }
            Op::AddBias(x, bias) => {
                self.acc(grads, *x, |d| add_into(d, gd));
                let sx = self.shape(*x);
                let (c, inner) = (sx[1], sx[2..].iter().product::<usize>());
                self.acc(grads, *bias, |d| {
                    for (ci, chunk) in gd.chunks(inner).enumerate() {
                        d[ci % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Correlate {
                input,
                kernel,
                offset,
            } => {
                let (si, sk) = (self.shape(*input), self.shape(*kernel));
                let so = node.value.shape();
                let mut dx = self.nodes[input.0]
                    .requires_grad
                    .then(|| vec![0.0; si[0] * si[1]]);
                let mut dk = self.nodes[kernel.0]
                    .requires_grad
                    .then(|| vec![0.0; sk[0] * sk[1]]);
                kernels::correlate_backward(
                    gd,
                    val(*input),
                    (si[0], si[1]),
                    val(*kernel),
                    (sk[0], sk[1]),
                    *offset,
                    (so[0], so[1]),
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *input, |d| add_into(d, &dx));
                }
                if let Some(dk) = dk {
                    self.acc(grads, *kernel, |d| add_into(d, &dk));
                }
            }
            Op::Conv2d {
                input,
                weight,
                window,
                batch,
                cout,
            } => {
                let (rows, cols) = (window.col_rows(), window.col_cols());
                let plane = window.c * window.h * window.w;
                let (xv, wv) = (val(*input), val(*weight));
                let pointwise = window.is_pointwise();
                let mut col = vec![0.0; rows * cols];
                if self.nodes[weight.0].requires_grad {
                    self.acc(grads, *weight, |d| {
                        for b in 0..*batch {
                            let xb = &xv[b * plane..(b + 1) * plane];
                            let src = if pointwise {
                                xb
                            } else {
                                kernels::im2col(xb, window, &mut col);
                                &col
                            };
                            let gb = &gd[b * cout * cols..(b + 1) * cout * cols];
                            kernels::gemm(*cout, cols, rows, gb, false, src, true, d, 1.0);
                        }
                    });
                }
                self.acc(grads, *input, |d| {
                    for b in 0..*batch {
                        let gb = &gd[b * cout * cols..(b + 1) * cout * cols];
                        let db = &mut d[b * plane..(b + 1) * plane];
                        if pointwise {
                            kernels::gemm(rows, *cout, cols, wv, true, gb, false, db, 1.0);
                        } else {
                            kernels::gemm(rows, *cout, cols, wv, true, gb, false, &mut col, 0.0);
                            kernels::col2im(&col, window, db);
                        }
                    }
                });
            }
            Op::ConvTranspose2d {
                input,
                weight,
                window,
                batch,
                cin,
            } => {
                let (rows, cols) = (window.col_rows(), window.col_cols());
                let plane = window.c * window.h * window.w;
                let (xv, wv) = (val(*input), val(*weight));
                let mut col = vec![0.0; rows * cols];
                let need_x = self.nodes[input.0].requires_grad;
                let need_w = self.nodes[weight.0].requires_grad;
                let mut dw = need_w.then(|| vec![0.0; wv.len()]);
                let mut dx = need_x.then(|| vec![0.0; xv.len()]);
                for b in 0..*batch {
                    kernels::im2col(&gd[b * plane..(b + 1) * plane], window, &mut col);
                    if let Some(dx) = dx.as_deref_mut() {
                        let db = &mut dx[b * cin * cols..(b + 1) * cin * cols];
                        kernels::gemm(*cin, rows, cols, wv, false, &col, false, db, 1.0);
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        let xb = &xv[b * cin * cols..(b + 1) * cin * cols];
                        kernels::gemm(*cin, cols, rows, xb, false, &col, true, dw, 1.0);
                    }
                }
                if let Some(dx) = dx {
                    self.acc(grads, *input, |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    self.acc(grads, *weight, |d| add_into(d, &dw));
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let inner = y.len() / node.value.shape()[0];
                self.acc(grads, *a, |d| {
                    for ((dc, gc), yc) in d.chunks_mut(inner).zip(gd.chunks(inner)).zip(y.chunks(inner)) {
                        let s: f64 = gc.iter().zip(yc).map(|(g, y)| g * y).sum();
                        for i in 0..inner {
                            dc[i] += yc[i] * (gc[i] - s);
                        }
                    }
                });
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let sx = self.shape(*input);
                let (c, m) = (sx[1], sx[2] * sx[3]);
                let xv = val(*input);
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; xv.len()];
                for gi in 0..mean.len() {
                    let ch = gi % c;
                    let xs = &xv[gi * m..(gi + 1) * m];
                    let gs = &gd[gi * m..(gi + 1) * m];
                    let (mu, is) = (mean[gi], inv_std[gi]);
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for (&xv, &gv) in xs.iter().zip(gs) {
                        let xhat = (xv - mu) * is;
                        sum_g += gv;
                        sum_gx += gv * xhat;
                    }
                    dbeta[ch] += sum_g;
                    dgamma[ch] += sum_gx;
                    let k = gam[ch] * is / m as f64;
                    for ((d, &xv), &gv) in dx[gi * m..(gi + 1) * m].iter_mut().zip(xs).zip(gs) {
                        let xhat = (xv - mu) * is;
                        *d = k * (m as f64 * gv - sum_g - xhat * sum_gx);
                    }
                }
                self.acc(grads, *input, |d| add_into(d, &dx));
                self.acc(grads, *gamma, |d| add_into(d, &dgamma));
                self.acc(grads, *beta, |d| add_into(d, &dbeta));
            }
            Op::AvgPool(x) => {
                let sx = self.shape(*x);
                let m = sx[2] * sx[3];
                self.acc(grads, *x, |d| {
                    for (chunk, &gv) in d.chunks_mut(m).zip(gd) {
                        let s = gv / m as f64;
                        chunk.iter_mut().for_each(|v| *v += s);
                    }
                });
            }
            Op::Resize {
                input,
                taps_y,
                taps_x,
            } => {
                let sx = self.shape(*input);
                let (h, w) = (sx[2], sx[3]);
                let (oh, ow) = (taps_y.len(), taps_x.len());
                self.acc(grads, *input, |d| {
                    for (p, gp) in gd.chunks(oh * ow).enumerate() {
                        let dp = &mut d[p * h * w..(p + 1) * h * w];
                        for (oy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                                let gv = gp[oy * ow + ox];
                                dp[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                dp[y0 * w + x1] += gv * (1.0 - fy) * fx;
                                dp[y1 * w + x0] += gv * fy * (1.0 - fx);
                                dp[y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let so = node.value.shape();
                let (n, m) = (so[0], so[2] * so[3]);
                let total = so[1] * m;
                let mut start = 0;
                for &p in parts {
                    let per = self.shape(p)[1] * m;
                    self.acc(grads, p, |d| {
                        for b in 0..n {
                            add_into(
                                &mut d[b * per..(b + 1) * per],
                                &gd[b * total + start..b * total + start + per],
                            );
                        }
                    });
                    start += per;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
