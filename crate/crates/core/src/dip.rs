//! Deep-image-prior network: an encoder-decoder with skip branches, driven
//! by a fixed noise tensor and ending in a sigmoid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{add_conv, conv};
use crate::params::{Bound, NamedTensorSet};
use crate::tensor::Tensor;

const SLOPE: f64 = 0.2;
const INPUT_MAX: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DipConfig {
    pub input_channels: usize,
    /// Encoder widths, one per scale.
    pub down: Vec<usize>,
    /// Decoder widths, one per scale.
    pub up: Vec<usize>,
    /// Skip-branch widths, one per scale (0 disables a branch).
    pub skip: Vec<usize>,
    pub output_channels: usize,
}

impl Default for DipConfig {
    fn default() -> Self {
        Self {
            input_channels: 8,
            down: vec![32, 64, 64, 64],
            up: vec![32, 64, 64, 64],
            skip: vec![4, 4, 4, 4],
            output_channels: 1,
        }
    }
}

impl DipConfig {
    /// Same topology with every width divided by `factor` (skips kept).
    pub fn narrowed(factor: usize) -> Self {
        let d = Self::default();
        let f = |v: &Vec<usize>| v.iter().map(|c| (c / factor).max(1)).collect();
        Self {
            down: f(&d.down),
            up: f(&d.up),
            ..d
        }
    }

    pub fn scales(&self) -> usize {
        self.down.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.down.len();
        if n == 0 || self.up.len() != n || self.skip.len() != n {
            return Err(Error::contract("DIP width lists must be non-empty and equally long"));
        }
        if self.input_channels == 0
            || self.output_channels == 0
            || self.down.iter().chain(&self.up).any(|&c| c == 0)
        {
            return Err(Error::contract("DIP widths must be positive"));
        }
        Ok(())
    }
}

/// Fixed network input `z_x`, shape `[c_in, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DipInput {
    pub noise: Tensor,
    pub seed: u64,
}

/// Uniform noise in `[0, 0.1]` of the given `[c_in, H, W]` shape.
pub fn sample_dip_input(shape: [usize; 3], seed: u64) -> Result<DipInput> {
    if shape.contains(&0) {
        return Err(Error::contract(format!("DIP input shape {shape:?} has a zero dimension")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(DipInput {
        noise: Tensor::uniform(&shape, 0.0, INPUT_MAX, &mut rng),
        seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DipNet {
    config: DipConfig,
    params: NamedTensorSet,
}

impl DipNet {
    pub fn new<R: Rng + ?Sized>(config: DipConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = NamedTensorSet::new();
        let mut cin = config.input_channels;
        for i in 0..config.scales() {
            let (d, s) = (config.down[i], config.skip[i]);
            if s > 0 {
                add_conv(&mut p, &format!("skip{i}"), cin, s, 1, true, rng)?;
            }
            add_conv(&mut p, &format!("down{i}a"), cin, d, 3, true, rng)?;
            add_conv(&mut p, &format!("down{i}b"), d, d, 3, true, rng)?;
            cin = d;
        }
        for i in (0..config.scales()).rev() {
            let deeper = if i + 1 == config.scales() {
                config.down[i]
            } else {
                config.up[i + 1]
            };
            let u = config.up[i];
            add_conv(&mut p, &format!("up{i}a"), config.skip[i] + deeper, u, 3, true, rng)?;
            add_conv(&mut p, &format!("up{i}b"), u, u, 1, true, rng)?;
        }
        add_conv(&mut p, "head", config.up[0], config.output_channels, 1, false, rng)?;
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &DipConfig {
        &self.config
    }

    pub fn params(&self) -> &NamedTensorSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NamedTensorSet {
        &mut self.params
    }

    /// `[1, c_in, H, W] → [1, c_out, H, W]`, values in (0, 1).
    pub fn forward(&self, tape: &mut Tape, b: &Bound, input: Var) -> Result<Var> {
        let s = tape.shape(input);
        let c = &self.config;
        if s.len() != 4 || s[1] != c.input_channels {
            return Err(Error::dim("dip_forward", s, &[1, c.input_channels]));
        }
        let h = self.scale(tape, b, input, 0)?;
        let h = conv(tape, b, "head", h, 1, false)?;
        Ok(tape.sigmoid(h))
    }

    fn scale(&self, tape: &mut Tape, b: &Bound, x: Var, i: usize) -> Result<Var> {
        let (h, w) = (tape.shape(x)[2], tape.shape(x)[3]);
        let skip = if self.config.skip[i] > 0 {
            let s = conv(tape, b, &format!("skip{i}"), x, 1, true)?;
            Some(tape.leaky_relu(s, SLOPE))
        } else {
            None
        };
        let d = conv(tape, b, &format!("down{i}a"), x, 2, true)?;
        let d = tape.leaky_relu(d, SLOPE);
        let d = conv(tape, b, &format!("down{i}b"), d, 1, true)?;
        let mut d = tape.leaky_relu(d, SLOPE);
        if i + 1 < self.config.scales() {
            d = self.scale(tape, b, d, i + 1)?;
        }
        let up = tape.resize_bilinear(d, h, w)?;
        let cat = match skip {
            Some(s) => tape.concat_channels(&[s, up])?,
            None => up,
        };
        let u = conv(tape, b, &format!("up{i}a"), cat, 1, true)?;
        let u = tape.leaky_relu(u, SLOPE);
        let u = conv(tape, b, &format!("up{i}b"), u, 1, true)?;
        Ok(tape.leaky_relu(u, SLOPE))
    }

    /// Output for a fixed input, shape `[c_out, H, W]` (or `[H, W]` when
    /// `c_out == 1`).
    pub fn output(&self, input: &DipInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(batch_input(&input.noise)?);
        let y = self.forward(&mut tape, &b, x)?;
        image_shape(tape.value(y).clone())
    }
}

/// Adds a leading batch axis to `[c, H, W]`.
pub(crate) fn batch_input(noise: &Tensor) -> Result<Tensor> {
    let s = noise.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::dim("dip_forward", &s, &[0, 0, 0]));
    }
    noise.clone().reshape(&[1, s[0], s[1], s[2]])
}

/// Drops the batch axis and, for single-channel output, the channel axis.
pub(crate) fn image_shape(y: Tensor) -> Result<Tensor> {
    let s = y.shape().to_vec();
    if s[1] == 1 {
        y.reshape(&[s[2], s[3]])
    } else {
        y.reshape(&s[1..])
    }
}
