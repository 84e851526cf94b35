use rand::Rng;

use crate::error::Result;
use crate::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Registers `<name>.weight` / `<name>.bias`; padding is `kernel / 2`.
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// Convolutional gated recurrent cell:
///
/// ```text
/// z  = sigmoid(Wz * [x, h])      r = sigmoid(Wr * [x, h])
/// h~ = tanh(Wh * [x, r . h])     h' = (1 - z) . h + z . h~
/// ```
///
/// `Wz` and `Wr` share one convolution producing `2 * hidden` channels.
#[derive(Clone, Debug)]
pub struct ConvGru {
    pub gates: Conv2d,
    pub candidate: Conv2d,
    pub hidden: usize,
}

impl ConvGru {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let gates = Conv2d::new(store, &format!("{name}.gates"), input + hidden, 2 * hidden, kernel, 1, rng)?;
        let candidate = Conv2d::new(store, &format!("{name}.candidate"), input + hidden, hidden, kernel, 1, rng)?;
        Ok(Self {
            gates,
            candidate,
            hidden,
        })
    }

    pub fn step<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let xh = tape.concat(&[x, h])?;
        let g = self.gates.forward(tape, p, xh)?;
        let zr = tape.sigmoid(g);
        let z = tape.slice(zr, 0, self.hidden)?;
        let r = tape.slice(zr, self.hidden, self.hidden)?;
        let rh = tape.mul(r, h)?;
        let xrh = tape.concat(&[x, rh])?;
        let c = self.candidate.forward(tape, p, xrh)?;
        let cand = tape.tanh(c);
        let delta = tape.sub(cand, h)?;
        let step = tape.mul(z, delta)?;
        tape.add(h, step)
    }
}
