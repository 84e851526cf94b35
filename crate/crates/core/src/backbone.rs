//! Stateful convolutional-recurrent feature extractor.
//!
//! Each stage is a strided convolution, a SiLU, and a convolutional GRU whose
//! hidden state persists across frames. The last stage's hidden state is the
//! feature map handed to the heads.

use deoe_nncore::{Bound, Conv2d, ConvGru, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// `2 * T`.
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub recurrent_kernel: usize,
}

impl BackboneConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            widths: vec![16, 32, 64],
            strides: vec![4, 2, 2],
            recurrent_kernel: 3,
        }
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return invalid("backbone needs at least one input channel");
        }
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return invalid(format!(
                "backbone has {} widths but {} strides",
                self.widths.len(),
                self.strides.len()
            ));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return invalid("backbone widths and strides must be positive");
        }
        if self.recurrent_kernel % 2 == 0 {
            return invalid("recurrent kernel must be odd");
        }
        Ok(())
    }

    /// Feature-map size for an input of `height x width`.
    pub fn feature_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let s = self.total_stride();
        if height == 0 || width == 0 || height % s != 0 || width % s != 0 {
            return invalid(format!("input {height}x{width} is not divisible by the total stride {s}"));
        }
        Ok((height / s, width / s))
    }
}

/// Odd kernel that covers each stride window with overlap: 3 for strides up to
/// 2, `2s - 1` beyond.
pub fn stage_kernel(stride: usize) -> usize {
    if stride <= 2 {
        3
    } else {
        2 * stride - 1
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv2d,
    gru: ConvGru,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<Stage>,
}

/// Detached hidden state, one tensor per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<F> {
    pub hidden: Vec<Tensor<F>>,
    pub step: u64,
}

/// Hidden state living on a tape, so gradients can flow through it.
#[derive(Clone, Debug)]
pub struct LiveState {
    pub hidden: Vec<Var>,
    pub step: u64,
}

impl<F: Real> RecurrentState<F> {
    /// Puts the state on `tape` as constants: the rollout starts here.
    pub fn attach(&self, tape: &mut Tape<F>) -> LiveState {
        LiveState {
            hidden: self.hidden.iter().map(|h| tape.constant(h.clone())).collect(),
            step: self.step,
        }
    }
}

/// Copies the values out of the tape, cutting every gradient path.
pub fn detach_state<F: Real>(tape: &Tape<F>, state: &LiveState) -> RecurrentState<F> {
    RecurrentState {
        hidden: state.hidden.iter().map(|&h| tape.tensor(h)).collect(),
        step: state.step,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub features: Var,
    /// Relative to the backbone input.
    pub stride: usize,
}

impl Backbone {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, cfg: BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.widths.len());
        let mut in_c = cfg.in_channels;
        for (i, (&w, &s)) in cfg.widths.iter().zip(&cfg.strides).enumerate() {
            let conv = Conv2d::new(store, &format!("backbone.{i}.conv"), in_c, w, stage_kernel(s), s, rng)?;
            let gru = ConvGru::new(store, &format!("backbone.{i}.gru"), w, w, cfg.recurrent_kernel, rng)?;
            stages.push(Stage { conv, gru });
            in_c = w;
        }
        Ok(Self { cfg, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// All-zero hidden state for inputs of `height x width`.
    pub fn reset_state<F: Real>(&self, height: usize, width: usize) -> Result<RecurrentState<F>> {
        self.cfg.feature_size(height, width)?;
        let (mut h, mut w) = (height, width);
        let mut hidden = Vec::with_capacity(self.stages.len());
        for (&c, &s) in self.cfg.widths.iter().zip(&self.cfg.strides) {
            h /= s;
            w /= s;
            hidden.push(Tensor::zeros(&[c, h, w]));
        }
        Ok(RecurrentState { hidden, step: 0 })
    }

    /// One frame. `x` is `[in_channels, H, W]`.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        x: Var,
        state: &LiveState,
    ) -> Result<(FeatureMap, LiveState)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return invalid(format!(
                "backbone expects [{}, H, W] input, got {shape:?}",
                self.cfg.in_channels
            ));
        }
        self.cfg.feature_size(shape[1], shape[2])?;
        if state.hidden.len() != self.stages.len() {
            return invalid(format!(
                "state has {} hidden tensors for {} stages",
                state.hidden.len(),
                self.stages.len()
            ));
        }
        let mut cur = x;
        let mut hidden = Vec::with_capacity(self.stages.len());
        for (stage, &h) in self.stages.iter().zip(&state.hidden) {
            let y = stage.conv.forward(tape, p, cur)?;
            let y = tape.silu(y);
            cur = stage.gru.step(tape, p, y, h)?;
            hidden.push(cur);
        }
        Ok((
            FeatureMap {
                features: cur,
                stride: self.cfg.total_stride(),
            },
            LiveState {
                hidden,
                step: state.step + 1,
            },
        ))
    }
}
