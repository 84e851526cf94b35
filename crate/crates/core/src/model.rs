//! The full detector: input transform, recurrent backbone and heads.

use deoe_nncore::{Bound, ParamStore, Real, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, LiveState, RecurrentState};
use crate::encode::{downsample2x, EventTensor};
use crate::error::{invalid, DeoeError, Result};
use crate::heads::{HeadLayout, HeadVars, Heads, HeadsConfig, PriorGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Temporal bins per polarity.
    pub t_bins: usize,
    pub sensor_height: usize,
    pub sensor_width: usize,
    /// 2x sum pooling of the event tensor before the backbone.
    pub downsample: bool,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub recurrent_kernel: usize,
    pub head_channels: usize,
    pub dropout: f64,
    pub layout: HeadLayout,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            t_bins: 5,
            sensor_height: 128,
            sensor_width: 128,
            downsample: false,
            widths: vec![16, 32, 64],
            strides: vec![4, 2, 2],
            recurrent_kernel: 3,
            head_channels: 32,
            dropout: 0.1,
            layout: HeadLayout::FULL,
        }
    }
}

impl DetectorConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: 2 * self.t_bins,
            widths: self.widths.clone(),
            strides: self.strides.clone(),
            recurrent_kernel: self.recurrent_kernel,
        }
    }

    /// Backbone input size.
    pub fn input_size(&self) -> Result<(usize, usize)> {
        if self.downsample {
            if self.sensor_height % 2 != 0 || self.sensor_width % 2 != 0 {
                return invalid("downsampling needs even sensor dimensions");
            }
            Ok((self.sensor_height / 2, self.sensor_width / 2))
        } else {
            Ok((self.sensor_height, self.sensor_width))
        }
    }

    /// Prior grid in sensor pixels.
    pub fn grid(&self) -> Result<PriorGrid> {
        let (h, w) = self.input_size()?;
        let (rows, cols) = self.backbone().feature_size(h, w)?;
        let factor = if self.downsample { 2 } else { 1 };
        Ok(PriorGrid::new(rows, cols, (self.backbone().total_stride() * factor) as f64))
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_bins == 0 {
            return invalid("t_bins must be at least 1");
        }
        if self.head_channels == 0 {
            return invalid("head_channels must be positive");
        }
        self.backbone().validate()?;
        self.grid().map(|_| ())
    }
}

#[derive(Clone, Debug)]
pub struct Detector<F> {
    cfg: DetectorConfig,
    params: ParamStore<F>,
    backbone: Backbone,
    heads: Heads,
}

fn build<F: Real>(cfg: &DetectorConfig, rng: &mut ChaCha8Rng) -> Result<(ParamStore<F>, Backbone, Heads)> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    let backbone = Backbone::new(&mut params, cfg.backbone(), rng)?;
    let heads = Heads::new(
        &mut params,
        HeadsConfig {
            in_channels: cfg.backbone().out_channels(),
            channels: cfg.head_channels,
            dropout: cfg.dropout,
            layout: cfg.layout,
        },
        rng,
    )?;
    Ok((params, backbone, heads))
}

impl<F: Real> Detector<F> {
    /// Fresh initialisation; the same seed gives the same values at every precision
    /// (up to rounding).
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, backbone, heads) = build(&cfg, &mut rng)?;
        Ok(Self { cfg, params, backbone, heads })
    }

    /// Rebuilds the architecture for `cfg` and loads named parameters into it.
    pub fn from_params(cfg: DetectorConfig, params: &ParamStore<F>) -> Result<Self> {
        let mut me = Self::new(cfg, 0)?;
        if me.params.len() != params.len() {
            return invalid(format!(
                "checkpoint has {} parameters, architecture expects {}",
                params.len(),
                me.params.len()
            ));
        }
        let mut values = Vec::with_capacity(params.len());
        for (name, t) in me.params.iter() {
            let id = params
                .find(name)
                .ok_or_else(|| DeoeError::Invalid(format!("checkpoint lacks parameter `{name}`")))?;
            let src = params.get(id);
            if src.shape() != t.shape() {
                return invalid(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                ));
            }
            values.push(src.clone());
        }
        me.params.assign(&values)?;
        Ok(me)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn grid(&self) -> PriorGrid {
        self.cfg.grid().expect("validated at construction")
    }

    pub fn cast<G: Real>(&self) -> Detector<G> {
        Detector {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn reset_state(&self) -> RecurrentState<F> {
        let (h, w) = self.cfg.input_size().expect("validated at construction");
        self.backbone.reset_state(h, w).expect("validated at construction")
    }

    /// Backbone input for one frame: optional 2x pooling, then `ln(1 + count)`.
    pub fn prepare_input(&self, t: &EventTensor) -> Result<Tensor<F>> {
        if t.t_bins != self.cfg.t_bins || t.height != self.cfg.sensor_height || t.width != self.cfg.sensor_width {
            return invalid(format!(
                "event tensor {:?} does not match the detector input (2*{}, {}, {})",
                t.shape(),
                self.cfg.t_bins,
                self.cfg.sensor_height,
                self.cfg.sensor_width
            ));
        }
        let pooled;
        let src = if self.cfg.downsample {
            pooled = downsample2x(t)?;
            &pooled
        } else {
            t
        };
        let data = src.data().iter().map(|&c| F::lit((c as f64).ln_1p())).collect();
        Ok(Tensor::new(&src.shape(), data)?)
    }

    /// One frame through backbone and heads.
    pub fn step<R: Rng>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        input: Tensor<F>,
        state: &LiveState,
        training: bool,
        rng: &mut R,
    ) -> Result<(HeadVars, LiveState)> {
        let x = tape.constant(input);
        let (fm, next) = self.backbone.forward(tape, p, x, state)?;
        let stride = self.grid().stride;
        let vars = self.heads.forward(tape, p, fm.features, stride, training, rng)?;
        Ok((vars, next))
    }
}
