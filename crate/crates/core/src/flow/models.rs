//! Flow networks: a plain convolution stack and the same stack with its
//! third layer replaced by an LS-DFN block.

use std::fmt;
use std::str::FromStr;

use crate::conv::ConvParams;
use crate::error::{Error, Result};
use crate::layer::{LsDfnConfig, LsDfnParams};
use crate::model::{Layer, Sequential};
use crate::rng::Rng;

/// Width of the first convolution.
pub const STEM_WIDTH: usize = 16;
/// Largest allowed relative parameter-count gap between the two models.
pub const PARAM_MATCH_TOLERANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Baseline,
    Lsdfn,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Lsdfn => "lsdfn",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModelKind::Baseline),
            "lsdfn" => Ok(ModelKind::Lsdfn),
            _ => Err(Error::Config(format!("unknown model {s:?}"))),
        }
    }
}

/// Both variants are described by the same spec: the baseline's third
/// layer width is derived from the LS-DFN block so parameter counts match.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Width `C` of the second layer (LS-DFN block input).
    pub channels: usize,
    pub block: LsDfnConfig,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, block: LsDfnConfig) -> Self {
        ModelSpec {
            kind,
            channels: block.in_channels,
            block,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.block.in_channels != self.channels {
            return Err(Error::Config(format!(
                "block input channels {} differ from model width {}",
                self.block.in_channels, self.channels
            )));
        }
        Ok(())
    }

    fn stem_params(&self) -> usize {
        (2 * 9 * STEM_WIDTH + STEM_WIDTH) + (STEM_WIDTH * 9 * self.channels + self.channels)
    }

    /// Trainable parameters of the LS-DFN variant.
    pub fn lsdfn_param_count(&self) -> Result<usize> {
        let block = LsDfnParams::<f32>::zeros(&self.block)?.param_count();
        let head_in = self.channels + self.block.output_channels();
        Ok(self.stem_params() + block + head_in * 9 * 2 + 2)
    }

    fn baseline_count(&self, width: usize) -> usize {
        self.stem_params() + (self.channels * 9 * width + width) + (width * 9 * 2 + 2)
    }

    /// Third-layer width of the baseline closest in parameter count to the
    /// LS-DFN variant; fails if the gap exceeds 5%.
    pub fn baseline_width(&self) -> Result<usize> {
        let target = self.lsdfn_param_count()? as f64;
        let per_unit = (9 * self.channels + 1 + 18) as f64;
        let fixed = (self.stem_params() + 2) as f64;
        let guess = ((target - fixed) / per_unit).round().max(1.0) as usize;
        let best = [guess.saturating_sub(1).max(1), guess, guess + 1]
            .into_iter()
            .min_by(|&a, &b| {
                let da = (self.baseline_count(a) as f64 - target).abs();
                let db = (self.baseline_count(b) as f64 - target).abs();
                da.partial_cmp(&db).expect("finite")
            })
            .expect("three candidates");
        let got = self.baseline_count(best) as f64;
        if (got - target).abs() / got > PARAM_MATCH_TOLERANCE {
            return Err(Error::Config(format!(
                "cannot match parameter counts: baseline {got} vs lsdfn {target}"
            )));
        }
        Ok(best)
    }

    /// `(baseline, lsdfn)` trainable parameter counts.
    pub fn param_counts(&self) -> Result<(usize, usize)> {
        Ok((self.baseline_count(self.baseline_width()?), self.lsdfn_param_count()?))
    }
}

/// Build the network for `spec` with He-initialized convolutions and the
/// block's own initialization.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Sequential<f32>> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let c = spec.channels;
    let mut layers = vec![
        Layer::Conv(ConvParams::he(&mut rng, STEM_WIDTH, 2, 3)?),
        Layer::Relu,
        Layer::Conv(ConvParams::he(&mut rng, c, STEM_WIDTH, 3)?),
        Layer::Relu,
    ];
    let head_in = match spec.kind {
        ModelKind::Baseline => {
            let width = spec.baseline_width()?;
            layers.push(Layer::Conv(ConvParams::he(&mut rng, width, c, 3)?));
            width
        }
        ModelKind::Lsdfn => {
            layers.push(Layer::LsDfn {
                params: LsDfnParams::init(&spec.block, &mut rng)?,
                config: spec.block.clone(),
                skip_concat: true,
            });
            c + spec.block.output_channels()
        }
    };
    layers.push(Layer::Relu);
    layers.push(Layer::Conv(ConvParams::he(&mut rng, 2, head_in, 3)?));
    let model = Sequential::new(layers);
    model.output_channels(2)?;
    Ok(model)
}
