//! Small configurable convolutional feature extractor.
//!
//! Each stage is a run of 3x3 conv + relu blocks followed by a stride-2 max
//! pool, so stage `s` emits extents `input_size / 2^s`. Selected stages are
//! tapped as mid-level maps; the last stage is the top-level map.

use crate::attention::FeatureMap;
use crate::error::{ClanError, Result};
use crate::init::ParamInit;
use crate::tensor::{Element, PoolMode, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Output channels per stage.
    pub stage_channels: Vec<usize>,
    /// conv-relu blocks per stage.
    pub stage_blocks: Vec<usize>,
    /// Square input extent.
    pub input_size: usize,
    /// Which stage outputs (1-based) become mid-level maps, ascending.
    pub tap_stages: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![12, 24, 48],
            stage_blocks: vec![1, 1, 2],
            input_size: 32,
            tap_stages: vec![2],
        }
    }
}

impl BackboneConfig {
    pub fn top_stage(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_channels.len();
        if stages == 0 {
            return Err(ClanError::config("backbone", "at least one stage required"));
        }
        if self.stage_blocks.len() != stages {
            return Err(ClanError::config(
                "backbone",
                format!(
                    "{} block counts for {} stages",
                    self.stage_blocks.len(),
                    stages
                ),
            ));
        }
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return Err(ClanError::config("backbone", "every stage needs >= 1 block"));
        }
        if self.input_size % (1 << stages) != 0 {
            return Err(ClanError::config(
                "backbone",
                format!(
                    "input size {} is not divisible through {} stride-2 stages",
                    self.input_size, stages
                ),
            ));
        }
        if self.tap_stages.is_empty() {
            return Err(ClanError::config("backbone", "at least one tap stage required"));
        }
        for pair in self.tap_stages.windows(2) {
            if pair[0] >= pair[1] {
                return Err(ClanError::config(
                    "backbone",
                    "tap stages must be strictly ascending",
                ));
            }
        }
        if self.tap_stages[0] == 0 || *self.tap_stages.last().unwrap() >= self.top_stage() {
            return Err(ClanError::config(
                "backbone",
                format!(
                    "tap stages {:?} must lie in 1..{}",
                    self.tap_stages,
                    self.top_stage()
                ),
            ));
        }
        Ok(())
    }

    /// Spatial extent of a stage's output map.
    pub fn stage_extent(&self, stage: usize) -> usize {
        self.input_size >> stage
    }

    /// Channels of a stage's output map.
    pub fn stage_channels_of(&self, stage: usize) -> usize {
        self.stage_channels[stage - 1]
    }
}

/// One 3x3 convolution with bias.
pub struct ConvLayer<E: Element> {
    pub kernel: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> ConvLayer<E> {
    pub fn new(name: &str, c_in: usize, c_out: usize, init: &ParamInit) -> Result<Self> {
        let fan_in = c_in * 9;
        Ok(ConvLayer {
            kernel: init.uniform_fan_in_relu(&format!("{name}.kernel"), &[c_out, c_in, 3, 3], fan_in)?,
            bias: Tensor::param(&[c_out], vec![E::zero(); c_out])?,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel.numel() + self.bias.numel()
    }
}

pub struct BackboneWeights<E: Element> {
    /// stages[s][block]
    pub stages: Vec<Vec<ConvLayer<E>>>,
}

impl<E: Element> BackboneWeights<E> {
    pub fn new(cfg: &BackboneConfig, init: &ParamInit) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (s, (&c_out, &blocks)) in cfg
            .stage_channels
            .iter()
            .zip(&cfg.stage_blocks)
            .enumerate()
        {
            let mut layers = Vec::new();
            for b in 0..blocks {
                let name = format!("backbone.stage{}.block{}", s + 1, b);
                layers.push(ConvLayer::new(&name, c_in, c_out, init)?);
                c_in = c_out;
            }
            stages.push(layers);
        }
        Ok(BackboneWeights { stages })
    }

    pub fn state_tensors(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        for (s, layers) in self.stages.iter().enumerate() {
            for (b, layer) in layers.iter().enumerate() {
                out.push((
                    format!("backbone.stage{}.block{}.kernel", s + 1, b),
                    layer.kernel.clone(),
                ));
                out.push((
                    format!("backbone.stage{}.block{}.bias", s + 1, b),
                    layer.bias.clone(),
                ));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|layers| layers.iter())
            .map(|l| l.parameter_count())
            .sum()
    }
}

/// Run the backbone: returns the tapped mid-level maps in ascending stage
/// order followed by the top-level map.
pub fn backbone_forward<E: Element>(
    x: &Tensor<E>,
    cfg: &BackboneConfig,
    weights: &BackboneWeights<E>,
) -> Result<Vec<FeatureMap<E>>> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(ClanError::dimension(
            "backbone_forward",
            format!("expected [b, 3, h, w], got {:?}", shape),
        ));
    }
    if shape[2] != cfg.input_size || shape[3] != cfg.input_size {
        return Err(ClanError::dimension(
            "backbone_forward",
            format!(
                "input extents {}x{} do not match configured size {}",
                shape[2], shape[3], cfg.input_size
            ),
        ));
    }
    cfg.validate()?;
    let mut maps = Vec::new();
    let mut cur = x.clone();
    for (s, layers) in weights.stages.iter().enumerate() {
        for layer in layers {
            cur = cur.conv2d(&layer.kernel, &layer.bias, 1, 1)?.relu();
        }
        cur = cur.pool2d(PoolMode::Max, 2, 2)?;
        let stage = s + 1;
        if cfg.tap_stages.contains(&stage) || stage == cfg.top_stage() {
            maps.push(FeatureMap::new(cur.clone(), stage)?);
        }
    }
    Ok(maps)
}
