//! Four-stage convolutional feature extractor.
//!
//! Each stage is `conv3x3 (pad 1) → bias → relu → maxpool2`. The spatial
//! mean (GAP) of every stage output is one layer of the item representation,
//! so a 32×32 input yields feature vectors taken at sides 16, 8, 4 and 2.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{seeded_rng, Param};
use crate::tensor::{Graph, Tensor};

/// Number of feature layers.
pub const NUM_LAYERS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channels: [usize; NUM_LAYERS],
    pub input_side: usize,
    pub input_channels: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: [16, 32, 64, 128],
            input_side: 32,
            input_channels: 3,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_side == 0 || !self.input_side.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "input_side must be a positive multiple of 16, got {}",
                self.input_side
            )));
        }
        if self.input_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("channel counts must be at least 1".into()));
        }
        Ok(())
    }

    fn in_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            self.input_channels
        } else {
            self.stage_channels[stage - 1]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub kernels: Vec<Param>,
    pub biases: Vec<Param>,
}

/// Glorot-uniform kernels, zero biases, deterministic in `cfg.seed`.
pub fn init_backbone(cfg: &BackboneConfig) -> Result<BackboneParams> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed, 0xb0);
    let mut kernels = Vec::with_capacity(NUM_LAYERS);
    let mut biases = Vec::with_capacity(NUM_LAYERS);
    for stage in 0..NUM_LAYERS {
        let (cin, cout) = (cfg.in_channels(stage), cfg.stage_channels[stage]);
        kernels.push(Param::glorot(&[cout, cin, 3, 3], cin * 9, cout * 9, &mut rng));
        biases.push(Param::zeros(&[cout]));
    }
    Ok(BackboneParams { kernels, biases })
}

/// Backbone parameters bound onto one graph.
pub struct BackboneVars {
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl BackboneParams {
    pub fn bind(&self, graph: &Graph, requires_grad: bool) -> Result<BackboneVars> {
        Ok(BackboneVars {
            kernels: self.kernels.iter().map(|p| p.bind(graph, requires_grad)).collect::<Result<_>>()?,
            biases: self.biases.iter().map(|p| p.bind(graph, requires_grad)).collect::<Result<_>>()?,
        })
    }
}

/// Per-layer GAP vectors of one image; layer `k` has `stage_channels[k]`
/// entries.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    pub per_layer: Vec<Vec<f64>>,
}

/// Runs the four stages on a `[C, S, S]` image and returns the GAP vector
/// recorded after each.
pub fn extract(image: &Tensor, vars: &BackboneVars, cfg: &BackboneConfig) -> Result<Vec<Tensor>> {
    let want = [cfg.input_channels, cfg.input_side, cfg.input_side];
    if image.shape() != want {
        return Err(Error::shape(format!(
            "backbone expects an image of shape {want:?}, got {:?}",
            image.shape()
        )));
    }
    let mut x = image.clone();
    let mut feats = Vec::with_capacity(NUM_LAYERS);
    for (kernel, bias) in vars.kernels.iter().zip(&vars.biases) {
        x = x.conv2d(kernel, 1, 1)?.add_channel_bias(bias)?.relu().maxpool2()?;
        feats.push(x.global_avg_pool()?);
    }
    Ok(feats)
}

/// Forward-only extraction on a throwaway graph.
pub fn extract_values(params: &BackboneParams, cfg: &BackboneConfig, pixels: &[f64]) -> Result<LayerFeatures> {
    let graph = Graph::new();
    let vars = params.bind(&graph, false)?;
    let image = graph.constant(&[cfg.input_channels, cfg.input_side, cfg.input_side], pixels.to_vec())?;
    let per_layer = extract(&image, &vars, cfg)?.iter().map(Tensor::values).collect();
    Ok(LayerFeatures { per_layer })
}
