//! Convolutional feature extractor producing K scale-wise vectors and their
//! fixed-rule average.
//!
//! A stack of stride-2 conv/norm/ReLU stages ends in a feature map that is
//! adaptively average-pooled onto each configured grid; every pooled map is
//! flattened and projected to a common dimension so the scale vectors can be
//! mixed by a weighted sum.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{fan_in_uniform, LinearParams, ParamClass, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

pub const CONV_KERNEL: usize = 3;
pub const CONV_STRIDE: usize = 2;
pub const CONV_PAD: usize = 1;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output width of each stride-2 stage.
    pub stage_widths: Vec<usize>,
    /// Pooling grids, one per scale.
    pub pool_grids: Vec<(usize, usize)>,
    /// Common dimension every scale is projected to.
    pub fused_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_widths: vec![32, 64, 128, 256],
            pool_grids: vec![(2, 2), (1, 1)],
            fused_dim: 256,
        }
    }
}

impl BackboneConfig {
    pub fn scale_count(&self) -> usize {
        self.pool_grids.len()
    }

    /// Spatial side of the final stage output for a square input.
    pub fn output_side(&self, image_side: usize) -> usize {
        let mut side = image_side;
        for _ in &self.stage_widths {
            side = (side + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1;
        }
        side
    }

    pub fn validate(&self, image_side: usize) -> Result<()> {
        if self.pool_grids.is_empty() {
            return Err(Error::config("at least one pooling grid is required"));
        }
        if self.fused_dim == 0 {
            return Err(Error::config("fused dimension must be at least 1"));
        }
        if self.stage_widths.is_empty() {
            return Err(Error::config("at least one conv stage is required"));
        }
        let side = self.output_side(image_side);
        for &(gh, gw) in &self.pool_grids {
            if gh == 0 || gw == 0 {
                return Err(Error::config("pooling grid sides must be positive"));
            }
            if gh > side || gw > side {
                return Err(Error::config(format!(
                    "pooling grid {}x{} exceeds the {}x{} final feature map \
                     (input side {}, {} stride-2 stages)",
                    gh,
                    gw,
                    side,
                    side,
                    image_side,
                    self.stage_widths.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStageParams<F: Scalar> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub gain: Tensor<F>,
    pub shift: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<F: Scalar> {
    pub stages: Vec<ConvStageParams<F>>,
    /// One projection per pooling grid.
    pub projections: Vec<LinearParams<F>>,
}

impl<F: Scalar> BackboneParams<F> {
    pub fn init(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut stages = Vec::with_capacity(cfg.stage_widths.len());
        let mut in_ch = cfg.in_channels;
        for &out_ch in &cfg.stage_widths {
            let fan_in = in_ch * CONV_KERNEL * CONV_KERNEL;
            stages.push(ConvStageParams {
                weight: fan_in_uniform(&[out_ch, in_ch, CONV_KERNEL, CONV_KERNEL], fan_in, rng),
                bias: Tensor::zeros(&[out_ch]),
                gain: Tensor::filled(&[out_ch], F::one()),
                shift: Tensor::zeros(&[out_ch]),
            });
            in_ch = out_ch;
        }
        let projections = cfg
            .pool_grids
            .iter()
            .map(|&(gh, gw)| LinearParams::init(in_ch * gh * gw, cfg.fused_dim, rng))
            .collect();
        BackboneParams { stages, projections }
    }

    pub fn visit(&self, f: &mut ParamVisitor<'_, F>) {
        for (i, stage) in self.stages.iter().enumerate() {
            f(&format!("backbone.stage{i}.conv.weight"), ParamClass::ConvWeight, &stage.weight);
            f(&format!("backbone.stage{i}.conv.bias"), ParamClass::ConvBias, &stage.bias);
            f(&format!("backbone.stage{i}.norm.gain"), ParamClass::NormGain, &stage.gain);
            f(&format!("backbone.stage{i}.norm.shift"), ParamClass::NormShift, &stage.shift);
        }
        for (i, proj) in self.projections.iter().enumerate() {
            proj.visit(
                &format!("backbone.proj{i}"),
                ParamClass::ProjWeight,
                ParamClass::ProjBias,
                f,
            );
        }
    }

    pub fn visit_mut(&mut self, f: &mut ParamVisitorMut<'_, F>) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            f(&format!("backbone.stage{i}.conv.weight"), ParamClass::ConvWeight, &mut stage.weight);
            f(&format!("backbone.stage{i}.conv.bias"), ParamClass::ConvBias, &mut stage.bias);
            f(&format!("backbone.stage{i}.norm.gain"), ParamClass::NormGain, &mut stage.gain);
            f(&format!("backbone.stage{i}.norm.shift"), ParamClass::NormShift, &mut stage.shift);
        }
        for (i, proj) in self.projections.iter_mut().enumerate() {
            proj.visit_mut(
                &format!("backbone.proj{i}"),
                ParamClass::ProjWeight,
                ParamClass::ProjBias,
                f,
            );
        }
    }

    pub fn bind(&self, g: &mut Graph<F>) -> BoundBackbone {
        BoundBackbone {
            stages: self
                .stages
                .iter()
                .map(|s| BoundStage {
                    weight: g.param(s.weight.clone()),
                    bias: g.param(s.bias.clone()),
                    gain: g.param(s.gain.clone()),
                    shift: g.param(s.shift.clone()),
                })
                .collect(),
            projections: self.projections.iter().map(|p| p.bind(g)).collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> BackboneParams<G> {
        BackboneParams {
            stages: self
                .stages
                .iter()
                .map(|s| ConvStageParams {
                    weight: s.weight.cast(),
                    bias: s.bias.cast(),
                    gain: s.gain.cast(),
                    shift: s.shift.cast(),
                })
                .collect(),
            projections: self.projections.iter().map(|p| p.cast()).collect(),
        }
    }
}

pub struct BoundStage {
    pub weight: Var,
    pub bias: Var,
    pub gain: Var,
    pub shift: Var,
}

pub struct BoundBackbone {
    pub stages: Vec<BoundStage>,
    pub projections: Vec<crate::nn::BoundLinear>,
}

/// Per-scale vectors plus their average, as graph nodes over a batch.
pub struct MultiScaleVars {
    /// K tensors of shape `[B, fused_dim]`.
    pub scales: Vec<Var>,
    /// `[B, fused_dim]`, the elementwise mean of the scales.
    pub fused0: Var,
}

/// Forward pass over a `[B,C,H,W]` batch node.
pub fn backbone_forward<F: Scalar>(
    g: &mut Graph<F>,
    bound: &BoundBackbone,
    cfg: &BackboneConfig,
    images: Var,
) -> MultiScaleVars {
    let mut x = images;
    for stage in &bound.stages {
        let y = g.conv2d(x, stage.weight, CONV_STRIDE, CONV_PAD);
        let y = g.add_channel_bias(y, stage.bias);
        let y = g.map_norm(y, stage.gain, stage.shift, F::from_f64(NORM_EPS));
        x = g.relu(y);
    }
    let batch = g.value(x).shape()[0];
    let channels = g.value(x).shape()[1];
    let mut scales = Vec::with_capacity(cfg.pool_grids.len());
    for (grid, proj) in cfg.pool_grids.iter().zip(&bound.projections) {
        let pooled = g.adaptive_avg_pool(x, grid.0, grid.1);
        let flat = g.reshape(pooled, &[batch, channels * grid.0 * grid.1]);
        scales.push(crate::nn::linear_forward(g, *proj, flat));
    }
    let fused0 = g.mean_tensors(&scales);
    MultiScaleVars { scales, fused0 }
}

/// Per-scale feature vectors for one sample, plus their average.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeatures<F: Scalar> {
    pub scales: Vec<Tensor<F>>,
    pub f_fused0: Tensor<F>,
}

/// Batched plain-value extraction (no gradients retained).
pub fn extract_multiscale<F: Scalar>(
    params: &BackboneParams<F>,
    cfg: &BackboneConfig,
    images: &Tensor<F>,
) -> Result<(Vec<Tensor<F>>, Tensor<F>)> {
    if images.shape().len() != 4 || images.shape()[0] == 0 {
        return Err(Error::config(format!(
            "expected a nonempty [B,C,H,W] batch, got shape {:?}",
            images.shape()
        )));
    }
    cfg.validate(images.shape()[2].min(images.shape()[3]))?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let input = g.constant(images.clone());
    let out = backbone_forward(&mut g, &bound, cfg, input);
    let scales = out.scales.iter().map(|&v| g.value(v).clone()).collect();
    Ok((scales, g.value(out.fused0).clone()))
}

/// Standard adaptive average pooling of a single `[C,H,W]` map.
pub fn adaptive_avg_pool<F: Scalar>(map: &Tensor<F>, out_h: usize, out_w: usize) -> Tensor<F> {
    assert_eq!(map.shape().len(), 3, "expected [C,H,W]");
    let batched = map.clone().reshaped(&[
        1,
        map.shape()[0],
        map.shape()[1],
        map.shape()[2],
    ]);
    let mut g = Graph::new();
    let x = g.constant(batched);
    let y = g.adaptive_avg_pool(x, out_h, out_w);
    let shape = [map.shape()[0], out_h, out_w];
    g.value(y).clone().reshaped(&shape)
}
