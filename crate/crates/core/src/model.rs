//! The fusion network: a VGG-style main branch whose intermediate feature
//! maps absorb, by scatter-add, the outputs of small shared-weight
//! sub-networks run on overlapping image regions at up to two scales.
//!
//! Dataflow (variant `c`, both scales active):
//!
//! ```text
//! image -> m1 -> FM1 --+--> m2 -> FM2 --+--> m3 -> FM3 -> fc -> logits
//!                      |               |
//!    s1 on G1*G1 crops +  s2 on G2*G2 crops
//! ```
//!
//! Variant `original` skips both fusions, `a` fuses scale 1 only, `b`
//! scale 2 only. Every region at a scale runs the same sub-network with
//! the same weights.

use crate::error::{Error, Result};
use crate::layers::{output_shape, LayerSpec, Mode, Stage, StageCache};
use crate::params::ParamStore;
use crate::region::{build_fusion_plan, crop_regions, FusionPlan, GridSpec};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmfnVariant {
    /// Plain main network, no region fusion.
    Original,
    /// Scale-1 fusion only (grid 1 into FM1).
    A,
    /// Scale-2 fusion only (grid 2 into FM2).
    B,
    /// Both fusions.
    C,
}

impl RmfnVariant {
    pub fn uses_scale1(&self) -> bool {
        matches!(self, RmfnVariant::A | RmfnVariant::C)
    }

    pub fn uses_scale2(&self) -> bool {
        matches!(self, RmfnVariant::B | RmfnVariant::C)
    }
}

impl std::str::FromStr for RmfnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(RmfnVariant::Original),
            "a" | "rmfn_a" => Ok(RmfnVariant::A),
            "b" | "rmfn_b" => Ok(RmfnVariant::B),
            "c" | "rmfn_c" => Ok(RmfnVariant::C),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected original, a, b, or c)"
            ))),
        }
    }
}

/// Full architectural description of a model. Serializable, embedded in
/// checkpoints so a saved model can be rebuilt without the originating
/// configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmfnConfig {
    pub variant: RmfnVariant,
    pub input_side: usize,
    pub input_channels: usize,
    /// Width multiplier this config was derived with; kept for provenance.
    pub channel_scale: f64,
    pub scale1: GridSpec,
    pub scale2: GridSpec,
    pub m1: Vec<LayerSpec>,
    pub m2: Vec<LayerSpec>,
    pub m3: Vec<LayerSpec>,
    pub s1: Vec<LayerSpec>,
    pub s2: Vec<LayerSpec>,
    pub fc: Vec<LayerSpec>,
}

/// Shapes the validator derives for one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeChain {
    pub fm1: Vec<usize>,
    pub fm2: Vec<usize>,
    pub fm3: Vec<usize>,
    pub logits: Vec<usize>,
}

fn scaled(base: usize, scale: f64) -> usize {
    ((base as f64 * scale).round() as usize).max(1)
}

impl RmfnConfig {
    /// The standard 11-layer configuration at input side 224 with the
    /// default grids: 7x7 regions of side 32 (no overlap) fused into FM1,
    /// 5x5 regions of side 48 (overlap 4) fused into FM2.
    pub fn vgg11(
        variant: RmfnVariant,
        input_channels: usize,
        channel_scale: f64,
        dropout_rate: f64,
    ) -> Result<Self> {
        Self::vgg11_scaled(
            variant,
            224,
            input_channels,
            channel_scale,
            dropout_rate,
            GridSpec::new(7, 32, 0, 224, 2),
            GridSpec::new(5, 48, 4, 224, 4),
        )
    }

    /// Same layer topology at an arbitrary input side (must be divisible
    /// by 32) with caller-chosen grids. `channel_scale` multiplies every
    /// conv width and FC hidden width; the two-logit head is never scaled.
    pub fn vgg11_scaled(
        variant: RmfnVariant,
        input_side: usize,
        input_channels: usize,
        channel_scale: f64,
        dropout_rate: f64,
        scale1: GridSpec,
        scale2: GridSpec,
    ) -> Result<Self> {
        if channel_scale <= 0.0 {
            return Err(Error::Config(format!(
                "channel_scale must be positive, got {channel_scale}"
            )));
        }
        let s = |n| scaled(n, channel_scale);
        let conv = |i, o| LayerSpec::Conv3 {
            in_channels: i,
            out_channels: o,
        };
        let fc = |i, o| LayerSpec::Linear {
            in_features: i,
            out_features: o,
        };
        let m1 = vec![conv(input_channels, s(64)), LayerSpec::Relu, LayerSpec::MaxPool2];
        let m2 = vec![conv(s(64), s(128)), LayerSpec::Relu, LayerSpec::MaxPool2];
        let m3 = vec![
            conv(s(128), s(256)),
            LayerSpec::Relu,
            conv(s(256), s(256)),
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            conv(s(256), s(512)),
            LayerSpec::Relu,
            conv(s(512), s(512)),
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            conv(s(512), s(512)),
            LayerSpec::Relu,
            conv(s(512), s(512)),
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
        ];
        let s1 = vec![conv(input_channels, s(64)), LayerSpec::Relu, LayerSpec::MaxPool2];
        let s2 = vec![
            conv(input_channels, s(64)),
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            conv(s(64), s(128)),
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
        ];
        let fm3_shape = {
            let a = output_shape(&m1, &[input_channels, input_side, input_side])?;
            let b = output_shape(&m2, &a)?;
            output_shape(&m3, &b)?
        };
        let fc_stack = vec![
            fc(fm3_shape.iter().product(), s(4096)),
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: dropout_rate },
            fc(s(4096), s(4096)),
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: dropout_rate },
            fc(s(4096), 2),
        ];
        let config = RmfnConfig {
            variant,
            input_side,
            input_channels,
            channel_scale,
            scale1,
            scale2,
            m1,
            m2,
            m3,
            s1,
            s2,
            fc: fc_stack,
        };
        config.validate()?;
        Ok(config)
    }

    /// Validates the whole architecture and returns the derived shapes.
    /// Checks the grid geometry of every active scale, that sub-network
    /// outputs exactly match the feature-map slices they are fused into,
    /// and that the head emits two logits.
    pub fn validate(&self) -> Result<ShapeChain> {
        if self.input_side == 0 {
            return Err(Error::Config("input_side must be positive".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        for (id, stack) in [
            ("m1", &self.m1),
            ("m2", &self.m2),
            ("m3", &self.m3),
            ("s1", &self.s1),
            ("s2", &self.s2),
            ("fc", &self.fc),
        ] {
            for layer in stack {
                if let LayerSpec::Dropout { rate } = *layer {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::Config(format!(
                            "stage {id}: dropout rate must be in [0, 1), got {rate}"
                        )));
                    }
                }
            }
        }

        let image_shape = vec![self.input_channels, self.input_side, self.input_side];
        let fm1 = output_shape(&self.m1, &image_shape)?;
        if fm1.len() != 3 || fm1[1] != fm1[2] {
            return Err(Error::Shape(format!(
                "m1 must produce a square feature map, got {fm1:?}"
            )));
        }
        if self.variant.uses_scale1() {
            self.check_scale(1, &self.scale1, &self.s1, &fm1)?;
        }

        let fm2 = output_shape(&self.m2, &fm1)?;
        if fm2.len() != 3 || fm2[1] != fm2[2] {
            return Err(Error::Shape(format!(
                "m2 must produce a square feature map, got {fm2:?}"
            )));
        }
        if self.variant.uses_scale2() {
            self.check_scale(2, &self.scale2, &self.s2, &fm2)?;
        }

        let fm3 = output_shape(&self.m3, &fm2)?;
        let logits = output_shape(&self.fc, &fm3)?;
        if logits != [2] {
            return Err(Error::Shape(format!(
                "fc must produce exactly 2 logits, got {logits:?}"
            )));
        }
        Ok(ShapeChain {
            fm1,
            fm2,
            fm3,
            logits,
        })
    }

    fn check_scale(
        &self,
        which: usize,
        grid: &GridSpec,
        sub: &[LayerSpec],
        fm: &[usize],
    ) -> Result<()> {
        grid.validate()?;
        if grid.input_side != self.input_side {
            return Err(Error::Geometry(format!(
                "scale {which}: grid input side {} does not match model input side {}",
                grid.input_side, self.input_side
            )));
        }
        if grid.fm_side() != fm[1] {
            return Err(Error::Geometry(format!(
                "scale {which}: divisor {} maps input {} to feature side {}, \
                 but the main network produces {}",
                grid.divisor,
                grid.input_side,
                grid.fm_side(),
                fm[1]
            )));
        }
        let crop_shape = vec![self.input_channels, grid.region_side, grid.region_side];
        let sub_out = output_shape(sub, &crop_shape)?;
        let want = vec![fm[0], grid.slice_len(), grid.slice_len()];
        if sub_out != want {
            return Err(Error::Shape(format!(
                "scale {which}: sub-network maps a region to {sub_out:?}, \
                 but the fusion slice is {want:?}"
            )));
        }
        Ok(())
    }
}

/// Per-forward activation caches for the backward pass.
#[derive(Debug)]
pub struct ModelCache {
    m1: StageCache,
    s1: Vec<StageCache>,
    m2: StageCache,
    s2: Vec<StageCache>,
    m3: StageCache,
    fc: StageCache,
}

#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Tensor,
    /// Final conv feature map (pre-FC), kept for visualization.
    pub fm3: Tensor,
    pub cache: ModelCache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Negative,
    Positive,
}

/// Applies the decision rule to a two-logit output: the first logit wins
/// strictly for a negative call, ties go to positive.
pub fn decide(logits: &Tensor) -> Result<Decision> {
    if logits.numel() != 2 {
        return Err(Error::Shape(format!(
            "decide: expected 2 logits, got shape {:?}",
            logits.shape()
        )));
    }
    logits.ensure_finite("logits")?;
    if logits.data()[0] > logits.data()[1] {
        Ok(Decision::Negative)
    } else {
        Ok(Decision::Positive)
    }
}

#[derive(Debug)]
pub struct RmfnModel {
    pub config: RmfnConfig,
    pub params: ParamStore,
    shapes: ShapeChain,
    m1: Stage,
    m2: Stage,
    m3: Stage,
    s1: Option<Stage>,
    s2: Option<Stage>,
    fc: Stage,
    plan1: Option<FusionPlan>,
    plan2: Option<FusionPlan>,
}

/// Builds a model with freshly initialized parameters. The same config and
/// seed always produce bit-identical parameters.
pub fn build_model(config: &RmfnConfig, seed: u64) -> Result<RmfnModel> {
    let shapes = config.validate()?;
    let m1 = Stage::new("m1", config.m1.clone());
    let m2 = Stage::new("m2", config.m2.clone());
    let m3 = Stage::new("m3", config.m3.clone());
    let fc = Stage::new("fc", config.fc.clone());
    let s1 = config
        .variant
        .uses_scale1()
        .then(|| Stage::new("s1", config.s1.clone()));
    let s2 = config
        .variant
        .uses_scale2()
        .then(|| Stage::new("s2", config.s2.clone()));

    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m1.init_params(&mut params, &mut rng)?;
    if let Some(s) = &s1 {
        s.init_params(&mut params, &mut rng)?;
    }
    m2.init_params(&mut params, &mut rng)?;
    if let Some(s) = &s2 {
        s.init_params(&mut params, &mut rng)?;
    }
    m3.init_params(&mut params, &mut rng)?;
    fc.init_params(&mut params, &mut rng)?;

    let plan1 = match &s1 {
        Some(_) => Some(build_fusion_plan(&config.scale1)?),
        None => None,
    };
    let plan2 = match &s2 {
        Some(_) => Some(build_fusion_plan(&config.scale2)?),
        None => None,
    };

    Ok(RmfnModel {
        config: config.clone(),
        params,
        shapes,
        m1,
        m2,
        m3,
        s1,
        s2,
        fc,
        plan1,
        plan2,
    })
}

/// Names and shapes of every parameter a model built from `config` owns,
/// in initialization order. This is the layout checkpoints must follow.
pub(crate) fn expected_param_shapes(config: &RmfnConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    out.extend(Stage::new("m1", config.m1.clone()).param_shapes());
    if config.variant.uses_scale1() {
        out.extend(Stage::new("s1", config.s1.clone()).param_shapes());
    }
    out.extend(Stage::new("m2", config.m2.clone()).param_shapes());
    if config.variant.uses_scale2() {
        out.extend(Stage::new("s2", config.s2.clone()).param_shapes());
    }
    out.extend(Stage::new("m3", config.m3.clone()).param_shapes());
    out.extend(Stage::new("fc", config.fc.clone()).param_shapes());
    out
}

/// Reassembles a model around an existing parameter store (checkpoint
/// loading). The store must contain exactly the expected parameters in
/// initialization order.
pub(crate) fn assemble_model(config: &RmfnConfig, params: ParamStore) -> Result<RmfnModel> {
    let shapes = config.validate()?;
    let expected = expected_param_shapes(config);
    if params.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, got {}",
            expected.len(),
            params.len()
        )));
    }
    for (name, (want_name, want_shape)) in params.names().iter().zip(&expected) {
        if name != want_name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: expected {want_name:?}, got {name:?}"
            )));
        }
        let got = params.get(name)?.value.shape();
        if got != want_shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} has shape {got:?}, expected {want_shape:?}"
            )));
        }
    }

    let s1 = config
        .variant
        .uses_scale1()
        .then(|| Stage::new("s1", config.s1.clone()));
    let s2 = config
        .variant
        .uses_scale2()
        .then(|| Stage::new("s2", config.s2.clone()));
    let plan1 = match &s1 {
        Some(_) => Some(build_fusion_plan(&config.scale1)?),
        None => None,
    };
    let plan2 = match &s2 {
        Some(_) => Some(build_fusion_plan(&config.scale2)?),
        None => None,
    };
    Ok(RmfnModel {
        config: config.clone(),
        params,
        shapes,
        m1: Stage::new("m1", config.m1.clone()),
        m2: Stage::new("m2", config.m2.clone()),
        m3: Stage::new("m3", config.m3.clone()),
        s1,
        s2,
        fc: Stage::new("fc", config.fc.clone()),
        plan1,
        plan2,
    })
}

impl RmfnModel {
    pub fn shapes(&self) -> &ShapeChain {
        &self.shapes
    }

    pub fn has_scale1(&self) -> bool {
        self.plan1.is_some()
    }

    pub fn has_scale2(&self) -> bool {
        self.plan2.is_some()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let want = [
            self.config.input_channels,
            self.config.input_side,
            self.config.input_side,
        ];
        if image.shape() != want {
            return Err(Error::Shape(format!(
                "image must be {want:?}, got {:?}",
                image.shape()
            )));
        }
        image.ensure_finite("input image")
    }

    /// Runs one image through the network. `rng` is consumed only by
    /// dropout layers in training mode, in a fixed layer order, so equal
    /// rng states give bit-identical results.
    pub fn forward<R: Rng>(&self, image: &Tensor, mode: Mode, rng: &mut R) -> Result<ForwardPass> {
        self.check_image(image)?;
        let (fm1, cache_m1) = self.m1.forward(&self.params, image.clone(), mode, rng)?;

        let (ff1, s1_caches) = match (&self.s1, &self.plan1) {
            (Some(stage), Some(plan)) => {
                let crops = crop_regions(image, &self.config.scale1)?;
                let mut outs = Vec::with_capacity(crops.len());
                let mut caches = Vec::with_capacity(crops.len());
                for crop in crops {
                    let (o, c) = stage.forward(&self.params, crop, mode, rng)?;
                    outs.push(o);
                    caches.push(c);
                }
                (plan.fuse(&fm1, &outs)?, caches)
            }
            _ => (fm1, Vec::new()),
        };

        let (fm2, cache_m2) = self.m2.forward(&self.params, ff1, mode, rng)?;

        let (ff2, s2_caches) = match (&self.s2, &self.plan2) {
            (Some(stage), Some(plan)) => {
                let crops = crop_regions(image, &self.config.scale2)?;
                let mut outs = Vec::with_capacity(crops.len());
                let mut caches = Vec::with_capacity(crops.len());
                for crop in crops {
                    let (o, c) = stage.forward(&self.params, crop, mode, rng)?;
                    outs.push(o);
                    caches.push(c);
                }
                (plan.fuse(&fm2, &outs)?, caches)
            }
            _ => (fm2, Vec::new()),
        };

        let (fm3, cache_m3) = self.m3.forward(&self.params, ff2, mode, rng)?;
        let (logits, cache_fc) = self.fc.forward(&self.params, fm3.clone(), mode, rng)?;
        logits.ensure_finite("logits")?;

        Ok(ForwardPass {
            logits,
            fm3,
            cache: ModelCache {
                m1: cache_m1,
                s1: s1_caches,
                m2: cache_m2,
                s2: s2_caches,
                m3: cache_m3,
                fc: cache_fc,
            },
        })
    }

    /// Inference without gradient bookkeeping: returns (logits, fm3).
    pub fn infer(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(image, Mode::Infer, &mut rng)?;
        Ok((pass.logits, pass.fm3))
    }

    /// Backpropagates from the logit gradient, accumulating parameter
    /// gradients in the store, and returns the gradient with respect to
    /// the input image (crop branches included).
    pub fn backward(&mut self, cache: &ModelCache, grad_logits: &Tensor) -> Result<Tensor> {
        let g = self
            .fc
            .backward(&mut self.params, &cache.fc, grad_logits.clone())?;
        let g = self.m3.backward(&mut self.params, &cache.m3, g)?;

        let (g_fm2, s2_crop_grads) = match (&self.s2, &self.plan2) {
            (Some(stage), Some(plan)) => {
                let (g_main, g_subs) = plan.fuse_backward(&g)?;
                let mut crop_grads = Vec::with_capacity(g_subs.len());
                for (sub_cache, g_sub) in cache.s2.iter().zip(g_subs) {
                    crop_grads.push(stage.backward(&mut self.params, sub_cache, g_sub)?);
                }
                (g_main, crop_grads)
            }
            _ => (g, Vec::new()),
        };
        let g = self.m2.backward(&mut self.params, &cache.m2, g_fm2)?;

        let (g_fm1, s1_crop_grads) = match (&self.s1, &self.plan1) {
            (Some(stage), Some(plan)) => {
                let (g_main, g_subs) = plan.fuse_backward(&g)?;
                let mut crop_grads = Vec::with_capacity(g_subs.len());
                for (sub_cache, g_sub) in cache.s1.iter().zip(g_subs) {
                    crop_grads.push(stage.backward(&mut self.params, sub_cache, g_sub)?);
                }
                (g_main, crop_grads)
            }
            _ => (g, Vec::new()),
        };
        let mut grad_image = self.m1.backward(&mut self.params, &cache.m1, g_fm1)?;

        for (grads, spec) in [
            (&s1_crop_grads, &self.config.scale1),
            (&s2_crop_grads, &self.config.scale2),
        ] {
            if grads.is_empty() {
                continue;
            }
            let side = spec.input_side;
            let l = spec.region_side;
            for (crop_grad, idx) in grads.iter().zip(spec.region_indices()) {
                let (rows, cols) = spec.crop_bounds(idx);
                for ch in 0..self.config.input_channels {
                    for (yo, y) in rows.clone().enumerate() {
                        let dst = &mut grad_image.data_mut()
                            [(ch * side + y) * side + cols.start..(ch * side + y) * side + cols.end];
                        let src = &crop_grad.data()[(ch * l + yo) * l..(ch * l + yo) * l + l];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
        Ok(grad_image)
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::{random_image, tiny_config};
    use super::*;
    use crate::layers::softmax_cross_entropy;

    #[test]
    fn default_vgg11_shape_chain() {
        let config = RmfnConfig::vgg11(RmfnVariant::C, 3, 1.0, 0.5).unwrap();
        let shapes = config.validate().unwrap();
        assert_eq!(shapes.fm1, vec![64, 112, 112]);
        assert_eq!(shapes.fm2, vec![128, 56, 56]);
        assert_eq!(shapes.fm3, vec![512, 7, 7]);
        assert_eq!(shapes.logits, vec![2]);
    }

    #[test]
    fn channel_scale_quarters_every_width_but_the_head() {
        let config = RmfnConfig::vgg11(RmfnVariant::C, 3, 0.25, 0.5).unwrap();
        assert_eq!(
            config.m1[0],
            LayerSpec::Conv3 {
                in_channels: 3,
                out_channels: 16
            }
        );
        assert_eq!(
            config.m2[0],
            LayerSpec::Conv3 {
                in_channels: 16,
                out_channels: 32
            }
        );
        let shapes = config.validate().unwrap();
        assert_eq!(shapes.fm3, vec![128, 7, 7]);
        assert_eq!(
            config.fc[0],
            LayerSpec::Linear {
                in_features: 128 * 7 * 7,
                out_features: 1024
            }
        );
        assert_eq!(
            config.fc[6],
            LayerSpec::Linear {
                in_features: 1024,
                out_features: 2
            }
        );
    }

    #[test]
    fn mismatched_sub_network_width_is_rejected() {
        let mut config = tiny_config(RmfnVariant::A);
        // s1 now outputs 3 channels but FM1 has 2
        config.s1 = vec![
            LayerSpec::Conv3 {
                in_channels: 1,
                out_channels: 3,
            },
            LayerSpec::MaxPool2,
        ];
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("fusion slice"), "got: {err}");
    }

    #[test]
    fn wrong_divisor_is_rejected() {
        let mut config = tiny_config(RmfnVariant::A);
        config.scale1.divisor = 4; // m1 only halves the input
        config.scale1.region_side = 8;
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("feature side"), "got: {err}");
    }

    #[test]
    fn build_is_deterministic() {
        let config = tiny_config(RmfnVariant::C);
        let a = build_model(&config, 42).unwrap();
        let b = build_model(&config, 42).unwrap();
        assert_eq!(a.params.names(), b.params.names());
        for (name, pa) in a.params.iter() {
            assert_eq!(pa.value, b.params.get(name).unwrap().value);
        }
        let c = build_model(&config, 43).unwrap();
        assert_ne!(
            a.params.get("m1.conv0.w").unwrap().value,
            c.params.get("m1.conv0.w").unwrap().value
        );
    }

    #[test]
    fn forward_shapes_follow_the_chain() {
        let config = tiny_config(RmfnVariant::C);
        let model = build_model(&config, 1).unwrap();
        let image = random_image(16, 1, 7);
        let (logits, fm3) = model.infer(&image).unwrap();
        assert_eq!(logits.shape(), &[2]);
        assert_eq!(fm3.shape(), model.shapes().fm3.as_slice());
    }

    #[test]
    fn variant_lattice_matches_active_fusions() {
        for (variant, s1, s2) in [
            (RmfnVariant::Original, false, false),
            (RmfnVariant::A, true, false),
            (RmfnVariant::B, false, true),
            (RmfnVariant::C, true, true),
        ] {
            let model = build_model(&tiny_config(variant), 1).unwrap();
            assert_eq!(model.has_scale1(), s1);
            assert_eq!(model.has_scale2(), s2);
            assert_eq!(model.params.contains("s1.conv0.w"), s1);
            assert_eq!(model.params.contains("s2.conv0.w"), s2);
        }
    }

    #[test]
    fn original_variant_is_the_plain_stage_chain() {
        let config = tiny_config(RmfnVariant::Original);
        let model = build_model(&config, 5).unwrap();
        let image = random_image(16, 1, 8);
        let (logits, _) = model.infer(&image).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = model
            .m1
            .forward(&model.params, image.clone(), Mode::Infer, &mut rng)
            .unwrap();
        let (b, _) = model
            .m2
            .forward(&model.params, a, Mode::Infer, &mut rng)
            .unwrap();
        let (c, _) = model
            .m3
            .forward(&model.params, b, Mode::Infer, &mut rng)
            .unwrap();
        let (manual, _) = model
            .fc
            .forward(&model.params, c, Mode::Infer, &mut rng)
            .unwrap();
        assert_eq!(logits, manual);
    }

    #[test]
    fn zeroed_sub_networks_reproduce_the_original_bit_exactly() {
        let mut fused = build_model(&tiny_config(RmfnVariant::C), 11).unwrap();
        let sub_names: Vec<String> = fused
            .params
            .names()
            .iter()
            .filter(|n| n.starts_with("s1.") || n.starts_with("s2."))
            .cloned()
            .collect();
        for name in sub_names {
            fused
                .params
                .get_mut(&name)
                .unwrap()
                .value
                .data_mut()
                .fill(0.0);
        }

        let mut plain = build_model(&tiny_config(RmfnVariant::Original), 99).unwrap();
        let main_names: Vec<String> = plain.params.names().to_vec();
        for name in main_names {
            let v = fused.params.get(&name).unwrap().value.clone();
            plain.params.get_mut(&name).unwrap().value = v;
        }

        for seed in 0..3 {
            let image = random_image(16, 1, 100 + seed);
            let (fused_logits, _) = fused.infer(&image).unwrap();
            let (plain_logits, _) = plain.infer(&image).unwrap();
            assert_eq!(fused_logits, plain_logits);
        }
    }

    #[test]
    fn decide_cases() {
        let t = |a, b| Tensor::from_vec(&[2], vec![a, b]).unwrap();
        assert_eq!(decide(&t(0.7, 0.3)).unwrap(), Decision::Negative);
        assert_eq!(decide(&t(0.3, 0.7)).unwrap(), Decision::Positive);
        assert_eq!(decide(&t(0.5, 0.5)).unwrap(), Decision::Positive);
        assert!(decide(&t(f64::NAN, 0.0)).is_err());
        assert!(decide(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn decide_is_invariant_under_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let a: f64 = rng.gen_range(-5.0..5.0);
            let b: f64 = rng.gen_range(-5.0..5.0);
            let base = decide(&Tensor::from_vec(&[2], vec![a, b]).unwrap()).unwrap();
            for shift in [-3.0, -0.1, 0.2, 10.0] {
                let shifted =
                    decide(&Tensor::from_vec(&[2], vec![a + shift, b + shift]).unwrap()).unwrap();
                assert_eq!(base, shifted);
            }
        }
    }

    #[test]
    fn zero_logit_gradient_gives_zero_param_gradients() {
        let mut model = build_model(&tiny_config(RmfnVariant::C), 3).unwrap();
        let image = random_image(16, 1, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pass = model.forward(&image, Mode::Train, &mut rng).unwrap();
        model.params.zero_grads();
        model.backward(&pass.cache, &Tensor::zeros(&[2])).unwrap();
        for (name, p) in model.params.iter() {
            assert!(
                p.grad.data().iter().all(|&g| g == 0.0),
                "nonzero gradient in {name}"
            );
        }
    }

    #[test]
    fn shared_weights_make_region_gradients_additive() {
        // Push gradients through two different fusion slices separately
        // and together; the sub-network gradient must be the sum, because
        // all regions share one set of weights.
        let config = tiny_config(RmfnVariant::A);
        let image = random_image(16, 1, 10);

        let grads_for = |slice_logit_grads: &[(f64, f64)]| {
            let mut model = build_model(&config, 77).unwrap();
            let mut total = Tensor::zeros(
                model
                    .params
                    .get("s1.conv0.w")
                    .unwrap()
                    .value
                    .shape(),
            );
            for &(g0, g1) in slice_logit_grads {
                let mut rng = ChaCha8Rng::seed_from_u64(2);
                let pass = model.forward(&image, Mode::Infer, &mut rng).unwrap();
                model.params.zero_grads();
                let g = Tensor::from_vec(&[2], vec![g0, g1]).unwrap();
                model.backward(&pass.cache, &g).unwrap();
                total.iadd(&model.params.get("s1.conv0.w").unwrap().grad).unwrap();
            }
            total
        };

        let separate = grads_for(&[(1.0, 0.0), (0.0, 1.0)]);
        let joint = grads_for(&[(1.0, 1.0)]);
        assert!(separate.max_abs_diff(&joint) < 1e-9);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut model = build_model(&tiny_config(RmfnVariant::C), 13).unwrap();
        let image = random_image(16, 1, 14);
        let label = 1usize;
        let step = 1e-5;

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = model.forward(&image, Mode::Infer, &mut rng).unwrap();
        let (_, grad_logits) = softmax_cross_entropy(&pass.logits, label).unwrap();
        model.params.zero_grads();
        model.backward(&pass.cache, &grad_logits).unwrap();
        let analytic: Vec<(String, Vec<f64>)> = model
            .params
            .iter()
            .map(|(n, p)| (n.to_string(), p.grad.data().to_vec()))
            .collect();

        let mut worst: f64 = 0.0;
        for (name, grads) in &analytic {
            for i in 0..grads.len() {
                let saved = model.params.get(name).unwrap().value.data()[i];
                let eval = |v: f64, model: &mut RmfnModel| {
                    model.params.get_mut(name).unwrap().value.data_mut()[i] = v;
                    let (logits, _) = model.infer(&image).unwrap();
                    softmax_cross_entropy(&logits, label).unwrap().0
                };
                let up = eval(saved + step, &mut model);
                let down = eval(saved - step, &mut model);
                model.params.get_mut(name).unwrap().value.data_mut()[i] = saved;
                let numeric = (up - down) / (2.0 * step);
                let denom = grads[i].abs().max(numeric.abs()).max(1e-4);
                worst = worst.max((grads[i] - numeric).abs() / denom);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
