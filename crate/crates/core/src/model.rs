//! Full detector: backbone, neck and one attention head per pyramid level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::TdaHead;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{join, ConvLayers, Parameters};
use crate::neck::{Backbone, FeaturePyramid, Neck, NeckTrace};
use crate::ops::ConvParams;
use crate::postproc::{decode_predictions, diou_nms, Detection, LevelSpec};
use crate::tensor::Tensor;

pub const STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub heads: [TdaHead; 3],
}

/// Intermediates of one forward pass, for inspection and feature dumps.
#[derive(Clone, Debug)]
pub struct ModelTrace {
    pub backbone: FeaturePyramid,
    pub neck: NeckTrace,
    /// Head features after the dynamic blocks, `[C, H, W]` per level.
    pub attended: [Tensor; 3],
    pub raw: [Tensor; 3],
}

impl Model {
    /// Deterministic initialisation from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sep = config.depthwise;
        let backbone = Backbone::init(config.widths, sep, &mut rng);
        let neck = Neck::init(config.widths, config.ca_ratio, config.csp, sep, &mut rng)?;
        let anchors = config.anchors[0].len();
        let heads = neck.out_channels().map(|c| {
            let mut h = TdaHead::init(
                c,
                config.dynamic_blocks,
                anchors,
                config.num_classes,
                config.dyrelu_reduction,
                sep,
                &mut rng,
            );
            for b in &mut h.blocks {
                b.task.lambda_a = config.lambda_a;
                b.task.lambda_b = config.lambda_b;
            }
            h
        });
        Ok(Self {
            config: config.clone(),
            backbone,
            neck,
            heads,
        })
    }

    pub fn level_specs(&self) -> Vec<LevelSpec> {
        STRIDES
            .iter()
            .zip(&self.config.anchors)
            .map(|(&stride, anchors)| LevelSpec {
                stride,
                anchors: anchors.clone(),
            })
            .collect()
    }

    fn as_batch(image: &Tensor) -> Result<Tensor> {
        let [c, h, w] = image.dims3("model input")?;
        if c != 3 {
            return Err(Error::ShapeMismatch {
                op: "model input",
                dim: "channels",
                expected: 3,
                got: c,
            });
        }
        image.clone().reshape(&[1, 3, h, w])
    }

    fn squeeze(t: &Tensor) -> Result<Tensor> {
        let [_, c, h, w] = t.dims4("model")?;
        t.clone().reshape(&[c, h, w])
    }

    /// `image` is `[3, H, W]` with H and W multiples of 32.
    pub fn trace(&self, image: &Tensor) -> Result<ModelTrace> {
        let x = Self::as_batch(image)?;
        let backbone = self.backbone.forward(&x)?;
        let neck = self.neck.trace(&backbone)?;
        let p = [&neck.p3, &neck.p4, &neck.p5];
        let mut attended = Vec::with_capacity(3);
        let mut raw = Vec::with_capacity(3);
        for (head, p) in self.heads.iter().zip(p) {
            let f = Self::squeeze(p)?;
            attended.push(head.attend(&f)?);
            raw.push(head.forward(&f)?);
        }
        Ok(ModelTrace {
            backbone,
            neck,
            attended: attended.try_into().expect("three levels"),
            raw: raw.try_into().expect("three levels"),
        })
    }

    /// Raw `[A·(5+K), H/s, W/s]` predictions at strides 8, 16, 32.
    pub fn forward(&self, image: &Tensor) -> Result<[Tensor; 3]> {
        let x = Self::as_batch(image)?;
        let p = self.neck.forward(&self.backbone.forward(&x)?)?;
        let mut raw = Vec::with_capacity(3);
        for (head, p) in self.heads.iter().zip(&p.levels) {
            raw.push(head.forward(&Self::squeeze(p)?)?);
        }
        Ok(raw.try_into().expect("three levels"))
    }

    /// Accumulates parameter gradients for upstream gradients of the raw maps.
    pub fn backward(&self, image: &Tensor, draw: &[Tensor], grads: &mut Model) -> Result<()> {
        let x = Self::as_batch(image)?;
        let c = self.backbone.forward(&x)?;
        let p = self.neck.forward(&c)?;
        let mut dp = p.zeros_like();
        for (l, (head, g)) in self.heads.iter().zip(grads.heads.iter_mut()).enumerate() {
            let f = Self::squeeze(&p.levels[l])?;
            let df = head.backward(&f, &draw[l], g)?;
            dp.levels[l] = df.reshape(p.levels[l].shape())?;
        }
        let dc = self.neck.backward(&c, &dp, &mut grads.neck)?;
        self.backbone.backward(&x, &dc, &mut grads.backbone)?;
        Ok(())
    }

    /// Decode every level, then class-wise DIoU-NMS.
    pub fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        let raw = self.forward(image)?;
        self.postprocess(&raw)
    }

    pub fn postprocess(&self, raw: &[Tensor]) -> Result<Vec<Detection>> {
        let mut dets = Vec::new();
        for (r, level) in raw.iter().zip(self.level_specs()) {
            dets.extend(decode_predictions(
                r,
                &level,
                self.config.num_classes,
                self.config.conf_threshold,
            )?);
        }
        Ok(diou_nms(&dets, self.config.nms_threshold))
    }

    pub fn dynamic_blocks_per_head(&self) -> [usize; 3] {
        self.heads.each_ref().map(|h| h.blocks.len())
    }

    pub fn ca_taps(&self) -> usize {
        self.neck.ca.len()
    }

    /// Every convolution with a kernel larger than 1×1, by parameter name.
    pub fn spatial_convs(&self) -> Vec<(String, &ConvParams)> {
        let mut all = Vec::new();
        self.conv_layers("", &mut all);
        all.into_iter()
            .filter(|(_, p)| p.kernel() != (1, 1))
            .collect()
    }
}

impl ConvLayers for Model {
    fn conv_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams)>) {
        self.backbone.conv_layers(&join(prefix, "backbone"), out);
        self.neck.conv_layers(&join(prefix, "neck"), out);
        for (i, h) in self.heads.iter().enumerate() {
            h.conv_layers(&join(prefix, &format!("head_p{}", i + 3)), out);
        }
    }
}

impl Parameters for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.neck.visit(&join(prefix, "neck"), f);
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("head_p{}", i + 3)), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.neck.visit_mut(&join(prefix, "neck"), f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("head_p{}", i + 3)), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;

    #[test]
    fn output_shapes_follow_strides() {
        let cfg = ModelConfig::for_variant(Variant::Tiny);
        let m = Model::build(&cfg).unwrap();
        let raw = m.forward(&Tensor::zeros(&[3, 64, 32])).unwrap();
        let ch = 3 * (5 + cfg.num_classes);
        assert_eq!(raw[0].shape(), [ch, 8, 4]);
        assert_eq!(raw[1].shape(), [ch, 4, 2]);
        assert_eq!(raw[2].shape(), [ch, 2, 1]);
    }

    #[test]
    fn nano_spatial_convs_are_depthwise() {
        let m = Model::build(&ModelConfig::for_variant(Variant::Nano)).unwrap();
        let convs = m.spatial_convs();
        assert!(!convs.is_empty());
        for (name, p) in convs {
            assert!(p.is_depthwise(), "{name}");
        }
    }
}
