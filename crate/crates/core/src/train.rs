//! Plain gradient descent on a fixed synthetic scene.

use crate::augment::{mixup, mosaic, LabeledImage, MosaicRanges, RngState};
use crate::config::{Augmentation, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{sgd_step, zeroed};
use crate::model::Model;
use crate::postproc::{detection_loss, BoundingBox, LossOutput, Target};
use crate::tensor::Tensor;

const BACKGROUND: [f64; 3] = [0.35, 0.35, 0.35];

fn class_color(class_id: usize) -> [f64; 3] {
    match class_id % 3 {
        0 => [0.9, 0.2, 0.2],
        1 => [0.2, 0.3, 0.9],
        _ => [0.2, 0.85, 0.3],
    }
}

/// Corner box `(x1, y1, x2, y2, class)`.
type Rect = (f64, f64, f64, f64, usize);

/// Boxes in a 64×64 frame, one list per source.
const LAYOUTS: [&[Rect]; 4] = [
    &[(8.0, 10.0, 28.0, 34.0, 0), (36.0, 30.0, 58.0, 50.0, 1)],
    &[(12.0, 6.0, 44.0, 26.0, 1), (20.0, 36.0, 40.0, 60.0, 0)],
    &[(4.0, 4.0, 24.0, 24.0, 0), (30.0, 18.0, 60.0, 46.0, 0)],
    &[(10.0, 20.0, 50.0, 44.0, 1)],
];

/// Draws axis-aligned rectangles filled with their class colour.
pub fn render_rectangles(size: usize, boxes: &[Target]) -> Result<LabeledImage> {
    let plane = size * size;
    let mut px = vec![0.0; 3 * plane];
    for c in 0..3 {
        px[c * plane..(c + 1) * plane].fill(BACKGROUND[c]);
    }
    for t in boxes {
        let (x1, y1, x2, y2) = t.bbox.corners();
        let color = class_color(t.class_id);
        for y in (y1.max(0.0) as usize)..(y2.min(size as f64) as usize) {
            for x in (x1.max(0.0) as usize)..(x2.min(size as f64) as usize) {
                for c in 0..3 {
                    px[c * plane + y * size + x] = color[c];
                }
            }
        }
    }
    LabeledImage::new(Tensor::new(&[3, size, size], px)?, boxes.to_vec())
}

/// The four source images of the toy scene, scaled to `size`.
pub fn synthetic_sources(size: usize, num_classes: usize) -> Result<Vec<LabeledImage>> {
    let k = size as f64 / 64.0;
    LAYOUTS
        .iter()
        .map(|layout| {
            let boxes: Vec<Target> = layout
                .iter()
                .map(|&(x1, y1, x2, y2, class_id)| Target {
                    bbox: BoundingBox::from_corners(x1 * k, y1 * k, x2 * k, y2 * k),
                    class_id: class_id % num_classes,
                    weight: 1.0,
                })
                .collect();
            render_rectangles(size, &boxes)
        })
        .collect()
}

/// The training sample: sources combined by the configured augmentation.
pub fn toy_scene(cfg: &ModelConfig, seed: u64) -> Result<LabeledImage> {
    let size = cfg.train.image_size;
    let sources = synthetic_sources(size, cfg.num_classes)?;
    match cfg.train.augmentation {
        Augmentation::Mosaic => {
            let ranges = MosaicRanges {
                scale: cfg.train.mosaic_scale,
                shift: cfg.train.mosaic_shift,
                ..MosaicRanges::default()
            };
            mosaic(&sources, size, &ranges, &mut RngState::new(seed))
        }
        Augmentation::Mixup => mixup(&sources[0], &sources[1], cfg.train.mixup_lambda),
    }
}

/// One forward, loss and backward pass; returns the loss and its gradients.
pub fn loss_and_grads(model: &Model, sample: &LabeledImage) -> Result<(LossOutput, Model)> {
    let raw = model.forward(&sample.pixels)?;
    let cfg = &model.config;
    let out = detection_loss(
        &raw,
        &model.level_specs(),
        &sample.boxes,
        cfg.num_classes,
        &cfg.loss,
    )?;
    let mut grads = zeroed(model);
    model.backward(&sample.pixels, &out.grads, &mut grads)?;
    Ok((out, grads))
}

/// Runs `steps` updates and reports the loss before each one and after the
/// last, so `on_step` sees steps `0..=steps`.
pub fn train_toy(
    cfg: &ModelConfig,
    steps: usize,
    seed: u64,
    lr: f64,
    mut on_step: impl FnMut(usize, &LossOutput),
) -> Result<Vec<f64>> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let mut model = Model::build(&cfg)?;
    let sample = toy_scene(&cfg, seed)?;
    let mut curve = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (out, grads) = loss_and_grads(&model, &sample)?;
        if !out.total.is_finite() {
            return Err(Error::invalid(
                "train-toy",
                format!("loss diverged to {} at step {step}", out.total),
            ));
        }
        on_step(step, &out);
        curve.push(out.total);
        if step < steps {
            sgd_step(&mut model, &grads, lr);
        }
    }
    Ok(curve)
}
