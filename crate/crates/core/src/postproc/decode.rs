use super::boxes::{BoundingBox, Detection};
use crate::error::{Error, Result};
use crate::ops::sigmoid;
use crate::tensor::Tensor;

/// Width/height prior in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn new(w: f64, h: f64) -> Self {
        Self { w, h }
    }
}

/// Per-level prediction geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSpec {
    pub stride: usize,
    pub anchors: Vec<Anchor>,
}

/// Fields per anchor: `tx, ty, tw, th, obj` then one logit per class.
pub const BOX_FIELDS: usize = 5;

pub(crate) fn check_channels(
    raw: &Tensor,
    anchors: usize,
    num_classes: usize,
) -> Result<[usize; 3]> {
    let [c, h, w] = raw.dims3("decode")?;
    if c != anchors * (BOX_FIELDS + num_classes) {
        return Err(Error::ShapeMismatch {
            op: "decode",
            dim: "prediction channels",
            expected: anchors * (BOX_FIELDS + num_classes),
            got: c,
        });
    }
    Ok([c, h, w])
}

/// Box encoded at anchor `a`, cell `(gy, gx)` of a `[A·(5+K), H, W]` map.
pub fn decode_box(
    raw: &Tensor,
    anchor: Anchor,
    stride: usize,
    a: usize,
    gy: usize,
    gx: usize,
    num_classes: usize,
) -> BoundingBox {
    let (h, w) = (raw.shape()[1], raw.shape()[2]);
    let base = a * (BOX_FIELDS + num_classes);
    let at = |f: usize| raw.data()[((base + f) * h + gy) * w + gx];
    let s = stride as f64;
    BoundingBox::new(
        (sigmoid(at(0)) + gx as f64) * s,
        (sigmoid(at(1)) + gy as f64) * s,
        anchor.w * at(2).exp(),
        anchor.h * at(3).exp(),
    )
}

/// Inverse of the box part of [`decode_box`]: `(tx, ty, tw, th)`.
pub fn encode_box(
    b: &BoundingBox,
    anchor: Anchor,
    stride: usize,
    gy: usize,
    gx: usize,
) -> [f64; 4] {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let s = stride as f64;
    [
        logit(b.cx / s - gx as f64),
        logit(b.cy / s - gy as f64),
        (b.w / anchor.w).ln(),
        (b.h / anchor.h).ln(),
    ]
}

/// Every (cell, anchor, class) whose `σ(obj)·σ(cls)` is strictly above
/// `conf_threshold`.
pub fn decode_predictions(
    raw: &Tensor,
    level: &LevelSpec,
    num_classes: usize,
    conf_threshold: f64,
) -> Result<Vec<Detection>> {
    let [_, h, w] = check_channels(raw, level.anchors.len(), num_classes)?;
    let plane = |ch: usize| &raw.data()[ch * h * w..(ch + 1) * h * w];
    let mut out = Vec::new();
    for (a, &anchor) in level.anchors.iter().enumerate() {
        let base = a * (BOX_FIELDS + num_classes);
        for gy in 0..h {
            for gx in 0..w {
                let obj = sigmoid(plane(base + 4)[gy * w + gx]);
                for k in 0..num_classes {
                    let score = obj * sigmoid(plane(base + BOX_FIELDS + k)[gy * w + gx]);
                    if score > conf_threshold {
                        out.push(Detection {
                            bbox: decode_box(raw, anchor, level.stride, a, gy, gx, num_classes),
                            class_id: k,
                            score,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level() -> LevelSpec {
        LevelSpec {
            stride: 8,
            anchors: vec![Anchor::new(10.0, 13.0), Anchor::new(16.0, 30.0)],
        }
    }

    #[test]
    fn zero_raw_decodes_to_cell_centre_and_anchor() {
        let raw = Tensor::zeros(&[2 * 7, 2, 2]);
        let b = decode_box(&raw, level().anchors[0], 8, 0, 0, 0, 2);
        assert_eq!((b.cx, b.cy, b.w, b.h), (4.0, 4.0, 10.0, 13.0));
    }

    #[test]
    fn zero_raw_sits_on_threshold() {
        let raw = Tensor::zeros(&[2 * 7, 2, 2]);
        assert!(decode_predictions(&raw, &level(), 2, 0.25)
            .unwrap()
            .is_empty());
        assert_eq!(
            decode_predictions(&raw, &level(), 2, 0.2).unwrap().len(),
            2 * 4 * 2
        );
    }

    #[test]
    fn channel_mismatch() {
        let raw = Tensor::zeros(&[13, 2, 2]);
        assert!(decode_predictions(&raw, &level(), 2, 0.25).is_err());
    }
}
