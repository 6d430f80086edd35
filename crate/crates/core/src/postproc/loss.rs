use super::boxes::{diou_with_grad, BoundingBox};
use super::decode::{check_channels, decode_box, LevelSpec, BOX_FIELDS};
use crate::error::{Error, Result};
use crate::ops::sigmoid;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalValue {
    pub loss: f64,
    /// dL/dp, zero when `p` was clamped.
    pub dp: f64,
    pub clamped: bool,
}

/// α-balanced focal loss for a binary target.
pub fn focal_loss(p: f64, positive: bool, alpha: f64, gamma: f64) -> FocalValue {
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let clamped = pc != p;
    let (pt, at, sign) = if positive {
        (pc, alpha, 1.0)
    } else {
        (1.0 - pc, 1.0 - alpha, -1.0)
    };
    let q = 1.0 - pt;
    let loss = -at * q.powf(gamma) * pt.ln();
    let dq = if gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0)
    };
    let dpt = at * dq * pt.ln() - at * q.powf(gamma) / pt;
    FocalValue {
        loss,
        dp: if clamped { 0.0 } else { sign * dpt },
        clamped,
    }
}

/// `y·FL(p, 1) + (1 − y)·FL(p, 0)` for a soft target `y ∈ [0, 1]`.
pub fn soft_focal(p: f64, y: f64, alpha: f64, gamma: f64) -> FocalValue {
    let pos = focal_loss(p, true, alpha, gamma);
    let neg = focal_loss(p, false, alpha, gamma);
    FocalValue {
        loss: y * pos.loss + (1.0 - y) * neg.loss,
        dp: y * pos.dp + (1.0 - y) * neg.dp,
        clamped: pos.clamped,
    }
}

/// `y·(1 − ε) + ε/K`.
pub fn label_smooth(onehot: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid(
            "label_smooth",
            format!("epsilon {eps} outside [0, 1)"),
        ));
    }
    let k = onehot.len() as f64;
    Ok(onehot.iter().map(|y| y * (1.0 - eps) + eps / k).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub w_box: f64,
    pub w_obj: f64,
    pub w_cls: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_box: 0.05,
            w_obj: 1.0,
            w_cls: 0.5,
            alpha: 0.25,
            gamma: 2.0,
            smoothing: 0.1,
        }
    }
}

/// Ground-truth box with a mixing weight (1 unless blended by mixup).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub target: usize,
    pub level: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
}

fn wh_iou(aw: f64, ah: f64, bw: f64, bh: f64) -> f64 {
    let inter = aw.min(bw) * ah.min(bh);
    inter / (aw * ah + bw * bh - inter)
}

/// Each target goes to the single anchor (over all levels) whose prior shape
/// overlaps it best, at the grid cell containing its centre. Zero-weight
/// targets are skipped; when two targets claim the same slot the first wins.
pub fn assign_targets(
    targets: &[Target],
    levels: &[LevelSpec],
    grids: &[(usize, usize)],
) -> Vec<Assignment> {
    let mut out: Vec<Assignment> = Vec::new();
    for (t, target) in targets.iter().enumerate() {
        if target.weight <= 0.0 {
            continue;
        }
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for (l, level) in levels.iter().enumerate() {
            for (a, anchor) in level.anchors.iter().enumerate() {
                let v = wh_iou(anchor.w, anchor.h, target.bbox.w, target.bbox.h);
                if v > best.0 {
                    best = (v, l, a);
                }
            }
        }
        let (_, level, anchor) = best;
        let (gh, gw) = grids[level];
        let s = levels[level].stride as f64;
        let cell = |v: f64, n: usize| ((v / s).floor().max(0.0) as usize).min(n - 1);
        let slot = Assignment {
            target: t,
            level,
            anchor,
            gy: cell(target.bbox.cy, gh),
            gx: cell(target.bbox.cx, gw),
        };
        let taken = out.iter().any(|o| {
            (o.level, o.anchor, o.gy, o.gx) == (slot.level, slot.anchor, slot.gy, slot.gx)
        });
        if !taken {
            out.push(slot);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    /// `w_box·box + w_obj·obj + w_cls·cls`.
    pub total: f64,
    /// Unweighted components, each normalised by the positive count.
    pub box_loss: f64,
    pub obj: f64,
    pub cls: f64,
    /// d total / d raw, one tensor per level.
    pub grads: Vec<Tensor>,
    pub clamped: usize,
    pub positives: usize,
}

/// Box (1 − DIoU), objectness focal and smoothed class focal terms over raw
/// `[A·(5+K), H, W]` prediction maps.
pub fn detection_loss(
    raw: &[Tensor],
    levels: &[LevelSpec],
    targets: &[Target],
    num_classes: usize,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if raw.len() != levels.len() {
        return Err(Error::ShapeMismatch {
            op: "detection_loss",
            dim: "level count",
            expected: levels.len(),
            got: raw.len(),
        });
    }
    let mut grids = Vec::with_capacity(raw.len());
    for (r, level) in raw.iter().zip(levels) {
        let [_, h, w] = check_channels(r, level.anchors.len(), num_classes)?;
        grids.push((h, w));
    }
    if let Some(t) = targets.iter().find(|t| t.class_id >= num_classes) {
        return Err(Error::invalid(
            "detection_loss",
            format!("target class {} >= {num_classes} classes", t.class_id),
        ));
    }

    let assignments = assign_targets(targets, levels, &grids);
    let norm = assignments.len().max(1) as f64;
    let fields = BOX_FIELDS + num_classes;
    let mut grads: Vec<Tensor> = raw.iter().map(Tensor::zeros_like).collect();
    let mut clamped = 0;
    let idx = |l: usize, ch: usize, gy: usize, gx: usize| (ch * grids[l].0 + gy) * grids[l].1 + gx;

    let mut obj_target: Vec<Vec<f64>> = raw
        .iter()
        .zip(levels)
        .map(|(r, lv)| vec![0.0; lv.anchors.len() * r.shape()[1] * r.shape()[2]])
        .collect();
    for asg in &assignments {
        let (h, w) = grids[asg.level];
        obj_target[asg.level][(asg.anchor * h + asg.gy) * w + asg.gx] = targets[asg.target].weight;
    }

    let mut obj = 0.0;
    for (l, level) in levels.iter().enumerate() {
        let (h, w) = grids[l];
        for a in 0..level.anchors.len() {
            for gy in 0..h {
                for gx in 0..w {
                    let i = idx(l, a * fields + 4, gy, gx);
                    let p = sigmoid(raw[l].data()[i]);
                    let f = soft_focal(
                        p,
                        obj_target[l][(a * h + gy) * w + gx],
                        cfg.alpha,
                        cfg.gamma,
                    );
                    clamped += f.clamped as usize;
                    obj += f.loss;
                    grads[l].data_mut()[i] += cfg.w_obj * f.dp * p * (1.0 - p) / norm;
                }
            }
        }
    }

    let mut box_loss = 0.0;
    let mut cls = 0.0;
    for asg in &assignments {
        let t = &targets[asg.target];
        let (l, a, gy, gx) = (asg.level, asg.anchor, asg.gy, asg.gx);
        let level = &levels[l];
        let pred = decode_box(
            &raw[l],
            level.anchors[a],
            level.stride,
            a,
            gy,
            gx,
            num_classes,
        );
        let (d, g) = diou_with_grad(&pred, &t.bbox);
        box_loss += t.weight * (1.0 - d);
        let s = level.stride as f64;
        let base = a * fields;
        let tx = raw[l].data()[idx(l, base, gy, gx)];
        let ty = raw[l].data()[idx(l, base + 1, gy, gx)];
        let chain = [
            s * sigmoid(tx) * (1.0 - sigmoid(tx)),
            s * sigmoid(ty) * (1.0 - sigmoid(ty)),
            pred.w,
            pred.h,
        ];
        for f in 0..4 {
            grads[l].data_mut()[idx(l, base + f, gy, gx)] -=
                cfg.w_box * t.weight * g[f] * chain[f] / norm;
        }

        let mut onehot = vec![0.0; num_classes];
        onehot[t.class_id] = 1.0;
        let smooth = label_smooth(&onehot, cfg.smoothing)?;
        for (k, &y) in smooth.iter().enumerate() {
            let i = idx(l, base + BOX_FIELDS + k, gy, gx);
            let p = sigmoid(raw[l].data()[i]);
            let f = soft_focal(p, y, cfg.alpha, cfg.gamma);
            clamped += f.clamped as usize;
            cls += t.weight * f.loss;
            grads[l].data_mut()[i] += cfg.w_cls * t.weight * f.dp * p * (1.0 - p) / norm;
        }
    }

    let (box_loss, obj, cls) = (box_loss / norm, obj / norm, cls / norm);
    Ok(LossOutput {
        total: cfg.w_box * box_loss + cfg.w_obj * obj + cfg.w_cls * cls,
        box_loss,
        obj,
        cls,
        grads,
        clamped,
        positives: assignments.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_reference_value() {
        let f = focal_loss(0.5, true, 0.25, 2.0);
        assert!((f.loss - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((f.loss - 0.043321).abs() < 1e-6);
    }

    #[test]
    fn focal_reduces_to_cross_entropy() {
        for p in [0.1, 0.5, 0.93] {
            assert!((focal_loss(p, true, 1.0, 0.0).loss + p.ln()).abs() < 1e-12);
            assert!((focal_loss(p, false, 0.0, 0.0).loss + (1.0 - p).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_prediction_clamps_to_near_zero() {
        let f = focal_loss(1.0, true, 0.25, 2.0);
        assert!(f.clamped);
        assert!(f.loss < 1e-12);
        assert_eq!(f.dp, 0.0);
    }

    #[test]
    fn label_smooth_cases() {
        assert_eq!(
            label_smooth(&[0.0, 1.0, 0.0], 0.0).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        let s = label_smooth(&[1.0, 0.0], 0.1).unwrap();
        assert!((s[0] - 0.95).abs() < 1e-15 && (s[1] - 0.05).abs() < 1e-15);
        assert!(label_smooth(&[1.0], 1.0).is_err());
        assert!(label_smooth(&[1.0], -0.1).is_err());
    }
}
