//! Decoding, box geometry, suppression and the detection loss.

pub mod boxes;
pub mod decode;
pub mod loss;
pub mod nms;

pub use boxes::{diou, diou_with_grad, iou, BoundingBox, Detection};
pub use decode::{decode_box, decode_predictions, encode_box, Anchor, LevelSpec, BOX_FIELDS};
pub use loss::{
    assign_targets, detection_loss, focal_loss, label_smooth, soft_focal, Assignment, FocalValue,
    LossConfig, LossOutput, Target, PROB_CLAMP,
};
pub use nms::diou_nms;
