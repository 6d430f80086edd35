use super::boxes::{diou, Detection};

/// Class-wise greedy suppression: a candidate is dropped when its DIoU with
/// an already kept box of the same class exceeds `threshold`. Output is
/// ordered by descending score, ties by input position.
pub fn diou_nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let cand = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && diou(&k.bbox, &cand.bbox) > threshold);
        if !suppressed {
            kept.push(*cand);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postproc::BoundingBox;

    fn det(score: f64, class_id: usize) -> Detection {
        Detection {
            bbox: BoundingBox::new(10.0, 10.0, 4.0, 4.0),
            class_id,
            score,
        }
    }

    #[test]
    fn duplicates_collapse_to_best() {
        let out = diou_nms(&[det(0.8, 0), det(0.9, 0)], 0.5);
        assert_eq!(out, vec![det(0.9, 0)]);
        assert_eq!(diou_nms(&[det(0.3, 1)], 0.5), vec![det(0.3, 1)]);
    }

    #[test]
    fn classes_do_not_suppress_each_other() {
        assert_eq!(diou_nms(&[det(0.8, 0), det(0.9, 1)], 0.5).len(), 2);
    }
}
