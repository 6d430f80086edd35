use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use yolo3a::postproc::{
    assign_targets, decode_box, decode_predictions, detection_loss, diou, diou_nms, encode_box,
    focal_loss, iou, label_smooth, Anchor, BoundingBox, Detection, LevelSpec, LossConfig, Target,
    BOX_FIELDS,
};
use yolo3a::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_detections(r: &mut ChaCha8Rng, n: usize, quantised: bool) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let score: f64 = r.gen_range(0.0..1.0);
            Detection {
                bbox: BoundingBox::new(
                    r.gen_range(0.0..100.0),
                    r.gen_range(0.0..100.0),
                    r.gen_range(2.0..40.0),
                    r.gen_range(2.0..40.0),
                ),
                class_id: r.gen_range(0..3),
                score: if quantised {
                    (score * 10.0).round() / 10.0
                } else {
                    score
                },
            }
        })
        .collect()
}

/// Repeatedly takes the best remaining candidate (earliest on ties) and
/// strikes every same-class candidate that overlaps it beyond `t`.
fn brute_force_nms(dets: &[Detection], t: f64) -> Vec<Detection> {
    let mut alive = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(dets[b]);
        for i in 0..dets.len() {
            if alive[i]
                && dets[i].class_id == dets[b].class_id
                && diou(&dets[b].bbox, &dets[i].bbox) > t
            {
                alive[i] = false;
            }
        }
    }
    out
}

#[test]
fn nms_matches_brute_force_over_100_seeds() {
    let mut suppressed = 0;
    for seed in 0..100 {
        let mut r = rng(seed);
        let dets = random_detections(&mut r, 50, seed % 2 == 1);
        let got = diou_nms(&dets, 0.45);
        assert_eq!(got, brute_force_nms(&dets, 0.45), "seed {seed}");
        suppressed += dets.len() - got.len();
    }
    assert!(suppressed > 100, "oracle never exercised suppression");
}

#[test]
fn nms_small_cases() {
    let d = |score| Detection {
        bbox: BoundingBox::new(5.0, 5.0, 4.0, 4.0),
        class_id: 0,
        score,
    };
    assert_eq!(diou_nms(&[d(0.3)], 0.5), vec![d(0.3)]);
    assert_eq!(diou_nms(&[d(0.8), d(0.9)], 0.5), vec![d(0.9)]);
    assert!(diou_nms(&[], 0.5).is_empty());
}

#[test]
fn diou_hand_geometry() {
    let unit = BoundingBox::from_corners(0.0, 0.0, 1.0, 1.0);
    assert!((diou(&unit, &unit) - 1.0).abs() < 1e-12);
    let diagonal = BoundingBox::from_corners(1.0, 1.0, 2.0, 2.0);
    assert!((diou(&unit, &diagonal) + 0.25).abs() < 1e-12);
    let a = BoundingBox::from_corners(0.0, 0.0, 2.0, 2.0);
    let b = BoundingBox::from_corners(1.0, 1.0, 3.0, 3.0);
    assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    let inner = BoundingBox::new(1.0, 1.0, 0.5, 1.5);
    assert_eq!(diou(&a, &inner), iou(&a, &inner));
}

fn level() -> LevelSpec {
    LevelSpec {
        stride: 8,
        anchors: vec![
            Anchor::new(8.0, 8.0),
            Anchor::new(12.0, 16.0),
            Anchor::new(16.0, 12.0),
        ],
    }
}

#[test]
fn decode_matches_threshold_scan() {
    let k = 4;
    let fields = BOX_FIELDS + k;
    for seed in 0..20 {
        let mut r = rng(seed);
        let (h, w) = (r.gen_range(1..6), r.gen_range(1..6));
        let raw = Tensor::uniform(&[3 * fields, h, w], -3.0, 3.0, &mut r);
        let thr = r.gen_range(0.05..0.6);
        let got = decode_predictions(&raw, &level(), k, thr).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let at = |ch: usize, y: usize, x: usize| raw.data()[(ch * h + y) * w + x];
        let mut expected = Vec::new();
        for a in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..k {
                        let score =
                            sig(at(a * fields + 4, y, x)) * sig(at(a * fields + 5 + c, y, x));
                        if score > thr {
                            let anchor = level().anchors[a];
                            let bbox = BoundingBox::new(
                                (sig(at(a * fields, y, x)) + x as f64) * 8.0,
                                (sig(at(a * fields + 1, y, x)) + y as f64) * 8.0,
                                anchor.w * at(a * fields + 2, y, x).exp(),
                                anchor.h * at(a * fields + 3, y, x).exp(),
                            );
                            expected.push((bbox, c, score));
                        }
                    }
                }
            }
        }
        assert_eq!(got.len(), expected.len(), "seed {seed}");
        for (d, (b, c, s)) in got.iter().zip(&expected) {
            assert_eq!(d.class_id, *c);
            assert!((d.score - s).abs() < 1e-12);
            let e = [
                d.bbox.cx - b.cx,
                d.bbox.cy - b.cy,
                d.bbox.w - b.w,
                d.bbox.h - b.h,
            ];
            assert!(e.iter().all(|v| v.abs() < 1e-12));
        }
    }
    assert!(decode_predictions(&Tensor::zeros(&[20, 2, 2]), &level(), 2, 0.25).is_err());
}

#[test]
fn zero_offsets_decode_to_cell_centre_and_anchor() {
    let raw = Tensor::zeros(&[21, 2, 2]);
    let b = decode_box(&raw, Anchor::new(10.0, 13.0), 8, 0, 0, 0, 2);
    assert_eq!((b.cx, b.cy, b.w, b.h), (4.0, 4.0, 10.0, 13.0));
}

/// Raw maps with every objectness at `-far`, then each target planted
/// exactly at its assigned slot with confident objectness and class logits.
fn planted(
    levels: &[LevelSpec],
    grids: &[(usize, usize)],
    targets: &[Target],
    k: usize,
    far: f64,
) -> Vec<Tensor> {
    let fields = BOX_FIELDS + k;
    let mut raw: Vec<Tensor> = levels
        .iter()
        .zip(grids)
        .map(|(l, &(h, w))| {
            let mut t = Tensor::zeros(&[l.anchors.len() * fields, h, w]);
            for a in 0..l.anchors.len() {
                t.data_mut()[(a * fields + 4) * h * w..(a * fields + 5) * h * w].fill(-far);
            }
            t
        })
        .collect();
    for asg in assign_targets(targets, levels, grids) {
        let t = &targets[asg.target];
        let (h, w) = grids[asg.level];
        let lv = &levels[asg.level];
        let enc = encode_box(&t.bbox, lv.anchors[asg.anchor], lv.stride, asg.gy, asg.gx);
        let base = asg.anchor * fields;
        let data = raw[asg.level].data_mut();
        let mut set = |f: usize, v: f64| data[((base + f) * h + asg.gy) * w + asg.gx] = v;
        for (f, v) in enc.iter().enumerate() {
            set(f, *v);
        }
        set(4, far);
        for c in 0..k {
            set(BOX_FIELDS + c, if c == t.class_id { far } else { -far });
        }
    }
    raw
}

fn fit_targets() -> Vec<Target> {
    vec![
        Target {
            bbox: BoundingBox::new(20.5, 30.25, 9.0, 7.5),
            class_id: 1,
            weight: 1.0,
        },
        Target {
            bbox: BoundingBox::new(44.0, 12.0, 13.0, 17.0),
            class_id: 0,
            weight: 1.0,
        },
    ]
}

#[test]
fn confident_exact_predictions_cost_almost_nothing() {
    let levels = [level()];
    let grids = [(8, 8)];
    let targets = fit_targets();
    let raw = planted(&levels, &grids, &targets, 2, 30.0);
    let cfg = LossConfig {
        smoothing: 0.0,
        ..LossConfig::default()
    };
    let out = detection_loss(&raw, &levels, &targets, 2, &cfg).unwrap();
    assert_eq!(out.positives, 2);
    assert!(out.box_loss.abs() < 1e-9);
    assert!(out.total < 0.01, "total {}", out.total);
}

fn soft_focal_floor(y: f64) -> f64 {
    (1..10_000)
        .map(|i| {
            let p = i as f64 / 10_000.0;
            let pos = -0.25 * (1.0 - p).powi(2) * p.ln();
            let neg = -0.75 * p.powi(2) * (1.0 - p).ln();
            y * pos + (1.0 - y) * neg
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn default_smoothing_leaves_a_class_loss_floor() {
    let (eps, k) = (0.1, 2);
    let floor = 0.5 * (soft_focal_floor(1.0 - eps + eps / 2.0) + soft_focal_floor(eps / 2.0));
    assert!((floor - 0.0240).abs() < 1e-4);
    let levels = [level()];
    let grids = [(8, 8)];
    let targets = &fit_targets()[..1];
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let mut lowest = f64::INFINITY;
    for i in 1..50 {
        for j in 1..50 {
            let mut raw = planted(&levels, &grids, targets, k, 30.0);
            let asg = assign_targets(targets, &levels, &grids)[0];
            let base = asg.anchor * (BOX_FIELDS + k);
            let cell = asg.gy * 8 + asg.gx;
            raw[0].data_mut()[(base + BOX_FIELDS + 1) * 64 + cell] = logit(i as f64 / 50.0);
            raw[0].data_mut()[(base + BOX_FIELDS) * 64 + cell] = logit(j as f64 / 50.0);
            let out = detection_loss(&raw, &levels, targets, k, &LossConfig::default()).unwrap();
            lowest = lowest.min(out.total);
        }
    }
    assert!(lowest >= floor - 1e-9 && lowest > 0.01, "lowest {lowest}");
}

#[test]
fn empty_targets_leave_only_objectness() {
    let mut r = rng(3);
    let raw = vec![Tensor::uniform(&[21, 4, 4], -2.0, 2.0, &mut r)];
    let out = detection_loss(&raw, &[level()], &[], 2, &LossConfig::default()).unwrap();
    assert_eq!(out.box_loss, 0.0);
    assert_eq!(out.cls, 0.0);
    assert_eq!(out.positives, 0);
    assert!(out.obj > 0.0);
    assert_eq!(out.total, out.obj);
}

#[test]
fn assignment_picks_best_anchor_shape_and_first_claim() {
    let levels = [level()];
    let tall = |cx| Target {
        bbox: BoundingBox::new(cx, 20.0, 12.0, 16.0),
        class_id: 0,
        weight: 1.0,
    };
    let asg = assign_targets(&[tall(20.0), tall(21.0)], &levels, &[(8, 8)]);
    assert_eq!(asg.len(), 1);
    assert_eq!(
        (asg[0].target, asg[0].anchor, asg[0].gy, asg[0].gx),
        (0, 1, 2, 2)
    );
}

#[test]
fn focal_reductions_and_reference_value() {
    let f = focal_loss(0.5, true, 0.25, 2.0);
    assert!((f.loss - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
    assert!((f.loss - 0.043321).abs() < 1e-6);
    let mut r = rng(4);
    for _ in 0..100 {
        let p: f64 = r.gen_range(1e-6..1.0 - 1e-6);
        assert!((focal_loss(p, true, 1.0, 0.0).loss + p.ln()).abs() < 1e-12);
        assert!((focal_loss(p, false, 0.0, 0.0).loss + (1.0 - p).ln()).abs() < 1e-12);
    }
    let clamped = focal_loss(1.0, true, 0.25, 2.0);
    assert!(clamped.clamped && clamped.loss < 1e-12);
}

#[test]
fn label_smoothing_keeps_mass_and_argmax() {
    let mut r = rng(5);
    for k in [2usize, 20, 80] {
        for _ in 0..20 {
            let hot = r.gen_range(0..k);
            let mut onehot = vec![0.0; k];
            onehot[hot] = 1.0;
            let s = label_smooth(&onehot, 0.1).unwrap();
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12, "K {k}");
            let argmax = (0..k).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
            assert_eq!(argmax, hot);
            assert!(s.iter().enumerate().all(|(i, &v)| i == hot || v < s[hot]));
        }
    }
    assert_eq!(label_smooth(&[0.0, 1.0], 0.0).unwrap(), vec![0.0, 1.0]);
    let s = label_smooth(&[1.0, 0.0], 0.1).unwrap();
    assert!((s[0] - 0.95).abs() < 1e-15 && (s[1] - 0.05).abs() < 1e-15);
    assert!(label_smooth(&[1.0], 1.0).is_err());
}

fn boxes() -> impl Strategy<Value = BoundingBox> {
    (0.0f64..50.0, 0.0f64..50.0, 0.1f64..30.0, 0.1f64..30.0)
        .prop_map(|(cx, cy, w, h)| BoundingBox::new(cx, cy, w, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn diou_never_exceeds_iou(a in boxes(), b in boxes()) {
        let (v, d) = (iou(&a, &b), diou(&a, &b));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!(d > -1.0 && d <= v);
        if a.cx != b.cx || a.cy != b.cy {
            prop_assert!(d < v);
        }
        let concentric = BoundingBox::new(a.cx, a.cy, b.w, b.h);
        prop_assert_eq!(diou(&a, &concentric), iou(&a, &concentric));
    }

    #[test]
    fn nms_output_is_an_ordered_idempotent_subset(seed in any::<u64>(), n in 0usize..40, t in 0.1f64..0.9) {
        let dets = random_detections(&mut rng(seed), n, seed % 2 == 0);
        let out = diou_nms(&dets, t);
        prop_assert!(out.iter().all(|d| dets.contains(d)));
        prop_assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
        prop_assert_eq!(diou_nms(&out, t), out);
    }

    #[test]
    fn encode_inverts_decode(
        tx in -4.0f64..4.0, ty in -4.0f64..4.0, tw in -2.0f64..2.0, th in -2.0f64..2.0,
        gy in 0usize..4, gx in 0usize..4, a in 0usize..3,
    ) {
        let k = 2;
        let mut raw = Tensor::zeros(&[3 * (BOX_FIELDS + k), 4, 4]);
        let base = a * (BOX_FIELDS + k);
        for (f, v) in [tx, ty, tw, th].into_iter().enumerate() {
            raw.data_mut()[((base + f) * 4 + gy) * 4 + gx] = v;
        }
        let anchor = level().anchors[a];
        let b = decode_box(&raw, anchor, 8, a, gy, gx, k);
        let back = encode_box(&b, anchor, 8, gy, gx);
        for (x, y) in back.iter().zip([tx, ty, tw, th]) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn focal_is_nonnegative_and_falls_as_pt_rises(p in 0.001f64..0.998, dp in 0.0005f64..0.001, alpha in 0.05f64..0.95, gamma in 0.0f64..4.0) {
        for positive in [true, false] {
            let a = focal_loss(p, positive, alpha, gamma).loss;
            let shifted = if positive { p + dp } else { p - dp };
            let b = focal_loss(shifted, positive, alpha, gamma).loss;
            prop_assert!(a >= 0.0 && b >= 0.0);
            prop_assert!(b < a);
        }
    }

    #[test]
    fn label_smoothing_preserves_mass_for_any_distribution(
        raw in prop::collection::vec(0.0f64..1.0, 2..80), eps in 0.0f64..0.99,
    ) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 0.0);
        let y: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let s = label_smooth(&y, eps).unwrap();
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
