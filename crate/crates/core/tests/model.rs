mod common;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::directional_error;
use yolo3a::checks::randomize;
use yolo3a::config::{ModelConfig, Variant};
use yolo3a::layers::param_count;
use yolo3a::model::Model;
use yolo3a::train::{loss_and_grads, toy_scene};
use yolo3a::Tensor;

fn build(variant: Variant) -> Model {
    Model::build(&ModelConfig::for_variant(variant)).unwrap()
}

#[test]
fn variant_structure() {
    let full = build(Variant::Full);
    let tiny = build(Variant::Tiny);
    let nano = build(Variant::Nano);
    assert_eq!(full.dynamic_blocks_per_head(), [2; 3]);
    assert_eq!(tiny.dynamic_blocks_per_head(), [1; 3]);
    assert_eq!(tiny.ca_taps(), 3);
    assert_eq!(full.ca_taps(), 3);
    let convs = nano.spatial_convs();
    assert!(!convs.is_empty());
    for (name, conv) in convs {
        assert!(conv.is_depthwise(), "{name}");
    }
    assert!(full.spatial_convs().iter().any(|(_, c)| c.groups == 1));
    assert!(param_count(&tiny) < param_count(&full));
    assert!(param_count(&nano) < param_count(&tiny));
}

#[test]
fn inference_shapes_and_latency() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for variant in Variant::ALL {
        let model = build(variant);
        let image = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut r);
        let start = Instant::now();
        let raw = model.forward(&image).unwrap();
        let dets = model.postprocess(&raw).unwrap();
        let elapsed = start.elapsed();
        assert!(elapsed.as_secs_f64() < 1.0, "{variant}: {elapsed:?}");
        for (t, side) in raw.iter().zip([8, 4, 2]) {
            assert_eq!(t.shape(), [21, side, side]);
        }
        assert!(dets.iter().all(|d| d.score > 0.25));
    }
    assert!(build(Variant::Tiny)
        .forward(&Tensor::zeros(&[3, 48, 64]))
        .is_err());
    assert!(build(Variant::Tiny)
        .forward(&Tensor::zeros(&[1, 64, 64]))
        .is_err());
}

#[test]
fn zero_model_detects_nothing() {
    let mut model = build(Variant::Full);
    yolo3a::layers::Parameters::visit_mut(&mut model, "", &mut |_, t| t.fill(0.0));
    let dets = model.detect(&Tensor::full(&[3, 64, 64], 0.5)).unwrap();
    assert!(dets.is_empty());
}

#[test]
fn full_model_loss_gradient_matches_central_difference() {
    let mut cfg = ModelConfig::for_variant(Variant::Full);
    cfg.widths = [8, 16, 32];
    cfg.ca_ratio = 8;
    let sample = toy_scene(&cfg, 3).unwrap();
    for seed in 0..3 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::build(&cfg).unwrap();
        randomize(&mut model, 0.3, &mut r);
        let (_, grads) = loss_and_grads(&model, &sample).unwrap();
        let loss = |m: &Model| loss_and_grads(m, &sample).unwrap().0.total;
        let err = directional_error(&model, &grads, loss, &mut r);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}
