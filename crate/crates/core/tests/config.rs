use proptest::prelude::*;

use yolo3a::config::{Augmentation, ModelConfig, Variant};
use yolo3a::postproc::Anchor;

fn shipped(name: &str) -> ModelConfig {
    let path = format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"));
    ModelConfig::parse(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn shipped_configs_parse_and_validate() {
    for (name, variant) in [
        ("full.cfg", Variant::Full),
        ("tiny.cfg", Variant::Tiny),
        ("nano.cfg", Variant::Nano),
        ("x-toy.cfg", Variant::XToy),
        ("toy-train.cfg", Variant::Full),
        ("wide-neck.cfg", Variant::Full),
    ] {
        let cfg = shipped(name);
        assert_eq!(cfg.variant, variant, "{name}");
        cfg.validate().unwrap();
        assert_eq!(ModelConfig::parse(&cfg.serialize()).unwrap(), cfg, "{name}");
    }
    assert_eq!(shipped("wide-neck.cfg").widths, [256, 512, 1024]);
}

#[test]
fn malformed_lines_name_their_line() {
    let err = ModelConfig::parse("model.variant = tiny\n\nmodel.bogus = 1\n").unwrap_err();
    assert_eq!(err.kind(), "config");
    assert!(err.to_string().contains("line 3"), "{err}");
    assert!(ModelConfig::parse("model.num_classes = two\n").is_err());
    assert!(ModelConfig::parse("model.seed = 1\nmodel.seed = 2\n").is_err());
}

fn configs() -> impl Strategy<Value = ModelConfig> {
    (
        prop::sample::select(Variant::ALL.to_vec()),
        1usize..100,
        (1usize..=2, any::<bool>(), any::<bool>(), any::<u64>()),
        (0.01f64..0.99, 0.01f64..0.99, 0.0f64..0.5),
        (4.0f64..64.0, 4.0f64..64.0),
        (any::<bool>(), 0.0f64..=1.0, 1e-4f64..0.1),
    )
        .prop_map(
            |(
                variant,
                k,
                (blocks, dw, csp, seed),
                (conf, nms, eps),
                (aw, ah),
                (mix, lambda, lr),
            )| {
                let mut cfg = ModelConfig::for_variant(variant);
                cfg.num_classes = k;
                cfg.dynamic_blocks = blocks;
                cfg.depthwise = dw;
                cfg.csp = csp;
                cfg.seed = seed;
                cfg.conf_threshold = conf;
                cfg.nms_threshold = nms;
                cfg.loss.smoothing = eps;
                cfg.anchors[1][2] = Anchor::new(aw, ah);
                if mix {
                    cfg.train.augmentation = Augmentation::Mixup;
                }
                cfg.train.mixup_lambda = lambda;
                cfg.train.lr = lr;
                cfg
            },
        )
}

proptest! {
    #[test]
    fn serialize_then_parse_is_identity(cfg in configs()) {
        let text = cfg.serialize();
        let back = ModelConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.serialize(), text);
    }
}
