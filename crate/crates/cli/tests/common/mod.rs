#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use yolo3a::config::ModelConfig;
use yolo3a::io::{save_weights, write_ppm};
use yolo3a::layers::Parameters;
use yolo3a::model::Model;
use yolo3a::Tensor;

pub fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_yolo3a"))
        .args(args)
        .output()
        .expect("spawn yolo3a")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

pub fn tiny_config() -> (PathBuf, ModelConfig) {
    let path = repo("configs/tiny.cfg");
    let cfg = ModelConfig::parse(&std::fs::read_to_string(&path).unwrap()).unwrap();
    (path, cfg)
}

pub fn write_image(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let path = dir.join(name);
    let img = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut r);
    std::fs::write(&path, write_ppm(&img).unwrap()).unwrap();
    path
}

pub fn zero_model(cfg: &ModelConfig) -> Model {
    let mut m = Model::build(cfg).unwrap();
    m.visit_mut("", &mut |_, t| t.fill(0.0));
    m
}

/// Zero model whose P3 head fires only in the bottom-right cell, anchor 0,
/// class 0, with zero box offsets.
///
/// The neck emits a constant P3; the head's first hidden channel reads the
/// centre tap minus the taps below and to the right, which is positive only
/// where both of those fall on zero padding.
pub fn planted_model(cfg: &ModelConfig) -> Model {
    let mut m = zero_model(cfg);
    let fields = 5 + cfg.num_classes;
    let hidden = cfg.widths[0];
    m.visit_mut("", &mut |name, t| {
        let d = t.data_mut();
        match name {
            "neck.fuse3_td.4.conv.bias" => d.fill(1.0),
            "head_p3.blocks.0.spatial.tap_weights" => d[4] = 1.0,
            "head_p3.hidden.conv.weight" => {
                d[4] = 1.0;
                d[5] = -1.0;
                d[7] = -1.0;
            }
            "head_p3.predict.weight" => d[4 * hidden] = 100.0,
            "head_p3.predict.bias" => {
                d[4] = -5.0;
                d[5] = 10.0;
                d[6] = -10.0;
                for a in 1..3 {
                    d[a * fields + 4] = -20.0;
                }
            }
            _ => {}
        }
    });
    m
}

pub fn save(model: &Model, dir: &Path, name: &str) -> PathBuf {
    let path = dir.join(name);
    save_weights(model, &path).unwrap();
    path
}
