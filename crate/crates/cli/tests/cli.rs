mod common;

use common::{
    cli, planted_model, repo, save, stderr, stdout, tiny_config, write_image, zero_model,
};

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn planted_cell_gives_one_detection_at_its_decoded_location() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg_path, cfg) = tiny_config();
    let weights = save(&planted_model(&cfg), dir.path(), "planted.3aw");
    let image = write_image(dir.path(), "scene.ppm", 1);
    let out = cli(&[
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    // Cell (7, 7) at stride 8 with zero offsets decodes to the cell centre
    // (0.5 + 7) · 8 and the 8×8 anchor.
    let score = sig(20.0) * sig(10.0);
    let expected = format!("scene 0 {score:.6} 60.000000 60.000000 8.000000 8.000000\n");
    assert_eq!(stdout(&out), expected);
}

#[test]
fn zero_model_emits_nothing_and_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg_path, cfg) = tiny_config();
    let weights = save(&zero_model(&cfg), dir.path(), "zero.3aw");
    let image = write_image(dir.path(), "img.ppm", 2);
    let args = [
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
    ];
    let out = cli(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out.stdout.is_empty());

    let seeded = save(
        &yolo3a::model::Model::build(&cfg).unwrap(),
        dir.path(),
        "init.3aw",
    );
    let mut again = args;
    again[4] = seeded.to_str().unwrap();
    let (a, b) = (cli(&again), cli(&again));
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn feature_dumps_are_graymaps() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg_path, cfg) = tiny_config();
    let weights = save(
        &yolo3a::model::Model::build(&cfg).unwrap(),
        dir.path(),
        "w.3aw",
    );
    let image = write_image(dir.path(), "img.ppm", 3);
    let dump = dir.path().join("maps");
    let out = cli(&[
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--dump-features",
        dump.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for tap in ["c3", "ca4", "p5", "tda3"] {
        let bytes = std::fs::read(dump.join(format!("{tap}.pgm"))).unwrap();
        assert_eq!(&bytes[..2], b"P5");
    }
}

fn assert_one_line_error(out: &std::process::Output, kind: &str) {
    assert!(!out.status.success());
    let err = stderr(out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{kind}]: ")), "{err}");
}

#[test]
fn failures_are_one_line_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg_path, cfg) = tiny_config();
    let cfg_arg = cfg_path.to_str().unwrap();
    let image = write_image(dir.path(), "img.ppm", 4);
    let weights = save(&zero_model(&cfg), dir.path(), "w.3aw");
    let bytes = std::fs::read(&weights).unwrap();
    let truncated = dir.path().join("short.3aw");
    std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    let run = |w: &std::path::Path, img: &std::path::Path| {
        cli(&[
            "run",
            "--config",
            cfg_arg,
            "--weights",
            w.to_str().unwrap(),
            "--image",
            img.to_str().unwrap(),
        ])
    };
    let out = run(&truncated, &image);
    assert_one_line_error(&out, "weights");
    assert!(stderr(&out).contains("truncated"));

    let bad_image = dir.path().join("bad.ppm");
    std::fs::write(&bad_image, b"P3\n1 1\n255\n0 0 0\n").unwrap();
    let out = run(&weights, &bad_image);
    assert_one_line_error(&out, "malformed");
    assert!(stderr(&out).contains("byte"));

    let bad_cfg = dir.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "model.variant = huge\n").unwrap();
    assert_one_line_error(
        &cli(&["params", "--config", bad_cfg.to_str().unwrap()]),
        "config",
    );
    assert_one_line_error(&cli(&["gradcheck", "--module", "nope"]), "invalid-argument");

    let usage = cli(&["frobnicate"]);
    assert_eq!(usage.status.code(), Some(2));
    assert!(stderr(&usage).starts_with("error[usage]: "));
}

#[test]
fn corrupted_backward_fails_the_gradcheck() {
    let out = cli(&[
        "gradcheck",
        "--module",
        "coord-attention",
        "--seeds",
        "2",
        "--corrupt-backward",
    ]);
    assert!(!out.status.success());
    assert!(stdout(&out).contains("FAIL"));
    let ok = cli(&["gradcheck", "--module", "coord-attention", "--seeds", "2"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
}

fn table_value(text: &str, key: &str) -> i64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("no `{key}` row in\n{text}"))
}

#[test]
fn params_report_totals_and_csp_delta() {
    let tiny = cli(&[
        "params",
        "--config",
        repo("configs/tiny.cfg").to_str().unwrap(),
    ]);
    let full = cli(&[
        "params",
        "--config",
        repo("configs/full.cfg").to_str().unwrap(),
    ]);
    assert!(table_value(&stdout(&tiny), "total") < table_value(&stdout(&full), "total"));
    let (_, cfg) = tiny_config();
    let model = yolo3a::model::Model::build(&cfg).unwrap();
    assert_eq!(
        table_value(&stdout(&tiny), "total"),
        yolo3a::layers::param_count(&model) as i64
    );

    let out = cli(&[
        "params",
        "--config",
        repo("configs/wide-neck.cfg").to_str().unwrap(),
        "--compare-csp",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let (plain, csp) = (
        table_value(&text, "neck plain"),
        table_value(&text, "neck csp"),
    );
    assert_eq!(table_value(&text, "delta"), plain - csp);
    assert!(plain - csp > 0);
}

fn losses(text: &str) -> Vec<f64> {
    text.lines()
        .map(|l| l.split_whitespace().nth(3).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn train_toy_is_deterministic_and_frozen_at_zero_lr() {
    let cfg = repo("configs/toy-train.cfg");
    let args = [
        "train-toy",
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "5",
        "--seed",
        "3",
    ];
    let (a, b) = (cli(&args), cli(&args));
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(losses(&stdout(&a)).len(), 6);

    let mut frozen = args.to_vec();
    frozen.extend(["--lr", "0"]);
    let curve = losses(&stdout(&cli(&frozen)));
    assert!(curve.iter().all(|&l| l == curve[0]));
}

#[test]
fn weights_selftest_passes() {
    let out = cli(&[
        "weights-io-selftest",
        "--config",
        repo("configs/tiny.cfg").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("round-trip ok"));
    assert!(text.contains("truncated rejected"));
    assert!(text.contains("foreign magic rejected"));
}
