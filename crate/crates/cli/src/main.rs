use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use yolo3a::checks::{run_suite, Grader};
use yolo3a::config::ModelConfig;
use yolo3a::io::{checksum, encode_weights, feature_map_to_pgm, load_weights, read_ppm};
use yolo3a::layers::{is_trainable, Parameters};
use yolo3a::model::Model;
use yolo3a::train::train_toy;

#[derive(Parser)]
#[command(
    name = "yolo3a",
    version,
    about = "Triple-awareness YOLO detector toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect objects in a binary PPM image.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Write channel-mean PGM maps of every feature tap here.
        #[arg(long)]
        dump_features: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// tensor-core, attention-head, coord-attention or postproc-loss.
        #[arg(long)]
        module: String,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Scale analytic gradients by 1.01 (harness self-test).
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Per-module parameter counts.
    Params {
        #[arg(long)]
        config: PathBuf,
        /// Also report plain vs CSP neck totals.
        #[arg(long)]
        compare_csp: bool,
    },
    /// Gradient descent on a fixed synthetic scene, printing the loss per step.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Defaults to `train.lr` from the config.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Save, reload and corrupt a weight file, checking every step.
    WeightsIoSelftest {
        #[arg(long)]
        config: PathBuf,
        /// Keep the saved file here instead of a scratch location.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    ModelConfig::parse(&text).with_context(|| format!("config {}", path.display()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_run(config: &Path, weights: &Path, image: &Path, dump: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let mut model = Model::build(&cfg)?;
    load_weights(&mut model, &read_file(weights)?)
        .with_context(|| format!("weights {}", weights.display()))?;
    let pixels =
        read_ppm(&read_file(image)?).with_context(|| format!("image {}", image.display()))?;
    let trace = model.trace(&pixels)?;
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let n = &trace.neck;
        let taps = [
            ("c3", &trace.backbone.levels[0]),
            ("c4", &trace.backbone.levels[1]),
            ("c5", &trace.backbone.levels[2]),
            ("ca3", &n.attended[0]),
            ("ca4", &n.attended[1]),
            ("ca5", &n.attended[2]),
            ("p3", &n.p3),
            ("p4", &n.p4),
            ("p5", &n.p5),
            ("tda3", &trace.attended[0]),
            ("tda4", &trace.attended[1]),
            ("tda5", &trace.attended[2]),
        ];
        for (name, t) in taps {
            let path = dir.join(format!("{name}.pgm"));
            std::fs::write(&path, feature_map_to_pgm(t)?)
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    let id = image
        .file_stem()
        .map_or_else(|| "image".into(), |s| s.to_string_lossy());
    for det in model.postprocess(&trace.raw)? {
        println!("{}", det.to_record(&id));
    }
    Ok(())
}

fn cmd_gradcheck(module: &str, seeds: usize, corrupt: bool) -> Result<bool> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let reports = run_suite(module, seeds, Grader { corrupt })?;
    println!(
        "{:<34} {:>8} {:>12} {:>6}  result",
        "check", "tol", "max_rel_err", "seeds"
    );
    let mut ok = true;
    for r in &reports {
        ok &= r.passed();
        println!(
            "{:<34} {:>8.0e} {:>12.3e} {:>6}  {}",
            r.name,
            r.tolerance,
            r.max_rel_error,
            r.seeds,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

/// Trainable counts keyed by the first two name components.
fn grouped_counts(p: &impl Parameters) -> BTreeMap<String, usize> {
    let mut groups = BTreeMap::new();
    p.visit("", &mut |name, t| {
        if is_trainable(name) {
            let key: Vec<&str> = name.split('.').take(2).collect();
            *groups.entry(key.join(".")).or_insert(0) += t.numel();
        }
    });
    groups
}

fn cmd_params(config: &Path, compare_csp: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let model = Model::build(&cfg)?;
    let groups = grouped_counts(&model);
    for (name, n) in &groups {
        println!("{name:<28} {n:>12}");
    }
    println!("{:<28} {:>12}", "total", groups.values().sum::<usize>());
    if compare_csp {
        let neck_total = |csp: bool| -> Result<usize> {
            let mut c = cfg.clone();
            c.csp = csp;
            let m = Model::build(&c)?;
            Ok(yolo3a::layers::param_count(&m.neck))
        };
        let (plain, csp) = (neck_total(false)?, neck_total(true)?);
        println!("{:<28} {:>12}", "neck plain", plain);
        println!("{:<28} {:>12}", "neck csp", csp);
        println!("{:<28} {:>12}", "delta", plain as i64 - csp as i64);
    }
    Ok(())
}

fn cmd_train_toy(config: &Path, steps: usize, seed: u64, lr: Option<f64>) -> Result<()> {
    let cfg = load_config(config)?;
    let lr = lr.unwrap_or(cfg.train.lr);
    train_toy(&cfg, steps, seed, lr, |i, out| {
        println!(
            "step {i} loss {:.9} box {:.6} obj {:.6} cls {:.6}",
            out.total, out.box_loss, out.obj, out.cls
        );
    })?;
    Ok(())
}

fn cmd_weights_selftest(config: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let model = Model::build(&cfg)?;
    let bytes = encode_weights(&model);
    let scratch;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            scratch =
                std::env::temp_dir().join(format!("yolo3a-selftest-{}.3aw", std::process::id()));
            scratch.clone()
        }
    };
    std::fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    let reread = read_file(&path)?;
    if out.is_none() {
        let _ = std::fs::remove_file(&path);
    }

    let mut other = cfg.clone();
    other.seed = cfg.seed.wrapping_add(1);
    let mut loaded = Model::build(&other)?;
    load_weights(&mut loaded, &reread)?;
    let (a, b) = (checksum(&model), checksum(&loaded));
    if a != b {
        bail!("round trip changed the checksum: {a} vs {b}");
    }
    println!("round-trip ok {} bytes sha256 {a}", bytes.len());

    let truncated = &bytes[..bytes.len() - 4];
    match load_weights(&mut loaded, truncated) {
        Err(e) => println!("truncated rejected: {e}"),
        Ok(()) => bail!("truncated file was accepted"),
    }
    let mut foreign = bytes.clone();
    foreign[..4].copy_from_slice(b"GGUF");
    match load_weights(&mut loaded, &foreign) {
        Err(e) => println!("foreign magic rejected: {e}"),
        Ok(()) => bail!("foreign magic was accepted"),
    }
    Ok(())
}

/// Single-line diagnostic: `error[<kind>]: <context>: <cause>`.
fn report(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<yolo3a::Error>())
        .map_or("command", |e| e.kind());
    let msg = err
        .chain()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join(": ");
    format!("error[{kind}]: {}", msg.replace('\n', " "))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let summary: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!(
                "error[usage]: {}",
                summary.join(" ").trim_start_matches("error: ")
            );
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Run {
            config,
            weights,
            image,
            dump_features,
        } => cmd_run(config, weights, image, dump_features.as_deref()).map(|_| true),
        Command::Gradcheck {
            module,
            seeds,
            corrupt_backward,
        } => cmd_gradcheck(module, *seeds, *corrupt_backward),
        Command::Params {
            config,
            compare_csp,
        } => cmd_params(config, *compare_csp).map(|_| true),
        Command::TrainToy {
            config,
            steps,
            seed,
            lr,
        } => cmd_train_toy(config, *steps, *seed, *lr).map(|_| true),
        Command::WeightsIoSelftest { config, out } => {
            cmd_weights_selftest(config, out.as_deref()).map(|_| true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error[gradcheck]: one or more checks exceeded tolerance");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("{}", report(&e));
            ExitCode::FAILURE
        }
    }
}
