//! Flat `section.key = value` configuration with per-variant defaults.

use std::fmt;
use std::str::FromStr;

use crate::attention::{DEFAULT_LAMBDA_A, DEFAULT_LAMBDA_B, DEFAULT_REDUCTION};
use crate::coord::DEFAULT_RATIO;
use crate::error::{Error, Result};
use crate::neck::validate_widths;
use crate::postproc::{Anchor, LossConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    Tiny,
    Nano,
    XToy,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::Tiny, Variant::Nano, Variant::XToy];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Tiny => "tiny",
            Variant::Nano => "nano",
            Variant::XToy => "x-toy",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected full, tiny, nano or x-toy)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augmentation {
    Mosaic,
    Mixup,
}

impl Augmentation {
    pub fn name(self) -> &'static str {
        match self {
            Augmentation::Mosaic => "mosaic",
            Augmentation::Mixup => "mixup",
        }
    }
}

impl FromStr for Augmentation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mosaic" => Ok(Augmentation::Mosaic),
            "mixup" => Ok(Augmentation::Mixup),
            _ => Err(format!(
                "unknown augmentation `{s}` (expected mosaic or mixup)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub augmentation: Augmentation,
    pub mosaic_scale: (f64, f64),
    pub mosaic_shift: f64,
    pub mixup_lambda: f64,
    pub image_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub widths: [usize; 3],
    pub dynamic_blocks: usize,
    pub depthwise: bool,
    pub csp: bool,
    pub seed: u64,
    pub anchors: [Vec<Anchor>; 3],
    pub conf_threshold: f64,
    pub nms_threshold: f64,
    pub loss: LossConfig,
    pub ca_ratio: usize,
    pub dyrelu_reduction: usize,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub train: TrainConfig,
}

fn default_anchors() -> [Vec<Anchor>; 3] {
    let a = |v: &[(f64, f64)]| v.iter().map(|&(w, h)| Anchor::new(w, h)).collect();
    [
        a(&[(8.0, 8.0), (12.0, 16.0), (16.0, 12.0)]),
        a(&[(20.0, 20.0), (24.0, 32.0), (32.0, 24.0)]),
        a(&[(40.0, 40.0), (48.0, 56.0), (56.0, 48.0)]),
    ]
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let mut cfg = Self {
            variant,
            num_classes: 2,
            widths: [16, 32, 64],
            dynamic_blocks: 2,
            depthwise: false,
            csp: false,
            seed: 0,
            anchors: default_anchors(),
            conf_threshold: 0.25,
            nms_threshold: 0.45,
            loss: LossConfig::default(),
            ca_ratio: DEFAULT_RATIO,
            dyrelu_reduction: DEFAULT_REDUCTION,
            lambda_a: DEFAULT_LAMBDA_A,
            lambda_b: DEFAULT_LAMBDA_B,
            train: TrainConfig {
                augmentation: Augmentation::Mosaic,
                mosaic_scale: (0.5, 1.5),
                mosaic_shift: 0.05,
                mixup_lambda: 0.5,
                image_size: 64,
                lr: 0.01,
            },
        };
        match variant {
            Variant::Full => {}
            Variant::Tiny => cfg.dynamic_blocks = 1,
            Variant::Nano => {
                cfg.dynamic_blocks = 1;
                cfg.depthwise = true;
                cfg.train.augmentation = Augmentation::Mixup;
            }
            Variant::XToy => {
                cfg.widths = [32, 64, 128];
                cfg.train.mosaic_scale = (0.25, 1.75);
                cfg.train.mosaic_shift = 0.1;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("config", reason));
        if self.num_classes == 0 {
            return bad("model.num_classes must be at least 1".into());
        }
        if !(1..=2).contains(&self.dynamic_blocks) {
            return bad(format!(
                "model.dynamic_blocks must be 1 or 2, got {}",
                self.dynamic_blocks
            ));
        }
        validate_widths(self.widths, self.ca_ratio).map_err(|e| Error::invalid("config", e))?;
        for (l, level) in self.anchors.iter().enumerate() {
            if level.is_empty() {
                return bad(format!("anchors.p{} is empty", l + 3));
            }
            if level.len() != self.anchors[0].len() {
                return bad("every level needs the same anchor count".into());
            }
            if level
                .iter()
                .any(|a| !(a.w > 0.0 && a.h > 0.0 && a.w.is_finite() && a.h.is_finite()))
            {
                return bad(format!("anchors.p{} has a non-positive extent", l + 3));
            }
        }
        for (key, v) in [
            ("thresholds.conf", self.conf_threshold),
            ("thresholds.nms", self.nms_threshold),
            ("train.mixup_lambda", self.train.mixup_lambda),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{key} = {v} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.loss.smoothing) {
            return bad(format!(
                "loss.smoothing = {} outside [0, 1)",
                self.loss.smoothing
            ));
        }
        let (lo, hi) = self.train.mosaic_scale;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!(
                "train.mosaic_scale {lo},{hi} must satisfy 0 < lo <= hi"
            ));
        }
        if self.train.image_size == 0 || !self.train.image_size.is_multiple_of(32) {
            return bad(format!(
                "train.image_size {} not a positive multiple of 32",
                self.train.image_size
            ));
        }
        if self.dyrelu_reduction == 0 {
            return bad("dyrelu.reduction must be positive".into());
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = k.trim().to_string();
            if entries.iter().any(|(_, seen, _)| *seen == key) {
                return Err(Error::Config {
                    line: i + 1,
                    reason: format!("duplicate key `{key}`"),
                });
            }
            entries.push((i + 1, key, v.trim().to_string()));
        }

        let variant = match entries.iter().find(|(_, k, _)| k == "model.variant") {
            Some((line, _, v)) => v.parse().map_err(|reason| Error::Config {
                line: *line,
                reason,
            })?,
            None => Variant::Full,
        };
        let mut cfg = Self::for_variant(variant);
        for (line, key, value) in &entries {
            cfg.set(key, value).map_err(|reason| Error::Config {
                line: *line,
                reason,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse `{v}`"))
        }
        fn list<T: FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
            v.split(',').map(|p| num(key, p.trim())).collect()
        }
        fn anchors(key: &str, v: &str) -> std::result::Result<Vec<Anchor>, String> {
            v.split(',')
                .map(|p| {
                    let (w, h) = p
                        .trim()
                        .split_once('x')
                        .ok_or_else(|| format!("{key}: expected `WxH`, got `{p}`"))?;
                    Ok(Anchor::new(num(key, w)?, num(key, h)?))
                })
                .collect()
        }
        match key {
            "model.variant" => self.variant = v.parse()?,
            "model.num_classes" => self.num_classes = num(key, v)?,
            "model.widths" => {
                let w: Vec<usize> = list(key, v)?;
                self.widths = w
                    .try_into()
                    .map_err(|_| format!("{key}: expected three widths"))?;
            }
            "model.dynamic_blocks" => self.dynamic_blocks = num(key, v)?,
            "model.depthwise" => self.depthwise = num(key, v)?,
            "model.csp" => self.csp = num(key, v)?,
            "model.seed" => self.seed = num(key, v)?,
            "anchors.p3" => self.anchors[0] = anchors(key, v)?,
            "anchors.p4" => self.anchors[1] = anchors(key, v)?,
            "anchors.p5" => self.anchors[2] = anchors(key, v)?,
            "thresholds.conf" => self.conf_threshold = num(key, v)?,
            "thresholds.nms" => self.nms_threshold = num(key, v)?,
            "loss.w_box" => self.loss.w_box = num(key, v)?,
            "loss.w_obj" => self.loss.w_obj = num(key, v)?,
            "loss.w_cls" => self.loss.w_cls = num(key, v)?,
            "loss.alpha" => self.loss.alpha = num(key, v)?,
            "loss.gamma" => self.loss.gamma = num(key, v)?,
            "loss.smoothing" => self.loss.smoothing = num(key, v)?,
            "ca.ratio" => self.ca_ratio = num(key, v)?,
            "dyrelu.reduction" => self.dyrelu_reduction = num(key, v)?,
            "dyrelu.lambda_a" => self.lambda_a = num(key, v)?,
            "dyrelu.lambda_b" => self.lambda_b = num(key, v)?,
            "train.augmentation" => self.train.augmentation = v.parse()?,
            "train.mosaic_scale" => {
                let s: Vec<f64> = list(key, v)?;
                let [lo, hi]: [f64; 2] = s
                    .try_into()
                    .map_err(|_| format!("{key}: expected `lo,hi`"))?;
                self.train.mosaic_scale = (lo, hi);
            }
            "train.mosaic_shift" => self.train.mosaic_shift = num(key, v)?,
            "train.mixup_lambda" => self.train.mixup_lambda = num(key, v)?,
            "train.image_size" => self.train.image_size = num(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key, in a fixed order; parsing the result gives back `self`.
    pub fn serialize(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let anchors = |l: &[Anchor]| {
            join(
                &l.iter()
                    .map(|a| format!("{}x{}", a.w, a.h))
                    .collect::<Vec<_>>(),
            )
        };
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        put("model.variant", self.variant.to_string());
        put("model.num_classes", self.num_classes.to_string());
        put("model.widths", join(&self.widths.map(|w| w.to_string())));
        put("model.dynamic_blocks", self.dynamic_blocks.to_string());
        put("model.depthwise", self.depthwise.to_string());
        put("model.csp", self.csp.to_string());
        put("model.seed", self.seed.to_string());
        put("anchors.p3", anchors(&self.anchors[0]));
        put("anchors.p4", anchors(&self.anchors[1]));
        put("anchors.p5", anchors(&self.anchors[2]));
        put("thresholds.conf", self.conf_threshold.to_string());
        put("thresholds.nms", self.nms_threshold.to_string());
        put("loss.w_box", self.loss.w_box.to_string());
        put("loss.w_obj", self.loss.w_obj.to_string());
        put("loss.w_cls", self.loss.w_cls.to_string());
        put("loss.alpha", self.loss.alpha.to_string());
        put("loss.gamma", self.loss.gamma.to_string());
        put("loss.smoothing", self.loss.smoothing.to_string());
        put("ca.ratio", self.ca_ratio.to_string());
        put("dyrelu.reduction", self.dyrelu_reduction.to_string());
        put("dyrelu.lambda_a", self.lambda_a.to_string());
        put("dyrelu.lambda_b", self.lambda_b.to_string());
        put(
            "train.augmentation",
            self.train.augmentation.name().to_string(),
        );
        put(
            "train.mosaic_scale",
            format!(
                "{},{}",
                self.train.mosaic_scale.0, self.train.mosaic_scale.1
            ),
        );
        put("train.mosaic_shift", self.train.mosaic_shift.to_string());
        put("train.mixup_lambda", self.train.mixup_lambda.to_string());
        put("train.image_size", self.train.image_size.to_string());
        put("train.lr", self.train.lr.to_string());
        out
    }
}
