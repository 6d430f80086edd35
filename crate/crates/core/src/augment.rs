//! Seeded Mosaic and Mixup augmentation on labelled images.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::bilinear_sample;
use crate::postproc::{BoundingBox, Target};
use crate::tensor::Tensor;

/// Value written to mosaic cells that no source image covers.
pub const PAD_VALUE: f64 = 0.5;
/// Boxes smaller than this (in px²) after clipping are dropped from a mosaic.
pub const MIN_BOX_AREA: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[3, H, W]` with values in [0, 1].
    pub pixels: Tensor,
    pub boxes: Vec<Target>,
}

impl LabeledImage {
    pub fn new(pixels: Tensor, boxes: Vec<Target>) -> Result<Self> {
        let [c, _, _] = pixels.dims3("labeled image")?;
        if c != 3 {
            return Err(Error::ShapeMismatch {
                op: "labeled image",
                dim: "channels",
                expected: 3,
                got: c,
            });
        }
        Ok(Self { pixels, boxes })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Explicit generator state; the only source of randomness in this module.
#[derive(Clone, Debug)]
pub struct RngState {
    pub seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

pub fn hflip(img: &LabeledImage) -> LabeledImage {
    let w = img.width();
    let src = img.pixels.data();
    let pixels = Tensor::from_fn(img.pixels.shape(), |i| {
        let (row, col) = (i / w, i % w);
        src[row * w + (w - 1 - col)]
    });
    let boxes = img
        .boxes
        .iter()
        .map(|t| Target {
            bbox: BoundingBox::new(w as f64 - t.bbox.cx, t.bbox.cy, t.bbox.w, t.bbox.h),
            ..*t
        })
        .collect();
    LabeledImage { pixels, boxes }
}

/// Adds a constant per channel, then clamps to [0, 1].
pub fn rgb_shift(img: &LabeledImage, shift: [f64; 3]) -> LabeledImage {
    let plane = img.height() * img.width();
    let pixels = Tensor::from_fn(img.pixels.shape(), |i| {
        (img.pixels.data()[i] + shift[i / plane]).clamp(0.0, 1.0)
    });
    LabeledImage {
        pixels,
        boxes: img.boxes.clone(),
    }
}

/// Window into an image rescaled by some factor; may extend past its edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub y: i64,
    pub x: i64,
    pub h: usize,
    pub w: usize,
}

/// Rescales `img` by `scale` and cuts out `window` (in rescaled pixels).
///
/// Window cells outside the rescaled image get `pad`. Boxes are scaled,
/// translated, clipped to the window, and dropped when their area vanishes.
pub fn scale_crop(
    img: &LabeledImage,
    scale: f64,
    window: CropWindow,
    pad: f64,
) -> Result<LabeledImage> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(
            "scale_crop",
            format!("scale {scale} must be positive"),
        ));
    }
    let (h, w) = (img.height(), img.width());
    let sh = (h as f64 * scale).round() as i64;
    let sw = (w as f64 * scale).round() as i64;
    let src = img.pixels.clone().reshape(&[1, 3, h, w])?;
    let mut out = vec![pad; 3 * window.h * window.w];
    let plane = window.h * window.w;
    for i in 0..window.h {
        let sy = window.y + i as i64;
        if sy < 0 || sy >= sh {
            continue;
        }
        let py = ((sy as f64 + 0.5) / scale - 0.5).clamp(0.0, (h - 1) as f64);
        for j in 0..window.w {
            let sx = window.x + j as i64;
            if sx < 0 || sx >= sw {
                continue;
            }
            let px = ((sx as f64 + 0.5) / scale - 0.5).clamp(0.0, (w - 1) as f64);
            for c in 0..3 {
                out[c * plane + i * window.w + j] = bilinear_sample(&src, 0, c, py, px)?;
            }
        }
    }
    let (wx, wy) = (window.x as f64, window.y as f64);
    let (ww, wh) = (window.w as f64, window.h as f64);
    let boxes = img
        .boxes
        .iter()
        .filter_map(|t| {
            let (x1, y1, x2, y2) = t.bbox.corners();
            let x1 = (x1 * scale - wx).clamp(0.0, ww);
            let x2 = (x2 * scale - wx).clamp(0.0, ww);
            let y1 = (y1 * scale - wy).clamp(0.0, wh);
            let y2 = (y2 * scale - wy).clamp(0.0, wh);
            (x2 > x1 && y2 > y1).then(|| Target {
                bbox: BoundingBox::from_corners(x1, y1, x2, y2),
                ..*t
            })
        })
        .collect();
    Ok(LabeledImage {
        pixels: Tensor::new(&[3, window.h, window.w], out)?,
        boxes,
    })
}

/// Sampling ranges for one mosaic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MosaicRanges {
    pub scale: (f64, f64),
    pub shift: f64,
    pub flip_prob: f64,
}

impl Default for MosaicRanges {
    fn default() -> Self {
        Self {
            scale: (0.5, 1.5),
            shift: 0.05,
            flip_prob: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TilePlan {
    pub scale: f64,
    pub flip: bool,
    pub shift: [f64; 3],
}

impl TilePlan {
    pub const IDENTITY: TilePlan = TilePlan {
        scale: 1.0,
        flip: false,
        shift: [0.0; 3],
    };
}

/// Every random choice of one mosaic, so it can be replayed or forced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MosaicPlan {
    /// `(x, y)` of the shared corner, in output pixels.
    pub center: (usize, usize),
    pub tiles: [TilePlan; 4],
}

impl MosaicPlan {
    pub fn sample(size: usize, ranges: &MosaicRanges, rng: &mut impl Rng) -> Self {
        let lo = size / 4;
        let hi = (3 * size / 4).max(lo);
        let cx = rng.gen_range(lo..=hi);
        let cy = rng.gen_range(lo..=hi);
        let tiles = [(); 4].map(|_| TilePlan {
            scale: rng.gen_range(ranges.scale.0..=ranges.scale.1),
            flip: rng.gen_bool(ranges.flip_prob),
            shift: [(); 3].map(|_| rng.gen_range(-ranges.shift..=ranges.shift)),
        });
        Self {
            center: (cx, cy),
            tiles,
        }
    }
}

fn check_four(imgs: &[LabeledImage]) -> Result<()> {
    if imgs.len() != 4 {
        return Err(Error::invalid(
            "mosaic",
            format!("needs exactly 4 images, got {}", imgs.len()),
        ));
    }
    Ok(())
}

/// Tiles four images around `plan.center` into a `size`×`size` canvas.
///
/// Image 0 takes the top-left quadrant with its bottom-right corner at the
/// centre, image 1 top-right, image 2 bottom-left, image 3 bottom-right.
pub fn mosaic_with_plan(
    imgs: &[LabeledImage],
    size: usize,
    plan: &MosaicPlan,
) -> Result<LabeledImage> {
    check_four(imgs)?;
    let (cx, cy) = plan.center;
    if cx > size || cy > size {
        return Err(Error::invalid("mosaic", "centre outside the canvas"));
    }
    let mut canvas = vec![PAD_VALUE; 3 * size * size];
    let mut boxes = Vec::new();
    for (q, (img, tile)) in imgs.iter().zip(&plan.tiles).enumerate() {
        let (right, bottom) = (q % 2 == 1, q / 2 == 1);
        let (x0, x1) = if right { (cx, size) } else { (0, cx) };
        let (y0, y1) = if bottom { (cy, size) } else { (0, cy) };
        if x1 == x0 || y1 == y0 {
            continue;
        }
        let mut src = if tile.flip { hflip(img) } else { img.clone() };
        src = rgb_shift(&src, tile.shift);
        let th = (img.height() as f64 * tile.scale).round() as i64;
        let tw = (img.width() as f64 * tile.scale).round() as i64;
        // Placement of the scaled tile's origin on the canvas.
        let ox = if right { cx as i64 } else { cx as i64 - tw };
        let oy = if bottom { cy as i64 } else { cy as i64 - th };
        let window = CropWindow {
            y: y0 as i64 - oy,
            x: x0 as i64 - ox,
            h: y1 - y0,
            w: x1 - x0,
        };
        let patch = scale_crop(&src, tile.scale, window, PAD_VALUE)?;
        let pd = patch.pixels.data();
        for c in 0..3 {
            for i in 0..window.h {
                let row = &pd[(c * window.h + i) * window.w..][..window.w];
                let dst = (c * size + y0 + i) * size + x0;
                canvas[dst..dst + window.w].copy_from_slice(row);
            }
        }
        for t in patch.boxes {
            let b = t.bbox;
            let bbox = BoundingBox::new(b.cx + x0 as f64, b.cy + y0 as f64, b.w, b.h);
            if bbox.area() >= MIN_BOX_AREA {
                boxes.push(Target { bbox, ..t });
            }
        }
    }
    Ok(LabeledImage {
        pixels: Tensor::new(&[3, size, size], canvas)?,
        boxes,
    })
}

pub fn mosaic(
    imgs: &[LabeledImage],
    size: usize,
    ranges: &MosaicRanges,
    rng: &mut RngState,
) -> Result<LabeledImage> {
    check_four(imgs)?;
    let plan = MosaicPlan::sample(size, ranges, rng.rng());
    mosaic_with_plan(imgs, size, &plan)
}

/// `λ·a + (1−λ)·b`; boxes of both images, weighted by λ and 1−λ.
pub fn mixup(a: &LabeledImage, b: &LabeledImage, lambda: f64) -> Result<LabeledImage> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(
            "mixup",
            format!("lambda {lambda} outside [0, 1]"),
        ));
    }
    if a.pixels.shape() != b.pixels.shape() {
        return Err(Error::invalid(
            "mixup",
            format!(
                "image extents differ: {:?} vs {:?}",
                a.pixels.shape(),
                b.pixels.shape()
            ),
        ));
    }
    let pixels = a.pixels.zip_map(&b.pixels, |x, y| {
        (lambda * x + (1.0 - lambda) * y).clamp(0.0, 1.0)
    })?;
    let weighted = |boxes: &[Target], k: f64| {
        boxes
            .iter()
            .map(move |t| Target {
                weight: t.weight * k,
                ..*t
            })
            .collect::<Vec<_>>()
    };
    let mut boxes = weighted(&a.boxes, lambda);
    boxes.extend(weighted(&b.boxes, 1.0 - lambda));
    Ok(LabeledImage { pixels, boxes })
}
