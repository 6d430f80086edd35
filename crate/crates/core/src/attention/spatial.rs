//! Spatial-aware attention: modulated deformable sampling of the first level
//! with per-tap weights, broadcast back to every level. Offsets and
//! modulations are predicted from the level-averaged view.

use rand::Rng;

use super::{recover, recover_backward, StackedFeature};
use crate::error::{Error, Result};
use crate::layers::{join, ConvLayers, ConvUnit, Parameters};
use crate::ops::ConvParams;
use crate::ops::{sigmoid, BilinearTaps};
use crate::tensor::Tensor;

/// Number of sampling locations of the default 3×3 stencil.
pub const DEFAULT_TAPS: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttnParams {
    /// Grid displacement `(dy, dx)` of each tap.
    pub base_offsets: Vec<(f64, f64)>,
    /// Emits `2K` channels, `(Δy, Δx)` interleaved per tap.
    pub offset_predictor: ConvUnit,
    /// Emits `K` pre-sigmoid modulation channels.
    pub modulation_predictor: ConvUnit,
    /// One scalar per tap, shared across channels.
    pub tap_weights: Tensor,
    /// Treat every modulation as exactly 1, skipping the predictor.
    pub unit_modulation: bool,
}

/// Row-major 3×3 stencil, centre tap at index 4.
pub fn stencil_3x3() -> Vec<(f64, f64)> {
    let mut v = Vec::with_capacity(9);
    for dy in -1..=1 {
        for dx in -1..=1 {
            v.push((dy as f64, dx as f64));
        }
    }
    v
}

impl SpatialAttnParams {
    /// Zero-output predictors and a centre-only tap weight.
    pub fn init(channels: usize, separable: bool, rng: &mut impl Rng) -> Self {
        let k = DEFAULT_TAPS;
        let mut tap_weights = Tensor::zeros(&[k]);
        tap_weights.data_mut()[k / 2] = 1.0;
        Self {
            base_offsets: stencil_3x3(),
            offset_predictor: ConvUnit::zero_output(channels, 2 * k, 3, separable, rng),
            modulation_predictor: ConvUnit::zero_output(channels, k, 3, separable, rng),
            tap_weights,
            unit_modulation: false,
        }
    }

    pub fn taps(&self) -> usize {
        self.base_offsets.len()
    }

    fn check(&self, channels: usize) -> Result<()> {
        let k = self.taps();
        let checks = [
            (
                "offset predictor outputs",
                2 * k,
                self.offset_predictor.out_channels(),
            ),
            (
                "modulation predictor outputs",
                k,
                self.modulation_predictor.out_channels(),
            ),
            ("tap weight count", k, self.tap_weights.numel()),
            (
                "offset predictor inputs",
                channels,
                self.offset_predictor.in_channels(),
            ),
            (
                "modulation predictor inputs",
                channels,
                self.modulation_predictor.in_channels(),
            ),
        ];
        for (dim, expected, got) in checks {
            if expected != got {
                return Err(Error::ShapeMismatch {
                    op: "spatial_attention",
                    dim,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }
}

impl ConvLayers for SpatialAttnParams {
    fn conv_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams)>) {
        self.offset_predictor
            .conv_layers(&join(prefix, "offset"), out);
        self.modulation_predictor
            .conv_layers(&join(prefix, "modulation"), out);
    }
}

impl Parameters for SpatialAttnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.offset_predictor.visit(&join(prefix, "offset"), f);
        self.modulation_predictor
            .visit(&join(prefix, "modulation"), f);
        f(&join(prefix, "tap_weights"), &self.tap_weights);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.offset_predictor.visit_mut(&join(prefix, "offset"), f);
        self.modulation_predictor
            .visit_mut(&join(prefix, "modulation"), f);
        f(&join(prefix, "tap_weights"), &mut self.tap_weights);
    }
}

/// Predictor outputs for the aggregation level.
struct Sampling {
    level: Tensor,
    context: Tensor,
    offsets: Tensor,
    modulation_logits: Tensor,
}

impl Sampling {
    fn compute(f: &StackedFeature, p: &SpatialAttnParams) -> Result<Self> {
        p.check(f.channels())?;
        let (h, w) = f.hw();
        let level = f.level_nchw(0);
        let c = f.channels();
        let context = recover(f)?.reshape(&[1, c, h, w])?;
        let offsets = p.offset_predictor.forward(&context)?;
        offsets.ensure_finite("spatial_attention offsets")?;
        let modulation_logits = if p.unit_modulation {
            Tensor::zeros(&[1, p.taps(), h, w])
        } else {
            p.modulation_predictor.forward(&context)?
        };
        Ok(Self {
            level,
            context,
            offsets,
            modulation_logits,
        })
    }

    #[inline]
    fn modulation(&self, p: &SpatialAttnParams, idx: usize) -> f64 {
        if p.unit_modulation {
            1.0
        } else {
            sigmoid(self.modulation_logits.data()[idx])
        }
    }

    /// Sampling position of tap `k` for output cell `(y, x)`.
    #[inline]
    fn position(&self, p: &SpatialAttnParams, k: usize, y: usize, x: usize) -> (f64, f64) {
        let w = self.level.shape()[3];
        let s = self.level.shape()[2] * w;
        let (by, bx) = p.base_offsets[k];
        let off = self.offsets.data();
        let pos = y * w + x;
        (
            y as f64 + by + off[2 * k * s + pos],
            x as f64 + bx + off[(2 * k + 1) * s + pos],
        )
    }
}

/// Absolute `(y, x)` sampling position of every tap at every output cell,
/// tap-major.
pub fn sample_positions(f: &StackedFeature, p: &SpatialAttnParams) -> Result<Vec<(f64, f64)>> {
    let smp = Sampling::compute(f, p)?;
    let (h, w) = f.hw();
    let mut out = Vec::with_capacity(p.taps() * h * w);
    for k in 0..p.taps() {
        for y in 0..h {
            for x in 0..w {
                out.push(smp.position(p, k, y, x));
            }
        }
    }
    Ok(out)
}

pub fn spatial_attention(f: &StackedFeature, p: &SpatialAttnParams) -> Result<StackedFeature> {
    let smp = Sampling::compute(f, p)?;
    let (h, w) = f.hw();
    let (s, c) = (h * w, f.channels());
    let planes = smp.level.data();
    let mut out = vec![0.0; c * s];
    for y in 0..h {
        for x in 0..w {
            let pos = y * w + x;
            for k in 0..p.taps() {
                let (py, px) = smp.position(p, k, y, x);
                let taps = BilinearTaps::locate(h, w, py, px);
                let coef = p.tap_weights.data()[k] * smp.modulation(p, k * s + pos);
                if coef == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    out[ch * s + pos] += coef * taps.value(&planes[ch * s..(ch + 1) * s]);
                }
            }
        }
    }
    StackedFeature::from_chw_levels(&out, f.levels(), None, f)
}

pub fn spatial_attention_backward(
    f: &StackedFeature,
    p: &SpatialAttnParams,
    dy: &StackedFeature,
    grads: &mut SpatialAttnParams,
) -> Result<StackedFeature> {
    let smp = Sampling::compute(f, p)?;
    let (h, w) = f.hw();
    let (s, c) = (h * w, f.channels());
    let k_taps = p.taps();
    let planes = smp.level.data();

    // output is broadcast to every level, so its gradient is the level sum
    let mut dout = vec![0.0; c * s];
    for l in 0..dy.levels() {
        for (o, v) in dout.iter_mut().zip(dy.level_nchw(l).data()) {
            *o += v;
        }
    }

    let mut dlevel = vec![0.0; c * s];
    let mut doff = vec![0.0; 2 * k_taps * s];
    let mut dmod = vec![0.0; k_taps * s];
    let mut dtap = vec![0.0; k_taps];
    for y in 0..h {
        for x in 0..w {
            let pos = y * w + x;
            for k in 0..k_taps {
                let (py, px) = smp.position(p, k, y, x);
                let taps = BilinearTaps::locate(h, w, py, px);
                let wk = p.tap_weights.data()[k];
                let m = smp.modulation(p, k * s + pos);
                for ch in 0..c {
                    let g = dout[ch * s + pos];
                    if g == 0.0 {
                        continue;
                    }
                    let plane = &planes[ch * s..(ch + 1) * s];
                    let v = taps.value(plane);
                    let (gy, gx) = taps.position_grad(plane);
                    dtap[k] += g * m * v;
                    dmod[k * s + pos] += g * wk * v;
                    doff[2 * k * s + pos] += g * wk * m * gy;
                    doff[(2 * k + 1) * s + pos] += g * wk * m * gx;
                    taps.scatter(&mut dlevel[ch * s..(ch + 1) * s], g * wk * m);
                }
            }
        }
    }
    for (g, d) in grads.tap_weights.data_mut().iter_mut().zip(&dtap) {
        *g += d;
    }

    let doff = Tensor::new(&[1, 2 * k_taps, h, w], doff)?;
    let mut dctx = p
        .offset_predictor
        .backward(&smp.context, &doff, &mut grads.offset_predictor)?;
    if !p.unit_modulation {
        let dlogits: Vec<f64> = dmod
            .iter()
            .zip(smp.modulation_logits.data())
            .map(|(d, &z)| {
                let sg = sigmoid(z);
                d * sg * (1.0 - sg)
            })
            .collect();
        let dlogits = Tensor::new(&[1, k_taps, h, w], dlogits)?;
        let dm = p.modulation_predictor.backward(
            &smp.context,
            &dlogits,
            &mut grads.modulation_predictor,
        )?;
        dctx.accumulate(&dm)?;
    }
    let mut dx = recover_backward(f, &dctx.reshape(&[c, h, w])?)?.into_tensor();
    for pos in 0..s {
        for ch in 0..c {
            dx.data_mut()[pos * c + ch] += dlevel[ch * s + pos];
        }
    }
    f.with_data(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::concat_levels;
    use crate::ops::{conv2d, ConvParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn centre_tap_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = concat_levels(&Tensor::uniform(&[4, 5, 6], -1.0, 1.0, &mut rng)).unwrap();
        let mut p = SpatialAttnParams::init(4, false, &mut rng);
        p.unit_modulation = true;
        let y = spatial_attention(&f, &p).unwrap();
        assert_eq!(y, f);
    }

    #[test]
    fn uniform_taps_match_box_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[1, 4, 8, 8], -1.0, 1.0, &mut rng);
        let f = concat_levels(&x.clone().reshape(&[4, 8, 8]).unwrap()).unwrap();
        let mut p = SpatialAttnParams::init(4, false, &mut rng);
        p.unit_modulation = true;
        p.tap_weights.fill(1.0 / 9.0);
        let y = spatial_attention(&f, &p).unwrap();

        let mut box_filter = ConvParams::zeros(4, 4, 3, 1, 4);
        box_filter.weight.fill(1.0 / 9.0);
        let expect = conv2d(&x, &box_filter).unwrap();
        assert!(y.level_nchw(1).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn half_cell_offset_samples_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = Tensor::zeros(&[1, 3, 3]);
        x.data_mut()[..2].copy_from_slice(&[1.0, 2.0]);
        x.data_mut()[3..5].copy_from_slice(&[3.0, 4.0]);
        let f = concat_levels(&x).unwrap();
        let mut p = SpatialAttnParams::init(1, false, &mut rng);
        p.unit_modulation = true;
        p.offset_predictor.output_conv_mut().bias.fill(0.5);
        let y = spatial_attention(&f, &p).unwrap();
        assert_eq!(y.level_nchw(0).data()[0], 2.5);
    }

    #[test]
    fn non_finite_offsets_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = concat_levels(&Tensor::full(&[2, 3, 3], 1.0)).unwrap();
        let mut p = SpatialAttnParams::init(2, false, &mut rng);
        p.offset_predictor.output_conv_mut().bias.fill(f64::NAN);
        assert!(spatial_attention(&f, &p).is_err());
    }
}
