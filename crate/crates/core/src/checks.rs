//! Finite-difference verification suites for every hand-written backward.
//!
//! Each check builds a random instance from a seed, projects the output onto
//! a random direction `r` so the loss is `Σ r·y`, and compares the analytic
//! gradients against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    apply_dyrelu, concat_levels, concat_levels_backward, dynamic_block, dynamic_block_backward,
    dyrelu_coefficients, recover, recover_backward, sample_positions, scale_attention,
    scale_attention_backward, scale_gates, spatial_attention, spatial_attention_backward,
    task_attention, task_attention_backward, DyReluParams, DynamicBlockParams, ScaleAttnParams,
    SpatialAttnParams, StackedFeature, TdaHead,
};
use crate::coord::{
    coord_apply, coord_apply_backward, coord_attention, coord_attention_backward, coord_embed,
    coord_generate, coord_generate_backward, CAParams,
};
use crate::error::{Error, Result};
use crate::gradcheck::{
    compare_params, finite_diff_grad, max_rel_error, param_finite_diff, rel_error, DEFAULT_EPS,
};
use crate::layers::{is_trainable, zeroed, Parameters};
use crate::ops::{
    activation, activation_backward, batchnorm_backward, batchnorm_inference, bilinear_sample,
    bilinear_sample_backward, concat, conv2d, conv2d_backward, directional_pool,
    directional_pool_backward, fully_connected, fully_connected_backward, global_avg_pool,
    global_avg_pool_backward, max_pool2d, max_pool2d_backward, split, upsample_nearest,
    upsample_nearest_backward, Activation, BatchNorm, ConvParams,
};
use crate::postproc::{
    detection_loss, diou_with_grad, focal_loss, label_smooth, soft_focal, Anchor, BoundingBox,
    LevelSpec, LossConfig, Target,
};
use crate::tensor::Tensor;

pub const SUITES: [&str; 4] = [
    "tensor-core",
    "attention-head",
    "coord-attention",
    "postproc-loss",
];

/// Tolerance for single operations.
pub const OP_TOL: f64 = 1e-5;
/// Tolerance for composed blocks.
pub const BLOCK_TOL: f64 = 1e-4;

/// Compares analytic against numeric gradients, optionally sabotaging the
/// analytic side to prove the harness can fail.
#[derive(Clone, Copy, Debug, Default)]
pub struct Grader {
    pub corrupt: bool,
}

const CORRUPTION: f64 = 1.01;

impl Grader {
    fn factor(&self) -> f64 {
        if self.corrupt {
            CORRUPTION
        } else {
            1.0
        }
    }

    fn tensor(&self, analytic: &Tensor, numeric: &Tensor) -> f64 {
        max_rel_error(&analytic.scale(self.factor()), numeric)
    }

    fn scalar(&self, analytic: f64, numeric: f64) -> f64 {
        rel_error(analytic * self.factor(), numeric)
    }

    fn params<P: Parameters + Clone>(&self, grads: &P, numeric: &[(String, Tensor)]) -> f64 {
        let mut g = grads.clone();
        let k = self.factor();
        g.visit_mut("", &mut |_, t| *t = t.scale(k));
        compare_params(&g, numeric)
            .into_iter()
            .map(|(_, e)| e)
            .fold(0.0, f64::max)
    }
}

type CheckFn = fn(&mut ChaCha8Rng, Grader) -> Result<f64>;

#[derive(Clone, Copy)]
pub struct Check {
    pub suite: &'static str,
    pub name: &'static str,
    pub tolerance: f64,
    run: CheckFn,
}

impl Check {
    /// Worst relative error of this check for one seed.
    pub fn run(&self, seed: u64, grader: Grader) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (self.run)(&mut rng, grader)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub suite: &'static str,
    pub name: &'static str,
    pub tolerance: f64,
    pub seeds: usize,
    pub max_rel_error: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn project(y: Result<Tensor>, r: &Tensor) -> f64 {
    y.and_then(|y| y.dot(r)).unwrap_or(f64::NAN)
}

fn stacked(levels: usize, c: usize, h: usize, w: usize, rng: &mut impl Rng) -> StackedFeature {
    StackedFeature::new(uniform(&[levels, h * w, c], rng), h, w).expect("consistent shape")
}

/// Replaces every trainable tensor with uniform values in `[-bound, bound]`.
pub fn randomize<P: Parameters>(p: &mut P, bound: f64, rng: &mut impl Rng) {
    p.visit_mut("", &mut |name, t| {
        if is_trainable(name) {
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
        }
    });
}

fn conv_case(p: &ConvParams, x: &Tensor, rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let r = uniform(conv2d(x, p)?.shape(), rng);
    let an = conv2d_backward(x, p, &r)?;
    let nx = finite_diff_grad(|x| project(conv2d(x, p), &r), x, DEFAULT_EPS)?;
    let np = param_finite_diff(p, |p| project(conv2d(x, p), &r), DEFAULT_EPS)?;
    let mut gp = zeroed(p);
    gp.weight = an.dweight;
    gp.bias = an.dbias;
    Ok(g.tensor(&an.dx, &nx).max(g.params(&gp, &np)))
}

fn conv_plain(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let mut p = ConvParams::zeros(3, 4, 3, 1, 1);
    randomize(&mut p, 0.5, rng);
    let x = uniform(&[2, 3, 5, 5], rng);
    conv_case(&p, &x, rng, g)
}

fn conv_grouped(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let mut p = ConvParams::zeros(4, 6, 3, 2, 2);
    p.dilation = 2;
    p.padding = 2;
    randomize(&mut p, 0.5, rng);
    let x = uniform(&[1, 4, 7, 6], rng);
    conv_case(&p, &x, rng, g)
}

fn linear(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let (w, b) = (uniform(&[3, 5], rng), uniform(&[3], rng));
    let x = uniform(&[5], rng);
    let r = uniform(&[3], rng);
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| {
        fully_connected(x.data(), w, b)
            .map(|y| y.iter().zip(r.data()).map(|(a, b)| a * b).sum())
            .unwrap_or(f64::NAN)
    };
    let (dx, dw, db) = fully_connected_backward(x.data(), &w, r.data())?;
    let nx = finite_diff_grad(|x| f(x, &w, &b), &x, DEFAULT_EPS)?;
    let nw = finite_diff_grad(|w| f(&x, w, &b), &w, DEFAULT_EPS)?;
    let nb = finite_diff_grad(|b| f(&x, &w, b), &b, DEFAULT_EPS)?;
    Ok(g.tensor(&Tensor::from_vec(dx), &nx)
        .max(g.tensor(&dw, &nw))
        .max(g.tensor(&db, &nb)))
}

fn max_pool(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let x = uniform(&[1, 2, 5, 5], rng);
    let r = uniform(&[1, 2, 5, 5], rng);
    let an = max_pool2d_backward(&x, 3, &r)?;
    let nx = finite_diff_grad(|x| project(max_pool2d(x, 3), &r), &x, DEFAULT_EPS)?;
    Ok(g.tensor(&an, &nx))
}

fn avg_pool(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let x = uniform(&[2, 3, 4, 5], rng);
    let r = uniform(&[2, 3, 1, 1], rng);
    let an = global_avg_pool_backward(x.shape(), &[2, 3], &r)?;
    let nx = finite_diff_grad(
        |x| project(global_avg_pool(x, &[2, 3]), &r),
        &x,
        DEFAULT_EPS,
    )?;
    Ok(g.tensor(&an, &nx))
}

fn dir_pool(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let x = uniform(&[1, 3, 4, 5], rng);
    let (rh, rw) = (uniform(&[1, 3, 4, 1], rng), uniform(&[1, 3, 1, 5], rng));
    let f = |x: &Tensor| {
        directional_pool(x)
            .and_then(|(qh, qw)| Ok(qh.dot(&rh)? + qw.dot(&rw)?))
            .unwrap_or(f64::NAN)
    };
    let an = directional_pool_backward(x.shape(), &rh, &rw)?;
    Ok(g.tensor(&an, &finite_diff_grad(f, &x, DEFAULT_EPS)?))
}

fn bilinear(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let x = uniform(&[1, 2, 4, 5], rng);
    let c = rng.gen_range(0..2);
    // Off-grid positions, partly outside the map to exercise zero padding.
    let py = rng.gen_range(-0.9..3.9);
    let px = rng.gen_range(-0.9..4.9);
    let (dx, dpy, dpx) = bilinear_sample_backward(&x, 0, c, py, px, 1.0)?;
    let nx = finite_diff_grad(
        |x| bilinear_sample(x, 0, c, py, px).unwrap_or(f64::NAN),
        &x,
        DEFAULT_EPS,
    )?;
    let pos = Tensor::from_vec(vec![py, px]);
    let np = finite_diff_grad(
        |p| bilinear_sample(&x, 0, c, p.data()[0], p.data()[1]).unwrap_or(f64::NAN),
        &pos,
        DEFAULT_EPS,
    )?;
    Ok(g.tensor(&dx, &nx)
        .max(g.scalar(dpy, np.data()[0]))
        .max(g.scalar(dpx, np.data()[1])))
}

fn activations(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let kinds = [
        Activation::Identity,
        Activation::Relu,
        Activation::LeakyRelu(0.1),
        Activation::Sigmoid,
        Activation::HardSigmoid,
    ];
    let x = draw(
        rng,
        |rng| Ok(Tensor::uniform(&[24], -4.0, 4.0, rng)),
        |x| {
            let hinges = x.data().iter().flat_map(|&v| [v - 1.0, v, v + 1.0]);
            Ok(min_abs(hinges) >= KINK_MARGIN)
        },
    )?;
    let r = uniform(&[24], rng);
    let mut worst: f64 = 0.0;
    for kind in kinds {
        let an = activation_backward(kind, &x, &r)?;
        let nx = finite_diff_grad(|x| project(Ok(activation(kind, x)), &r), &x, DEFAULT_EPS)?;
        worst = worst.max(g.tensor(&an, &nx));
    }
    Ok(worst)
}

fn batchnorm(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let mut bn = BatchNorm::identity(3);
    bn.scale = uniform(&[3], rng);
    bn.shift = uniform(&[3], rng);
    bn.mean = uniform(&[3], rng);
    bn.var = Tensor::uniform(&[3], 0.5, 2.0, rng);
    let x = uniform(&[2, 3, 3, 2], rng);
    let r = uniform(&[2, 3, 3, 2], rng);
    let (dx, dscale, dshift) = batchnorm_backward(&x, &bn, &r)?;
    let nx = finite_diff_grad(
        |x| project(batchnorm_inference(x, &bn), &r),
        &x,
        DEFAULT_EPS,
    )?;
    let np = param_finite_diff(
        &bn,
        |bn| project(batchnorm_inference(&x, bn), &r),
        DEFAULT_EPS,
    )?;
    let mut gp = zeroed(&bn);
    gp.scale = dscale;
    gp.shift = dshift;
    Ok(g.tensor(&dx, &nx).max(g.params(&gp, &np)))
}

fn concat_split(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let (a, b) = (uniform(&[1, 2, 3, 3], rng), uniform(&[1, 3, 3, 3], rng));
    let r = uniform(&[1, 5, 3, 3], rng);
    // concat's backward is split at the same offsets
    let parts = split(&r, 1, &[2, 3])?;
    let na = finite_diff_grad(|a| project(concat(&[a, &b], 1), &r), &a, DEFAULT_EPS)?;
    let nb = finite_diff_grad(|b| project(concat(&[&a, b], 1), &r), &b, DEFAULT_EPS)?;
    Ok(g.tensor(&parts[0], &na).max(g.tensor(&parts[1], &nb)))
}

fn upsample(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let x = uniform(&[1, 2, 3, 2], rng);
    let r = uniform(&[1, 2, 6, 4], rng);
    let an = upsample_nearest_backward(&r, 2)?;
    let nx = finite_diff_grad(|x| project(upsample_nearest(x, 2), &r), &x, DEFAULT_EPS)?;
    Ok(g.tensor(&an, &nx))
}

/// Input and parameter errors of a stacked-feature operation.
fn stacked_case<P, F, B>(
    f: &StackedFeature,
    p: &P,
    fwd: F,
    bwd: B,
    rng: &mut ChaCha8Rng,
    g: Grader,
) -> Result<f64>
where
    P: Parameters + Clone,
    F: Fn(&StackedFeature, &P) -> Result<StackedFeature>,
    B: Fn(&StackedFeature, &P, &StackedFeature, &mut P) -> Result<StackedFeature>,
{
    let y = fwd(f, p)?;
    let r = y.with_data(uniform(y.tensor().shape(), rng))?;
    let mut grads = zeroed(p);
    let dx = bwd(f, p, &r, &mut grads)?;
    let eval = |f: &StackedFeature, p: &P| project(fwd(f, p).map(|y| y.into_tensor()), r.tensor());
    let nx = finite_diff_grad(
        |t| f.with_data(t.clone()).map_or(f64::NAN, |f| eval(&f, p)),
        f.tensor(),
        DEFAULT_EPS,
    )?;
    let np = param_finite_diff(p, |p| eval(f, p), DEFAULT_EPS)?;
    Ok(g.tensor(dx.tensor(), &nx).max(g.params(&grads, &np)))
}

fn scale_attn(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let (f, p) = draw(
        rng,
        |rng| {
            let f = stacked(2, 3, 4, 3, rng);
            let mut p = ScaleAttnParams::zeros(2);
            randomize(&mut p, 0.8, rng);
            Ok((f, p))
        },
        |(f, p)| Ok(gate_margin(f, p)? >= KINK_MARGIN),
    )?;
    stacked_case(&f, &p, scale_attention, scale_attention_backward, rng, g)
}

/// Instances with any quantity closer than this to a kink of a piecewise
/// function (integer sampling coordinates, activation hinges, the DY-ReLU
/// branch tie) are redrawn, so ε-steps never straddle one.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 64;

fn grid_distance(positions: &[(f64, f64)]) -> f64 {
    positions
        .iter()
        .flat_map(|&(y, x)| [y, x])
        .map(|v| (v - v.round()).abs())
        .fold(f64::INFINITY, f64::min)
}

fn min_abs(values: impl Iterator<Item = f64>) -> f64 {
    values.map(f64::abs).fold(f64::INFINITY, f64::min)
}

/// Distance of the scale-gate logits from the hard-sigmoid hinges at ±1.
fn gate_margin(f: &StackedFeature, p: &ScaleAttnParams) -> Result<f64> {
    let g = scale_gates(f, p)?;
    Ok(min_abs(g.logits.iter().flat_map(|&z| [z - 1.0, z + 1.0])))
}

/// Distance of every element from the tie of the two DY-ReLU branches.
fn tie_margin(f: &StackedFeature, coeffs: [f64; 4]) -> f64 {
    let [a1, b1, a2, b2] = coeffs;
    min_abs(f.tensor().data().iter().map(|&v| (a1 - a2) * v + (b1 - b2)))
}

/// Distance of a block chain's sampling positions and DY-ReLU branch
/// differences from their kinks; returns the chain output as well.
fn chain_margin(
    f: &StackedFeature,
    blocks: &[DynamicBlockParams],
) -> Result<(f64, StackedFeature)> {
    let mut f = f.clone();
    let mut margin = f64::INFINITY;
    for b in blocks {
        margin = margin.min(gate_margin(&f, &b.scale)?);
        let a = scale_attention(&f, &b.scale)?;
        margin = margin.min(grid_distance(&sample_positions(&a, &b.spatial)?));
        let s = spatial_attention(&a, &b.spatial)?;
        let coeffs = dyrelu_coefficients(&s, &b.task)?;
        margin = margin.min(tie_margin(&s, coeffs));
        f = apply_dyrelu(&s, coeffs)?;
    }
    Ok((margin, f))
}

/// Draws instances until `accept` holds.
fn draw<T>(
    rng: &mut ChaCha8Rng,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Result<T>,
    accept: impl Fn(&T) -> Result<bool>,
) -> Result<T> {
    for _ in 0..MAX_DRAWS {
        let t = make(rng)?;
        if accept(&t)? {
            return Ok(t);
        }
    }
    Err(Error::invalid(
        "gradcheck",
        format!("no instance clear of sampling kinks in {MAX_DRAWS} draws"),
    ))
}

fn spatial_case(
    c: usize,
    h: usize,
    w: usize,
    separable: bool,
    rng: &mut ChaCha8Rng,
    g: Grader,
) -> Result<f64> {
    let (f, p) = draw(
        rng,
        |rng| {
            let f = stacked(2, c, h, w, rng);
            let mut p = SpatialAttnParams::init(c, separable, rng);
            randomize(&mut p, 0.4, rng);
            Ok((f, p))
        },
        |(f, p)| Ok(grid_distance(&sample_positions(f, p)?) >= KINK_MARGIN),
    )?;
    stacked_case(
        &f,
        &p,
        spatial_attention,
        spatial_attention_backward,
        rng,
        g,
    )
}

fn spatial_attn(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    spatial_case(3, 4, 4, false, rng, g)
}

fn spatial_attn_separable(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    spatial_case(4, 3, 4, true, rng, g)
}

fn task_attn(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let (f, p) = draw(
        rng,
        |rng| {
            let f = stacked(2, 8, 2, 2, rng);
            let mut p = DyReluParams::zeros(8, 4);
            randomize(&mut p, 0.8, rng);
            Ok((f, p))
        },
        |(f, p)| Ok(tie_margin(f, dyrelu_coefficients(f, p)?) >= KINK_MARGIN),
    )?;
    stacked_case(&f, &p, task_attention, task_attention_backward, rng, g)
}

fn block(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let (f, p) = draw(
        rng,
        |rng| {
            let f = stacked(2, 4, 3, 3, rng);
            let mut p = DynamicBlockParams::init(4, 2, 4, false, rng);
            randomize(&mut p, 0.4, rng);
            Ok((f, p))
        },
        |(f, p)| Ok(chain_margin(f, std::slice::from_ref(p))?.0 >= KINK_MARGIN),
    )?;
    stacked_case(&f, &p, dynamic_block, dynamic_block_backward, rng, g)
}

fn stack_recover(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let x = uniform(&[3, 2, 3], rng);
    let r = uniform(&[3, 2, 3], rng);
    let roundtrip = |x: &Tensor| concat_levels(x).and_then(|f| recover(&f));
    let stackedx = concat_levels(&x)?;
    let an = concat_levels_backward(&recover_backward(&stackedx, &r)?)?;
    let nx = finite_diff_grad(|x| project(roundtrip(x), &r), &x, DEFAULT_EPS)?;
    Ok(g.tensor(&an, &nx))
}

fn tda_head(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let (head, x) = draw(
        rng,
        |rng| {
            let mut head = TdaHead::init(4, 2, 2, 1, 4, false, rng);
            randomize(&mut head, 0.4, rng);
            Ok((head, uniform(&[4, 3, 3], rng)))
        },
        |(head, x)| {
            let (margin, out) = chain_margin(&concat_levels(x)?, &head.blocks)?;
            let [c, h, w] = x.dims3("tda head")?;
            let hidden = head
                .hidden
                .conv
                .forward(&recover(&out)?.reshape(&[1, c, h, w])?)?;
            Ok(margin.min(min_abs(hidden.data().iter().copied())) >= KINK_MARGIN)
        },
    )?;
    let r = uniform(&[head.output_channels(), 3, 3], rng);
    let mut grads = zeroed(&head);
    let dx = head.backward(&x, &r, &mut grads)?;
    let nx = finite_diff_grad(|x| project(head.forward(x), &r), &x, DEFAULT_EPS)?;
    let np = param_finite_diff(&head, |h| project(h.forward(&x), &r), DEFAULT_EPS)?;
    Ok(g.tensor(&dx, &nx).max(g.params(&grads, &np)))
}

fn ca_params(c: usize, ratio: usize, rng: &mut ChaCha8Rng) -> Result<CAParams> {
    let mut p = CAParams::init(c, ratio, rng)?;
    randomize(&mut p, 0.8, rng);
    p.squeeze_bn.mean = uniform(p.squeeze_bn.mean.shape(), rng);
    p.squeeze_bn.var = Tensor::uniform(p.squeeze_bn.var.shape(), 0.5, 2.0, rng);
    Ok(p)
}

fn ca_embed(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let x = uniform(&[1, 4, 3, 5], rng);
    let (rh, rw) = (uniform(&[1, 4, 3, 1], rng), uniform(&[1, 4, 1, 5], rng));
    let f = |x: &Tensor| {
        coord_embed(x)
            .and_then(|(qh, qw)| Ok(qh.dot(&rh)? + qw.dot(&rw)?))
            .unwrap_or(f64::NAN)
    };
    let an = directional_pool_backward(x.shape(), &rh, &rw)?;
    Ok(g.tensor(&an, &finite_diff_grad(f, &x, DEFAULT_EPS)?))
}

fn ca_generate(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let p = ca_params(8, 4, rng)?;
    let (qh, qw) = (uniform(&[1, 8, 3, 1], rng), uniform(&[1, 8, 1, 4], rng));
    let (rh, rw) = (uniform(&[1, 8, 3, 1], rng), uniform(&[1, 8, 1, 4], rng));
    let eval = |qh: &Tensor, qw: &Tensor, p: &CAParams| {
        coord_generate(qh, qw, p)
            .and_then(|(gh, gw)| Ok(gh.dot(&rh)? + gw.dot(&rw)?))
            .unwrap_or(f64::NAN)
    };
    let mut grads = zeroed(&p);
    let (dqh, dqw) = coord_generate_backward(&qh, &qw, &p, &rh, &rw, &mut grads)?;
    let nqh = finite_diff_grad(|t| eval(t, &qw, &p), &qh, DEFAULT_EPS)?;
    let nqw = finite_diff_grad(|t| eval(&qh, t, &p), &qw, DEFAULT_EPS)?;
    let np = param_finite_diff(&p, |p| eval(&qh, &qw, p), DEFAULT_EPS)?;
    Ok(g.tensor(&dqh, &nqh)
        .max(g.tensor(&dqw, &nqw))
        .max(g.params(&grads, &np)))
}

fn ca_apply(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let x = uniform(&[2, 3, 3, 4], rng);
    let gh = Tensor::uniform(&[2, 3, 3, 1], 0.0, 1.0, rng);
    let gw = Tensor::uniform(&[2, 3, 1, 4], 0.0, 1.0, rng);
    let r = uniform(&[2, 3, 3, 4], rng);
    let (dx, dgh, dgw) = coord_apply_backward(&x, &gh, &gw, &r)?;
    let nx = finite_diff_grad(|t| project(coord_apply(t, &gh, &gw), &r), &x, DEFAULT_EPS)?;
    let ngh = finite_diff_grad(|t| project(coord_apply(&x, t, &gw), &r), &gh, DEFAULT_EPS)?;
    let ngw = finite_diff_grad(|t| project(coord_apply(&x, &gh, t), &r), &gw, DEFAULT_EPS)?;
    Ok(g.tensor(&dx, &nx)
        .max(g.tensor(&dgh, &ngh))
        .max(g.tensor(&dgw, &ngw)))
}

fn ca_module(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let p = ca_params(8, 4, rng)?;
    let x = uniform(&[1, 8, 4, 3], rng);
    let r = uniform(&[1, 8, 4, 3], rng);
    let mut grads = zeroed(&p);
    let dx = coord_attention_backward(&x, &p, &r, &mut grads)?;
    let nx = finite_diff_grad(|t| project(coord_attention(t, &p), &r), &x, DEFAULT_EPS)?;
    let np = param_finite_diff(&p, |p| project(coord_attention(&x, p), &r), DEFAULT_EPS)?;
    Ok(g.tensor(&dx, &nx).max(g.params(&grads, &np)))
}

fn focal(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let p = rng.gen_range(0.02..0.98);
        let alpha = rng.gen_range(0.1..0.9);
        let gamma = rng.gen_range(0.0..3.0);
        let positive = rng.gen_bool(0.5);
        let an = focal_loss(p, positive, alpha, gamma).dp;
        let t = Tensor::from_vec(vec![p]);
        let n = finite_diff_grad(
            |t| focal_loss(t.data()[0], positive, alpha, gamma).loss,
            &t,
            DEFAULT_EPS,
        )?;
        worst = worst.max(g.scalar(an, n.data()[0]));
    }
    Ok(worst)
}

fn focal_soft(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let p = rng.gen_range(0.02..0.98);
        let y = rng.gen_range(0.0..1.0);
        let alpha = rng.gen_range(0.1..0.9);
        let gamma = rng.gen_range(0.0..3.0);
        let an = soft_focal(p, y, alpha, gamma).dp;
        let t = Tensor::from_vec(vec![p]);
        let n = finite_diff_grad(
            |t| soft_focal(t.data()[0], y, alpha, gamma).loss,
            &t,
            DEFAULT_EPS,
        )?;
        worst = worst.max(g.scalar(an, n.data()[0]));
    }
    Ok(worst)
}

fn smoothing(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let k = rng.gen_range(2..10);
    let eps = rng.gen_range(0.0..0.5);
    let y = Tensor::uniform(&[k], 0.0, 1.0, rng);
    let r = uniform(&[k], rng);
    let an = r.scale(1.0 - eps);
    let n = finite_diff_grad(
        |y| project(label_smooth(y.data(), eps).map(Tensor::from_vec), &r),
        &y,
        DEFAULT_EPS,
    )?;
    Ok(g.tensor(&an, &n))
}

fn random_box(rng: &mut impl Rng) -> BoundingBox {
    BoundingBox::new(
        rng.gen_range(0.0..10.0),
        rng.gen_range(0.0..10.0),
        rng.gen_range(1.0..6.0),
        rng.gen_range(1.0..6.0),
    )
}

fn diou_box(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let (a, b) = (random_box(rng), random_box(rng));
    let (_, an) = diou_with_grad(&a, &b);
    let t = Tensor::from_vec(vec![a.cx, a.cy, a.w, a.h]);
    let n = finite_diff_grad(
        |t| {
            let d = t.data();
            diou_with_grad(&BoundingBox::new(d[0], d[1], d[2], d[3]), &b).0
        },
        &t,
        DEFAULT_EPS,
    )?;
    Ok(g.tensor(&Tensor::from_vec(an.to_vec()), &n))
}

fn loss(rng: &mut ChaCha8Rng, g: Grader) -> Result<f64> {
    let num_classes = 3;
    let levels = vec![
        LevelSpec {
            stride: 8,
            anchors: vec![Anchor::new(8.0, 8.0), Anchor::new(16.0, 12.0)],
        },
        LevelSpec {
            stride: 16,
            anchors: vec![Anchor::new(24.0, 24.0), Anchor::new(32.0, 40.0)],
        },
    ];
    let ch = 2 * (5 + num_classes);
    let raw = vec![uniform(&[ch, 4, 4], rng), uniform(&[ch, 2, 2], rng)];
    let targets: Vec<Target> = (0..3)
        .map(|_| Target {
            bbox: BoundingBox::new(
                rng.gen_range(2.0..30.0),
                rng.gen_range(2.0..30.0),
                rng.gen_range(4.0..36.0),
                rng.gen_range(4.0..36.0),
            ),
            class_id: rng.gen_range(0..num_classes),
            weight: rng.gen_range(0.5..1.0),
        })
        .collect();
    let cfg = LossConfig::default();
    let out = detection_loss(&raw, &levels, &targets, num_classes, &cfg)?;
    let mut worst: f64 = 0.0;
    for l in 0..raw.len() {
        let n = finite_diff_grad(
            |t| {
                let mut probe = raw.clone();
                probe[l] = t.clone();
                detection_loss(&probe, &levels, &targets, num_classes, &cfg)
                    .map_or(f64::NAN, |o| o.total)
            },
            &raw[l],
            DEFAULT_EPS,
        )?;
        worst = worst.max(g.tensor(&out.grads[l], &n));
    }
    Ok(worst)
}

const CHECKS: &[Check] = &[
    Check {
        suite: "tensor-core",
        name: "conv2d",
        tolerance: OP_TOL,
        run: conv_plain,
    },
    Check {
        suite: "tensor-core",
        name: "conv2d_grouped_strided_dilated",
        tolerance: OP_TOL,
        run: conv_grouped,
    },
    Check {
        suite: "tensor-core",
        name: "fully_connected",
        tolerance: OP_TOL,
        run: linear,
    },
    Check {
        suite: "tensor-core",
        name: "max_pool2d",
        tolerance: OP_TOL,
        run: max_pool,
    },
    Check {
        suite: "tensor-core",
        name: "global_avg_pool",
        tolerance: OP_TOL,
        run: avg_pool,
    },
    Check {
        suite: "tensor-core",
        name: "directional_pool",
        tolerance: OP_TOL,
        run: dir_pool,
    },
    Check {
        suite: "tensor-core",
        name: "bilinear_sample",
        tolerance: OP_TOL,
        run: bilinear,
    },
    Check {
        suite: "tensor-core",
        name: "activations",
        tolerance: OP_TOL,
        run: activations,
    },
    Check {
        suite: "tensor-core",
        name: "batchnorm_inference",
        tolerance: OP_TOL,
        run: batchnorm,
    },
    Check {
        suite: "tensor-core",
        name: "concat_split",
        tolerance: OP_TOL,
        run: concat_split,
    },
    Check {
        suite: "tensor-core",
        name: "upsample_nearest",
        tolerance: OP_TOL,
        run: upsample,
    },
    Check {
        suite: "attention-head",
        name: "concat_levels_recover",
        tolerance: OP_TOL,
        run: stack_recover,
    },
    Check {
        suite: "attention-head",
        name: "scale_attention",
        tolerance: OP_TOL,
        run: scale_attn,
    },
    Check {
        suite: "attention-head",
        name: "spatial_attention",
        tolerance: OP_TOL,
        run: spatial_attn,
    },
    Check {
        suite: "attention-head",
        name: "spatial_attention_separable",
        tolerance: OP_TOL,
        run: spatial_attn_separable,
    },
    Check {
        suite: "attention-head",
        name: "task_attention",
        tolerance: OP_TOL,
        run: task_attn,
    },
    Check {
        suite: "attention-head",
        name: "dynamic_block",
        tolerance: BLOCK_TOL,
        run: block,
    },
    Check {
        suite: "attention-head",
        name: "tda_head",
        tolerance: BLOCK_TOL,
        run: tda_head,
    },
    Check {
        suite: "coord-attention",
        name: "coord_embed",
        tolerance: OP_TOL,
        run: ca_embed,
    },
    Check {
        suite: "coord-attention",
        name: "coord_generate",
        tolerance: OP_TOL,
        run: ca_generate,
    },
    Check {
        suite: "coord-attention",
        name: "coord_apply",
        tolerance: OP_TOL,
        run: ca_apply,
    },
    Check {
        suite: "coord-attention",
        name: "coord_attention",
        tolerance: BLOCK_TOL,
        run: ca_module,
    },
    Check {
        suite: "postproc-loss",
        name: "focal_loss",
        tolerance: OP_TOL,
        run: focal,
    },
    Check {
        suite: "postproc-loss",
        name: "soft_focal",
        tolerance: OP_TOL,
        run: focal_soft,
    },
    Check {
        suite: "postproc-loss",
        name: "label_smooth",
        tolerance: OP_TOL,
        run: smoothing,
    },
    Check {
        suite: "postproc-loss",
        name: "diou",
        tolerance: OP_TOL,
        run: diou_box,
    },
    Check {
        suite: "postproc-loss",
        name: "detection_loss",
        tolerance: BLOCK_TOL,
        run: loss,
    },
];

/// Checks of one suite, or an error naming the known suites.
pub fn suite(name: &str) -> Result<Vec<Check>> {
    if !SUITES.contains(&name) {
        return Err(Error::invalid(
            "gradcheck",
            format!(
                "unknown module {name:?}, expected one of {}",
                SUITES.join(", ")
            ),
        ));
    }
    Ok(CHECKS.iter().filter(|c| c.suite == name).copied().collect())
}

/// Runs every check of `name` over seeds `0..seeds`, fanning seeds out over
/// the available cores.
pub fn run_suite(name: &str, seeds: usize, grader: Grader) -> Result<Vec<CheckReport>> {
    let checks = suite(name)?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut reports = Vec::with_capacity(checks.len());
    for check in checks {
        let worst = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads.min(seeds.max(1)))
                .map(|t| {
                    s.spawn(move || {
                        let mut worst: f64 = 0.0;
                        for seed in (t..seeds).step_by(threads) {
                            worst = worst.max(check.run(seed as u64, grader)?);
                        }
                        Ok::<f64, Error>(worst)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("gradcheck worker panicked"))
                .try_fold(0.0f64, |acc, r| r.map(|v| acc.max(v)))
        })?;
        reports.push(CheckReport {
            suite: check.suite,
            name: check.name,
            tolerance: check.tolerance,
            seeds,
            max_rel_error: worst,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_on_a_few_seeds() {
        for name in SUITES {
            for r in run_suite(name, 3, Grader::default()).unwrap() {
                assert!(r.passed(), "{}/{}: {:e}", r.suite, r.name, r.max_rel_error);
            }
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let reports = run_suite("tensor-core", 2, Grader { corrupt: true }).unwrap();
        assert!(reports.iter().all(|r| !r.passed()));
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(suite("neck").is_err());
    }
}
