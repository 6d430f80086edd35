use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights and geometry of a grouped 2-D convolution.
///
/// `weight` is `[out_c, in_c / groups, kh, kw]`, `bias` is `[out_c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub dx: Tensor,
    pub dweight: Tensor,
    pub dbias: Tensor,
}

impl ConvParams {
    pub fn new(
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Self> {
        let [out_c, _, kh, kw] = weight.dims4("conv2d weight")?;
        if bias.shape() != [out_c] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "bias length",
                expected: out_c,
                got: bias.numel(),
            });
        }
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(Error::invalid(
                "conv2d",
                "stride, dilation and groups must be positive",
            ));
        }
        if out_c % groups != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("output channels {out_c} not divisible by groups {groups}"),
            ));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::invalid("conv2d", "empty kernel"));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            dilation,
            groups,
        })
    }

    /// Zero-weight convolution with "same" padding for odd kernels at stride 1.
    pub fn zeros(in_c: usize, out_c: usize, kernel: usize, stride: usize, groups: usize) -> Self {
        assert!(
            in_c.is_multiple_of(groups) && out_c.is_multiple_of(groups),
            "bad grouping"
        );
        Self {
            weight: Tensor::zeros(&[out_c, in_c / groups, kernel, kernel]),
            bias: Tensor::zeros(&[out_c]),
            stride,
            padding: kernel / 2,
            dilation: 1,
            groups,
        }
    }

    /// Weights drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias.
    pub fn fan_in_uniform(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut p = Self::zeros(in_c, out_c, kernel, stride, groups);
        let fan_in = (in_c / groups) * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in p.weight.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        p
    }

    /// 1×1 convolution whose weight matrix is the identity.
    pub fn identity(channels: usize) -> Self {
        let mut p = Self::zeros(channels, channels, 1, 1, 1);
        for c in 0..channels {
            p.weight.data_mut()[c * channels + c] = 1.0;
        }
        p
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels() && self.groups == self.out_channels()
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let span_h = self.dilation * (kh - 1) + 1;
        let span_w = self.dilation * (kw - 1) + 1;
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < span_h || pw < span_w {
            return Err(Error::invalid(
                "conv2d",
                format!("padded input {ph}x{pw} smaller than kernel span {span_h}x{span_w}"),
            ));
        }
        Ok((
            (ph - span_h) / self.stride + 1,
            (pw - span_w) / self.stride + 1,
        ))
    }

    fn check_input(&self, x: &Tensor) -> Result<([usize; 4], (usize, usize))> {
        let dims = x.dims4("conv2d")?;
        if dims[1] != self.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "input channels",
                expected: self.in_channels(),
                got: dims[1],
            });
        }
        let out_hw = self.output_hw(dims[2], dims[3])?;
        Ok((dims, out_hw))
    }
}

/// Input index range `[lo, hi)` of output positions that read an in-bounds
/// input cell for kernel offset `k`.
#[inline]
fn valid_range(out: usize, input: usize, k: usize, p: &ConvParams) -> (usize, usize) {
    // in = o*stride - pad + k*dil  must satisfy 0 <= in < input
    let shift = (k * p.dilation) as isize - p.padding as isize;
    let s = p.stride as isize;
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) + s - 1) / s
    };
    let hi = ((input as isize - shift) + s - 1) / s;
    let hi = hi.clamp(0, out as isize);
    (lo.min(hi) as usize, hi as usize)
}

pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let ([n, c_in, h, w], (oh, ow)) = p.check_input(x)?;
    let c_out = p.out_channels();
    let (kh, kw) = p.kernel();
    let cig = c_in / p.groups;
    let cog = c_out / p.groups;
    let xd = x.data();
    let wd = p.weight.data();
    let mut out = vec![0.0; n * c_out * oh * ow];
    for b in 0..n {
        for oc in 0..c_out {
            let g = oc / cog;
            let plane = &mut out[(b * c_out + oc) * oh * ow..(b * c_out + oc + 1) * oh * ow];
            plane.fill(p.bias.data()[oc]);
            for icg in 0..cig {
                let ic = g * cig + icg;
                let xplane = &xd[(b * c_in + ic) * h * w..(b * c_in + ic + 1) * h * w];
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(oh, h, ky, p);
                    for kx in 0..kw {
                        let wv = wd[((oc * cig + icg) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = valid_range(ow, w, kx, p);
                        for oy in oy0..oy1 {
                            let iy = oy * p.stride + ky * p.dilation - p.padding;
                            let xrow = &xplane[iy * w..(iy + 1) * w];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in ox0..ox1 {
                                let ix = ox * p.stride + kx * p.dilation - p.padding;
                                orow[ox] += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c_out, oh, ow], out)
}

pub fn conv2d_backward(x: &Tensor, p: &ConvParams, dy: &Tensor) -> Result<ConvGrads> {
    let ([n, c_in, h, w], (oh, ow)) = p.check_input(x)?;
    let c_out = p.out_channels();
    let expected = [n, c_out, oh, ow];
    let got = dy.dims4("conv2d backward")?;
    for (axis, (&e, &g)) in expected.iter().zip(&got).enumerate() {
        if e != g {
            return Err(Error::ShapeMismatch {
                op: "conv2d backward",
                dim: crate::tensor::axis_name(4, axis),
                expected: e,
                got: g,
            });
        }
    }
    let (kh, kw) = p.kernel();
    let cig = c_in / p.groups;
    let cog = c_out / p.groups;
    let xd = x.data();
    let wd = p.weight.data();
    let gd = dy.data();
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; p.weight.numel()];
    let mut db = vec![0.0; c_out];
    for b in 0..n {
        for oc in 0..c_out {
            let g = oc / cog;
            let gplane = &gd[(b * c_out + oc) * oh * ow..(b * c_out + oc + 1) * oh * ow];
            db[oc] += gplane.iter().sum::<f64>();
            for icg in 0..cig {
                let ic = g * cig + icg;
                let base = (b * c_in + ic) * h * w;
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(oh, h, ky, p);
                    for kx in 0..kw {
                        let widx = ((oc * cig + icg) * kh + ky) * kw + kx;
                        let wv = wd[widx];
                        let (ox0, ox1) = valid_range(ow, w, kx, p);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * p.stride + ky * p.dilation - p.padding;
                            for ox in ox0..ox1 {
                                let ix = ox * p.stride + kx * p.dilation - p.padding;
                                let gv = gplane[oy * ow + ox];
                                acc += gv * xd[base + iy * w + ix];
                                dx[base + iy * w + ix] += gv * wv;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        dx: Tensor::new(x.shape(), dx)?,
        dweight: Tensor::new(p.weight.shape(), dw)?,
        dbias: Tensor::new(&[c_out], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error, DEFAULT_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct definition of convolution, one output cell at a time.
    fn conv_oracle(x: &Tensor, p: &ConvParams) -> Tensor {
        let [n, c_in, h, w] = x.dims4("oracle").unwrap();
        let (oh, ow) = p.output_hw(h, w).unwrap();
        let c_out = p.out_channels();
        let (kh, kw) = p.kernel();
        let cig = c_in / p.groups;
        let cog = c_out / p.groups;
        let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
        let mut i = 0;
        for b in 0..n {
            for oc in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.bias.data()[oc];
                        for icg in 0..cig {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * p.stride + ky * p.dilation) as isize
                                        - p.padding as isize;
                                    let ix = (ox * p.stride + kx * p.dilation) as isize
                                        - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let ic = (oc / cog) * cig + icg;
                                    acc += p.weight.data()[((oc * cig + icg) * kh + ky) * kw + kx]
                                        * x.at4(b, ic, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.data_mut()[i] = acc;
                        i += 1;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[2, 4, 3, 5], -1.0, 1.0, &mut rng);
        let y = conv2d(&x, &ConvParams::identity(4)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_identity_is_identity() {
        let mut p = ConvParams::zeros(3, 3, 1, 1, 3);
        p.weight.fill(1.0);
        assert!(p.is_depthwise());
        let x = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 - 4.5);
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let mut p = ConvParams::zeros(1, 1, 3, 1, 1);
        p.weight.fill(1.0);
        let x = Tensor::full(&[1, 1, 5, 5], 2.0);
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.at4(0, 0, 2, 2), 18.0);
        assert_eq!(y.at4(0, 0, 0, 0), 8.0);
    }

    #[test]
    fn matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, pad, dil, groups) in &[(1, 1, 1, 1), (2, 1, 1, 1), (1, 2, 2, 2), (2, 0, 1, 4)]
        {
            let mut p = ConvParams::fan_in_uniform(4, 8, 3, stride, groups, &mut rng);
            p.padding = pad;
            p.dilation = dil;
            p.bias = Tensor::uniform(&[8], -1.0, 1.0, &mut rng);
            let x = Tensor::uniform(&[2, 4, 7, 6], -1.0, 1.0, &mut rng);
            let fast = conv2d(&x, &p).unwrap();
            let slow = conv_oracle(&x, &p);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_named() {
        let p = ConvParams::zeros(3, 4, 3, 1, 1);
        let err = conv2d(&Tensor::zeros(&[1, 2, 4, 4]), &p).unwrap_err();
        assert!(err.to_string().contains("input channels"));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ConvParams::fan_in_uniform(3, 4, 3, 1, 1, &mut rng);
        p.bias = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
        let x = Tensor::uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut rng);
        let y = conv2d(&x, &p).unwrap();
        let r = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
        let g = conv2d_backward(&x, &p, &r).unwrap();

        let num_dx =
            finite_diff_grad(|x| conv2d(x, &p).unwrap().dot(&r).unwrap(), &x, DEFAULT_EPS).unwrap();
        assert!(max_rel_error(&g.dx, &num_dx) < 1e-6);

        let num_dw = finite_diff_grad(
            |w| {
                let mut q = p.clone();
                q.weight = w.clone();
                conv2d(&x, &q).unwrap().dot(&r).unwrap()
            },
            &p.weight,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(max_rel_error(&g.dweight, &num_dw) < 1e-6);
    }
}
