use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature levels flattened to `[S_L, S, C]` with `S = H·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedFeature {
    data: Tensor,
    height: usize,
    width: usize,
}

impl StackedFeature {
    pub fn new(data: Tensor, height: usize, width: usize) -> Result<Self> {
        let [_, s, _] = data.dims3("stacked feature")?;
        if s != height * width {
            return Err(Error::ShapeMismatch {
                op: "stacked feature",
                dim: "positions (H·W)",
                expected: height * width,
                got: s,
            });
        }
        Ok(Self {
            data,
            height,
            width,
        })
    }

    /// Stacks `[C, H, W]` tensors of identical shape as levels.
    pub fn from_levels(levels: &[Tensor]) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::invalid("stack levels", "no levels"))?;
        let [c, h, w] = first.dims3("stack levels")?;
        let s = h * w;
        let mut data = vec![0.0; levels.len() * s * c];
        for (l, level) in levels.iter().enumerate() {
            first.expect_same_shape("stack levels", level)?;
            let src = level.data();
            for ch in 0..c {
                for pos in 0..s {
                    data[(l * s + pos) * c + ch] = src[ch * s + pos];
                }
            }
        }
        Self::new(Tensor::new(&[levels.len(), s, c], data)?, h, w)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn levels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn positions(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Same geometry, new `[S_L, S, C]` payload.
    pub fn with_data(&self, data: Tensor) -> Result<Self> {
        self.data.expect_same_shape("stacked feature", &data)?;
        Ok(Self {
            data,
            height: self.height,
            width: self.width,
        })
    }

    /// Level `l` as a `[1, C, H, W]` tensor.
    pub fn level_nchw(&self, l: usize) -> Tensor {
        let (s, c) = (self.positions(), self.channels());
        let src = &self.data.data()[l * s * c..(l + 1) * s * c];
        let mut out = vec![0.0; s * c];
        for pos in 0..s {
            for ch in 0..c {
                out[ch * s + pos] = src[pos * c + ch];
            }
        }
        Tensor::new(&[1, c, self.height, self.width], out).expect("level shape")
    }

    /// Builds a stacked feature whose every level equals the `[C, H·W]`
    /// channel-major buffer `chw`, or only level `only` when given.
    pub(crate) fn from_chw_levels(
        chw: &[f64],
        levels: usize,
        only: Option<usize>,
        like: &StackedFeature,
    ) -> Result<Self> {
        let (s, c) = (like.positions(), like.channels());
        let mut data = vec![0.0; levels * s * c];
        for l in 0..levels {
            if only.is_some_and(|o| o != l) {
                continue;
            }
            for ch in 0..c {
                for pos in 0..s {
                    data[(l * s + pos) * c + ch] = chw[ch * s + pos];
                }
            }
        }
        like.with_data(Tensor::new(&[levels, s, c], data)?)
    }
}

/// Stacks a single `[C, H, W]` level with itself, giving `S_L = 2`.
pub fn concat_levels(f1: &Tensor) -> Result<StackedFeature> {
    f1.dims3("concat_levels")?;
    StackedFeature::from_levels(&[f1.clone(), f1.clone()])
}

/// Gradient of [`concat_levels`]: the level gradients summed back to `[C, H, W]`.
pub fn concat_levels_backward(dy: &StackedFeature) -> Result<Tensor> {
    let (h, w) = dy.hw();
    let (s, c) = (dy.positions(), dy.channels());
    let mut out = vec![0.0; c * s];
    for l in 0..dy.levels() {
        let lvl = dy.level_nchw(l);
        for (o, v) in out.iter_mut().zip(lvl.data()) {
            *o += v;
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Mean over the level axis, reshaped back to `[C, H, W]`.
pub fn recover(f: &StackedFeature) -> Result<Tensor> {
    let (h, w) = f.hw();
    let [l, s, c] = f.tensor().dims3("recover")?;
    if s != h * w {
        return Err(Error::ShapeMismatch {
            op: "recover",
            dim: "positions (H·W)",
            expected: h * w,
            got: s,
        });
    }
    let d = f.tensor().data();
    let mut out = vec![0.0; c * s];
    for lvl in 0..l {
        for pos in 0..s {
            for ch in 0..c {
                out[ch * s + pos] += d[(lvl * s + pos) * c + ch];
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= l as f64);
    Tensor::new(&[c, h, w], out)
}

pub fn recover_backward(like: &StackedFeature, dy: &Tensor) -> Result<StackedFeature> {
    let [c, h, w] = dy.dims3("recover backward")?;
    if c != like.channels() || (h, w) != like.hw() {
        return Err(Error::invalid(
            "recover backward",
            "gradient does not match the stacked geometry",
        ));
    }
    let l = like.levels();
    let scaled: Vec<f64> = dy.data().iter().map(|v| v / l as f64).collect();
    StackedFeature::from_chw_levels(&scaled, l, None, like)
}
