//! Bilinear sampling with zero padding outside the grid.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four grid cells touched by one bilinear sample and their weights.
/// Out-of-range cells carry `None` and contribute zero.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTaps {
    pub cells: [Option<usize>; 4],
    pub weights: [f64; 4],
    /// Fractional parts `(ly, lx)` of the sampling position.
    pub frac: (f64, f64),
}

impl BilinearTaps {
    /// Corners in the order (y0,x0), (y0,x0+1), (y0+1,x0), (y0+1,x0+1);
    /// cell indices are relative to the start of an `h × w` plane.
    #[inline]
    pub fn locate(h: usize, w: usize, py: f64, px: f64) -> Self {
        let y0 = py.floor();
        let x0 = px.floor();
        let ly = py - y0;
        let lx = px - x0;
        let cell = |y: f64, x: f64| -> Option<usize> {
            if y >= 0.0 && x >= 0.0 && y < h as f64 && x < w as f64 {
                Some(y as usize * w + x as usize)
            } else {
                None
            }
        };
        Self {
            cells: [
                cell(y0, x0),
                cell(y0, x0 + 1.0),
                cell(y0 + 1.0, x0),
                cell(y0 + 1.0, x0 + 1.0),
            ],
            weights: [
                (1.0 - ly) * (1.0 - lx),
                (1.0 - ly) * lx,
                ly * (1.0 - lx),
                ly * lx,
            ],
            frac: (ly, lx),
        }
    }

    #[inline]
    fn corner_values(&self, plane: &[f64]) -> [f64; 4] {
        let mut v = [0.0; 4];
        for (slot, cell) in v.iter_mut().zip(self.cells) {
            if let Some(i) = cell {
                *slot = plane[i];
            }
        }
        v
    }

    #[inline]
    pub fn value(&self, plane: &[f64]) -> f64 {
        let v = self.corner_values(plane);
        v.iter().zip(self.weights).map(|(a, b)| a * b).sum()
    }

    /// Partial derivatives of the sampled value with respect to `(py, px)`.
    /// At integer coordinates these are the one-sided derivatives from above.
    #[inline]
    pub fn position_grad(&self, plane: &[f64]) -> (f64, f64) {
        let [v00, v01, v10, v11] = self.corner_values(plane);
        let (ly, lx) = self.frac;
        let dy = (1.0 - lx) * (v10 - v00) + lx * (v11 - v01);
        let dx = (1.0 - ly) * (v01 - v00) + ly * (v11 - v10);
        (dy, dx)
    }

    /// Adds `g * weight` into each in-range cell of `grad_plane`.
    #[inline]
    pub fn scatter(&self, grad_plane: &mut [f64], g: f64) {
        for (cell, wt) in self.cells.iter().zip(self.weights) {
            if let Some(i) = cell {
                grad_plane[*i] += g * wt;
            }
        }
    }
}

fn plane_of(x: &Tensor, n: usize, c: usize, py: f64, px: f64) -> Result<(&[f64], usize, usize)> {
    let [nn, cc, h, w] = x.dims4("bilinear_sample")?;
    if py.is_nan() || px.is_nan() {
        return Err(Error::invalid("bilinear_sample", "NaN sampling coordinate"));
    }
    if n >= nn || c >= cc {
        return Err(Error::invalid(
            "bilinear_sample",
            format!("plane ({n}, {c}) out of range for [{nn}, {cc}]"),
        ));
    }
    let start = (n * cc + c) * h * w;
    Ok((&x.data()[start..start + h * w], h, w))
}

/// Samples channel `c` of batch item `n` at real-valued `(py, px)`.
pub fn bilinear_sample(x: &Tensor, n: usize, c: usize, py: f64, px: f64) -> Result<f64> {
    let (plane, h, w) = plane_of(x, n, c, py, px)?;
    Ok(BilinearTaps::locate(h, w, py, px).value(plane))
}

/// Gradient of a sample scaled by `g`: returns `(dx, d/dpy, d/dpx)`.
pub fn bilinear_sample_backward(
    x: &Tensor,
    n: usize,
    c: usize,
    py: f64,
    px: f64,
    g: f64,
) -> Result<(Tensor, f64, f64)> {
    let (plane, h, w) = plane_of(x, n, c, py, px)?;
    let taps = BilinearTaps::locate(h, w, py, px);
    let (dy, dxp) = taps.position_grad(plane);
    let mut dx = Tensor::zeros_like(x);
    let [_, cc, _, _] = x.dims4("bilinear_sample")?;
    let start = (n * cc + c) * h * w;
    taps.scatter(&mut dx.data_mut()[start..start + h * w], g);
    Ok((dx, g * dy, g * dxp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error, DEFAULT_EPS};

    fn patch() -> Tensor {
        Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn integer_coordinates_are_exact() {
        let x = patch();
        assert_eq!(bilinear_sample(&x, 0, 0, 1.0, 0.0).unwrap(), 3.0);
        assert_eq!(bilinear_sample(&x, 0, 0, 1.0, 1.0).unwrap(), 4.0);
    }

    #[test]
    fn midpoint_is_four_point_average() {
        assert_eq!(bilinear_sample(&patch(), 0, 0, 0.5, 0.5).unwrap(), 2.5);
    }

    #[test]
    fn outside_is_zero() {
        assert_eq!(bilinear_sample(&patch(), 0, 0, -1.0, -1.0).unwrap(), 0.0);
        assert_eq!(bilinear_sample(&patch(), 0, 0, 5.0, 0.0).unwrap(), 0.0);
        // half a cell beyond the edge blends with the zero padding
        assert_eq!(bilinear_sample(&patch(), 0, 0, -0.5, 0.0).unwrap(), 0.5);
    }

    #[test]
    fn nan_rejected() {
        assert!(bilinear_sample(&patch(), 0, 0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn gradients_away_from_grid_lines() {
        let x = Tensor::new(
            &[1, 1, 3, 3],
            vec![0.3, -1.0, 2.0, 0.7, 1.1, -0.4, 0.9, 0.2, -1.3],
        )
        .unwrap();
        let (py, px) = (0.37, 1.61);
        let (dx, dpy, dpx) = bilinear_sample_backward(&x, 0, 0, py, px, 1.0).unwrap();
        let num = finite_diff_grad(
            |x| bilinear_sample(x, 0, 0, py, px).unwrap(),
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(max_rel_error(&dx, &num) < 1e-8);
        let e = DEFAULT_EPS;
        let fy = (bilinear_sample(&x, 0, 0, py + e, px).unwrap()
            - bilinear_sample(&x, 0, 0, py - e, px).unwrap())
            / (2.0 * e);
        let fx = (bilinear_sample(&x, 0, 0, py, px + e).unwrap()
            - bilinear_sample(&x, 0, 0, py, px - e).unwrap())
            / (2.0 * e);
        assert!((dpy - fy).abs() < 1e-8);
        assert!((dpx - fx).abs() < 1e-8);
    }
}
