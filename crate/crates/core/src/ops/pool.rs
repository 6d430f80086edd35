use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride-1 max pooling with padding `k / 2`, so spatial extents are kept.
/// Padding cells act as -inf and are never selected.
pub fn max_pool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    let (out, _) = max_pool_impl(x, k)?;
    Ok(out)
}

/// Routes each output gradient to the first maximal cell of its window.
pub fn max_pool2d_backward(x: &Tensor, k: usize, dy: &Tensor) -> Result<Tensor> {
    let (_, argmax) = max_pool_impl(x, k)?;
    x.expect_same_shape("max_pool2d backward", dy)?;
    let mut dx = Tensor::zeros_like(x);
    let d = dx.data_mut();
    for (i, &src) in argmax.iter().enumerate() {
        d[src] += dy.data()[i];
    }
    Ok(dx)
}

fn max_pool_impl(x: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>)> {
    if k.is_multiple_of(2) {
        return Err(Error::invalid(
            "max_pool2d",
            format!("kernel size must be odd, got {k}"),
        ));
    }
    let [n, c, h, w] = x.dims4("max_pool2d")?;
    let r = k / 2;
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    let mut argmax = Vec::with_capacity(x.numel());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..h {
            let y0 = oy.saturating_sub(r);
            let y1 = (oy + r).min(h - 1);
            for ox in 0..w {
                let x0 = ox.saturating_sub(r);
                let x1 = (ox + r).min(w - 1);
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + y0 * w + x0;
                for iy in y0..=y1 {
                    for ix in x0..=x1 {
                        let idx = base + iy * w + ix;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(x.shape(), out)?, argmax))
}

/// Mean over the listed axes; reduced axes are kept with extent 1.
pub fn global_avg_pool(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let (out_shape, count) = reduced_shape(x.shape(), axes)?;
    let mut out = vec![0.0; out_shape.iter().product()];
    for_each_reduced(x.shape(), &out_shape, |src, dst| out[dst] += x.data()[src]);
    for v in &mut out {
        *v /= count as f64;
    }
    Tensor::new(&out_shape, out)
}

/// Broadcasts `dy / count` back over the reduced axes.
pub fn global_avg_pool_backward(
    input_shape: &[usize],
    axes: &[usize],
    dy: &Tensor,
) -> Result<Tensor> {
    let (out_shape, count) = reduced_shape(input_shape, axes)?;
    if dy.shape() != out_shape.as_slice() {
        return Err(Error::invalid(
            "global_avg_pool backward",
            format!(
                "gradient shape {:?} != pooled shape {:?}",
                dy.shape(),
                out_shape
            ),
        ));
    }
    let mut dx = vec![0.0; input_shape.iter().product()];
    for_each_reduced(input_shape, &out_shape, |src, dst| {
        dx[src] = dy.data()[dst] / count as f64
    });
    Tensor::new(input_shape, dx)
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, usize)> {
    if axes.is_empty() {
        return Err(Error::invalid("global_avg_pool", "empty axis set"));
    }
    let mut out = shape.to_vec();
    let mut count = 1;
    for (i, &a) in axes.iter().enumerate() {
        if a >= shape.len() {
            return Err(Error::invalid(
                "global_avg_pool",
                format!("axis {a} out of range for rank {}", shape.len()),
            ));
        }
        if axes[..i].contains(&a) {
            return Err(Error::invalid(
                "global_avg_pool",
                format!("axis {a} repeated"),
            ));
        }
        count *= shape[a];
        out[a] = 1;
    }
    Ok((out, count))
}

fn for_each_reduced(shape: &[usize], out_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let total: usize = shape.iter().product();
    for src in 0..total {
        let mut dst = 0;
        for a in 0..rank {
            let i = if out_shape[a] == 1 { 0 } else { idx[a] };
            dst = dst * out_shape[a] + i;
        }
        f(src, dst);
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Row and column means: `q_h` is `[N, C, H, 1]`, `q_w` is `[N, C, 1, W]`.
pub fn directional_pool(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = x.dims4("directional_pool")?;
    let xd = x.data();
    let mut qh = vec![0.0; n * c * h];
    let mut qw = vec![0.0; n * c * w];
    for plane in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                let v = xd[(plane * h + y) * w + xx];
                qh[plane * h + y] += v;
                qw[plane * w + xx] += v;
            }
        }
    }
    qh.iter_mut().for_each(|v| *v /= w as f64);
    qw.iter_mut().for_each(|v| *v /= h as f64);
    Ok((
        Tensor::new(&[n, c, h, 1], qh)?,
        Tensor::new(&[n, c, 1, w], qw)?,
    ))
}

pub fn directional_pool_backward(
    input_shape: &[usize],
    dqh: &Tensor,
    dqw: &Tensor,
) -> Result<Tensor> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::Rank {
            op: "directional_pool backward",
            expected: 4,
            got: input_shape.len(),
        });
    };
    if dqh.shape() != [n, c, h, 1] || dqw.shape() != [n, c, 1, w] {
        return Err(Error::invalid(
            "directional_pool backward",
            "gradient shapes do not match pooled outputs",
        ));
    }
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                dx[(plane * h + y) * w + xx] =
                    dqh.data()[plane * h + y] / w as f64 + dqw.data()[plane * w + xx] / h as f64;
            }
        }
    }
    Tensor::new(input_shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error, DEFAULT_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_is_fixed_point() {
        let x = Tensor::full(&[1, 2, 5, 4], 3.25);
        for k in [1, 3, 5, 9] {
            assert_eq!(max_pool2d(&x, k).unwrap(), x);
        }
        let g = global_avg_pool(&x, &[2, 3]).unwrap();
        assert!(g.data().iter().all(|&v| v == 3.25));
        let (qh, qw) = directional_pool(&x).unwrap();
        assert!(qh.data().iter().chain(qw.data()).all(|&v| v == 3.25));
    }

    #[test]
    fn spike_spreads_to_window() {
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.data_mut()[12] = 5.0;
        let y = max_pool2d(&x, 3).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
                assert_eq!(y.at4(0, 0, r, c), if inside { 5.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(max_pool2d(&Tensor::zeros(&[1, 1, 3, 3]), 4).is_err());
    }

    #[test]
    fn max_pool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[1, 1, 7, 7], -1.0, 1.0, &mut rng);
        let y = max_pool2d(&x, 5).unwrap();
        for r in 0..7i32 {
            for c in 0..7i32 {
                let mut m = f64::NEG_INFINITY;
                for dr in -2..=2 {
                    for dc in -2..=2 {
                        let (rr, cc) = (r + dr, c + dc);
                        if (0..7).contains(&rr) && (0..7).contains(&cc) {
                            m = m.max(x.at4(0, 0, rr as usize, cc as usize));
                        }
                    }
                }
                assert_eq!(y.at4(0, 0, r as usize, c as usize), m);
            }
        }
    }

    #[test]
    fn average_of_2x2() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = global_avg_pool(&x, &[2, 3]).unwrap();
        assert_eq!(g.shape(), &[1, 1, 1, 1]);
        assert_eq!(g.data(), &[2.5]);
        assert!(global_avg_pool(&x, &[]).is_err());
    }

    #[test]
    fn directional_pool_example() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (qh, qw) = directional_pool(&x).unwrap();
        assert_eq!(qh.data(), &[1.5, 3.5]);
        assert_eq!(qw.data(), &[2.0, 3.0]);
    }

    #[test]
    fn directional_pool_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform(&[1, 3, 4, 5], -2.0, 2.0, &mut rng);
        let (qh, qw) = directional_pool(&x).unwrap();
        for c in 0..3 {
            for h in 0..4 {
                let m: f64 = (0..5).map(|w| x.at4(0, c, h, w)).sum::<f64>() / 5.0;
                assert!((qh.at4(0, c, h, 0) - m).abs() < 1e-14);
            }
            for w in 0..5 {
                let m: f64 = (0..4).map(|h| x.at4(0, c, h, w)).sum::<f64>() / 4.0;
                assert!((qw.at4(0, c, 0, w) - m).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn pooling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform(&[2, 2, 4, 3], -1.0, 1.0, &mut rng);

        let r = Tensor::uniform(&[2, 1, 1, 3], -1.0, 1.0, &mut rng);
        let f = |x: &Tensor| global_avg_pool(x, &[1, 2]).unwrap().dot(&r).unwrap();
        let a = global_avg_pool_backward(x.shape(), &[1, 2], &r).unwrap();
        let num = finite_diff_grad(f, &x, DEFAULT_EPS).unwrap();
        assert!(max_rel_error(&a, &num) < 1e-6);

        let rh = Tensor::uniform(&[2, 2, 4, 1], -1.0, 1.0, &mut rng);
        let rw = Tensor::uniform(&[2, 2, 1, 3], -1.0, 1.0, &mut rng);
        let f = |x: &Tensor| {
            let (qh, qw) = directional_pool(x).unwrap();
            qh.dot(&rh).unwrap() + qw.dot(&rw).unwrap()
        };
        let a = directional_pool_backward(x.shape(), &rh, &rw).unwrap();
        let num = finite_diff_grad(f, &x, DEFAULT_EPS).unwrap();
        assert!(max_rel_error(&a, &num) < 1e-6);

        let ry = Tensor::uniform(x.shape(), -1.0, 1.0, &mut rng);
        let f = |x: &Tensor| max_pool2d(x, 3).unwrap().dot(&ry).unwrap();
        let a = max_pool2d_backward(&x, 3, &ry).unwrap();
        let num = finite_diff_grad(f, &x, DEFAULT_EPS).unwrap();
        assert!(max_rel_error(&a, &num) < 1e-6);
    }
}
