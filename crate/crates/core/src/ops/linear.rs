use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `y = w·x + b` with `w` shaped `[out, in]`.
pub fn fully_connected(x: &[f64], w: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (out, inner) = matrix_dims(w)?;
    if x.len() != inner {
        return Err(Error::ShapeMismatch {
            op: "fully_connected",
            dim: "input length",
            expected: inner,
            got: x.len(),
        });
    }
    if b.numel() != out {
        return Err(Error::ShapeMismatch {
            op: "fully_connected",
            dim: "bias length",
            expected: out,
            got: b.numel(),
        });
    }
    let wd = w.data();
    Ok((0..out)
        .map(|o| {
            let row = &wd[o * inner..(o + 1) * inner];
            b.data()[o] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
        })
        .collect())
}

/// Returns `(dx, dw, db)` for upstream gradient `dy`.
pub fn fully_connected_backward(
    x: &[f64],
    w: &Tensor,
    dy: &[f64],
) -> Result<(Vec<f64>, Tensor, Tensor)> {
    let (out, inner) = matrix_dims(w)?;
    if x.len() != inner || dy.len() != out {
        return Err(Error::ShapeMismatch {
            op: "fully_connected backward",
            dim: "vector length",
            expected: if x.len() != inner { inner } else { out },
            got: if x.len() != inner { x.len() } else { dy.len() },
        });
    }
    let wd = w.data();
    let mut dx = vec![0.0; inner];
    let mut dw = vec![0.0; out * inner];
    for o in 0..out {
        for i in 0..inner {
            dx[i] += wd[o * inner + i] * dy[o];
            dw[o * inner + i] = dy[o] * x[i];
        }
    }
    Ok((
        dx,
        Tensor::new(&[out, inner], dw)?,
        Tensor::new(&[out], dy.to_vec())?,
    ))
}

fn matrix_dims(w: &Tensor) -> Result<(usize, usize)> {
    match w.shape() {
        &[out, inner] => Ok((out, inner)),
        s => Err(Error::Rank {
            op: "fully_connected",
            expected: 2,
            got: s.len(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error, DEFAULT_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_zero_maps() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let zero_b = Tensor::zeros(&[3]);
        assert_eq!(
            fully_connected(&[1.0, -2.0, 3.0], &eye, &zero_b).unwrap(),
            vec![1.0, -2.0, 3.0]
        );
        let b = Tensor::from_vec(vec![0.5, 1.5, -1.0]);
        assert_eq!(
            fully_connected(&[4.0, 5.0, 6.0], &Tensor::zeros(&[3, 3]), &b).unwrap(),
            vec![0.5, 1.5, -1.0]
        );
    }

    #[test]
    fn length_mismatch() {
        let w = Tensor::zeros(&[2, 3]);
        assert!(fully_connected(&[1.0, 2.0], &w, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn gradcheck_8_to_4() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Tensor::uniform(&[4, 8], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
        let x = Tensor::uniform(&[8], -1.0, 1.0, &mut rng);
        let r = [0.3, -1.2, 0.7, 2.0];
        let f = |x: &Tensor, w: &Tensor| -> f64 {
            fully_connected(x.data(), w, &b)
                .unwrap()
                .iter()
                .zip(&r)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (dx, dw, db) = fully_connected_backward(x.data(), &w, &r).unwrap();
        let ndx = finite_diff_grad(|x| f(x, &w), &x, DEFAULT_EPS).unwrap();
        let ndw = finite_diff_grad(|w| f(&x, w), &w, DEFAULT_EPS).unwrap();
        assert!(max_rel_error(&Tensor::from_vec(dx), &ndx) < 1e-6);
        assert!(max_rel_error(&dw, &ndw) < 1e-6);
        assert_eq!(db.data(), &r);
    }
}
