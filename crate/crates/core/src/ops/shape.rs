use crate::error::{Error, Result};
use crate::tensor::{axis_name, Tensor};

/// (outer, axis extent, inner) factorisation of a shape around `axis`.
fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::invalid(
            "concat",
            format!("axis {axis} >= rank {rank}"),
        ));
    }
    for x in &xs[1..] {
        if x.rank() != rank {
            return Err(Error::Rank {
                op: "concat",
                expected: rank,
                got: x.rank(),
            });
        }
        for a in (0..rank).filter(|&a| a != axis) {
            if x.shape()[a] != first.shape()[a] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    dim: axis_name(rank, a),
                    expected: first.shape()[a],
                    got: x.shape()[a],
                });
            }
        }
    }
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let (outer, _, inner) = split_dims(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for x in xs {
            let len = x.shape()[axis] * inner;
            out.extend_from_slice(&x.data()[o * len..(o + 1) * len]);
        }
    }
    Tensor::new(&shape, out)
}

pub fn split(x: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
    if axis >= x.rank() {
        return Err(Error::invalid(
            "split",
            format!("axis {axis} >= rank {}", x.rank()),
        ));
    }
    let total: usize = sizes.iter().sum();
    if total != x.shape()[axis] {
        return Err(Error::ShapeMismatch {
            op: "split",
            dim: axis_name(x.rank(), axis),
            expected: x.shape()[axis],
            got: total,
        });
    }
    let (outer, extent, inner) = split_dims(x.shape(), axis);
    let mut parts = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for &size in sizes {
        let mut shape = x.shape().to_vec();
        shape[axis] = size;
        let mut data = Vec::with_capacity(outer * size * inner);
        for o in 0..outer {
            let start = (o * extent + offset) * inner;
            data.extend_from_slice(&x.data()[start..start + size * inner]);
        }
        parts.push(Tensor::new(&shape, data)?);
        offset += size;
    }
    Ok(parts)
}

/// Nearest-neighbour upsampling of a rank-4 tensor by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("upsample_nearest")?;
    if factor == 0 {
        return Err(Error::invalid(
            "upsample_nearest",
            "factor must be positive",
        ));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for y in 0..oh {
            let row = &plane[(y / factor) * w..(y / factor + 1) * w];
            for xx in 0..ow {
                out.push(row[xx / factor]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn upsample_nearest_backward(dy: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, oh, ow] = dy.dims4("upsample_nearest backward")?;
    if factor == 0 || oh % factor != 0 || ow % factor != 0 {
        return Err(Error::invalid(
            "upsample_nearest backward",
            "gradient extents not divisible by factor",
        ));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = vec![0.0; n * c * h * w];
    for (p, plane) in dy.data().chunks(oh * ow).enumerate() {
        for y in 0..oh {
            for xx in 0..ow {
                dx[p * h * w + (y / factor) * w + xx / factor] += plane[y * ow + xx];
            }
        }
    }
    Tensor::new(&[n, c, h, w], dx)
}
