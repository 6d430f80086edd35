use crate::error::{Error, Result};
use crate::ops::{concat, max_pool2d, max_pool2d_backward, split};
use crate::tensor::Tensor;

pub const SPP_POOLS: [usize; 3] = [5, 9, 13];

/// Identity followed by stride-1 max pools, concatenated along channels.
pub fn spp(x: &Tensor, pools: &[usize]) -> Result<Tensor> {
    let mut parts = vec![x.clone()];
    for &k in pools {
        if k % 2 == 0 {
            return Err(Error::invalid("spp", format!("pool size {k} is even")));
        }
        parts.push(max_pool2d(x, k)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    concat(&refs, 1)
}

pub fn spp_backward(x: &Tensor, pools: &[usize], dy: &Tensor) -> Result<Tensor> {
    let c = x.dims4("spp backward")?[1];
    let parts = split(dy, 1, &vec![c; pools.len() + 1])?;
    let mut dx = parts[0].clone();
    for (&k, d) in pools.iter().zip(&parts[1..]) {
        dx.accumulate(&max_pool2d_backward(x, k, d)?)?;
    }
    Ok(dx)
}
