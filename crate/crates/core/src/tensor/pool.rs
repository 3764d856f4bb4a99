use super::{ensure_same_shape, Real, Shape, Tensor};
use crate::error::{Error, Result};

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `d_out` where `x > 0`; the subgradient at `x == 0` is zero.
pub fn relu_backward<T: Real>(x: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("relu_backward", x.shape(), d_out.shape())?;
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Flat input index of the maximum of every 2x2 window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Shape,
    pub argmax: Vec<usize>,
}

/// 2x2 stride-2 max pooling. Ties go to the first maximal element in
/// row-major window order.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "maxpool2 needs even spatial dims, got {}x{}",
            s.h, s.w
        )));
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(os.len());
    let mut argmax = Vec::with_capacity(os.len());
    let data = x.data();
    for b in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let top = s.index(b, c, 2 * oy, 2 * ox);
                    let mut best = top;
                    for cand in [top + 1, top + s.w, top + s.w + 1] {
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(os, out)?,
        PoolIndices {
            input_shape: s,
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Real>(idx: &PoolIndices, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    let s = idx.input_shape;
    ensure_same_shape(
        "maxpool2_backward",
        d_out.shape(),
        Shape::new(s.n, s.c, s.h / 2, s.w / 2),
    )?;
    let mut d_in = Tensor::zeros(s);
    let di = d_in.data_mut();
    for (&i, &d) in idx.argmax.iter().zip(d_out.data()) {
        di[i] += d;
    }
    Ok(d_in)
}
