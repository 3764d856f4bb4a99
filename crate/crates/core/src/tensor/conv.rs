use super::gemm::{col2im_acc, gemm_acc, im2col, transpose, Mat, Window};
use super::{ensure_same_shape, ConvParams, LayerGrad, Real, Shape, Tensor};
use crate::error::{Error, Result};

struct Geom {
    input: Shape,
    output: Shape,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn conv<T: Real>(x: Shape, p: &ConvParams<T>) -> Result<Self> {
        let ks = p.kernels.shape();
        if x.c != ks.c {
            return Err(Error::invalid(format!(
                "conv2d: input has {} channels but kernels {ks} expect {}",
                x.c, ks.c
            )));
        }
        let (ph, pw) = (x.h + 2 * p.pad, x.w + 2 * p.pad);
        if ph < ks.h || pw < ks.w {
            return Err(Error::invalid(format!(
                "conv2d: padded input {ph}x{pw} smaller than kernel {}x{}",
                ks.h, ks.w
            )));
        }
        let oh = (ph - ks.h) / p.stride + 1;
        let ow = (pw - ks.w) / p.stride + 1;
        Ok(Self {
            input: x,
            output: Shape::new(x.n, ks.n, oh, ow),
            kh: ks.h,
            kw: ks.w,
            stride: p.stride,
            pad: p.pad,
        })
    }

    fn deconv<T: Real>(x: Shape, p: &ConvParams<T>) -> Result<Self> {
        let ks = p.kernels.shape();
        if x.c != ks.c {
            return Err(Error::invalid(format!(
                "deconv: input has {} channels but kernels {ks} expect {}",
                x.c, ks.c
            )));
        }
        let full_h = (x.h - 1) * p.stride + ks.h;
        let full_w = (x.w - 1) * p.stride + ks.w;
        if full_h <= 2 * p.pad || full_w <= 2 * p.pad {
            return Err(Error::invalid(format!(
                "deconv: padding {} leaves no output for input {x}",
                p.pad
            )));
        }
        Ok(Self {
            input: x,
            output: Shape::new(x.n, ks.n, full_h - 2 * p.pad, full_w - 2 * p.pad),
            kh: ks.h,
            kw: ks.w,
            stride: p.stride,
            pad: p.pad,
        })
    }

    /// Window sliding over `img` (channels `c`) producing the `grid` positions.
    fn window(&self, img: Shape, c: usize, grid: Shape) -> Window {
        Window {
            c,
            h: img.h,
            w: img.w,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
            oh: grid.h,
            ow: grid.w,
        }
    }
}

/// Kernels `(oc, ic, kh, kw)` regrouped as the `(oc * kh * kw) x ic` matrix
/// used by the transposed convolution.
fn deconv_matrix<T: Real>(p: &ConvParams<T>) -> Vec<T> {
    let ks = p.kernels.shape();
    let taps = ks.h * ks.w;
    let mut out = vec![T::zero(); ks.n * taps * ks.c];
    for oc in 0..ks.n {
        for ic in 0..ks.c {
            let src = &p.kernels.data()[(oc * ks.c + ic) * taps..][..taps];
            for (t, &v) in src.iter().enumerate() {
                out[(oc * taps + t) * ks.c + ic] = v;
            }
        }
    }
    out
}

/// Cross-correlation `y[oc] = bias[oc] + sum_ic k[oc, ic] * x[ic]` with zero padding.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let g = Geom::conv(x.shape(), p)?;
    let win = g.window(g.input, g.input.c, g.output);
    let kmat = Mat::new(p.kernels.data(), g.output.c, win.rows());
    let mut cols = vec![T::zero(); win.rows() * win.cols()];
    let mut out = Tensor::zeros(g.output);
    let per_out = g.output.c * g.output.plane();
    for b in 0..g.input.n {
        im2col(&x.data()[b * x.shape().c * x.shape().plane()..][..x.shape().c * x.shape().plane()], &win, &mut cols);
        let o = &mut out.data_mut()[b * per_out..(b + 1) * per_out];
        for (oc, plane) in o.chunks_exact_mut(g.output.plane()).enumerate() {
            plane.fill(p.bias[oc]);
        }
        gemm_acc(kmat, Mat::new(&cols, win.rows(), win.cols()), o, win.cols());
    }
    Ok(out)
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    d_out: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let g = Geom::conv(x.shape(), p)?;
    ensure_same_shape("conv2d_backward d_out", d_out.shape(), g.output)?;
    let win = g.window(g.input, g.input.c, g.output);
    let (rows, ncols) = (win.rows(), win.cols());
    let kt = transpose(p.kernels.data(), g.output.c, rows);
    let mut d_input = Tensor::zeros(g.input);
    let mut d_kt = vec![T::zero(); rows * g.output.c];
    let mut d_bias = vec![T::zero(); g.output.c];
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dcols = vec![T::zero(); rows * ncols];
    let per_in = g.input.c * g.input.plane();
    let per_out = g.output.c * g.output.plane();
    for b in 0..g.input.n {
        let dy = &d_out.data()[b * per_out..(b + 1) * per_out];
        for (oc, plane) in dy.chunks_exact(g.output.plane()).enumerate() {
            d_bias[oc] += plane.iter().copied().sum();
        }
        im2col(&x.data()[b * per_in..(b + 1) * per_in], &win, &mut cols);
        let dy_t = transpose(dy, g.output.c, ncols);
        gemm_acc(
            Mat::new(&cols, rows, ncols),
            Mat::new(&dy_t, ncols, g.output.c),
            &mut d_kt,
            g.output.c,
        );
        dcols.fill(T::zero());
        gemm_acc(Mat::new(&kt, rows, g.output.c), Mat::new(dy, g.output.c, ncols), &mut dcols, ncols);
        col2im_acc(&dcols, &win, &mut d_input.data_mut()[b * per_in..(b + 1) * per_in]);
    }
    let d_kernels = Tensor::from_vec(p.kernels.shape(), transpose(&d_kt, rows, g.output.c))?;
    Ok(LayerGrad {
        d_input,
        d_kernels,
        d_bias,
    })
}

/// Transposed convolution: each input pixel scatters `x * k[oc, ic]` into the
/// output at `in * stride + k_off - pad`. It is the adjoint of
/// [`conv2d_forward`] with the same stride/pad and channel-swapped kernels.
pub fn deconv_forward<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let g = Geom::deconv(x.shape(), p)?;
    // windows slide over the output image; the grid is the input
    let win = g.window(g.output, g.output.c, g.input);
    let wmat = deconv_matrix(p);
    let mut cols = vec![T::zero(); win.rows() * win.cols()];
    let mut out = Tensor::zeros(g.output);
    let per_in = g.input.c * g.input.plane();
    let per_out = g.output.c * g.output.plane();
    for b in 0..g.input.n {
        cols.fill(T::zero());
        gemm_acc(
            Mat::new(&wmat, win.rows(), g.input.c),
            Mat::new(&x.data()[b * per_in..(b + 1) * per_in], g.input.c, win.cols()),
            &mut cols,
            win.cols(),
        );
        let o = &mut out.data_mut()[b * per_out..(b + 1) * per_out];
        for (oc, plane) in o.chunks_exact_mut(g.output.plane()).enumerate() {
            plane.fill(p.bias[oc]);
        }
        col2im_acc(&cols, &win, o);
    }
    Ok(out)
}

pub fn deconv_backward<T: Real>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    d_out: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let g = Geom::deconv(x.shape(), p)?;
    ensure_same_shape("deconv_backward d_out", d_out.shape(), g.output)?;
    let win = g.window(g.output, g.output.c, g.input);
    let (rows, ncols, ic) = (win.rows(), win.cols(), g.input.c);
    let wt = transpose(&deconv_matrix(p), rows, ic);
    let mut d_input = Tensor::zeros(g.input);
    let mut d_w = vec![T::zero(); rows * ic];
    let mut d_bias = vec![T::zero(); g.output.c];
    let mut dcols = vec![T::zero(); rows * ncols];
    let per_in = ic * g.input.plane();
    let per_out = g.output.c * g.output.plane();
    for b in 0..g.input.n {
        let dy = &d_out.data()[b * per_out..(b + 1) * per_out];
        for (oc, plane) in dy.chunks_exact(g.output.plane()).enumerate() {
            d_bias[oc] += plane.iter().copied().sum();
        }
        im2col(dy, &win, &mut dcols);
        let xb = &x.data()[b * per_in..(b + 1) * per_in];
        gemm_acc(
            Mat::new(&wt, ic, rows),
            Mat::new(&dcols, rows, ncols),
            &mut d_input.data_mut()[b * per_in..(b + 1) * per_in],
            ncols,
        );
        let xt = transpose(xb, ic, ncols);
        gemm_acc(Mat::new(&dcols, rows, ncols), Mat::new(&xt, ncols, ic), &mut d_w, ic);
    }
    // back to (oc, ic, kh, kw)
    let ks = p.kernels.shape();
    let taps = ks.h * ks.w;
    let mut d_kernels = Tensor::zeros(ks);
    for oc in 0..ks.n {
        for i in 0..ks.c {
            for t in 0..taps {
                d_kernels.data_mut()[(oc * ks.c + i) * taps + t] = d_w[(oc * taps + t) * ks.c + i];
            }
        }
    }
    Ok(LayerGrad {
        d_input,
        d_kernels,
        d_bias,
    })
}

fn ensure_deconv4<T: Real>(p: &ConvParams<T>) -> Result<()> {
    let ks = p.kernels.shape();
    if (ks.h, ks.w, p.stride, p.pad) != (8, 8, 4, 2) {
        return Err(Error::invalid(format!(
            "deconv4 expects an 8x8 kernel with stride 4 and pad 2, got {}x{} stride {} pad {}",
            ks.h, ks.w, p.stride, p.pad
        )));
    }
    Ok(())
}

/// x4 upsampling transposed convolution (kernel 8, stride 4, pad 2); output is
/// exactly `(n, out_c, 4h, 4w)`.
pub fn deconv4_forward<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    ensure_deconv4(p)?;
    deconv_forward(x, p)
}

pub fn deconv4_backward<T: Real>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    d_out: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    ensure_deconv4(p)?;
    deconv_backward(x, p, d_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, compare};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn params(out_c: usize, in_c: usize, k: usize, stride: usize, pad: usize, seed: u64) -> ConvParams<f64> {
        let mut r = rng(seed);
        let kernels = Tensor::random_normal(Shape::new(out_c, in_c, k, k), 1.0, &mut r);
        let bias = Tensor::<f64>::random_normal(Shape::new(1, 1, 1, out_c), 1.0, &mut r).into_vec();
        ConvParams::new(kernels, bias, stride, pad).unwrap()
    }

    /// Six nested loops over (b, oc, oy, ox, ic, ky, kx), straight from the definition.
    fn naive_conv(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let xs = x.shape();
        let ks = p.kernels.shape();
        let oh = (xs.h + 2 * p.pad - ks.h) / p.stride + 1;
        let ow = (xs.w + 2 * p.pad - ks.w) / p.stride + 1;
        let mut out = Tensor::zeros(Shape::new(xs.n, ks.n, oh, ow));
        for b in 0..xs.n {
            for oc in 0..ks.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.bias[oc];
                        for ic in 0..xs.c {
                            for ky in 0..ks.h {
                                for kx in 0..ks.w {
                                    let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                                    let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                        continue;
                                    }
                                    acc += p.kernels.at(oc, ic, ky, kx) * x.at(b, ic, iy as usize, ix as usize);
                                }
                            }
                        }
                        *out.at_mut(b, oc, oy, ox) = acc;
                    }
                }
            }
        }
        out
    }

    /// Scatter form of the transposed convolution, straight from the definition.
    fn naive_deconv(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let xs = x.shape();
        let ks = p.kernels.shape();
        let oh = (xs.h - 1) * p.stride + ks.h - 2 * p.pad;
        let ow = (xs.w - 1) * p.stride + ks.w - 2 * p.pad;
        let mut out = Tensor::zeros(Shape::new(xs.n, ks.n, oh, ow));
        for b in 0..xs.n {
            for oc in 0..ks.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        *out.at_mut(b, oc, oy, ox) = p.bias[oc];
                    }
                }
                for ic in 0..xs.c {
                    for iy in 0..xs.h {
                        for ix in 0..xs.w {
                            for ky in 0..ks.h {
                                for kx in 0..ks.w {
                                    let oy = (iy * p.stride + ky) as isize - p.pad as isize;
                                    let ox = (ix * p.stride + kx) as isize - p.pad as isize;
                                    if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                        continue;
                                    }
                                    *out.at_mut(b, oc, oy as usize, ox as usize) +=
                                        p.kernels.at(oc, ic, ky, kx) * x.at(b, ic, iy, ix);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, rel: f64) {
        assert_eq!(a.shape(), b.shape());
        for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
            assert!(
                (x - y).abs() <= rel * x.abs().max(y.abs()).max(1.0),
                "index {i}: {x} vs {y}"
            );
        }
    }

    #[test]
    fn box_filter_counts_neighbours() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let p = ConvParams::new(Tensor::full(Shape::new(1, 1, 3, 3), 1.0), vec![0.0], 1, 1).unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(0, 0, r, c), 4.0);
        }
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::random_normal(Shape::new(2, 1, 5, 4), 1.0, &mut rng(1));
        let p = ConvParams::new(Tensor::full(Shape::new(1, 1, 1, 1), 1.0), vec![0.0], 1, 0).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = Tensor::random_normal(Shape::new(1, 2, 5, 5), 1.0, &mut rng(2));
        let p = params(3, 2, 3, 1, 1, 3);
        assert_close(&conv2d_forward(&x, &p).unwrap(), &naive_conv(&x, &p), 1e-12);

        let x = Tensor::random_normal(Shape::new(2, 3, 9, 11), 1.0, &mut rng(4));
        for (k, stride, pad) in [(7, 1, 3), (5, 1, 2), (3, 2, 1), (8, 4, 2), (1, 1, 0), (3, 1, 0)] {
            let p = params(2, 3, k, stride, pad, 5);
            assert_close(&conv2d_forward(&x, &p).unwrap(), &naive_conv(&x, &p), 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 5, 5));
        let p = params(3, 4, 3, 1, 1, 0);
        let err = conv2d_forward(&x, &p).unwrap_err().to_string();
        assert!(err.contains("2 channels"), "{err}");
        let bad = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let p = params(3, 2, 3, 1, 1, 0);
        assert!(conv2d_backward(&x, &p, &bad).is_err());
    }

    #[test]
    fn conv_backward_trivial_cases() {
        let x = Tensor::random_normal(Shape::new(1, 2, 4, 4), 1.0, &mut rng(6));
        let p = params(3, 2, 3, 1, 1, 7);
        let g = conv2d_backward(&x, &p, &Tensor::zeros(Shape::new(1, 3, 4, 4))).unwrap();
        assert!(g.d_input.data().iter().all(|&v| v == 0.0));
        assert!(g.d_kernels.data().iter().all(|&v| v == 0.0));
        assert!(g.d_bias.iter().all(|&v| v == 0.0));

        let x = Tensor::random_normal(Shape::new(1, 1, 4, 4), 1.0, &mut rng(8));
        let id = ConvParams::new(Tensor::full(Shape::new(1, 1, 1, 1), 1.0), vec![0.0], 1, 0).unwrap();
        let mut d = Tensor::zeros(Shape::new(1, 1, 4, 4));
        *d.at_mut(0, 0, 2, 1) = 1.0;
        let g = conv2d_backward(&x, &id, &d).unwrap();
        assert_eq!(g.d_input, d);
    }

    /// Gradients of `L = <f(x), r>` for a fixed random projection `r`.
    fn fd_check(
        forward: impl Fn(&Tensor<f64>, &ConvParams<f64>) -> Result<Tensor<f64>>,
        backward: impl Fn(&Tensor<f64>, &ConvParams<f64>, &Tensor<f64>) -> Result<LayerGrad<f64>>,
        x: &Tensor<f64>,
        p: &ConvParams<f64>,
        tol: f64,
    ) {
        let y = forward(x, p).unwrap();
        let r = Tensor::random_normal(y.shape(), 1.0, &mut rng(99));
        let g = backward(x, p, &r).unwrap();

        let loss_x = |v: &[f64]| {
            let xx = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
            forward(&xx, p).unwrap().dot(&r).unwrap()
        };
        let num = central_diff(x.data(), 1e-5, loss_x);
        let c = compare(g.d_input.data(), &num);
        assert!(c.max_rel < tol, "d_input {c:?}");

        let loss_k = |v: &[f64]| {
            let mut pp = p.clone();
            pp.kernels.data_mut().copy_from_slice(v);
            forward(x, &pp).unwrap().dot(&r).unwrap()
        };
        let num = central_diff(p.kernels.data(), 1e-5, loss_k);
        let c = compare(g.d_kernels.data(), &num);
        assert!(c.max_rel < tol, "d_kernels {c:?}");

        let loss_b = |v: &[f64]| {
            let mut pp = p.clone();
            pp.bias.copy_from_slice(v);
            forward(x, &pp).unwrap().dot(&r).unwrap()
        };
        let num = central_diff(&p.bias, 1e-5, loss_b);
        let c = compare(&g.d_bias, &num);
        assert!(c.max_rel < tol, "d_bias {c:?}");
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = Tensor::random_normal(Shape::new(2, 2, 5, 6), 1.0, &mut rng(10));
        fd_check(conv2d_forward, conv2d_backward, &x, &params(3, 2, 3, 1, 1, 11), 1e-6);
        fd_check(conv2d_forward, conv2d_backward, &x, &params(2, 2, 3, 2, 1, 12), 1e-6);
        fd_check(conv2d_forward, conv2d_backward, &x, &params(2, 2, 7, 1, 3, 13), 1e-6);
    }

    #[test]
    fn deconv_matches_naive_scatter() {
        let x = Tensor::random_normal(Shape::new(2, 3, 3, 4), 1.0, &mut rng(20));
        for (k, stride, pad) in [(8, 4, 2), (4, 2, 1), (3, 1, 1), (5, 3, 0)] {
            let p = params(2, 3, k, stride, pad, 21);
            assert_close(&deconv_forward(&x, &p).unwrap(), &naive_deconv(&x, &p), 1e-12);
        }
    }

    #[test]
    fn deconv4_output_is_four_times_input() {
        let x = Tensor::random_normal(Shape::new(1, 2, 3, 5), 1.0, &mut rng(22));
        let p = ConvParams::bilinear_upsample(2, 4);
        assert_eq!(deconv4_forward(&x, &p).unwrap().shape(), Shape::new(1, 2, 12, 20));
        let wrong = params(2, 2, 4, 2, 1, 0);
        assert!(deconv4_forward(&x, &wrong).is_err());
    }

    #[test]
    fn bilinear_one_hot_gives_interpolation_stencil() {
        let p = ConvParams::<f64>::bilinear_upsample(1, 4);
        let mut x = Tensor::zeros(Shape::new(1, 1, 4, 4));
        *x.at_mut(0, 0, 1, 2) = 1.0;
        let y = deconv4_forward(&x, &p).unwrap();
        // A unit input spreads over an 8x8 tent of total mass stride^2.
        assert!((y.sum() - 16.0).abs() < 1e-12);
        let nonzero = y.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 64);
        // Peak taps (7/8)^2 sit on the four output pixels closest to the input centre.
        for (oy, ox) in [(5, 9), (5, 10), (6, 9), (6, 10)] {
            assert!((y.at(0, 0, oy, ox) - 49.0 / 64.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_is_partition_of_unity_in_the_interior() {
        let p = ConvParams::<f64>::bilinear_upsample(3, 4);
        let x = Tensor::full(Shape::new(1, 3, 5, 5), 1.0);
        let y = deconv4_forward(&x, &p).unwrap();
        for c in 0..3 {
            for oy in 2..18 {
                for ox in 2..18 {
                    assert!((y.at(0, c, oy, ox) - 1.0).abs() < 1e-12, "({oy},{ox})");
                }
            }
        }
    }

    #[test]
    fn deconv_is_adjoint_of_strided_conv() {
        let mut r = rng(30);
        let x = Tensor::random_normal(Shape::new(2, 3, 4, 5), 1.0, &mut r);
        let mut p = params(2, 3, 8, 4, 2, 31);
        p.bias = vec![0.0; 2];
        let y = Tensor::random_normal(Shape::new(2, 2, 16, 20), 1.0, &mut r);

        // Channel-swapped kernels turn the transposed conv into an ordinary strided conv.
        let ks = p.kernels.shape();
        let mut swapped = Tensor::zeros(Shape::new(ks.c, ks.n, ks.h, ks.w));
        for o in 0..ks.n {
            for i in 0..ks.c {
                for ky in 0..ks.h {
                    for kx in 0..ks.w {
                        *swapped.at_mut(i, o, ky, kx) = p.kernels.at(o, i, ky, kx);
                    }
                }
            }
        }
        let adj = ConvParams::new(swapped, vec![0.0; 3], 4, 2).unwrap();
        let lhs = deconv4_forward(&x, &p).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&conv2d_forward(&y, &adj).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn deconv_backward_matches_finite_differences() {
        let x = Tensor::random_normal(Shape::new(2, 2, 3, 3), 1.0, &mut rng(40));
        fd_check(deconv4_forward, deconv4_backward, &x, &params(3, 2, 8, 4, 2, 41), 1e-6);
        fd_check(deconv_forward, deconv_backward, &x, &params(2, 2, 3, 2, 1, 42), 1e-6);
    }

    #[test]
    fn forward_is_bitwise_pure() {
        let x = Tensor::random_normal(Shape::new(1, 2, 6, 6), 1.0, &mut rng(50));
        let p = params(3, 2, 5, 1, 2, 51);
        let a = conv2d_forward(&x, &p).unwrap();
        let b = conv2d_forward(&x, &p).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn conv_and_deconv_are_affine(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut r = rng(seed);
            let x = Tensor::random_normal(Shape::new(1, 2, 4, 4), 1.0, &mut r);
            let y = Tensor::random_normal(Shape::new(1, 2, 4, 4), 1.0, &mut r);
            let mut mix = x.clone();
            mix.scale(a);
            mix.axpy(b, &y).unwrap();
            for (is_deconv, p) in [(false, params(3, 2, 3, 1, 1, seed)), (true, params(3, 2, 8, 4, 2, seed))] {
                let f = |t: &Tensor<f64>| if is_deconv { deconv_forward(t, &p).unwrap() } else { conv2d_forward(t, &p).unwrap() };
                let lhs = f(&mix);
                let mut rhs = f(&x);
                rhs.scale(a);
                rhs.axpy(b, &f(&y)).unwrap();
                // Subtract (a + b - 1) * bias from every output channel.
                let s = rhs.shape();
                for c in 0..s.c {
                    for v in rhs.plane_mut(0, c) {
                        *v -= (a + b - 1.0) * p.bias[c];
                    }
                }
                for (u, v) in lhs.data().iter().zip(rhs.data()) {
                    prop_assert!((u - v).abs() < 1e-10 * (1.0 + u.abs()));
                }
            }
        }
    }
}
