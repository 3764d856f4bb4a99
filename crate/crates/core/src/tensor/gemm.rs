//! Small dense kernels behind the convolutions: a register-blocked matrix
//! product and the im2col/col2im lowering. Summation orders are fixed, so
//! results are bitwise reproducible.

use super::Real;

const MR: usize = 4;
const NR: usize = 8;

/// Row-major matrix view: `rows x cols` with leading dimension `ld`.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub ld: usize,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            ld: cols,
        }
    }
}

/// `c += a * b` where `c` is `a.rows x b.cols` with leading dimension `ldc`.
pub(crate) fn gemm_acc<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, c: &mut [T], ldc: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { gemm_avx2(a, b, c, ldc) };
        return;
    }
    gemm_kernel(a, b, c, ldc);
}

/// Same kernel compiled with wider vectors. Products and sums are still
/// rounded separately (no fused multiply-add), so results are identical to
/// the baseline build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, c: &mut [T], ldc: usize) {
    gemm_kernel(a, b, c, ldc);
}

#[inline(always)]
fn gemm_kernel<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, c: &mut [T], ldc: usize) {
    let (m, n, k) = (a.rows, b.cols, a.cols);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // A packed into MR-row panels, column by column (zero padded).
    let panels = m.div_ceil(MR);
    let mut packed = vec![T::zero(); panels * k * MR];
    for ip in 0..panels {
        let dst = &mut packed[ip * k * MR..(ip + 1) * k * MR];
        for r in 0..MR.min(m - ip * MR) {
            let row = &a.data[(ip * MR + r) * a.ld..(ip * MR + r) * a.ld + k];
            for (p, &v) in row.iter().enumerate() {
                dst[p * MR + r] = v;
            }
        }
    }

    // B copied one NR-column panel at a time so the inner loop reads contiguously.
    let mut bpanel = vec![T::zero(); k * NR];
    let mut j0 = 0;
    while j0 < n {
        let nr = NR.min(n - j0);
        if nr == NR {
            for (p, dst) in bpanel.chunks_exact_mut(NR).enumerate() {
                dst.copy_from_slice(&b.data[p * b.ld + j0..p * b.ld + j0 + NR]);
            }
        }
        for ip in 0..panels {
            let ap = &packed[ip * k * MR..(ip + 1) * k * MR];
            let mut acc = [[T::zero(); NR]; MR];
            if nr == NR {
                for (brow, av) in bpanel.chunks_exact(NR).zip(ap.chunks_exact(MR)) {
                    let brow: &[T; NR] = brow.try_into().expect("NR wide");
                    let av: &[T; MR] = av.try_into().expect("MR tall");
                    for r in 0..MR {
                        for j in 0..NR {
                            acc[r][j] += av[r] * brow[j];
                        }
                    }
                }
            } else {
                for p in 0..k {
                    let brow = &b.data[p * b.ld + j0..p * b.ld + j0 + nr];
                    let av = &ap[p * MR..p * MR + MR];
                    for r in 0..MR {
                        for j in 0..nr {
                            acc[r][j] += av[r] * brow[j];
                        }
                    }
                }
            }
            for r in 0..MR.min(m - ip * MR) {
                let crow = &mut c[(ip * MR + r) * ldc + j0..(ip * MR + r) * ldc + j0 + nr];
                for (cv, &v) in crow.iter_mut().zip(&acc[r]) {
                    *cv += v;
                }
            }
        }
        j0 += NR;
    }
}

/// Row-major transpose of a `rows x cols` matrix.
pub(crate) fn transpose<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for (c, &v) in src[r * cols..(r + 1) * cols].iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

/// Sliding-window geometry over a `c x h x w` image producing an `oh x ow` grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Grid positions `j in 0..j_len` whose tap `j * stride + k - pad` lands in `0..t_len`.
pub(crate) fn strided_span(k: usize, pad: usize, stride: usize, j_len: usize, t_len: usize) -> std::ops::Range<usize> {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if t_len + pad < k + 1 {
        return 0..0;
    }
    let hi = ((t_len - 1 + pad - k) / stride + 1).min(j_len);
    lo..hi.max(lo)
}

/// `cols[(c, ky, kx)][oy * ow + ox] = img[c][oy * s + ky - pad][ox * s + kx - pad]`, zero outside.
pub(crate) fn im2col<T: Real>(img: &[T], g: &Window, cols: &mut [T]) {
    let n = g.cols();
    cols.fill(T::zero());
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let oys = strided_span(ky, g.pad, g.stride, g.oh, g.h);
            for kx in 0..g.kw {
                let oxs = strided_span(kx, g.pad, g.stride, g.ow, g.w);
                let row = &mut cols[((c * g.kh + ky) * g.kw + kx) * n..][..n];
                if oxs.is_empty() {
                    continue;
                }
                let ix0 = oxs.start * g.stride + kx - g.pad;
                for oy in oys.clone() {
                    let src = &plane[(oy * g.stride + ky - g.pad) * g.w..][..g.w];
                    let dst = &mut row[oy * g.ow + oxs.start..oy * g.ow + oxs.end];
                    if g.stride == 1 {
                        dst.copy_from_slice(&src[ix0..ix0 + dst.len()]);
                    } else {
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates every column entry back onto its pixel.
pub(crate) fn col2im_acc<T: Real>(cols: &[T], g: &Window, img: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let oys = strided_span(ky, g.pad, g.stride, g.oh, g.h);
            for kx in 0..g.kw {
                let oxs = strided_span(kx, g.pad, g.stride, g.ow, g.w);
                if oxs.is_empty() {
                    continue;
                }
                let row = &cols[((c * g.kh + ky) * g.kw + kx) * n..][..n];
                let ix0 = oxs.start * g.stride + kx - g.pad;
                for oy in oys.clone() {
                    let dst = &mut plane[(oy * g.stride + ky - g.pad) * g.w..][..g.w];
                    let src = &row[oy * g.ow + oxs.start..oy * g.ow + oxs.end];
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + src.len()].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in src.iter().enumerate() {
                            dst[ix0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    proptest! {
        #[test]
        fn gemm_matches_triple_loop(m in 1usize..11, n in 1usize..21, k in 1usize..9, seed in 0u64..1000) {
            let val = |i: usize| ((i as u64 * 2654435761 + seed) % 97) as f64 / 13.0 - 3.0;
            let a: Vec<f64> = (0..m * k).map(val).collect();
            let b: Vec<f64> = (0..k * n).map(|i| val(i + 7)).collect();
            let mut c = vec![1.0; m * n];
            gemm_acc(Mat::new(&a, m, k), Mat::new(&b, k, n), &mut c, n);
            for (x, y) in c.iter().zip(naive(m, n, k, &a, &b)) {
                prop_assert!((x - 1.0 - y).abs() < 1e-9);
            }
        }

        #[test]
        fn col2im_is_adjoint_of_im2col(h in 1usize..9, w in 1usize..9, k in 1usize..4, s in 1usize..3, pad in 0usize..3) {
            prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
            let g = Window { c: 2, h, w, kh: k, kw: k, stride: s, pad,
                oh: (h + 2 * pad - k) / s + 1, ow: (w + 2 * pad - k) / s + 1 };
            let img: Vec<f64> = (0..2 * h * w).map(|i| (i % 7) as f64 - 3.0).collect();
            let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| (i % 5) as f64 - 2.0).collect();
            let mut cols = vec![0.0; y.len()];
            im2col(&img, &g, &mut cols);
            let mut back = vec![0.0; img.len()];
            col2im_acc(&y, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn transpose_small() {
        assert_eq!(transpose(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
