//! Slice-level compute kernels. Everything here is single threaded and
//! accumulates in a fixed order, so results are bitwise reproducible.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// `c[m×n] += a[m×k] · b[k×n]`, accumulating over `k` in increasing order.
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + a_ip * bv;
            }
        }
    }
}

/// `c[k×n] += aᵀ · b` with `a[m×k]`, `b[m×n]`.
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + a_ip * bv;
            }
        }
    }
}

/// `c[m×k] += a · bᵀ` with `a[m×n]`, `b[k×n]`.
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            c[i * k + p] = c[i * k + p] + acc;
        }
    }
}

/// Shape bookkeeping for a channels-last 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let &[batch, in_h, in_w, in_c] = input else {
            return Err(Error::Rank {
                op: "conv2d",
                expected: 4,
                found: input.len(),
            });
        };
        let &[kernel_h, kernel_w, k_in, out_c] = kernel else {
            return Err(Error::Rank {
                op: "conv2d kernel",
                expected: 4,
                found: kernel.len(),
            });
        };
        if k_in != in_c {
            return Err(Error::dim("conv2d", "channels", in_c, k_in));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if in_h + 2 * pad < kernel_h {
            return Err(Error::Config(format!(
                "conv2d: input height {in_h} with padding {pad} is smaller than kernel height {kernel_h}"
            )));
        }
        if in_w + 2 * pad < kernel_w {
            return Err(Error::Config(format!(
                "conv2d: input width {in_w} with padding {pad} is smaller than kernel width {kernel_w}"
            )));
        }
        Ok(ConvGeometry {
            batch,
            in_h,
            in_w,
            in_c,
            kernel_h,
            kernel_w,
            out_c,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel_h) / stride + 1,
            out_w: (in_w + 2 * pad - kernel_w) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_c]
    }

    fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_c
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn sample_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    /// A 1×1, stride 1, unpadded convolution reads its input as the patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let k = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut cols[(oy * self.out_w + ox) * k..][..k];
                for ky in 0..self.kernel_h {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    for kx in 0..self.kernel_w {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let dst = &mut row[(ky * self.kernel_w + kx) * self.in_c..][..self.in_c];
                        if iy < 0 || ix < 0 || iy >= self.in_h as isize || ix >= self.in_w as isize
                        {
                            dst.fill(T::zero());
                        } else {
                            let src = (iy as usize * self.in_w + ix as usize) * self.in_c;
                            dst.copy_from_slice(&x[src..src + self.in_c]);
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let k = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &cols[(oy * self.out_w + ox) * k..][..k];
                for ky in 0..self.kernel_h {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel_w {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        let src = &row[(ky * self.kernel_w + kx) * self.in_c..][..self.in_c];
                        let dst = (iy as usize * self.in_w + ix as usize) * self.in_c;
                        for (d, &s) in dx[dst..dst + self.in_c].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeometry, x: &[T], kernel: &[T]) -> Vec<T> {
    let (p, k, co) = (g.positions(), g.patch_len(), g.out_c);
    let mut out = vec![T::zero(); g.batch * p * co];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); p * k]
    };
    for n in 0..g.batch {
        let xs = &x[n * g.sample_len()..(n + 1) * g.sample_len()];
        let patches: &[T] = if g.is_pointwise() {
            xs
        } else {
            g.im2col(xs, &mut cols);
            &cols
        };
        gemm_nn(
            p,
            k,
            co,
            patches,
            kernel,
            &mut out[n * p * co..(n + 1) * p * co],
        );
    }
    out
}

/// Accumulates input and kernel gradients for one convolution.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    kernel: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    dkernel: Option<&mut [T]>,
) {
    let (p, k, co) = (g.positions(), g.patch_len(), g.out_c);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); p * k]
    };
    let mut dcols = vec![T::zero(); p * k];
    let mut dk_acc = dkernel;
    for n in 0..g.batch {
        let xs = &x[n * g.sample_len()..(n + 1) * g.sample_len()];
        let dys = &dy[n * p * co..(n + 1) * p * co];
        if let Some(dk) = dk_acc.as_deref_mut() {
            let patches: &[T] = if g.is_pointwise() {
                xs
            } else {
                g.im2col(xs, &mut cols);
                &cols
            };
            gemm_tn(p, k, co, patches, dys, dk);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[n * g.sample_len()..(n + 1) * g.sample_len()];
            if g.is_pointwise() {
                gemm_nt(p, k, co, dys, kernel, dxs);
            } else {
                dcols.fill(T::zero());
                gemm_nt(p, k, co, dys, kernel, &mut dcols);
                g.col2im(&dcols, dxs);
            }
        }
    }
}

/// Mean over the spatial positions of a `[n, h, w, c]` map.
pub fn global_avg_pool<T: Real>(n: usize, h: usize, w: usize, c: usize, x: &[T]) -> Result<Vec<T>> {
    if h * w == 0 {
        return Err(Error::Config("global_avg_pool: zero spatial extent".into()));
    }
    let scale = T::one() / T::of((h * w) as f64);
    let mut out = vec![T::zero(); n * c];
    for b in 0..n {
        let acc = &mut out[b * c..(b + 1) * c];
        for pos in 0..h * w {
            let row = &x[(b * h * w + pos) * c..][..c];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        for a in acc.iter_mut() {
            *a = *a * scale;
        }
    }
    Ok(out)
}

/// Per-channel biased mean and variance over all rows of a channels-last buffer.
pub fn channel_moments<T: Real>(x: &[T], channels: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / channels;
    let inv = T::one() / T::of(rows as f64);
    let mut mean = vec![T::zero(); channels];
    for row in x.chunks_exact(channels) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m * inv);
    let mut var = vec![T::zero(); channels];
    for row in x.chunks_exact(channels) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s = *s + d * d;
        }
    }
    var.iter_mut().for_each(|s| *s = *s * inv);
    (mean, var)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_nn(2, 3, 4, &a, &b, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // aᵀ·c has shape 3x4
        let mut t = vec![0.0; 12];
        gemm_tn(2, 3, 4, &a, &c, &mut t);
        for p in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|i| a[i * 3 + p] * c[i * 4 + j]).sum();
                assert_eq!(t[p * 4 + j], want);
            }
        }
        // c·bᵀ has shape 2x3
        let mut u = vec![0.0; 6];
        gemm_nt(2, 3, 4, &c, &b, &mut u);
        for i in 0..2 {
            for p in 0..3 {
                let want: f64 = (0..4).map(|j| c[i * 4 + j] * b[p * 4 + j]).sum();
                assert_eq!(u[i * 3 + p], want);
            }
        }
    }

    #[test]
    fn output_extent_formula() {
        let g = ConvGeometry::new(&[1, 7, 5, 2], &[3, 3, 2, 4], 2, 1).unwrap();
        assert_eq!(g.out_h, (7 + 2 - 3) / 2 + 1);
        assert_eq!(g.out_w, (5 + 2 - 3) / 2 + 1);
    }

    #[test]
    fn kernel_larger_than_padded_map_is_rejected() {
        let err = ConvGeometry::new(&[1, 1, 4, 1], &[3, 3, 1, 1], 1, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_spatial_extent_pool_errors() {
        assert!(global_avg_pool::<f32>(1, 0, 3, 1, &[]).is_err());
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert!(sigmoid(-1000.0f64) >= 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(50.0f32) <= 1.0);
    }
}
