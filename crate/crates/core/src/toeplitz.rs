//! Toeplitz position-correlation matrices and their fast products.
//!
//! A [`ToeplitzKernel`] of length `n` stores the `2n-1` diagonal constants
//! `c_k`, `k ∈ [-(n-1), n-1]`; the implied matrix has `T[i][j] = c_{j-i}`.
//! Products are computed by embedding `T` in a circulant of size
//! `N = next_pow2(2n-1)` and multiplying in the Fourier domain.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::fft::FftPlan;
use crate::tensor::Mat;

/// Number of complex signals transformed together. Each complex signal
/// carries two real columns (real and imaginary part), so one block covers
/// `2 * FFT_BATCH` columns.
const FFT_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ToeplitzKernel {
    n: usize,
    c: Vec<f64>,
}

impl ToeplitzKernel {
    /// `c` is ordered by offset: `c[0]` is `c_{-(n-1)}`, `c[n-1]` is `c_0`,
    /// `c[2n-2]` is `c_{n-1}`.
    pub fn new(n: usize, c: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("Toeplitz kernel needs n >= 1".into()));
        }
        if c.len() != 2 * n - 1 {
            return Err(Error::shape(
                "ToeplitzKernel::new",
                format!("{} offsets for n = {n}, expected {}", c.len(), 2 * n - 1),
            ));
        }
        if let Some(v) = c.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite kernel entry {v}")));
        }
        Ok(ToeplitzKernel { n, c })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(isize) -> f64) -> Result<Self> {
        let c = (-(n as isize - 1)..n as isize).map(&mut f).collect();
        ToeplitzKernel::new(n, c)
    }

    pub fn identity(n: usize) -> Result<Self> {
        ToeplitzKernel::from_fn(n, |k| if k == 0 { 1.0 } else { 0.0 })
    }

    pub fn ones(n: usize) -> Result<Self> {
        ToeplitzKernel::from_fn(n, |_| 1.0)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// `c_k` for offset `k = j - i`.
    #[inline]
    pub fn at(&self, k: isize) -> f64 {
        self.c[(k + self.n as isize - 1) as usize]
    }

    pub fn offsets(&self) -> &[f64] {
        &self.c
    }

    /// Kernel of the transposed matrix: `c'_k = c_{-k}`.
    pub fn transposed(&self) -> ToeplitzKernel {
        let mut c = self.c.clone();
        c.reverse();
        ToeplitzKernel { n: self.n, c }
    }

    pub fn to_dense(&self) -> Mat {
        Mat::from_fn(self.n, self.n, |i, j| self.at(j as isize - i as isize))
    }

    pub fn max_abs(&self) -> f64 {
        self.c.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Zeroes `c_k` for every `k > 0`, so row `i` gets no weight from `j > i`.
pub fn causal_mask(kernel: &ToeplitzKernel) -> ToeplitzKernel {
    let mut out = kernel.clone();
    out.c[kernel.n..].iter_mut().for_each(|v| *v = 0.0);
    out
}

fn check_rows(op: &'static str, kernel_n: usize, x: &Mat) -> Result<()> {
    if x.rows() != kernel_n {
        return Err(Error::shape(
            op,
            format!("kernel of size {kernel_n} applied to {} rows", x.rows()),
        ));
    }
    Ok(())
}

/// `T·x` in O(n log n) per column.
pub fn toeplitz_matmul(kernel: &ToeplitzKernel, x: &Mat) -> Result<Mat> {
    check_rows("toeplitz_matmul", kernel.n, x)?;
    ToeplitzOperator::new(kernel)?.matmul(x)
}

/// `Tᵀ·x`, via the offset-reversed kernel.
pub fn toeplitz_transpose_matmul(kernel: &ToeplitzKernel, x: &Mat) -> Result<Mat> {
    check_rows("toeplitz_transpose_matmul", kernel.n, x)?;
    toeplitz_matmul(&kernel.transposed(), x)
}

/// Quadratic reference product.
pub fn toeplitz_matmul_naive(kernel: &ToeplitzKernel, x: &Mat) -> Result<Mat> {
    check_rows("toeplitz_matmul_naive", kernel.n, x)?;
    let n = kernel.n;
    let mut out = Mat::zeros(n, x.cols());
    for i in 0..n {
        for j in 0..n {
            let c = kernel.at(j as isize - i as isize);
            if c == 0.0 {
                continue;
            }
            let src = x.row(j).to_vec();
            for (o, v) in out.row_mut(i).iter_mut().zip(&src) {
                *o += c * v;
            }
        }
    }
    Ok(out)
}

/// A Toeplitz matrix with its circulant spectrum precomputed, so the one
/// forward transform of the kernel is shared by every column it multiplies.
#[derive(Clone, Debug)]
pub struct ToeplitzOperator {
    n: usize,
    plan: FftPlan,
    // spectrum of the circulant's first column, pre-divided by N so the
    // unnormalized inverse transform yields the product directly
    spec_re: Vec<f64>,
    spec_im: Vec<f64>,
}

impl ToeplitzOperator {
    pub fn new(kernel: &ToeplitzKernel) -> Result<Self> {
        let len = (2 * kernel.n - 1).next_power_of_two();
        ToeplitzOperator::with_plan(kernel, FftPlan::new(len)?)
    }

    /// Uses a caller-supplied plan; its length must be at least `2n-1`.
    pub fn with_plan(kernel: &ToeplitzKernel, plan: FftPlan) -> Result<Self> {
        let n = kernel.n;
        let len = plan.len();
        if len < 2 * n - 1 {
            return Err(Error::shape(
                "ToeplitzOperator",
                format!("FFT length {len} too short for n = {n}"),
            ));
        }
        // circulant first column: [c_0, c_{-1}, ..., c_{-(n-1)}, 0..., c_{n-1}, ..., c_1]
        let mut column = vec![0.0; 2 * len];
        column[0] = kernel.at(0);
        for t in 1..n {
            column[2 * t] = kernel.at(-(t as isize));
            column[2 * (len - t)] = kernel.at(t as isize);
        }
        plan.transform_batch(&mut column, 1, false);
        let scale = 1.0 / len as f64;
        let spec_re = column.iter().step_by(2).map(|v| v * scale).collect();
        let spec_im = column.iter().skip(1).step_by(2).map(|v| v * scale).collect();
        Ok(ToeplitzOperator {
            n,
            plan,
            spec_re,
            spec_im,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn fft_len(&self) -> usize {
        self.plan.len()
    }

    pub fn matmul(&self, x: &Mat) -> Result<Mat> {
        check_rows("ToeplitzOperator::matmul", self.n, x)?;
        let mut out = Mat::zeros(self.n, x.cols());
        let cols = x.cols();
        self.apply_streaming(
            cols,
            |row, range, dst| dst.copy_from_slice(&x.row(row)[range]),
            |row, range, src| out.row_mut(row)[range].copy_from_slice(src),
        );
        Ok(out)
    }

    /// Computes `T·X` for an implicit `n × ncols` matrix `X` without
    /// materializing `X` or the result. Columns are processed in blocks;
    /// `gather(row, cols, dst)` must fill `dst` with `X[row, cols]`, and
    /// `scatter(row, cols, src)` receives `(T·X)[row, cols]`.
    pub fn apply_streaming<G, S>(&self, ncols: usize, mut gather: G, mut scatter: S)
    where
        G: FnMut(usize, Range<usize>, &mut [f64]),
        S: FnMut(usize, Range<usize>, &[f64]),
    {
        let n = self.n;
        let len = self.plan.len();
        let block_cols = 2 * FFT_BATCH;
        let mut buf = vec![0.0; 2 * FFT_BATCH * len];
        let mut row_tmp = vec![0.0; block_cols];

        let mut col0 = 0;
        while col0 < ncols {
            let width = block_cols.min(ncols - col0);
            let batch = width.div_ceil(2);
            let stride = 2 * batch;
            let buf = &mut buf[..stride * len];
            buf.fill(0.0);

            for t in 0..n {
                let tmp = &mut row_tmp[..width];
                gather(t, col0..col0 + width, tmp);
                let point = &mut buf[t * stride..(t + 1) * stride];
                for (c, &v) in tmp.iter().enumerate() {
                    // even columns ride in the real part, odd in the imaginary
                    point[(c % 2) * batch + c / 2] = v;
                }
            }

            self.plan.transform_batch(buf, batch, false);
            for (t, point) in buf.chunks_exact_mut(stride).enumerate() {
                let (sr, si) = (self.spec_re[t], self.spec_im[t]);
                let (re, im) = point.split_at_mut(batch);
                for (r, i) in re.iter_mut().zip(im.iter_mut()) {
                    let (a, b) = (*r, *i);
                    *r = a * sr - b * si;
                    *i = a * si + b * sr;
                }
            }
            self.plan.transform_batch(buf, batch, true);

            for t in 0..n {
                let point = &buf[t * stride..(t + 1) * stride];
                let tmp = &mut row_tmp[..width];
                for (c, v) in tmp.iter_mut().enumerate() {
                    *v = point[(c % 2) * batch + c / 2];
                }
                scatter(t, col0..col0 + width, tmp);
            }
            col0 += width;
        }
    }
}

/// Gradient of `⟨G, T·A⟩` with respect to the kernel offsets:
/// `g_k = Σ_i ⟨G[i], A[i+k]⟩` over valid rows, ordered like
/// [`ToeplitzKernel::offsets`]. Computed as a Fourier-domain
/// cross-correlation summed over columns, one inverse transform in total.
pub fn kernel_offset_gradient(grad_out: &Mat, a: &Mat) -> Result<Vec<f64>> {
    if grad_out.shape() != a.shape() {
        return Err(Error::shape(
            "kernel_offset_gradient",
            format!("{:?} vs {:?}", grad_out.shape(), a.shape()),
        ));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    let len = (2 * n - 1).next_power_of_two();
    let plan = FftPlan::new(len)?;
    let mut acc_re = vec![0.0; len];
    let mut acc_im = vec![0.0; len];
    let cols = a.cols();
    let mut gbuf = vec![0.0; 2 * FFT_BATCH * len];
    let mut abuf = vec![0.0; 2 * FFT_BATCH * len];

    let mut col0 = 0;
    while col0 < cols {
        let batch = FFT_BATCH.min(cols - col0);
        let stride = 2 * batch;
        let gb = &mut gbuf[..stride * len];
        let ab = &mut abuf[..stride * len];
        gb.fill(0.0);
        ab.fill(0.0);
        for t in 0..n {
            for b in 0..batch {
                gb[t * stride + b] = grad_out.get(t, col0 + b);
                ab[t * stride + b] = a.get(t, col0 + b);
            }
        }
        plan.transform_batch(gb, batch, false);
        plan.transform_batch(ab, batch, false);
        for t in 0..len {
            let g = &gb[t * stride..(t + 1) * stride];
            let h = &ab[t * stride..(t + 1) * stride];
            for b in 0..batch {
                let (gr, gi) = (g[b], g[batch + b]);
                let (hr, hi) = (h[b], h[batch + b]);
                // conj(G)·H
                acc_re[t] += gr * hr + gi * hi;
                acc_im[t] += gr * hi - gi * hr;
            }
        }
        col0 += batch;
    }

    let mut spectrum: Vec<f64> = acc_re.iter().zip(&acc_im).flat_map(|(&r, &i)| [r, i]).collect();
    plan.transform_batch(&mut spectrum, 1, true);
    let scale = 1.0 / len as f64;
    let out = (-(n as isize - 1)..n as isize)
        .map(|k| {
            let idx = k.rem_euclid(len as isize) as usize;
            spectrum[2 * idx] * scale
        })
        .collect();
    Ok(out)
}
