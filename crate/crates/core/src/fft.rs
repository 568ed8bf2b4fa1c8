//! Iterative radix-2 FFT.
//!
//! Besides the single-signal [`fft`], the plan can transform a *batch* of
//! equal-length signals stored point-major: point `t` of all `B` signals
//! occupies `2B` consecutive values, `B` real parts followed by `B`
//! imaginary parts. Each butterfly then runs over contiguous slices, which
//! the compiler vectorizes. With `B = 1` the layout is the ordinary
//! interleaved `[re, im, re, im, ...]`.

use crate::error::{Error, Result};

/// Complex signal with interleaved real/imaginary parts and power-of-two
/// length.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexBuf {
    data: Vec<f64>,
}

impl ComplexBuf {
    pub fn from_interleaved(data: Vec<f64>) -> Result<Self> {
        if !data.len().is_multiple_of(2) {
            return Err(Error::shape("ComplexBuf", "odd number of interleaved values"));
        }
        let len = data.len() / 2;
        if !len.is_power_of_two() {
            return Err(Error::shape(
                "ComplexBuf",
                format!("length {len} is not a power of two"),
            ));
        }
        Ok(ComplexBuf { data })
    }

    pub fn from_real(values: &[f64]) -> Result<Self> {
        ComplexBuf::from_interleaved(values.iter().flat_map(|&v| [v, 0.0]).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, k: usize) -> (f64, f64) {
        (self.data[2 * k], self.data[2 * k + 1])
    }

    pub fn interleaved(&self) -> &[f64] {
        &self.data
    }

    pub fn into_interleaved(self) -> Vec<f64> {
        self.data
    }
}

/// Forward transform `X_k = Σ_t x_t e^{-2πi kt/N}`; the inverse carries the
/// `1/N` factor so that `fft(fft(x, false), true) == x`.
pub fn fft(buf: &ComplexBuf, inverse: bool) -> Result<ComplexBuf> {
    let plan = FftPlan::new(buf.len())?;
    fft_with_plan(&plan, buf, inverse)
}

pub fn fft_with_plan(plan: &FftPlan, buf: &ComplexBuf, inverse: bool) -> Result<ComplexBuf> {
    if buf.len() != plan.len() {
        return Err(Error::shape(
            "fft",
            format!("buffer length {} but plan length {}", buf.len(), plan.len()),
        ));
    }
    let mut data = buf.data.clone();
    plan.transform_batch(&mut data, 1, inverse);
    if inverse {
        let scale = 1.0 / plan.len() as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(ComplexBuf { data })
}

/// Precomputed twiddles and bit-reversal permutation for one length.
#[derive(Clone, Debug)]
pub struct FftPlan {
    len: usize,
    tw_re: Vec<f64>,
    tw_im: Vec<f64>,
    bitrev: Vec<u32>,
}

impl FftPlan {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 || !len.is_power_of_two() {
            return Err(Error::shape(
                "FftPlan",
                format!("length {len} is not a power of two"),
            ));
        }
        if len > u32::MAX as usize {
            return Err(Error::shape("FftPlan", format!("length {len} too large")));
        }
        let half = len / 2;
        let (tw_re, tw_im) = (0..half)
            .map(|k| {
                let angle = -std::f64::consts::TAU * k as f64 / len as f64;
                (angle.cos(), angle.sin())
            })
            .unzip();
        let bits = len.trailing_zeros();
        let bitrev = (0..len as u32)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (32 - bits) })
            .collect();
        Ok(FftPlan {
            len,
            tw_re,
            tw_im,
            bitrev,
        })
    }

    /// A deliberately broken plan: one twiddle has its sign flipped. Exists
    /// so self-tests can prove they catch a faulty transform.
    pub fn with_flipped_twiddle(len: usize) -> Result<Self> {
        let mut plan = FftPlan::new(len)?;
        if plan.tw_re.len() > 1 {
            plan.tw_im[1] = -plan.tw_im[1];
        } else if let Some(w) = plan.tw_re.first_mut() {
            *w = -*w;
        }
        Ok(plan)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Unnormalized in-place transform of `batch` signals in point-major
    /// split layout (see module docs). `data.len()` must be `2 * batch * len`.
    pub fn transform_batch(&self, data: &mut [f64], batch: usize, inverse: bool) {
        let n = self.len;
        let stride = 2 * batch;
        assert_eq!(data.len(), n * stride, "batch buffer has wrong length");

        for i in 0..n {
            let j = self.bitrev[i] as usize;
            if j > i {
                let (lo, hi) = data.split_at_mut(j * stride);
                lo[i * stride..(i + 1) * stride].swap_with_slice(&mut hi[..stride]);
            }
        }

        let sign = if inverse { -1.0 } else { 1.0 };
        let mut half = 1;
        while half < n {
            let tw_step = n / (2 * half);
            for start in (0..n).step_by(2 * half) {
                for k in 0..half {
                    let wr = self.tw_re[k * tw_step];
                    let wi = sign * self.tw_im[k * tw_step];
                    let a = (start + k) * stride;
                    let b = a + half * stride;
                    let (lo, hi) = data.split_at_mut(b);
                    let (x_re, x_im) = lo[a..a + stride].split_at_mut(batch);
                    let (y_re, y_im) = hi[..stride].split_at_mut(batch);
                    butterfly(x_re, x_im, y_re, y_im, wr, wi);
                }
            }
            half *= 2;
        }
    }
}

#[inline(always)]
fn butterfly(x_re: &mut [f64], x_im: &mut [f64], y_re: &mut [f64], y_im: &mut [f64], wr: f64, wi: f64) {
    for (((xr, xi), yr), yi) in x_re
        .iter_mut()
        .zip(x_im.iter_mut())
        .zip(y_re.iter_mut())
        .zip(y_im.iter_mut())
    {
        let tr = wr * *yr - wi * *yi;
        let ti = wr * *yi + wi * *yr;
        *yr = *xr - tr;
        *yi = *xi - ti;
        *xr += tr;
        *xi += ti;
    }
}
