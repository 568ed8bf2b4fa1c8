//! Attention variants: exact softmax attention (with optional relative
//! position bias), linear-time kernelized attention, the quadratic
//! kernelized-with-RPE reference, and the FFT-accelerated normalized
//! kernelized attention with RPE together with its analytic gradient.
//!
//! Offsets follow the convention `T[i][j] = c_{j-i}`: query `i` weights
//! key `j` by `exp(b_{j-i})`.

use crate::error::{Error, Result};
use crate::features::FeatureMapSpec;
use crate::tensor::{dot, matmul, row_l2_normalize, Mat, NORM_GUARD};
use crate::toeplitz::{causal_mask, kernel_offset_gradient, ToeplitzKernel, ToeplitzOperator};

pub const DEFAULT_DENOM_GUARD: f64 = 1e-6;

/// Relative position bias `b_{j-i}` for `j - i ∈ [-(n-1), n-1]`. Offsets
/// may be masked, meaning `b = -∞` (zero weight).
#[derive(Clone, Debug, PartialEq)]
pub struct RpeBias {
    n: usize,
    b: Vec<f64>,
    masked: Vec<bool>,
}

impl RpeBias {
    /// `b` is ordered by offset from `-(n-1)` to `n-1`. Entries equal to
    /// `-∞` become masked offsets.
    pub fn new(n: usize, b: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("bias needs n >= 1".into()));
        }
        if b.len() != 2 * n - 1 {
            return Err(Error::shape(
                "RpeBias::new",
                format!("{} offsets for n = {n}, expected {}", b.len(), 2 * n - 1),
            ));
        }
        let masked: Vec<bool> = b.iter().map(|&v| v == f64::NEG_INFINITY).collect();
        let mut b = b;
        for (v, &m) in b.iter_mut().zip(&masked) {
            if m {
                *v = 0.0;
            } else if !v.exp().is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "bias entry {v} has non-finite exponential"
                )));
            }
        }
        Ok(RpeBias { n, b, masked })
    }

    pub fn zeros(n: usize) -> Result<Self> {
        RpeBias::new(n, vec![0.0; 2 * n.max(1) - 1])
    }

    pub fn from_fn(n: usize, f: impl FnMut(isize) -> f64) -> Result<Self> {
        let b = (-(n as isize - 1)..n as isize).map(f).collect();
        RpeBias::new(n, b)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn index(&self, k: isize) -> usize {
        (k + self.n as isize - 1) as usize
    }

    /// `b_k`; `-∞` for masked offsets.
    pub fn at(&self, k: isize) -> f64 {
        let idx = self.index(k);
        if self.masked[idx] {
            f64::NEG_INFINITY
        } else {
            self.b[idx]
        }
    }

    pub fn is_masked(&self, k: isize) -> bool {
        self.masked[self.index(k)]
    }

    pub fn mask(&mut self, k: isize) {
        let idx = self.index(k);
        self.masked[idx] = true;
        self.b[idx] = 0.0;
    }

    /// Unmasked values, masked offsets reported as 0.
    pub fn values(&self) -> &[f64] {
        &self.b
    }

    /// `c_k = exp(b_k)`, exactly 0 at masked offsets.
    pub fn to_kernel(&self) -> ToeplitzKernel {
        let c = self
            .b
            .iter()
            .zip(&self.masked)
            .map(|(&b, &m)| if m { 0.0 } else { b.exp() })
            .collect();
        ToeplitzKernel::new(self.n, c).expect("validated at construction")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Temperature {
    /// Logits divided by √d (the classic scaled dot product).
    SoftmaxScaled,
    /// Queries and keys pre-scaled by d^{-1/4}; equals `SoftmaxScaled` for
    /// softmax and makes φ(q)·φ(k) estimate exp(q·k/√d) for kernel paths.
    KernelMatched,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    /// ℓ2-normalize projected queries and keys; disables the temperature.
    pub normalize_qk: bool,
    pub causal: bool,
    pub temperature: Temperature,
    pub denom_guard: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            normalize_qk: true,
            causal: false,
            temperature: Temperature::SoftmaxScaled,
            denom_guard: DEFAULT_DENOM_GUARD,
        }
    }
}

impl AttentionConfig {
    pub fn normalized() -> Self {
        AttentionConfig::default()
    }

    pub fn unnormalized(temperature: Temperature) -> Self {
        AttentionConfig {
            normalize_qk: false,
            temperature,
            ..AttentionConfig::default()
        }
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.denom_guard > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "denominator guard must be positive, got {}",
                self.denom_guard
            )));
        }
        Ok(())
    }
}

/// Sign-preserving clamp of a denominator away from zero.
#[inline]
pub fn guard_denominator(den: f64, guard: f64) -> f64 {
    if den < 0.0 {
        -(-den).max(guard)
    } else {
        den.max(guard)
    }
}

/// Projected (and possibly normalized / temperature-scaled) inputs.
#[derive(Clone, Debug)]
pub struct Projected {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Factor applied to q·k inside softmax logits.
    pub logit_scale: f64,
}

fn check_inputs(q: &Mat, k: &Mat, v: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> Result<usize> {
    let n = q.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("attention over an empty sequence".into()));
    }
    if k.rows() != n || v.rows() != n {
        return Err(Error::shape(
            "attention",
            format!("q, k, v have {}, {}, {} rows", n, k.rows(), v.rows()),
        ));
    }
    for (name, x, w) in [("q", q, wq), ("k", k, wk), ("v", v, wv)] {
        if x.cols() != w.rows() {
            return Err(Error::shape(
                "attention",
                format!("{name} has {} columns but its projection has {} rows", x.cols(), w.rows()),
            ));
        }
    }
    if wq.cols() != wk.cols() {
        return Err(Error::shape(
            "attention",
            format!("query width {} differs from key width {}", wq.cols(), wk.cols()),
        ));
    }
    Ok(n)
}

fn check_bias(bias: Option<&RpeBias>, n: usize) -> Result<()> {
    match bias {
        Some(b) if b.n() != n => Err(Error::shape(
            "attention",
            format!("bias built for n = {} applied to n = {n}", b.n()),
        )),
        _ => Ok(()),
    }
}

/// Projects inputs and applies normalization or temperature.
/// `kernel_path` selects how the temperature is realized: kernel paths
/// cannot scale logits, so they always pre-scale q and k.
pub fn project_inputs(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    cfg: &AttentionConfig,
    kernel_path: bool,
) -> Result<Projected> {
    check_inputs(q, k, v, wq, wk, wv)?;
    cfg.validate()?;
    let mut qp = matmul(q, wq)?;
    let mut kp = matmul(k, wk)?;
    let vp = matmul(v, wv)?;
    let d = wq.cols() as f64;
    let mut logit_scale = 1.0;
    if cfg.normalize_qk {
        qp = row_l2_normalize(&qp, NORM_GUARD)?;
        kp = row_l2_normalize(&kp, NORM_GUARD)?;
    } else {
        match (cfg.temperature, kernel_path) {
            (Temperature::None, _) => {}
            (Temperature::SoftmaxScaled, false) => logit_scale = 1.0 / d.sqrt(),
            (Temperature::SoftmaxScaled, true) | (Temperature::KernelMatched, _) => {
                let s = d.powf(-0.25);
                qp = qp.scaled(s);
                kp = kp.scaled(s);
            }
        }
    }
    Ok(Projected {
        q: qp,
        k: kp,
        v: vp,
        logit_scale,
    })
}

/// Computes softmax weights for query row `i` into `probs` (length n).
/// `k_t` is the key matrix transposed (d × n).
fn softmax_row(
    i: usize,
    p: &Projected,
    k_t: &Mat,
    bias: Option<&RpeBias>,
    causal: bool,
    probs: &mut [f64],
) -> Result<()> {
    let n = probs.len();
    probs.fill(0.0);
    for (a, &qa) in p.q.row(i).iter().enumerate() {
        for (l, kv) in probs.iter_mut().zip(k_t.row(a)) {
            *l += qa * kv;
        }
    }
    let limit = if causal { i + 1 } else { n };
    let mut max = f64::NEG_INFINITY;
    for (j, l) in probs.iter_mut().enumerate() {
        let b = match bias {
            Some(bias) => bias.at(j as isize - i as isize),
            None => 0.0,
        };
        *l = if j >= limit { f64::NEG_INFINITY } else { *l * p.logit_scale + b };
        max = max.max(*l);
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateRow { row: i });
    }
    let mut total = 0.0;
    for l in probs.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    let inv = 1.0 / total;
    probs.iter_mut().for_each(|l| *l *= inv);
    Ok(())
}

/// Exact softmax attention, optionally with relative position bias.
/// Streams one query row at a time, so memory stays O(n·d).
#[allow(clippy::too_many_arguments)]
pub fn softmax_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    bias: Option<&RpeBias>,
    cfg: &AttentionConfig,
) -> Result<Mat> {
    let p = project_inputs(q, k, v, wq, wk, wv, cfg, false)?;
    let n = p.q.rows();
    check_bias(bias, n)?;
    let k_t = p.k.transpose();
    let dv = p.v.cols();
    let mut out = Mat::zeros(n, dv);
    let mut probs = vec![0.0; n];
    for i in 0..n {
        softmax_row(i, &p, &k_t, bias, cfg.causal, &mut probs)?;
        let row = out.row_mut(i);
        for (j, &w) in probs.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, vv) in row.iter_mut().zip(p.v.row(j)) {
                *o += w * vv;
            }
        }
    }
    Ok(out)
}

/// The n×n row-stochastic softmax weight matrix.
pub fn attention_scores(
    q: &Mat,
    k: &Mat,
    wq: &Mat,
    wk: &Mat,
    bias: Option<&RpeBias>,
    cfg: &AttentionConfig,
) -> Result<Mat> {
    // values are irrelevant; project a zero-width placeholder
    let v = Mat::zeros(q.rows(), 0);
    let wv = Mat::zeros(0, 0);
    let p = project_inputs(q, k, &v, wq, wk, &wv, cfg, false)?;
    let n = p.q.rows();
    check_bias(bias, n)?;
    let k_t = p.k.transpose();
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        softmax_row(i, &p, &k_t, bias, cfg.causal, out.row_mut(i))?;
    }
    Ok(out)
}

fn check_feature_shapes(op: &'static str, phi_q: &Mat, phi_k: &Mat, v: &Mat) -> Result<()> {
    if phi_q.cols() != phi_k.cols() {
        return Err(Error::shape(
            op,
            format!("feature widths {} and {} differ", phi_q.cols(), phi_k.cols()),
        ));
    }
    if phi_k.rows() != v.rows() {
        return Err(Error::shape(
            op,
            format!("{} key rows but {} value rows", phi_k.rows(), v.rows()),
        ));
    }
    if phi_q.rows() == 0 || phi_k.rows() == 0 {
        return Err(Error::InvalidArgument(format!("{op}: empty sequence")));
    }
    Ok(())
}

fn check_guard(guard: f64) -> Result<()> {
    if !(guard > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "denominator guard must be positive, got {guard}"
        )));
    }
    Ok(())
}

/// Linear-time kernelized attention:
/// `z_i = φ(q_i)·Σ_j φ(k_j)ᵀv_j / φ(q_i)·Σ_j φ(k_j)ᵀ`.
pub fn kernelized_attention(phi_q: &Mat, phi_k: &Mat, v: &Mat, denom_guard: f64) -> Result<Mat> {
    check_feature_shapes("kernelized_attention", phi_q, phi_k, v)?;
    check_guard(denom_guard)?;
    let m = phi_k.cols();
    let dv = v.cols();
    let mut kv = vec![0.0; m * dv];
    let mut k_sum = vec![0.0; m];
    for j in 0..phi_k.rows() {
        for (a, &f) in phi_k.row(j).iter().enumerate() {
            k_sum[a] += f;
            for (s, vv) in kv[a * dv..(a + 1) * dv].iter_mut().zip(v.row(j)) {
                *s += f * vv;
            }
        }
    }
    let mut out = Mat::zeros(phi_q.rows(), dv);
    for i in 0..phi_q.rows() {
        let fq = phi_q.row(i);
        let den = guard_denominator(dot(fq, &k_sum), denom_guard);
        let row = out.row_mut(i);
        for (a, &f) in fq.iter().enumerate() {
            for (o, s) in row.iter_mut().zip(&kv[a * dv..(a + 1) * dv]) {
                *o += f * s;
            }
        }
        row.iter_mut().for_each(|o| *o /= den);
    }
    Ok(out)
}

fn check_kernel(op: &'static str, kernel: &ToeplitzKernel, phi_q: &Mat, phi_k: &Mat) -> Result<()> {
    if kernel.n() != phi_k.rows() || kernel.n() != phi_q.rows() {
        return Err(Error::shape(
            op,
            format!(
                "kernel of size {} with {} queries and {} keys",
                kernel.n(),
                phi_q.rows(),
                phi_k.rows()
            ),
        ));
    }
    Ok(())
}

/// Quadratic kernelized attention with RPE:
/// `z_i = φ(q_i)·Σ_j c_{j-i}φ(k_j)ᵀv_j / φ(q_i)·Σ_j c_{j-i}φ(k_j)ᵀ`.
pub fn kernelized_attention_rpe_naive(
    phi_q: &Mat,
    phi_k: &Mat,
    v: &Mat,
    kernel: &ToeplitzKernel,
    denom_guard: f64,
) -> Result<Mat> {
    check_feature_shapes("kernelized_attention_rpe_naive", phi_q, phi_k, v)?;
    check_kernel("kernelized_attention_rpe_naive", kernel, phi_q, phi_k)?;
    check_guard(denom_guard)?;
    let n = kernel.n();
    let m = phi_k.cols();
    let dv = v.cols();
    let mut out = Mat::zeros(n, dv);
    let mut kv = vec![0.0; m * dv];
    let mut k_sum = vec![0.0; m];
    for i in 0..n {
        kv.fill(0.0);
        k_sum.fill(0.0);
        for j in 0..n {
            let c = kernel.at(j as isize - i as isize);
            if c == 0.0 {
                continue;
            }
            for (a, &f) in phi_k.row(j).iter().enumerate() {
                let cf = c * f;
                k_sum[a] += cf;
                for (s, vv) in kv[a * dv..(a + 1) * dv].iter_mut().zip(v.row(j)) {
                    *s += cf * vv;
                }
            }
        }
        let fq = phi_q.row(i);
        let den = guard_denominator(dot(fq, &k_sum), denom_guard);
        let row = out.row_mut(i);
        for (a, &f) in fq.iter().enumerate() {
            for (o, s) in row.iter_mut().zip(&kv[a * dv..(a + 1) * dv]) {
                *o += f * s;
            }
        }
        row.iter_mut().for_each(|o| *o /= den);
    }
    Ok(out)
}

/// FFT path on precomputed features.
///
/// The stacked right factor has, for every feature `a`, the `dv` columns
/// `φ(k_j)_a·v_j` followed by the column `φ(k_j)_a`, so a single Toeplitz
/// product yields both the numerator terms and the denominator terms and
/// one kernel spectrum serves all of them. Columns are generated and
/// contracted with `φ(q_i)` block by block, so neither the `n × m·dv`
/// factor nor its product is ever materialized.
pub fn kernelized_attention_rpe_fft(
    phi_q: &Mat,
    phi_k: &Mat,
    v: &Mat,
    kernel: &ToeplitzKernel,
    denom_guard: f64,
) -> Result<Mat> {
    check_feature_shapes("kernelized_attention_rpe_fft", phi_q, phi_k, v)?;
    check_kernel("kernelized_attention_rpe_fft", kernel, phi_q, phi_k)?;
    check_guard(denom_guard)?;
    let op = ToeplitzOperator::new(kernel)?;
    Ok(fused_forward(&op, phi_q, phi_k, v, denom_guard))
}

/// As [`kernelized_attention_rpe_fft`] with a caller-built operator.
pub fn kernelized_attention_rpe_with_operator(
    op: &ToeplitzOperator,
    phi_q: &Mat,
    phi_k: &Mat,
    v: &Mat,
    denom_guard: f64,
) -> Result<Mat> {
    check_feature_shapes("kernelized_attention_rpe_with_operator", phi_q, phi_k, v)?;
    if op.n() != phi_q.rows() || op.n() != phi_k.rows() {
        return Err(Error::shape(
            "kernelized_attention_rpe_with_operator",
            format!("operator is for n = {}, inputs have {} rows", op.n(), phi_q.rows()),
        ));
    }
    check_guard(denom_guard)?;
    Ok(fused_forward(op, phi_q, phi_k, v, denom_guard))
}

fn fused_forward(op: &ToeplitzOperator, phi_q: &Mat, phi_k: &Mat, v: &Mat, guard: f64) -> Mat {
    let n = phi_q.rows();
    let m = phi_k.cols();
    let dv = v.cols();
    let width = dv + 1;
    let mut acc = vec![0.0; n * width];
    op.apply_streaming(
        m * width,
        |t, cols, dst| {
            let fk = phi_k.row(t);
            let vt = v.row(t);
            for (o, c) in dst.iter_mut().zip(cols) {
                let (a, e) = (c / width, c % width);
                *o = if e < dv { fk[a] * vt[e] } else { fk[a] };
            }
        },
        |t, cols, src| {
            let fq = phi_q.row(t);
            let acc_row = &mut acc[t * width..(t + 1) * width];
            for (&s, c) in src.iter().zip(cols) {
                acc_row[c % width] += fq[c / width] * s;
            }
        },
    );
    let mut out = Mat::zeros(n, dv);
    for t in 0..n {
        let acc_row = &acc[t * width..(t + 1) * width];
        let den = guard_denominator(acc_row[dv], guard);
        for (o, a) in out.row_mut(t).iter_mut().zip(acc_row) {
            *o = a / den;
        }
    }
    out
}

fn effective_kernel(bias: &RpeBias, causal: bool) -> ToeplitzKernel {
    let kernel = bias.to_kernel();
    if causal {
        causal_mask(&kernel)
    } else {
        kernel
    }
}

/// Normalized kernelized attention with RPE on already projected rows:
/// applies φ, exponentiates the bias (masking future keys if `causal`) and
/// runs the FFT path.
pub fn rpe_nka_projected(
    q_hat: &Mat,
    k_hat: &Mat,
    v_hat: &Mat,
    bias: &RpeBias,
    spec: &FeatureMapSpec,
    causal: bool,
    denom_guard: f64,
) -> Result<Mat> {
    check_bias(Some(bias), q_hat.rows())?;
    let phi_q = spec.apply(q_hat)?;
    let phi_k = spec.apply(k_hat)?;
    kernelized_attention_rpe_fft(&phi_q, &phi_k, v_hat, &effective_kernel(bias, causal), denom_guard)
}

/// Efficient normalized kernelized attention with RPE:
/// project (and ℓ2-normalize when `cfg.normalize_qk`), map through φ,
/// multiply by the Toeplitz matrix `exp(b)` via FFT and normalize.
/// O(n log n · m · d).
#[allow(clippy::too_many_arguments)]
pub fn rpe_nka(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    bias: &RpeBias,
    spec: &FeatureMapSpec,
    cfg: &AttentionConfig,
) -> Result<Mat> {
    let p = project_inputs(q, k, v, wq, wk, wv, cfg, true)?;
    rpe_nka_projected(&p.q, &p.k, &p.v, bias, spec, cfg.causal, cfg.denom_guard)
}

/// Gradients of `L = Σ grad_out ⊙ output` for [`rpe_nka`]. `q`, `k`, `v` are
/// with respect to the projected (and normalized) rows that enter φ and the
/// value product; `b` is with respect to the bias offsets, ordered like
/// [`RpeBias::values`], zero at masked offsets.
#[derive(Clone, Debug)]
pub struct RpeNkaGrads {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    pub b: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn rpe_nka_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    bias: &RpeBias,
    spec: &FeatureMapSpec,
    cfg: &AttentionConfig,
    grad_out: &Mat,
) -> Result<RpeNkaGrads> {
    let p = project_inputs(q, k, v, wq, wk, wv, cfg, true)?;
    rpe_nka_projected_backward(&p.q, &p.k, &p.v, bias, spec, cfg.causal, cfg.denom_guard, grad_out)
}

#[allow(clippy::too_many_arguments)]
pub fn rpe_nka_projected_backward(
    q_hat: &Mat,
    k_hat: &Mat,
    v_hat: &Mat,
    bias: &RpeBias,
    spec: &FeatureMapSpec,
    causal: bool,
    denom_guard: f64,
    grad_out: &Mat,
) -> Result<RpeNkaGrads> {
    let n = q_hat.rows();
    check_bias(Some(bias), n)?;
    check_guard(denom_guard)?;
    let dv = v_hat.cols();
    if grad_out.shape() != (n, dv) {
        return Err(Error::shape(
            "rpe_nka_backward",
            format!("grad_out is {:?}, output is {:?}", grad_out.shape(), (n, dv)),
        ));
    }
    let phi_q = spec.apply(q_hat)?;
    let phi_k = spec.apply(k_hat)?;
    check_feature_shapes("rpe_nka_backward", &phi_q, &phi_k, v_hat)?;
    let kernel = effective_kernel(bias, causal);
    let op = ToeplitzOperator::new(&kernel)?;
    let op_t = ToeplitzOperator::new(&kernel.transposed())?;

    let m = phi_k.cols();
    let width = dv + 1;
    // stacked right factor A[j, (a, e)] = φ(k_j)_a · [v_j, 1]_e
    let a_mat = Mat::from_fn(n, m * width, |j, c| {
        let (a, e) = (c / width, c % width);
        phi_k.get(j, a) * if e < dv { v_hat.get(j, e) } else { 1.0 }
    });
    let d_mat = op.matmul(&a_mat)?;

    // forward contraction and the gradient at the contracted level
    let mut grad_contracted = Mat::zeros(n, width);
    for i in 0..n {
        let fq = phi_q.row(i);
        let d_row = d_mat.row(i);
        let mut acc = vec![0.0; width];
        for (a, &f) in fq.iter().enumerate() {
            for (s, dval) in acc.iter_mut().zip(&d_row[a * width..(a + 1) * width]) {
                *s += f * dval;
            }
        }
        let den = acc[dv];
        let g = guard_denominator(den, denom_guard);
        let go = grad_out.row(i);
        let gc = grad_contracted.row_mut(i);
        let mut dot_num = 0.0;
        for e in 0..dv {
            gc[e] = go[e] / g;
            dot_num += go[e] * acc[e];
        }
        // clamped denominators are locally constant
        gc[dv] = if den.abs() >= denom_guard { -dot_num / (g * g) } else { 0.0 };
    }

    let mut grad_phi_q = Mat::zeros(n, m);
    let mut grad_d = Mat::zeros(n, m * width);
    for i in 0..n {
        let gc = grad_contracted.row(i).to_vec();
        let d_row = d_mat.row(i);
        for a in 0..m {
            grad_phi_q.set(i, a, dot(&gc, &d_row[a * width..(a + 1) * width]));
        }
        let fq = phi_q.row(i).to_vec();
        let gd_row = grad_d.row_mut(i);
        for (a, &f) in fq.iter().enumerate() {
            for (dst, g) in gd_row[a * width..(a + 1) * width].iter_mut().zip(&gc) {
                *dst = f * g;
            }
        }
    }

    let grad_a = op_t.matmul(&grad_d)?;
    let grad_c = kernel_offset_gradient(&grad_d, &a_mat)?;
    let grad_b: Vec<f64> = grad_c
        .iter()
        .zip(kernel.offsets())
        .map(|(g, &c)| if c == 0.0 { 0.0 } else { g * c })
        .collect();

    let mut grad_phi_k = Mat::zeros(n, m);
    let mut grad_v = Mat::zeros(n, dv);
    for j in 0..n {
        let ga = grad_a.row(j);
        let vj = v_hat.row(j);
        let fk = phi_k.row(j);
        for a in 0..m {
            let block = &ga[a * width..(a + 1) * width];
            grad_phi_k.set(j, a, dot(&block[..dv], vj) + block[dv]);
        }
        let gv = grad_v.row_mut(j);
        for (a, &f) in fk.iter().enumerate() {
            for (g, ga_val) in gv.iter_mut().zip(&ga[a * width..a * width + dv]) {
                *g += f * ga_val;
            }
        }
    }

    let mut grad_q = Mat::zeros(n, q_hat.cols());
    let mut grad_k = Mat::zeros(n, k_hat.cols());
    for i in 0..n {
        spec.vjp_row(q_hat.row(i), phi_q.row(i), grad_phi_q.row(i), grad_q.row_mut(i));
        spec.vjp_row(k_hat.row(i), phi_k.row(i), grad_phi_k.row(i), grad_k.row_mut(i));
    }

    Ok(RpeNkaGrads {
        q: grad_q,
        k: grad_k,
        v: grad_v,
        b: grad_b,
    })
}

/// Parameters of one attention head.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub bias: RpeBias,
    pub spec: FeatureMapSpec,
}

/// Runs [`rpe_nka`] once per head and concatenates the outputs column-wise.
pub fn rpe_nka_multihead(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    heads: &[HeadParams],
    cfg: &AttentionConfig,
) -> Result<Mat> {
    let outputs = heads
        .iter()
        .map(|h| rpe_nka(q, k, v, &h.wq, &h.wk, &h.wv, &h.bias, &h.spec, cfg))
        .collect::<Result<Vec<_>>>()?;
    let n = q.rows();
    let total: usize = outputs.iter().map(Mat::cols).sum();
    let mut out = Mat::zeros(n, total);
    for i in 0..n {
        let mut offset = 0;
        for o in &outputs {
            out.row_mut(i)[offset..offset + o.cols()].copy_from_slice(o.row(i));
            offset += o.cols();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use crate::rng::{gaussian_matrix, RngState};

    fn eye(d: usize) -> Mat {
        Mat::identity(d)
    }

    #[test]
    fn bias_masking_and_kernel() {
        let mut b = RpeBias::new(2, vec![1.0, f64::NEG_INFINITY, 0.5]).unwrap();
        assert!(b.is_masked(0));
        assert_eq!(b.at(0), f64::NEG_INFINITY);
        b.mask(1);
        let k = b.to_kernel();
        assert_eq!(k.offsets(), &[1.0f64.exp(), 0.0, 0.0]);
        assert!(RpeBias::new(2, vec![0.0; 2]).is_err());
        assert!(RpeBias::new(1, vec![800.0]).is_err());
        assert!(RpeBias::new(1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn guard_preserves_sign() {
        assert_eq!(guard_denominator(1e-9, 1e-6), 1e-6);
        assert_eq!(guard_denominator(-1e-9, 1e-6), -1e-6);
        assert_eq!(guard_denominator(0.0, 1e-6), 1e-6);
        assert_eq!(guard_denominator(-3.0, 1e-6), -3.0);
    }

    #[test]
    fn softmax_single_position() {
        let mut rng = RngState::new(1);
        let x = gaussian_matrix(&mut rng, 1, 3);
        let (wq, wk, wv) = (gaussian_matrix(&mut rng, 3, 3), gaussian_matrix(&mut rng, 3, 3), gaussian_matrix(&mut rng, 3, 3));
        let z = softmax_attention(&x, &x, &x, &wq, &wk, &wv, None, &AttentionConfig::default()).unwrap();
        assert!(z.max_abs_diff(&matmul(&x, &wv).unwrap()) < 1e-15);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = RngState::new(2);
        let q = gaussian_matrix(&mut rng, 5, 3);
        let krow = rng.gaussian_vec(3);
        let k = Mat::from_fn(5, 3, |_, j| krow[j]);
        let v = gaussian_matrix(&mut rng, 5, 3);
        let cfg = AttentionConfig::unnormalized(Temperature::SoftmaxScaled);
        let z = softmax_attention(&q, &k, &v, &eye(3), &eye(3), &eye(3), None, &cfg).unwrap();
        let mean: Vec<f64> = (0..3).map(|c| (0..5).map(|r| v.get(r, c)).sum::<f64>() / 5.0).collect();
        for i in 0..5 {
            for c in 0..3 {
                assert!((z.get(i, c) - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strong_diagonal_bias_concentrates() {
        let mut rng = RngState::new(3);
        let n = 6;
        let x = gaussian_matrix(&mut rng, n, 4);
        let bias = RpeBias::from_fn(n, |k| if k == 0 { 50.0 } else { 0.0 }).unwrap();
        let cfg = AttentionConfig::default();
        let s = attention_scores(&x, &x, &eye(4), &eye(4), Some(&bias), &cfg).unwrap();
        for i in 0..n {
            assert!(s.get(i, i) >= 0.999);
        }
    }

    #[test]
    fn scores_examples() {
        let cfg = AttentionConfig::unnormalized(Temperature::None);
        let s = attention_scores(&Mat::zeros(4, 2), &Mat::zeros(4, 2), &eye(2), &eye(2), None, &cfg).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        // logits (0, ln 3) via bias on a zero query
        let bias = RpeBias::new(2, vec![0.0, 0.0, 3.0f64.ln()]).unwrap();
        let s = attention_scores(&Mat::zeros(2, 1), &Mat::zeros(2, 1), &eye(1), &eye(1), Some(&bias), &cfg).unwrap();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut bias = RpeBias::zeros(2).unwrap();
        bias.mask(0);
        bias.mask(1);
        let cfg = AttentionConfig::unnormalized(Temperature::None).with_causal(true);
        let err = attention_scores(&Mat::zeros(2, 1), &Mat::zeros(2, 1), &eye(1), &eye(1), Some(&bias), &cfg).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 0 }));
    }

    #[test]
    fn empty_sequence_rejected() {
        let z = Mat::zeros(0, 2);
        let cfg = AttentionConfig::default();
        assert!(softmax_attention(&z, &z, &z, &eye(2), &eye(2), &eye(2), None, &cfg).is_err());
        assert!(kernelized_attention(&z, &z, &z, 1e-6).is_err());
    }

    #[test]
    fn kernelized_single_and_constant() {
        let v = Mat::from_rows(&[vec![1.5, -2.0]]);
        let phi = Mat::from_rows(&[vec![0.3, 0.7]]);
        let z = kernelized_attention(&phi, &phi, &v, 1e-6).unwrap();
        assert!(z.max_abs_diff(&v) < 1e-15);

        let mut rng = RngState::new(4);
        let v = gaussian_matrix(&mut rng, 5, 2);
        let phi = Mat::from_fn(5, 3, |_, _| 0.5);
        let z = kernelized_attention(&phi, &phi, &v, 1e-6).unwrap();
        for c in 0..2 {
            let mean = (0..5).map(|r| v.get(r, c)).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((z.get(i, c) - mean).abs() < 1e-12);
            }
        }
        assert!(kernelized_attention(&Mat::zeros(5, 2), &phi, &v, 1e-6).is_err());
    }

    #[test]
    fn rpe_naive_identity_and_ones() {
        let mut rng = RngState::new(5);
        let spec = FeatureMapSpec::sample(FeatureKind::Prf, 4, 3, &mut rng).unwrap();
        let x = gaussian_matrix(&mut rng, 6, 3);
        let v = gaussian_matrix(&mut rng, 6, 2);
        let phi = spec.apply(&x).unwrap();
        let id = ToeplitzKernel::identity(6).unwrap();
        let z = kernelized_attention_rpe_naive(&phi, &phi, &v, &id, 1e-6).unwrap();
        assert!(z.max_abs_diff(&v) < 1e-12);
        let ones = ToeplitzKernel::ones(6).unwrap();
        let a = kernelized_attention_rpe_naive(&phi, &phi, &v, &ones, 1e-6).unwrap();
        let b = kernelized_attention(&phi, &phi, &v, 1e-6).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn fft_path_matches_naive_small() {
        let mut rng = RngState::new(6);
        for n in [1, 2, 5, 33] {
            let spec = FeatureMapSpec::sample(FeatureKind::Prf, 4, 3, &mut rng).unwrap();
            let phi_q = spec.apply(&gaussian_matrix(&mut rng, n, 3)).unwrap();
            let phi_k = spec.apply(&gaussian_matrix(&mut rng, n, 3)).unwrap();
            let v = gaussian_matrix(&mut rng, n, 3);
            let bias = RpeBias::new(n, rng.gaussian_vec(2 * n - 1)).unwrap();
            let kernel = bias.to_kernel();
            let fast = kernelized_attention_rpe_fft(&phi_q, &phi_k, &v, &kernel, 1e-6).unwrap();
            let slow = kernelized_attention_rpe_naive(&phi_q, &phi_k, &v, &kernel, 1e-6).unwrap();
            assert!(fast.rel_frobenius_err(&slow) < 1e-10, "n={n}");
        }
    }

    #[test]
    fn rpe_nka_single_position() {
        let mut rng = RngState::new(7);
        let x = gaussian_matrix(&mut rng, 1, 4);
        let w = gaussian_matrix(&mut rng, 4, 4);
        let spec = FeatureMapSpec::sample(FeatureKind::Prf, 8, 4, &mut rng).unwrap();
        let bias = RpeBias::new(1, vec![0.3]).unwrap();
        let z = rpe_nka(&x, &x, &x, &w, &w, &w, &bias, &spec, &AttentionConfig::default()).unwrap();
        assert!(z.max_abs_diff(&matmul(&x, &w).unwrap()) < 1e-12);
    }

    #[test]
    fn bias_size_mismatch() {
        let mut rng = RngState::new(8);
        let x = gaussian_matrix(&mut rng, 3, 2);
        let spec = FeatureMapSpec::sample(FeatureKind::Prf, 2, 2, &mut rng).unwrap();
        let bias = RpeBias::zeros(4).unwrap();
        let cfg = AttentionConfig::default();
        assert!(rpe_nka(&x, &x, &x, &eye(2), &eye(2), &eye(2), &bias, &spec, &cfg).is_err());
        let bad_w = Mat::zeros(3, 2);
        let bias = RpeBias::zeros(3).unwrap();
        assert!(rpe_nka(&x, &x, &x, &bad_w, &eye(2), &eye(2), &bias, &spec, &cfg).is_err());
    }

    #[test]
    fn identity_kernel_backward_passes_grad_to_values() {
        let mut rng = RngState::new(9);
        let n = 5;
        let spec = FeatureMapSpec::sample(FeatureKind::Prf, 4, 3, &mut rng).unwrap();
        let q = crate::tensor::row_l2_normalize(&gaussian_matrix(&mut rng, n, 3), 1e-12).unwrap();
        let k = crate::tensor::row_l2_normalize(&gaussian_matrix(&mut rng, n, 3), 1e-12).unwrap();
        let v = gaussian_matrix(&mut rng, n, 2);
        let g = gaussian_matrix(&mut rng, n, 2);
        let mut bias = RpeBias::zeros(n).unwrap();
        for k in -(n as isize - 1)..n as isize {
            if k != 0 {
                bias.mask(k);
            }
        }
        let grads = rpe_nka_projected_backward(&q, &k, &v, &bias, &spec, false, 1e-6, &g).unwrap();
        assert!(grads.v.max_abs_diff(&g) < 1e-12);
        for (idx, &gb) in grads.b.iter().enumerate() {
            if idx != n - 1 {
                assert_eq!(gb, 0.0);
            }
        }
    }

    #[test]
    fn multihead_concatenates() {
        let mut rng = RngState::new(10);
        let n = 4;
        let x = gaussian_matrix(&mut rng, n, 3);
        let heads: Vec<HeadParams> = (0..2)
            .map(|_| HeadParams {
                wq: gaussian_matrix(&mut rng, 3, 3),
                wk: gaussian_matrix(&mut rng, 3, 3),
                wv: gaussian_matrix(&mut rng, 3, 2),
                bias: RpeBias::new(n, rng.gaussian_vec(2 * n - 1)).unwrap(),
                spec: FeatureMapSpec::sample(FeatureKind::Prf, 4, 3, &mut rng).unwrap(),
            })
            .collect();
        let cfg = AttentionConfig::default();
        let z = rpe_nka_multihead(&x, &x, &x, &heads, &cfg).unwrap();
        assert_eq!(z.shape(), (n, 4));
        let h1 = &heads[1];
        let single = rpe_nka(&x, &x, &x, &h1.wq, &h1.wk, &h1.wv, &h1.bias, &h1.spec, &cfg).unwrap();
        for i in 0..n {
            assert_eq!(&z.row(i)[2..], single.row(i));
        }
    }
}
