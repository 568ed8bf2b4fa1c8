//! Fixed-seed equivalence checks between the fast paths and their direct
//! references, plus gradient checks. The report carries no timings, so the
//! same seed always serializes to the same bytes.

use serde::{Deserialize, Serialize};

use crate::attention::{
    kernelized_attention, kernelized_attention_rpe_naive, kernelized_attention_rpe_with_operator,
    rpe_nka, rpe_nka_projected, rpe_nka_projected_backward, AttentionConfig, RpeBias, Temperature,
};
use crate::error::Result;
use crate::features::{FeatureKind, FeatureMapSpec};
use crate::fft::FftPlan;
use crate::rng::{gaussian_matrix, RngState};
use crate::tensor::{dot, row_l2_normalize, Mat, NORM_GUARD};
use crate::toeplitz::{causal_mask, toeplitz_matmul_naive, ToeplitzKernel, ToeplitzOperator};

pub const FFT_DFT_TOL: f64 = 1e-10;
pub const TOEPLITZ_TOL: f64 = 1e-9;
pub const RPE_NKA_TOL: f64 = 1e-8;
pub const REDUCTION_TOL: f64 = 1e-10;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const GRADIENT_STEP: f64 = 1e-5;
pub const LOCALITY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Build every FFT plan with one twiddle sign flipped.
    pub perturb_fft: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(name: &str, error: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            // NaN fails
            passed: error <= tolerance,
            error,
            tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub seed: u64,
    pub perturb_fft: bool,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn failing(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }
}

struct Planner {
    perturb: bool,
}

impl Planner {
    fn plan(&self, len: usize) -> Result<FftPlan> {
        if self.perturb {
            FftPlan::with_flipped_twiddle(len)
        } else {
            FftPlan::new(len)
        }
    }

    fn operator(&self, kernel: &ToeplitzKernel) -> Result<ToeplitzOperator> {
        let len = (2 * kernel.n() - 1).next_power_of_two();
        ToeplitzOperator::with_plan(kernel, self.plan(len)?)
    }
}

pub fn run_selftest(opts: &SelftestOptions) -> Result<SelftestReport> {
    let planner = Planner {
        perturb: opts.perturb_fft,
    };
    let seed = opts.seed;
    let checks = vec![
        CheckResult::new(
            "fft_dft_equivalence",
            fft_dft_error(&planner, RngState::derive(seed, 0))?,
            FFT_DFT_TOL,
        ),
        CheckResult::new(
            "fft_toeplitz_equivalence",
            toeplitz_error(&planner, RngState::derive(seed, 1))?,
            TOEPLITZ_TOL,
        ),
        CheckResult::new(
            "rpe_nka_naive_equivalence",
            rpe_nka_error(&planner, RngState::derive(seed, 2))?,
            RPE_NKA_TOL,
        ),
        CheckResult::new(
            "reduction_identity",
            reduction_error(RngState::derive(seed, 3))?,
            REDUCTION_TOL,
        ),
        CheckResult::new(
            "gradient_check_plain",
            gradient_error(RngState::derive(seed, 4), false)?,
            GRADIENT_TOL,
        ),
        CheckResult::new(
            "gradient_check_causal",
            gradient_error(RngState::derive(seed, 5), true)?,
            GRADIENT_TOL,
        ),
        CheckResult::new(
            "causal_locality",
            locality_error(RngState::derive(seed, 6))?,
            LOCALITY_TOL,
        ),
    ];
    Ok(SelftestReport {
        seed,
        perturb_fft: opts.perturb_fft,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn fft_dft_error(planner: &Planner, mut rng: RngState) -> Result<f64> {
    let mut worst = 0.0f64;
    for len in [1usize, 2, 4, 8, 64, 1024] {
        let input = rng.gaussian_vec(2 * len);
        // point-major split layout with a batch of one is plain interleaved
        let mut fast = input.clone();
        planner.plan(len)?.transform_batch(&mut fast, 1, false);
        let mut slow = vec![0.0; 2 * len];
        for k in 0..len {
            let (mut re, mut im) = (0.0, 0.0);
            for t in 0..len {
                let angle = -std::f64::consts::TAU * ((k * t) % len) as f64 / len as f64;
                let (s, c) = angle.sin_cos();
                re += input[2 * t] * c - input[2 * t + 1] * s;
                im += input[2 * t] * s + input[2 * t + 1] * c;
            }
            slow[2 * k] = re;
            slow[2 * k + 1] = im;
        }
        worst = worst.max(rel_err(&fast, &slow));
    }
    Ok(worst)
}

fn toeplitz_error(planner: &Planner, mut rng: RngState) -> Result<f64> {
    let mut worst = 0.0f64;
    for n in [1usize, 2, 3, 7, 64, 257, 512] {
        let kernel = ToeplitzKernel::new(n, rng.gaussian_vec(2 * n - 1))?;
        let x = gaussian_matrix(&mut rng, n, 5);
        let fast = planner.operator(&kernel)?.matmul(&x)?;
        let slow = toeplitz_matmul_naive(&kernel, &x)?;
        worst = worst.max(fast.rel_frobenius_err(&slow));
    }
    Ok(worst)
}

struct Instance {
    q: Mat,
    k: Mat,
    v: Mat,
    bias: RpeBias,
    spec: FeatureMapSpec,
}

impl Instance {
    fn sample(rng: &mut RngState, n: usize, d: usize, m: usize, kind: FeatureKind) -> Result<Self> {
        let q = row_l2_normalize(&gaussian_matrix(rng, n, d), NORM_GUARD)?;
        let k = row_l2_normalize(&gaussian_matrix(rng, n, d), NORM_GUARD)?;
        let v = gaussian_matrix(rng, n, d);
        let b: Vec<f64> = rng.gaussian_vec(2 * n - 1).iter().map(|x| 0.5 * x).collect();
        let bias = RpeBias::new(n, b)?;
        let spec = FeatureMapSpec::sample(kind, m, d, rng)?;
        Ok(Instance { q, k, v, bias, spec })
    }
}

fn rpe_nka_error(planner: &Planner, mut rng: RngState) -> Result<f64> {
    let guard = crate::attention::DEFAULT_DENOM_GUARD;
    let mut worst = 0.0f64;
    for n in [1usize, 7, 64, 257] {
        for causal in [false, true] {
            let inst = Instance::sample(&mut rng, n, 4, 4, FeatureKind::Prf)?;
            let phi_q = inst.spec.apply(&inst.q)?;
            let phi_k = inst.spec.apply(&inst.k)?;
            let mut kernel = inst.bias.to_kernel();
            if causal {
                kernel = causal_mask(&kernel);
            }
            let op = planner.operator(&kernel)?;
            let fast = kernelized_attention_rpe_with_operator(&op, &phi_q, &phi_k, &inst.v, guard)?;
            let slow = kernelized_attention_rpe_naive(&phi_q, &phi_k, &inst.v, &kernel, guard)?;
            worst = worst.max(fast.rel_frobenius_err(&slow));
        }
    }
    Ok(worst)
}

fn reduction_error(mut rng: RngState) -> Result<f64> {
    let (n, d, m) = (33, 6, 8);
    let q = gaussian_matrix(&mut rng, n, d).scaled(0.3);
    let k = gaussian_matrix(&mut rng, n, d).scaled(0.3);
    let v = gaussian_matrix(&mut rng, n, d);
    let eye = Mat::identity(d);
    let spec = FeatureMapSpec::sample(FeatureKind::Prf, m, d, &mut rng)?;
    let cfg = AttentionConfig::unnormalized(Temperature::None);
    let with_rpe = rpe_nka(&q, &k, &v, &eye, &eye, &eye, &RpeBias::zeros(n)?, &spec, &cfg)?;
    let plain = kernelized_attention(&spec.apply(&q)?, &spec.apply(&k)?, &v, cfg.denom_guard)?;
    Ok(with_rpe.rel_frobenius_err(&plain))
}

fn gradient_error(mut rng: RngState, causal: bool) -> Result<f64> {
    let guard = crate::attention::DEFAULT_DENOM_GUARD;
    let mut inst = Instance::sample(&mut rng, 8, 4, 4, FeatureKind::Prf)?;
    inst.bias.mask(-3);
    let grad_out = gaussian_matrix(&mut rng, 8, 4);
    let loss = |q: &Mat, k: &Mat, v: &Mat, bias: &RpeBias| -> Result<f64> {
        let z = rpe_nka_projected(q, k, v, bias, &inst.spec, causal, guard)?;
        Ok(dot(z.data(), grad_out.data()))
    };
    let grads = rpe_nka_projected_backward(
        &inst.q, &inst.k, &inst.v, &inst.bias, &inst.spec, causal, guard, &grad_out,
    )?;

    let mut worst = 0.0f64;
    let inputs = [&inst.q, &inst.k, &inst.v];
    let analytic = [&grads.q, &grads.k, &grads.v];
    for which in 0..3 {
        let mut numeric = vec![0.0; inputs[which].data().len()];
        for (idx, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.map(|m| m.clone());
            let mut minus = plus.clone();
            plus[which].data_mut()[idx] += GRADIENT_STEP;
            minus[which].data_mut()[idx] -= GRADIENT_STEP;
            let lp = loss(&plus[0], &plus[1], &plus[2], &inst.bias)?;
            let lm = loss(&minus[0], &minus[1], &minus[2], &inst.bias)?;
            *slot = (lp - lm) / (2.0 * GRADIENT_STEP);
        }
        worst = worst.max(rel_err(analytic[which].data(), &numeric));
    }

    let n = inst.bias.n() as isize;
    let mut numeric = Vec::with_capacity(2 * n as usize - 1);
    for k in -(n - 1)..n {
        if inst.bias.is_masked(k) {
            numeric.push(0.0);
            continue;
        }
        let shifted = |delta: f64| -> Result<f64> {
            let vals = (-(n - 1)..n)
                .map(|o| inst.bias.at(o) + if o == k { delta } else { 0.0 })
                .collect();
            loss(&inst.q, &inst.k, &inst.v, &RpeBias::new(inst.bias.n(), vals)?)
        };
        numeric.push((shifted(GRADIENT_STEP)? - shifted(-GRADIENT_STEP)?) / (2.0 * GRADIENT_STEP));
    }
    worst = worst.max(rel_err(&grads.b, &numeric));
    Ok(worst)
}

/// Largest change in causal output row `i` after overwriting every input
/// row after `i`.
fn locality_error(mut rng: RngState) -> Result<f64> {
    let (n, d, m) = (48, 4, 8);
    let cfg = AttentionConfig::normalized().with_causal(true);
    let x = gaussian_matrix(&mut rng, n, d);
    let w = [0, 1, 2].map(|_| gaussian_matrix(&mut rng, d, d));
    let bias = RpeBias::new(n, rng.gaussian_vec(2 * n - 1))?;
    let spec = FeatureMapSpec::sample(FeatureKind::Prf, m, d, &mut rng)?;
    let base = rpe_nka(&x, &x, &x, &w[0], &w[1], &w[2], &bias, &spec, &cfg)?;
    let mut worst = 0.0f64;
    for i in [0, 1, n / 2, n - 2] {
        let mut y = x.clone();
        for r in i + 1..n {
            for v in y.row_mut(r) {
                *v += 1.0 + rng.standard_normal();
            }
        }
        let out = rpe_nka(&y, &y, &y, &w[0], &w[1], &w[2], &bias, &spec, &cfg)?;
        for (a, b) in out.row(i).iter().zip(base.row(i)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        let rep = run_selftest(&SelftestOptions { seed: 0, perturb_fft: false }).unwrap();
        assert!(rep.passed, "{:?}", rep.failing());
        assert_eq!(rep.checks.len(), 7);
    }

    #[test]
    fn perturbed_fft_is_caught() {
        let rep = run_selftest(&SelftestOptions { seed: 0, perturb_fft: true }).unwrap();
        assert!(!rep.passed);
        let failing = rep.failing();
        assert!(failing.contains(&"fft_toeplitz_equivalence"), "{failing:?}");
        assert!(failing.contains(&"fft_dft_equivalence"), "{failing:?}");
    }

    #[test]
    fn deterministic() {
        let opts = SelftestOptions { seed: 7, perturb_fft: false };
        let a = serde_json::to_string(&run_selftest(&opts).unwrap()).unwrap();
        let b = serde_json::to_string(&run_selftest(&opts).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
