//! Numerical studies around PRF attention: approximation error versus
//! query/key norm and feature count, estimator variance, sample-complexity
//! tails, and the rank argument showing RPE is not a dot-then-exponentiate
//! attention.
//!
//! Every trial draws from its own stream `RngState::derive(seed, trial)`,
//! so reports do not depend on evaluation order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{prf_variance_closed_form, FeatureKind, FeatureMapSpec};
use crate::rng::RngState;
use crate::tensor::{dot, numerical_rank, Mat, RANK_TOL_SCALE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxErrorCell {
    #[serde(rename = "R")]
    pub r: f64,
    pub m: usize,
    pub trials: usize,
    pub mean_l1: f64,
    pub std_l1: f64,
}

impl ApproxErrorCell {
    /// Standard error of `mean_l1`.
    pub fn std_err(&self) -> f64 {
        self.std_l1 / (self.trials as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxErrorReport {
    pub d: usize,
    pub n_keys: usize,
    pub grid: Vec<ApproxErrorCell>,
}

/// CSV row layout of an [`ApproxErrorReport`].
#[derive(Debug, Serialize, Deserialize)]
struct ApproxErrorRow {
    d: usize,
    n_keys: usize,
    #[serde(rename = "R")]
    r: f64,
    m: usize,
    trials: usize,
    mean_l1: f64,
    std_l1: f64,
}

impl ApproxErrorReport {
    pub fn cell(&self, r: f64, m: usize) -> Option<&ApproxErrorCell> {
        self.grid.iter().find(|c| c.r == r && c.m == m)
    }

    /// Columns: `d,n_keys,R,m,trials,mean_l1,std_l1`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        for c in &self.grid {
            writer.serialize(ApproxErrorRow {
                d: self.d,
                n_keys: self.n_keys,
                r: c.r,
                m: c.m,
                trials: c.trials,
                mean_l1: c.mean_l1,
                std_l1: c.std_l1,
            })?;
        }
        writer.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let mut report: Option<ApproxErrorReport> = None;
        for row in reader.deserialize() {
            let row: ApproxErrorRow = row?;
            let rep = report.get_or_insert_with(|| ApproxErrorReport {
                d: row.d,
                n_keys: row.n_keys,
                grid: Vec::new(),
            });
            if rep.d != row.d || rep.n_keys != row.n_keys {
                return Err(Error::Format("inconsistent d/n_keys across rows".into()));
            }
            rep.grid.push(ApproxErrorCell {
                r: row.r,
                m: row.m,
                trials: row.trials,
                mean_l1: row.mean_l1,
                std_l1: row.std_l1,
            });
        }
        report.ok_or_else(|| Error::Format("empty CSV".into()))
    }
}

/// Exact softmax attention weights of one query over `keys`, with raw
/// (untempered) logits `q·k_j`.
pub fn softmax_scores(q: &[f64], keys: &Mat) -> Vec<f64> {
    let logits: Vec<f64> = keys.row_iter().map(|k| dot(q, k)).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// PRF-approximated attention weights `φ(q)·φ(k_j) / Σ_j' φ(q)·φ(k_j')`.
///
/// Evaluated in the log domain: every feature is `exp(w_a·x − ‖x‖²/2)/√m`,
/// so the products are `exp(s_a(q) + s_a(k_j))` up to a common factor that
/// cancels in the normalization. Subtracting the global maximum exponent
/// keeps large-norm inputs from underflowing to an all-zero row.
pub fn prf_scores(spec: &FeatureMapSpec, q: &[f64], keys: &Mat) -> Result<Vec<f64>> {
    if !spec.kind().is_positive_exponential() {
        return Err(Error::InvalidArgument(format!(
            "prf_scores needs a positive exponential map, got {}",
            spec.kind().name()
        )));
    }
    let w = spec.projection().expect("randomized kinds carry a projection");
    if q.len() != spec.d() || keys.cols() != spec.d() {
        return Err(Error::shape("prf_scores", "input dimension differs from feature map"));
    }
    let m = spec.m();
    let q_half = 0.5 * dot(q, q);
    let q_exp: Vec<f64> = w.row_iter().map(|wa| dot(wa, q) - q_half).collect();
    let mut k_exp = vec![0.0; keys.rows() * m];
    let mut max = f64::NEG_INFINITY;
    for (j, k) in keys.row_iter().enumerate() {
        let k_half = 0.5 * dot(k, k);
        for (a, wa) in w.row_iter().enumerate() {
            let e = q_exp[a] + dot(wa, k) - k_half;
            k_exp[j * m + a] = e;
            max = max.max(e);
        }
    }
    let mut scores: Vec<f64> = k_exp
        .chunks_exact(m)
        .map(|row| row.iter().map(|e| (e - max).exp()).sum())
        .collect();
    let total: f64 = scores.iter().sum();
    scores.iter_mut().for_each(|s| *s /= total);
    Ok(scores)
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn sample_sphere_rows(rng: &mut RngState, rows: usize, d: usize, scale: f64) -> Mat {
    let mut out = Mat::zeros(rows, d);
    for i in 0..rows {
        let u = rng.unit_sphere(d);
        for (o, v) in out.row_mut(i).iter_mut().zip(u) {
            *o = v * scale;
        }
    }
    out
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// For each trial a query and `n_keys` keys are drawn uniformly on the unit
/// sphere and shared by every `(R, m)` cell; each cell rescales them by `R`
/// and draws a fresh PRF map with `m` features.
pub fn approx_error_experiment(
    d: usize,
    n_keys: usize,
    rs: &[f64],
    ms: &[usize],
    trials: usize,
    seed: u64,
) -> Result<ApproxErrorReport> {
    if d == 0 || n_keys == 0 || trials == 0 {
        return Err(Error::InvalidArgument(
            "d, n_keys and trials must all be >= 1".into(),
        ));
    }
    if ms.contains(&0) {
        return Err(Error::InvalidArgument("feature counts must be >= 1".into()));
    }
    let cells = rs.len() * ms.len();
    let mut errors = vec![Vec::with_capacity(trials); cells];
    for t in 0..trials {
        let mut rng = RngState::derive(seed, t as u64);
        let q_unit = rng.unit_sphere(d);
        let keys_unit = sample_sphere_rows(&mut rng, n_keys, d, 1.0);
        for (ri, &r) in rs.iter().enumerate() {
            let q: Vec<f64> = q_unit.iter().map(|v| v * r).collect();
            let keys = keys_unit.scaled(r);
            let exact = softmax_scores(&q, &keys);
            for (mi, &m) in ms.iter().enumerate() {
                let spec = FeatureMapSpec::sample(FeatureKind::Prf, m, d, &mut rng)?;
                let approx = prf_scores(&spec, &q, &keys)?;
                errors[ri * ms.len() + mi].push(l1_distance(&exact, &approx));
            }
        }
    }
    let mut grid = Vec::with_capacity(cells);
    for (ri, &r) in rs.iter().enumerate() {
        for (mi, &m) in ms.iter().enumerate() {
            let (mean_l1, std_l1) = mean_std(&errors[ri * ms.len() + mi]);
            grid.push(ApproxErrorCell {
                r,
                m,
                trials,
                mean_l1,
                std_l1,
            });
        }
    }
    Ok(ApproxErrorReport { d, n_keys, grid })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub empirical: f64,
    pub closed_form: f64,
    pub rel_err: f64,
}

pub const MIN_VARIANCE_SAMPLES: usize = 10_000;

/// Sample variance of `φ(x)·φ(y)ᵀ` over `samples` independent PRF maps,
/// compared with the closed form.
pub fn variance_validation(
    x: &[f64],
    y: &[f64],
    m: usize,
    samples: usize,
    seed: u64,
) -> Result<VarianceReport> {
    if samples < MIN_VARIANCE_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "variance validation needs at least {MIN_VARIANCE_SAMPLES} samples"
        )));
    }
    let closed_form = prf_variance_closed_form(x, y, m)?;
    let mut rng = RngState::new(seed);
    // Welford
    let (mut mean, mut m2) = (0.0, 0.0);
    for s in 0..samples {
        let spec = FeatureMapSpec::sample(FeatureKind::Prf, m, x.len(), &mut rng)?;
        let est = spec.kernel_estimate(x, y)?;
        let delta = est - mean;
        mean += delta / (s + 1) as f64;
        m2 += delta * (est - mean);
    }
    let empirical = m2 / (samples - 1) as f64;
    let rel_err = if closed_form == 0.0 {
        empirical.abs()
    } else {
        (empirical - closed_form).abs() / closed_form
    };
    Ok(VarianceReport {
        empirical,
        closed_form,
        rel_err,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailCell {
    pub m: usize,
    pub trials: usize,
    /// Fraction of trials with `‖A − Â‖₁ ≥ ε`.
    pub failure_rate: f64,
    /// Fraction of trials with `‖A − Â‖₁ ≥ 4ε`, the event the explicit
    /// bound controls.
    pub failure_rate_4eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub n: usize,
    #[serde(rename = "R")]
    pub r: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub m_bound: u64,
    pub empirical_tail: Vec<TailCell>,
}

/// `ceil(n·exp(4R²) / (ε²·δ))`, the feature count at which
/// `Pr(‖A − Â‖₁ ≥ 4ε) ≤ δ`.
pub fn sample_complexity_bound(n: usize, r: f64, epsilon: f64, delta: f64) -> Result<u64> {
    if !(epsilon > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need epsilon > 0 and 0 < delta < 1 (got {epsilon}, {delta})"
        )));
    }
    let value = (n as f64 * (4.0 * r * r).exp() / (epsilon * epsilon * delta)).ceil();
    // 2^64 is exactly representable; anything at or above it does not fit
    if !value.is_finite() || value >= 18_446_744_073_709_551_616.0 {
        return Err(Error::Range(format!(
            "feature bound {value:e} does not fit in a 64-bit count"
        )));
    }
    Ok(value as u64)
}

/// Evaluates the bound and estimates the failure probability for each `m`.
/// Each trial's query/keys are shared across all `m` so the rates are
/// compared on common instances.
pub fn sample_complexity_experiment(
    n: usize,
    r: f64,
    epsilon: f64,
    delta: f64,
    ms: &[usize],
    trials: usize,
    d: usize,
    seed: u64,
) -> Result<ComplexityReport> {
    let m_bound = sample_complexity_bound(n, r, epsilon, delta)?;
    if n == 0 || d == 0 || trials == 0 || ms.contains(&0) {
        return Err(Error::InvalidArgument(
            "n, d, trials and every m must be >= 1".into(),
        ));
    }
    let mut fails = vec![0usize; ms.len()];
    let mut fails_4eps = vec![0usize; ms.len()];
    for t in 0..trials {
        let mut rng = RngState::derive(seed, t as u64);
        let q: Vec<f64> = rng.unit_sphere(d).iter().map(|v| v * r).collect();
        let keys = sample_sphere_rows(&mut rng, n, d, r);
        let exact = softmax_scores(&q, &keys);
        for (i, &m) in ms.iter().enumerate() {
            let spec = FeatureMapSpec::sample(FeatureKind::Prf, m, d, &mut rng)?;
            let err = l1_distance(&exact, &prf_scores(&spec, &q, &keys)?);
            fails[i] += (err >= epsilon) as usize;
            fails_4eps[i] += (err >= 4.0 * epsilon) as usize;
        }
    }
    let empirical_tail = ms
        .iter()
        .enumerate()
        .map(|(i, &m)| TailCell {
            m,
            trials,
            failure_rate: fails[i] as f64 / trials as f64,
            failure_rate_4eps: fails_4eps[i] as f64 / trials as f64,
        })
        .collect();
    Ok(ComplexityReport {
        n,
        r,
        epsilon,
        delta,
        m_bound,
        empirical_tail,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    #[serde(rename = "rank_B")]
    pub rank_b: usize,
    pub bound: usize,
    pub exceeds: bool,
}

/// Rank of the bias matrix `B = {b_{i-j}}` built from explicit offsets
/// (ordered `-(n-1)..=n-1`), against the `d + 1` ceiling that any
/// dot-then-exponentiate attention plus a per-row shift can reach.
pub fn rank_from_offsets(n: usize, d: usize, offsets: &[f64]) -> Result<RankReport> {
    if n <= d + 1 {
        return Err(Error::InvalidArgument(format!(
            "rank demonstration needs n > d + 1 (got n = {n}, d = {d})"
        )));
    }
    if offsets.len() != 2 * n - 1 {
        return Err(Error::shape(
            "rank_from_offsets",
            format!("{} offsets for n = {n}", offsets.len()),
        ));
    }
    let b = Mat::from_fn(n, n, |i, j| offsets[i + n - 1 - j]);
    let rank_b = numerical_rank(&b, RANK_TOL_SCALE)?;
    let bound = d + 1;
    Ok(RankReport {
        rank_b,
        bound,
        exceeds: rank_b > bound,
    })
}

/// Draws i.i.d. Gaussian offsets and reports the rank of the resulting
/// Toeplitz bias matrix.
pub fn rpe_expressiveness_demo(n: usize, d: usize, seed: u64) -> Result<RankReport> {
    if n <= d + 1 {
        return Err(Error::InvalidArgument(format!(
            "rank demonstration needs n > d + 1 (got n = {n}, d = {d})"
        )));
    }
    let mut rng = RngState::new(seed);
    let offsets = rng.gaussian_vec(2 * n - 1);
    rank_from_offsets(n, d, &offsets)
}

/// Serializes any report as pretty JSON to `path`.
pub fn write_json<T: Serialize>(report: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
