//! Forward-pass timing of the attention variants over a grid of sequence
//! lengths and feature widths.
//!
//! Inputs, weights, biases and feature maps are generated before the timed
//! region; only the attention call itself is measured. Timing is
//! single-threaded.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{
    kernelized_attention, project_inputs, rpe_nka, softmax_attention, AttentionConfig, RpeBias,
    Temperature,
};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMapSpec};
use crate::rng::{gaussian_matrix, RngState};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Softmax,
    Kernelized,
    RpeNka,
    RpeNaive,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Softmax,
        Variant::Kernelized,
        Variant::RpeNka,
        Variant::RpeNaive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Softmax => "softmax",
            Variant::Kernelized => "kernelized",
            Variant::RpeNka => "rpe_nka",
            Variant::RpeNaive => "rpe_naive",
        }
    }

    /// Variants whose cost grows quadratically with `n`.
    pub fn is_quadratic(self) -> bool {
        matches!(self, Variant::Softmax | Variant::RpeNaive)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub variant: Variant,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub repeats: usize,
    pub median_seconds: f64,
    pub mad_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub variant: Variant,
    pub n: usize,
    pub m: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub ns: Vec<usize>,
    pub ms: Vec<usize>,
    pub d: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Quadratic variants are skipped above this length.
    pub max_quadratic_n: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            variants: vec![Variant::Softmax, Variant::RpeNka],
            ns: vec![1024, 2048, 4096, 8192, 16384],
            ms: vec![16, 64, 256],
            d: 64,
            warmup: 1,
            repeats: 3,
            seed: 0,
            max_quadratic_n: 16384,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    pub skipped: Vec<SkippedCell>,
}

impl BenchReport {
    pub fn find(&self, variant: Variant, n: usize, m: usize) -> Option<&BenchRecord> {
        self.records
            .iter()
            .find(|r| r.variant == variant && r.n == n && r.m == m)
    }

    /// Columns: `variant,n,m,d,repeats,median_seconds,mad_seconds`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        for r in &self.records {
            writer.serialize(r)?;
        }
        writer.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<BenchRecord>> {
        csv::Reader::from_reader(r)
            .deserialize()
            .map(|row| row.map_err(Error::from))
            .collect()
    }
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Median absolute deviation from the median.
pub fn mad(values: &[f64]) -> f64 {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    median(&dev)
}

struct CellInputs {
    x: Mat,
    wq: Mat,
    wk: Mat,
    wv: Mat,
    bias: RpeBias,
    spec: FeatureMapSpec,
}

impl CellInputs {
    fn generate(n: usize, m: usize, d: usize, seed: u64) -> Result<Self> {
        let mut rng = RngState::new(seed);
        let x = gaussian_matrix(&mut rng, n, d);
        let w_scale = 1.0 / (d as f64).sqrt();
        let wq = gaussian_matrix(&mut rng, d, d).scaled(w_scale);
        let wk = gaussian_matrix(&mut rng, d, d).scaled(w_scale);
        let wv = gaussian_matrix(&mut rng, d, d).scaled(w_scale);
        let b: Vec<f64> = rng.gaussian_vec(2 * n - 1).iter().map(|v| 0.1 * v).collect();
        let bias = RpeBias::new(n, b)?;
        let spec = FeatureMapSpec::sample(FeatureKind::Prf, m, d, &mut rng)?;
        Ok(CellInputs {
            x,
            wq,
            wk,
            wv,
            bias,
            spec,
        })
    }

    fn run(&self, variant: Variant) -> Result<Mat> {
        let x = &self.x;
        match variant {
            Variant::Softmax => {
                let cfg = AttentionConfig::unnormalized(Temperature::SoftmaxScaled);
                softmax_attention(x, x, x, &self.wq, &self.wk, &self.wv, None, &cfg)
            }
            Variant::Kernelized => {
                let cfg = AttentionConfig::normalized();
                let p = project_inputs(x, x, x, &self.wq, &self.wk, &self.wv, &cfg, true)?;
                let phi_q = self.spec.apply(&p.q)?;
                let phi_k = self.spec.apply(&p.k)?;
                kernelized_attention(&phi_q, &phi_k, &p.v, cfg.denom_guard)
            }
            Variant::RpeNka => {
                let cfg = AttentionConfig::normalized();
                rpe_nka(x, x, x, &self.wq, &self.wk, &self.wv, &self.bias, &self.spec, &cfg)
            }
            Variant::RpeNaive => {
                let cfg = AttentionConfig::normalized();
                let p = project_inputs(x, x, x, &self.wq, &self.wk, &self.wv, &cfg, true)?;
                let phi_q = self.spec.apply(&p.q)?;
                let phi_k = self.spec.apply(&p.k)?;
                crate::attention::kernelized_attention_rpe_naive(
                    &phi_q,
                    &phi_k,
                    &p.v,
                    &self.bias.to_kernel(),
                    cfg.denom_guard,
                )
            }
        }
    }
}

/// Times one grid cell.
pub fn bench_cell(
    variant: Variant,
    n: usize,
    m: usize,
    d: usize,
    warmup: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchRecord> {
    if n == 0 || m == 0 || d == 0 {
        return Err(Error::InvalidArgument("n, m and d must be positive".into()));
    }
    if repeats < 3 {
        return Err(Error::InvalidArgument("need at least 3 timed repeats".into()));
    }
    let inputs = CellInputs::generate(n, m, d, seed)?;
    for _ in 0..warmup {
        std::hint::black_box(inputs.run(variant)?);
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = inputs.run(variant)?;
        times.push(start.elapsed().as_secs_f64().max(1e-9));
        std::hint::black_box(out);
    }
    Ok(BenchRecord {
        variant,
        n,
        m,
        d,
        repeats,
        median_seconds: median(&times),
        mad_seconds: mad(&times),
    })
}

/// Runs the whole grid, variants outermost, then `m`, then ascending `n`.
/// `on_record` sees each record as soon as it is measured.
pub fn run_bench(cfg: &BenchConfig, mut on_record: impl FnMut(&BenchRecord)) -> Result<BenchReport> {
    if cfg.ns.contains(&0) {
        return Err(Error::InvalidArgument("sequence lengths must be positive".into()));
    }
    let mut ns = cfg.ns.clone();
    ns.sort_unstable();
    ns.dedup();
    let mut report = BenchReport::default();
    for &variant in &cfg.variants {
        for &m in &cfg.ms {
            for &n in &ns {
                if variant.is_quadratic() && n > cfg.max_quadratic_n {
                    report.skipped.push(SkippedCell {
                        variant,
                        n,
                        m,
                        reason: format!("quadratic variant above n = {}", cfg.max_quadratic_n),
                    });
                    continue;
                }
                let rec = bench_cell(variant, n, m, cfg.d, cfg.warmup, cfg.repeats, cfg.seed)?;
                on_record(&rec);
                report.records.push(rec);
            }
        }
    }
    Ok(report)
}

/// Ratios `t(2n)/t(n)` over consecutive doublings present in the report.
pub fn doubling_ratios(records: &[BenchRecord], variant: Variant, m: usize) -> Vec<f64> {
    let mut cells: Vec<&BenchRecord> = records
        .iter()
        .filter(|r| r.variant == variant && r.m == m)
        .collect();
    cells.sort_by_key(|r| r.n);
    cells
        .windows(2)
        .filter(|w| w[1].n == 2 * w[0].n)
        .map(|w| w[1].median_seconds / w[0].median_seconds)
        .collect()
}
