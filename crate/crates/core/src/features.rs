//! Kernel feature maps φ with `φ(x)·φ(y)ᵀ ≈ exp(x·yᵀ)` (randomized kinds)
//! and the elu+1 map used by linear transformers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{gaussian_matrix, orthogonal_block_sample, RngState};
use crate::tensor::{dot, Mat};

/// Largest exponent passed to `exp` before we report overflow.
pub const EXP_LIMIT: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    #[serde(rename = "PRF")]
    Prf,
    #[serde(rename = "TRF")]
    Trf,
    #[serde(rename = "SpherePRF")]
    SpherePrf,
    #[serde(rename = "ORF")]
    Orf,
    #[serde(rename = "EluPlusOne")]
    EluPlusOne,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 5] = [
        FeatureKind::Prf,
        FeatureKind::Trf,
        FeatureKind::SpherePrf,
        FeatureKind::Orf,
        FeatureKind::EluPlusOne,
    ];

    pub fn is_randomized(self) -> bool {
        self != FeatureKind::EluPlusOne
    }

    /// Kinds of the form exp(w·x − ‖x‖²/2)/√m.
    pub fn is_positive_exponential(self) -> bool {
        matches!(self, FeatureKind::Prf | FeatureKind::SpherePrf | FeatureKind::Orf)
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Prf => "PRF",
            FeatureKind::Trf => "TRF",
            FeatureKind::SpherePrf => "SpherePRF",
            FeatureKind::Orf => "ORF",
            FeatureKind::EluPlusOne => "EluPlusOne",
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown feature map kind {s:?}")))
    }
}

/// JSON header stored next to the projection matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapHeader {
    pub kind: FeatureKind,
    pub m: usize,
    pub d: usize,
    pub seed: u64,
}

/// A sampled feature map. Immutable once built; the same instance is
/// applied to both queries and keys.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapSpec {
    kind: FeatureKind,
    m: usize,
    d: usize,
    w: Option<Mat>,
    seed: u64,
}

impl FeatureMapSpec {
    pub fn sample(kind: FeatureKind, m: usize, d: usize, rng: &mut RngState) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature map needs m, d >= 1 (got m = {m}, d = {d})"
            )));
        }
        let w = match kind {
            FeatureKind::Prf | FeatureKind::Trf => Some(gaussian_matrix(rng, m, d)),
            FeatureKind::SpherePrf => {
                let mut w = gaussian_matrix(rng, m, d);
                let radius = (d as f64).sqrt();
                for i in 0..m {
                    let row = w.row_mut(i);
                    let s = radius / dot(row, row).sqrt();
                    row.iter_mut().for_each(|v| *v *= s);
                }
                Some(w)
            }
            FeatureKind::Orf => Some(orthogonal_block_sample(rng, m, d)),
            FeatureKind::EluPlusOne => None,
        };
        Ok(FeatureMapSpec {
            kind,
            m,
            d,
            w,
            seed: rng.seed(),
        })
    }

    /// Rebuilds a map from an explicit projection (e.g. one read from disk).
    pub fn from_parts(header: FeatureMapHeader, w: Option<Mat>) -> Result<Self> {
        let FeatureMapHeader { kind, m, d, seed } = header;
        match (&w, kind.is_randomized()) {
            (Some(w), true) if w.shape() == (m, d) => {}
            (None, false) => {}
            (Some(w), true) => {
                return Err(Error::shape(
                    "FeatureMapSpec::from_parts",
                    format!("projection is {:?}, header says {m}x{d}", w.shape()),
                ))
            }
            (None, true) => {
                return Err(Error::InvalidArgument(format!(
                    "{} needs a projection matrix",
                    kind.name()
                )))
            }
            (Some(_), false) => {
                return Err(Error::InvalidArgument(
                    "EluPlusOne takes no projection matrix".into(),
                ))
            }
        }
        Ok(FeatureMapSpec { kind, m, d, w, seed })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> Option<&Mat> {
        self.w.as_ref()
    }

    pub fn header(&self) -> FeatureMapHeader {
        FeatureMapHeader {
            kind: self.kind,
            m: self.m,
            d: self.d,
            seed: self.seed,
        }
    }

    /// Width of φ(x): `m` for the positive maps, `2m` for TRF, `d` for elu+1.
    pub fn output_width(&self) -> usize {
        match self.kind {
            FeatureKind::Trf => 2 * self.m,
            FeatureKind::EluPlusOne => self.d,
            _ => self.m,
        }
    }

    /// Writes `<stem>.json` (header) and, for randomized kinds,
    /// `<stem>.tatt` (projection rows).
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let json_path = stem.with_extension("json");
        let json = serde_json::to_string_pretty(&self.header())?;
        std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        if let Some(w) = &self.w {
            w.save_tatt(stem.with_extension("tatt"))?;
        }
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let json_path = stem.with_extension("json");
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let header: FeatureMapHeader = serde_json::from_str(&text)?;
        let w = if header.kind.is_randomized() {
            Some(Mat::load_tatt(stem.with_extension("tatt"))?)
        } else {
            None
        };
        FeatureMapSpec::from_parts(header, w)
    }

    fn check_dim(&self, op: &'static str, len: usize) -> Result<()> {
        if len != self.d {
            return Err(Error::shape(
                op,
                format!("input has {len} columns, feature map expects {}", self.d),
            ));
        }
        Ok(())
    }

    /// φ(x) for one row, written into `out` (length [`Self::output_width`]).
    pub fn apply_row(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_dim("apply_feature_map", x.len())?;
        debug_assert_eq!(out.len(), self.output_width());
        let inv_sqrt_m = 1.0 / (self.m as f64).sqrt();
        let half_sq_norm = 0.5 * dot(x, x);
        match (self.kind, &self.w) {
            (FeatureKind::EluPlusOne, _) => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = if v >= 0.0 { v + 1.0 } else { v.exp() };
                }
            }
            (FeatureKind::Trf, Some(w)) => {
                if half_sq_norm > EXP_LIMIT {
                    return Err(Error::Overflow {
                        exponent: half_sq_norm,
                        limit: EXP_LIMIT,
                    });
                }
                let scale = half_sq_norm.exp() * inv_sqrt_m;
                let (sin_part, cos_part) = out.split_at_mut(self.m);
                for (j, wj) in w.row_iter().enumerate() {
                    let (s, c) = dot(wj, x).sin_cos();
                    sin_part[j] = scale * s;
                    cos_part[j] = scale * c;
                }
            }
            (_, Some(w)) => {
                for (o, wj) in out.iter_mut().zip(w.row_iter()) {
                    // exponent formed first and exponentiated once
                    let e = dot(wj, x) - half_sq_norm;
                    if e > EXP_LIMIT {
                        return Err(Error::Overflow {
                            exponent: e,
                            limit: EXP_LIMIT,
                        });
                    }
                    *o = e.exp() * inv_sqrt_m;
                }
            }
            (_, None) => unreachable!("randomized feature map without projection"),
        }
        Ok(())
    }

    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        self.check_dim("apply_feature_map", x.cols())?;
        let width = self.output_width();
        let mut out = Mat::zeros(x.rows(), width);
        for i in 0..x.rows() {
            self.apply_row(x.row(i), out.row_mut(i))?;
        }
        Ok(out)
    }

    /// Vector-Jacobian product: given `phi = φ(x)` and `∂L/∂φ`, returns `∂L/∂x`.
    pub fn vjp_row(&self, x: &[f64], phi: &[f64], grad_phi: &[f64], grad_x: &mut [f64]) {
        let d = self.d;
        debug_assert_eq!(x.len(), d);
        debug_assert_eq!(grad_x.len(), d);
        match (self.kind, &self.w) {
            (FeatureKind::EluPlusOne, _) => {
                for i in 0..d {
                    let slope = if x[i] >= 0.0 { 1.0 } else { phi[i] };
                    grad_x[i] = grad_phi[i] * slope;
                }
            }
            (FeatureKind::Trf, Some(w)) => {
                // ∂φ_sin/∂x = φ_sin·x + φ_cos·w, ∂φ_cos/∂x = φ_cos·x − φ_sin·w
                let m = self.m;
                let total: f64 = phi.iter().zip(grad_phi).map(|(p, g)| p * g).sum();
                for (gx, xi) in grad_x.iter_mut().zip(x) {
                    *gx = total * xi;
                }
                for (j, wj) in w.row_iter().enumerate() {
                    let coef = grad_phi[j] * phi[m + j] - grad_phi[m + j] * phi[j];
                    for (gx, wv) in grad_x.iter_mut().zip(wj) {
                        *gx += coef * wv;
                    }
                }
            }
            (_, Some(w)) => {
                // ∂φ_j/∂x = φ_j·(w_j − x)
                let mut total = 0.0;
                grad_x.iter_mut().for_each(|g| *g = 0.0);
                for (j, wj) in w.row_iter().enumerate() {
                    let coef = grad_phi[j] * phi[j];
                    total += coef;
                    for (gx, wv) in grad_x.iter_mut().zip(wj) {
                        *gx += coef * wv;
                    }
                }
                for (gx, xi) in grad_x.iter_mut().zip(x) {
                    *gx -= total * xi;
                }
            }
            (_, None) => unreachable!("randomized feature map without projection"),
        }
    }

    /// φ(x)·φ(y)ᵀ.
    pub fn kernel_estimate(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let width = self.output_width();
        let mut fx = vec![0.0; width];
        let mut fy = vec![0.0; width];
        self.apply_row(x, &mut fx)?;
        self.apply_row(y, &mut fy)?;
        Ok(dot(&fx, &fy))
    }
}

pub fn sample_feature_map(
    kind: FeatureKind,
    m: usize,
    d: usize,
    rng: &mut RngState,
) -> Result<FeatureMapSpec> {
    FeatureMapSpec::sample(kind, m, d, rng)
}

pub fn apply_feature_map(spec: &FeatureMapSpec, x: &Mat) -> Result<Mat> {
    spec.apply(x)
}

pub fn kernel_estimate(spec: &FeatureMapSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.kernel_estimate(x, y)
}

/// Variance of the PRF estimate of exp(x·yᵀ) with `m` features:
/// `(exp(‖x+y‖²) − 1)·exp(x·yᵀ)² / m`.
pub fn prf_variance_closed_form(x: &[f64], y: &[f64], m: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "prf_variance_closed_form",
            format!("{} vs {}", x.len(), y.len()),
        ));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("m must be >= 1".into()));
    }
    let sum_sq: f64 = x.iter().zip(y).map(|(a, b)| (a + b) * (a + b)).sum();
    Ok(sum_sq.exp_m1() * (2.0 * dot(x, y)).exp() / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: FeatureKind, m: usize, d: usize, seed: u64) -> FeatureMapSpec {
        FeatureMapSpec::sample(kind, m, d, &mut RngState::new(seed)).unwrap()
    }

    #[test]
    fn sphere_rows_have_radius_sqrt_d() {
        let s = spec(FeatureKind::SpherePrf, 8, 16, 1);
        for row in s.projection().unwrap().row_iter() {
            assert!((dot(row, row).sqrt() - 4.0).abs() < 1e-10);
        }
    }

    #[test]
    fn orf_square_is_orthogonal() {
        let s = spec(FeatureKind::Orf, 6, 6, 2);
        let u = crate::tensor::row_l2_normalize(s.projection().unwrap(), 1e-12).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(u.row(i), u.row(j)) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(spec(FeatureKind::Prf, 4, 3, 9), spec(FeatureKind::Prf, 4, 3, 9));
        assert!(FeatureMapSpec::sample(FeatureKind::Prf, 0, 3, &mut RngState::new(1)).is_err());
    }

    #[test]
    fn values_at_origin() {
        let m = 5;
        let prf = spec(FeatureKind::Prf, m, 3, 3);
        let phi = prf.apply(&Mat::zeros(1, 3)).unwrap();
        let expect = 1.0 / (m as f64).sqrt();
        assert!(phi.data().iter().all(|&v| v == expect));
        assert!((prf.kernel_estimate(&[0.0; 3], &[0.0; 3]).unwrap() - 1.0).abs() < 1e-15);

        let trf = spec(FeatureKind::Trf, m, 3, 3);
        let phi = trf.apply(&Mat::zeros(1, 3)).unwrap();
        assert_eq!(phi.cols(), 2 * m);
        assert!(phi.row(0)[..m].iter().all(|&v| v == 0.0));
        assert!(phi.row(0)[m..].iter().all(|&v| v == expect));
        assert!((trf.kernel_estimate(&[0.0; 3], &[0.0; 3]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn elu_plus_one() {
        let elu = spec(FeatureKind::EluPlusOne, 1, 3, 0);
        let phi = elu.apply(&Mat::from_rows(&[vec![-1.0, 0.0, 2.0]])).unwrap();
        assert_eq!(phi.data(), &[(-1.0f64).exp(), 1.0, 3.0]);
        let elu4 = spec(FeatureKind::EluPlusOne, 1, 4, 0);
        assert_eq!(elu4.kernel_estimate(&[0.0; 4], &[0.0; 4]).unwrap(), 4.0);
    }

    #[test]
    fn dimension_mismatch() {
        let s = spec(FeatureKind::Prf, 4, 3, 1);
        assert!(matches!(s.apply(&Mat::zeros(2, 4)), Err(Error::Shape { .. })));
        assert!(s.kernel_estimate(&[0.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        // the fused exponent w·x − ‖x‖²/2 peaks at ‖w‖²/2, so overflow needs a
        // long projection row
        let header = FeatureMapHeader {
            kind: FeatureKind::Prf,
            m: 1,
            d: 2,
            seed: 0,
        };
        let s = FeatureMapSpec::from_parts(header, Some(Mat::from_rows(&[vec![60.0, 0.0]]))).unwrap();
        let err = s.apply(&Mat::from_rows(&[vec![60.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::Overflow { .. }));
        assert!(s.apply(&Mat::from_rows(&[vec![1.0, 0.0]])).is_ok());

        let t = spec(FeatureKind::Trf, 2, 2, 1);
        assert!(matches!(
            t.apply(&Mat::from_rows(&[vec![40.0, 0.0]])),
            Err(Error::Overflow { .. })
        ));
    }

    #[test]
    fn closed_form_variance() {
        assert_eq!(prf_variance_closed_form(&[0.0, 0.0], &[0.0, 0.0], 1).unwrap(), 0.0);
        let e1 = [1.0, 0.0];
        let v1 = prf_variance_closed_form(&e1, &e1, 1).unwrap();
        let expect = (4.0f64.exp() - 1.0) * 2.0f64.exp();
        assert!((v1 - expect).abs() < 1e-9);
        assert!((v1 - 396.04).abs() < 0.01);
        let v2 = prf_variance_closed_form(&e1, &e1, 2).unwrap();
        assert!((v2 - v1 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn variance_blows_up_with_norm() {
        let mut prev = 0.0;
        for step in 1..=20 {
            let r = step as f64 * 0.1;
            let x = [r, 0.0];
            let v = prf_variance_closed_form(&x, &x, 1).unwrap();
            assert!(v > prev);
            prev = v;
        }
        assert!(prev > 1e6);
    }

    #[test]
    fn header_and_projection_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for kind in FeatureKind::ALL {
            let s = spec(kind, 3, 4, 12);
            let stem = dir.path().join(kind.name());
            s.save(&stem).unwrap();
            assert_eq!(FeatureMapSpec::load(&stem).unwrap(), s);
        }
        let json = serde_json::to_string(&spec(FeatureKind::SpherePrf, 3, 4, 12).header()).unwrap();
        assert_eq!(json, r#"{"kind":"SpherePRF","m":3,"d":4,"seed":12}"#);
    }

    #[test]
    fn from_parts_validates() {
        let header = FeatureMapHeader {
            kind: FeatureKind::Prf,
            m: 2,
            d: 3,
            seed: 0,
        };
        assert!(FeatureMapSpec::from_parts(header.clone(), Some(Mat::zeros(3, 2))).is_err());
        assert!(FeatureMapSpec::from_parts(header, None).is_err());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = RngState::new(77);
        for kind in FeatureKind::ALL {
            let s = FeatureMapSpec::sample(kind, 5, 3, &mut rng).unwrap();
            let x: Vec<f64> = rng.gaussian_vec(3).iter().map(|v| v * 0.5).collect();
            let g = rng.gaussian_vec(s.output_width());
            let mut phi = vec![0.0; s.output_width()];
            s.apply_row(&x, &mut phi).unwrap();
            let mut grad = vec![0.0; 3];
            s.vjp_row(&x, &phi, &g, &mut grad);
            let loss = |x: &[f64]| {
                let mut p = vec![0.0; s.output_width()];
                s.apply_row(x, &mut p).unwrap();
                dot(&p, &g)
            };
            for i in 0..3 {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{kind:?} {i}");
            }
        }
    }
}
