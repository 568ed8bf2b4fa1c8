//! Deterministic random sampling.
//!
//! Uniforms come from ChaCha8 (stable output across platforms and crate
//! versions); normals are produced by the Box–Muller transform so the whole
//! chain from seed to Gaussian sample is fixed by this file.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::{dot, Mat};

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent stream `stream` under master seed `seed`. Used to give
    /// each Monte Carlo trial its own generator so results do not depend on
    /// execution order.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngState {
            seed,
            inner,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn gaussian_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.standard_normal()).collect()
    }

    /// Uniform point on the unit sphere S^{d-1}.
    pub fn unit_sphere(&mut self, d: usize) -> Vec<f64> {
        loop {
            let mut v = self.gaussian_vec(d);
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-300 {
                v.iter_mut().for_each(|x| *x /= norm);
                return v;
            }
        }
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n.max(1)
    }
}

/// `r × c` matrix of i.i.d. N(0, 1) draws.
pub fn gaussian_matrix(rng: &mut RngState, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.standard_normal())
}

/// `m × d` matrix whose rows come in blocks of at most `d` mutually
/// orthogonal directions. Each row is then scaled to the norm of a fresh
/// Gaussian d-vector so its length is chi-distributed like an N(0, I_d) row.
pub fn orthogonal_block_sample(rng: &mut RngState, m: usize, d: usize) -> Mat {
    let mut out = Mat::zeros(m, d);
    let mut start = 0;
    while start < m {
        let block = d.min(m - start);
        let directions = orthonormal_block(rng, block, d);
        for (k, dir) in directions.iter().enumerate() {
            let norm = dot_self(&rng.gaussian_vec(d)).sqrt();
            for (o, v) in out.row_mut(start + k).iter_mut().zip(dir) {
                *o = v * norm;
            }
        }
        start += block;
    }
    out
}

fn dot_self(v: &[f64]) -> f64 {
    dot(v, v)
}

// Modified Gram-Schmidt on a fresh Gaussian block; a block that loses more
// than 1e-6 of a row's norm to projection is considered degenerate and redrawn.
fn orthonormal_block(rng: &mut RngState, rows: usize, d: usize) -> Vec<Vec<f64>> {
    'draw: loop {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut v = rng.gaussian_vec(d);
            let original = dot_self(&v).sqrt();
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            // second pass restores orthogonality lost to rounding
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let norm = dot_self(&v).sqrt();
            if !(norm > 1e-6 * original) {
                continue 'draw;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
        return basis;
    }
}
