//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tand_core::fss::DataPoint;

/// Decay rate of `‖G_1L‖` for a periodic `M x M` bar, by the recursive
/// Green's function. `slices[n]` holds the on-site potential of slice `n`
/// (row-major `M x M`). Returns `(γ, stderr)` with a batch-means error.
pub fn rgf_gamma(m: usize, spacing: f64, energy: f64, slices: &[Vec<f64>], batches: usize) -> (f64, f64) {
    let t = 0.5 / (spacing * spacing);
    let nt = m * m;
    let mut hop = DMatrix::<f64>::zeros(nt, nt);
    for j in 0..m {
        for k in 0..m {
            let i = j * m + k;
            for (a, b) in [((j + 1) % m, k), ((j + m - 1) % m, k), (j, (k + 1) % m), (j, (k + m - 1) % m)] {
                if m > 1 {
                    hop[(i, a * m + b)] -= t;
                }
            }
        }
    }
    let mut g_nn = DMatrix::<f64>::zeros(nt, nt);
    let mut g_1n = DMatrix::<f64>::identity(nt, nt);
    let mut incs = Vec::with_capacity(slices.len());
    for (n, v) in slices.iter().enumerate() {
        let mut a = -hop.clone();
        for i in 0..nt {
            a[(i, i)] += energy - v[i] - 6.0 * t;
        }
        if n > 0 {
            a -= &g_nn * (t * t);
        }
        g_nn = a.try_inverse().expect("singular slice");
        g_1n = if n == 0 { g_nn.clone() } else { &g_1n * &g_nn * t };
        let nrm = g_1n.norm();
        g_1n /= nrm;
        incs.push(nrm.ln());
    }
    // drop the first slice, whose norm is not a ratio
    let incs = &incs[1..];
    let l = incs.len() as f64;
    let gamma = -incs.iter().sum::<f64>() / l;
    let per = incs.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| -incs[b * per..(b + 1) * per].iter().sum::<f64>() / per as f64).collect();
    let mu = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
    (gamma, (var / batches as f64).sqrt())
}

/// Finite-size scaling data from the one-parameter law with
/// `ln Λ = Σ a_j x^j`, `x = (w - w_c)(M/M_ref)^{1/ν}`, and relative noise.
pub struct Synthetic {
    pub w_c: f64,
    pub nu: f64,
    pub a: Vec<f64>,
    pub ms: Vec<usize>,
    pub energies: Vec<f64>,
    pub noise: f64,
}

impl Default for Synthetic {
    fn default() -> Self {
        Synthetic {
            w_c: 0.032,
            nu: 1.6,
            a: vec![0.6f64.ln(), 4.0, 0.5, 1.0],
            ms: vec![8, 12, 16, 24],
            energies: (0..11).map(|i| -0.1 + 0.025 * i as f64).collect(),
            noise: 0.05,
        }
    }
}

impl Synthetic {
    /// Energies are returned in units of `e_sigma`.
    pub fn sample(&self, seed: u64, e_sigma: f64) -> Vec<DataPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m_ref = self.ms.iter().map(|&m| (m as f64).ln()).sum::<f64>() / self.ms.len() as f64;
        let m_ref = m_ref.exp();
        let mut out = Vec::new();
        for &m in &self.ms {
            for &w in &self.energies {
                let x = (w - self.w_c) * (m as f64 / m_ref).powf(1.0 / self.nu);
                let lam = self.a.iter().rev().fold(0.0, |acc, c| acc * x + c).exp();
                let err = self.noise * lam;
                let z: f64 = rng.sample(StandardNormal);
                out.push(DataPoint { energy: w * e_sigma, m, lambda_over_m: lam + err * z, err });
            }
        }
        out
    }
}

/// All eigenvalues of a dense symmetric matrix, ascending.
pub fn dense_eigenvalues(n: usize, entries: &[f64]) -> Vec<f64> {
    let mut e: Vec<f64> = SymmetricEigen::new(DMatrix::from_row_slice(n, n, entries)).eigenvalues.iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

pub fn uniform(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
}
