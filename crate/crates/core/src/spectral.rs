//! Interior eigenstates of the discretized `H_eff` and their observables.
//!
//! Eigenpairs near a target energy come from a thick-restarted Krylov
//! iteration on `p(H)`, where `p` is a Jackson-damped polynomial
//! approximation of the indicator of a small window around the target.
//! Ritz vectors of `p(H)` with large filter values are then diagonalized
//! against `H`. A kernel-polynomial estimate of the density of states sizes
//! the window. Only matrix-free products with `H` are used.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::RngExt;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disorder::DisorderSpec;
use crate::error::{Error, Result};
use crate::interp::PeriodicSpline;
use crate::lattice::{Boundary, DiscreteHamiltonian, Grid, LinearOperator};
use crate::rng::{self, Domain};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenOptions {
    pub count: usize,
    /// Bound on `‖Hψ - Eψ‖` for unit `ψ`.
    pub tol: f64,
    /// Restart cycles.
    pub max_iter: usize,
    pub kpm_degree: usize,
    pub kpm_vectors: usize,
    /// Filter degree is `degree_factor / δθ` for window half-width `δθ`.
    pub degree_factor: f64,
    pub max_degree: usize,
    /// Window target, in expected number of states.
    pub window_states: Option<usize>,
    /// Krylov basis size before a restart, raised to what the filter passes.
    pub subspace: Option<usize>,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            count: 4,
            tol: 1e-8,
            max_iter: 40,
            kpm_degree: 2048,
            kpm_vectors: 4,
            degree_factor: PI,
            max_degree: 400_000,
            window_states: None,
            subspace: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub iterations: usize,
    pub filter_degree: usize,
    pub subspace: usize,
    /// Filter window in absolute energy.
    pub window: (f64, f64),
    pub spectral_bounds: (f64, f64),
    /// Estimated number of states in the final window.
    pub window_estimate: f64,
    pub matvecs: u64,
    pub dense: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenstateBundle {
    pub target: f64,
    /// Eigenvalues, nearest the target first.
    pub energies: Vec<f64>,
    /// Unit Euclidean norm, axis-major like the grid.
    pub vectors: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub converged: Vec<bool>,
    pub grid: Grid,
    pub spec: Option<DisorderSpec>,
    /// Realization index per disordered axis.
    pub realizations: Vec<u64>,
    pub stats: SolverStats,
    pub flags: Vec<String>,
}

impl EigenstateBundle {
    pub fn with_source(mut self, spec: &DisorderSpec, realizations: &[u64]) -> Self {
        self.spec = Some(spec.clone());
        self.realizations = realizations.to_vec();
        self
    }

    pub fn energies_over_esigma(&self) -> Option<Vec<f64>> {
        let es = self.spec.as_ref()?.e_sigma();
        Some(self.energies.iter().map(|e| e / es).collect())
    }

    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }

    /// Largest `|<ψ_i, ψ_j>|` over distinct pairs.
    pub fn max_overlap(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.vectors.len() {
            for j in 0..i {
                worst = worst.max(dot(&self.vectors[i], &self.vectors[j]).abs());
            }
        }
        worst
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Affine map of the spectrum onto `[-1, 1]`.
#[derive(Clone, Copy, Debug)]
struct Scaling {
    center: f64,
    half: f64,
}

impl Scaling {
    fn to_x(&self, e: f64) -> f64 {
        (e - self.center) / self.half
    }

    fn to_e(&self, x: f64) -> f64 {
        self.center + self.half * x
    }
}

/// `next <- 2 H̃ cur - next` and `y += c * next`, row by row.
fn cheb_step(h: &DiscreteHamiltonian, sc: Scaling, cur: &[f64], next: &mut [f64], y: &mut [f64], c: f64, buf: &mut Vec<f64>) {
    let a = 2.0 / sc.half;
    let b = -2.0 * sc.center / sc.half;
    h.apply_rows(cur, buf, |row, hx| {
        let n = hx.len();
        let cr = &cur[row..row + n];
        let nr = &mut next[row..row + n];
        let yr = &mut y[row..row + n];
        for k in 0..n {
            let v = a * hx[k] + b * cr[k] - nr[k];
            nr[k] = v;
            yr[k] += c * v;
        }
    });
}

/// First step `T_1 = H̃ x`.
fn cheb_first(h: &DiscreteHamiltonian, sc: Scaling, x: &[f64], out: &mut [f64], buf: &mut Vec<f64>) {
    let a = 1.0 / sc.half;
    let b = -sc.center / sc.half;
    h.apply_rows(x, buf, |row, hx| {
        for k in 0..hx.len() {
            out[row + k] = a * hx[k] + b * x[row + k];
        }
    });
}

/// `Σ_k c_k T_k(H̃) x`.
fn cheb_filter(h: &DiscreteHamiltonian, sc: Scaling, coeffs: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut buf = Vec::new();
    let mut y: Vec<f64> = x.iter().map(|v| coeffs[0] * v).collect();
    if coeffs.len() == 1 {
        return y;
    }
    let mut prev = x.to_vec();
    let mut cur = vec![0.0; n];
    cheb_first(h, sc, x, &mut cur, &mut buf);
    for (yi, ci) in y.iter_mut().zip(&cur) {
        *yi += coeffs[1] * ci;
    }
    for &c in &coeffs[2..] {
        cheb_step(h, sc, &cur, &mut prev, &mut y, c, &mut buf);
        std::mem::swap(&mut prev, &mut cur);
    }
    y
}

fn jackson(degree: usize) -> Vec<f64> {
    let p = degree as f64 + 1.0;
    let cot = (PI / p).cos() / (PI / p).sin();
    (0..=degree)
        .map(|k| {
            let kf = k as f64;
            ((p - kf) * (PI * kf / p).cos() + (PI * kf / p).sin() * cot) / p
        })
        .collect()
}

/// Damped Chebyshev series of a delta at `xt`, scaled to 1 at the peak.
fn peak_coeffs(xt: f64, degree: usize) -> Vec<f64> {
    let g = jackson(degree);
    let tt = xt.clamp(-1.0, 1.0).acos();
    let mut c: Vec<f64> = (0..=degree).map(|k| if k == 0 { 1.0 } else { 2.0 * g[k] * (k as f64 * tt).cos() }).collect();
    let peak: f64 = c.iter().enumerate().map(|(k, ck)| ck * (k as f64 * tt).cos()).sum();
    c.iter_mut().for_each(|v| *v /= peak);
    c
}

/// Kernel-polynomial estimate of the spectral density.
#[derive(Clone, Debug)]
pub struct DosEstimate {
    /// Jackson-damped moments `g_k Tr T_k(H̃) / dim`.
    moments: Vec<f64>,
    dim: usize,
    scaling: Scaling,
}

impl DosEstimate {
    /// Estimated number of eigenvalues in `[lo, hi]`.
    pub fn count(&self, lo: f64, hi: f64) -> f64 {
        let (tl, tr) = (self.scaling.to_x(lo).clamp(-1.0, 1.0).acos(), self.scaling.to_x(hi).clamp(-1.0, 1.0).acos());
        let mut s = self.moments[0] * (tl - tr) / PI;
        for (k, m) in self.moments.iter().enumerate().skip(1) {
            let kf = k as f64;
            s += 2.0 * m * ((kf * tl).sin() - (kf * tr).sin()) / (kf * PI);
        }
        s * self.dim as f64
    }
}

fn estimate_dos(h: &DiscreteHamiltonian, sc: Scaling, degree: usize, vectors: usize, seed: u64) -> (DosEstimate, u64) {
    let n = h.len();
    let half = degree.div_ceil(2);
    let per_vector: Vec<Vec<f64>> = (0..vectors as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, Domain::Kpm, 0, r);
            let v0: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let mut mu = vec![0.0; 2 * half + 2];
            let mut buf = Vec::new();
            let mut prev = v0.clone();
            let mut cur = vec![0.0; n];
            cheb_first(h, sc, &v0, &mut cur, &mut buf);
            let mu0 = dot(&v0, &v0);
            let mu1 = dot(&cur, &v0);
            mu[0] = mu0;
            mu[1] = mu1;
            let mut sink = vec![0.0; n];
            for k in 1..=half {
                // doubling: μ_{2k} = 2<T_k,T_k> - μ_0, μ_{2k+1} = 2<T_{k+1},T_k> - μ_1
                mu[2 * k] = 2.0 * dot(&cur, &cur) - mu0;
                cheb_step(h, sc, &cur, &mut prev, &mut sink, 0.0, &mut buf);
                mu[2 * k + 1] = 2.0 * dot(&prev, &cur) - mu1;
                std::mem::swap(&mut prev, &mut cur);
            }
            mu
        })
        .collect();
    let g = jackson(degree);
    let moments = (0..=degree)
        .map(|k| g[k] * per_vector.iter().map(|m| m[k]).sum::<f64>() / (vectors * n) as f64)
        .collect();
    (DosEstimate { moments, dim: n, scaling: sc }, (vectors * (half + 1)) as u64)
}

fn residual(h: &DiscreteHamiltonian, v: &[f64], e: f64) -> f64 {
    let mut hv = vec![0.0; v.len()];
    h.apply(v, &mut hv);
    hv.iter().zip(v).map(|(a, b)| (a - e * b).powi(2)).sum::<f64>().sqrt()
}

/// `count` eigenpairs of `h` nearest `target`.
pub fn interior_eigs(h: &DiscreteHamiltonian, target: f64, options: &EigenOptions) -> Result<EigenstateBundle> {
    let n = h.len();
    if options.count < 1 {
        return Err(Error::param("count must be at least 1"));
    }
    if options.count > n {
        return Err(Error::param(format!("count {} exceeds dimension {n}", options.count)));
    }
    let (lo, hi) = h.spectral_bounds();
    if !(target > lo && target < hi) {
        return Err(Error::param(format!("target {target} outside spectral range [{lo}, {hi}]")));
    }
    let window_states = options.window_states.unwrap_or((options.count * 3).div_ceil(2).max(options.count + 2));
    let requested = options.subspace.unwrap_or(4 * window_states + 40);
    if n <= 2000 && 4 * requested.max(3 * (window_states + BLOCK)) >= n {
        return dense_eigs(h, target, options, (lo, hi));
    }

    let margin = 1e-3 * (hi - lo);
    let sc = Scaling { center: 0.5 * (lo + hi), half: 0.5 * (hi - lo) + margin };
    let (dos, mut matvecs) = estimate_dos(h, sc, options.kpm_degree, options.kpm_vectors, options.seed);

    let xt = sc.to_x(target);
    let count_at = |d: f64| dos.count(sc.to_e(xt - d), sc.to_e(xt + d));
    let delta = half_width_for(&count_at, window_states as f64);
    let dtheta = delta / (1.0 - xt * xt).max(1e-12).sqrt();
    let degree = ((options.degree_factor / dtheta).ceil() as usize).clamp(8, options.max_degree);
    let coeffs = peak_coeffs(xt, degree);
    // the damped peak is close to a Gaussian of width π/degree in θ
    let pass_theta = PI / degree as f64 * (2.0 * (1.0 / KEEP_THRESHOLD).ln()).sqrt();
    let passed = count_at(pass_theta * (1.0 - xt * xt).max(0.0).sqrt()).ceil() as usize;
    let cap = requested.max(3 * (passed.max(window_states) + BLOCK)).min(n);
    let (wl, wr) = (sc.to_e(xt - delta), sc.to_e(xt + delta));

    let mut rng = rng::stream(options.seed, Domain::EigenStart, 0, 0);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cap);
    let mut hbasis: Vec<Vec<f64>> = Vec::with_capacity(cap);
    // basis^T p(H) basis
    let mut proj = DMatrix::<f64>::zeros(0, 0);
    // a block of two keeps exactly degenerate pairs apart
    let mut pending: VecDeque<Vec<f64>> = VecDeque::new();
    for _ in 0..BLOCK.min(n) {
        let v = random_orthogonal(pending.make_contiguous(), n, &mut rng);
        pending.push_back(v);
    }
    let mut ritz: Option<Ritz> = None;
    let mut previous: Option<Vec<f64>> = None;
    let mut iterations = 0;
    let mut since_check = 0;
    'cycles: for cycle in 0..options.max_iter {
        iterations = cycle + 1;
        while basis.len() < cap {
            let q = pending.pop_front().expect("pending block is never empty");
            let mut hq = vec![0.0; n];
            h.apply(&q, &mut hq);
            let mut w = cheb_filter(h, sc, &coeffs, &q);
            matvecs += degree as u64 + 1;
            basis.push(q);
            hbasis.push(hq);
            let k = basis.len();
            let mut col = vec![0.0; k];
            for _ in 0..2 {
                for (i, b) in basis.iter().enumerate() {
                    let r = dot(b, &w);
                    col[i] += r;
                    axpy(-r, b, &mut w);
                }
                for b in &pending {
                    let r = dot(b, &w);
                    axpy(-r, b, &mut w);
                }
            }
            proj = proj.resize(k, k, 0.0);
            for (i, &c) in col.iter().enumerate() {
                proj[(i, k - 1)] = c;
                proj[(k - 1, i)] = c;
            }
            let beta = dot(&w, &w).sqrt();
            let fresh = if beta > 1e-10 {
                w.iter_mut().for_each(|v| *v /= beta);
                w
            } else {
                let mut against = basis.clone();
                against.extend(pending.iter().cloned());
                random_orthogonal(&against, n, &mut rng)
            };
            pending.push_back(fresh);
            since_check += 1;
            if k < options.count || since_check < CHECK_EVERY {
                continue;
            }
            since_check = 0;
            let r = rayleigh_ritz(&basis, &hbasis, &proj, target, options.count, 2 * cap / 3);
            let nearest: Vec<f64> = r.theta[..options.count.min(r.theta.len())].to_vec();
            let converged = r.theta.len() >= options.count && r.res[..options.count].iter().all(|&x| x <= options.tol);
            let stable = previous
                .as_ref()
                .is_some_and(|p| p.len() == nearest.len() && p.iter().zip(&nearest).all(|(a, b)| (a - b).abs() <= options.tol));
            previous = Some(nearest);
            ritz = Some(r);
            if converged && stable {
                break 'cycles;
            }
        }
        // thick restart on the retained Ritz vectors; the pending block is orthogonal to them
        let r = match &ritz {
            Some(r) => r,
            None => break,
        };
        basis = r.kept.clone();
        hbasis = r.kept_h.clone();
        proj = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(r.kept_p.clone()));
        since_check = 0;
    }
    let r = match ritz {
        Some(r) => r,
        None => rayleigh_ritz(&basis, &hbasis, &proj, target, options.count, 2 * cap / 3),
    };
    let mut energies = Vec::new();
    let mut vectors = Vec::new();
    let mut residuals = Vec::new();
    let mut converged = Vec::new();
    let mut flags = Vec::new();
    for (j, mut v) in r.vectors.into_iter().enumerate().take(options.count) {
        let nrm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|a| *a /= nrm);
        let res = residual(h, &v, r.theta[j]);
        energies.push(r.theta[j]);
        converged.push(res <= options.tol);
        residuals.push(res);
        vectors.push(v);
    }
    if energies.len() < options.count {
        flags.push(format!("only {} candidate pairs near the target", energies.len()));
    }
    if converged.iter().any(|c| !c) {
        flags.push(format!("{} of {} pairs above tolerance after {iterations} cycles", converged.iter().filter(|c| !**c).count(), options.count));
    }
    Ok(EigenstateBundle {
        target,
        energies,
        vectors,
        residuals,
        converged,
        grid: h.grid.clone(),
        spec: None,
        realizations: Vec::new(),
        stats: SolverStats {
            iterations,
            filter_degree: degree,
            subspace: cap,
            window: (wl, wr),
            spectral_bounds: (lo, hi),
            window_estimate: dos.count(wl, wr),
            matvecs,
            dense: false,
        },
        flags,
    })
}

const CHECK_EVERY: usize = 4;
const BLOCK: usize = 2;

/// Eigenvalues of `p(H)` above this count as passed by the filter.
const KEEP_THRESHOLD: f64 = 0.02;

struct Ritz {
    /// Energies nearest the target first, with matching vectors and residuals.
    theta: Vec<f64>,
    vectors: Vec<Vec<f64>>,
    res: Vec<f64>,
    /// Ritz vectors of `p(H)` kept for a restart, with `H` applied and their `p` values.
    kept: Vec<Vec<f64>>,
    kept_h: Vec<Vec<f64>>,
    kept_p: Vec<f64>,
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn combine(vecs: &[Vec<f64>], c: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![0.0; vecs[0].len()];
    for (v, a) in vecs.iter().zip(c) {
        axpy(a, v, &mut out);
    }
    out
}

fn random_orthogonal(basis: &[Vec<f64>], n: usize, rng: &mut impl RngExt) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in basis {
                let r = dot(b, &v);
                axpy(-r, b, &mut v);
            }
        }
        let nrm = dot(&v, &v).sqrt();
        if nrm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= nrm);
            return v;
        }
    }
}

/// Ritz vectors of `p(H)` with large filter values span the window; `H` is
/// then diagonalized on their span.
fn rayleigh_ritz(basis: &[Vec<f64>], hbasis: &[Vec<f64>], proj: &DMatrix<f64>, target: f64, count: usize, max_keep: usize) -> Ritz {
    let pe = SymmetricEigen::new(proj.clone());
    let mut by_p: Vec<usize> = (0..pe.eigenvalues.len()).collect();
    by_p.sort_by(|&a, &b| pe.eigenvalues[b].total_cmp(&pe.eigenvalues[a]));
    let above = by_p.iter().filter(|&&j| pe.eigenvalues[j] >= KEEP_THRESHOLD).count();
    let s = above.max(count).min(max_keep.max(count)).min(by_p.len());
    let sel = &by_p[..s];
    let kept: Vec<Vec<f64>> = sel.iter().map(|&j| combine(basis, pe.eigenvectors.column(j).iter().copied())).collect();
    let kept_h: Vec<Vec<f64>> = sel.iter().map(|&j| combine(hbasis, pe.eigenvectors.column(j).iter().copied())).collect();
    let kept_p: Vec<f64> = sel.iter().map(|&j| pe.eigenvalues[j]).collect();
    let g = DMatrix::from_fn(s, s, |a, b| 0.5 * (dot(&kept[a], &kept_h[b]) + dot(&kept[b], &kept_h[a])));
    let he = SymmetricEigen::new(g);
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| (he.eigenvalues[a] - target).abs().total_cmp(&(he.eigenvalues[b] - target).abs()));
    let mut theta = Vec::new();
    let mut vectors = Vec::new();
    let mut res = Vec::new();
    for &j in order.iter().take(count) {
        let e = he.eigenvalues[j];
        let z = combine(&kept, he.eigenvectors.column(j).iter().copied());
        let hz = combine(&kept_h, he.eigenvectors.column(j).iter().copied());
        let r = hz.iter().zip(&z).map(|(a, b)| (a - e * b).powi(2)).sum::<f64>().sqrt();
        theta.push(e);
        vectors.push(z);
        res.push(r);
    }
    Ritz { theta, vectors, res, kept, kept_h, kept_p }
}

/// Half-width `d` whose estimated window count reaches `want`.
fn half_width_for(count_at: &dyn Fn(f64) -> f64, want: f64) -> f64 {
    let (mut a, mut b) = (0.0, 2.0);
    if count_at(b) < want {
        return b;
    }
    for _ in 0..80 {
        let mid = 0.5 * (a + b);
        if count_at(mid) < want {
            a = mid;
        } else {
            b = mid;
        }
    }
    b.max(1e-12)
}

fn dense_eigs(h: &DiscreteHamiltonian, target: f64, options: &EigenOptions, bounds: (f64, f64)) -> Result<EigenstateBundle> {
    let n = h.len();
    let a = DMatrix::from_row_slice(n, n, &h.to_dense());
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| (eig.eigenvalues[i] - target).abs().total_cmp(&(eig.eigenvalues[j] - target).abs()));
    let mut energies = Vec::new();
    let mut vectors = Vec::new();
    let mut residuals = Vec::new();
    for &j in &order[..options.count] {
        let v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let e = eig.eigenvalues[j];
        residuals.push(residual(h, &v, e));
        energies.push(e);
        vectors.push(v);
    }
    let converged = residuals.iter().map(|&r| r <= options.tol).collect();
    Ok(EigenstateBundle {
        target,
        energies,
        vectors,
        residuals,
        converged,
        grid: h.grid.clone(),
        spec: None,
        realizations: Vec::new(),
        stats: SolverStats {
            iterations: 1,
            filter_degree: 0,
            subspace: n,
            window: bounds,
            spectral_bounds: bounds,
            window_estimate: n as f64,
            matvecs: 0,
            dense: true,
        },
        flags: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalProfile {
    pub axis: usize,
    pub spacing: f64,
    pub periodic: bool,
    /// `I(x_i)`, with `Σ I Δ = 1`.
    pub values: Vec<f64>,
    /// `log10 I`, floored at the smallest positive double.
    pub log10: Vec<f64>,
}

impl MarginalProfile {
    pub fn from_values(axis: usize, spacing: f64, periodic: bool, values: Vec<f64>) -> Self {
        let log10 = values.iter().map(|v| v.max(f64::MIN_POSITIVE).log10()).collect();
        MarginalProfile { axis, spacing, periodic, values, log10 }
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| i as f64 * self.spacing).collect()
    }

    pub fn length(&self) -> f64 {
        self.values.len() as f64 * self.spacing
    }

    /// `log10(max/min)` over the grid.
    pub fn decades(&self) -> f64 {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) {
            return 0.0;
        }
        (max / min.max(f64::MIN_POSITIVE)).log10()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.spacing
    }
}

/// Density of a unit-norm `ψ` summed over the other axes.
pub fn marginal(psi: &[f64], grid: &Grid, axis: usize) -> Result<MarginalProfile> {
    if psi.len() != grid.len() {
        return Err(Error::GridMismatch(format!("state has {} values, grid has {}", psi.len(), grid.len())));
    }
    if axis >= grid.dims {
        return Err(Error::param(format!("axis {axis} outside 0..{}", grid.dims)));
    }
    let [n0, n1, n2] = grid.n;
    let mut values = vec![0.0; grid.n[axis]];
    for i in 0..n0 {
        for j in 0..n1 {
            for k in 0..n2 {
                let p = psi[(i * n1 + j) * n2 + k];
                values[[i, j, k][axis]] += p * p;
            }
        }
    }
    let total: f64 = values.iter().sum();
    let d = grid.spacing[axis];
    // unit Euclidean norm -> continuum density integrated over the other axes
    values.iter_mut().for_each(|v| *v /= total * d);
    Ok(MarginalProfile::from_values(axis, d, grid.boundary[axis] == Boundary::Periodic, values))
}

/// `1 / Σ |ψ|^4 ΔV` in the continuum normalization.
pub fn participation_ratio(psi: &[f64], grid: &Grid) -> f64 {
    let n2: f64 = psi.iter().map(|v| v * v).sum();
    let n4: f64 = psi.iter().map(|v| v.powi(4)).sum();
    grid.cell_volume() * n2 * n2 / n4
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitWindow {
    /// Points closer than this to the center are excluded.
    pub core: f64,
    /// Points below `floor * max` are excluded.
    pub floor: f64,
    pub min_decades: f64,
}

impl FitWindow {
    pub fn new(core: f64) -> Self {
        FitWindow { core, floor: 1e-6, min_decades: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationFit {
    /// Amplitude decay length; the density decays as `exp(-2|x|/ξ)`.
    pub xi: f64,
    pub xi_err: f64,
    pub center: f64,
    /// Coefficient of determination of the log-linear fit.
    pub r2: f64,
    pub points: usize,
    pub decades: f64,
    pub reliable: bool,
    pub reason: Option<String>,
}

/// Log-linear fit of `I` against distance from its density-weighted center.
pub fn fit_localization_length(profile: &MarginalProfile, window: &FitWindow) -> LocalizationFit {
    let n = profile.values.len();
    let len = profile.length();
    let xs = profile.positions();
    let center = if profile.periodic {
        let (mut s, mut c) = (0.0, 0.0);
        for (x, v) in xs.iter().zip(&profile.values) {
            let a = 2.0 * PI * x / len;
            s += v * a.sin();
            c += v * a.cos();
        }
        (s.atan2(c) * len / (2.0 * PI)).rem_euclid(len)
    } else {
        xs.iter().zip(&profile.values).map(|(x, v)| x * v).sum::<f64>() / profile.values.iter().sum::<f64>()
    };
    let dist = |x: f64| {
        let d = (x - center).abs();
        if profile.periodic {
            d.min(len - d)
        } else {
            d
        }
    };
    let max = profile.values.iter().copied().fold(0.0, f64::max);
    let decades = profile.decades();
    let mut t = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let d = dist(xs[i]);
        let v = profile.values[i];
        if d >= window.core && v >= window.floor * max && v > 0.0 {
            t.push(d);
            y.push(v.ln());
        }
    }
    let mut fit = LocalizationFit {
        xi: f64::INFINITY,
        xi_err: f64::INFINITY,
        center,
        r2: 0.0,
        points: t.len(),
        decades,
        reliable: false,
        reason: None,
    };
    if t.len() < 3 {
        fit.reason = Some(format!("only {} points in the fit window", t.len()));
        return fit;
    }
    let k = t.len() as f64;
    let (mt, my) = (t.iter().sum::<f64>() / k, y.iter().sum::<f64>() / k);
    let stt: f64 = t.iter().map(|a| (a - mt).powi(2)).sum();
    let sty: f64 = t.iter().zip(&y).map(|(a, b)| (a - mt) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if !(stt > 0.0) {
        fit.reason = Some("degenerate distances".into());
        return fit;
    }
    let slope = sty / stt;
    let sse: f64 = t.iter().zip(&y).map(|(a, b)| (b - my - slope * (a - mt)).powi(2)).sum();
    let slope_err = if t.len() > 2 { (sse / (k - 2.0) / stt).sqrt() } else { f64::INFINITY };
    fit.r2 = if syy > 0.0 { 1.0 - sse / syy } else { 0.0 };
    if slope < 0.0 {
        fit.xi = -2.0 / slope;
        fit.xi_err = 2.0 * slope_err / (slope * slope);
    }
    if decades < window.min_decades {
        fit.reason = Some(format!("dynamic range {decades:.2} decades below {}", window.min_decades));
    } else if !(slope < 0.0) {
        fit.reason = Some("profile does not decay".into());
    } else {
        fit.reliable = true;
    }
    fit
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeTrace {
    pub omega: f64,
    pub theta_star: f64,
    pub period: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub source_axis: usize,
    /// `ξ_fit / ω` when a fit is supplied.
    pub temporal_length: Option<f64>,
}

/// `n` uniform times over one drive period.
pub fn period_times(omega: f64, n: usize) -> Vec<f64> {
    let period = 2.0 * PI / omega;
    (0..n).map(|i| i as f64 * period / n as f64).collect()
}

/// Detection probability at lab angle `θ*`: `P(t) = I((θ* - ω t) mod 2π)`.
///
/// The periodic spline runs through `ln I`, which keeps `P` positive.
pub fn lab_frame_trace(
    profile: &MarginalProfile,
    omega: f64,
    theta_star: f64,
    times: &[f64],
    fit: Option<&LocalizationFit>,
) -> Result<TimeTrace> {
    if !profile.periodic || (profile.length() - 2.0 * PI).abs() > 1e-9 {
        return Err(Error::param("time traces need a periodic profile on [0, 2 pi)"));
    }
    if !(omega > 0.0) {
        return Err(Error::param(format!("omega must be positive, got {omega}")));
    }
    let logs: Vec<f64> = profile.values.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let spline = PeriodicSpline::new(&logs);
    let values = times.iter().map(|&t| spline.eval((theta_star - omega * t).rem_euclid(2.0 * PI)).exp()).collect();
    Ok(TimeTrace {
        omega,
        theta_star,
        period: 2.0 * PI / omega,
        times: times.to_vec(),
        values,
        source_axis: profile.axis,
        temporal_length: fit.map(|f| f.xi / omega),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_hamiltonian;

    fn dense_spectrum(h: &DiscreteHamiltonian) -> Vec<f64> {
        let n = h.len();
        let mut e: Vec<f64> = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &h.to_dense())).eigenvalues.iter().copied().collect();
        e.sort_by(f64::total_cmp);
        e
    }

    fn chain(n: usize, pot: impl Fn(f64) -> f64) -> DiscreteHamiltonian {
        let g = Grid::torus(1, n).unwrap();
        let v: Vec<f64> = (0..n).map(|i| pot(2.0 * PI * i as f64 / n as f64)).collect();
        build_hamiltonian(&g, &v).unwrap()
    }

    #[test]
    fn filter_matches_dense_on_a_disordered_chain() {
        let h = chain(200, |x| 30.0 * (3.0 * x).sin() * (7.0 * x + 1.0).cos() + 10.0 * (13.0 * x).cos());
        let all = dense_spectrum(&h);
        let target = 0.5 * (all[60] + all[61]) + 0.3;
        let opts = EigenOptions { count: 3, subspace: Some(12), ..EigenOptions::default() };
        let b = interior_eigs(&h, target, &opts).unwrap();
        assert!(!b.stats.dense);
        let mut near = all.clone();
        near.sort_by(|a, b| (a - target).abs().total_cmp(&(b - target).abs()));
        for (got, want) in b.energies.iter().zip(&near) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        assert!(b.all_converged(), "{:?}", b.residuals);
        assert!(b.max_overlap() < 1e-8);
    }

    #[test]
    fn free_ring_gives_degenerate_pairs() {
        let n = 600;
        let h = chain(n, |_| 0.0);
        let t = h.hopping[0];
        let e = |k: usize| 2.0 * t * (1.0 - (2.0 * PI * k as f64 / n as f64).cos());
        let target = e(40) + 1e-3;
        let opts = EigenOptions { count: 2, subspace: Some(10), ..EigenOptions::default() };
        let b = interior_eigs(&h, target, &opts).unwrap();
        for got in &b.energies {
            assert!((got - e(40)).abs() < 1e-9, "{got} vs {}", e(40));
        }
        assert!(b.max_overlap() < 1e-8);
    }

    #[test]
    fn kpm_counts_free_states() {
        let n = 400;
        let h = chain(n, |_| 0.0);
        let (lo, hi) = h.spectral_bounds();
        let sc = Scaling { center: 0.5 * (lo + hi), half: 0.5 * (hi - lo) * 1.001 };
        let (dos, _) = estimate_dos(&h, sc, 512, 8, 3);
        let full = dos.count(sc.to_e(-1.0), sc.to_e(1.0));
        assert!((full - n as f64).abs() < 1e-6 * n as f64, "{full}");
        let mid = 0.5 * (lo + hi);
        assert!((dos.count(sc.to_e(-1.0), mid) - n as f64 / 2.0).abs() < 0.05 * n as f64);
    }

    #[test]
    fn separable_marginal_and_normalization() {
        let g = Grid::torus(3, 8).unwrap();
        let a: Vec<f64> = (0..8).map(|i| 1.0 + i as f64).collect();
        let b: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).cos() + 2.0).collect();
        let mut psi = vec![0.0; 512];
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    psi[(i * 8 + j) * 8 + k] = a[i] * b[j] * b[k];
                }
            }
        }
        let p = marginal(&psi, &g, 0).unwrap();
        let sa: f64 = a.iter().map(|v| v * v).sum::<f64>() * g.spacing[0];
        for i in 0..8 {
            assert!((p.values[i] - a[i] * a[i] / sa).abs() < 1e-12);
        }
        assert!((p.norm() - 1.0).abs() < 1e-12);
        let flat = marginal(&vec![1.0; 512], &g, 2).unwrap();
        assert!(flat.values.iter().all(|v| (v - 1.0 / (2.0 * PI)).abs() < 1e-12));
        assert!((participation_ratio(&vec![0.3; 512], &g) - (2.0 * PI).powi(3)).abs() < 1e-9);
        let mut single = vec![0.0; 512];
        single[77] = 1.0;
        assert!((participation_ratio(&single, &g) - g.cell_volume()).abs() < 1e-15);
    }

    #[test]
    fn exponential_profile_is_fitted() {
        let n = 256;
        let d = 2.0 * PI / n as f64;
        let x0 = 2.0;
        let vals: Vec<f64> = (0..n)
            .map(|i| {
                let r = (i as f64 * d - x0).abs();
                (-2.0 * r.min(2.0 * PI - r) / 0.4).exp()
            })
            .collect();
        let s: f64 = vals.iter().sum::<f64>() * d;
        let p = MarginalProfile::from_values(0, d, true, vals.iter().map(|v| v / s).collect());
        let f = fit_localization_length(&p, &FitWindow::new(0.1));
        assert!(f.reliable);
        assert!((f.xi - 0.4).abs() < 0.008, "{f:?}");
        assert!((f.center - x0).abs() < 0.05);
        let flat = MarginalProfile::from_values(0, d, true, vec![1.0 / (2.0 * PI); n]);
        assert!(!fit_localization_length(&flat, &FitWindow::new(0.1)).reliable);
    }

    #[test]
    fn trace_is_periodic_and_keeps_contrast() {
        let n = 64;
        let d = 2.0 * PI / n as f64;
        let raw: Vec<f64> = (0..n).map(|i| (-3.0 * (1.0 - (i as f64 * d).cos())).exp()).collect();
        let s: f64 = raw.iter().sum::<f64>() * d;
        let p = MarginalProfile::from_values(0, d, true, raw.iter().map(|v| v / s).collect());
        let omega = 7.0;
        let period = 2.0 * PI / omega;
        let times: Vec<f64> = (0..n).map(|j| (0.3 - j as f64 * d) / omega).collect();
        let tr = lab_frame_trace(&p, omega, 0.3, &times, None).unwrap();
        let shifted: Vec<f64> = times.iter().map(|t| t + period).collect();
        let tr2 = lab_frame_trace(&p, omega, 0.3, &shifted, None).unwrap();
        for (a, b) in tr.values.iter().zip(&tr2.values) {
            assert!((a - b).abs() <= 1e-10 * a.abs());
        }
        let ratio = |v: &[f64]| v.iter().copied().fold(0.0, f64::max) / v.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((ratio(&tr.values) / ratio(&p.values) - 1.0).abs() < 1e-9);
        let mean = tr.values.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0 / (2.0 * PI)).abs() < 1e-9);
    }
}
