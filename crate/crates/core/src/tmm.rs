//! Quasi-1D localization length of bar-shaped grids.
//!
//! The slice recursion `ψ_{n+1} = ((E - H_n)/t) ψ_n - ψ_{n-1}` is iterated on
//! a frame of vectors `(ψ_n, ψ_{n-1})`. The frame is re-orthonormalized every
//! `qr_period` slices by modified Gram-Schmidt; the logarithms of the
//! diagonal of `R` accumulate into the Lyapunov exponents. The smallest
//! positive exponent `γ_min` gives `λ_M = 1/γ_min` in lattice units.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::RngExt;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::disorder::{band_limited_field, DisorderSpec};
use crate::error::{Error, Result};
use crate::lattice::Boundary;
use crate::rng::{self, Domain};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarGeometry {
    /// 1 for a single chain, 3 for an `M x M` cross-section.
    pub dims: usize,
    pub m: usize,
    /// Number of slices.
    pub length: usize,
    pub spacing: f64,
    pub transverse: Boundary,
}

impl BarGeometry {
    pub fn chain(length: usize, spacing: f64) -> Self {
        BarGeometry { dims: 1, m: 1, length, spacing, transverse: Boundary::Periodic }
    }

    pub fn bar(m: usize, length: usize, spacing: f64) -> Self {
        BarGeometry { dims: 3, m, length, spacing, transverse: Boundary::Periodic }
    }

    /// Sites per slice.
    pub fn slice_sites(&self) -> usize {
        if self.dims == 1 {
            1
        } else {
            self.m * self.m
        }
    }

    pub fn hopping(&self) -> f64 {
        0.5 / (self.spacing * self.spacing)
    }

    fn validate(&self) -> Result<()> {
        if self.dims != 1 && self.dims != 3 {
            return Err(Error::param(format!("bar dims must be 1 or 3, got {}", self.dims)));
        }
        if self.m < 1 || (self.dims == 1 && self.m != 1) {
            return Err(Error::param(format!("invalid cross-section M = {}", self.m)));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::param("bar spacing must be positive"));
        }
        if self.length < 1 {
            return Err(Error::param("bar needs at least one slice"));
        }
        Ok(())
    }

    /// Transverse neighbours of every slice site; `usize::MAX` marks a missing one.
    fn neighbours(&self) -> Vec<[usize; 4]> {
        let m = self.m;
        if self.dims == 1 {
            return vec![[usize::MAX; 4]];
        }
        let wrap = |i: usize, up: bool| -> usize {
            match (up, self.transverse) {
                (true, _) if i + 1 < m => i + 1,
                (true, Boundary::Periodic) => 0,
                (false, _) if i > 0 => i - 1,
                (false, Boundary::Periodic) => m - 1,
                _ => usize::MAX,
            }
        };
        let mut out = Vec::with_capacity(m * m);
        for j in 0..m {
            for k in 0..m {
                let idx = |a: usize, b: usize| if a == usize::MAX || b == usize::MAX { usize::MAX } else { a * m + b };
                if m == 1 {
                    out.push([usize::MAX; 4]);
                    continue;
                }
                out.push([idx(wrap(j, true), k), idx(wrap(j, false), k), idx(j, wrap(k, true)), idx(j, wrap(k, false))]);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PotentialMode {
    /// `V0 h_x(x) h_y(y) h_z(z)` with one band-limited factor per axis.
    Factorized,
    /// 3D band-limited Gaussian field with the same correlation.
    IsotropicGrf,
}

/// On-site potential of every slice.
#[derive(Clone, Debug)]
pub struct BarPotential {
    sites: usize,
    slices: usize,
    kind: BarKind,
}

#[derive(Clone, Debug)]
enum BarKind {
    Product { v0: f64, longitudinal: Vec<f64>, transverse: Vec<f64> },
    Dense(Vec<f64>),
}

impl BarPotential {
    pub fn zero(geometry: &BarGeometry) -> Self {
        Self::dense(geometry, vec![0.0; geometry.length * geometry.slice_sites()]).unwrap()
    }

    /// Explicit values, slice-major.
    pub fn dense(geometry: &BarGeometry, values: Vec<f64>) -> Result<Self> {
        let sites = geometry.slice_sites();
        if values.len() != sites * geometry.length {
            return Err(Error::GridMismatch(format!(
                "bar potential has {} values, geometry needs {}",
                values.len(),
                sites * geometry.length
            )));
        }
        Ok(BarPotential { sites, slices: geometry.length, kind: BarKind::Dense(values) })
    }

    /// Disorder for `(M, realization)`; independent of energy so that a scan
    /// over energies sees the same sample.
    pub fn generate(
        spec: &DisorderSpec,
        geometry: &BarGeometry,
        mode: PotentialMode,
        realization: u64,
    ) -> Result<Self> {
        geometry.validate()?;
        let m = geometry.m;
        let len = geometry.length;
        let seed = spec.master_seed;
        match (mode, geometry.dims) {
            (PotentialMode::Factorized, _) | (PotentialMode::IsotropicGrf, 1) => {
                let mut rng = rng::stream(seed, Domain::BarLongitudinal, m as u64, realization);
                let longitudinal = band_limited_field(spec, len as f64 * geometry.spacing, len, &mut rng)?;
                let transverse = if geometry.dims == 1 {
                    vec![1.0]
                } else {
                    let side = m as f64 * geometry.spacing;
                    let mut ry = rng::stream(seed, Domain::BarTransverse, m as u64, 4 * realization + 2);
                    let mut rz = rng::stream(seed, Domain::BarTransverse, m as u64, 4 * realization + 3);
                    let hy = band_limited_field(spec, side, m, &mut ry)?;
                    let hz = band_limited_field(spec, side, m, &mut rz)?;
                    hy.iter().flat_map(|&a| hz.iter().map(move |&b| a * b)).collect()
                };
                Ok(BarPotential {
                    sites: geometry.slice_sites(),
                    slices: len,
                    kind: BarKind::Product { v0: spec.v0, longitudinal, transverse },
                })
            }
            (PotentialMode::IsotropicGrf, _) => {
                let mut rng = rng::stream(seed, Domain::IsotropicField, m as u64, realization);
                let field = isotropic_field(spec, geometry, &mut rng)?;
                let values = field.into_iter().map(|v| spec.v0 * v).collect();
                Self::dense(geometry, values)
            }
        }
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn slice_into(&self, n: usize, out: &mut [f64]) {
        match &self.kind {
            BarKind::Product { v0, longitudinal, transverse } => {
                let a = v0 * longitudinal[n];
                for (o, t) in out.iter_mut().zip(transverse) {
                    *o = a * t;
                }
            }
            BarKind::Dense(v) => out.copy_from_slice(&v[n * self.sites..(n + 1) * self.sites]),
        }
    }

    /// All values, slice-major.
    pub fn values(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.sites * self.slices];
        for n in 0..self.slices {
            self.slice_into(n, &mut out[n * self.sites..(n + 1) * self.sites]);
        }
        out
    }
}

/// Unit-variance field on the `length x M x M` bar, periodic in every
/// direction, spectral weight `exp(-|k|^2/k0^2)` for `|k| <= k_cut`.
fn isotropic_field(
    spec: &DisorderSpec,
    geometry: &BarGeometry,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<Vec<f64>> {
    let (n0, m) = (geometry.length, geometry.m);
    let d = geometry.spacing;
    if d >= PI / spec.k_cut as f64 {
        return Err(Error::Sampling {
            points: (PI / d) as usize,
            k_cut: spec.k_cut,
            required: spec.k_cut,
        });
    }
    let total = n0 * m * m;
    let mut buf: Vec<Complex64> = (0..total)
        .map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    fft3(&mut buf, [n0, m, m], &mut planner, false);
    let freq = |i: usize, n: usize, len: f64| {
        let q = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
        2.0 * PI * q / len
    };
    let k_cut2 = (spec.k_cut as f64).powi(2);
    let kk = 1.0 / (spec.k0 * spec.k0);
    let mut weights = vec![0.0; total];
    let mut norm = 0.0;
    for a in 0..n0 {
        let ka = freq(a, n0, n0 as f64 * d);
        for b in 0..m {
            let kb = freq(b, m, m as f64 * d);
            for c in 0..m {
                let kc = freq(c, m, m as f64 * d);
                let k2 = ka * ka + kb * kb + kc * kc;
                let w = if k2 <= k_cut2 { (-k2 * kk).exp() } else { 0.0 };
                weights[(a * m + b) * m + c] = w;
                norm += w;
            }
        }
    }
    for (z, w) in buf.iter_mut().zip(&weights) {
        *z *= (w / norm).sqrt();
    }
    fft3(&mut buf, [n0, m, m], &mut planner, true);
    let scale = spec.field_scale() / (total as f64).sqrt();
    Ok(buf.iter().map(|z| z.re * scale).collect())
}

fn fft3(buf: &mut [Complex64], n: [usize; 3], planner: &mut FftPlanner<f64>, inverse: bool) {
    let strides = [n[1] * n[2], n[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let len = n[axis];
        if len == 1 {
            continue;
        }
        let fft = if inverse { planner.plan_fft_inverse(len) } else { planner.plan_fft_forward(len) };
        let s = strides[axis];
        line.resize(len, Complex64::new(0.0, 0.0));
        for start in 0..buf.len() {
            // visit each line once: index with zero coordinate along `axis`
            if (start / s) % len != 0 {
                continue;
            }
            for i in 0..len {
                line[i] = buf[start + i * s];
            }
            fft.process(&mut line);
            for i in 0..len {
                buf[start + i * s] = line[i];
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Frame {
    /// `M^2` columns: the positive half of the spectrum.
    Half,
    /// All `2 M^2` columns, for the `±γ` pairing check.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TmmOptions {
    pub qr_period: usize,
    pub frame: Frame,
    /// Stop once `stderr(λ)/λ` falls below this, checked after `min_length`.
    pub target_rel_err: Option<f64>,
    pub min_length: usize,
    /// Slices propagated before the exponents start accumulating.
    pub warmup: usize,
    /// Batches for the batch-means error estimate.
    pub batches: usize,
}

impl Default for TmmOptions {
    fn default() -> Self {
        TmmOptions { qr_period: 8, frame: Frame::Half, target_rel_err: None, min_length: 1000, warmup: 256, batches: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSpectrum {
    /// Exponents per slice, in decreasing order.
    pub exponents: Vec<f64>,
    pub gamma_min: f64,
    pub gamma_stderr: f64,
    pub length: usize,
    /// `max_j |γ_j + γ_{2M²-1-j}|` for a full frame.
    pub pair_asymmetry: Option<f64>,
    pub converged: bool,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Modified Gram-Schmidt on `cols` contiguous columns of length `dim`;
/// returns the norms of the orthogonalized columns.
fn orthonormalize(frame: &mut [f64], dim: usize, cols: usize, norms: &mut [f64]) {
    for j in 0..cols {
        let (done, rest) = frame.split_at_mut(j * dim);
        let v = &mut rest[..dim];
        for i in 0..j {
            let q = &done[i * dim..(i + 1) * dim];
            let r = dot(q, v);
            axpy(-r, q, v);
        }
        let nrm = dot(v, v).sqrt();
        norms[j] = nrm;
        if nrm > 0.0 && nrm.is_finite() {
            let inv = 1.0 / nrm;
            v.iter_mut().for_each(|x| *x *= inv);
        }
    }
}

/// One slice of the recursion applied to every column of the frame.
fn propagate(
    frame: &mut [f64],
    dim: usize,
    nt: usize,
    cols: usize,
    diag: &[f64],
    nbrs: &[[usize; 4]],
    tmp: &mut [f64],
) {
    for c in 0..cols {
        let col = &mut frame[c * dim..(c + 1) * dim];
        let (up, low) = col.split_at_mut(nt);
        for i in 0..nt {
            let mut s = diag[i] * up[i] - low[i];
            for &j in &nbrs[i] {
                if j != usize::MAX {
                    s += up[j];
                }
            }
            tmp[i] = s;
        }
        low.copy_from_slice(up);
        up.copy_from_slice(tmp);
    }
}

fn batch_stderr(increments: &[(f64, usize)], batches: usize) -> f64 {
    let steps = increments.len();
    let b = batches.min(steps / 2).max(2).min(steps);
    if b < 2 {
        return f64::INFINITY;
    }
    let per = steps / b;
    let vals: Vec<f64> = (0..b)
        .map(|i| {
            let chunk = if i + 1 == b { &increments[i * per..] } else { &increments[i * per..(i + 1) * per] };
            let (s, n) = chunk.iter().fold((0.0, 0usize), |(s, n), &(v, k)| (s + v, n + k));
            s / n as f64
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / b as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b as f64 - 1.0);
    (var / b as f64).sqrt()
}

/// Lyapunov spectrum of the bar at absolute energy `energy`.
pub fn lyapunov_spectrum(
    geometry: &BarGeometry,
    energy: f64,
    potential: &BarPotential,
    options: &TmmOptions,
    frame_seed: u64,
) -> Result<LyapunovSpectrum> {
    geometry.validate()?;
    if options.qr_period < 1 {
        return Err(Error::param("qr_period must be at least 1"));
    }
    let nt = geometry.slice_sites();
    if potential.sites != nt {
        return Err(Error::GridMismatch("potential cross-section does not match geometry".into()));
    }
    let max_len = geometry.length.min(potential.slices());
    let dim = 2 * nt;
    let cols = match options.frame {
        Frame::Half => nt,
        Frame::Full => dim,
    };
    let kpos = nt - 1;
    let t = geometry.hopping();
    let kinetic = 2.0 * geometry.dims as f64;
    let nbrs = geometry.neighbours();

    let mut rng = rng::stream(frame_seed, Domain::TmmFrame, geometry.m as u64, cols as u64);
    let mut frame: Vec<f64> = (0..cols * dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut norms = vec![0.0; cols];
    orthonormalize(&mut frame, dim, cols, &mut norms);

    // the warm-up reuses the leading slices; it only conditions the frame
    let warmup = options.warmup.min(max_len);
    let mut vslice = vec![0.0; nt];
    let mut diag = vec![0.0; nt];
    let mut tmp = vec![0.0; nt];
    for w in 0..warmup {
        potential.slice_into(w, &mut vslice);
        for (d, v) in diag.iter_mut().zip(&vslice) {
            *d = (energy - v) / t - kinetic;
        }
        propagate(&mut frame, dim, nt, cols, &diag, &nbrs, &mut tmp);
        if (w + 1) % options.qr_period == 0 {
            orthonormalize(&mut frame, dim, cols, &mut norms);
        }
    }
    orthonormalize(&mut frame, dim, cols, &mut norms);

    let mut acc = vec![0.0; cols];
    let mut increments: Vec<(f64, usize)> = Vec::new();
    let mut since_qr = 0usize;
    let mut n = 0usize;
    let mut converged = options.target_rel_err.is_none();

    while n < max_len {
        potential.slice_into(n, &mut vslice);
        for (d, v) in diag.iter_mut().zip(&vslice) {
            *d = (energy - v) / t - kinetic;
        }
        propagate(&mut frame, dim, nt, cols, &diag, &nbrs, &mut tmp);
        n += 1;
        since_qr += 1;
        if since_qr == options.qr_period || n == max_len {
            orthonormalize(&mut frame, dim, cols, &mut norms);
            for (a, &r) in acc.iter_mut().zip(&norms) {
                if !(r.is_finite() && r > 1e-290 && r < 1e290) {
                    return Err(Error::Overflow { slice: n, qr_period: options.qr_period });
                }
                *a += r.ln();
            }
            increments.push((norms[kpos].ln(), since_qr));
            since_qr = 0;
            if let Some(tol) = options.target_rel_err {
                if n >= options.min_length && n % (options.qr_period * 16) == 0 {
                    let g = acc[kpos] / n as f64;
                    let se = batch_stderr(&increments, options.batches);
                    if g > 0.0 && se / g <= tol {
                        converged = true;
                        break;
                    }
                }
            }
        }
    }
    if since_qr > 0 {
        orthonormalize(&mut frame, dim, cols, &mut norms);
        for (a, &r) in acc.iter_mut().zip(&norms) {
            *a += r.ln();
        }
        increments.push((norms[kpos].ln(), since_qr));
    }

    let mut exponents: Vec<f64> = acc.iter().map(|a| a / n as f64).collect();
    let gamma_min = exponents[kpos];
    let gamma_stderr = batch_stderr(&increments, options.batches);
    if let Some(tol) = options.target_rel_err {
        converged = converged || (gamma_min > 0.0 && gamma_stderr / gamma_min <= tol);
    }
    let pair_asymmetry = match options.frame {
        Frame::Full => Some(
            (0..nt)
                .map(|j| (exponents[j] + exponents[dim - 1 - j]).abs())
                .fold(0.0, f64::max),
        ),
        Frame::Half => None,
    };
    exponents.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(LyapunovSpectrum { exponents, gamma_min, gamma_stderr, length: n, pair_asymmetry, converged })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovResult {
    #[serde(rename = "E")]
    pub energy: f64,
    #[serde(rename = "E_over_Esigma")]
    pub energy_over_esigma: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "Delta")]
    pub delta: f64,
    pub lambda: f64,
    pub stderr: f64,
    pub gamma: f64,
    pub gamma_stderr: f64,
    #[serde(rename = "L")]
    pub length: usize,
    pub mode: PotentialMode,
    pub seed: u64,
    pub realization: u64,
    pub converged: bool,
}

impl LyapunovResult {
    pub fn lambda_over_m(&self) -> f64 {
        self.lambda / self.m as f64
    }
}

pub fn lyapunov_run(
    geometry: &BarGeometry,
    energy: f64,
    spec: &DisorderSpec,
    mode: PotentialMode,
    realization: u64,
    options: &TmmOptions,
) -> Result<LyapunovResult> {
    let potential = BarPotential::generate(spec, geometry, mode, realization)?;
    let s = lyapunov_spectrum(geometry, energy, &potential, options, spec.master_seed ^ realization)?;
    Ok(to_result(geometry, energy, spec, mode, realization, &s))
}

fn to_result(
    geometry: &BarGeometry,
    energy: f64,
    spec: &DisorderSpec,
    mode: PotentialMode,
    realization: u64,
    s: &LyapunovSpectrum,
) -> LyapunovResult {
    let (lambda, stderr) = if s.gamma_min > 0.0 {
        (1.0 / s.gamma_min, s.gamma_stderr / (s.gamma_min * s.gamma_min))
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    LyapunovResult {
        energy,
        energy_over_esigma: energy / spec.e_sigma(),
        m: geometry.m,
        delta: geometry.spacing,
        lambda,
        stderr,
        gamma: s.gamma_min,
        gamma_stderr: s.gamma_stderr,
        length: s.length,
        mode,
        seed: spec.master_seed,
        realization,
        converged: s.converged,
    }
}

/// Everything a scan needs besides the disorder spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPlan {
    /// Absolute energies.
    pub energies: Vec<f64>,
    pub ms: Vec<usize>,
    pub realizations: usize,
    pub spacing: f64,
    /// Maximum number of slices per job.
    pub max_length: usize,
    pub transverse: Boundary,
    pub mode: PotentialMode,
    pub options: TmmOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobKey {
    pub m: usize,
    pub realization: u64,
    pub energy_index: usize,
}

impl JobKey {
    pub fn label(&self) -> String {
        format!("M={};r={};e={}", self.m, self.realization, self.energy_index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub key: JobKey,
    pub message: String,
}

impl ScanPlan {
    pub fn validate(&self) -> Result<()> {
        if self.energies.is_empty() || self.ms.is_empty() || self.realizations == 0 {
            return Err(Error::param("scan needs energies, M values and realizations"));
        }
        Ok(())
    }

    pub fn geometry(&self, m: usize) -> BarGeometry {
        BarGeometry { dims: 3, m, length: self.max_length, spacing: self.spacing, transverse: self.transverse }
    }

    /// Jobs ordered by `(M, realization, energy)`.
    pub fn jobs(&self) -> Vec<JobKey> {
        let mut out = Vec::new();
        for &m in &self.ms {
            for r in 0..self.realizations as u64 {
                for e in 0..self.energies.len() {
                    out.push(JobKey { m, realization: r, energy_index: e });
                }
            }
        }
        out
    }
}

/// Runs the given jobs in parallel; the output order follows `jobs`.
///
/// Jobs sharing `(M, realization)` share one potential.
pub fn run_jobs(
    spec: &DisorderSpec,
    plan: &ScanPlan,
    jobs: &[JobKey],
) -> Vec<std::result::Result<LyapunovResult, JobFailure>> {
    let mut groups: Vec<(usize, u64)> = jobs.iter().map(|k| (k.m, k.realization)).collect();
    groups.sort();
    groups.dedup();
    let potentials: Vec<Result<BarPotential>> = groups
        .par_iter()
        .map(|&(m, r)| BarPotential::generate(spec, &plan.geometry(m), plan.mode, r))
        .collect();
    jobs.par_iter()
        .map(|key| {
            let g = groups.binary_search(&(key.m, key.realization)).unwrap();
            let fail = |e: &Error| JobFailure { key: *key, message: e.to_string() };
            let pot = potentials[g].as_ref().map_err(fail)?;
            let geometry = plan.geometry(key.m);
            let energy = plan.energies[key.energy_index];
            let seed = spec.master_seed ^ key.realization;
            let s = lyapunov_spectrum(&geometry, energy, pot, &plan.options, seed).map_err(|e| fail(&e))?;
            Ok(to_result(&geometry, energy, spec, plan.mode, key.realization, &s))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    #[serde(rename = "E")]
    pub energy: f64,
    #[serde(rename = "E_over_Esigma")]
    pub energy_over_esigma: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "Delta")]
    pub delta: f64,
    pub lambda: f64,
    pub stderr: f64,
    pub lambda_over_m: f64,
    pub lambda_over_m_err: f64,
    #[serde(rename = "L")]
    pub length: usize,
    pub realizations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TmmScan {
    pub spec: DisorderSpec,
    pub mode: PotentialMode,
    pub delta: f64,
    pub entries: Vec<ScanEntry>,
    pub failures: Vec<JobFailure>,
}

impl TmmScan {
    pub fn ms(&self) -> Vec<usize> {
        let mut ms: Vec<usize> = self.entries.iter().map(|e| e.m).collect();
        ms.sort();
        ms.dedup();
        ms
    }

    /// Entries of one `M`, sorted by energy.
    pub fn curve(&self, m: usize) -> Vec<&ScanEntry> {
        let mut c: Vec<&ScanEntry> = self.entries.iter().filter(|e| e.m == m).collect();
        c.sort_by(|a, b| a.energy.partial_cmp(&b.energy).unwrap());
        c
    }
}

/// Combines per-realization results into `λ_M` per `(E, M)`.
///
/// `γ` is averaged with weights `L`; the error is the larger of the spread
/// between realizations and the pooled within-run error.
pub fn aggregate(
    spec: &DisorderSpec,
    plan: &ScanPlan,
    results: &[LyapunovResult],
    failures: Vec<JobFailure>,
) -> TmmScan {
    let mut entries = Vec::new();
    for &m in &plan.ms {
        for &energy in &plan.energies {
            let mut runs: Vec<&LyapunovResult> = results
                .iter()
                .filter(|r| r.m == m && r.energy.to_bits() == energy.to_bits())
                .collect();
            if runs.is_empty() {
                continue;
            }
            runs.sort_by_key(|r| r.realization);
            let total: f64 = runs.iter().map(|r| r.length as f64).sum();
            let gamma: f64 = runs.iter().map(|r| r.gamma * r.length as f64).sum::<f64>() / total;
            let within = runs
                .iter()
                .map(|r| (r.length as f64 / total * r.gamma_stderr).powi(2))
                .sum::<f64>()
                .sqrt();
            let k = runs.len() as f64;
            let between = if runs.len() >= 2 {
                let var = runs
                    .iter()
                    .map(|r| r.length as f64 * (r.gamma - gamma).powi(2))
                    .sum::<f64>()
                    / total
                    * k
                    / (k - 1.0);
                (var / k).sqrt()
            } else {
                0.0
            };
            let gerr = within.max(between);
            let (lambda, stderr) = if gamma > 0.0 { (1.0 / gamma, gerr / (gamma * gamma)) } else { (f64::INFINITY, f64::INFINITY) };
            entries.push(ScanEntry {
                energy,
                energy_over_esigma: energy / spec.e_sigma(),
                m,
                delta: plan.spacing,
                lambda,
                stderr,
                lambda_over_m: lambda / m as f64,
                lambda_over_m_err: stderr / m as f64,
                length: total as usize,
                realizations: runs.len(),
                converged: runs.iter().all(|r| r.converged),
            });
        }
    }
    TmmScan { spec: spec.clone(), mode: plan.mode, delta: plan.spacing, entries, failures }
}

/// Full scan over `(E, M, realization)`.
pub fn scan(spec: &DisorderSpec, plan: &ScanPlan) -> Result<TmmScan> {
    plan.validate()?;
    let jobs = plan.jobs();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for r in run_jobs(spec, plan, &jobs) {
        match r {
            Ok(v) => ok.push(v),
            Err(f) => failures.push(f),
        }
    }
    Ok(aggregate(spec, plan, &ok, failures))
}
