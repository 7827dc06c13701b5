//! One-parameter finite-size scaling of `Λ = λ_M / M`.
//!
//! The model is `ln Λ = Σ_j a_j x^j` with `x = u(w) (M/M_ref)^{1/ν}`,
//! `w = E/E_σ` and `u(w) = (w - w_c) + Σ_{j≥2} b_j (w - w_c)^j`. Fits run on
//! an internally standardized energy axis, which makes them invariant under
//! affine changes of the energy variable.

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::NaturalSpline;
use crate::rng::{self, Domain};
use crate::tmm::TmmScan;

/// One `(E, M)` observation of `Λ` with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub energy: f64,
    pub m: usize,
    pub lambda_over_m: f64,
    pub err: f64,
}

pub fn points_from_scan(scan: &TmmScan) -> Vec<DataPoint> {
    scan.entries
        .iter()
        .filter(|e| e.lambda_over_m.is_finite() && e.lambda_over_m > 0.0)
        .map(|e| DataPoint { energy: e.energy, m: e.m, lambda_over_m: e.lambda_over_m, err: e.lambda_over_m_err })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Order of the relevant-variable expansion `u`.
    pub n_u: usize,
    /// Order of the scaling-function expansion.
    pub n_f: usize,
    /// Energy window in units of `E_σ`; all points when absent.
    pub window: Option<(f64, f64)>,
    pub bootstrap: usize,
    pub seed: u64,
    pub nu_starts: Vec<f64>,
    /// Accepted `ν` range for the tie-break between minima.
    pub nu_range: (f64, f64),
    pub max_chi2_per_dof: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            n_u: 2,
            n_f: 3,
            window: None,
            bootstrap: 200,
            seed: 0,
            nu_starts: vec![0.7, 1.0, 1.4, 1.8, 2.4, 3.0],
            nu_range: (0.5, 3.0),
            max_chi2_per_dof: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceIntervals {
    pub level: f64,
    pub e_c: Interval,
    pub e_c_over_esigma: Interval,
    pub nu: Interval,
    pub lambda_c: Interval,
    pub resamples: usize,
    pub failed: usize,
}

/// A local minimum other than the reported one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub e_c_over_esigma: f64,
    pub nu: f64,
    pub chi2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingModel {
    #[serde(rename = "E_c")]
    pub e_c: f64,
    #[serde(rename = "E_c_over_Esigma")]
    pub e_c_over_esigma: f64,
    pub nu: f64,
    pub lambda_c: f64,
    /// `b_2..b_{n_u}` of `u(w)`, with the linear coefficient fixed to 1.
    pub u_coeffs: Vec<f64>,
    /// `a_0..a_{n_F}` of `ln Λ` in powers of `x`.
    pub f_coeffs: Vec<f64>,
    pub m_ref: f64,
    pub e_sigma: f64,
    pub window: (f64, f64),
    pub n_points: usize,
    pub chi2: f64,
    pub dof: usize,
    pub chi2_per_dof: f64,
    pub ci: Option<ConfidenceIntervals>,
    /// Set when the fit should not be trusted as reported.
    pub flag: Option<String>,
    pub alternatives: Vec<Alternative>,
}

impl ScalingModel {
    pub fn is_flagged(&self) -> bool {
        self.flag.is_some()
    }

    /// Model `Λ` at absolute energy `energy` and width `m`.
    pub fn predict(&self, energy: f64, m: usize) -> f64 {
        let d = energy / self.e_sigma - self.e_c_over_esigma;
        let mut u = d;
        let mut dp = d;
        for b in &self.u_coeffs {
            dp *= d;
            u += b * dp;
        }
        let x = u * (m as f64 / self.m_ref).powf(1.0 / self.nu);
        (poly(&self.f_coeffs, x)).exp()
    }
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, a| acc * x + a)
}

/// Standardized problem: `z ∈ [-1, 1]` across the window, `y = ln Λ`.
struct Problem {
    z: Vec<f64>,
    mr: Vec<f64>,
    y: Vec<f64>,
    s: Vec<f64>,
    n_u: usize,
    n_f: usize,
}

impl Problem {
    fn n_params(&self) -> usize {
        2 + (self.n_u - 1) + self.n_f + 1
    }

    fn x_of(&self, p: &[f64], i: usize) -> f64 {
        let d = self.z[i] - p[0];
        let mut u = d;
        let mut dp = d;
        for b in &p[2..2 + self.n_u - 1] {
            dp *= d;
            u += b * dp;
        }
        u * self.mr[i].powf(1.0 / p[1])
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let a = &p[2 + self.n_u - 1..];
        for i in 0..self.z.len() {
            out[i] = (self.y[i] - poly(a, self.x_of(p, i))) / self.s[i];
        }
    }

    /// Linear least squares for `a` with the nonlinear parameters fixed.
    fn solve_linear(&self, p: &mut [f64]) -> bool {
        let n = self.z.len();
        let k = self.n_f + 1;
        let mut a = DMatrix::zeros(n, k);
        let mut rhs = DVector::zeros(n);
        for i in 0..n {
            let x = self.x_of(p, i);
            let mut xp = 1.0;
            for j in 0..k {
                a[(i, j)] = xp / self.s[i];
                xp *= x;
            }
            rhs[i] = self.y[i] / self.s[i];
        }
        match a.svd(true, true).solve(&rhs, 1e-12) {
            Ok(sol) if sol.iter().all(|v| v.is_finite()) => {
                p[2 + self.n_u - 1..].copy_from_slice(sol.as_slice());
                true
            }
            _ => false,
        }
    }

    fn admissible(&self, p: &[f64]) -> bool {
        p.iter().all(|v| v.is_finite()) && p[1] > 0.05 && p[1] < 50.0 && p[0].abs() < 5.0
    }

    /// Levenberg-Marquardt from `p0`.
    fn levenberg_marquardt(&self, p0: &[f64]) -> Option<(Vec<f64>, f64)> {
        let n = self.z.len();
        let np = self.n_params();
        let mut p = p0.to_vec();
        let mut r = vec![0.0; n];
        self.residuals(&p, &mut r);
        let mut chi2: f64 = r.iter().map(|v| v * v).sum();
        if !chi2.is_finite() {
            return None;
        }
        let mut mu = 1e-3;
        let mut jac = DMatrix::zeros(n, np);
        let mut rp = vec![0.0; n];
        let mut rm = vec![0.0; n];
        for _ in 0..300 {
            for j in 0..np {
                let h = 1e-6 * p[j].abs().max(1e-2);
                let orig = p[j];
                p[j] = orig + h;
                self.residuals(&p, &mut rp);
                p[j] = orig - h;
                self.residuals(&p, &mut rm);
                p[j] = orig;
                for i in 0..n {
                    jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
                }
            }
            let jtj = jac.transpose() * &jac;
            let jtr = jac.transpose() * DVector::from_column_slice(&r);
            let mut improved = false;
            for _ in 0..30 {
                let mut lhs = jtj.clone();
                for j in 0..np {
                    lhs[(j, j)] += mu * jtj[(j, j)].max(1e-12);
                }
                let step = match lhs.cholesky() {
                    Some(c) => c.solve(&(-&jtr)),
                    None => {
                        mu *= 10.0;
                        continue;
                    }
                };
                let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                if self.admissible(&trial) {
                    self.residuals(&trial, &mut rp);
                    let c2: f64 = rp.iter().map(|v| v * v).sum();
                    if c2.is_finite() && c2 <= chi2 {
                        let rel = (chi2 - c2) / chi2.max(1e-300);
                        let small_step = step.norm() <= 1e-10 * (1.0 + DVector::from_column_slice(&p).norm());
                        p = trial;
                        r.copy_from_slice(&rp);
                        chi2 = c2;
                        mu = (mu * 0.3).max(1e-12);
                        improved = true;
                        if rel < 1e-12 || small_step {
                            return Some((p, chi2));
                        }
                        break;
                    }
                }
                mu *= 10.0;
            }
            if !improved {
                break;
            }
        }
        Some((p, chi2))
    }

    fn start(&self, zc: f64, nu: f64) -> Option<Vec<f64>> {
        let mut p = vec![0.0; self.n_params()];
        p[0] = zc;
        p[1] = nu;
        self.solve_linear(&mut p).then_some(p)
    }
}

struct Standardization {
    mid: f64,
    half: f64,
}

impl Standardization {
    fn to_w(&self, z: f64) -> f64 {
        self.mid + self.half * z
    }
}

/// Crossing of the curves of two widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub m_small: usize,
    pub m_large: usize,
    #[serde(rename = "E")]
    pub energy: f64,
    #[serde(rename = "E_over_Esigma")]
    pub energy_over_esigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub m_small: usize,
    pub m_large: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossingReport {
    pub crossings: Vec<Crossing>,
    pub skipped: Vec<SkippedPair>,
}

impl CrossingReport {
    /// Crossing energy of the widest pair minus that of the narrowest, in
    /// units of `E_σ`; a systematic drift signals irrelevant corrections.
    pub fn drift(&self) -> Option<f64> {
        let key = |c: &Crossing| c.m_small * c.m_large;
        let lo = self.crossings.iter().min_by_key(|c| key(c))?;
        let hi = self.crossings.iter().max_by_key(|c| key(c))?;
        Some(hi.energy_over_esigma - lo.energy_over_esigma)
    }

    pub fn mean_over_esigma(&self) -> Option<f64> {
        if self.crossings.is_empty() {
            return None;
        }
        Some(self.crossings.iter().map(|c| c.energy_over_esigma).sum::<f64>() / self.crossings.len() as f64)
    }
}

fn group_by_m(points: &[DataPoint]) -> Vec<(usize, Vec<DataPoint>)> {
    let mut ms: Vec<usize> = points.iter().map(|p| p.m).collect();
    ms.sort();
    ms.dedup();
    ms.into_iter()
        .map(|m| {
            let mut c: Vec<DataPoint> = points.iter().copied().filter(|p| p.m == m).collect();
            c.sort_by(|a, b| a.energy.total_cmp(&b.energy));
            c.dedup_by(|a, b| a.energy == b.energy);
            (m, c)
        })
        .collect()
}

/// Spline crossings of `ln Λ(E)` for every pair of widths.
pub fn crossings_from_points(points: &[DataPoint], e_sigma: f64) -> CrossingReport {
    let curves = group_by_m(points);
    let mut report = CrossingReport::default();
    for i in 0..curves.len() {
        for j in i + 1..curves.len() {
            let (m1, c1) = &curves[i];
            let (m2, c2) = &curves[j];
            let skip = |reason: &str| SkippedPair { m_small: *m1, m_large: *m2, reason: reason.into() };
            let lo = c1[0].energy.max(c2[0].energy);
            let hi = c1[c1.len() - 1].energy.min(c2[c2.len() - 1].energy);
            let nodes: Vec<f64> = c1
                .iter()
                .map(|p| p.energy)
                .chain(c2.iter().map(|p| p.energy))
                .filter(|&e| e >= lo && e <= hi)
                .collect();
            if c1.len() < 2 || c2.len() < 2 || nodes.len() < 2 {
                report.skipped.push(skip("fewer than two common energies"));
                continue;
            }
            let mut nodes = nodes;
            nodes.sort_by(f64::total_cmp);
            nodes.dedup();
            let spline = |c: &[DataPoint]| {
                let x: Vec<f64> = c.iter().map(|p| p.energy).collect();
                let y: Vec<f64> = c.iter().map(|p| p.lambda_over_m.ln()).collect();
                NaturalSpline::new(&x, &y)
            };
            let (s1, s2) = (spline(c1), spline(c2));
            let diff = |e: f64| s2.eval(e) - s1.eval(e);
            if nodes.iter().all(|&e| diff(e).abs() <= 1e-12) {
                report.skipped.push(skip("curves coincide"));
                continue;
            }
            let mut found = false;
            for k in 0..nodes.len() - 1 {
                let (a, b) = (nodes[k], nodes[k + 1]);
                let (da, db) = (diff(a), diff(b));
                let root = if da == 0.0 {
                    Some(a)
                } else if da * db < 0.0 {
                    let (mut l, mut r, mut dl) = (a, b, da);
                    for _ in 0..100 {
                        let mid = 0.5 * (l + r);
                        let dm = diff(mid);
                        if dm == 0.0 {
                            l = mid;
                            r = mid;
                            break;
                        }
                        if (dm < 0.0) == (dl < 0.0) {
                            l = mid;
                            dl = dm;
                        } else {
                            r = mid;
                        }
                    }
                    Some(0.5 * (l + r))
                } else {
                    None
                };
                if let Some(e) = root {
                    found = true;
                    report.crossings.push(Crossing {
                        m_small: *m1,
                        m_large: *m2,
                        energy: e,
                        energy_over_esigma: e / e_sigma,
                    });
                }
            }
            if !found && diff(nodes[nodes.len() - 1]) == 0.0 {
                found = true;
                let e = nodes[nodes.len() - 1];
                report.crossings.push(Crossing { m_small: *m1, m_large: *m2, energy: e, energy_over_esigma: e / e_sigma });
            }
            if !found {
                report.skipped.push(skip("no sign change"));
            }
        }
    }
    report
}

pub fn pairwise_crossings(scan: &TmmScan) -> CrossingReport {
    crossings_from_points(&points_from_scan(scan), scan.spec.e_sigma())
}

pub fn fit_scaling(scan: &TmmScan, options: &FitOptions) -> Result<ScalingModel> {
    fit_points(&points_from_scan(scan), scan.spec.e_sigma(), options)
}

/// Weighted least-squares scaling fit with bootstrap confidence intervals.
pub fn fit_points(points: &[DataPoint], e_sigma: f64, options: &FitOptions) -> Result<ScalingModel> {
    if options.n_u < 1 || options.n_f < 1 {
        return Err(Error::param("expansion orders must be at least 1"));
    }
    if !(e_sigma > 0.0) {
        return Err(Error::param("E_sigma must be positive"));
    }
    let in_window = |p: &DataPoint| match options.window {
        Some((lo, hi)) => {
            let w = p.energy / e_sigma;
            w >= lo && w <= hi
        }
        None => true,
    };
    let data: Vec<DataPoint> = points
        .iter()
        .copied()
        .filter(|p| in_window(p) && p.lambda_over_m > 0.0 && p.err > 0.0 && p.lambda_over_m.is_finite())
        .collect();
    let mut ms: Vec<usize> = data.iter().map(|p| p.m).collect();
    ms.sort();
    ms.dedup();
    let mut es: Vec<f64> = data.iter().map(|p| p.energy).collect();
    es.sort_by(f64::total_cmp);
    es.dedup();
    if ms.len() < 3 {
        return Err(Error::param(format!("need at least 3 distinct M in the window, got {}", ms.len())));
    }
    if es.len() < 5 {
        return Err(Error::param(format!("need at least 5 energies in the window, got {}", es.len())));
    }
    let n_params = 2 + (options.n_u - 1) + options.n_f + 1;
    if data.len() <= n_params {
        return Err(Error::param(format!("{} points cannot constrain {n_params} parameters", data.len())));
    }

    let crossings = crossings_from_points(&data, e_sigma);
    if crossings.crossings.is_empty() {
        let why: Vec<String> =
            crossings.skipped.iter().map(|s| format!("M={}/{}: {}", s.m_small, s.m_large, s.reason)).collect();
        return Err(Error::NoCrossing(format!("no pair of curves crosses in the window ({})", why.join("; "))));
    }

    let (w_lo, w_hi) = (es[0] / e_sigma, es[es.len() - 1] / e_sigma);
    let st = Standardization { mid: 0.5 * (w_lo + w_hi), half: 0.5 * (w_hi - w_lo) };
    let m_ref = (ms.iter().map(|&m| (m as f64).ln()).sum::<f64>() / ms.len() as f64).exp();
    let problem = Problem {
        z: data.iter().map(|p| (p.energy / e_sigma - st.mid) / st.half).collect(),
        mr: data.iter().map(|p| p.m as f64 / m_ref).collect(),
        y: data.iter().map(|p| p.lambda_over_m.ln()).collect(),
        s: data.iter().map(|p| p.err / p.lambda_over_m).collect(),
        n_u: options.n_u,
        n_f: options.n_f,
    };

    let z_cross = (crossings.mean_over_esigma().unwrap() - st.mid) / st.half;
    let mut minima = Vec::new();
    for &zc in &[z_cross, 0.0] {
        for &nu in &options.nu_starts {
            if let Some(p0) = problem.start(zc, nu) {
                if let Some((p, c2)) = problem.levenberg_marquardt(&p0) {
                    minima.push((p, c2));
                }
            }
        }
    }
    let (best, chi2, alternatives) = select_minimum(minima, options.nu_range)
        .ok_or_else(|| Error::DegenerateFit("no start converged".into()))?;
    if best[0].abs() > 1.0 {
        return Err(Error::DegenerateFit(format!(
            "fitted E_c/E_sigma = {:.4} lies outside the window [{w_lo:.4}, {w_hi:.4}]",
            st.to_w(best[0])
        )));
    }

    let dof = data.len() - n_params;
    let mut model = build_model(&best, &problem, &st, e_sigma, m_ref, (w_lo, w_hi), chi2, dof);
    model.alternatives = alternatives
        .into_iter()
        .map(|(p, c2)| Alternative { e_c_over_esigma: st.to_w(p[0]), nu: p[1], chi2: c2 })
        .collect();
    let mut flags = Vec::new();
    if model.chi2_per_dof > options.max_chi2_per_dof {
        flags.push(format!("chi2/dof = {:.2} exceeds {}", model.chi2_per_dof, options.max_chi2_per_dof));
    }
    if !(options.nu_range.0..=options.nu_range.1).contains(&model.nu) {
        flags.push(format!("nu = {:.3} outside [{}, {}]", model.nu, options.nu_range.0, options.nu_range.1));
    }
    if options.bootstrap > 0 {
        model.ci = Some(bootstrap(&problem, &best, &st, e_sigma, options));
    }
    if !flags.is_empty() {
        model.flag = Some(flags.join("; "));
    }
    Ok(model)
}

/// Lowest-`ν` minimum within `χ²_min + 1` whose `ν` lies in range; the
/// global minimum when none does. Also returns the other distinct minima.
#[allow(clippy::type_complexity)]
fn select_minimum(
    mut minima: Vec<(Vec<f64>, f64)>,
    nu_range: (f64, f64),
) -> Option<(Vec<f64>, f64, Vec<(Vec<f64>, f64)>)> {
    minima.retain(|(p, c)| c.is_finite() && p[1] > 0.0);
    minima.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut distinct: Vec<(Vec<f64>, f64)> = Vec::new();
    for (p, c) in minima {
        let dup = distinct.iter().any(|(q, _)| (q[0] - p[0]).abs() < 1e-4 && (q[1] - p[1]).abs() < 1e-4);
        if !dup {
            distinct.push((p, c));
        }
    }
    let chi_min = distinct.first()?.1;
    let pick = distinct
        .iter()
        .enumerate()
        .filter(|(_, (p, c))| *c <= chi_min + 1.0 && p[1] >= nu_range.0 && p[1] <= nu_range.1)
        .min_by(|a, b| a.1 .0[1].total_cmp(&b.1 .0[1]))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let (best, c2) = distinct.remove(pick);
    Some((best, c2, distinct))
}

#[allow(clippy::too_many_arguments)]
fn build_model(
    p: &[f64],
    problem: &Problem,
    st: &Standardization,
    e_sigma: f64,
    m_ref: f64,
    window: (f64, f64),
    chi2: f64,
    dof: usize,
) -> ScalingModel {
    let nb = problem.n_u - 1;
    // back to w: b_j^w = b_j^z h^{1-j}, a_j^w = a_j^z h^{-j}
    let u_coeffs = p[2..2 + nb].iter().enumerate().map(|(i, b)| b * st.half.powi(-(i as i32 + 1))).collect();
    let f_coeffs: Vec<f64> = p[2 + nb..].iter().enumerate().map(|(j, a)| a * st.half.powi(-(j as i32))).collect();
    let w_c = st.to_w(p[0]);
    ScalingModel {
        e_c: w_c * e_sigma,
        e_c_over_esigma: w_c,
        nu: p[1],
        lambda_c: f_coeffs[0].exp(),
        u_coeffs,
        f_coeffs,
        m_ref,
        e_sigma,
        window,
        n_points: problem.z.len(),
        chi2,
        dof,
        chi2_per_dof: chi2 / dof as f64,
        ci: None,
        flag: None,
        alternatives: Vec::new(),
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (pos - i as f64) * (sorted[j] - sorted[i])
}

/// Parametric bootstrap: resample `ln Λ` about the fitted model and refit.
fn bootstrap(
    problem: &Problem,
    best: &[f64],
    st: &Standardization,
    e_sigma: f64,
    options: &FitOptions,
) -> ConfidenceIntervals {
    let n = problem.z.len();
    let a = &best[2 + problem.n_u - 1..];
    let fitted: Vec<f64> = (0..n).map(|i| poly(a, problem.x_of(best, i))).collect();
    let results: Vec<Option<(f64, f64, f64)>> = (0..options.bootstrap as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(options.seed, Domain::Bootstrap, 0, b);
            let y: Vec<f64> =
                (0..n).map(|i| fitted[i] + problem.s[i] * rng.sample::<f64, _>(StandardNormal)).collect();
            let resampled = Problem {
                z: problem.z.clone(),
                mr: problem.mr.clone(),
                y,
                s: problem.s.clone(),
                n_u: problem.n_u,
                n_f: problem.n_f,
            };
            let mut p0 = best.to_vec();
            resampled.solve_linear(&mut p0);
            let (p, _) = resampled.levenberg_marquardt(&p0)?;
            let zc = p[0];
            if !(zc.abs() < 5.0) || !(p[1] > 0.0) {
                return None;
            }
            let a0 = p[2 + problem.n_u - 1];
            Some((st.to_w(zc), p[1], a0.exp()))
        })
        .collect();
    let ok: Vec<(f64, f64, f64)> = results.iter().flatten().copied().collect();
    let failed = results.len() - ok.len();
    let level = 0.95;
    let ci = |f: &dyn Fn(&(f64, f64, f64)) -> f64| {
        let mut v: Vec<f64> = ok.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        if v.is_empty() {
            return Interval { lo: f64::NAN, hi: f64::NAN };
        }
        Interval { lo: percentile(&v, (1.0 - level) / 2.0), hi: percentile(&v, (1.0 + level) / 2.0) }
    };
    let w = ci(&|r| r.0);
    ConfidenceIntervals {
        level,
        e_c: Interval { lo: w.lo * e_sigma, hi: w.hi * e_sigma },
        e_c_over_esigma: w,
        nu: ci(&|r| r.1),
        lambda_c: ci(&|r| r.2),
        resamples: ok.len(),
        failed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XiPoint {
    #[serde(rename = "E")]
    pub energy: f64,
    #[serde(rename = "E_over_Esigma")]
    pub energy_over_esigma: f64,
    /// Extrapolated `λ_∞` in lattice units.
    pub lambda_inf: f64,
    pub xi: f64,
    pub xi_err: f64,
    pub xi_over_sigma: f64,
    pub xi_over_sigma_err: f64,
    pub n_m: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedPoint {
    #[serde(rename = "E")]
    pub energy: f64,
    pub reason: String,
}

/// Power law `ξ/σ = A ((E_c - E)/E_σ)^{-ν}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    pub amplitude: f64,
    pub nu: f64,
    pub nu_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XiCurve {
    pub sigma: f64,
    pub delta: f64,
    #[serde(rename = "E_c")]
    pub e_c: f64,
    pub points: Vec<XiPoint>,
    pub dropped: Vec<DroppedPoint>,
    pub power_law: Option<PowerLaw>,
}

impl XiCurve {
    pub fn at(&self, energy_over_esigma: f64) -> Option<&XiPoint> {
        self.points.iter().min_by(|a, b| {
            (a.energy_over_esigma - energy_over_esigma).abs().total_cmp(&(b.energy_over_esigma - energy_over_esigma).abs())
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("E,E_over_Esigma,lambda_inf,xi,xi_err,xi_over_sigma,xi_over_sigma_err,n_M\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                p.energy, p.energy_over_esigma, p.lambda_inf, p.xi, p.xi_err, p.xi_over_sigma, p.xi_over_sigma_err, p.n_m
            ));
        }
        s
    }
}

/// Weighted fit `y = c0 + c1 t`; returns `(c0, c1, cov)` with the covariance
/// scaled by `max(1, χ²/dof)`.
fn weighted_line(t: &[f64], y: &[f64], s: &[f64]) -> Option<(f64, f64, [[f64; 2]; 2])> {
    let (mut sw, mut st, mut stt, mut sy, mut sty) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..t.len() {
        let w = 1.0 / (s[i] * s[i]);
        sw += w;
        st += w * t[i];
        stt += w * t[i] * t[i];
        sy += w * y[i];
        sty += w * t[i] * y[i];
    }
    let det = sw * stt - st * st;
    if !(det.abs() > 1e-300) {
        return None;
    }
    let c0 = (stt * sy - st * sty) / det;
    let c1 = (sw * sty - st * sy) / det;
    let mut cov = [[stt / det, -st / det], [-st / det, sw / det]];
    if t.len() > 2 {
        let chi2: f64 = (0..t.len()).map(|i| ((y[i] - c0 - c1 * t[i]) / s[i]).powi(2)).sum();
        let f = (chi2 / (t.len() - 2) as f64).max(1.0);
        cov.iter_mut().flatten().for_each(|v| *v *= f);
    }
    Some((c0, c1, cov))
}

/// `λ_∞` per energy below `E_c` from `λ_M = λ_∞ (1 + a/M)`, then `ξ = λ_∞ Δ`.
pub fn extract_xi(scan: &TmmScan, model: &ScalingModel) -> Result<XiCurve> {
    let sigma = scan.spec.sigma();
    let delta = scan.delta;
    let mut energies: Vec<f64> = scan.entries.iter().map(|e| e.energy).collect();
    energies.sort_by(f64::total_cmp);
    energies.dedup();
    let mut points = Vec::new();
    let mut dropped = Vec::new();
    for &e in energies.iter().filter(|&&e| e < model.e_c) {
        let rows: Vec<_> =
            scan.entries.iter().filter(|r| r.energy == e && r.lambda.is_finite() && r.stderr > 0.0).collect();
        let mut ms: Vec<usize> = rows.iter().map(|r| r.m).collect();
        ms.sort();
        ms.dedup();
        if ms.len() < 3 {
            dropped.push(DroppedPoint { energy: e, reason: format!("only {} widths", ms.len()) });
            continue;
        }
        let t: Vec<f64> = rows.iter().map(|r| 1.0 / r.m as f64).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
        let s: Vec<f64> = rows.iter().map(|r| r.stderr).collect();
        let Some((lam, c, cov)) = weighted_line(&t, &y, &s) else {
            dropped.push(DroppedPoint { energy: e, reason: "singular extrapolation".into() });
            continue;
        };
        let err = cov[0][0].sqrt();
        let m_min = ms[0] as f64;
        let reason = if !(lam > 0.0) {
            Some("non-positive lambda_inf".to_string())
        } else if !(err < 0.5 * lam) {
            Some(format!("relative error {:.2} too large", err / lam))
        } else if lam + c / m_min <= 0.0 {
            Some("finite-size correction exceeds the value".to_string())
        } else {
            None
        };
        if let Some(reason) = reason {
            dropped.push(DroppedPoint { energy: e, reason });
            continue;
        }
        let xi = lam * delta;
        let xi_err = err * delta;
        points.push(XiPoint {
            energy: e,
            energy_over_esigma: e / scan.spec.e_sigma(),
            lambda_inf: lam,
            xi,
            xi_err,
            xi_over_sigma: xi / sigma,
            xi_over_sigma_err: xi_err / sigma,
            n_m: ms.len(),
        });
    }
    let power_law = fit_power_law(&points, model.e_c_over_esigma);
    Ok(XiCurve { sigma, delta, e_c: model.e_c, points, dropped, power_law })
}

fn fit_power_law(points: &[XiPoint], w_c: f64) -> Option<PowerLaw> {
    if points.len() < 2 {
        return None;
    }
    let t: Vec<f64> = points.iter().map(|p| (w_c - p.energy_over_esigma).ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.xi_over_sigma.ln()).collect();
    let s: Vec<f64> = points.iter().map(|p| (p.xi_over_sigma_err / p.xi_over_sigma).max(1e-6)).collect();
    let (c0, c1, cov) = weighted_line(&t, &y, &s)?;
    Some(PowerLaw { amplitude: c0.exp(), nu: -c1, nu_err: cov[1][1].sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_points(slope1: f64, slope2: f64, cross: f64) -> Vec<DataPoint> {
        let mut v = Vec::new();
        for (m, slope) in [(4, slope1), (8, slope2)] {
            for i in 0..9 {
                let e = -0.2 + 0.05 * i as f64;
                v.push(DataPoint { energy: e, m, lambda_over_m: (0.5 + slope * (e - cross)).exp(), err: 0.01 });
            }
        }
        v
    }

    #[test]
    fn straight_lines_cross_where_expected() {
        let r = crossings_from_points(&linear_points(1.0, 3.0, 0.0123), 1.0);
        assert_eq!(r.crossings.len(), 1);
        assert!((r.crossings[0].energy - 0.0123).abs() < 1e-9);
    }

    #[test]
    fn disjoint_curves_have_no_crossing() {
        let mut pts = linear_points(1.0, 1.0, 0.0);
        for p in pts.iter_mut().filter(|p| p.m == 8) {
            p.lambda_over_m *= 1.5;
        }
        let r = crossings_from_points(&pts, 1.0);
        assert!(r.crossings.is_empty());
        assert_eq!(r.skipped.len(), 1);
    }

    #[test]
    fn equal_curves_are_degenerate() {
        let mut pts = Vec::new();
        for m in [4, 6, 8] {
            for i in 0..7 {
                let e = 0.1 * i as f64;
                pts.push(DataPoint { energy: e, m, lambda_over_m: 0.6 + 0.1 * e, err: 0.01 });
            }
        }
        let r = fit_points(&pts, 1.0, &FitOptions::default());
        assert!(matches!(r, Err(Error::NoCrossing(_))), "{r:?}");
    }

    #[test]
    fn noiseless_model_is_recovered() {
        let (wc, nu) = (0.03, 1.5);
        let mut pts = Vec::new();
        for m in [6, 9, 12, 16] {
            for i in 0..11 {
                let w = -0.1 + 0.025 * i as f64;
                let x = (w - wc) * (m as f64).powf(1.0 / nu);
                pts.push(DataPoint { energy: w * 2.0, m, lambda_over_m: (-0.4 + 0.8 * x + 0.1 * x * x).exp(), err: 1e-3 });
            }
        }
        let opts = FitOptions { bootstrap: 0, n_u: 1, n_f: 2, ..FitOptions::default() };
        let fit = fit_points(&pts, 2.0, &opts).unwrap();
        assert!((fit.e_c_over_esigma - wc).abs() < 1e-6, "{fit:?}");
        assert!((fit.nu - nu).abs() < 1e-5);
        assert!((fit.lambda_c - (-0.4f64).exp()).abs() < 1e-6);
        assert!(fit.chi2 < 1e-6);
        let m = 9;
        let want = pts.iter().find(|p| p.m == m).unwrap();
        assert!((fit.predict(want.energy, m) / want.lambda_over_m - 1.0).abs() < 1e-6);
    }

    #[test]
    fn too_few_widths_rejected() {
        let r = fit_points(&linear_points(1.0, 2.0, 0.0), 1.0, &FitOptions::default());
        assert!(matches!(r, Err(Error::InvalidParameter(_))));
    }
}
