//! Random Fourier data for the effective potential.
//!
//! A realization along one axis is the set of coefficients
//! `c_k = g_k f_{-k}` for `0 < |k| <= k_cut`, with Gaussian moduli
//! `|c_k| = exp(-k^2 / 2 k0^2) / (sqrt(k0) pi^(1/4))` and independent uniform
//! phases. The field `h(x) = sum_k c_k e^{ikx}` is real because
//! `c_{-k} = conj(c_k)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::RngExt;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `h_i` has unit variance and `V_eff = V0 h1 h2 h3`.
    UnitVarianceH,
    /// `h_i` carries the amplitude `V0` itself (variance `V0^2`).
    ScaledFactors,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::UnitVarianceH
    }
}

/// Truncation that puts the envelope below `e^{-6}` at the cutoff.
pub fn default_k_cut(k0: f64) -> usize {
    (3.5 * k0).ceil() as usize
}

/// `|c_k|` for the Gaussian envelope.
pub fn envelope_modulus(k0: f64, k: f64) -> f64 {
    (-k * k / (2.0 * k0 * k0)).exp() / (k0.sqrt() * PI.powf(0.25))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisorderSpec {
    pub k0: f64,
    pub v0: f64,
    pub dims: usize,
    pub k_cut: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub normalization: Normalization,
}

impl DisorderSpec {
    pub fn new(k0: f64, v0: f64, dims: usize, master_seed: u64) -> Result<Self> {
        if !(k0 > 0.0) || !k0.is_finite() {
            return Err(Error::param(format!("k0 must be positive, got {k0}")));
        }
        let spec = DisorderSpec {
            k0,
            v0,
            dims,
            k_cut: default_k_cut(k0),
            master_seed,
            normalization: Normalization::UnitVarianceH,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec with correlation length `sigma` and `V0 = v0_over_esigma * E_sigma`.
    pub fn from_sigma(sigma: f64, v0_over_esigma: f64, dims: usize, master_seed: u64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::param(format!("sigma must be positive, got {sigma}")));
        }
        let k0 = 2f64.sqrt() / sigma;
        Self::new(k0, v0_over_esigma * k0 * k0 / 2.0, dims, master_seed)
    }

    pub fn with_k_cut(mut self, k_cut: usize) -> Result<Self> {
        self.k_cut = k_cut;
        self.validate()?;
        Ok(self)
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k0 > 0.0) || !self.k0.is_finite() {
            return Err(Error::param(format!("k0 must be positive, got {}", self.k0)));
        }
        if !(self.v0 >= 0.0) || !self.v0.is_finite() {
            return Err(Error::param(format!("V0 must be non-negative, got {}", self.v0)));
        }
        if self.k_cut < 1 {
            return Err(Error::param("k_cut must be at least 1"));
        }
        if self.dims != 1 && self.dims != 3 {
            return Err(Error::param(format!("dims must be 1 or 3, got {}", self.dims)));
        }
        Ok(())
    }

    /// Correlation length `sqrt(2) / k0`.
    pub fn sigma(&self) -> f64 {
        2f64.sqrt() / self.k0
    }

    /// Correlation energy `1 / sigma^2 = k0^2 / 2`.
    pub fn e_sigma(&self) -> f64 {
        self.k0 * self.k0 / 2.0
    }

    /// Multiplier applied to every evaluated `h_i`.
    pub fn field_scale(&self) -> f64 {
        match self.normalization {
            Normalization::UnitVarianceH => 1.0,
            Normalization::ScaledFactors => self.v0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Envelope {
    Gaussian,
    /// Equal moduli up to the cutoff (the three-harmonic sawtooth drive).
    Flat,
}

/// Coefficients `c_k` of one axis, stored for `k = 1..=k_cut`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierCoeffs {
    pub axis: usize,
    pub realization: u64,
    pub k0: f64,
    pub envelope: Envelope,
    pub scale: f64,
    positive: Vec<Complex64>,
}

impl FourierCoeffs {
    pub fn from_positive(
        axis: usize,
        realization: u64,
        k0: f64,
        envelope: Envelope,
        scale: f64,
        positive: Vec<Complex64>,
    ) -> Self {
        FourierCoeffs { axis, realization, k0, envelope, scale, positive }
    }

    pub fn k_cut(&self) -> usize {
        self.positive.len()
    }

    /// `c_k` for any integer `k`; zero at `k = 0` and beyond the cutoff.
    pub fn coeff(&self, k: i64) -> Complex64 {
        let a = k.unsigned_abs() as usize;
        if a == 0 || a > self.positive.len() {
            return Complex64::new(0.0, 0.0);
        }
        let c = self.positive[a - 1];
        if k > 0 {
            c
        } else {
            c.conj()
        }
    }

    pub fn positive(&self) -> &[Complex64] {
        &self.positive
    }

    /// `sum_{k != 0} |c_k|^2`, the variance of `h` before scaling.
    pub fn power(&self) -> f64 {
        2.0 * self.positive.iter().map(|c| c.norm_sqr()).sum::<f64>()
    }

    /// Direct-sum evaluation at a single point, with `e^{ikx}` by recurrence.
    pub fn eval(&self, x: f64) -> f64 {
        let (s, c) = x.sin_cos();
        let z = Complex64::new(c, s);
        let mut w = z;
        let mut acc = 0.0;
        for ck in &self.positive {
            acc += ck.re * w.re - ck.im * w.im;
            w *= z;
        }
        2.0 * acc * self.scale
    }
}

/// Phases for axis/realization, drawn from their own stream.
pub fn gen_coeffs(spec: &DisorderSpec, axis: usize, realization: u64) -> Result<FourierCoeffs> {
    spec.validate()?;
    if axis < 1 || axis > spec.dims {
        return Err(Error::param(format!("axis {axis} outside 1..={}", spec.dims)));
    }
    let mut rng = rng::stream(spec.master_seed, Domain::Phases, axis as u64, realization);
    let positive = (1..=spec.k_cut)
        .map(|k| {
            let phase = 2.0 * PI * rng.random::<f64>();
            Complex64::from_polar(envelope_modulus(spec.k0, k as f64), phase)
        })
        .collect();
    Ok(FourierCoeffs::from_positive(
        axis,
        realization,
        spec.k0,
        Envelope::Gaussian,
        spec.field_scale(),
        positive,
    ))
}

/// Three harmonics with flat moduli `1/sqrt(3)` and random phases.
pub fn sawtooth_coeffs(master_seed: u64, realization: u64) -> FourierCoeffs {
    let mut rng = rng::stream(master_seed, Domain::Sawtooth, 1, realization);
    let modulus = 1.0 / 3f64.sqrt();
    let positive = (0..3)
        .map(|_| Complex64::from_polar(modulus, 2.0 * PI * rng.random::<f64>()))
        .collect();
    FourierCoeffs::from_positive(1, realization, 3.0, Envelope::Flat, 1.0, positive)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FieldDomain {
    /// `n` uniform points on `[0, 2 pi)`.
    Periodic { n: usize },
    /// `n` uniform points on `[0, length)`.
    Extended { n: usize, length: f64 },
    /// Arbitrary evaluation points.
    Points { x: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledField {
    pub axis: usize,
    pub domain: FieldDomain,
    pub values: Vec<f64>,
}

impl SampledField {
    pub fn spacing(&self) -> Option<f64> {
        match &self.domain {
            FieldDomain::Periodic { n } => Some(2.0 * PI / *n as f64),
            FieldDomain::Extended { n, length } => Some(length / *n as f64),
            FieldDomain::Points { .. } => None,
        }
    }

    pub fn positions(&self) -> Vec<f64> {
        match &self.domain {
            FieldDomain::Points { x } => x.clone(),
            _ => {
                let dx = self.spacing().unwrap();
                (0..self.values.len()).map(|i| i as f64 * dx).collect()
            }
        }
    }

    pub fn rms(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64).sqrt()
    }
}

/// Field at arbitrary points by direct summation.
pub fn eval_h(coeffs: &FourierCoeffs, x: &[f64]) -> SampledField {
    SampledField {
        axis: coeffs.axis,
        domain: FieldDomain::Points { x: x.to_vec() },
        values: x.iter().map(|&xi| coeffs.eval(xi)).collect(),
    }
}

/// Field on the uniform periodic grid of `n` points via an inverse FFT.
pub fn eval_h_grid(coeffs: &FourierCoeffs, n: usize) -> Result<SampledField> {
    let k_cut = coeffs.k_cut();
    if n <= 2 * k_cut {
        return Err(Error::Sampling { points: n, k_cut, required: 2 * k_cut });
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for k in 1..=k_cut {
        let c = coeffs.coeff(k as i64);
        buf[k] = c;
        buf[n - k] = c.conj();
    }
    FftPlanner::<f64>::new().plan_fft_inverse(n).process(&mut buf);
    Ok(SampledField {
        axis: coeffs.axis,
        domain: FieldDomain::Periodic { n },
        values: buf.iter().map(|z| z.re * coeffs.scale).collect(),
    })
}

/// `V_eff = V0 h1 h2 h3` kept in factorized form.
#[derive(Clone, Debug)]
pub struct Veff3 {
    pub v0: f64,
    pub factors: [Vec<f64>; 3],
}

impl Veff3 {
    pub fn shape(&self) -> [usize; 3] {
        [self.factors[0].len(), self.factors[1].len(), self.factors[2].len()]
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.v0 * self.factors[0][i] * self.factors[1][j] * self.factors[2][k]
    }

    /// Dense array, axis 0 slowest.
    pub fn dense(&self) -> Vec<f64> {
        let [n0, n1, n2] = self.shape();
        let mut out = Vec::with_capacity(n0 * n1 * n2);
        for &a in &self.factors[0] {
            for &b in &self.factors[1] {
                let ab = self.v0 * a * b;
                out.extend(self.factors[2].iter().map(|&c| ab * c));
            }
        }
        out
    }
}

pub fn eval_veff(
    spec: &DisorderSpec,
    coeffs: [&FourierCoeffs; 3],
    n: [usize; 3],
) -> Result<Veff3> {
    if spec.dims != 3 {
        return Err(Error::param("eval_veff requires dims = 3"));
    }
    let f0 = eval_h_grid(coeffs[0], n[0])?.values;
    let f1 = eval_h_grid(coeffs[1], n[1])?.values;
    let f2 = eval_h_grid(coeffs[2], n[2])?.values;
    Ok(Veff3 { v0: spec.v0, factors: [f0, f1, f2] })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagEstimate {
    pub lag: f64,
    pub mean: f64,
    pub stderr: f64,
}

/// Per-realization averages of `h(x') h(x'+lag)` over random base points.
fn correlation_samples(
    spec: &DisorderSpec,
    realizations: usize,
    axis: usize,
    lags: &[f64],
    base_points: usize,
) -> Result<Vec<Vec<f64>>> {
    if realizations < 2 {
        return Err(Error::param("correlation estimate needs at least 2 realizations"));
    }
    if base_points < 1 {
        return Err(Error::param("need at least one base point per realization"));
    }
    (0..realizations as u64)
        .into_par_iter()
        .map(|r| {
            let coeffs = gen_coeffs(spec, axis, r)?;
            let mut rng = rng::stream(spec.master_seed, Domain::BasePoints, axis as u64, r);
            let mut acc = vec![0.0; lags.len()];
            for _ in 0..base_points {
                let x = 2.0 * PI * rng.random::<f64>();
                let h0 = coeffs.eval(x);
                for (a, &lag) in acc.iter_mut().zip(lags) {
                    *a += h0 * coeffs.eval(x + lag);
                }
            }
            Ok(acc.into_iter().map(|a| a / base_points as f64).collect())
        })
        .collect()
}

/// Monte-Carlo estimate of `C(x) = mean h(x') h(x'+x)` with standard errors
/// over realizations.
///
/// Base points are drawn at random; averaging over a full period would make
/// the estimate deterministic (Parseval) and hide the sampling error.
pub fn correlation_estimate(
    spec: &DisorderSpec,
    realizations: usize,
    axis: usize,
    lags: &[f64],
    base_points: usize,
) -> Result<Vec<LagEstimate>> {
    let samples = correlation_samples(spec, realizations, axis, lags, base_points)?;
    let r = samples.len() as f64;
    Ok(lags
        .iter()
        .enumerate()
        .map(|(j, &lag)| {
            let mean = samples.iter().map(|s| s[j]).sum::<f64>() / r;
            let var = samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / (r - 1.0);
            LagEstimate { lag, mean, stderr: (var / r).sqrt() }
        })
        .collect())
}

/// `C(x) / C(0)` with delete-one-realization jackknife errors.
pub fn normalized_correlation(
    spec: &DisorderSpec,
    realizations: usize,
    axis: usize,
    lags: &[f64],
    base_points: usize,
) -> Result<Vec<LagEstimate>> {
    let mut all = Vec::with_capacity(lags.len() + 1);
    all.push(0.0);
    all.extend_from_slice(lags);
    let samples = correlation_samples(spec, realizations, axis, &all, base_points)?;
    let r = samples.len();
    let totals: Vec<f64> = (0..all.len()).map(|j| samples.iter().map(|s| s[j]).sum()).collect();
    Ok(lags
        .iter()
        .enumerate()
        .map(|(jj, &lag)| {
            let j = jj + 1;
            let full = totals[j] / totals[0];
            let loo: Vec<f64> = samples
                .iter()
                .map(|s| (totals[j] - s[j]) / (totals[0] - s[0]))
                .collect();
            let m = loo.iter().sum::<f64>() / r as f64;
            let var = loo.iter().map(|v| (v - m).powi(2)).sum::<f64>() * (r as f64 - 1.0) / r as f64;
            LagEstimate { lag, mean: full, stderr: var.sqrt() }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub samples: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub skewness_err: f64,
    pub excess_kurtosis: f64,
    pub kurtosis_err: f64,
}

#[derive(Clone, Copy, Default)]
struct PowerSums([f64; 5]);

impl PowerSums {
    fn push(&mut self, x: f64) {
        let x2 = x * x;
        self.0[0] += 1.0;
        self.0[1] += x;
        self.0[2] += x2;
        self.0[3] += x2 * x;
        self.0[4] += x2 * x2;
    }

    fn minus(&self, o: &PowerSums) -> PowerSums {
        let mut s = *self;
        for (a, b) in s.0.iter_mut().zip(o.0) {
            *a -= b;
        }
        s
    }

    /// (mean, variance, skewness, excess kurtosis)
    fn moments(&self) -> (f64, f64, f64, f64) {
        let n = self.0[0];
        let m = self.0[1] / n;
        let e2 = self.0[2] / n;
        let e3 = self.0[3] / n;
        let e4 = self.0[4] / n;
        let m2 = e2 - m * m;
        let m3 = e3 - 3.0 * m * e2 + 2.0 * m.powi(3);
        let m4 = e4 - 4.0 * m * e3 + 6.0 * m * m * e2 - 3.0 * m.powi(4);
        (m, m2, m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    }
}

/// Skewness and excess kurtosis of `h` at random points, jackknifed over
/// realizations.
pub fn gaussianity_test(
    spec: &DisorderSpec,
    realizations: usize,
    points_per_realization: usize,
) -> Result<GaussianMoments> {
    let total = realizations * points_per_realization;
    if total < 10_000 {
        return Err(Error::param(format!("need at least 1e4 samples, got {total}")));
    }
    if realizations < 2 {
        return Err(Error::param("need at least 2 realizations"));
    }
    let sums: Vec<PowerSums> = (0..realizations as u64)
        .into_par_iter()
        .map(|r| {
            let coeffs = gen_coeffs(spec, 1, r)?;
            let mut rng = rng::stream(spec.master_seed, Domain::Moments, 1, r);
            let mut s = PowerSums::default();
            for _ in 0..points_per_realization {
                s.push(coeffs.eval(2.0 * PI * rng.random::<f64>()));
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let mut all = PowerSums::default();
    for s in &sums {
        for (a, b) in all.0.iter_mut().zip(s.0) {
            *a += b;
        }
    }
    let (mean, variance, skewness, excess_kurtosis) = all.moments();
    let r = sums.len() as f64;
    let loo: Vec<(f64, f64)> = sums
        .iter()
        .map(|s| {
            let (_, _, sk, ku) = all.minus(s).moments();
            (sk, ku)
        })
        .collect();
    let jack = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let m = loo.iter().map(f).sum::<f64>() / r;
        (loo.iter().map(|v| (f(v) - m).powi(2)).sum::<f64>() * (r - 1.0) / r).sqrt()
    };
    Ok(GaussianMoments {
        samples: total,
        mean,
        variance,
        skewness,
        skewness_err: jack(&|v| v.0),
        excess_kurtosis,
        kurtosis_err: jack(&|v| v.1),
    })
}

/// Band-limited stationary Gaussian process on `[0, length)` built on the
/// wavenumber grid `2 pi q / length`, `|q| <= k_cut length / 2 pi`.
///
/// The result is periodic in `length`, unit variance (times the spec's
/// field scale), with correlation `exp(-x^2 / 2 sigma^2)` in the dense limit.
pub(crate) fn band_limited_field(
    spec: &DisorderSpec,
    length: f64,
    n: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    if !(length > 0.0) {
        return Err(Error::param("segment length must be positive"));
    }
    let dk = 2.0 * PI / length;
    let q_max = (spec.k_cut as f64 / dk).floor() as usize;
    if n <= 2 * q_max {
        return Err(Error::Sampling { points: n, k_cut: spec.k_cut, required: 2 * q_max });
    }
    let weight = |q: usize| {
        let k = q as f64 * dk;
        (-k * k / (spec.k0 * spec.k0)).exp()
    };
    let norm = weight(0) + 2.0 * (1..=q_max).map(weight).sum::<f64>();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let g: f64 = rng.sample(StandardNormal);
    buf[0] = Complex64::new(g * (weight(0) / norm).sqrt(), 0.0);
    for q in 1..=q_max {
        let s = (weight(q) / norm / 2.0).sqrt();
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        let a = Complex64::new(re * s, im * s);
        buf[q] = a;
        buf[n - q] = a.conj();
    }
    FftPlanner::<f64>::new().plan_fft_inverse(n).process(&mut buf);
    let scale = spec.field_scale();
    Ok(buf.iter().map(|z| z.re * scale).collect())
}

/// Non-periodic disorder segment for transfer-matrix bars.
pub fn extended_field(
    spec: &DisorderSpec,
    axis: usize,
    length: f64,
    n: usize,
    realization: u64,
) -> Result<SampledField> {
    spec.validate()?;
    let mut rng = rng::stream(spec.master_seed, Domain::Extended, axis as u64, realization);
    let values = band_limited_field(spec, length, n, &mut rng)?;
    Ok(SampledField { axis, domain: FieldDomain::Extended { n, length }, values })
}

/// JSON form of a realization; negative `k` are listed explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffRecord {
    pub spec: DisorderSpec,
    pub envelope: Envelope,
    pub axis: usize,
    pub realization: u64,
    pub coeffs: Vec<(i64, f64, f64)>,
}

impl CoeffRecord {
    pub fn new(spec: &DisorderSpec, coeffs: &FourierCoeffs) -> Self {
        let kc = coeffs.k_cut() as i64;
        let list = (-kc..=kc)
            .filter(|&k| k != 0)
            .map(|k| {
                let c = coeffs.coeff(k);
                (k, c.re, c.im)
            })
            .collect();
        CoeffRecord {
            spec: spec.clone(),
            envelope: coeffs.envelope,
            axis: coeffs.axis,
            realization: coeffs.realization,
            coeffs: list,
        }
    }

    pub fn to_coeffs(&self) -> Result<FourierCoeffs> {
        let mut positive: Vec<(i64, Complex64)> = Vec::new();
        let mut negative: Vec<(i64, Complex64)> = Vec::new();
        for &(k, re, im) in &self.coeffs {
            let c = Complex64::new(re, im);
            match k {
                0 => return Err(Error::Format("k = 0 coefficient present".into())),
                k if k > 0 => positive.push((k, c)),
                k => negative.push((-k, c)),
            }
        }
        positive.sort_by_key(|p| p.0);
        negative.sort_by_key(|p| p.0);
        let kc = positive.len();
        if positive.iter().enumerate().any(|(i, p)| p.0 != i as i64 + 1) {
            return Err(Error::Format("coefficients must cover 1..=k_cut".into()));
        }
        if negative.len() != kc || negative.iter().zip(&positive).any(|(n, p)| n.0 != p.0 || n.1 != p.1.conj()) {
            return Err(Error::Format("coefficients are not Hermitian".into()));
        }
        Ok(FourierCoeffs::from_positive(
            self.axis,
            self.realization,
            self.spec.k0,
            self.envelope,
            match self.envelope {
                Envelope::Gaussian => self.spec.field_scale(),
                Envelope::Flat => 1.0,
            },
            positive.into_iter().map(|p| p.1).collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(k0: f64) -> DisorderSpec {
        DisorderSpec::new(k0, 1.0, 3, 42).unwrap()
    }

    #[test]
    fn zero_mode_is_absent() {
        let c = gen_coeffs(&spec(5.0), 1, 0).unwrap();
        assert_eq!(c.coeff(0), Complex64::new(0.0, 0.0));
        assert_eq!(c.coeff(c.k_cut() as i64 + 1), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn modulus_at_k0() {
        let k0 = 10.0 * 2f64.sqrt();
        let c = gen_coeffs(&spec(k0), 2, 3).unwrap();
        // k0 is not an integer; check the integer k nearest to it and the envelope itself.
        let expected = (-0.5f64).exp() / (k0.sqrt() * PI.powf(0.25));
        assert!((envelope_modulus(k0, k0) - expected).abs() < 1e-15);
        for k in 1..=c.k_cut() {
            let m = c.coeff(k as i64).norm();
            assert!((m - envelope_modulus(k0, k as f64)).abs() < 1e-15 * m.max(1e-300));
        }
    }

    #[test]
    fn total_power_near_one() {
        let c = gen_coeffs(&spec(20.0), 1, 0).unwrap();
        assert!((c.power() - 1.0).abs() < 0.03, "power {}", c.power());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(DisorderSpec::new(0.0, 1.0, 3, 0).is_err());
        assert!(DisorderSpec::new(-1.0, 1.0, 3, 0).is_err());
        assert!(spec(2.0).with_k_cut(0).is_err());
        assert!(gen_coeffs(&spec(2.0), 4, 0).is_err());
        let one = DisorderSpec::new(2.0, 1.0, 1, 0).unwrap();
        assert!(gen_coeffs(&one, 2, 0).is_err());
    }

    #[test]
    fn zero_phases_give_even_field() {
        let k0 = 4.0;
        let pos = (1..=default_k_cut(k0))
            .map(|k| Complex64::new(envelope_modulus(k0, k as f64), 0.0))
            .collect();
        let c = FourierCoeffs::from_positive(1, 0, k0, Envelope::Gaussian, 1.0, pos);
        for &x in &[0.1, 0.7, 2.3] {
            assert!((c.eval(x) - c.eval(-x)).abs() < 1e-13);
        }
    }

    #[test]
    fn direct_and_fft_agree() {
        let c = gen_coeffs(&spec(10.0 * 2f64.sqrt()), 1, 5).unwrap();
        let grid = eval_h_grid(&c, 128).unwrap();
        let direct = eval_h(&c, &grid.positions());
        let err = grid
            .values
            .iter()
            .zip(&direct.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "max diff {err}");
        let x = 1.234;
        assert!((c.eval(x) - c.eval(x + 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn grid_below_nyquist_is_rejected() {
        let c = gen_coeffs(&spec(10.0), 1, 0).unwrap();
        let k_cut = c.k_cut();
        assert!(matches!(eval_h_grid(&c, 2 * k_cut), Err(Error::Sampling { .. })));
        assert!(eval_h_grid(&c, 2 * k_cut + 1).is_ok());
    }

    #[test]
    fn veff_zero_amplitude_and_periodicity() {
        let s = DisorderSpec::new(3.0, 0.0, 3, 1).unwrap();
        let cs: Vec<FourierCoeffs> = (1..=3).map(|a| gen_coeffs(&s, a, 0).unwrap()).collect();
        let v = eval_veff(&s, [&cs[0], &cs[1], &cs[2]], [32, 32, 32]).unwrap();
        assert!(v.dense().iter().all(|&x| x == 0.0));

        let s = DisorderSpec::new(3.0, 2.0, 3, 1).unwrap();
        let cs: Vec<FourierCoeffs> = (1..=3).map(|a| gen_coeffs(&s, a, 0).unwrap()).collect();
        let p = |t: f64, u: f64, w: f64| s.v0 * cs[0].eval(t) * cs[1].eval(u) * cs[2].eval(w);
        let tp = 2.0 * PI;
        assert!((p(0.3, 1.1, -0.4) - p(0.3 + tp, 1.1, -0.4)).abs() < 1e-12);
        assert!((p(0.3, 1.1, -0.4) - p(0.3, 1.1 - tp, -0.4 + tp)).abs() < 1e-12);
    }

    #[test]
    fn sawtooth_has_three_flat_harmonics() {
        let c = sawtooth_coeffs(9, 0);
        for k in 1..=3 {
            assert!((c.coeff(k).norm() - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        }
        assert_eq!(c.coeff(4), Complex64::new(0.0, 0.0));
        assert_eq!(c.coeff(-7), Complex64::new(0.0, 0.0));
        let hermitian = (1..=3).all(|k| c.coeff(-k) == c.coeff(k).conj());
        assert!(hermitian);
    }

    #[test]
    fn extended_field_is_deterministic_and_checks_nyquist() {
        let s = spec(10.0);
        let a = extended_field(&s, 1, 50.0, 2048, 3).unwrap();
        let b = extended_field(&s, 1, 50.0, 2048, 3).unwrap();
        assert_eq!(a.values, b.values);
        // need n/L > k_cut/pi
        let too_few = (s.k_cut as f64 * 50.0 / PI) as usize - 1;
        assert!(extended_field(&s, 1, 50.0, too_few, 3).is_err());
    }

    #[test]
    fn record_round_trip() {
        let s = spec(6.0);
        let c = gen_coeffs(&s, 2, 11).unwrap();
        let rec = CoeffRecord::new(&s, &c);
        let text = serde_json::to_string(&rec).unwrap();
        let back: CoeffRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.to_coeffs().unwrap(), c);
    }

    #[test]
    fn non_hermitian_record_is_rejected() {
        let s = spec(2.0);
        let c = gen_coeffs(&s, 1, 0).unwrap();
        let mut rec = CoeffRecord::new(&s, &c);
        rec.coeffs[0].2 += 0.1;
        assert!(rec.to_coeffs().is_err());
    }
}
