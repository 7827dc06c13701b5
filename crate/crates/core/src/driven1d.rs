//! The single-frequency driven system `H = p^2/2m + V0 g(2π z/L_z) f_1(t)`.
//!
//! Full propagation uses a Strang split step with the drive evaluated at
//! the midpoint of each step. In the frame moving with the resonant
//! velocity `ω L_z / 2π` the secular approximation predicts evolution under
//! `H_eff = P^2/2m + V0 Σ_k c_k e^{i k 2π Z/L_z}`, with `c_k = g_k f_{-k}`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::disorder::FourierCoeffs;
use crate::error::{Error, Result};

/// Spatial shape `g` of the drive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SpatialProfile {
    /// `g(x) = x/π` on `[-π, π)`.
    SawtoothExact,
    /// Sawtooth harmonics `|n| <= n_max` only.
    Truncated { n_max: usize },
}

/// `g_n = i (-1)^n / (π n)`, `g_0 = 0`.
pub fn sawtooth_harmonic(n: i64) -> Complex64 {
    if n == 0 {
        return Complex64::new(0.0, 0.0);
    }
    let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
    Complex64::new(0.0, sign / (PI * n as f64))
}

impl SpatialProfile {
    /// `g` at the angle `x` (any real value; period `2π`).
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            SpatialProfile::SawtoothExact => {
                let y = (x + PI).rem_euclid(2.0 * PI) - PI;
                y / PI
            }
            SpatialProfile::Truncated { n_max } => (1..=n_max as i64)
                .map(|n| {
                    let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                    -2.0 * sign * (n as f64 * x).sin() / (PI * n as f64)
                })
                .sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrivenSpec1D {
    pub mass: f64,
    pub v0: f64,
    pub omega: f64,
    /// `f_k` for `k = 1..=k_max`; `f_{-k} = conj(f_k)` and `f_0 = 0`.
    pub drive: Vec<Complex64>,
    pub profile: SpatialProfile,
    pub l_z: f64,
    pub n_points: usize,
}

impl DrivenSpec1D {
    /// Drive coefficients chosen so that `g_k f_{-k}` equals the given `c_k`.
    pub fn from_effective(
        c: &FourierCoeffs,
        v0: f64,
        omega: f64,
        profile: SpatialProfile,
        n_points: usize,
    ) -> Result<Self> {
        // f_k = conj(c_k / g_k)
        let drive = c
            .positive()
            .iter()
            .enumerate()
            .map(|(i, ck)| (ck / sawtooth_harmonic(i as i64 + 1)).conj())
            .collect();
        let spec = DrivenSpec1D { mass: 1.0, v0, omega, drive, profile, l_z: 2.0 * PI, n_points };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) || !(self.omega > 0.0) || !(self.l_z > 0.0) {
            return Err(Error::param("mass, omega and L_z must be positive"));
        }
        if !self.v0.is_finite() {
            return Err(Error::param("V0 must be finite"));
        }
        if self.drive.is_empty() {
            return Err(Error::param("drive needs at least one harmonic"));
        }
        if self.n_points <= 4 * self.drive.len() {
            return Err(Error::Sampling {
                points: self.n_points,
                k_cut: self.drive.len(),
                required: 4 * self.drive.len(),
            });
        }
        if let SpatialProfile::Truncated { n_max } = self.profile {
            if n_max < self.drive.len() || self.n_points <= 2 * n_max {
                return Err(Error::param(format!(
                    "truncated profile with n_max = {n_max} must cover the {} drive harmonics and be resolved by the grid",
                    self.drive.len()
                )));
            }
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega
    }

    /// Largest admissible step `2π / (20 k_max ω)`.
    pub fn dt_limit(&self) -> f64 {
        2.0 * PI / (20.0 * self.drive.len() as f64 * self.omega)
    }

    /// `f_1(t)`.
    pub fn drive_at(&self, t: f64) -> f64 {
        self.drive
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let (s, c) = ((i + 1) as f64 * self.omega * t).sin_cos();
                2.0 * (f.re * c - f.im * s)
            })
            .sum()
    }

    /// `c_k = g_k f_{-k}` for `k = 1..=k_max`.
    pub fn effective_coeffs(&self) -> Vec<Complex64> {
        self.drive.iter().enumerate().map(|(i, f)| sawtooth_harmonic(i as i64 + 1) * f.conj()).collect()
    }

    /// `⟨p⟩ = ω m L_z / 2π`.
    pub fn resonant_momentum(&self) -> f64 {
        self.omega * self.mass * self.l_z / (2.0 * PI)
    }

    pub fn spacing(&self) -> f64 {
        self.l_z / self.n_points as f64
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| i as f64 * self.spacing()).collect()
    }

    /// `g(2π z/L_z)` on the grid.
    pub fn profile_grid(&self) -> Vec<f64> {
        self.positions().iter().map(|z| self.profile.eval(2.0 * PI * z / self.l_z)).collect()
    }

    /// `V0 Σ_k c_k e^{ik 2π z/L_z}` on the grid.
    pub fn effective_potential(&self) -> Vec<f64> {
        let c = self.effective_coeffs();
        self.positions()
            .iter()
            .map(|z| {
                let x = 2.0 * PI * z / self.l_z;
                let s: f64 = c
                    .iter()
                    .enumerate()
                    .map(|(i, ck)| {
                        let (sn, cs) = ((i + 1) as f64 * x).sin_cos();
                        ck.re * cs - ck.im * sn
                    })
                    .sum();
                2.0 * self.v0 * s
            })
            .collect()
    }

    /// Integer number of `2π/L_z` in the resonant momentum, if it is one.
    fn resonant_quantum(&self) -> Option<i64> {
        let q = self.resonant_momentum() * self.l_z / (2.0 * PI);
        let r = q.round();
        ((q - r).abs() < 1e-9 * q.abs().max(1.0)).then_some(r as i64)
    }
}

/// Recoil energy `ħ² k_L² / 2m` of a lattice whose period is `L_z = λ/2`.
pub fn recoil_energy(l_z: f64, mass: f64) -> f64 {
    let k_l = PI / l_z;
    k_l * k_l / (2.0 * mass)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wavepacket1D {
    pub l_z: f64,
    pub time: f64,
    /// Amplitudes with `Σ |ψ|² Δz = 1`.
    pub psi: Vec<Complex64>,
}

impl Wavepacket1D {
    pub fn spacing(&self) -> f64 {
        self.l_z / self.psi.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.psi.iter().map(|c| c.norm_sqr()).sum::<f64>() * self.spacing()
    }

    pub fn density(&self) -> Vec<f64> {
        self.psi.iter().map(|c| c.norm_sqr()).collect()
    }

    /// `Σ conj(a) b Δz`.
    pub fn overlap(&self, other: &Wavepacket1D) -> Complex64 {
        self.psi.iter().zip(&other.psi).map(|(a, b)| a.conj() * b).sum::<Complex64>() * self.spacing()
    }

    /// Mean momentum from the discrete Fourier spectrum.
    pub fn mean_momentum(&self) -> f64 {
        let n = self.psi.len();
        let mut buf = self.psi.clone();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let total: f64 = buf.iter().map(|c| c.norm_sqr()).sum();
        buf.iter().enumerate().map(|(j, c)| momentum(j, n, self.l_z) * c.norm_sqr()).sum::<f64>() / total
    }

    /// `⟨p²/2m + U⟩` with the kinetic term evaluated spectrally.
    pub fn energy(&self, potential: &[f64], mass: f64) -> f64 {
        let n = self.psi.len();
        let mut buf = self.psi.clone();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let total: f64 = buf.iter().map(|c| c.norm_sqr()).sum();
        let kin = buf
            .iter()
            .enumerate()
            .map(|(j, c)| momentum(j, n, self.l_z).powi(2) / (2.0 * mass) * c.norm_sqr())
            .sum::<f64>()
            / total;
        let pot = self.psi.iter().zip(potential).map(|(a, u)| a.norm_sqr() * u).sum::<f64>()
            / self.psi.iter().map(|a| a.norm_sqr()).sum::<f64>();
        kin + pot
    }

    /// Circular mean position.
    pub fn center(&self) -> f64 {
        let dz = self.spacing();
        let (mut s, mut c) = (0.0, 0.0);
        for (i, a) in self.psi.iter().enumerate() {
            let th = 2.0 * PI * i as f64 * dz / self.l_z;
            s += a.norm_sqr() * th.sin();
            c += a.norm_sqr() * th.cos();
        }
        (s.atan2(c) * self.l_z / (2.0 * PI)).rem_euclid(self.l_z)
    }

    /// Variance of the position about the circular mean, minimal-image distances.
    pub fn variance(&self) -> f64 {
        let z0 = self.center();
        let dz = self.spacing();
        let total: f64 = self.psi.iter().map(|a| a.norm_sqr()).sum();
        self.psi
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut d = (i as f64 * dz - z0).rem_euclid(self.l_z);
                if d > 0.5 * self.l_z {
                    d -= self.l_z;
                }
                d * d * a.norm_sqr()
            })
            .sum::<f64>()
            / total
    }
}

fn momentum(j: usize, n: usize, l_z: f64) -> f64 {
    let k = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
    2.0 * PI * k / l_z
}

/// `exp(-(z - z0)^2 / 4 s^2 + i p z)`, normalized; `s` is the RMS width of the density.
pub fn gaussian_packet(n: usize, l_z: f64, center: f64, width: f64, p: f64) -> Result<Wavepacket1D> {
    if !(width > 0.0) || width > l_z / 8.0 {
        return Err(Error::param(format!("packet width {width} must be positive and well below L_z/8")));
    }
    let dz = l_z / n as f64;
    let mut psi: Vec<Complex64> = (0..n)
        .map(|i| {
            let z = i as f64 * dz;
            let mut d = (z - center).rem_euclid(l_z);
            if d > 0.5 * l_z {
                d -= l_z;
            }
            Complex64::from_polar((-d * d / (4.0 * width * width)).exp(), p * z)
        })
        .collect();
    let nrm = (psi.iter().map(|c| c.norm_sqr()).sum::<f64>() * dz).sqrt();
    psi.iter_mut().for_each(|c| *c /= nrm);
    Ok(Wavepacket1D { l_z, time: 0.0, psi })
}

/// Gaussian packet kicked to the resonant momentum `ω m L_z / 2π`.
pub fn resonant_initial_state(spec: &DrivenSpec1D, center: f64, width: f64) -> Result<Wavepacket1D> {
    gaussian_packet(spec.n_points, spec.l_z, center, width, spec.resonant_momentum())
}

/// Lab-frame state `e^{i⟨p⟩z} φ(z)` of a moving-frame state `φ`.
pub fn to_lab_frame(spec: &DrivenSpec1D, frame: &Wavepacket1D) -> Result<Wavepacket1D> {
    shift_momentum(spec, frame, 1.0)
}

fn shift_momentum(spec: &DrivenSpec1D, state: &Wavepacket1D, sign: f64) -> Result<Wavepacket1D> {
    if spec.resonant_quantum().is_none() {
        return Err(Error::param(format!(
            "resonant momentum {} is not a multiple of 2 pi / L_z; the frame shift is not periodic",
            spec.resonant_momentum()
        )));
    }
    if state.psi.len() != spec.n_points {
        return Err(Error::GridMismatch(format!("state has {} points, spec {}", state.psi.len(), spec.n_points)));
    }
    let p = spec.resonant_momentum();
    let dz = spec.spacing();
    let psi = state
        .psi
        .iter()
        .enumerate()
        .map(|(i, a)| a * Complex64::from_polar(1.0, sign * p * i as f64 * dz))
        .collect();
    Ok(Wavepacket1D { l_z: state.l_z, time: state.time, psi })
}

/// Split-step propagator for `p^2/2m + s(t) U(z)`.
struct SplitStep {
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    kinetic: Vec<Complex64>,
    profile: Vec<f64>,
    scratch: Vec<Complex64>,
    dt: f64,
}

impl SplitStep {
    fn new(n: usize, l_z: f64, mass: f64, dt: f64, profile: Vec<f64>) -> Self {
        let mut planner = FftPlanner::new();
        let kinetic = (0..n)
            .map(|j| {
                let p = momentum(j, n, l_z);
                Complex64::from_polar(1.0 / n as f64, -p * p / (2.0 * mass) * dt)
            })
            .collect();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        let scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len().max(ifft.get_inplace_scratch_len())];
        SplitStep { fft, ifft, kinetic, profile, scratch, dt }
    }

    fn step(&mut self, psi: &mut [Complex64], strength: f64) {
        let half = 0.5 * self.dt * strength;
        for (a, u) in psi.iter_mut().zip(&self.profile) {
            *a *= Complex64::from_polar(1.0, -half * u);
        }
        self.fft.process_with_scratch(psi, &mut self.scratch);
        for (a, k) in psi.iter_mut().zip(&self.kinetic) {
            *a *= k;
        }
        self.ifft.process_with_scratch(psi, &mut self.scratch);
        for (a, u) in psi.iter_mut().zip(&self.profile) {
            *a *= Complex64::from_polar(1.0, -half * u);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub steps_per_period: usize,
    /// States at `t_n = n 2π/ω`.
    pub snapshots: Vec<Wavepacket1D>,
    pub max_norm_drift: f64,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.variance()).collect()
    }
}

fn steps_for(spec: &DrivenSpec1D, dt: f64) -> Result<(usize, f64)> {
    let limit = spec.dt_limit();
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(Error::TimeStep { dt, limit });
    }
    // an integer number of steps per period
    let steps = (spec.period() / dt - 1e-9).ceil().max(1.0) as usize;
    Ok((steps, spec.period() / steps as f64))
}

fn check_norm(state: &Wavepacket1D, worst: &mut f64) -> Result<()> {
    let drift = (state.norm() - 1.0).abs();
    *worst = worst.max(drift);
    if drift > 1e-6 {
        return Err(Error::NormDrift { drift, time: state.time });
    }
    Ok(())
}

/// Full lab-frame propagation over `periods` drive periods.
///
/// `dt` is an upper bound; the step used divides the period exactly.
pub fn propagate(spec: &DrivenSpec1D, psi0: &Wavepacket1D, dt: f64, periods: usize) -> Result<Trajectory> {
    spec.validate()?;
    if psi0.psi.len() != spec.n_points {
        return Err(Error::GridMismatch(format!("state has {} points, spec {}", psi0.psi.len(), spec.n_points)));
    }
    let (steps, h) = steps_for(spec, dt)?;
    let mut stepper = SplitStep::new(spec.n_points, spec.l_z, spec.mass, h, spec.profile_grid());
    let mut state = psi0.clone();
    let mut worst = 0.0;
    check_norm(&state, &mut worst)?;
    let mut snapshots = vec![state.clone()];
    for n in 0..periods {
        let t0 = n as f64 * spec.period();
        for s in 0..steps {
            let tm = t0 + (s as f64 + 0.5) * h;
            stepper.step(&mut state.psi, spec.v0 * spec.drive_at(tm));
        }
        state.time = (n + 1) as f64 * spec.period();
        check_norm(&state, &mut worst)?;
        snapshots.push(state.clone());
    }
    Ok(Trajectory { dt: h, steps_per_period: steps, snapshots, max_norm_drift: worst })
}

/// Evolution under a static potential, sampled at the given stroboscopic times.
pub fn propagate_static(
    n: usize,
    l_z: f64,
    mass: f64,
    potential: &[f64],
    psi0: &Wavepacket1D,
    dt: f64,
    period: f64,
    periods: usize,
) -> Result<Vec<Wavepacket1D>> {
    if potential.len() != n || psi0.psi.len() != n {
        return Err(Error::GridMismatch("potential, state and grid sizes differ".into()));
    }
    let steps = (period / dt - 1e-9).ceil().max(1.0) as usize;
    let h = period / steps as f64;
    let mut stepper = SplitStep::new(n, l_z, mass, h, potential.to_vec());
    let mut state = psi0.clone();
    let mut out = vec![state.clone()];
    let mut worst = 0.0;
    for k in 0..periods {
        for _ in 0..steps {
            stepper.step(&mut state.psi, 1.0);
        }
        state.time = (k + 1) as f64 * period;
        check_norm(&state, &mut worst)?;
        out.push(state.clone());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelitySeries {
    pub omega: f64,
    pub times: Vec<f64>,
    pub fidelity: Vec<f64>,
    /// Moving-frame position variance of the full and effective evolutions.
    pub variance_full: Vec<f64>,
    pub variance_eff: Vec<f64>,
}

impl FidelitySeries {
    pub fn min(&self) -> f64 {
        self.fidelity.iter().copied().fold(1.0, f64::min)
    }

    pub fn last(&self) -> f64 {
        *self.fidelity.last().unwrap_or(&1.0)
    }
}

/// Compares a lab trajectory with the effective evolution of its first
/// snapshot in the moving frame, at every stroboscopic time.
pub fn effective_compare(trajectory: &Trajectory, spec: &DrivenSpec1D) -> Result<FidelitySeries> {
    let first = trajectory.snapshots.first().ok_or_else(|| Error::param("empty trajectory"))?;
    if first.psi.len() != spec.n_points {
        return Err(Error::GridMismatch(format!("trajectory has {} points, spec {}", first.psi.len(), spec.n_points)));
    }
    let frame0 = shift_momentum(spec, first, -1.0)?;
    let eff = propagate_static(
        spec.n_points,
        spec.l_z,
        spec.mass,
        &spec.effective_potential(),
        &frame0,
        trajectory.dt,
        spec.period(),
        trajectory.snapshots.len() - 1,
    )?;
    let mut fidelity = Vec::new();
    let mut variance_full = Vec::new();
    let mut variance_eff = Vec::new();
    for (full, e) in trajectory.snapshots.iter().zip(&eff) {
        // after whole periods the frame translation is the identity
        let lab = to_lab_frame(spec, e)?;
        fidelity.push(lab.overlap(full).norm_sqr());
        variance_full.push(full.variance());
        variance_eff.push(e.variance());
    }
    Ok(FidelitySeries { omega: spec.omega, times: trajectory.times(), fidelity, variance_full, variance_eff })
}

/// Lowest eigenstate of the effective Hamiltonian on the grid (dense).
pub fn effective_ground_state(spec: &DrivenSpec1D) -> Result<(f64, Wavepacket1D)> {
    use nalgebra::{DMatrix, SymmetricEigen};
    let n = spec.n_points;
    let dz = spec.spacing();
    let v = spec.effective_potential();
    // spectral kinetic energy in the position basis
    let mut t_row = vec![0.0; n];
    for (d, slot) in t_row.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..n {
            let p = momentum(j, n, spec.l_z);
            acc += p * p / (2.0 * spec.mass) * (2.0 * PI * (j * d) as f64 / n as f64).cos();
        }
        *slot = acc / n as f64;
    }
    let h = DMatrix::from_fn(n, n, |i, j| t_row[(i + n - j) % n] + if i == j { v[i] } else { 0.0 });
    let eig = SymmetricEigen::new(h);
    let (k, e0) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, e)| (k, *e))
        .ok_or_else(|| Error::param("empty grid"))?;
    let col = eig.eigenvectors.column(k);
    let s = 1.0 / dz.sqrt();
    let psi = col.iter().map(|a| Complex64::new(a * s, 0.0)).collect();
    Ok((e0, Wavepacket1D { l_z: spec.l_z, time: 0.0, psi }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecularTerm {
    pub n: [i64; 3],
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecularReport {
    pub v0: f64,
    pub omega: [f64; 3],
    pub k0: f64,
    pub bound: i64,
    pub max_term: f64,
    pub argmax: [i64; 3],
    /// `ω1 > 2 k0 (ω2 + ω3)`.
    pub condition: bool,
    pub margin: f64,
    /// Largest terms, sorted by decreasing magnitude.
    pub worst: Vec<SecularTerm>,
}

/// Exhaustive scan of `V0² / (n·ω)² exp(-|n|²/4k0²)` over integer vectors
/// with non-zero components on every driven axis and `|n_i| <= ceil(4 k0)`.
pub fn secular_check(v0: f64, omega: [f64; 3], k0: f64) -> Result<SecularReport> {
    if !(omega[0] > 0.0) || omega.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::param("omega_1 must be positive and omega_2, omega_3 non-negative"));
    }
    if !(k0 > 0.0) {
        return Err(Error::param("k0 must be positive"));
    }
    let bound = (4.0 * k0).ceil() as i64;
    let range = |w: f64| -> Vec<i64> {
        if w > 0.0 {
            (-bound..=bound).filter(|&n| n != 0).collect()
        } else {
            vec![0]
        }
    };
    let (r1, r2, r3) = (range(omega[0]), range(omega[1]), range(omega[2]));
    let keep = 8;
    let mut worst: Vec<SecularTerm> = Vec::new();
    let mut max_term = 0.0;
    let mut argmax = [0i64; 3];
    for &a in &r1 {
        for &b in &r2 {
            for &c in &r3 {
                let den = a as f64 * omega[0] + b as f64 * omega[1] + c as f64 * omega[2];
                let env = (-((a * a + b * b + c * c) as f64) / (4.0 * k0 * k0)).exp();
                let term = if den == 0.0 { f64::INFINITY } else { v0 * v0 / (den * den) * env };
                let n = [a, b, c];
                if term > max_term || (term == max_term && n < argmax) {
                    max_term = term;
                    argmax = n;
                }
                if worst.len() < keep || term > worst[worst.len() - 1].magnitude {
                    worst.push(SecularTerm { n, magnitude: term });
                    worst.sort_by(|x, y| y.magnitude.total_cmp(&x.magnitude).then(x.n.cmp(&y.n)));
                    worst.truncate(keep);
                }
            }
        }
    }
    let margin = omega[0] - 2.0 * k0 * (omega[1] + omega[2]);
    Ok(SecularReport { v0, omega, k0, bound, max_term, argmax, condition: margin > 0.0, margin, worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disorder::sawtooth_coeffs;

    fn spec(v0: f64, omega: f64, profile: SpatialProfile) -> DrivenSpec1D {
        DrivenSpec1D::from_effective(&sawtooth_coeffs(11, 0), v0, omega, profile, 256).unwrap()
    }

    #[test]
    fn harmonics_reproduce_the_sawtooth() {
        let t = SpatialProfile::Truncated { n_max: 400 };
        for x in [-2.5, -1.0, 0.3, 2.0] {
            assert!((t.eval(x) - SpatialProfile::SawtoothExact.eval(x)).abs() < 5e-3, "{x}");
        }
        assert_eq!(SpatialProfile::SawtoothExact.eval(PI), -1.0);
    }

    #[test]
    fn effective_coefficients_round_trip() {
        let c = sawtooth_coeffs(11, 0);
        let s = spec(1.0, 10.0, SpatialProfile::SawtoothExact);
        for (a, b) in s.effective_coeffs().iter().zip(c.positive()) {
            assert!((a - b).norm() < 1e-14);
        }
        // the drive is real and averages to zero over a period
        let mean: f64 = (0..1000).map(|i| s.drive_at(i as f64 * s.period() / 1000.0)).sum::<f64>() / 1000.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn free_packet_spreads_as_expected() {
        let s = spec(0.0, 100.0, SpatialProfile::SawtoothExact);
        let w = 0.2;
        let p0 = gaussian_packet(s.n_points, s.l_z, PI, w, 0.0).unwrap();
        let traj = propagate(&s, &p0, s.dt_limit(), 1).unwrap();
        let t = traj.snapshots[1].time;
        let want = w * w + t * t / (4.0 * w * w);
        assert!((traj.snapshots[1].variance() - want).abs() < 1e-6, "{} vs {want}", traj.snapshots[1].variance());
    }

    #[test]
    fn kick_sets_the_mean_momentum() {
        let s = spec(1.0, 12.0, SpatialProfile::SawtoothExact);
        let p = resonant_initial_state(&s, 1.0, 0.3).unwrap();
        assert!((p.mean_momentum() - 12.0).abs() < 1e-6);
        assert!((p.norm() - 1.0).abs() < 1e-12);
        let q = gaussian_packet(s.n_points, s.l_z, 1.0, 0.3, 0.0).unwrap();
        assert!(q.mean_momentum().abs() < 1e-10);
    }

    #[test]
    fn oversized_step_is_refused() {
        let s = spec(1.0, 10.0, SpatialProfile::SawtoothExact);
        let p = resonant_initial_state(&s, 1.0, 0.3).unwrap();
        assert!(matches!(propagate(&s, &p, 2.0 * s.dt_limit(), 1), Err(Error::TimeStep { .. })));
    }

    #[test]
    fn secular_terms() {
        let r = secular_check(40.0, [400.0, 0.0, 0.0], 3.0).unwrap();
        let want = 1600.0 / 160000.0 * (-1.0f64 / 36.0).exp();
        assert!((r.max_term - want).abs() < 1e-15);
        assert_eq!(r.argmax[0].abs(), 1);
        assert!(r.condition);
        let k0 = 2.0;
        let edge = secular_check(1.0, [2.001 * k0 * 3.0, 1.0, 2.0], k0).unwrap();
        assert!(edge.condition);
        let small = secular_check(1e-3, [2.001 * k0 * 3.0, 1.0, 2.0], k0).unwrap();
        assert!((small.max_term / edge.max_term - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn static_potential_conserves_energy() {
        let s = spec(3.0, 10.0, SpatialProfile::Truncated { n_max: 3 });
        let u: Vec<f64> = s.profile_grid().iter().map(|g| s.v0 * g).collect();
        let p0 = gaussian_packet(s.n_points, s.l_z, 2.0, 0.4, 1.0).unwrap();
        let e0 = p0.energy(&u, 1.0);
        let out = propagate_static(s.n_points, s.l_z, 1.0, &u, &p0, 1e-4, 0.1, 1).unwrap();
        assert!((out[1].energy(&u, 1.0) - e0).abs() < 1e-8 * e0.abs().max(1.0));
        assert!((out[1].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn halving_the_step_converges_quadratically() {
        let s = spec(4.0, 10.0, SpatialProfile::Truncated { n_max: 20 });
        let p0 = resonant_initial_state(&s, 2.0, 0.3).unwrap();
        let run = |f: f64| propagate(&s, &p0, s.dt_limit() * f, 2).unwrap().snapshots[2].density();
        let (a, b, c) = (run(0.2), run(0.1), run(0.05));
        let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        let ratio = dist(&a, &b) / dist(&b, &c);
        assert!((3.0..5.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn undriven_fidelity_is_one() {
        let s = spec(0.0, 10.0, SpatialProfile::SawtoothExact);
        let p0 = resonant_initial_state(&s, 2.0, 0.3).unwrap();
        let f = effective_compare(&propagate(&s, &p0, s.dt_limit(), 5).unwrap(), &s).unwrap();
        assert!(f.fidelity.iter().all(|x| (x - 1.0).abs() < 1e-10));
    }

    #[test]
    fn non_integer_resonance_is_rejected() {
        let s = spec(1.0, 10.5, SpatialProfile::SawtoothExact);
        let p0 = resonant_initial_state(&s, 2.0, 0.3).unwrap();
        let tr = propagate(&s, &p0, s.dt_limit(), 1).unwrap();
        assert!(effective_compare(&tr, &s).is_err());
    }
}
