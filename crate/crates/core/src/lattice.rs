//! Finite-difference discretization of `H_eff = P^2/2 + V_eff`.
//!
//! Each axis carries the 3-point Laplacian, so `-1/2 d^2/dx^2` contributes
//! `1/Δ^2` to the diagonal and `-1/(2Δ^2)` to each nearest neighbour.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::disorder::{DisorderSpec, Veff3};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    Periodic,
    Open,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: usize,
    /// Points per axis; unused axes have 1.
    pub n: [usize; 3],
    pub spacing: [f64; 3],
    pub boundary: [Boundary; 3],
}

impl Grid {
    pub fn new(dims: usize, n: [usize; 3], spacing: [f64; 3], boundary: [Boundary; 3]) -> Result<Self> {
        if dims != 1 && dims != 3 {
            return Err(Error::param(format!("dims must be 1 or 3, got {dims}")));
        }
        let mut n = n;
        let mut spacing = spacing;
        for a in 0..3 {
            if a >= dims {
                n[a] = 1;
                spacing[a] = 1.0;
            } else {
                if n[a] < 1 {
                    return Err(Error::param("grid needs at least one point per axis"));
                }
                if !(spacing[a] > 0.0) || !spacing[a].is_finite() {
                    return Err(Error::param(format!("spacing must be positive, got {}", spacing[a])));
                }
            }
        }
        Ok(Grid { dims, n, spacing, boundary })
    }

    /// `n` points per axis on `[0, 2 pi)`, periodic.
    pub fn torus(dims: usize, n: usize) -> Result<Self> {
        let d = 2.0 * PI / n as f64;
        Self::new(dims, [n; 3], [d; 3], [Boundary::Periodic; 3])
    }

    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing[..self.dims].iter().product()
    }

    /// Every disordered axis must resolve the Fourier cutoff.
    pub fn check_nyquist(&self, k_cut: usize) -> Result<()> {
        for a in 0..self.dims {
            if self.n[a] <= 2 * k_cut {
                return Err(Error::Sampling { points: self.n[a], k_cut, required: 2 * k_cut });
            }
        }
        Ok(())
    }
}

/// Default transfer-matrix spacing `min(sigma/2, pi/k_cut)`.
pub fn default_bar_spacing(spec: &DisorderSpec) -> f64 {
    (spec.sigma() / 2.0).min(PI / spec.k_cut as f64)
}

/// Matrix-free real symmetric operator.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// Interval guaranteed to contain the spectrum.
    fn spectral_bounds(&self) -> (f64, f64);
}

#[derive(Clone, Debug)]
pub struct DiscreteHamiltonian {
    pub grid: Grid,
    /// `V + sum_a 1/Δ_a^2` on every site, axis 0 slowest.
    pub onsite: Vec<f64>,
    /// `1/(2 Δ_a^2)`, zero for unused axes.
    pub hopping: [f64; 3],
}

pub fn build_hamiltonian(grid: &Grid, potential: &[f64]) -> Result<DiscreteHamiltonian> {
    if potential.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "potential has {} values, grid has {}",
            potential.len(),
            grid.len()
        )));
    }
    let mut hopping = [0.0; 3];
    let mut diag = 0.0;
    for a in 0..grid.dims {
        hopping[a] = 0.5 / (grid.spacing[a] * grid.spacing[a]);
        diag += 2.0 * hopping[a];
    }
    if let Some(bad) = potential.iter().find(|v| !v.is_finite()) {
        return Err(Error::param(format!("non-finite potential value {bad}")));
    }
    Ok(DiscreteHamiltonian {
        grid: grid.clone(),
        onsite: potential.iter().map(|v| v + diag).collect(),
        hopping,
    })
}

/// Hamiltonian on the torus grid with the factorized `V_eff`.
pub fn build_from_veff(grid: &Grid, veff: &Veff3) -> Result<DiscreteHamiltonian> {
    if grid.dims != 3 || veff.shape() != grid.n {
        return Err(Error::GridMismatch(format!(
            "field shape {:?} does not match grid {:?}",
            veff.shape(),
            grid.n
        )));
    }
    build_hamiltonian(grid, &veff.dense())
}

fn neighbour(i: usize, n: usize, up: bool, boundary: Boundary) -> Option<usize> {
    match (up, boundary) {
        (true, _) if i + 1 < n => Some(i + 1),
        (true, Boundary::Periodic) => Some(0),
        (false, _) if i > 0 => Some(i - 1),
        (false, Boundary::Periodic) => Some(n - 1),
        _ => None,
    }
}

impl DiscreteHamiltonian {
    /// Calls `f(offset, (Hx)[row])` for every contiguous row along the last axis.
    pub(crate) fn apply_rows<F: FnMut(usize, &[f64])>(&self, x: &[f64], buf: &mut Vec<f64>, mut f: F) {
        let [n0, n1, n2] = self.grid.n;
        let [t0, t1, t2] = self.hopping;
        let b = self.grid.boundary;
        for i in 0..n0 {
            let i_up = if n0 > 1 { neighbour(i, n0, true, b[0]) } else { None };
            let i_dn = if n0 > 1 { neighbour(i, n0, false, b[0]) } else { None };
            for j in 0..n1 {
                let j_up = if n1 > 1 { neighbour(j, n1, true, b[1]) } else { None };
                let j_dn = if n1 > 1 { neighbour(j, n1, false, b[1]) } else { None };
                let row = (i * n1 + j) * n2;
                buf.resize(n2, 0.0);
                let out = &mut buf[..];
                let xr = &x[row..row + n2];
                let d = &self.onsite[row..row + n2];
                for k in 0..n2 {
                    out[k] = d[k] * xr[k];
                }
                for (nb, t) in [
                    (i_up.map(|ii| (ii * n1 + j) * n2), t0),
                    (i_dn.map(|ii| (ii * n1 + j) * n2), t0),
                    (j_up.map(|jj| (i * n1 + jj) * n2), t1),
                    (j_dn.map(|jj| (i * n1 + jj) * n2), t1),
                ] {
                    if let Some(s) = nb {
                        let xn = &x[s..s + n2];
                        for k in 0..n2 {
                            out[k] -= t * xn[k];
                        }
                    }
                }
                if n2 > 1 {
                    for k in 1..n2 - 1 {
                        out[k] -= t2 * (xr[k - 1] + xr[k + 1]);
                    }
                    out[0] -= t2 * xr[1];
                    out[n2 - 1] -= t2 * xr[n2 - 2];
                    if b[2] == Boundary::Periodic {
                        out[0] -= t2 * xr[n2 - 1];
                        out[n2 - 1] -= t2 * xr[0];
                    }
                }
                f(row, out);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.onsite.len()
    }

    pub fn is_empty(&self) -> bool {
        self.onsite.is_empty()
    }

    /// Dense matrix (row-major); intended for small grids only.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            self.apply(&e, &mut col);
            for i in 0..n {
                out[i * n + j] = col[i];
            }
            e[j] = 0.0;
        }
        out
    }
}

impl LinearOperator for DiscreteHamiltonian {
    fn dim(&self) -> usize {
        self.onsite.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mut buf = Vec::new();
        self.apply_rows(x, &mut buf, |row, hx| y[row..row + hx.len()].copy_from_slice(hx));
    }

    fn spectral_bounds(&self) -> (f64, f64) {
        let width: f64 = self.hopping.iter().map(|t| 2.0 * t).sum();
        let (lo, hi) = self
            .onsite
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        (lo - width, hi + width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyUnit {
    Absolute,
    UnitsOfESigma,
}

/// Converts between absolute energies and units of `E_sigma = k0^2/2`.
pub fn energy_convert(value: f64, k0: f64, from: EnergyUnit, to: EnergyUnit) -> Result<f64> {
    if !(k0 > 0.0) {
        return Err(Error::param(format!("k0 must be positive, got {k0}")));
    }
    let e_sigma = k0 * k0 / 2.0;
    Ok(match (from, to) {
        (EnergyUnit::Absolute, EnergyUnit::UnitsOfESigma) => value / e_sigma,
        (EnergyUnit::UnitsOfESigma, EnergyUnit::Absolute) => value * e_sigma,
        _ => value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};

    fn dense_eigs(h: &DiscreteHamiltonian) -> Vec<f64> {
        let n = h.len();
        let m = DMatrix::from_row_slice(n, n, &h.to_dense());
        let mut e: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        e
    }

    #[test]
    fn four_site_ring() {
        let g = Grid::new(1, [4, 1, 1], [0.5, 1.0, 1.0], [Boundary::Periodic; 3]).unwrap();
        let h = build_hamiltonian(&g, &[0.0; 4]).unwrap();
        let inv = 1.0 / 0.25;
        let e = dense_eigs(&h);
        let want = [0.0, inv, inv, 2.0 * inv];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{e:?}");
        }
    }

    #[test]
    fn free_torus_dispersion() {
        let n = 6;
        let g = Grid::torus(3, n).unwrap();
        let h = build_hamiltonian(&g, &vec![0.0; g.len()]).unwrap();
        let d = g.spacing[0];
        let mut want = Vec::new();
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let s: f64 = [a, b, c]
                        .iter()
                        .map(|&m| 1.0 - (2.0 * PI * m as f64 / n as f64).cos())
                        .sum();
                    want.push(s / (d * d));
                }
            }
        }
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let e = dense_eigs(&h);
        assert!(e[0].abs() < 1e-10);
        for (a, b) in e.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
        let (lo, hi) = h.spectral_bounds();
        assert!(lo <= e[0] + 1e-12 && hi >= *e.last().unwrap() - 1e-12);
    }

    #[test]
    fn constant_vector_is_in_kernel() {
        let g = Grid::torus(3, 8).unwrap();
        let h = build_hamiltonian(&g, &vec![0.0; g.len()]).unwrap();
        let x = vec![1.0; g.len()];
        let mut y = vec![0.0; g.len()];
        h.apply(&x, &mut y);
        assert!(y.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn open_boundary_drops_wrap_terms() {
        let g = Grid::new(3, [3, 4, 5], [0.3, 0.4, 0.5], [Boundary::Open, Boundary::Periodic, Boundary::Open]).unwrap();
        let v: Vec<f64> = (0..g.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let h = build_hamiltonian(&g, &v).unwrap();
        let m = h.to_dense();
        let n = h.len();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(m[i * n + j], m[j * n + i]);
            }
        }
        // corner (0,0,0) to (2,0,0) and (0,0,4) are not coupled with open axes
        assert_eq!(m[2 * 20], 0.0);
        assert_eq!(m[4], 0.0);
        // axis 1 is periodic: (0,0,0) couples to (0,3,0)
        assert!(m[15] < 0.0);
    }

    #[test]
    fn mismatched_field_is_rejected() {
        let g = Grid::torus(1, 10).unwrap();
        assert!(matches!(build_hamiltonian(&g, &[0.0; 9]), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn energy_units() {
        let k0 = 10.0 * 2f64.sqrt();
        let es = energy_convert(1.0, k0, EnergyUnit::UnitsOfESigma, EnergyUnit::Absolute).unwrap();
        assert!((es - 100.0).abs() < 1e-12);
        let e = energy_convert(-0.05, k0, EnergyUnit::UnitsOfESigma, EnergyUnit::Absolute).unwrap();
        assert!((e + 5.0).abs() < 1e-12);
        let back = energy_convert(e, k0, EnergyUnit::Absolute, EnergyUnit::UnitsOfESigma).unwrap();
        assert!((back + 0.05).abs() < 1e-15);
        assert!(energy_convert(1.0, 0.0, EnergyUnit::Absolute, EnergyUnit::UnitsOfESigma).is_err());
    }
}
