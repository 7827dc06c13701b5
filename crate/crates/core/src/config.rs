//! Run configuration.
//!
//! Grammar: `[section]` headers followed by `key = value` lines; `#` or `;`
//! start a comment line. Values are numbers, words, or lists. A list is
//! either comma-separated (`8, 12, 16`) or `linspace: start, stop, count`
//! with both ends included. Every key is optional, unknown sections and keys
//! are errors.
//!
//! ```text
//! [run]
//! seed = 7
//! [disorder]
//! sigma = 0.1
//! v0_over_esigma = 1
//! [tmm]
//! energies_over_esigma = linspace: -0.1, 0.15, 11
//! ms = 8, 12, 16
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use ini::Ini;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::disorder::{DisorderSpec, Normalization};
use crate::driven1d::SpatialProfile;
use crate::error::{Error, Result};
use crate::lattice::Boundary;
use crate::tmm::{Frame, PotentialMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// `None` uses every core unless `TAND_WORKERS` is set.
    pub workers: Option<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 1, output_dir: PathBuf::from("out"), workers: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisorderSection {
    pub sigma: f64,
    pub v0_over_esigma: f64,
    pub dims: usize,
    pub k_cut: Option<usize>,
    pub normalization: Normalization,
    /// Realizations drawn by `gen`.
    pub realizations: usize,
    /// Lags of the correlation estimate, in units of `sigma`.
    pub lags: Vec<f64>,
    pub samples: usize,
}

impl Default for DisorderSection {
    fn default() -> Self {
        DisorderSection {
            sigma: 0.1,
            v0_over_esigma: 1.0,
            dims: 3,
            k_cut: None,
            normalization: Normalization::UnitVarianceH,
            realizations: 100,
            lags: linspace(0.0, 3.0, 20),
            samples: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSection {
    /// Points per axis of the `[0, 2π)^3` torus.
    pub n: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { n: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TmmSection {
    pub energies_over_esigma: Vec<f64>,
    pub ms: Vec<usize>,
    pub realizations: usize,
    /// Slice spacing in units of `sigma`; default `min(σ/2, π/k_cut)`.
    pub spacing_over_sigma: Option<f64>,
    pub max_length: usize,
    pub min_length: usize,
    pub target_rel_err: Option<f64>,
    pub qr_period: usize,
    pub warmup: usize,
    pub frame: Frame,
    pub mode: PotentialMode,
    pub transverse: Boundary,
}

impl Default for TmmSection {
    fn default() -> Self {
        TmmSection {
            energies_over_esigma: linspace(-0.1, 0.15, 11),
            ms: vec![8, 12, 16],
            realizations: 1,
            spacing_over_sigma: None,
            max_length: 20000,
            min_length: 2000,
            target_rel_err: Some(0.025),
            qr_period: 8,
            warmup: 256,
            frame: Frame::Half,
            mode: PotentialMode::Factorized,
            transverse: Boundary::Periodic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FssSection {
    pub n_u: usize,
    pub n_f: usize,
    /// `(lo, hi)` in units of `E_sigma`.
    pub window: Option<(f64, f64)>,
    pub bootstrap: usize,
    pub nu_starts: Vec<f64>,
}

impl Default for FssSection {
    fn default() -> Self {
        FssSection { n_u: 2, n_f: 3, window: None, bootstrap: 200, nu_starts: vec![0.7, 1.0, 1.4, 1.8, 2.4, 3.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralSection {
    pub target_over_esigma: f64,
    pub count: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub realization: u64,
    /// Drive frequency used by `trace`.
    pub omega: f64,
    pub trace_points: usize,
    /// Position of the detector on the traced axis, as an angle.
    pub theta_star: Option<f64>,
}

impl Default for SpectralSection {
    fn default() -> Self {
        SpectralSection {
            target_over_esigma: -0.05,
            count: 4,
            tol: 1e-8,
            max_iter: 40,
            realization: 0,
            omega: 1.0,
            trace_points: 512,
            theta_star: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Driven1dSection {
    pub v0: f64,
    /// Must be integers for the moving-frame comparison on `L_z = 2π`.
    pub omegas: Vec<f64>,
    pub n_points: usize,
    pub periods: usize,
    /// Step as a fraction of the admissible maximum.
    pub dt_fraction: f64,
    pub profile: SpatialProfile,
    pub realization: u64,
    /// Gaussian width of the initial packet; `None` starts from the
    /// ground state of the effective Hamiltonian.
    pub packet_width: Option<f64>,
    pub secular_v0: f64,
    pub secular_omegas: Vec<f64>,
    pub secular_k0: f64,
}

impl Default for Driven1dSection {
    fn default() -> Self {
        Driven1dSection {
            v0: 4.0,
            omegas: vec![20.0, 40.0, 80.0, 160.0],
            n_points: 512,
            periods: 50,
            dt_fraction: 0.25,
            profile: SpatialProfile::SawtoothExact,
            realization: 0,
            packet_width: None,
            secular_v0: 40.0,
            secular_omegas: vec![400.0, 0.0, 0.0],
            secular_k0: 3.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run: RunSection,
    pub disorder: DisorderSection,
    pub grid: GridSection,
    pub tmm: TmmSection,
    pub fss: FssSection,
    pub spectral: SpectralSection,
    pub driven1d: Driven1dSection,
}

/// `n` evenly spaced values, both ends included.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

struct Section {
    name: &'static str,
    values: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl Section {
    fn err(&self, key: &str, message: impl Into<String>) -> Error {
        Error::Config { location: format!("[{}] {key}", self.name), message: message.into() }
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.values.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, text: &str) -> Result<T> {
        text.trim().parse::<T>().map_err(|_| self.err(key, format!("cannot parse {text:?}")))
    }

    fn set<T: std::str::FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.raw(key) {
            *slot = self.parse(key, &v)?;
        }
        Ok(())
    }

    fn set_opt<T: std::str::FromStr>(&mut self, key: &str, slot: &mut Option<T>) -> Result<()> {
        if let Some(v) = self.raw(key) {
            *slot = if v.trim() == "none" { None } else { Some(self.parse(key, &v)?) };
        }
        Ok(())
    }

    fn float(&mut self, key: &str, slot: &mut f64) -> Result<()> {
        if let Some(v) = self.raw(key) {
            let x: f64 = self.parse(key, &v)?;
            if !x.is_finite() {
                return Err(self.err(key, "must be finite"));
            }
            *slot = x;
        }
        Ok(())
    }

    fn list(&mut self, key: &str, text: &str) -> Result<Vec<f64>> {
        let t = text.trim();
        if let Some(rest) = t.strip_prefix("linspace:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 3 {
                return Err(self.err(key, "linspace needs start, stop, count"));
            }
            let a: f64 = self.parse(key, parts[0])?;
            let b: f64 = self.parse(key, parts[1])?;
            let n: usize = self.parse(key, parts[2])?;
            return Ok(linspace(a, b, n));
        }
        t.split(',').map(|p| self.parse::<f64>(key, p)).collect()
    }

    fn floats(&mut self, key: &str, slot: &mut Vec<f64>) -> Result<()> {
        if let Some(v) = self.raw(key) {
            let xs = self.list(key, &v)?;
            if xs.is_empty() || xs.iter().any(|x| !x.is_finite()) {
                return Err(self.err(key, "needs at least one finite value"));
            }
            *slot = xs;
        }
        Ok(())
    }

    fn word<T>(&mut self, key: &str, slot: &mut T, options: &[(&str, T)]) -> Result<()>
    where
        T: Copy,
    {
        if let Some(v) = self.raw(key) {
            let v = v.trim();
            match options.iter().find(|(name, _)| *name == v) {
                Some((_, val)) => *slot = *val,
                None => {
                    let names: Vec<&str> = options.iter().map(|o| o.0).collect();
                    return Err(self.err(key, format!("expected one of {}, got {v:?}", names.join(", "))));
                }
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some(k) = self.values.keys().find(|k| !self.used.contains(*k)) {
            return Err(self.err(k, "unknown key"));
        }
        Ok(())
    }
}

const SECTIONS: [&str; 7] = ["run", "disorder", "grid", "tmm", "fss", "spectral", "driven1d"];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text)
            .map_err(|e| Error::Config { location: format!("line {}", e.line), message: e.msg.to_string() })?;
        let mut found: BTreeMap<&'static str, BTreeMap<String, String>> = BTreeMap::new();
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::Config { location: k.to_string(), message: "key outside any section".into() });
                }
                continue;
            };
            let name = SECTIONS.iter().copied().find(|s| *s == name).ok_or_else(|| Error::Config {
                location: format!("[{name}]"),
                message: "unknown section".into(),
            })?;
            let map = found.entry(name).or_default();
            for (k, v) in props.iter() {
                if map.insert(k.to_string(), v.to_string()).is_some() {
                    return Err(Error::Config { location: format!("[{name}] {k}"), message: "duplicate key".into() });
                }
            }
        }
        let mut take = |name: &'static str| Section {
            name,
            values: found.remove(name).unwrap_or_default(),
            used: BTreeSet::new(),
        };
        let mut c = RunConfig::default();

        let mut s = take("run");
        s.set("seed", &mut c.run.seed)?;
        if let Some(v) = s.raw("output_dir") {
            c.run.output_dir = PathBuf::from(v.trim());
        }
        s.set_opt("workers", &mut c.run.workers)?;
        s.finish()?;

        let mut s = take("disorder");
        let d = &mut c.disorder;
        s.float("sigma", &mut d.sigma)?;
        s.float("v0_over_esigma", &mut d.v0_over_esigma)?;
        s.set("dims", &mut d.dims)?;
        s.set_opt("k_cut", &mut d.k_cut)?;
        s.word(
            "normalization",
            &mut d.normalization,
            &[("unit-variance-h", Normalization::UnitVarianceH), ("scaled-factors", Normalization::ScaledFactors)],
        )?;
        s.set("realizations", &mut d.realizations)?;
        s.floats("lags", &mut d.lags)?;
        s.set("samples", &mut d.samples)?;
        s.finish()?;

        let mut s = take("grid");
        s.set("n", &mut c.grid.n)?;
        s.finish()?;

        let mut s = take("tmm");
        let t = &mut c.tmm;
        s.floats("energies_over_esigma", &mut t.energies_over_esigma)?;
        if let Some(v) = s.raw("ms") {
            t.ms = v
                .split(',')
                .map(|p| s.parse::<usize>("ms", p))
                .collect::<Result<Vec<usize>>>()?;
        }
        s.set("realizations", &mut t.realizations)?;
        s.set_opt("spacing_over_sigma", &mut t.spacing_over_sigma)?;
        s.set("max_length", &mut t.max_length)?;
        s.set("min_length", &mut t.min_length)?;
        s.set_opt("target_rel_err", &mut t.target_rel_err)?;
        s.set("qr_period", &mut t.qr_period)?;
        s.set("warmup", &mut t.warmup)?;
        s.word("frame", &mut t.frame, &[("half", Frame::Half), ("full", Frame::Full)])?;
        s.word(
            "mode",
            &mut t.mode,
            &[("factorized", PotentialMode::Factorized), ("isotropic-grf", PotentialMode::IsotropicGrf)],
        )?;
        s.word(
            "transverse",
            &mut t.transverse,
            &[("periodic", Boundary::Periodic), ("open", Boundary::Open)],
        )?;
        s.finish()?;

        let mut s = take("fss");
        let f = &mut c.fss;
        s.set("n_u", &mut f.n_u)?;
        s.set("n_f", &mut f.n_f)?;
        if let Some(v) = s.raw("window") {
            f.window = if v.trim() == "none" {
                None
            } else {
                let xs = s.list("window", &v)?;
                if xs.len() != 2 || !(xs[0] < xs[1]) {
                    return Err(s.err("window", "needs lo, hi with lo < hi"));
                }
                Some((xs[0], xs[1]))
            };
        }
        s.set("bootstrap", &mut f.bootstrap)?;
        s.floats("nu_starts", &mut f.nu_starts)?;
        s.finish()?;

        let mut s = take("spectral");
        let p = &mut c.spectral;
        s.float("target_over_esigma", &mut p.target_over_esigma)?;
        s.set("count", &mut p.count)?;
        s.float("tol", &mut p.tol)?;
        s.set("max_iter", &mut p.max_iter)?;
        s.set("realization", &mut p.realization)?;
        s.float("omega", &mut p.omega)?;
        s.set("trace_points", &mut p.trace_points)?;
        s.set_opt("theta_star", &mut p.theta_star)?;
        s.finish()?;

        let mut s = take("driven1d");
        let g = &mut c.driven1d;
        s.float("v0", &mut g.v0)?;
        s.floats("omegas", &mut g.omegas)?;
        s.set("n_points", &mut g.n_points)?;
        s.set("periods", &mut g.periods)?;
        s.float("dt_fraction", &mut g.dt_fraction)?;
        if let Some(v) = s.raw("profile") {
            g.profile = match v.trim() {
                "sawtooth-exact" => SpatialProfile::SawtoothExact,
                other => match other.strip_prefix("truncated:") {
                    Some(n) => SpatialProfile::Truncated { n_max: s.parse("profile", n)? },
                    None => return Err(s.err("profile", "expected sawtooth-exact or truncated: <n_max>")),
                },
            };
        }
        s.set("realization", &mut g.realization)?;
        s.set_opt("packet_width", &mut g.packet_width)?;
        s.float("secular_v0", &mut g.secular_v0)?;
        s.floats("secular_omegas", &mut g.secular_omegas)?;
        s.float("secular_k0", &mut g.secular_k0)?;
        s.finish()?;

        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config { location: path.display().to_string(), message: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |location: &str, message: &str| Error::Config { location: location.into(), message: message.into() };
        self.disorder_spec().map_err(|e| bad("[disorder]", &e.to_string()))?;
        if self.run.workers == Some(0) {
            return Err(bad("[run] workers", "must be at least 1"));
        }
        if self.tmm.ms.is_empty() || self.tmm.ms.contains(&0) {
            return Err(bad("[tmm] ms", "needs positive widths"));
        }
        if self.tmm.realizations == 0 || self.tmm.max_length == 0 || self.tmm.qr_period == 0 {
            return Err(bad("[tmm]", "realizations, max_length and qr_period must be positive"));
        }
        if self.grid.n < 4 {
            return Err(bad("[grid] n", "needs at least 4 points"));
        }
        if self.spectral.count == 0 || !(self.spectral.tol > 0.0) || !(self.spectral.omega > 0.0) {
            return Err(bad("[spectral]", "count, tol and omega must be positive"));
        }
        if self.spectral.trace_points < 2 {
            return Err(bad("[spectral] trace_points", "needs at least 2"));
        }
        let g = &self.driven1d;
        if g.omegas.iter().any(|w| !(*w > 0.0)) || !(g.dt_fraction > 0.0 && g.dt_fraction <= 1.0) {
            return Err(bad("[driven1d]", "omegas must be positive and dt_fraction in (0, 1]"));
        }
        if g.secular_omegas.len() != 3 {
            return Err(bad("[driven1d] secular_omegas", "needs three frequencies"));
        }
        Ok(())
    }

    pub fn disorder_spec(&self) -> Result<DisorderSpec> {
        let d = &self.disorder;
        let mut spec = DisorderSpec::from_sigma(d.sigma, d.v0_over_esigma, d.dims, self.run.seed)?
            .with_normalization(d.normalization);
        if let Some(k) = d.k_cut {
            spec = spec.with_k_cut(k)?;
        }
        Ok(spec)
    }

    /// Worker count: `TAND_WORKERS`, then the config, then all cores.
    pub fn workers(&self) -> usize {
        std::env::var("TAND_WORKERS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .or(self.run.workers)
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    }

    /// SHA-256 of everything that can change results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.workers = None;
        c.run.output_dir = PathBuf::new();
        let canonical = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Config text that parses back to `self`.
    pub fn to_ini(&self) -> String {
        fn list<T: std::fmt::Display>(xs: &[T]) -> String {
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
        }
        fn opt<T: std::fmt::Display>(x: &Option<T>) -> String {
            x.as_ref().map_or_else(|| "none".to_string(), |v| v.to_string())
        }
        let c = self;
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "[run]\nseed = {}\noutput_dir = {}\nworkers = {}", c.run.seed, c.run.output_dir.display(), opt(&c.run.workers));
        let d = &c.disorder;
        let norm = match d.normalization {
            Normalization::UnitVarianceH => "unit-variance-h",
            Normalization::ScaledFactors => "scaled-factors",
        };
        let _ = writeln!(
            w,
            "\n[disorder]\nsigma = {}\nv0_over_esigma = {}\ndims = {}\nk_cut = {}\nnormalization = {norm}\nrealizations = {}\nlags = {}\nsamples = {}",
            d.sigma,
            d.v0_over_esigma,
            d.dims,
            opt(&d.k_cut),
            d.realizations,
            list(&d.lags),
            d.samples
        );
        let _ = writeln!(w, "\n[grid]\nn = {}", c.grid.n);
        let t = &c.tmm;
        let frame = match t.frame {
            Frame::Half => "half",
            Frame::Full => "full",
        };
        let mode = match t.mode {
            PotentialMode::Factorized => "factorized",
            PotentialMode::IsotropicGrf => "isotropic-grf",
        };
        let transverse = match t.transverse {
            Boundary::Periodic => "periodic",
            Boundary::Open => "open",
        };
        let _ = writeln!(
            w,
            "\n[tmm]\nenergies_over_esigma = {}\nms = {}\nrealizations = {}\nspacing_over_sigma = {}\nmax_length = {}\nmin_length = {}\ntarget_rel_err = {}\nqr_period = {}\nwarmup = {}\nframe = {frame}\nmode = {mode}\ntransverse = {transverse}",
            list(&t.energies_over_esigma),
            list(&t.ms),
            t.realizations,
            opt(&t.spacing_over_sigma),
            t.max_length,
            t.min_length,
            opt(&t.target_rel_err),
            t.qr_period,
            t.warmup
        );
        let f = &c.fss;
        let window = f.window.map_or_else(|| "none".to_string(), |(a, b)| format!("{a}, {b}"));
        let _ = writeln!(
            w,
            "\n[fss]\nn_u = {}\nn_f = {}\nwindow = {window}\nbootstrap = {}\nnu_starts = {}",
            f.n_u,
            f.n_f,
            f.bootstrap,
            list(&f.nu_starts)
        );
        let p = &c.spectral;
        let _ = writeln!(
            w,
            "\n[spectral]\ntarget_over_esigma = {}\ncount = {}\ntol = {}\nmax_iter = {}\nrealization = {}\nomega = {}\ntrace_points = {}\ntheta_star = {}",
            p.target_over_esigma,
            p.count,
            p.tol,
            p.max_iter,
            p.realization,
            p.omega,
            p.trace_points,
            opt(&p.theta_star)
        );
        let g = &c.driven1d;
        let profile = match g.profile {
            SpatialProfile::SawtoothExact => "sawtooth-exact".to_string(),
            SpatialProfile::Truncated { n_max } => format!("truncated: {n_max}"),
        };
        let _ = writeln!(
            w,
            "\n[driven1d]\nv0 = {}\nomegas = {}\nn_points = {}\nperiods = {}\ndt_fraction = {}\nprofile = {profile}\nrealization = {}\npacket_width = {}\nsecular_v0 = {}\nsecular_omegas = {}\nsecular_k0 = {}",
            g.v0,
            list(&g.omegas),
            g.n_points,
            g.periods,
            g.dt_fraction,
            g.realization,
            opt(&g.packet_width),
            g.secular_v0,
            list(&g.secular_omegas),
            g.secular_k0
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_ini()).unwrap(), c);
    }

    #[test]
    fn lists_and_linspace() {
        let c = RunConfig::parse(
            "# scan\n[tmm]\nenergies_over_esigma = linspace: -0.1, 0.15, 11\nms = 4, 6\n[driven1d]\nprofile = truncated: 7\n",
        )
        .unwrap();
        assert_eq!(c.tmm.energies_over_esigma.len(), 11);
        assert!((c.tmm.energies_over_esigma[10] - 0.15).abs() < 1e-15);
        assert_eq!(c.tmm.ms, vec![4, 6]);
        assert_eq!(c.driven1d.profile, SpatialProfile::Truncated { n_max: 7 });
        assert_eq!(RunConfig::parse(&c.to_ini()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_sections_fail() {
        for text in ["[tmm]\nms = 4\nbogus = 1\n", "[nope]\na = 1\n", "seed = 3\n", "[run]\nseed = x\n"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config { .. })), "{text}");
        }
    }

    #[test]
    fn hash_ignores_workers_and_output() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.run.workers = Some(3);
        b.run.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.run.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
