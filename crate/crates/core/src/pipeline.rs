//! One function per CLI subcommand. Each reads a validated [`RunConfig`],
//! writes its files into the output directory and records them in the
//! manifest.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::disorder::{gaussianity_test, gen_coeffs, normalized_correlation, sawtooth_coeffs, CoeffRecord, DisorderSpec};
use crate::driven1d::{self, DrivenSpec1D};
use crate::error::{Error, Result};
use crate::fss::{self, FitOptions};
use crate::io::{self, DataKind, Header};
use crate::lattice::{build_from_veff, default_bar_spacing, Grid};
use crate::manifest::{self, JobStatus, RunManifest};
use crate::spectral::{self, EigenOptions, FitWindow};
use crate::tmm::{self, JobKey, LyapunovResult, ScanPlan, TmmOptions, TmmScan};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Gen,
    Tmm,
    Fss,
    Eig,
    Trace,
    Drive1d,
    CheckSecular,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Tmm => "tmm",
            Command::Fss => "fss",
            Command::Eig => "eig",
            Command::Trace => "trace",
            Command::Drive1d => "drive1d",
            Command::CheckSecular => "check-secular",
        }
    }
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct Flags {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub resume: bool,
}

impl Flags {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(s) = self.seed {
            config.run.seed = s;
        }
        if let Some(o) = &self.out {
            config.run.output_dir = o.clone();
        }
        if let Some(w) = self.workers {
            config.run.workers = Some(w);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    /// Files written, relative to the output directory.
    pub files: Vec<String>,
    pub new_jobs: usize,
    pub skipped_jobs: usize,
}

/// Exit status for an error: 1 for input problems, 2 for numerical failures.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}

struct Ctx<'a> {
    config: &'a RunConfig,
    dir: PathBuf,
    manifest: RunManifest,
    files: Vec<String>,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, name: &str) -> Result<()> {
        self.manifest.output(name)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        io::write_json(&self.path(name), value)?;
        self.record(name)
    }

    fn ndjson<T: Serialize>(&mut self, name: &str, records: &[T]) -> Result<()> {
        io::write_ndjson(&self.path(name), records)?;
        self.record(name)
    }

    fn csv(&mut self, name: &str, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        io::write_csv(&self.path(name), columns, rows)?;
        self.record(name)
    }
}

/// Runs one subcommand on a worker pool of the configured size.
///
/// On a numerical failure `diagnostic.json` is written before returning.
pub fn run(command: Command, config: &RunConfig, resume: bool) -> Result<Outcome> {
    config.validate()?;
    let workers = config.workers();
    let dir = config.run.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let hash = config.hash();
    let manifest = RunManifest::open(&dir, command.name(), &hash);
    manifest.start(workers)?;
    let mut ctx = Ctx { config, dir: dir.clone(), manifest, files: Vec::new() };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::param(format!("cannot start {workers} workers: {e}")))?;
    let result = pool.install(|| match command {
        Command::Gen => cmd_gen(&mut ctx),
        Command::Tmm => cmd_tmm(&mut ctx, resume),
        Command::Fss => cmd_fss(&mut ctx),
        Command::Eig => cmd_eig(&mut ctx),
        Command::Trace => cmd_trace(&mut ctx),
        Command::Drive1d => cmd_drive1d(&mut ctx),
        Command::CheckSecular => cmd_check_secular(&mut ctx),
    });
    match result {
        Ok((new_jobs, skipped_jobs)) => {
            ctx.manifest.finish("ok", new_jobs)?;
            Ok(Outcome { files: ctx.files, new_jobs, skipped_jobs })
        }
        Err(e) => {
            if e.is_numerical() {
                let diag = json!({
                    "command": command.name(),
                    "config_hash": hash,
                    "error": e.to_string(),
                    "error_kind": format!("{e:?}").split(['(', ' ', '{']).next().unwrap_or("").to_string(),
                    "timestamp": manifest::now(),
                });
                io::write_json(&dir.join("diagnostic.json"), &diag)?;
                ctx.manifest.output("diagnostic.json")?;
            }
            ctx.manifest.finish("failed", 0)?;
            Err(e)
        }
    }
}

type Jobs = Result<(usize, usize)>;

fn cmd_gen(ctx: &mut Ctx) -> Jobs {
    let c = ctx.config;
    let spec = c.disorder_spec()?;
    let d = &c.disorder;
    let mut records = Vec::new();
    for r in 0..d.realizations as u64 {
        for axis in 1..=spec.dims {
            records.push(CoeffRecord::new(&spec, &gen_coeffs(&spec, axis, r)?));
        }
    }
    ctx.ndjson("coeffs.ndjson", &records)?;
    let sigma = spec.sigma();
    let lags: Vec<f64> = d.lags.iter().map(|l| l * sigma).collect();
    let corr = normalized_correlation(&spec, d.realizations, 1, &lags, d.samples)?;
    let rows: Vec<Vec<f64>> = corr
        .iter()
        .map(|e| vec![e.lag, e.lag / sigma, e.mean, e.stderr, (-e.lag * e.lag / (2.0 * sigma * sigma)).exp()])
        .collect();
    ctx.csv("correlation.csv", &["lag", "lag_over_sigma", "C_over_C0", "stderr", "gaussian"], &rows)?;
    ctx.ndjson("correlation.ndjson", &corr)?;
    let moments = gaussianity_test(&spec, d.realizations, d.samples)?;
    ctx.json("moments.json", &json!({ "spec": spec, "moments": moments }))?;
    Ok((records.len(), 0))
}

pub fn scan_plan(config: &RunConfig, spec: &DisorderSpec) -> ScanPlan {
    let t = &config.tmm;
    let spacing = t.spacing_over_sigma.map_or_else(|| default_bar_spacing(spec), |s| s * spec.sigma());
    let options = TmmOptions {
        qr_period: t.qr_period,
        frame: t.frame,
        target_rel_err: t.target_rel_err,
        min_length: t.min_length,
        warmup: t.warmup,
        ..TmmOptions::default()
    };
    ScanPlan {
        energies: t.energies_over_esigma.iter().map(|w| w * spec.e_sigma()).collect(),
        ms: t.ms.clone(),
        realizations: t.realizations,
        spacing,
        max_length: t.max_length,
        transverse: t.transverse,
        mode: t.mode,
        options,
    }
}

/// Journal line of one finished transfer-matrix job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub key: JobKey,
    pub result: LyapunovResult,
}

const JOURNAL: &str = "tmm_journal.ndjson";

fn cmd_tmm(ctx: &mut Ctx, resume: bool) -> Jobs {
    let c = ctx.config;
    let spec = c.disorder_spec()?;
    if spec.dims != 3 {
        return Err(Error::Config { location: "[disorder] dims".into(), message: "the bar scan needs dims = 3".into() });
    }
    let plan = scan_plan(c, &spec);
    plan.validate()?;
    let journal = ctx.path(JOURNAL);
    let mut done: BTreeMap<JobKey, LyapunovResult> = BTreeMap::new();
    if resume {
        let completed = ctx.manifest.completed()?;
        for rec in io::read_ndjson::<JobRecord>(&journal)? {
            if completed.contains(&rec.key.label()) {
                done.insert(rec.key, rec.result);
            }
        }
    } else if journal.exists() {
        fs::remove_file(&journal)?;
    }
    let all = plan.jobs();
    let skipped = all.iter().filter(|k| done.contains_key(k)).count();
    let mut failures = Vec::new();
    let mut new_jobs = 0;
    // one batch per width keeps the journal useful if the run is interrupted
    for &m in &plan.ms {
        let todo: Vec<JobKey> = all.iter().copied().filter(|k| k.m == m && !done.contains_key(k)).collect();
        if todo.is_empty() {
            continue;
        }
        let results = tmm::run_jobs(&spec, &plan, &todo);
        let mut batch = Vec::new();
        for (key, r) in todo.iter().zip(results) {
            match r {
                Ok(v) => {
                    batch.push(JobRecord { key: *key, result: v.clone() });
                    done.insert(*key, v);
                }
                Err(f) => failures.push(f),
            }
        }
        io::append_ndjson(&journal, &batch)?;
        for rec in &batch {
            ctx.manifest.job(&rec.key.label(), JobStatus::Done)?;
        }
        for f in failures.iter().filter(|f| f.key.m == m) {
            ctx.manifest.job(&f.key.label(), JobStatus::Failed)?;
        }
        new_jobs += todo.len();
    }
    ctx.record(JOURNAL)?;
    let results: Vec<LyapunovResult> = done.values().cloned().collect();
    ctx.ndjson("lyapunov.ndjson", &results)?;
    let scan = tmm::aggregate(&spec, &plan, &results, failures.clone());
    ctx.ndjson("scan.ndjson", &scan.entries)?;
    ctx.json("scan.json", &scan)?;
    for m in scan.ms() {
        let rows: Vec<Vec<f64>> = scan
            .curve(m)
            .iter()
            .map(|e| vec![e.energy, e.energy_over_esigma, e.lambda_over_m, e.lambda_over_m_err])
            .collect();
        ctx.csv(&format!("lambda_M{m}.csv"), &["E", "E_over_Esigma", "Lambda", "Lambda_err"], &rows)?;
    }
    if let Some(f) = failures.first() {
        return Err(Error::Numerical(format!("{} transfer-matrix jobs failed; first {}: {}", failures.len(), f.key.label(), f.message)));
    }
    Ok((new_jobs, skipped))
}

pub fn fit_options(config: &RunConfig) -> FitOptions {
    let f = &config.fss;
    FitOptions {
        n_u: f.n_u,
        n_f: f.n_f,
        window: f.window,
        bootstrap: f.bootstrap,
        seed: config.run.seed,
        nu_starts: f.nu_starts.clone(),
        ..FitOptions::default()
    }
}

fn cmd_fss(ctx: &mut Ctx) -> Jobs {
    let path = ctx.path("scan.json");
    if !path.exists() {
        return Err(Error::Config {
            location: path.display().to_string(),
            message: "no transfer-matrix scan found; run `tmm` first".into(),
        });
    }
    let scan: TmmScan = io::read_json(&path)?;
    let crossings = fss::pairwise_crossings(&scan);
    ctx.json("crossings.json", &crossings)?;
    let model = fss::fit_scaling(&scan, &fit_options(ctx.config))?;
    ctx.json("model.json", &model)?;
    for m in scan.ms() {
        let rows: Vec<Vec<f64>> = scan
            .curve(m)
            .iter()
            .map(|e| vec![e.energy_over_esigma, e.lambda_over_m, e.lambda_over_m_err, model.predict(e.energy, m)])
            .collect();
        ctx.csv(&format!("fss_M{m}.csv"), &["E_over_Esigma", "Lambda", "Lambda_err", "model"], &rows)?;
    }
    let xi = fss::extract_xi(&scan, &model)?;
    fs::write(ctx.path("xi.csv"), xi.to_csv())?;
    ctx.record("xi.csv")?;
    ctx.json("xi.json", &xi)?;
    Ok((1, 0))
}

/// Sidecar of a stored eigenstate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenSidecar {
    pub grid: Grid,
    pub spec: DisorderSpec,
    #[serde(rename = "E")]
    pub energy: f64,
    #[serde(rename = "E_over_Esigma")]
    pub energy_over_esigma: f64,
    pub residual: f64,
    pub converged: bool,
    pub seed: u64,
    pub realization: u64,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub index: usize,
    #[serde(rename = "E")]
    pub energy: f64,
    #[serde(rename = "E_over_Esigma")]
    pub energy_over_esigma: f64,
    pub residual: f64,
    pub converged: bool,
    pub participation_ratio: f64,
    pub fits: Vec<spectral::LocalizationFit>,
    pub decades: Vec<f64>,
}

fn marginals(psi: &[f64], grid: &Grid) -> Result<Vec<spectral::MarginalProfile>> {
    (0..3).map(|a| spectral::marginal(psi, grid, a)).collect()
}

fn cmd_eig(ctx: &mut Ctx) -> Jobs {
    let c = ctx.config;
    let spec = c.disorder_spec()?;
    if spec.dims != 3 {
        return Err(Error::Config { location: "[disorder] dims".into(), message: "eigenstates need dims = 3".into() });
    }
    let r = c.spectral.realization;
    let grid = Grid::torus(3, c.grid.n)?;
    grid.check_nyquist(spec.k_cut)?;
    let coeffs = [gen_coeffs(&spec, 1, r)?, gen_coeffs(&spec, 2, r)?, gen_coeffs(&spec, 3, r)?];
    let veff = crate::disorder::eval_veff(&spec, [&coeffs[0], &coeffs[1], &coeffs[2]], grid.n)?;
    let h = build_from_veff(&grid, &veff)?;
    let options = EigenOptions {
        count: c.spectral.count,
        tol: c.spectral.tol,
        max_iter: c.spectral.max_iter,
        seed: c.run.seed,
        ..EigenOptions::default()
    };
    let target = c.spectral.target_over_esigma * spec.e_sigma();
    let bundle = spectral::interior_eigs(&h, target, &options)?.with_source(&spec, &[r, r, r]);
    let window = FitWindow::new(spec.sigma());
    let mut summaries = Vec::new();
    let n = c.grid.n;
    for (i, psi) in bundle.vectors.iter().enumerate() {
        let name = format!("psi_{i}.bin");
        io::write_array(&ctx.path(&name), &Header::new(DataKind::Real, &[n, n, n])?, psi)?;
        ctx.record(&name)?;
        let side = EigenSidecar {
            grid: grid.clone(),
            spec: spec.clone(),
            energy: bundle.energies[i],
            energy_over_esigma: bundle.energies[i] / spec.e_sigma(),
            residual: bundle.residuals[i],
            converged: bundle.converged[i],
            seed: c.run.seed,
            realization: r,
            index: i,
        };
        ctx.json(&format!("psi_{i}.json"), &side)?;
        let profiles = marginals(psi, &grid)?;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut row = vec![profiles[0].positions()[j]];
                row.extend(profiles.iter().map(|p| p.values[j]));
                row
            })
            .collect();
        ctx.csv(&format!("marginal_{i}.csv"), &["x", "I_0", "I_1", "I_2"], &rows)?;
        summaries.push(StateSummary {
            index: i,
            energy: side.energy,
            energy_over_esigma: side.energy_over_esigma,
            residual: side.residual,
            converged: side.converged,
            participation_ratio: spectral::participation_ratio(psi, &grid),
            fits: profiles.iter().map(|p| spectral::fit_localization_length(p, &window)).collect(),
            decades: profiles.iter().map(|p| p.decades()).collect(),
        });
    }
    ctx.ndjson("eig.ndjson", &summaries)?;
    ctx.json(
        "eig.json",
        &json!({ "target": target, "stats": bundle.stats, "flags": bundle.flags, "max_overlap": bundle.max_overlap() }),
    )?;
    if !bundle.all_converged() {
        return Err(Error::Numerical(format!(
            "eigensolver did not reach tol {} (worst residual {:e})",
            options.tol,
            bundle.residuals.iter().copied().fold(0.0, f64::max)
        )));
    }
    Ok((1, 0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub index: usize,
    pub axis: usize,
    pub omega: f64,
    pub theta_star: f64,
    pub xi_fit: f64,
    pub temporal_length: Option<f64>,
    pub max_over_min: f64,
}

fn cmd_trace(ctx: &mut Ctx) -> Jobs {
    let c = ctx.config;
    let mut states = Vec::new();
    for i in 0.. {
        let side = ctx.path(&format!("psi_{i}.json"));
        if !side.exists() {
            break;
        }
        states.push((i, side));
    }
    if states.is_empty() {
        return Err(Error::Config {
            location: ctx.dir.display().to_string(),
            message: "no stored eigenstates; run `eig` first".into(),
        });
    }
    let omega = c.spectral.omega;
    let times = spectral::period_times(omega, c.spectral.trace_points);
    let mut summaries = Vec::new();
    for (i, side_path) in states {
        let side: EigenSidecar = io::read_json(&side_path)?;
        let (header, psi) = io::read_array(&side_path.with_extension("bin"))?;
        if header.values() != side.grid.len() {
            return Err(Error::GridMismatch(format!("psi_{i}.bin does not match its sidecar grid")));
        }
        let window = FitWindow::new(side.spec.sigma());
        let mut columns = vec![times.clone()];
        for (axis, profile) in marginals(&psi, &side.grid)?.iter().enumerate() {
            let fit = spectral::fit_localization_length(profile, &window);
            let theta_star = c.spectral.theta_star.unwrap_or(fit.center);
            let trace = spectral::lab_frame_trace(profile, omega, theta_star, &times, Some(&fit))?;
            let max = trace.values.iter().copied().fold(0.0, f64::max);
            let min = trace.values.iter().copied().fold(f64::INFINITY, f64::min);
            summaries.push(TraceSummary {
                index: i,
                axis,
                omega,
                theta_star,
                xi_fit: fit.xi,
                temporal_length: trace.temporal_length,
                max_over_min: max / min,
            });
            columns.push(trace.values);
        }
        let rows: Vec<Vec<f64>> = (0..times.len()).map(|j| columns.iter().map(|col| col[j]).collect()).collect();
        ctx.csv(&format!("trace_{i}.csv"), &["t", "P_0", "P_1", "P_2"], &rows)?;
    }
    ctx.ndjson("trace.ndjson", &summaries)?;
    Ok((summaries.len(), 0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriveSummary {
    pub index: usize,
    pub omega: f64,
    pub v0: f64,
    pub n_points: usize,
    pub periods: usize,
    pub dt: f64,
    pub steps_per_period: usize,
    pub fidelity_last: f64,
    pub fidelity_min: f64,
    pub max_norm_drift: f64,
    pub secular_max_term: f64,
}

#[derive(Serialize)]
struct TrajectorySidecar<'a> {
    spec: &'a DrivenSpec1D,
    times: Vec<f64>,
    seed: u64,
    realization: u64,
}

/// Full and effective evolution for every configured `ω`.
pub fn drive_series(config: &RunConfig) -> Result<Vec<(DrivenSpec1D, driven1d::Trajectory, driven1d::FidelitySeries)>> {
    use rayon::prelude::*;
    let g = &config.driven1d;
    let coeffs = sawtooth_coeffs(config.run.seed, g.realization);
    g.omegas
        .par_iter()
        .map(|&omega| {
            let spec = DrivenSpec1D::from_effective(&coeffs, g.v0, omega, g.profile, g.n_points)?;
            let psi0 = match g.packet_width {
                Some(w) => driven1d::resonant_initial_state(&spec, PI, w)?,
                None => driven1d::to_lab_frame(&spec, &driven1d::effective_ground_state(&spec)?.1)?,
            };
            let traj = driven1d::propagate(&spec, &psi0, g.dt_fraction * spec.dt_limit(), g.periods)?;
            let fid = driven1d::effective_compare(&traj, &spec)?;
            Ok((spec, traj, fid))
        })
        .collect()
}

fn cmd_drive1d(ctx: &mut Ctx) -> Jobs {
    let c = ctx.config;
    let series = drive_series(c)?;
    let mut summaries = Vec::new();
    for (i, (spec, traj, fid)) in series.iter().enumerate() {
        let rows: Vec<Vec<f64>> = (0..fid.times.len())
            .map(|j| vec![fid.times[j], fid.fidelity[j], fid.variance_full[j], fid.variance_eff[j]])
            .collect();
        ctx.csv(&format!("fidelity_{i}.csv"), &["t", "fidelity", "variance_full", "variance_eff"], &rows)?;
        let frames = traj.snapshots.len();
        let data: Vec<f64> = traj.snapshots.iter().flat_map(|s| s.psi.iter().flat_map(|z| [z.re, z.im])).collect();
        let name = format!("trajectory_{i}.bin");
        io::write_array(&ctx.path(&name), &Header::new(DataKind::Complex, &[frames, spec.n_points])?, &data)?;
        ctx.record(&name)?;
        ctx.json(
            &format!("trajectory_{i}.json"),
            &TrajectorySidecar { spec, times: traj.times(), seed: c.run.seed, realization: c.driven1d.realization },
        )?;
        let secular = driven1d::secular_check(spec.v0, [spec.omega, 0.0, 0.0], 3.0)?;
        summaries.push(DriveSummary {
            index: i,
            omega: spec.omega,
            v0: spec.v0,
            n_points: spec.n_points,
            periods: c.driven1d.periods,
            dt: traj.dt,
            steps_per_period: traj.steps_per_period,
            fidelity_last: fid.last(),
            fidelity_min: fid.min(),
            max_norm_drift: traj.max_norm_drift,
            secular_max_term: secular.max_term,
        });
    }
    ctx.ndjson("drive1d.ndjson", &summaries)?;
    Ok((summaries.len(), 0))
}

fn cmd_check_secular(ctx: &mut Ctx) -> Jobs {
    let g = &ctx.config.driven1d;
    let w = [g.secular_omegas[0], g.secular_omegas[1], g.secular_omegas[2]];
    let report = driven1d::secular_check(g.secular_v0, w, g.secular_k0)?;
    ctx.json("secular.json", &report)?;
    Ok((1, 0))
}

/// Files the manifest lists for this command and config.
pub fn recorded_outputs(dir: &Path, command: Command, config: &RunConfig) -> Result<Vec<String>> {
    Ok(RunManifest::open(dir, command.name(), &config.hash()).outputs()?.into_iter().collect())
}
