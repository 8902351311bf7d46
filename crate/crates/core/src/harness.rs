//! Twin-experiment orchestration: truth runs and observation synthesis,
//! filter cycling over several seeds, free forecasts, covariance maps and
//! cost accounting.
//!
//! The filter path sees only observations; truth enters through
//! [`TwinData`] for scoring after each cycle.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assimilation::{
    anomalies, cell_distance, covariance_row, enkf_cycle, generate_ensemble, henkf_cycle, CycleTiming, DaConfig,
    Ensemble, GainSolver, WorkCounts,
};
use crate::error::{Error, Result};
use crate::io::{self, TrajectoryManifest, TrajectoryWriter};
use crate::metrics::{self, Climatology, MeanAccumulator, SkillSeries, STEPS_PER_DAY};
use crate::qg::{QgModel, QgParams, SolverState};
use crate::rng::{Role, StreamKey};
use crate::spectral::{Grid, LayeredField, LAYERS};
use crate::surrogate::{Propagator, SurrogateModel, DEFAULT_COARSE_DT_FACTOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Enkf,
    Henkf,
    EnkfLocalized,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Enkf => "enkf",
            Algorithm::Henkf => "henkf",
            Algorithm::EnkfLocalized => "enkf_localized",
        }
    }
}

/// How the data-driven ensemble is propagated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurrogateSpec {
    /// Channel model on a grid coarsened by `factor` with step `dt_factor * dt`.
    Coarse { factor: usize, dt_factor: usize },
    /// The fine solver itself.
    Exact,
    /// A saved QGS1 surrogate.
    File { path: PathBuf },
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        SurrogateSpec::Coarse {
            factor: 2,
            dt_factor: DEFAULT_COARSE_DT_FACTOR,
        }
    }
}

impl SurrogateSpec {
    pub fn build(&self, grid: Grid, params: QgParams, gamma: u64) -> Result<Box<dyn Propagator>> {
        Ok(match self {
            SurrogateSpec::Coarse { factor, dt_factor } => {
                Box::new(SurrogateModel::coarse(grid, params, gamma, *factor, *dt_factor)?)
            }
            SurrogateSpec::Exact => Box::new(QgModel::new(grid, params)?),
            SurrogateSpec::File { path } => {
                let s = SurrogateModel::load(path)?;
                grid.check_same(Propagator::grid(&s))?;
                if s.gamma != gamma {
                    return Err(Error::Config(format!(
                        "surrogate file has gamma {} but the experiment uses {gamma}",
                        s.gamma
                    )));
                }
                Box::new(s)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthConfig {
    pub spinup_steps: u64,
    /// Snapshot interval; must divide `alpha`.
    pub save_every: u64,
    /// Steps kept beyond the last cycle for free forecasts.
    #[serde(default)]
    pub extra_steps: u64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        TruthConfig {
            spinup_steps: 20_000,
            save_every: 200,
            extra_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClimatologyConfig {
    pub seed: u64,
    pub spinup_steps: u64,
    pub snapshots: usize,
    pub every: u64,
}

impl Default for ClimatologyConfig {
    fn default() -> Self {
        ClimatologyConfig {
            seed: 9_999,
            spinup_steps: 20_000,
            snapshots: 1000,
            every: STEPS_PER_DAY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub grid: Grid,
    /// Reference constants for `grid` when absent.
    #[serde(default)]
    pub params: Option<QgParams>,
    pub da: DaConfig,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub surrogate: Option<SurrogateSpec>,
    pub n_cycles: usize,
    pub n_seeds: usize,
    /// Seed of the first truth run; seed `i` uses `truth_seed + i`.
    pub truth_seed: u64,
    #[serde(default)]
    pub truth: TruthConfig,
    #[serde(default)]
    pub climatology: ClimatologyConfig,
    /// Physical `(x, y)` of the upper-layer point whose covariance row is averaged.
    #[serde(default)]
    pub covariance_probe: Option<[f64; 2]>,
    /// First-cycle data-driven members reuse the numerical members' streams.
    #[serde(default)]
    pub share_initial_streams: bool,
    /// Write per-cycle analysis-mean snapshots.
    #[serde(default)]
    pub save_snapshots: bool,
}

impl ExperimentConfig {
    /// Half-size twin experiment with 60 cycles and 10 seeds.
    pub fn reference(algorithm: Algorithm, da: DaConfig) -> Self {
        let grid = Grid::half_size();
        ExperimentConfig {
            grid,
            params: None,
            surrogate: (algorithm == Algorithm::Henkf).then(SurrogateSpec::default),
            truth: TruthConfig {
                save_every: da.alpha,
                ..TruthConfig::default()
            },
            da,
            algorithm,
            n_cycles: 60,
            n_seeds: 10,
            truth_seed: 1,
            climatology: ClimatologyConfig::default(),
            covariance_probe: None,
            share_initial_streams: false,
            save_snapshots: false,
        }
    }

    pub fn params(&self) -> QgParams {
        self.params.unwrap_or_else(|| QgParams::reference(&self.grid))
    }

    /// Copy with defaults filled in.
    pub fn resolved(&self) -> Self {
        ExperimentConfig {
            params: Some(self.params()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.params().validate()?;
        self.da.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.n_cycles == 0 || self.n_seeds == 0 {
            return bad("n_cycles and n_seeds must be at least 1".into());
        }
        if self.truth.save_every == 0 || self.da.alpha % self.truth.save_every != 0 {
            return bad(format!(
                "truth save interval {} must divide alpha {}",
                self.truth.save_every, self.da.alpha
            ));
        }
        match self.algorithm {
            Algorithm::Henkf => {
                if self.da.n_data_driven == 0 {
                    return bad("henkf needs n_data_driven > 0".into());
                }
                if self.surrogate.is_none() {
                    return bad("henkf needs a surrogate".into());
                }
                if self.da.localization.is_some() {
                    return bad("henkf does not localize its covariance".into());
                }
            }
            Algorithm::Enkf | Algorithm::EnkfLocalized => {
                if self.da.n_data_driven != 0 {
                    return bad(format!("{} takes n_data_driven = 0", self.algorithm.name()));
                }
            }
        }
        match (self.algorithm, self.da.localization) {
            (Algorithm::EnkfLocalized, None) => bad("enkf_localized needs a localization radius".into()),
            (Algorithm::Enkf, Some(_)) => bad("enkf with a localization radius; use enkf_localized".into()),
            _ => Ok(()),
        }
    }

    /// SHA-256 of the canonical resolved JSON.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.resolved()).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn truth_seed_for(&self, seed_index: usize) -> u64 {
        self.truth_seed + seed_index as u64
    }

    pub fn filter_seed_for(&self, seed_index: usize) -> u64 {
        self.da.seed + seed_index as u64
    }

    pub fn truth_steps(&self) -> u64 {
        self.n_cycles as u64 * self.da.alpha + self.truth.extra_steps
    }
}

/// One truth run with its stored observations.
#[derive(Debug, Clone)]
pub struct TwinData {
    pub truth_seed: u64,
    pub save_every: u64,
    /// Truth at steps `0, save_every, 2 save_every, ...` after spinup.
    pub truth: Vec<LayeredField>,
    pub alpha: u64,
    /// Noisy truth at cycle times `0, alpha, 2 alpha, ...`.
    pub observations: Vec<LayeredField>,
}

impl TwinData {
    pub fn truth_at(&self, step: u64) -> Result<&LayeredField> {
        if step % self.save_every != 0 {
            return Err(Error::InvalidArgument(format!(
                "step {step} is not a truth save time (every {})",
                self.save_every
            )));
        }
        self.truth
            .get((step / self.save_every) as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("truth ends before step {step}")))
    }

    pub fn observation(&self, cycle: usize) -> Result<&LayeredField> {
        self.observations
            .get(cycle)
            .ok_or_else(|| Error::InvalidArgument(format!("no observation for cycle {cycle}")))
    }

    /// Stores truth and observations as two trajectories under `dir`.
    pub fn save(&self, dir: &Path, grid: Grid) -> Result<()> {
        let mut w = TrajectoryWriter::create(&dir.join("truth"), grid, self.truth_seed, self.save_every)?;
        for (i, f) in self.truth.iter().enumerate() {
            w.push(i as u64 * self.save_every, f)?;
        }
        w.finish()?;
        let mut w = TrajectoryWriter::create(&dir.join("observations"), grid, self.truth_seed, self.alpha)?;
        for (i, f) in self.observations.iter().enumerate() {
            w.push(i as u64 * self.alpha, f)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let truth = TrajectoryManifest::load(&dir.join("truth"))?;
        let obs = TrajectoryManifest::load(&dir.join("observations"))?;
        let load_all = |m: &TrajectoryManifest| (0..m.len()).map(|i| m.load_snapshot(i)).collect::<Result<Vec<_>>>();
        Ok(TwinData {
            truth_seed: truth.seed,
            save_every: truth.save_every,
            truth: load_all(&truth)?,
            alpha: obs.save_every,
            observations: load_all(&obs)?,
        })
    }
}

/// Spinup from the seeded equilibrium, then `cfg.truth_steps()` saved every
/// `save_every`; observations add `N(0, sigma_obs^2)` at cycle times.
pub fn synthesize_twin(cfg: &ExperimentConfig, seed_index: usize) -> Result<TwinData> {
    let truth_seed = cfg.truth_seed_for(seed_index);
    let mut model = QgModel::new(cfg.grid, cfg.params())?;
    let mut state = model.spinup(truth_seed, cfg.truth.spinup_steps)?;
    let every = cfg.truth.save_every;
    let n_saves = cfg.truth_steps() / every;
    let mut truth = Vec::with_capacity(n_saves as usize + 1);
    truth.push(state.psi_grid()?);
    for _ in 0..n_saves {
        model.propagate(&mut state, every)?;
        truth.push(state.psi_grid()?);
    }
    let per_cycle = (cfg.da.alpha / every) as usize;
    let mut observations = Vec::with_capacity(cfg.n_cycles + 1);
    for c in 0..=cfg.n_cycles {
        let key = StreamKey::new(truth_seed, Role::Observation, c as u32);
        observations.push(generate_ensemble(&truth[c * per_cycle], 1, cfg.da.sigma_obs, key)?.members.remove(0));
    }
    Ok(TwinData {
        truth_seed,
        save_every: every,
        truth,
        alpha: cfg.da.alpha,
        observations,
    })
}

pub fn synthesize_twins(cfg: &ExperimentConfig) -> Result<Vec<TwinData>> {
    (0..cfg.n_seeds).map(|i| synthesize_twin(cfg, i)).collect()
}

/// Writes seed `seed_index`'s truth and observations; returns the truth manifest.
pub fn run_truth(cfg: &ExperimentConfig, seed_index: usize, dir: &Path) -> Result<TrajectoryManifest> {
    cfg.validate()?;
    let twin = synthesize_twin(cfg, seed_index)?;
    twin.save(dir, cfg.grid)?;
    TrajectoryManifest::load(&dir.join("truth"))
}

/// Time mean of an independent run sampled every `every` steps after spinup.
pub fn build_climatology(grid: Grid, params: QgParams, cfg: &ClimatologyConfig) -> Result<Climatology> {
    let mut model = QgModel::new(grid, params)?;
    let mut state = model.spinup(cfg.seed, cfg.spinup_steps)?;
    let mut acc = MeanAccumulator::new(grid);
    for _ in 0..cfg.snapshots {
        model.propagate(&mut state, cfg.every)?;
        acc.add(&state.psi)?;
    }
    acc.finish(format!("climatology run seed {}", cfg.seed))
}

/// [`build_climatology`] cached under `cache_dir`, keyed by its inputs.
pub fn cached_climatology(grid: Grid, params: QgParams, cfg: &ClimatologyConfig, cache_dir: &Path) -> Result<Climatology> {
    let key = serde_json::to_string(&(grid, params, cfg))?;
    let digest = Sha256::digest(key.as_bytes());
    let name = format!("clim_{:02x}{:02x}{:02x}{:02x}{:02x}{:02x}.qgf1", digest[0], digest[1], digest[2], digest[3], digest[4], digest[5]);
    let path = cache_dir.join(name);
    if path.exists() {
        if let Ok(c) = Climatology::load(&path) {
            return Ok(c);
        }
    }
    let clim = build_climatology(grid, params, cfg)?;
    io::create_dir(cache_dir)?;
    clim.save(&path)?;
    Ok(clim)
}

/// Upper-layer state index nearest the physical point `(x, y)`.
pub fn probe_index(grid: &Grid, x: f64, y: f64) -> usize {
    let i = ((x / grid.dx()).round() as i64).rem_euclid(grid.nx as i64) as usize;
    let j = (((y + 0.5 * grid.ly) / grid.dy()).round() as i64).rem_euclid(grid.ny as i64) as usize;
    j * grid.nx + i
}

/// Means and bookkeeping of one filter cycle (no truth involved).
#[derive(Debug, Clone)]
pub struct FilterCycle {
    pub background_mean: LayeredField,
    pub analysis_mean: LayeredField,
    pub work: WorkCounts,
    pub timing: CycleTiming,
}

#[derive(Debug, Clone)]
pub struct FilterTrace {
    pub cycles: Vec<FilterCycle>,
    /// Cycle-averaged normalized covariance row of the probe point.
    pub covariance_map: Option<Vec<f64>>,
    pub final_analysis: Ensemble,
}

/// Cycles the configured filter through `observations[1..=n_cycles]`,
/// starting from `observations[0]` as the noisy initial state.
pub fn run_filter(cfg: &ExperimentConfig, seed_index: usize, observations: &[LayeredField]) -> Result<FilterTrace> {
    cfg.validate()?;
    if observations.len() < cfg.n_cycles + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} observations for {} cycles",
            observations.len(),
            cfg.n_cycles
        )));
    }
    let grid = cfg.grid;
    let params = cfg.params();
    let seed = cfg.filter_seed_for(seed_index);
    let mut da = cfg.da.clone();
    da.seed = seed;
    let mut model = QgModel::new(grid, params)?;
    let mut surrogate = match cfg.algorithm {
        Algorithm::Henkf => Some(cfg.surrogate.as_ref().expect("validated").build(grid, params, da.gamma)?),
        _ => None,
    };
    let solver = GainSolver::for_config(&grid, &da)?;
    let probe = cfg.covariance_probe.map(|[x, y]| probe_index(&grid, x, y));
    let mut map_acc = probe.map(|_| vec![0.0; grid.state_dim()]);

    let initial = &observations[0];
    let init_key = StreamKey::new(seed, Role::Numerical, 0);
    let mut ens = generate_ensemble(initial, da.n_numerical, da.sigma_b, init_key)?;
    let mut restart = initial.clone();
    let mut cycles = Vec::with_capacity(cfg.n_cycles);
    for c in 1..=cfg.n_cycles {
        let obs = &observations[c];
        let out = match surrogate.as_mut() {
            None => enkf_cycle(&ens, &mut model, obs, &da, &solver, c as u32)?,
            Some(s) => {
                let dd_key = if cfg.share_initial_streams && c == 1 {
                    init_key
                } else {
                    StreamKey::new(seed, Role::DataDriven, c as u32)
                };
                henkf_cycle(&ens, &mut model, s.as_mut(), &restart, obs, &da, &solver, c as u32, dd_key)?
            }
        };
        if let (Some(p), Some(acc)) = (probe, map_acc.as_mut()) {
            for (a, v) in acc.iter_mut().zip(covariance_row(&out.covariance, p, true)?) {
                *a += v;
            }
        }
        restart = out.analysis_mean.clone();
        cycles.push(FilterCycle {
            background_mean: out.background_mean,
            analysis_mean: out.analysis_mean,
            work: out.work,
            timing: out.timing,
        });
        ens = out.analysis;
    }
    if let Some(acc) = map_acc.as_mut() {
        let inv = 1.0 / cfg.n_cycles as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(FilterTrace {
        cycles,
        covariance_map: map_acc,
        final_analysis: ens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub step: u64,
    pub error_background: [f64; LAYERS],
    pub error_analysis: [f64; LAYERS],
    pub acc_background: [f64; LAYERS],
    pub acc_analysis: [f64; LAYERS],
    pub work: WorkCounts,
    pub timing: CycleTiming,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed_index: usize,
    pub reports: Vec<CycleReport>,
    pub covariance_map: Option<Vec<f64>>,
    pub analysis_means: Vec<LayeredField>,
}

fn score(field: &LayeredField, truth: &LayeredField, clim: &Climatology) -> Result<([f64; LAYERS], [f64; LAYERS])> {
    let mut e = [0.0; LAYERS];
    let mut a = [0.0; LAYERS];
    for k in 0..LAYERS {
        e[k] = metrics::relative_error(field, truth, k)?;
        a[k] = metrics::acc(field, truth, clim, k)?;
    }
    Ok((e, a))
}

/// Runs the filter for one seed and scores every cycle against the truth.
pub fn run_seed(cfg: &ExperimentConfig, seed_index: usize, twin: &TwinData, clim: &Climatology) -> Result<SeedRun> {
    let trace = run_filter(cfg, seed_index, &twin.observations)?;
    let mut reports = Vec::with_capacity(trace.cycles.len());
    let mut analysis_means = Vec::with_capacity(trace.cycles.len());
    for (i, c) in trace.cycles.into_iter().enumerate() {
        let cycle = i + 1;
        let step = cycle as u64 * cfg.da.alpha;
        let truth = twin.truth_at(step)?;
        let (eb, ab) = score(&c.background_mean, truth, clim)?;
        let (ea, aa) = score(&c.analysis_mean, truth, clim)?;
        reports.push(CycleReport {
            cycle,
            step,
            error_background: eb,
            error_analysis: ea,
            acc_background: ab,
            acc_analysis: aa,
            work: c.work,
            timing: c.timing,
        });
        analysis_means.push(c.analysis_mean);
    }
    Ok(SeedRun {
        seed_index,
        reports,
        covariance_map: trace.covariance_map,
        analysis_means,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Mean and sample std over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Spread { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleAggregate {
    pub cycle: usize,
    pub e1_background: Spread,
    pub e1_analysis: Spread,
    pub acc1_background: Spread,
    pub acc1_analysis: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: Algorithm,
    pub config_hash: String,
    pub n_seeds: usize,
    pub n_cycles: usize,
    /// Cycle-mean analysis `E_1`, spread over seeds.
    pub mean_e1_analysis: Spread,
    pub final_e1_analysis: Spread,
    pub final_acc1_analysis: Spread,
    pub numerical_member_steps: u64,
    pub surrogate_member_macro_steps: u64,
    pub per_cycle: Vec<CycleAggregate>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedRun>,
    pub summary: Summary,
}

impl ExperimentReport {
    /// Seed-mean of a per-cycle quantity.
    pub fn seed_mean(&self, f: impl Fn(&CycleReport) -> f64) -> Vec<f64> {
        let n = self.seeds.len() as f64;
        (0..self.config.n_cycles)
            .map(|c| self.seeds.iter().map(|s| f(&s.reports[c])).sum::<f64>() / n)
            .collect()
    }

    /// Seed-averaged covariance map, when a probe was configured.
    pub fn covariance_map(&self) -> Option<Vec<f64>> {
        let maps: Vec<&Vec<f64>> = self.seeds.iter().filter_map(|s| s.covariance_map.as_ref()).collect();
        let first = maps.first()?;
        let mut out = vec![0.0; first.len()];
        for m in &maps {
            for (o, v) in out.iter_mut().zip(m.iter()) {
                *o += v;
            }
        }
        let inv = 1.0 / maps.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Some(out)
    }

    pub fn total_wallclock(&self) -> CycleTiming {
        let mut t = CycleTiming::default();
        for r in self.seeds.iter().flat_map(|s| &s.reports) {
            t.numerical_s += r.timing.numerical_s;
            t.surrogate_s += r.timing.surrogate_s;
            t.analysis_s += r.timing.analysis_s;
        }
        t
    }
}

fn summarize(cfg: &ExperimentConfig, seeds: &[SeedRun]) -> Summary {
    let per_seed = |f: &dyn Fn(&SeedRun) -> f64| seeds.iter().map(f).collect::<Vec<_>>();
    let per_cycle = (0..cfg.n_cycles)
        .map(|c| {
            let at = |f: &dyn Fn(&CycleReport) -> f64| Spread::of(&per_seed(&|s| f(&s.reports[c])));
            CycleAggregate {
                cycle: c + 1,
                e1_background: at(&|r| r.error_background[0]),
                e1_analysis: at(&|r| r.error_analysis[0]),
                acc1_background: at(&|r| r.acc_background[0]),
                acc1_analysis: at(&|r| r.acc_analysis[0]),
            }
        })
        .collect();
    let cycle_mean = |s: &SeedRun| s.reports.iter().map(|r| r.error_analysis[0]).sum::<f64>() / s.reports.len() as f64;
    let all = seeds.iter().flat_map(|s| &s.reports);
    Summary {
        algorithm: cfg.algorithm,
        config_hash: cfg.hash(),
        n_seeds: seeds.len(),
        n_cycles: cfg.n_cycles,
        mean_e1_analysis: Spread::of(&per_seed(&cycle_mean)),
        final_e1_analysis: Spread::of(&per_seed(&|s| s.reports.last().unwrap().error_analysis[0])),
        final_acc1_analysis: Spread::of(&per_seed(&|s| s.reports.last().unwrap().acc_analysis[0])),
        numerical_member_steps: all.clone().map(|r| r.work.numerical_member_steps).sum(),
        surrogate_member_macro_steps: all.map(|r| r.work.surrogate_member_macro_steps).sum(),
        per_cycle,
    }
}

/// Deterministic per-cycle table of one seed.
pub fn cycles_csv(reports: &[CycleReport]) -> String {
    let mut out = String::from(
        "cycle,step,E1_background,E1_analysis,E2_background,E2_analysis,ACC1_background,ACC1_analysis,ACC2_background,ACC2_analysis,numerical_member_steps,surrogate_member_macro_steps\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{},{}",
            r.cycle,
            r.step,
            r.error_background[0],
            r.error_analysis[0],
            r.error_background[1],
            r.error_analysis[1],
            r.acc_background[0],
            r.acc_analysis[0],
            r.acc_background[1],
            r.acc_analysis[1],
            r.work.numerical_member_steps,
            r.work.surrogate_member_macro_steps
        );
    }
    out
}

/// Wall-clock per cycle; kept apart from the deterministic tables.
pub fn timing_csv(reports: &[CycleReport]) -> String {
    let mut out = String::from("cycle,wallclock_numerical_s,wallclock_surrogate_s,wallclock_analysis_s\n");
    for r in reports {
        let t = r.timing;
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", r.cycle, t.numerical_s, t.surrogate_s, t.analysis_s);
    }
    out
}

/// Seed-aggregated per-cycle table.
pub fn aggregate_csv(summary: &Summary) -> String {
    let mut out = String::from(
        "cycle,E1_analysis_mean,E1_analysis_std,E1_background_mean,E1_background_std,ACC1_analysis_mean,ACC1_analysis_std,ACC1_background_mean,ACC1_background_std\n",
    );
    for a in &summary.per_cycle {
        let _ = writeln!(
            out,
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            a.cycle,
            a.e1_analysis.mean,
            a.e1_analysis.std,
            a.e1_background.mean,
            a.e1_background.std,
            a.acc1_analysis.mean,
            a.acc1_analysis.std,
            a.acc1_background.mean,
            a.acc1_background.std
        );
    }
    out
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    config_hash: String,
    #[serde(flatten)]
    config: &'a ExperimentConfig,
}

fn write_resolved_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    io::create_dir(dir)?;
    io::write_json(
        &dir.join("config.resolved.json"),
        &ResolvedConfig {
            config_hash: cfg.hash(),
            config: &cfg.resolved(),
        },
    )
}

fn write_map(dir: &Path, grid: Grid, name: &str, map: &[f64]) -> Result<()> {
    let field = LayeredField::from_values(grid, map.to_vec())?;
    io::write_field(&dir.join(format!("{name}.qgf1")), &field)?;
    let mut csv = String::from("layer,i,j,x,y,correlation\n");
    for k in 0..LAYERS {
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let _ = writeln!(
                    csv,
                    "{k},{i},{j},{:.6},{:.6},{:.12e}",
                    grid.x(i),
                    grid.y(j),
                    map[k * grid.points() + j * grid.nx + i]
                );
            }
        }
    }
    io::write_text(&dir.join(format!("{name}.csv")), &csv)
}

/// Runs every seed against its twin, writing outputs under `out` when given.
pub fn run_da_experiment(
    cfg: &ExperimentConfig,
    twins: &[TwinData],
    clim: &Climatology,
    out: Option<&Path>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    if twins.len() < cfg.n_seeds {
        return Err(Error::InvalidArgument(format!("{} twins for {} seeds", twins.len(), cfg.n_seeds)));
    }
    if let Some(dir) = out {
        write_resolved_config(cfg, dir)?;
    }
    let mut seeds = Vec::with_capacity(cfg.n_seeds);
    for (i, twin) in twins.iter().take(cfg.n_seeds).enumerate() {
        let run = run_seed(cfg, i, twin, clim)?;
        if let Some(dir) = out {
            let sd = dir.join(format!("seed_{i:03}"));
            io::create_dir(&sd)?;
            io::write_text(&sd.join("cycles.csv"), &cycles_csv(&run.reports))?;
            io::write_text(&sd.join("timing.csv"), &timing_csv(&run.reports))?;
            if cfg.save_snapshots {
                let mut w = TrajectoryWriter::create(&sd.join("analysis"), cfg.grid, cfg.filter_seed_for(i), cfg.da.alpha)?;
                for (r, f) in run.reports.iter().zip(&run.analysis_means) {
                    w.push(r.step, f)?;
                }
                w.finish()?;
            }
        }
        seeds.push(run);
    }
    let summary = summarize(cfg, &seeds);
    let report = ExperimentReport {
        config: cfg.clone(),
        seeds,
        summary,
    };
    if let Some(dir) = out {
        io::write_text(&dir.join("cycles.csv"), &aggregate_csv(&report.summary))?;
        io::write_json(&dir.join("summary.json"), &report.summary)?;
        if let Some(map) = report.covariance_map() {
            write_map(dir, cfg.grid, "covariance_map", &map)?;
        }
    }
    Ok(report)
}

/// Mean `|map|` over points farther than `min_cells` from `index` horizontally.
pub fn far_field_mean_abs(grid: &Grid, map: &[f64], index: usize, min_cells: f64) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (j, v) in map.iter().enumerate() {
        if cell_distance(grid, index, j) > min_cells {
            sum += v.abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Normalized covariance row of an ensemble at an upper-layer point.
pub fn export_covariance_map(ens: &Ensemble, x: f64, y: f64, dir: Option<&Path>, name: &str) -> Result<Vec<f64>> {
    let grid = *ens.grid();
    let row = covariance_row(&anomalies(ens), probe_index(&grid, x, y), true)?;
    if let Some(d) = dir {
        io::create_dir(d)?;
        write_map(d, grid, name, &row)?;
    }
    Ok(row)
}

/// Free forecast from `initial` at absolute truth step `start_step`, scored
/// every `stride` steps against the continuing truth.
pub fn run_free_forecast(
    model: &mut QgModel,
    initial: &LayeredField,
    start_step: u64,
    twin: &TwinData,
    clim: &Climatology,
    horizon_days: f64,
    stride: u64,
) -> Result<SkillSeries> {
    if stride == 0 || stride % twin.save_every != 0 {
        return Err(Error::InvalidArgument(format!(
            "forecast stride {stride} must be a multiple of the truth interval {}",
            twin.save_every
        )));
    }
    let total = (horizon_days * STEPS_PER_DAY as f64).round() as u64;
    let mut state = SolverState::from_psi(initial)?;
    let mut series = SkillSeries::default();
    series.record(0, &initial.gridded()?, twin.truth_at(start_step)?, clim)?;
    let mut t = 0;
    while t + stride <= total {
        model.propagate(&mut state, stride)?;
        t += stride;
        series.record(t, &state.psi_grid()?, twin.truth_at(start_step + t)?, clim)?;
    }
    Ok(series)
}

/// Measured wall-clock cost of 200 steps for one numerical and one surrogate member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// One numerical member over one step.
    pub unit_seconds: f64,
    pub numerical_day_s: f64,
    pub surrogate_day_s: f64,
    pub surrogate_gamma: u64,
    pub repetitions: usize,
}

impl CostModel {
    /// Surrogate over numerical cost per 200 steps.
    pub fn ratio(&self) -> f64 {
        self.surrogate_day_s / self.numerical_day_s
    }

    /// Units of one surrogate macro-step.
    pub fn macro_step_units(&self) -> f64 {
        self.surrogate_day_s / (STEPS_PER_DAY / self.surrogate_gamma) as f64 / self.unit_seconds
    }

    /// Propagation units of a work tally.
    pub fn propagation_units(&self, work: &WorkCounts) -> f64 {
        work.numerical_member_steps as f64 + work.surrogate_member_macro_steps as f64 * self.macro_step_units()
    }
}

/// Times 200 steps of each propagator, averaged over `repetitions` after one warmup.
pub fn measure_cost_unit(
    model: &mut QgModel,
    surrogate: &mut dyn Propagator,
    state: &LayeredField,
    repetitions: usize,
) -> Result<CostModel> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument("at least one timing repetition".into()));
    }
    let gamma = surrogate.granularity();
    if STEPS_PER_DAY % gamma != 0 {
        return Err(Error::Config(format!("surrogate macro-step {gamma} does not divide a day")));
    }
    let time = |p: &mut dyn Propagator| -> Result<f64> {
        p.advance(state, STEPS_PER_DAY)?;
        let t = Instant::now();
        for _ in 0..repetitions {
            std::hint::black_box(p.advance(state, STEPS_PER_DAY)?);
        }
        Ok(t.elapsed().as_secs_f64() / repetitions as f64)
    };
    let numerical_day_s = time(model)?;
    let surrogate_day_s = time(surrogate)?;
    Ok(CostModel {
        unit_seconds: numerical_day_s / STEPS_PER_DAY as f64,
        numerical_day_s,
        surrogate_day_s,
        surrogate_gamma: gamma,
        repetitions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n_numerical: usize,
    pub n_data_driven: usize,
    pub mean_e1: Spread,
    pub numerical_member_steps: u64,
    pub surrogate_member_macro_steps: u64,
    /// Propagation units per cycle from measured unit costs.
    pub cost_units_per_cycle: f64,
    /// Measured analysis wall-clock per cycle, in units.
    pub analysis_units_per_cycle: f64,
}

/// Cycles every `(n_numerical, n_data_driven)` point of `lattice`; points
/// with no data-driven members run the plain filter.
pub fn run_scaling_study(
    base: &ExperimentConfig,
    lattice: &[(usize, usize)],
    twins: &[TwinData],
    clim: &Climatology,
    cost: &CostModel,
    out: Option<&Path>,
) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::with_capacity(lattice.len());
    for &(n_numerical, n_data_driven) in lattice {
        let mut cfg = base.clone();
        cfg.da.n_numerical = n_numerical;
        cfg.da.n_data_driven = n_data_driven;
        cfg.da.localization = None;
        cfg.covariance_probe = None;
        cfg.algorithm = if n_data_driven == 0 { Algorithm::Enkf } else { Algorithm::Henkf };
        if cfg.algorithm == Algorithm::Henkf && cfg.surrogate.is_none() {
            cfg.surrogate = Some(SurrogateSpec::default());
        }
        let sub = out.map(|d| d.join(format!("nN{n_numerical}_nD{n_data_driven}")));
        let report = run_da_experiment(&cfg, twins, clim, sub.as_deref())?;
        let cycles = (cfg.n_cycles * cfg.n_seeds) as f64;
        let work = WorkCounts {
            numerical_member_steps: report.summary.numerical_member_steps,
            surrogate_member_macro_steps: report.summary.surrogate_member_macro_steps,
        };
        rows.push(ScalingRow {
            n_numerical,
            n_data_driven,
            mean_e1: report.summary.mean_e1_analysis,
            numerical_member_steps: work.numerical_member_steps,
            surrogate_member_macro_steps: work.surrogate_member_macro_steps,
            cost_units_per_cycle: cost.propagation_units(&work) / cycles,
            analysis_units_per_cycle: report.total_wallclock().analysis_s / cost.unit_seconds / cycles,
        });
    }
    if let Some(dir) = out {
        io::create_dir(dir)?;
        io::write_text(&dir.join("scaling.csv"), &scaling_csv(&rows))?;
        io::write_text(&dir.join("scaling_cost.csv"), &scaling_cost_csv(&rows, cost))?;
        io::write_json(&dir.join("cost_model.json"), cost)?;
    }
    Ok(rows)
}

/// Deterministic columns of the scaling table.
pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from("n_numerical,n_data_driven,mean_E1,std_E1,numerical_member_steps,surrogate_member_macro_steps\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.12e},{:.12e},{},{}",
            r.n_numerical, r.n_data_driven, r.mean_e1.mean, r.mean_e1.std, r.numerical_member_steps, r.surrogate_member_macro_steps
        );
    }
    out
}

/// Cost columns, all derived from the measured unit.
pub fn scaling_cost_csv(rows: &[ScalingRow], cost: &CostModel) -> String {
    let mut out = String::from("n_numerical,n_data_driven,mean_E1,cost_units_per_cycle,analysis_units_per_cycle,unit_seconds,surrogate_ratio\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
            r.n_numerical,
            r.n_data_driven,
            r.mean_e1.mean,
            r.cost_units_per_cycle,
            r.analysis_units_per_cycle,
            cost.unit_seconds,
            cost.ratio()
        );
    }
    out
}
