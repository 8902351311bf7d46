//! Stochastic ensemble Kalman filter and its hybrid variant, in which the
//! background covariance comes from a large surrogate-propagated ensemble
//! while the update is applied to a small numerical ensemble.
//!
//! The observation operator is the identity. Gains are `K = P (P + r I)^-1`
//! with `P = A A^T / (n - 1)`; the ensemble-space solver never forms `P`.

use std::time::Instant;

use faer::linalg::matmul::matmul;
use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::linalg::solvers::Solve;
use faer::{Accum, Mat, MatRef, Par, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Role, StreamKey};
use crate::spectral::{Grid, LayeredField, Representation};
use crate::surrogate::Propagator;

/// Largest state dimension for which dense covariance solves are allowed.
pub const DENSE_THRESHOLD: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsErrorScale {
    /// `r = sigma_obs`.
    Sigma,
    /// `r = sigma_obs^2`.
    SigmaSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    /// Gaspari-Cohn half-width in grid cells.
    pub radius_cells: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaConfig {
    pub alpha: u64,
    pub gamma: u64,
    pub sigma_obs: f64,
    pub sigma_b: f64,
    pub n_numerical: usize,
    pub n_data_driven: usize,
    #[serde(default)]
    pub localization: Option<Localization>,
    #[serde(default = "default_scale")]
    pub obs_error_scale: ObsErrorScale,
    /// Overrides the scale-derived `r` when present.
    #[serde(default)]
    pub obs_error_r: Option<f64>,
    pub seed: u64,
}

fn default_scale() -> ObsErrorScale {
    ObsErrorScale::Sigma
}

impl DaConfig {
    /// Plain EnKF with the given member count and spread.
    pub fn enkf(n_numerical: usize, sigma_b: f64, seed: u64) -> Self {
        DaConfig {
            alpha: 200,
            gamma: 40,
            sigma_obs: 0.1,
            sigma_b,
            n_numerical,
            n_data_driven: 0,
            localization: None,
            obs_error_scale: ObsErrorScale::Sigma,
            obs_error_r: None,
            seed,
        }
    }

    pub fn henkf(n_numerical: usize, n_data_driven: usize, sigma_b: f64, seed: u64) -> Self {
        DaConfig {
            n_data_driven,
            ..Self::enkf(n_numerical, sigma_b, seed)
        }
    }

    /// Observation error scale `r` used in the gain.
    pub fn r(&self) -> f64 {
        self.obs_error_r.unwrap_or(match self.obs_error_scale {
            ObsErrorScale::Sigma => self.sigma_obs,
            ObsErrorScale::SigmaSquared => self.sigma_obs * self.sigma_obs,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(format!("DaConfig: {what}")));
        if self.gamma == 0 || self.alpha % self.gamma != 0 {
            return bad(format!("gamma {} must divide alpha {}", self.gamma, self.alpha));
        }
        if !(self.sigma_obs > 0.0) {
            return bad("sigma_obs must be positive".into());
        }
        if !(self.sigma_b >= 0.0) {
            return bad("sigma_b must be non-negative".into());
        }
        if self.n_numerical == 0 {
            return bad("n_numerical must be at least 1".into());
        }
        if !(self.r() > 0.0) {
            return bad("observation error scale must be positive".into());
        }
        if let Some(loc) = self.localization {
            if !(loc.radius_cells > 0.0) {
                return bad("localization radius must be positive".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleRole {
    Numerical,
    DataDriven,
    Analysis,
    Observation,
}

/// Members in grid representation on one shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<LayeredField>,
    /// Noise stream word of each member (0 when the member was not drawn).
    pub member_streams: Vec<u64>,
    pub role: EnsembleRole,
}

impl Ensemble {
    pub fn new(members: Vec<LayeredField>, member_streams: Vec<u64>, role: EnsembleRole) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidArgument("an ensemble needs at least one member".into()))?;
        let grid = *first.grid();
        for m in &members {
            grid.check_same(m.grid())?;
            if m.representation() != Representation::Grid {
                return Err(Error::WrongRepresentation {
                    expected: Representation::Grid,
                    found: m.representation(),
                });
            }
        }
        if member_streams.len() != members.len() {
            return Err(Error::InvalidArgument("one stream word per member".into()));
        }
        Ok(Ensemble {
            members,
            member_streams,
            role,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn grid(&self) -> &Grid {
        self.members[0].grid()
    }

    pub fn mean(&self) -> LayeredField {
        let s = self.grid().state_dim();
        let mut mean = vec![0.0; s];
        for m in &self.members {
            for (a, v) in mean.iter_mut().zip(m.values().expect("grid members")) {
                *a += v;
            }
        }
        let inv = 1.0 / self.len() as f64;
        mean.iter_mut().for_each(|a| *a *= inv);
        LayeredField::from_values(*self.grid(), mean).expect("shape preserved")
    }
}

/// `n` members `state + sigma * N(0, 1)`, member `j` drawn from stream `key.stream(j)`.
pub fn generate_ensemble(state: &LayeredField, n: usize, sigma: f64, key: StreamKey) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::InvalidArgument("ensemble size must be positive".into()));
    }
    let base = state.gridded()?;
    let role = match key.role {
        Role::DataDriven => EnsembleRole::DataDriven,
        Role::ObservationEnsemble | Role::Observation => EnsembleRole::Observation,
        _ => EnsembleRole::Numerical,
    };
    let mut members = Vec::with_capacity(n);
    let mut streams = Vec::with_capacity(n);
    for j in 0..n as u32 {
        let mut values = base.values()?.to_vec();
        key.add_noise(j, sigma, &mut values);
        members.push(LayeredField::from_values(*base.grid(), values)?);
        streams.push(key.stream(j));
    }
    Ensemble::new(members, streams, role)
}

/// Perturbed-observation ensemble `obs + sigma_obs * N(0, 1)`.
pub fn perturb_observations(obs: &LayeredField, n: usize, sigma_obs: f64, key: StreamKey) -> Result<Ensemble> {
    let mut e = generate_ensemble(obs, n, sigma_obs, key)?;
    e.role = EnsembleRole::Observation;
    Ok(e)
}

/// Ensemble mean and anomaly matrix `A` (state_dim x n, column j = member j - mean).
#[derive(Debug, Clone)]
pub struct AnomalyFactor {
    pub a: Mat<f64>,
    pub mean: Vec<f64>,
    pub grid: Grid,
}

impl AnomalyFactor {
    pub fn members(&self) -> usize {
        self.a.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// A factor from explicit anomaly columns (used by oracles).
    pub fn from_matrix(grid: Grid, a: Mat<f64>) -> Result<Self> {
        if a.nrows() != grid.state_dim() {
            return Err(Error::GridMismatch(format!(
                "{} anomaly rows for state dimension {}",
                a.nrows(),
                grid.state_dim()
            )));
        }
        let mean = vec![0.0; a.nrows()];
        Ok(AnomalyFactor { a, mean, grid })
    }

    /// Dense `P = A A^T / (n - 1)`; zero when `n <= 1`.
    pub fn covariance(&self) -> Mat<f64> {
        let s = self.state_dim();
        let mut p = Mat::zeros(s, s);
        let n = self.members();
        if n > 1 {
            matmul(p.as_mut(), Accum::Replace, self.a.as_ref(), self.a.transpose(), 1.0 / (n - 1) as f64, Par::Seq);
        }
        p
    }
}

pub fn anomalies(ens: &Ensemble) -> AnomalyFactor {
    let grid = *ens.grid();
    let mean = ens.mean();
    let mean = mean.into_values().expect("grid mean");
    let (s, n) = (grid.state_dim(), ens.len());
    let mut a = Mat::zeros(s, n);
    for (j, m) in ens.members.iter().enumerate() {
        let col = a.col_as_slice_mut(j);
        for ((c, v), mu) in col.iter_mut().zip(m.values().expect("grid members")).zip(&mean) {
            *c = v - mu;
        }
    }
    AnomalyFactor { a, mean, grid }
}

/// Row `index` of `P`; with `normalize`, correlations `P_ij / sqrt(P_ii P_jj)`
/// (zero where a variance vanishes).
pub fn covariance_row(factor: &AnomalyFactor, index: usize, normalize: bool) -> Result<Vec<f64>> {
    let (s, n) = (factor.state_dim(), factor.members());
    if index >= s {
        return Err(Error::InvalidArgument(format!("state index {index} out of range {s}")));
    }
    if n <= 1 {
        return Ok(vec![0.0; s]);
    }
    let scale = 1.0 / (n - 1) as f64;
    let mut row = vec![0.0; s];
    let mut var = vec![0.0; s];
    for j in 0..n {
        let col = factor.a.col_as_slice(j);
        let ai = col[index];
        for ((r, v), &x) in row.iter_mut().zip(var.iter_mut()).zip(col) {
            *r += ai * x;
            *v += x * x;
        }
    }
    row.iter_mut().for_each(|r| *r *= scale);
    if normalize {
        let vi = var[index] * scale;
        for (r, v) in row.iter_mut().zip(&var) {
            let d = (vi * v * scale).sqrt();
            *r = if d > 0.0 { *r / d } else { 0.0 };
        }
    }
    Ok(row)
}

/// Fifth-order piecewise-rational compactly supported correlation with
/// support `2c`.
pub fn gaspari_cohn(dist: f64, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("Gaspari-Cohn half-width {c} must be positive")));
    }
    if !(dist >= 0.0) {
        return Err(Error::InvalidArgument(format!("distance {dist} must be non-negative")));
    }
    let z = dist / c;
    let v = if z <= 1.0 {
        (((-0.25 * z + 0.5) * z + 0.625) * z - 5.0 / 3.0) * z * z + 1.0
    } else if z <= 2.0 {
        ((((z / 12.0 - 0.5) * z + 0.625) * z + 5.0 / 3.0) * z - 5.0) * z + 4.0 - 2.0 / (3.0 * z)
    } else {
        0.0
    };
    Ok(v)
}

/// Horizontal periodic distance in grid cells between two state indices.
pub fn cell_distance(grid: &Grid, i: usize, j: usize) -> f64 {
    let np = grid.points();
    let (pi, pj) = (i % np, j % np);
    let (xi, yi) = (pi % grid.nx, pi / grid.nx);
    let (xj, yj) = (pj % grid.nx, pj / grid.nx);
    let wrap = |d: usize, n: usize| d.min(n - d) as f64;
    let dx = wrap(xi.abs_diff(xj), grid.nx);
    let dy = wrap(yi.abs_diff(yj), grid.ny);
    (dx * dx + dy * dy).sqrt()
}

/// Gaspari-Cohn weights tabulated by periodic displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationKernel {
    nx: usize,
    ny: usize,
    /// `table[dy * nx + dx]` for displacements `0 <= dx < nx`, `0 <= dy < ny`.
    table: Vec<f64>,
}

impl LocalizationKernel {
    pub fn new(grid: &Grid, radius_cells: f64) -> Result<Self> {
        let (nx, ny) = (grid.nx, grid.ny);
        let mut table = Vec::with_capacity(nx * ny);
        for dy in 0..ny {
            for dx in 0..nx {
                let (wx, wy) = (dx.min(nx - dx) as f64, dy.min(ny - dy) as f64);
                table.push(gaspari_cohn((wx * wx + wy * wy).sqrt(), radius_cells)?);
            }
        }
        Ok(LocalizationKernel { nx, ny, table })
    }

    /// Unit weight at every displacement; localizing with it changes nothing.
    pub fn uniform(grid: &Grid) -> Self {
        LocalizationKernel {
            nx: grid.nx,
            ny: grid.ny,
            table: vec![1.0; grid.nx * grid.ny],
        }
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let np = self.nx * self.ny;
        let (pi, pj) = (i % np, j % np);
        let dx = (pi % self.nx + self.nx - pj % self.nx) % self.nx;
        let dy = (pi / self.nx + self.ny - pj / self.nx) % self.ny;
        self.table[dy * self.nx + dx]
    }
}

/// Dense `rho` over the full two-layer state; refused above `dense_threshold`.
pub fn localization_weights(grid: &Grid, radius_cells: f64, dense_threshold: usize) -> Result<Mat<f64>> {
    let s = grid.state_dim();
    if s > dense_threshold {
        return Err(Error::DenseThreshold {
            dim: s,
            threshold: dense_threshold,
        });
    }
    let kernel = LocalizationKernel::new(grid, radius_cells)?;
    Ok(Mat::from_fn(s, s, |i, j| kernel.weight(i, j)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    EnsembleSpace,
    Dense,
    DenseLocalized,
}

#[derive(Debug, Clone)]
pub struct GainSolver {
    pub mode: GainMode,
    pub r: f64,
    pub localization: Option<LocalizationKernel>,
    pub dense_threshold: usize,
}

impl GainSolver {
    pub fn ensemble_space(r: f64) -> Self {
        GainSolver {
            mode: GainMode::EnsembleSpace,
            r,
            localization: None,
            dense_threshold: DENSE_THRESHOLD,
        }
    }

    pub fn dense(r: f64) -> Self {
        GainSolver {
            mode: GainMode::Dense,
            ..Self::ensemble_space(r)
        }
    }

    pub fn localized(grid: &Grid, r: f64, radius_cells: f64) -> Result<Self> {
        Ok(GainSolver {
            mode: GainMode::DenseLocalized,
            localization: Some(LocalizationKernel::new(grid, radius_cells)?),
            ..Self::ensemble_space(r)
        })
    }

    /// Solver matching a configuration: localized when requested, else ensemble space.
    pub fn for_config(grid: &Grid, cfg: &DaConfig) -> Result<Self> {
        match cfg.localization {
            Some(loc) => Self::localized(grid, cfg.r(), loc.radius_cells),
            None => Ok(Self::ensemble_space(cfg.r())),
        }
    }

    /// Factorizes the gain for a covariance factor.
    pub fn prepare<'a>(&self, factor: &'a AnomalyFactor) -> Result<PreparedGain<'a>> {
        if !(self.r > 0.0) || !self.r.is_finite() {
            return Err(Error::InvalidArgument(format!("observation error scale {} must be positive", self.r)));
        }
        let (s, n) = (factor.state_dim(), factor.members());
        if n <= 1 {
            return Ok(PreparedGain::Zero);
        }
        if factor.a.col_iter().any(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("non-finite anomalies".into()));
        }
        match self.mode {
            GainMode::EnsembleSpace => {
                let mut m = lower_product(factor.a.transpose(), factor.a.as_ref(), 1.0);
                let shift = (n - 1) as f64 * self.r;
                for i in 0..n {
                    m[(i, i)] += shift;
                }
                let llt = m
                    .llt(Side::Lower)
                    .map_err(|e| Error::Linalg(format!("ensemble-space Cholesky: {e:?}")))?;
                Ok(PreparedGain::EnsembleSpace { a: factor.a.as_ref(), llt })
            }
            GainMode::Dense | GainMode::DenseLocalized => {
                if s > self.dense_threshold {
                    return Err(Error::DenseThreshold {
                        dim: s,
                        threshold: self.dense_threshold,
                    });
                }
                let mut p = lower_product(factor.a.as_ref(), factor.a.transpose(), 1.0 / (n - 1) as f64);
                if self.mode == GainMode::DenseLocalized {
                    let kernel = self
                        .localization
                        .as_ref()
                        .ok_or_else(|| Error::Config("localized gain without a kernel".into()))?;
                    for j in 0..s {
                        for (i, v) in p.col_as_slice_mut(j).iter_mut().enumerate().skip(j) {
                            *v *= kernel.weight(i, j);
                        }
                    }
                }
                for i in 0..s {
                    p[(i, i)] += self.r;
                }
                let llt = p
                    .llt(Side::Lower)
                    .map_err(|e| Error::Linalg(format!("dense Cholesky: {e:?}")))?;
                Ok(PreparedGain::Dense { llt, r: self.r })
            }
        }
    }
}

/// Lower triangle of the symmetric product `alpha * lhs * rhs`; the strict
/// upper triangle is left zero (the Cholesky factorizations read only the lower).
fn lower_product(lhs: MatRef<'_, f64>, rhs: MatRef<'_, f64>, alpha: f64) -> Mat<f64> {
    let mut out = Mat::zeros(lhs.nrows(), rhs.ncols());
    triangular::matmul(
        out.as_mut(),
        BlockStructure::TriangularLower,
        Accum::Replace,
        lhs,
        BlockStructure::Rectangular,
        rhs,
        BlockStructure::Rectangular,
        alpha,
        Par::Seq,
    );
    out
}

pub enum PreparedGain<'a> {
    /// Vanishing covariance: no correction.
    Zero,
    EnsembleSpace { a: MatRef<'a, f64>, llt: faer::linalg::solvers::Llt<f64> },
    /// Factor of `P + r I` (`P` possibly localized); `K D = D - r (P + r I)^-1 D`.
    Dense { llt: faer::linalg::solvers::Llt<f64>, r: f64 },
}

impl PreparedGain<'_> {
    /// `K D` for the columns of `d` (state_dim x m).
    pub fn apply_many(&self, d: MatRef<'_, f64>) -> Mat<f64> {
        match self {
            PreparedGain::Zero => Mat::zeros(d.nrows(), d.ncols()),
            PreparedGain::EnsembleSpace { a, llt } => {
                let mut y = Mat::zeros(a.ncols(), d.ncols());
                matmul(y.as_mut(), Accum::Replace, a.transpose(), d, 1.0, Par::Seq);
                llt.solve_in_place(y.as_mut());
                let mut out = Mat::zeros(d.nrows(), d.ncols());
                matmul(out.as_mut(), Accum::Replace, *a, y.as_ref(), 1.0, Par::Seq);
                out
            }
            PreparedGain::Dense { llt, r } => {
                let mut x = d.to_owned();
                llt.solve_in_place(x.as_mut());
                Mat::from_fn(d.nrows(), d.ncols(), |i, j| d[(i, j)] - r * x[(i, j)])
            }
        }
    }

    pub fn apply(&self, d: &[f64]) -> Vec<f64> {
        let out = self.apply_many(MatRef::from_column_major_slice(d, d.len(), 1));
        out.col_as_slice(0).to_vec()
    }
}

/// `K d` in ensemble space for anomaly factor `factor` and error scale `r`.
pub fn apply_gain(factor: &AnomalyFactor, r: f64, d: &[f64]) -> Result<Vec<f64>> {
    if d.len() != factor.state_dim() {
        return Err(Error::InvalidArgument("innovation length differs from state dimension".into()));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite innovation".into()));
    }
    Ok(GainSolver::ensemble_space(r).prepare(factor)?.apply(d))
}

/// `psi_a^j = psi_b^j + K (psi_obs^j - psi_b^j)` for every member.
pub fn analysis_update(background: &Ensemble, obs: &Ensemble, gain: &PreparedGain<'_>) -> Result<Ensemble> {
    if background.len() != obs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} background members but {} observation members",
            background.len(),
            obs.len()
        )));
    }
    let grid = *background.grid();
    grid.check_same(obs.grid())?;
    let (s, n) = (grid.state_dim(), background.len());
    let mut d = Mat::zeros(s, n);
    for j in 0..n {
        let (b, o) = (background.members[j].values()?, obs.members[j].values()?);
        for ((x, bv), ov) in d.col_as_slice_mut(j).iter_mut().zip(b).zip(o) {
            *x = ov - bv;
        }
    }
    let kd = gain.apply_many(d.as_ref());
    let mut members = Vec::with_capacity(n);
    for j in 0..n {
        let mut v = background.members[j].values()?.to_vec();
        for (x, k) in v.iter_mut().zip(kd.col_as_slice(j)) {
            *x += k;
        }
        members.push(LayeredField::from_values(grid, v)?);
    }
    Ensemble::new(members, background.member_streams.clone(), EnsembleRole::Analysis)
}

/// Deterministic work tallies of one cycle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkCounts {
    /// Fine solver steps summed over numerical members.
    pub numerical_member_steps: u64,
    /// Surrogate macro-steps summed over data-driven members.
    pub surrogate_member_macro_steps: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleTiming {
    pub numerical_s: f64,
    pub surrogate_s: f64,
    pub analysis_s: f64,
}

pub struct CycleOutput {
    pub analysis: Ensemble,
    pub background_mean: LayeredField,
    pub analysis_mean: LayeredField,
    /// Factor whose covariance produced the gain.
    pub covariance: AnomalyFactor,
    pub work: WorkCounts,
    pub timing: CycleTiming,
}

fn propagate_members(ens: &Ensemble, model: &mut dyn Propagator, steps: u64, role: EnsembleRole) -> Result<Ensemble> {
    let mut members = Vec::with_capacity(ens.len());
    for m in &ens.members {
        members.push(model.advance(m, steps)?.gridded()?);
    }
    Ensemble::new(members, ens.member_streams.clone(), role)
}

fn obs_key(cfg: &DaConfig, cycle: u32) -> StreamKey {
    StreamKey::new(cfg.seed, Role::ObservationEnsemble, cycle)
}

/// One stochastic EnKF cycle: forecast `alpha` steps, then assimilate `obs`.
pub fn enkf_cycle(
    ens: &Ensemble,
    model: &mut dyn Propagator,
    obs: &LayeredField,
    cfg: &DaConfig,
    solver: &GainSolver,
    cycle: u32,
) -> Result<CycleOutput> {
    cfg.validate()?;
    let t = Instant::now();
    let background = propagate_members(ens, model, cfg.alpha, EnsembleRole::Numerical)?;
    let numerical_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let factor = anomalies(&background);
    let obs_ens = perturb_observations(obs, background.len(), cfg.sigma_obs, obs_key(cfg, cycle))?;
    let analysis = {
        let gain = solver.prepare(&factor)?;
        analysis_update(&background, &obs_ens, &gain)?
    };
    let analysis_s = t.elapsed().as_secs_f64();
    Ok(CycleOutput {
        background_mean: background.mean(),
        analysis_mean: analysis.mean(),
        analysis,
        covariance: factor,
        work: WorkCounts {
            numerical_member_steps: cfg.alpha * ens.len() as u64,
            surrogate_member_macro_steps: 0,
        },
        timing: CycleTiming {
            numerical_s,
            surrogate_s: 0.0,
            analysis_s,
        },
    })
}

/// One hybrid cycle. `restart` seeds the data-driven ensemble (the previous
/// mean analysis, or the noisy initial state on the first cycle); its noise
/// comes from `dd_key`.
#[allow(clippy::too_many_arguments)]
pub fn henkf_cycle(
    ens: &Ensemble,
    model: &mut dyn Propagator,
    surrogate: &mut dyn Propagator,
    restart: &LayeredField,
    obs: &LayeredField,
    cfg: &DaConfig,
    solver: &GainSolver,
    cycle: u32,
    dd_key: StreamKey,
) -> Result<CycleOutput> {
    cfg.validate()?;
    if cfg.n_data_driven == 0 {
        return Err(Error::Config("hybrid cycle needs n_data_driven > 0".into()));
    }
    let granularity = surrogate.granularity();
    if granularity == 0 || cfg.alpha % granularity != 0 {
        return Err(Error::Config(format!(
            "surrogate macro-step {granularity} does not divide alpha {}",
            cfg.alpha
        )));
    }
    let t = Instant::now();
    let dd = generate_ensemble(restart, cfg.n_data_driven, cfg.sigma_b, dd_key)?;
    let dd = propagate_members(&dd, surrogate, cfg.alpha, EnsembleRole::DataDriven)?;
    let surrogate_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let background = propagate_members(ens, model, cfg.alpha, EnsembleRole::Numerical)?;
    let numerical_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let factor = anomalies(&dd);
    let obs_ens = perturb_observations(obs, background.len(), cfg.sigma_obs, obs_key(cfg, cycle))?;
    let analysis = {
        let gain = solver.prepare(&factor)?;
        analysis_update(&background, &obs_ens, &gain)?
    };
    let analysis_s = t.elapsed().as_secs_f64();
    Ok(CycleOutput {
        background_mean: background.mean(),
        analysis_mean: analysis.mean(),
        analysis,
        covariance: factor,
        work: WorkCounts {
            numerical_member_steps: cfg.alpha * ens.len() as u64,
            surrogate_member_macro_steps: (cfg.alpha / granularity) * cfg.n_data_driven as u64,
        },
        timing: CycleTiming {
            numerical_s,
            surrogate_s,
            analysis_s,
        },
    })
}
