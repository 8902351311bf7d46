//! Cheap propagators standing in for a learned emulator: a map
//! `psi(t) -> psi(t + gamma dt)` applied once per macro-step.
//!
//! Two kinds exist. `Coarse` reruns the channel model at reduced resolution
//! (and optionally a longer time step). `Linear` multiplies every Fourier
//! mode by a complex 2x2 layer-coupling matrix fitted by ridge regression.

use std::path::Path;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, TrajectoryManifest};
use crate::qg::{QgModel, QgParams, SolverState};
use crate::spectral::{Grid, LayeredField, Representation};

/// Anything that advances a streamfunction by a whole number of fine steps.
pub trait Propagator {
    fn grid(&self) -> &Grid;

    /// Fine steps covered by one indivisible application (1 for the solver).
    fn granularity(&self) -> u64;

    fn advance(&mut self, psi: &LayeredField, steps: u64) -> Result<LayeredField>;
}

impl Propagator for QgModel {
    fn grid(&self) -> &Grid {
        QgModel::grid(self)
    }

    fn granularity(&self) -> u64 {
        1
    }

    fn advance(&mut self, psi: &LayeredField, steps: u64) -> Result<LayeredField> {
        self.advance_psi(psi, steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    Coarse,
    Linear,
}

#[derive(Debug, Clone)]
pub struct CoarsePayload {
    pub factor: usize,
    /// Coarse time step in units of the fine one; divides `gamma`.
    pub dt_factor: usize,
    /// Constants of the coarse model (hyperdiffusion set for the coarse grid).
    pub params: QgParams,
    model: QgModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearPayload {
    /// Row-major `[g11, g12, g21, g22]` per stored mode, in storage order.
    pub gains: Vec<[Complex64; 4]>,
    pub lambda: f64,
    pub n_tr: u64,
}

#[derive(Debug, Clone)]
pub enum SurrogatePayload {
    Coarse(CoarsePayload),
    Linear(LinearPayload),
}

#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub gamma: u64,
    pub grid: Grid,
    pub payload: SurrogatePayload,
}

/// Default coarse time step multiple.
pub const DEFAULT_COARSE_DT_FACTOR: usize = 20;

impl SurrogateModel {
    /// Coarse-resolution solver surrogate on `grid / factor` with time step
    /// `dt_factor * dt`; fine `params` are reused except for hyperdiffusion,
    /// which follows the coarse grid.
    pub fn coarse(grid: Grid, params: QgParams, gamma: u64, factor: usize, dt_factor: usize) -> Result<Self> {
        if gamma == 0 || dt_factor == 0 || gamma % dt_factor as u64 != 0 {
            return Err(Error::Config(format!(
                "coarse surrogate: dt_factor {dt_factor} must divide gamma {gamma}"
            )));
        }
        let mut coarse = grid.coarsened(factor)?;
        coarse.dt = grid.dt * dt_factor as f64;
        let params = QgParams {
            nu: QgParams::hyperdiffusion_for(&coarse),
            ..params
        };
        Self::coarse_with_params(grid, params, gamma, factor, dt_factor)
    }

    /// As [`SurrogateModel::coarse`] with the coarse constants given verbatim.
    pub fn coarse_with_params(grid: Grid, params: QgParams, gamma: u64, factor: usize, dt_factor: usize) -> Result<Self> {
        if gamma == 0 || dt_factor == 0 || gamma % dt_factor as u64 != 0 {
            return Err(Error::Config(format!(
                "coarse surrogate: dt_factor {dt_factor} must divide gamma {gamma}"
            )));
        }
        let mut coarse = grid.coarsened(factor)?;
        coarse.dt = grid.dt * dt_factor as f64;
        let model = QgModel::new(coarse, params)?;
        Ok(SurrogateModel {
            gamma,
            grid,
            payload: SurrogatePayload::Coarse(CoarsePayload {
                factor,
                dt_factor,
                params,
                model,
            }),
        })
    }

    pub fn linear(grid: Grid, gamma: u64, payload: LinearPayload) -> Result<Self> {
        if gamma == 0 {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if payload.gains.len() != grid.coeffs_per_layer() {
            return Err(Error::GridMismatch(format!(
                "{} gain matrices for {} modes",
                payload.gains.len(),
                grid.coeffs_per_layer()
            )));
        }
        if payload.gains.iter().flatten().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::InvalidArgument("non-finite surrogate gains".into()));
        }
        Ok(SurrogateModel {
            gamma,
            grid,
            payload: SurrogatePayload::Linear(payload),
        })
    }

    /// Linear surrogate with `G = I` on every mode.
    pub fn identity(grid: Grid, gamma: u64) -> Self {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        let gains = vec![[one, zero, zero, one]; grid.coeffs_per_layer()];
        Self::linear(grid, gamma, LinearPayload { gains, lambda: 0.0, n_tr: 0 })
            .expect("identity gains are well formed")
    }

    pub fn kind(&self) -> SurrogateKind {
        match self.payload {
            SurrogatePayload::Coarse(_) => SurrogateKind::Coarse,
            SurrogatePayload::Linear(_) => SurrogateKind::Linear,
        }
    }

    /// One macro-step of `gamma` fine steps.
    pub fn apply(&mut self, psi: &LayeredField) -> Result<LayeredField> {
        self.propagate(psi, 1)
    }

    /// `n_macro` successive macro-steps; the result has the input's representation.
    pub fn propagate(&mut self, psi: &LayeredField, n_macro: u64) -> Result<LayeredField> {
        self.grid.check_same(psi.grid())?;
        if n_macro == 0 {
            return Ok(psi.clone());
        }
        let repr = psi.representation();
        let out = match &mut self.payload {
            SurrogatePayload::Coarse(c) => {
                // refine followed by coarsen is exact, so the state can stay
                // coarse between macro-steps; every macro-step restarts the
                // two-level scheme since the map is memoryless.
                let coarse_grid = *c.model.grid();
                let mut coarse = psi.coarsen(c.factor)?.with_grid(coarse_grid)?;
                let micro = self.gamma / c.dt_factor as u64;
                for _ in 0..n_macro {
                    let mut state = SolverState::from_psi(&coarse)?;
                    c.model.propagate(&mut state, micro)?;
                    coarse = state.psi;
                }
                coarse.refine(c.factor)?.with_grid(self.grid)?
            }
            SurrogatePayload::Linear(l) => {
                let mut spec = psi.spectral()?.with_grid(self.grid)?;
                let nc = self.grid.coeffs_per_layer();
                let c = spec.coeffs_mut()?;
                for _ in 0..n_macro {
                    let (c1, c2) = c.split_at_mut(nc);
                    for ((a, b), g) in c1.iter_mut().zip(c2.iter_mut()).zip(&l.gains) {
                        let (x, y) = (*a, *b);
                        *a = g[0] * x + g[1] * y;
                        *b = g[2] * x + g[3] * y;
                    }
                }
                spec
            }
        };
        match repr {
            Representation::Grid => out.to_grid(),
            Representation::Spectral => Ok(out),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bytes(path, &encode_qgs1(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read_bytes(path)?;
        decode_qgs1(&bytes, path)
    }
}

impl Propagator for SurrogateModel {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn granularity(&self) -> u64 {
        self.gamma
    }

    fn advance(&mut self, psi: &LayeredField, steps: u64) -> Result<LayeredField> {
        if steps % self.gamma != 0 {
            return Err(Error::Config(format!(
                "{steps} steps is not a whole number of {}-step macro-steps",
                self.gamma
            )));
        }
        self.propagate(psi, steps / self.gamma)
    }
}

/// Input/target snapshot index pairs drawn from one trajectory.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub manifest: TrajectoryManifest,
    pub pairs: Vec<(usize, usize)>,
    pub gamma: u64,
    pub stride: u64,
    /// Seed of the trajectory the pairs come from.
    pub seed: u64,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Pairs `(t, t + gamma dt)` whose start times advance by `stride` steps.
///
/// Both `gamma` and `stride` must be multiples of the trajectory's save
/// interval. With `stride = gamma` a trajectory of `10 gamma + 1` steps
/// yields 10 non-overlapping pairs.
pub fn build_training_set(manifest: &TrajectoryManifest, gamma: u64, stride: u64) -> Result<TrainingSet> {
    let every = manifest.save_every;
    if every == 0 || gamma == 0 || stride == 0 || gamma % every != 0 || stride % every != 0 {
        return Err(Error::Config(format!(
            "gamma {gamma} and stride {stride} must be positive multiples of save_every {every}"
        )));
    }
    for w in manifest.snapshots.windows(2) {
        if w[1].step != w[0].step + every {
            return Err(Error::Config("trajectory snapshots are not evenly spaced".into()));
        }
    }
    let (offset, hop) = ((gamma / every) as usize, (stride / every) as usize);
    let pairs = (0..manifest.len().saturating_sub(offset))
        .step_by(hop)
        .map(|i| (i, i + offset))
        .collect();
    Ok(TrainingSet {
        manifest: manifest.clone(),
        pairs,
        gamma,
        stride,
        seed: manifest.seed,
    })
}

/// Per-mode complex ridge regression `G = Y X^H (X X^H + lambda I)^-1`.
///
/// Moments are averaged over pairs, so duplicating every pair leaves `G`
/// unchanged.
pub fn train_linear_surrogate(data: &TrainingSet, lambda: f64) -> Result<SurrogateModel> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let grid = data.manifest.grid;
    let mut acc = MomentAccumulator::new(grid);
    for &(i, j) in &data.pairs {
        let x = data.manifest.load_snapshot(i)?;
        let y = data.manifest.load_snapshot(j)?;
        acc.add(&x, &y)?;
    }
    SurrogateModel::linear(grid, data.gamma, acc.solve(lambda)?)
}

/// Running second moments `X X^H` and `Y X^H` for every mode.
pub struct MomentAccumulator {
    grid: Grid,
    xx: Vec<[Complex64; 4]>,
    yx: Vec<[Complex64; 4]>,
    n: u64,
}

impl MomentAccumulator {
    pub fn new(grid: Grid) -> Self {
        let z = [Complex64::new(0.0, 0.0); 4];
        let nc = grid.coeffs_per_layer();
        MomentAccumulator {
            grid,
            xx: vec![z; nc],
            yx: vec![z; nc],
            n: 0,
        }
    }

    pub fn add(&mut self, input: &LayeredField, target: &LayeredField) -> Result<()> {
        self.grid.check_same(input.grid())?;
        self.grid.check_same(target.grid())?;
        let (xs, ys) = (input.spectral()?, target.spectral()?);
        let (x, y) = (xs.coeffs()?, ys.coeffs()?);
        let nc = self.grid.coeffs_per_layer();
        for i in 0..nc {
            let (x1, x2, y1, y2) = (x[i], x[nc + i], y[i], y[nc + i]);
            let (c1, c2) = (x1.conj(), x2.conj());
            let xx = &mut self.xx[i];
            xx[0] += x1 * c1;
            xx[1] += x1 * c2;
            xx[2] += x2 * c1;
            xx[3] += x2 * c2;
            let yx = &mut self.yx[i];
            yx[0] += y1 * c1;
            yx[1] += y1 * c2;
            yx[2] += y2 * c1;
            yx[3] += y2 * c2;
        }
        self.n += 1;
        Ok(())
    }

    pub fn solve(&self, lambda: f64) -> Result<LinearPayload> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("no training pairs accumulated".into()));
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("ridge parameter {lambda} must be non-negative")));
        }
        let inv_n = 1.0 / self.n as f64;
        let gains = self
            .xx
            .iter()
            .zip(&self.yx)
            .map(|(xx, yx)| {
                let m = [
                    xx[0] * inv_n + lambda,
                    xx[1] * inv_n,
                    xx[2] * inv_n,
                    xx[3] * inv_n + lambda,
                ];
                let yx = yx.map(|z| z * inv_n);
                mul2(&yx, &pinv2(&m))
            })
            .collect();
        Ok(LinearPayload {
            gains,
            lambda,
            n_tr: self.n,
        })
    }
}

fn mul2(a: &[Complex64; 4], b: &[Complex64; 4]) -> [Complex64; 4] {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

/// Pseudo-inverse of a Hermitian positive semi-definite 2x2 matrix.
fn pinv2(m: &[Complex64; 4]) -> [Complex64; 4] {
    let trace = (m[0] + m[3]).re;
    let zero = Complex64::new(0.0, 0.0);
    if !(trace > 0.0) {
        return [zero; 4];
    }
    let det = m[0] * m[3] - m[1] * m[2];
    if det.re > 1e-12 * trace * trace {
        let inv = 1.0 / det;
        [m[3] * inv, -m[1] * inv, -m[2] * inv, m[0] * inv]
    } else {
        // rank one: M = t u u^H, so M^+ = M / t^2
        let s = 1.0 / (trace * trace);
        m.map(|z| z * s)
    }
}

const QGS1_MAGIC: &[u8; 4] = b"QGS1";

/// QGS1: magic, `u32` kind (0 coarse, 1 linear), `u32` gamma, `u32` nx, ny,
/// `f64` lx, ly, dt, then the payload. Linear: `f64` lambda, `u64` n_tr and
/// `[re, im]` of `g11, g12, g21, g22` per mode in storage order. Coarse:
/// `u32` factor, `u32` dt_factor, `u32` length and the JSON text of the
/// coarse `QgParams`. All little-endian.
pub fn encode_qgs1(model: &SurrogateModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(QGS1_MAGIC);
    let kind: u32 = match model.kind() {
        SurrogateKind::Coarse => 0,
        SurrogateKind::Linear => 1,
    };
    let g = model.grid;
    for v in [kind, model.gamma as u32, g.nx as u32, g.ny as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [g.lx, g.ly, g.dt] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match &model.payload {
        SurrogatePayload::Linear(l) => {
            out.extend_from_slice(&l.lambda.to_le_bytes());
            out.extend_from_slice(&l.n_tr.to_le_bytes());
            for g in &l.gains {
                for z in g {
                    out.extend_from_slice(&z.re.to_le_bytes());
                    out.extend_from_slice(&z.im.to_le_bytes());
                }
            }
        }
        SurrogatePayload::Coarse(c) => {
            let params = serde_json::to_vec(&c.params)?;
            for v in [c.factor as u32, c.dt_factor as u32, params.len() as u32] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&params);
        }
    }
    Ok(out)
}

pub fn decode_qgs1(bytes: &[u8], path: &Path) -> Result<SurrogateModel> {
    let bad = |reason: String| Error::Format {
        format: "QGS1",
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader { bytes, at: 0 };
    if r.take(4).ok_or_else(|| bad("truncated".into()))? != QGS1_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let truncated = || bad("truncated".into());
    let kind = r.u32().ok_or_else(truncated)?;
    let gamma = r.u32().ok_or_else(truncated)? as u64;
    let (nx, ny) = (
        r.u32().ok_or_else(truncated)? as usize,
        r.u32().ok_or_else(truncated)? as usize,
    );
    let (lx, ly, dt) = (
        r.f64().ok_or_else(truncated)?,
        r.f64().ok_or_else(truncated)?,
        r.f64().ok_or_else(truncated)?,
    );
    let grid = Grid::new(nx, ny, lx, ly, dt).map_err(|e| bad(e.to_string()))?;
    let model = match kind {
        0 => {
            let factor = r.u32().ok_or_else(truncated)? as usize;
            let dt_factor = r.u32().ok_or_else(truncated)? as usize;
            let len = r.u32().ok_or_else(truncated)? as usize;
            let text = r.take(len).ok_or_else(truncated)?;
            let params: QgParams = serde_json::from_slice(text).map_err(|e| bad(e.to_string()))?;
            SurrogateModel::coarse_with_params(grid, params, gamma, factor, dt_factor)?
        }
        1 => {
            let lambda = r.f64().ok_or_else(truncated)?;
            let n_tr = r.u64().ok_or_else(truncated)?;
            let mut gains = Vec::with_capacity(grid.coeffs_per_layer());
            for _ in 0..grid.coeffs_per_layer() {
                let mut g = [Complex64::new(0.0, 0.0); 4];
                for z in g.iter_mut() {
                    *z = Complex64::new(r.f64().ok_or_else(truncated)?, r.f64().ok_or_else(truncated)?);
                }
                gains.push(g);
            }
            SurrogateModel::linear(grid, gamma, LinearPayload { gains, lambda, n_tr })?
        }
        other => return Err(bad(format!("unknown kind tag {other}"))),
    };
    if r.at != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(model)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at + n)?;
        self.at += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::TrajectoryWriter;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Grid {
        Grid::new(16, 24, 46.0, 68.0, 0.025).unwrap()
    }

    fn random_field(g: Grid, seed: u64) -> LayeredField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..g.state_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        LayeredField::from_values(g, v).unwrap()
    }

    #[test]
    fn identity_gains_are_the_identity_map() {
        let g = grid();
        let mut s = SurrogateModel::identity(g, 40);
        let f = random_field(g, 1);
        let out = s.propagate(&f, 3).unwrap();
        assert!(out.axpy(-1.0, &f).unwrap().max_abs() < 1e-12);
        assert_eq!(s.propagate(&f, 0).unwrap().axpy(-1.0, &f).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn coarse_surrogate_keeps_the_equilibrium_jet() {
        let g = Grid::half_size();
        let params = QgParams::reference(&g);
        let mut s = SurrogateModel::coarse(g, params, 40, 2, DEFAULT_COARSE_DT_FACTOR).unwrap();
        let SurrogatePayload::Coarse(c) = &s.payload else { unreachable!() };
        let eq = c.model.equilibrium_state().psi.refine(2).unwrap().with_grid(g).unwrap();
        let out = s.apply(&eq).unwrap();
        let moved = out.axpy(-1.0, &eq).unwrap().max_abs();
        // hyperdiffusion decay of the coarse jet over gamma fine steps
        assert!(moved < 1e-3 * eq.max_abs(), "moved {moved}");
    }

    #[test]
    fn coarse_propagation_composes() {
        let g = grid();
        let params = QgParams::reference(&g);
        let mut s = SurrogateModel::coarse(g, params, 40, 2, 4).unwrap();
        let f = random_field(g, 2).scaled(0.1);
        let two = s.propagate(&f, 2).unwrap();
        let first = s.apply(&f).unwrap();
        let one = s.apply(&first).unwrap();
        assert!(two.axpy(-1.0, &one).unwrap().max_abs() < 1e-12);
        assert_eq!(two.representation(), Representation::Grid);
        assert!(SurrogateModel::coarse(g, params, 40, 2, 3).is_err());
    }

    fn planted_pairs(g: Grid, n: usize) -> (Vec<[Complex64; 4]>, Vec<(LayeredField, LayeredField)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let nc = g.coeffs_per_layer();
        let mut c = || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let g0: Vec<[Complex64; 4]> = (0..nc).map(|_| [c(), c(), c(), c()]).collect();
        let pairs = (0..n)
            .map(|p| {
                let x = random_field(g, 100 + p as u64).to_spectral().unwrap();
                let xc = x.coeffs().unwrap();
                let mut y = vec![Complex64::new(0.0, 0.0); 2 * nc];
                for i in 0..nc {
                    y[i] = g0[i][0] * xc[i] + g0[i][1] * xc[nc + i];
                    y[nc + i] = g0[i][2] * xc[i] + g0[i][3] * xc[nc + i];
                }
                (x, LayeredField::from_coeffs(g, y).unwrap())
            })
            .collect();
        (g0, pairs)
    }

    #[test]
    fn ridge_fit_recovers_a_planted_map() {
        let g = grid();
        let (g0, pairs) = planted_pairs(g, 4);
        let mut acc = MomentAccumulator::new(g);
        for (x, y) in &pairs {
            acc.add(x, y).unwrap();
        }
        let fit = acc.solve(0.0).unwrap();
        for m in 0..g.modes_x() {
            for n in 0..g.ny {
                let i = m * g.ny + n;
                for e in 0..4 {
                    assert!((fit.gains[i][e] - g0[i][e]).norm() < 1e-8, "mode {m},{n}");
                }
            }
        }
        let huge = acc.solve(1e12).unwrap();
        assert!(huge.gains.iter().flatten().all(|z| z.norm() < 1e-6));
    }

    #[test]
    fn duplicated_pairs_do_not_change_the_fit() {
        let g = grid();
        let (_, pairs) = planted_pairs(g, 3);
        let (mut once, mut twice) = (MomentAccumulator::new(g), MomentAccumulator::new(g));
        for (x, y) in &pairs {
            once.add(x, y).unwrap();
            twice.add(x, y).unwrap();
            twice.add(x, y).unwrap();
        }
        let (a, b) = (once.solve(0.5).unwrap(), twice.solve(0.5).unwrap());
        for (ga, gb) in a.gains.iter().zip(&b.gains) {
            for e in 0..4 {
                assert!((ga[e] - gb[e]).norm() <= 1e-14 * (1.0 + ga[e].norm()));
            }
        }
    }

    #[test]
    fn linear_surrogate_is_linear() {
        let g = grid();
        let (_, pairs) = planted_pairs(g, 3);
        let mut acc = MomentAccumulator::new(g);
        for (x, y) in &pairs {
            acc.add(x, y).unwrap();
        }
        let mut s = SurrogateModel::linear(g, 40, acc.solve(0.1).unwrap()).unwrap();
        let (u, v) = (random_field(g, 11), random_field(g, 12));
        let lhs = s.apply(&u.scaled(2.0).axpy(-3.0, &v).unwrap()).unwrap();
        let rhs = s.apply(&u).unwrap().scaled(2.0).axpy(-3.0, &s.apply(&v).unwrap()).unwrap();
        assert!(lhs.axpy(-1.0, &rhs).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn qgs1_round_trip() {
        let g = grid();
        let dir = tempfile::tempdir().unwrap();
        let (_, pairs) = planted_pairs(g, 2);
        let mut acc = MomentAccumulator::new(g);
        for (x, y) in &pairs {
            acc.add(x, y).unwrap();
        }
        let lin = SurrogateModel::linear(g, 40, acc.solve(0.1).unwrap()).unwrap();
        let p = dir.path().join("lin.qgs1");
        lin.save(&p).unwrap();
        let back = SurrogateModel::load(&p).unwrap();
        let (SurrogatePayload::Linear(a), SurrogatePayload::Linear(b)) = (&lin.payload, &back.payload) else {
            panic!("kind changed")
        };
        assert_eq!(a, b);
        assert_eq!(back.gamma, 40);

        let coarse = SurrogateModel::coarse(g, QgParams::reference(&g), 40, 2, 4).unwrap();
        let p = dir.path().join("coarse.qgs1");
        coarse.save(&p).unwrap();
        let mut back = SurrogateModel::load(&p).unwrap();
        let f = random_field(g, 3).scaled(0.1);
        let mut coarse = coarse;
        assert_eq!(coarse.apply(&f).unwrap(), back.apply(&f).unwrap());

        let bytes = encode_qgs1(&coarse).unwrap();
        assert!(decode_qgs1(&bytes[..bytes.len() - 1], &p).is_err());
    }

    #[test]
    fn training_pairs_follow_the_stride_rule() {
        let g = grid();
        let dir = tempfile::tempdir().unwrap();
        let f = random_field(g, 4);
        let gamma = 4;
        let mut w = TrajectoryWriter::create(dir.path(), g, 1, gamma).unwrap();
        for i in 0..11 {
            w.push(i * gamma, &f).unwrap();
        }
        let m = w.finish().unwrap();
        assert_eq!(build_training_set(&m, gamma, gamma).unwrap().len(), 10);
        assert_eq!(build_training_set(&m, 2 * gamma, gamma).unwrap().len(), 9);
        assert_eq!(build_training_set(&m, 2 * gamma, 2 * gamma).unwrap().len(), 5);
        assert!(build_training_set(&m, 3, gamma).is_err());

        let dir2 = tempfile::tempdir().unwrap();
        let mut w = TrajectoryWriter::create(dir2.path(), g, 1, 1).unwrap();
        for i in 0..=gamma {
            w.push(i, &f).unwrap();
        }
        let m = w.finish().unwrap();
        let set = build_training_set(&m, gamma, gamma).unwrap();
        assert_eq!(set.pairs, vec![(0, gamma as usize)]);
        assert!(train_linear_surrogate(&build_training_set(&m, gamma, 1).unwrap(), 0.1).is_ok());
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let g = grid();
        let dir = tempfile::tempdir().unwrap();
        let mut w = TrajectoryWriter::create(dir.path(), g, 1, 1).unwrap();
        w.push(0, &random_field(g, 5)).unwrap();
        let m = w.finish().unwrap();
        let set = build_training_set(&m, 4, 4).unwrap();
        assert!(set.is_empty());
        assert!(train_linear_surrogate(&set, 0.1).is_err());
    }

    #[test]
    fn macro_step_count_must_be_whole() {
        let g = grid();
        let mut s = SurrogateModel::identity(g, 40);
        let f = random_field(g, 6);
        assert!(s.advance(&f, 80).is_ok());
        assert!(s.advance(&f, 50).is_err());
        assert!(s.apply(&random_field(Grid::new(8, 8, 1.0, 1.0, 0.1).unwrap(), 1)).is_err());
    }
}
