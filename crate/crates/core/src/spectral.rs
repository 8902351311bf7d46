//! Two-layer fields on a doubly periodic rectangle.
//!
//! Grid values are stored layer-major and row-major: layer `k`, row `j`
//! (meridional index), column `i` (zonal index) lives at
//! `k * nx * ny + j * nx + i`. Coordinates are `x_i = i * lx / nx` and
//! `y_j = -ly / 2 + j * ly / ny`, so the jet axis `y = 0` sits on row `ny / 2`.
//!
//! Spectral coefficients use the real half-spectrum. Per layer there are
//! `nx / 2 + 1` zonal modes `m` and `ny` meridional modes `n` (signed as
//! `n - ny` past `ny / 2`), stored m-major: `(m, n)` lives at `m * ny + n`.
//! The forward transform is normalized by `1 / (nx * ny)`, so a coefficient is
//! the amplitude of `exp(i (kx x + ky y))`: a constant `c` has `(0, 0)`
//! coefficient `c` and `cos(2 pi x / lx)` has coefficient `1/2` at `m = 1`
//! (and implicitly at `m = -1`).

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    /// Zonal points (and modes).
    pub nx: usize,
    /// Meridional points (and modes).
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub dt: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64, dt: f64) -> Result<Self> {
        let grid = Grid { nx, ny, lx, ly, dt };
        grid.validate()?;
        Ok(grid)
    }

    /// 96 x 192 modes on a 46 x 68 domain with `dt = 0.025`.
    pub fn reference() -> Self {
        Grid {
            nx: 96,
            ny: 192,
            lx: 46.0,
            ly: 68.0,
            dt: 0.025,
        }
    }

    /// Half the reference resolution on the same domain.
    pub fn half_size() -> Self {
        Grid {
            nx: 48,
            ny: 96,
            ..Grid::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 8 || self.ny < 8 || self.nx % 2 != 0 || self.ny % 2 != 0 {
            return Err(Error::InvalidGrid(format!(
                "nx and ny must be even and >= 8, got {}x{}",
                self.nx, self.ny
            )));
        }
        if !(self.lx > 0.0 && self.ly > 0.0 && self.dt > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "lx, ly and dt must be positive, got lx={} ly={} dt={}",
                self.lx, self.ly, self.dt
            )));
        }
        Ok(())
    }

    /// Grid points per layer.
    pub fn points(&self) -> usize {
        self.nx * self.ny
    }

    pub fn state_dim(&self) -> usize {
        LAYERS * self.points()
    }

    /// Number of stored zonal modes, `nx / 2 + 1`.
    pub fn modes_x(&self) -> usize {
        self.nx / 2 + 1
    }

    /// Stored coefficients per layer.
    pub fn coeffs_per_layer(&self) -> usize {
        self.modes_x() * self.ny
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx()
    }

    pub fn y(&self, j: usize) -> f64 {
        -0.5 * self.ly + j as f64 * self.dy()
    }

    /// Signed meridional mode number of storage index `n`.
    pub fn signed_n(&self, n: usize) -> i64 {
        if n <= self.ny / 2 {
            n as i64
        } else {
            n as i64 - self.ny as i64
        }
    }

    pub fn kx(&self, m: usize) -> f64 {
        2.0 * PI * m as f64 / self.lx
    }

    pub fn ky(&self, n: usize) -> f64 {
        2.0 * PI * self.signed_n(n) as f64 / self.ly
    }

    /// `|kappa|^2` of mode `(m, n)`.
    pub fn k2(&self, m: usize, n: usize) -> f64 {
        let kx = self.kx(m);
        let ky = self.ky(n);
        kx * kx + ky * ky
    }

    /// Whether mode `(m, n)` survives the 2/3 rule.
    pub fn retained(&self, m: usize, n: usize) -> bool {
        3 * m <= self.nx && 3 * self.signed_n(n).unsigned_abs() as usize <= self.ny
    }

    /// Largest `|kappa|` among retained modes.
    pub fn max_retained_wavenumber(&self) -> f64 {
        let m = self.nx / 3;
        let n = self.ny / 3;
        let kx = self.kx(m);
        let ky = 2.0 * PI * n as f64 / self.ly;
        (kx * kx + ky * ky).sqrt()
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.lx == other.lx && self.ly == other.ly
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{}x{} ({}x{}) vs {}x{} ({}x{})",
                self.nx, self.ny, self.lx, self.ly, other.nx, other.ny, other.lx, other.ly
            )))
        }
    }

    /// Same domain and time step at `1 / factor` the resolution.
    pub fn coarsened(&self, factor: usize) -> Result<Grid> {
        if factor == 0 || self.nx % factor != 0 || self.ny % factor != 0 {
            return Err(Error::IndivisibleFactor {
                factor,
                nx: self.nx,
                ny: self.ny,
            });
        }
        Grid::new(
            self.nx / factor,
            self.ny / factor,
            self.lx,
            self.ly,
            self.dt,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Representation {
    Grid,
    Spectral,
}

#[derive(Debug, Clone, PartialEq)]
enum FieldData {
    Grid(Vec<f64>),
    Spectral(Vec<Complex64>),
}

/// A two-layer scalar field, in grid or spectral representation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredField {
    grid: Grid,
    data: FieldData,
}

impl LayeredField {
    pub fn zeros(grid: Grid, repr: Representation) -> Self {
        let data = match repr {
            Representation::Grid => FieldData::Grid(vec![0.0; grid.state_dim()]),
            Representation::Spectral => {
                FieldData::Spectral(vec![Complex64::new(0.0, 0.0); LAYERS * grid.coeffs_per_layer()])
            }
        };
        LayeredField { grid, data }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.state_dim() {
            return Err(Error::GridMismatch(format!(
                "expected {} grid values, got {}",
                grid.state_dim(),
                values.len()
            )));
        }
        Ok(LayeredField {
            grid,
            data: FieldData::Grid(values),
        })
    }

    pub fn from_coeffs(grid: Grid, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != LAYERS * grid.coeffs_per_layer() {
            return Err(Error::GridMismatch(format!(
                "expected {} coefficients, got {}",
                LAYERS * grid.coeffs_per_layer(),
                coeffs.len()
            )));
        }
        Ok(LayeredField {
            grid,
            data: FieldData::Spectral(coeffs),
        })
    }

    /// Grid field with `f(layer, x, y)` sampled at every point; `layer` is 0 or 1.
    pub fn from_fn(grid: Grid, f: impl Fn(usize, f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.state_dim());
        for k in 0..LAYERS {
            for j in 0..grid.ny {
                let y = grid.y(j);
                for i in 0..grid.nx {
                    values.push(f(k, grid.x(i), y));
                }
            }
        }
        LayeredField {
            grid,
            data: FieldData::Grid(values),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn representation(&self) -> Representation {
        match self.data {
            FieldData::Grid(_) => Representation::Grid,
            FieldData::Spectral(_) => Representation::Spectral,
        }
    }

    fn wrong(&self, expected: Representation) -> Error {
        Error::WrongRepresentation {
            expected,
            found: self.representation(),
        }
    }

    pub fn values(&self) -> Result<&[f64]> {
        match &self.data {
            FieldData::Grid(v) => Ok(v),
            FieldData::Spectral(_) => Err(self.wrong(Representation::Grid)),
        }
    }

    pub fn values_mut(&mut self) -> Result<&mut [f64]> {
        match &mut self.data {
            FieldData::Grid(v) => Ok(v),
            FieldData::Spectral(_) => Err(Error::WrongRepresentation {
                expected: Representation::Grid,
                found: Representation::Spectral,
            }),
        }
    }

    pub fn into_values(self) -> Result<Vec<f64>> {
        match self.data {
            FieldData::Grid(v) => Ok(v),
            FieldData::Spectral(_) => Err(Error::WrongRepresentation {
                expected: Representation::Grid,
                found: Representation::Spectral,
            }),
        }
    }

    pub fn coeffs(&self) -> Result<&[Complex64]> {
        match &self.data {
            FieldData::Spectral(c) => Ok(c),
            FieldData::Grid(_) => Err(self.wrong(Representation::Spectral)),
        }
    }

    pub fn coeffs_mut(&mut self) -> Result<&mut [Complex64]> {
        match &mut self.data {
            FieldData::Spectral(c) => Ok(c),
            FieldData::Grid(_) => Err(Error::WrongRepresentation {
                expected: Representation::Spectral,
                found: Representation::Grid,
            }),
        }
    }

    /// Grid values of one layer (`0` upper, `1` lower).
    pub fn layer_values(&self, layer: usize) -> Result<&[f64]> {
        let n = self.grid.points();
        Ok(&self.values()?[layer * n..(layer + 1) * n])
    }

    pub fn layer_coeffs(&self, layer: usize) -> Result<&[Complex64]> {
        let n = self.grid.coeffs_per_layer();
        Ok(&self.coeffs()?[layer * n..(layer + 1) * n])
    }

    /// Coefficient of mode `(m, n)` in `layer`.
    pub fn coeff(&self, layer: usize, m: usize, n: usize) -> Result<Complex64> {
        Ok(self.layer_coeffs(layer)?[m * self.grid.ny + n])
    }

    pub fn to_spectral(&self) -> Result<LayeredField> {
        let values = self.values()?;
        let mut coeffs = vec![Complex64::new(0.0, 0.0); LAYERS * self.grid.coeffs_per_layer()];
        with_fft(&self.grid, |fft| fft.forward_layers(values, &mut coeffs));
        Ok(LayeredField {
            grid: self.grid,
            data: FieldData::Spectral(coeffs),
        })
    }

    pub fn to_grid(&self) -> Result<LayeredField> {
        let coeffs = self.coeffs()?;
        let mut values = vec![0.0; self.grid.state_dim()];
        with_fft(&self.grid, |fft| fft.inverse_layers(coeffs, &mut values));
        Ok(LayeredField {
            grid: self.grid,
            data: FieldData::Grid(values),
        })
    }

    /// This field in spectral representation, transforming only if needed.
    pub fn spectral(&self) -> Result<LayeredField> {
        match self.representation() {
            Representation::Spectral => Ok(self.clone()),
            Representation::Grid => self.to_spectral(),
        }
    }

    /// This field in grid representation, transforming only if needed.
    pub fn gridded(&self) -> Result<LayeredField> {
        match self.representation() {
            Representation::Grid => Ok(self.clone()),
            Representation::Spectral => self.to_grid(),
        }
    }

    /// Multiplies every coefficient by `(-|kappa|^2)^p`.
    pub fn laplacian_power(&self, p: i32) -> Result<LayeredField> {
        if p < 0 {
            return Err(Error::InvalidArgument(format!(
                "laplacian power must be non-negative, got {p}"
            )));
        }
        let mut out = self.clone();
        let grid = self.grid;
        let per_layer = grid.coeffs_per_layer();
        let coeffs = out.coeffs_mut()?;
        for (idx, c) in coeffs.iter_mut().enumerate() {
            let local = idx % per_layer;
            let (m, n) = (local / grid.ny, local % grid.ny);
            *c *= (-grid.k2(m, n)).powi(p);
        }
        Ok(out)
    }

    /// Zeroes every mode outside the 2/3-rule box.
    pub fn dealias(&self) -> Result<LayeredField> {
        let mut out = self.clone();
        let mask = dealias_mask(&self.grid);
        for layer in out.coeffs_mut()?.chunks_mut(self.grid.coeffs_per_layer()) {
            for (c, &keep) in layer.iter_mut().zip(mask.iter()) {
                if !keep {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
        }
        Ok(out)
    }

    /// Spectral truncation onto a grid `factor` times coarser.
    ///
    /// Keeps modes with `|m| < nx_c / 2` and `|n| < ny_c / 2`; the coarse
    /// Nyquist modes are dropped so the result stays conjugate symmetric.
    /// The amplitude normalization makes the truncation a plain copy.
    pub fn coarsen(&self, factor: usize) -> Result<LayeredField> {
        let coarse = self.grid.coarsened(factor)?;
        let spec = self.spectral()?;
        let fine_c = spec.coeffs()?;
        let mut out = LayeredField::zeros(coarse, Representation::Spectral);
        let (fpl, cpl) = (self.grid.coeffs_per_layer(), coarse.coeffs_per_layer());
        {
            let out_c = out.coeffs_mut()?;
            for k in 0..LAYERS {
                for m in 0..coarse.nx / 2 {
                    for nc in 0..coarse.ny {
                        let s = coarse.signed_n(nc);
                        if s.unsigned_abs() as usize >= coarse.ny / 2 {
                            continue;
                        }
                        let nf = if s >= 0 {
                            s as usize
                        } else {
                            (self.grid.ny as i64 + s) as usize
                        };
                        out_c[k * cpl + m * coarse.ny + nc] =
                            fine_c[k * fpl + m * self.grid.ny + nf];
                    }
                }
            }
        }
        match self.representation() {
            Representation::Spectral => Ok(out),
            Representation::Grid => out.to_grid(),
        }
    }

    /// Zero-padding onto a grid `factor` times finer.
    pub fn refine(&self, factor: usize) -> Result<LayeredField> {
        if factor == 0 {
            return Err(Error::InvalidArgument("refinement factor must be positive".into()));
        }
        let g = self.grid;
        let fine = Grid::new(g.nx * factor, g.ny * factor, g.lx, g.ly, g.dt)?;
        let spec = self.spectral()?;
        let coarse_c = spec.coeffs()?;
        let mut out = LayeredField::zeros(fine, Representation::Spectral);
        let (fpl, cpl) = (fine.coeffs_per_layer(), g.coeffs_per_layer());
        {
            let out_c = out.coeffs_mut()?;
            for k in 0..LAYERS {
                for m in 0..g.nx / 2 {
                    for nc in 0..g.ny {
                        let s = g.signed_n(nc);
                        if s.unsigned_abs() as usize >= g.ny / 2 {
                            continue;
                        }
                        let nf = if s >= 0 {
                            s as usize
                        } else {
                            (fine.ny as i64 + s) as usize
                        };
                        out_c[k * fpl + m * fine.ny + nf] = coarse_c[k * cpl + m * g.ny + nc];
                    }
                }
            }
        }
        match self.representation() {
            Representation::Spectral => Ok(out),
            Representation::Grid => out.to_grid(),
        }
    }

    /// The same data on a grid of identical shape (e.g. a different `dt`).
    pub fn with_grid(mut self, grid: Grid) -> Result<LayeredField> {
        if grid.nx != self.grid.nx || grid.ny != self.grid.ny {
            return Err(Error::GridMismatch(format!(
                "cannot rebind a {}x{} field to a {}x{} grid",
                self.grid.nx, self.grid.ny, grid.nx, grid.ny
            )));
        }
        grid.validate()?;
        self.grid = grid;
        Ok(self)
    }

    /// Domain-mean square over both layers, `sum |f|^2 / (2 nx ny)`.
    ///
    /// In spectral representation this is evaluated by Parseval over the full
    /// (conjugate-symmetric) spectrum, giving the same number.
    pub fn mean_square(&self) -> f64 {
        match &self.data {
            FieldData::Grid(v) => v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64,
            FieldData::Spectral(c) => {
                let g = &self.grid;
                let total: f64 = c
                    .chunks(g.coeffs_per_layer())
                    .map(|layer| {
                        layer
                            .iter()
                            .enumerate()
                            .map(|(idx, z)| half_spectrum_weight(g, idx / g.ny) * z.norm_sqr())
                            .sum::<f64>()
                    })
                    .sum();
                total / LAYERS as f64
            }
        }
    }

    /// Largest absolute grid value or coefficient magnitude.
    pub fn max_abs(&self) -> f64 {
        match &self.data {
            FieldData::Grid(v) => v.iter().fold(0.0, |a, x| a.max(x.abs())),
            FieldData::Spectral(c) => c.iter().fold(0.0, |a, z| a.max(z.norm())),
        }
    }

    pub fn is_finite(&self) -> bool {
        match &self.data {
            FieldData::Grid(v) => v.iter().all(|x| x.is_finite()),
            FieldData::Spectral(c) => c.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
        }
    }

    /// `self + a * other`; both operands must share grid and representation.
    pub fn axpy(&self, a: f64, other: &LayeredField) -> Result<LayeredField> {
        self.grid.check_same(&other.grid)?;
        let data = match (&self.data, &other.data) {
            (FieldData::Grid(x), FieldData::Grid(y)) => {
                FieldData::Grid(x.iter().zip(y).map(|(x, y)| x + a * y).collect())
            }
            (FieldData::Spectral(x), FieldData::Spectral(y)) => {
                FieldData::Spectral(x.iter().zip(y).map(|(x, y)| x + y * a).collect())
            }
            _ => return Err(other.wrong(self.representation())),
        };
        Ok(LayeredField {
            grid: self.grid,
            data,
        })
    }

    pub fn scaled(&self, a: f64) -> LayeredField {
        let data = match &self.data {
            FieldData::Grid(x) => FieldData::Grid(x.iter().map(|x| a * x).collect()),
            FieldData::Spectral(x) => FieldData::Spectral(x.iter().map(|x| x * a).collect()),
        };
        LayeredField {
            grid: self.grid,
            data,
        }
    }
}

/// Potential-vorticity anomaly `q'_k = q_k - beta y`, stored like a [`LayeredField`].
#[derive(Debug, Clone, PartialEq)]
pub struct PvAnomaly(pub LayeredField);

impl PvAnomaly {
    pub fn field(&self) -> &LayeredField {
        &self.0
    }

    pub fn into_field(self) -> LayeredField {
        self.0
    }
}

/// `q'_k = lap psi_k + (-1)^k (psi_1 - psi_2)` for a spectral streamfunction.
pub fn pv_from_streamfunction(psi: &LayeredField) -> Result<PvAnomaly> {
    let grid = *psi.grid();
    let mut q = LayeredField::zeros(grid, Representation::Spectral);
    let k2 = k2_table(&grid);
    pv_from_psi_coeffs(&k2, psi.coeffs()?, q.coeffs_mut()?);
    Ok(PvAnomaly(q))
}

/// Recovers the streamfunction from a spectral PV anomaly.
///
/// Solved per mode in barotropic/baroclinic form:
/// `psi_bt = -q_bt / |k|^2` (zero at `k = 0`) and `psi_bc = q_bc / (-|k|^2 - 2)`.
pub fn invert_pv(q: &PvAnomaly) -> Result<LayeredField> {
    let grid = *q.0.grid();
    let mut psi = LayeredField::zeros(grid, Representation::Spectral);
    let k2 = k2_table(&grid);
    invert_pv_coeffs(&k2, q.0.coeffs()?, psi.coeffs_mut()?);
    Ok(psi)
}

/// `|kappa|^2` for every stored mode of one layer.
pub(crate) fn k2_table(grid: &Grid) -> Vec<f64> {
    let mut k2 = Vec::with_capacity(grid.coeffs_per_layer());
    for m in 0..grid.modes_x() {
        for n in 0..grid.ny {
            k2.push(grid.k2(m, n));
        }
    }
    k2
}

pub(crate) fn pv_from_psi_coeffs(k2: &[f64], psi: &[Complex64], q: &mut [Complex64]) {
    let nc = k2.len();
    let (p1, p2) = psi.split_at(nc);
    let (q1, q2) = q.split_at_mut(nc);
    for i in 0..nc {
        let shear = p1[i] - p2[i];
        q1[i] = -p1[i] * k2[i] - shear;
        q2[i] = -p2[i] * k2[i] + shear;
    }
}

pub(crate) fn invert_pv_coeffs(k2: &[f64], q: &[Complex64], psi: &mut [Complex64]) {
    let nc = k2.len();
    let (q1, q2) = q.split_at(nc);
    let (p1, p2) = psi.split_at_mut(nc);
    for i in 0..nc {
        let q_bt = (q1[i] + q2[i]) * 0.5;
        let q_bc = (q1[i] - q2[i]) * 0.5;
        let psi_bt = if k2[i] > 0.0 {
            -q_bt / k2[i]
        } else {
            Complex64::new(0.0, 0.0)
        };
        let psi_bc = q_bc / (-k2[i] - 2.0);
        p1[i] = psi_bt + psi_bc;
        p2[i] = psi_bt - psi_bc;
    }
}

/// Multiplicity of zonal mode `m` in the full spectrum.
pub(crate) fn half_spectrum_weight(grid: &Grid, m: usize) -> f64 {
    if m == 0 || m == grid.nx / 2 {
        1.0
    } else {
        2.0
    }
}

/// Per-layer retention mask of the 2/3 rule, in storage order.
pub(crate) fn dealias_mask(grid: &Grid) -> Vec<bool> {
    let mut mask = Vec::with_capacity(grid.coeffs_per_layer());
    for m in 0..grid.modes_x() {
        for n in 0..grid.ny {
            mask.push(grid.retained(m, n));
        }
    }
    mask
}

/// Planned 2-D real transforms for one grid shape, with scratch space.
///
/// Forward: FFT along x for every row, then complex FFT along y for every
/// stored zonal mode. Rows are transformed in pairs packed as one complex
/// sequence `row_j + i row_{j+1}`, which batches the x transforms. The
/// truncated variants only carry the first `m_limit` zonal modes through the
/// y transforms; the rest are treated as zero, which is exact for dealiased
/// fields.
pub struct Fft2 {
    nx: usize,
    ny: usize,
    mh: usize,
    fwd_x: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
    /// `ny / 2` packed row pairs of length `nx`.
    rows: Vec<Complex64>,
    scratch: Vec<Complex64>,
    work: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(grid: &Grid) -> Self {
        let mut cp = FftPlanner::<f64>::new();
        let fwd_x = cp.plan_fft_forward(grid.nx);
        let inv_x = cp.plan_fft_inverse(grid.nx);
        let fwd_y = cp.plan_fft_forward(grid.ny);
        let inv_y = cp.plan_fft_inverse(grid.ny);
        let mh = grid.modes_x();
        let scratch_len = [&fwd_x, &inv_x, &fwd_y, &inv_y]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        let zero = Complex64::new(0.0, 0.0);
        Fft2 {
            nx: grid.nx,
            ny: grid.ny,
            mh,
            fwd_x,
            inv_x,
            fwd_y,
            inv_y,
            rows: vec![zero; grid.nx * grid.ny / 2],
            scratch: vec![zero; scratch_len],
            work: vec![zero; mh * grid.ny],
        }
    }

    pub fn modes_x(&self) -> usize {
        self.mh
    }

    /// Forward transform of one layer (`nx * ny` values into `mh * ny` coefficients).
    pub fn forward(&mut self, values: &[f64], out: &mut [Complex64]) {
        self.forward_truncated(values, out, self.mh);
    }

    pub fn forward_truncated(&mut self, values: &[f64], out: &mut [Complex64], m_limit: usize) {
        let (nx, ny) = (self.nx, self.ny);
        let m_limit = m_limit.min(self.mh);
        let half = 0.5 / (nx * ny) as f64;
        for (p, row) in self.rows.chunks_exact_mut(nx).enumerate() {
            let (a, b) = (&values[2 * p * nx..(2 * p + 1) * nx], &values[(2 * p + 1) * nx..(2 * p + 2) * nx]);
            for ((z, &x), &y) in row.iter_mut().zip(a).zip(b) {
                *z = Complex64::new(x, y);
            }
        }
        self.fwd_x.process_with_scratch(&mut self.rows, &mut self.scratch);
        // Z(m) = A(m) + i B(m) with A, B Hermitian: A = (Z(m) + conj Z(-m)) / 2,
        // B = (Z(m) - conj Z(-m)) / 2i.
        for m in 0..m_limit {
            let mirror = (nx - m) % nx;
            let col = &mut out[m * ny..(m + 1) * ny];
            for (p, row) in self.rows.chunks_exact(nx).enumerate() {
                let (z, w) = (row[m], row[mirror].conj());
                let s = z + w;
                let d = z - w;
                col[2 * p] = s * half;
                col[2 * p + 1] = Complex64::new(d.im, -d.re) * half;
            }
        }
        self.fwd_y
            .process_with_scratch(&mut out[..m_limit * ny], &mut self.scratch);
        for c in out[m_limit * ny..self.mh * ny].iter_mut() {
            *c = Complex64::new(0.0, 0.0);
        }
    }

    /// Inverse transform of one layer.
    pub fn inverse(&mut self, coeffs: &[Complex64], out: &mut [f64]) {
        self.inverse_truncated(coeffs, out, self.mh);
    }

    pub fn inverse_truncated(&mut self, coeffs: &[Complex64], out: &mut [f64], m_limit: usize) {
        let (nx, ny, mh) = (self.nx, self.ny, self.mh);
        let m_limit = m_limit.min(mh);
        self.work[..m_limit * ny].copy_from_slice(&coeffs[..m_limit * ny]);
        self.inv_y
            .process_with_scratch(&mut self.work[..m_limit * ny], &mut self.scratch);
        let zero = Complex64::new(0.0, 0.0);
        // Entries m_limit..=nx-m_limit receive no coefficient.
        if m_limit <= nx - m_limit {
            for row in self.rows.chunks_exact_mut(nx) {
                row[m_limit..=nx - m_limit].fill(zero);
            }
        }
        for m in 0..m_limit {
            let col = &self.work[m * ny..(m + 1) * ny];
            // The DC and Nyquist entries of a real row spectrum are real.
            let self_conjugate = m == 0 || 2 * m == nx;
            for (p, row) in self.rows.chunks_exact_mut(nx).enumerate() {
                let (a, b) = (col[2 * p], col[2 * p + 1]);
                if self_conjugate {
                    row[m] = Complex64::new(a.re, b.re);
                } else {
                    row[m] = Complex64::new(a.re - b.im, a.im + b.re);
                    row[nx - m] = Complex64::new(a.re + b.im, b.re - a.im);
                }
            }
        }
        self.inv_x.process_with_scratch(&mut self.rows, &mut self.scratch);
        for (p, row) in self.rows.chunks_exact(nx).enumerate() {
            let (a, b) = out[2 * p * nx..(2 * p + 2) * nx].split_at_mut(nx);
            for ((x, y), z) in a.iter_mut().zip(b.iter_mut()).zip(row) {
                *x = z.re;
                *y = z.im;
            }
        }
    }

    /// Applies `f(y_index)` as a multiplier in y for the first `m_limit` zonal
    /// modes of one layer, in place (a 1-D transform pair along y only).
    pub fn multiply_in_y(&mut self, coeffs: &mut [Complex64], profile: &[f64], m_limit: usize) {
        let ny = self.ny;
        let m_limit = m_limit.min(self.mh);
        let block = &mut coeffs[..m_limit * ny];
        self.inv_y.process_with_scratch(block, &mut self.scratch);
        let scale = 1.0 / ny as f64;
        for col in block.chunks_mut(ny) {
            for (c, &w) in col.iter_mut().zip(profile) {
                *c *= w * scale;
            }
        }
        self.fwd_y.process_with_scratch(block, &mut self.scratch);
    }

    pub(crate) fn forward_layers(&mut self, values: &[f64], out: &mut [Complex64]) {
        let (np, nc) = (self.nx * self.ny, self.mh * self.ny);
        for k in 0..LAYERS {
            self.forward(&values[k * np..(k + 1) * np], &mut out[k * nc..(k + 1) * nc]);
        }
    }

    pub(crate) fn inverse_layers(&mut self, coeffs: &[Complex64], out: &mut [f64]) {
        let (np, nc) = (self.nx * self.ny, self.mh * self.ny);
        for k in 0..LAYERS {
            self.inverse(&coeffs[k * nc..(k + 1) * nc], &mut out[k * np..(k + 1) * np]);
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, usize), Fft2>> = RefCell::new(HashMap::new());
}

/// Runs `f` with this thread's cached transform plan for `grid`.
pub(crate) fn with_fft<R>(grid: &Grid, f: impl FnOnce(&mut Fft2) -> R) -> R {
    PLANS.with(|plans| {
        let mut plans = plans.borrow_mut();
        let fft = plans
            .entry((grid.nx, grid.ny))
            .or_insert_with(|| Fft2::new(grid));
        f(fft)
    })
}
