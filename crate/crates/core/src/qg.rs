//! Two-layer quasi-geostrophic channel model on the doubly periodic grid.
//!
//! The prognostic variable is the PV anomaly `q'_k` (planetary `beta y`
//! excluded, its advection appears as `beta psi_x`). Time stepping is
//! leapfrog with a Robert-Asselin filter. Hyperdiffusion `nu lap^4` is exact
//! through an integrating factor; the linear damping terms (relaxation,
//! lower-layer friction, sponge) are evaluated at the lagged time level,
//! which keeps leapfrog stable for damping.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{
    dealias_mask, half_spectrum_weight, invert_pv_coeffs, k2_table, pv_from_psi_coeffs, Fft2,
    Grid, LayeredField, PvAnomaly, Representation, LAYERS,
};

/// Physical and numerical constants of the channel model.
///
/// `tau_d` and `tau_f` may be infinite to switch relaxation or friction off;
/// they serialize as `null` in that case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QgParams {
    pub beta: f64,
    pub sigma_jet: f64,
    #[serde(with = "timescale")]
    pub tau_d: f64,
    #[serde(with = "timescale")]
    pub tau_f: f64,
    pub nu: f64,
    pub ra_filter: f64,
    pub sponge_width_frac: f64,
    pub sponge_rate: f64,
}

/// Default peak sponge damping rate (per unit time).
pub const DEFAULT_SPONGE_RATE: f64 = 0.8;

impl QgParams {
    /// Reference channel constants with `nu` set for `grid`.
    pub fn reference(grid: &Grid) -> Self {
        QgParams {
            beta: 0.19,
            sigma_jet: 3.5,
            tau_d: 100.0,
            tau_f: 15.0,
            nu: Self::hyperdiffusion_for(grid),
            ra_filter: 0.05,
            sponge_width_frac: 0.1,
            sponge_rate: DEFAULT_SPONGE_RATE,
        }
    }

    /// `nu` such that the largest retained wavenumber e-folds in `10 dt`.
    pub fn hyperdiffusion_for(grid: &Grid) -> f64 {
        let kmax = grid.max_retained_wavenumber();
        1.0 / (10.0 * grid.dt * kmax.powi(8))
    }

    /// Reference constants with relaxation, friction, sponge and hyperdiffusion off.
    pub fn inviscid_unforced(grid: &Grid) -> Self {
        QgParams {
            tau_d: f64::INFINITY,
            tau_f: f64::INFINITY,
            nu: 0.0,
            sponge_rate: 0.0,
            ..Self::reference(grid)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("QgParams: {what}")));
        if !(self.nu >= 0.0) {
            return bad("nu must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ra_filter) {
            return bad("ra_filter must lie in [0, 1)");
        }
        if !(self.tau_d > 0.0 && self.tau_f > 0.0) {
            return bad("time scales must be positive");
        }
        if !(self.sigma_jet > 0.0) {
            return bad("sigma_jet must be positive");
        }
        if !(0.0..0.5).contains(&self.sponge_width_frac) || !(self.sponge_rate >= 0.0) {
            return bad("sponge width must lie in [0, 0.5) and rate be non-negative");
        }
        Ok(())
    }
}

mod timescale {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Radiative-equilibrium jet: `u_eq = sech^2(y / sigma)` away from the
/// channel edges.
///
/// The grid is periodic in y, so the eastward jet's transport is returned by
/// a westward `cos^4` flow confined to the sponge band around `y = +-ly/2`.
/// `psi_r` is odd in y and vanishes at the edge, hence periodic.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumProfile {
    pub y: Vec<f64>,
    pub psi_r: Vec<f64>,
    pub u_eq: Vec<f64>,
}

impl EquilibriumProfile {
    pub fn new(grid: &Grid, params: &QgParams) -> Self {
        let sigma = params.sigma_jet;
        let half = 0.5 * grid.ly;
        let w = params.sponge_width_frac * grid.ly;
        // Return-flow amplitude that cancels the jet's net transport.
        let amp = if w > 0.0 {
            8.0 * sigma * (half / sigma).tanh() / (3.0 * w)
        } else {
            0.0
        };
        let antideriv = |t: f64| 3.0 * t / 8.0 + (2.0 * t).sin() / 4.0 + (4.0 * t).sin() / 32.0;
        let (mut y, mut psi_r, mut u_eq) = (vec![], vec![], vec![]);
        for j in 0..grid.ny {
            let yj = grid.y(j);
            let a = yj.abs();
            let d = half - a;
            let sech = 1.0 / (yj / sigma).cosh();
            let (bump, bump_int) = if w > 0.0 && d < w {
                let theta = PI * d / (2.0 * w);
                (
                    theta.cos().powi(4),
                    (2.0 * w / PI) * (antideriv(PI / 2.0) - antideriv(theta)),
                )
            } else {
                (0.0, 0.0)
            };
            y.push(yj);
            u_eq.push(sech * sech - amp * bump);
            psi_r.push(-yj.signum() * (sigma * (a / sigma).tanh() - amp * bump_int));
        }
        EquilibriumProfile { y, psi_r, u_eq }
    }
}

/// Leapfrog state: streamfunction at the current level plus two PV levels.
///
/// `q_prev` is `None` until the first step, which is bootstrapped by a
/// forward-Euler half step followed by a midpoint step.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub psi: LayeredField,
    pub q_prev: Option<PvAnomaly>,
    pub q_curr: PvAnomaly,
    pub step_index: u64,
}

impl SolverState {
    /// Dealiased state for a streamfunction in either representation.
    pub fn from_psi(psi: &LayeredField) -> Result<Self> {
        let grid = *psi.grid();
        let spec = psi.spectral()?;
        let k2 = k2_table(&grid);
        let mask = dealias_mask(&grid);
        let mut q = LayeredField::zeros(grid, Representation::Spectral);
        pv_from_psi_coeffs(&k2, spec.coeffs()?, q.coeffs_mut()?);
        apply_mask(q.coeffs_mut()?, &mask);
        let mut psi = LayeredField::zeros(grid, Representation::Spectral);
        invert_pv_coeffs(&k2, q.coeffs()?, psi.coeffs_mut()?);
        Ok(SolverState {
            psi,
            q_prev: None,
            q_curr: PvAnomaly(q),
            step_index: 0,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.psi.grid()
    }

    /// Streamfunction in grid representation.
    pub fn psi_grid(&self) -> Result<LayeredField> {
        self.psi.to_grid()
    }
}

fn apply_mask(c: &mut [Complex64], mask: &[bool]) {
    for layer in c.chunks_mut(mask.len()) {
        for (z, &keep) in layer.iter_mut().zip(mask) {
            if !keep {
                *z = Complex64::new(0.0, 0.0);
            }
        }
    }
}

/// Total energy `1/2 int (|grad psi_1|^2 + |grad psi_2|^2 + (psi_1 - psi_2)^2) dA`.
pub fn energy(psi: &LayeredField) -> Result<f64> {
    let spec = psi.spectral()?;
    let grid = *psi.grid();
    let c = spec.coeffs()?;
    let nc = grid.coeffs_per_layer();
    let mut sum = 0.0;
    for idx in 0..nc {
        let (m, n) = (idx / grid.ny, idx % grid.ny);
        let w = half_spectrum_weight(&grid, m);
        let k2 = grid.k2(m, n);
        let (a, b) = (c[idx], c[nc + idx]);
        sum += w * (k2 * (a.norm_sqr() + b.norm_sqr()) + (a - b).norm_sqr());
    }
    Ok(0.5 * grid.lx * grid.ly * sum)
}

struct Workspace {
    fft: Fft2,
    deriv: [Vec<Complex64>; 4],
    phys: [Vec<f64>; 4],
    jac: Vec<f64>,
    layer: Vec<Complex64>,
    adv: Vec<Complex64>,
    damp: Vec<Complex64>,
    mid: Vec<Complex64>,
    psi_aux: Vec<Complex64>,
}

/// The numerical model: precomputed operators plus transform workspace.
pub struct QgModel {
    grid: Grid,
    params: QgParams,
    profile: EquilibriumProfile,
    k2: Vec<f64>,
    kx: Vec<f64>,
    ky: Vec<f64>,
    mask_f: Vec<f64>,
    inv_bt: Vec<f64>,
    inv_bc: Vec<f64>,
    /// Zonal modes carried through transforms, `nx / 3 + 1`.
    m_active: usize,
    if_half: Vec<f64>,
    if_full: Vec<f64>,
    if_double: Vec<f64>,
    sponge: Vec<f64>,
    psi_eq: Vec<Complex64>,
    shear_eq: Vec<Complex64>,
    q_eq: Vec<Complex64>,
    ws: Workspace,
}

impl Clone for QgModel {
    fn clone(&self) -> Self {
        QgModel::new(self.grid, self.params).expect("parameters validated at construction")
    }
}

impl std::fmt::Debug for QgModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QgModel")
            .field("grid", &self.grid)
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl QgModel {
    pub fn new(grid: Grid, params: QgParams) -> Result<Self> {
        grid.validate()?;
        params.validate()?;
        let nc = grid.coeffs_per_layer();
        let k2 = k2_table(&grid);
        let mask = dealias_mask(&grid);
        let kx = (0..grid.modes_x())
            .map(|m| if m == grid.nx / 2 { 0.0 } else { grid.kx(m) })
            .collect();
        let ky = (0..grid.ny)
            .map(|n| if n == grid.ny / 2 { 0.0 } else { grid.ky(n) })
            .collect();
        let hyper = |h: f64| -> Vec<f64> {
            k2.iter()
                .map(|&k| (-params.nu * h * k.powi(4)).exp())
                .collect()
        };
        let (if_half, if_full, if_double) =
            (hyper(0.5 * grid.dt), hyper(grid.dt), hyper(2.0 * grid.dt));

        let profile = EquilibriumProfile::new(&grid, &params);
        let half = 0.5 * grid.ly;
        let w = params.sponge_width_frac * grid.ly;
        let sponge = if params.sponge_rate > 0.0 && w > 0.0 {
            profile
                .y
                .iter()
                .map(|y| {
                    let d = half - y.abs();
                    if d < w {
                        params.sponge_rate * 0.5 * (1.0 + (PI * d / w).cos())
                    } else {
                        0.0
                    }
                })
                .collect()
        } else {
            Vec::new()
        };

        // Equilibrium state psi_1 = psi_R, psi_2 = 0 (dealiased).
        let eq_field = LayeredField::from_fn(grid, |k, _, _| 0.0 * k as f64);
        let mut eq_values = eq_field.into_values()?;
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                eq_values[j * grid.nx + i] = profile.psi_r[j];
            }
        }
        let eq_state = SolverState::from_psi(&LayeredField::from_values(grid, eq_values)?)?;
        let psi_eq = eq_state.psi.coeffs()?.to_vec();
        let shear_eq = (0..nc).map(|i| psi_eq[i] - psi_eq[nc + i]).collect();
        let mask_f = mask.iter().map(|&keep| if keep { 1.0 } else { 0.0 }).collect();
        let inv_bt = k2.iter().map(|&k| if k > 0.0 { -1.0 / k } else { 0.0 }).collect();
        let inv_bc = k2.iter().map(|&k| 1.0 / (-k - 2.0)).collect();
        let q_eq = eq_state.q_curr.0.coeffs()?.to_vec();

        let zero = Complex64::new(0.0, 0.0);
        let np = grid.points();
        let ws = Workspace {
            fft: Fft2::new(&grid),
            deriv: std::array::from_fn(|_| vec![zero; nc]),
            phys: std::array::from_fn(|_| vec![0.0; np]),
            jac: vec![0.0; np],
            layer: vec![zero; nc],
            adv: vec![zero; LAYERS * nc],
            damp: vec![zero; LAYERS * nc],
            mid: vec![zero; LAYERS * nc],
            psi_aux: vec![zero; LAYERS * nc],
        };
        Ok(QgModel {
            grid,
            params,
            profile,
            k2,
            kx,
            ky,
            mask_f,
            inv_bt,
            inv_bc,
            m_active: grid.nx / 3 + 1,
            if_half,
            if_full,
            if_double,
            sponge,
            psi_eq,
            shear_eq,
            q_eq,
            ws,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn params(&self) -> &QgParams {
        &self.params
    }

    pub fn profile(&self) -> &EquilibriumProfile {
        &self.profile
    }

    /// Peak sponge rate profile over y (empty when the sponge is off).
    pub fn sponge_profile(&self) -> &[f64] {
        &self.sponge
    }

    /// The zonal equilibrium state `psi_1 = psi_R`, `psi_2 = 0`.
    pub fn equilibrium_state(&self) -> SolverState {
        let mut psi = LayeredField::zeros(self.grid, Representation::Spectral);
        let mut q = psi.clone();
        psi.coeffs_mut().expect("spectral").copy_from_slice(&self.psi_eq);
        q.coeffs_mut().expect("spectral").copy_from_slice(&self.q_eq);
        SolverState {
            psi,
            q_prev: None,
            q_curr: PvAnomaly(q),
            step_index: 0,
        }
    }

    fn check_grid(&self, grid: &Grid) -> Result<()> {
        self.grid.check_same(grid)
    }

    /// Advective tendency `-J(psi, q') - beta psi_x`, dealiased.
    ///
    /// Only the first `m_limit` zonal modes of inputs and output are touched;
    /// pass `modes_x` for arbitrary inputs, `m_active` for dealiased ones.
    fn advection(&mut self, psi: &[Complex64], q: &[Complex64], out: &mut [Complex64], m_limit: usize) {
        let g = self.grid;
        let (nc, ny) = (g.coeffs_per_layer(), g.ny);
        let a = m_limit * ny;
        let beta = self.params.beta;
        let ws = &mut self.ws;
        let i_times = |k: f64, z: Complex64| Complex64::new(-k * z.im, k * z.re);
        for layer in 0..LAYERS {
            let p = &psi[layer * nc..layer * nc + a];
            let qq = &q[layer * nc..layer * nc + a];
            {
                let [d0, d1, d2, d3] = &mut ws.deriv;
                for m in 0..m_limit {
                    let kx = self.kx[m];
                    let r = m * ny..(m + 1) * ny;
                    let (pm, qm) = (&p[r.clone()], &qq[r.clone()]);
                    let (a0, a1) = (&mut d0[r.clone()], &mut d1[r.clone()]);
                    let (a2, a3) = (&mut d2[r.clone()], &mut d3[r]);
                    for n in 0..ny {
                        let ky = self.ky[n];
                        a0[n] = i_times(kx, pm[n]);
                        a1[n] = i_times(ky, pm[n]);
                        a2[n] = i_times(kx, qm[n]);
                        a3[n] = i_times(ky, qm[n]);
                    }
                }
            }
            for d in 0..4 {
                ws.fft.inverse_truncated(&ws.deriv[d], &mut ws.phys[d], m_limit);
            }
            let [px, py, qx, qy] = &ws.phys;
            for (((j, a), b), (c, d)) in ws.jac.iter_mut().zip(px).zip(py).zip(qy.iter().zip(qx)) {
                *j = a * c - b * d;
            }
            ws.fft.forward_truncated(&ws.jac, &mut ws.layer, m_limit);
            let o = &mut out[layer * nc..layer * nc + a];
            for m in 0..m_limit {
                let bk = beta * self.kx[m];
                let r = m * ny..(m + 1) * ny;
                let (om, jm, pm, mk) = (&mut o[r.clone()], &ws.layer[r.clone()], &p[r.clone()], &self.mask_f[r]);
                for n in 0..ny {
                    om[n] = (-jm[n] - i_times(bk, pm[n])) * mk[n];
                }
            }
        }
    }

    /// Relaxation toward `psi_R`, lower-layer friction and sponge damping,
    /// over the first `m_limit` zonal modes.
    fn damping(&mut self, psi: &[Complex64], q: &[Complex64], out: &mut [Complex64], m_limit: usize) {
        let g = self.grid;
        let (nc, ny) = (g.coeffs_per_layer(), g.ny);
        let a = m_limit * ny;
        let inv_d = 1.0 / self.params.tau_d;
        let inv_f = 1.0 / self.params.tau_f;
        {
            let (o1, o2) = out.split_at_mut(nc);
            let (o1, o2) = (&mut o1[..a], &mut o2[..a]);
            let (p1, p2) = (&psi[..a], &psi[nc..nc + a]);
            let shear_eq = &self.shear_eq[..a];
            let k2 = &self.k2[..a];
            for i in 0..a {
                let dev = (p1[i] - p2[i] - shear_eq[i]) * inv_d;
                o1[i] = dev;
                o2[i] = p2[i] * (k2[i] * inv_f) - dev;
            }
        }
        if !self.sponge.is_empty() {
            let ws = &mut self.ws;
            for k in 0..LAYERS {
                let (qk, qe) = (&q[k * nc..k * nc + a], &self.q_eq[k * nc..k * nc + a]);
                for ((l, x), e) in ws.layer[..a].iter_mut().zip(qk).zip(qe) {
                    *l = x - e;
                }
                ws.fft.multiply_in_y(&mut ws.layer, &self.sponge, m_limit);
                for (o, l) in out[k * nc..k * nc + a].iter_mut().zip(&ws.layer[..a]) {
                    *o -= l;
                }
            }
        }
        for k in 0..LAYERS {
            for (o, mk) in out[k * nc..k * nc + a].iter_mut().zip(&self.mask_f[..a]) {
                *o *= mk;
            }
        }
    }

    /// PV inversion over the first `a` stored modes of each layer.
    fn invert(&self, q: &[Complex64], psi: &mut [Complex64], a: usize) {
        let nc = self.grid.coeffs_per_layer();
        let (q1, q2) = (&q[..a], &q[nc..nc + a]);
        let (p1, p2) = psi.split_at_mut(nc);
        let (p1, p2) = (&mut p1[..a], &mut p2[..a]);
        let (ibt, ibc) = (&self.inv_bt[..a], &self.inv_bc[..a]);
        for i in 0..a {
            let bt = (q1[i] + q2[i]) * (0.5 * ibt[i]);
            let bc = (q1[i] - q2[i]) * (0.5 * ibc[i]);
            p1[i] = bt + bc;
            p2[i] = bt - bc;
        }
    }

    #[cfg(test)]
    fn damping_only(&mut self, state: &SolverState) -> LayeredField {
        let mut out = vec![Complex64::new(0.0, 0.0); 2 * self.grid.coeffs_per_layer()];
        let mh = self.grid.modes_x();
        self.damping(state.psi.coeffs().unwrap(), state.q_curr.0.coeffs().unwrap(), &mut out, mh);
        LayeredField::from_coeffs(self.grid, out).unwrap()
    }

    /// Full PV tendency (without hyperdiffusion) at the current level.
    pub fn tendency(&mut self, state: &SolverState) -> Result<PvAnomaly> {
        self.check_grid(state.grid())?;
        let psi = state.psi.coeffs()?;
        let q = state.q_curr.0.coeffs()?;
        let mh = self.grid.modes_x();
        let mut adv = vec![Complex64::new(0.0, 0.0); psi.len()];
        let mut damp = adv.clone();
        self.advection(psi, q, &mut adv, mh);
        self.damping(psi, q, &mut damp, mh);
        for (a, d) in adv.iter_mut().zip(&damp) {
            *a += d;
        }
        Ok(PvAnomaly(LayeredField::from_coeffs(self.grid, adv)?))
    }

    /// Dealiased pseudo-spectral Jacobian `psi_x q_y - psi_y q_x` per layer.
    pub fn jacobian(&mut self, psi: &LayeredField, q: &PvAnomaly) -> Result<LayeredField> {
        self.check_grid(psi.grid())?;
        self.check_grid(q.0.grid())?;
        let p = psi.coeffs()?;
        let qc = q.0.coeffs()?;
        let mh = self.grid.modes_x();
        let mut adv = vec![Complex64::new(0.0, 0.0); p.len()];
        // advection() returns -J - beta psi_x; undo both.
        let beta = std::mem::replace(&mut self.params.beta, 0.0);
        self.advection(p, qc, &mut adv, mh);
        self.params.beta = beta;
        for a in adv.iter_mut() {
            *a = -*a;
        }
        LayeredField::from_coeffs(self.grid, adv)
    }

    /// Advances one time step.
    pub fn step(&mut self, state: &mut SolverState) -> Result<()> {
        self.check_grid(state.grid())?;
        let nc = self.grid.coeffs_per_layer();
        let dt = self.grid.dt;
        let m = self.m_active;
        let a = m * self.grid.ny;
        let mut adv = std::mem::take(&mut self.ws.adv);
        let mut damp = std::mem::take(&mut self.ws.damp);
        let mut mid = std::mem::take(&mut self.ws.mid);
        let mut psi_aux = std::mem::take(&mut self.ws.psi_aux);

        match state.q_prev.take() {
            None => {
                let q0 = state.q_curr.0.coeffs()?.to_vec();
                let p0 = state.psi.coeffs()?;
                self.advection(p0, &q0, &mut adv, m);
                self.damping(p0, &q0, &mut damp, m);
                for k in 0..LAYERS {
                    let r = k * nc..k * nc + a;
                    for (i, ((md, q), (f, d))) in mid[r.clone()]
                        .iter_mut()
                        .zip(&q0[r.clone()])
                        .zip(adv[r.clone()].iter().zip(&damp[r.clone()]))
                        .enumerate()
                    {
                        *md = (q + (f + d) * (0.5 * dt)) * self.if_half[i];
                    }
                }
                self.invert(&mid, &mut psi_aux, a);
                self.advection(&psi_aux, &mid, &mut adv, m);
                self.damping(&psi_aux, &mid, &mut damp, m);
                let q_new = state.q_curr.0.coeffs_mut()?;
                for k in 0..LAYERS {
                    let r = k * nc..k * nc + a;
                    for (i, ((qn, q), (f, d))) in q_new[r.clone()]
                        .iter_mut()
                        .zip(&q0[r.clone()])
                        .zip(adv[r.clone()].iter().zip(&damp[r.clone()]))
                        .enumerate()
                    {
                        *qn = q * self.if_full[i] + (f + d) * (dt * self.if_half[i]);
                    }
                }
                state.q_prev = Some(PvAnomaly(LayeredField::from_coeffs(self.grid, q0)?));
            }
            Some(mut prev) => {
                {
                    let qp = prev.0.coeffs()?;
                    self.invert(qp, &mut psi_aux, a);
                    self.damping(&psi_aux, qp, &mut damp, m);
                }
                self.advection(state.psi.coeffs()?, state.q_curr.0.coeffs()?, &mut adv, m);
                let ra = self.params.ra_filter;
                let qc = state.q_curr.0.coeffs_mut()?;
                let qp = prev.0.coeffs_mut()?;
                for k in 0..LAYERS {
                    let r = k * nc..k * nc + a;
                    let (qc, qp) = (&mut qc[r.clone()], &mut qp[r.clone()]);
                    let (f, d) = (&adv[r.clone()], &damp[r]);
                    let (e1, e2) = (&self.if_full[..a], &self.if_double[..a]);
                    for i in 0..a {
                        let q_new = (qp[i] + d[i] * (2.0 * dt)) * e2[i] + f[i] * (2.0 * dt * e1[i]);
                        // Robert-Asselin filter on the middle level, which
                        // becomes the new lagged level.
                        qp[i] = qc[i] + (qp[i] - qc[i] * 2.0 + q_new) * ra;
                        qc[i] = q_new;
                    }
                }
                state.q_prev = Some(prev);
            }
        }
        self.invert(state.q_curr.0.coeffs()?, state.psi.coeffs_mut()?, a);
        state.step_index += 1;

        self.ws.adv = adv;
        self.ws.damp = damp;
        self.ws.mid = mid;
        self.ws.psi_aux = psi_aux;

        let q = state.q_curr.0.coeffs()?;
        let probe: f64 = (0..LAYERS)
            .map(|k| q[k * nc..k * nc + a].iter().map(|z| z.re + z.im).sum::<f64>())
            .sum();
        if !probe.is_finite() {
            return Err(Error::NonFinite {
                step: state.step_index,
            });
        }
        Ok(())
    }

    pub fn propagate(&mut self, state: &mut SolverState, n_steps: u64) -> Result<()> {
        for _ in 0..n_steps {
            self.step(state)?;
        }
        Ok(())
    }

    /// Advances a bare streamfunction `n_steps` from a fresh (bootstrapped) start.
    pub fn advance_psi(&mut self, psi: &LayeredField, n_steps: u64) -> Result<LayeredField> {
        self.check_grid(psi.grid())?;
        if n_steps == 0 {
            return Ok(psi.clone());
        }
        let mut state = SolverState::from_psi(psi)?;
        self.propagate(&mut state, n_steps)?;
        match psi.representation() {
            Representation::Grid => state.psi.to_grid(),
            Representation::Spectral => Ok(state.psi),
        }
    }

    /// Equilibrium jet plus a small seeded perturbation, integrated `n_steps`.
    pub fn spinup(&mut self, seed: u64, n_steps: u64) -> Result<SolverState> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eq = self.equilibrium_state().psi.to_grid()?;
        let mut values = eq.into_values()?;
        for v in values.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += SPINUP_NOISE * z;
        }
        let mut state = SolverState::from_psi(&LayeredField::from_values(self.grid, values)?)?;
        self.propagate(&mut state, n_steps)?;
        Ok(state)
    }
}

/// Grid-point standard deviation of the spinup seed perturbation.
pub const SPINUP_NOISE: f64 = 0.01;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::invert_pv;

    fn small_grid() -> Grid {
        Grid::new(32, 48, 46.0, 68.0, 0.025).unwrap()
    }

    #[test]
    fn params_reject_bad_values() {
        let g = small_grid();
        let mut p = QgParams::reference(&g);
        assert!(p.validate().is_ok());
        p.ra_filter = 1.0;
        assert!(p.validate().is_err());
        let mut p = QgParams::reference(&g);
        p.nu = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn params_serialize_disabled_timescales_as_null() {
        let g = small_grid();
        let p = QgParams::inviscid_unforced(&g);
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"tau_d\":null"));
        let back: QgParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn hyperdiffusion_rule_e_folds_in_ten_steps() {
        let g = Grid::reference();
        let p = QgParams::reference(&g);
        let kmax = g.max_retained_wavenumber();
        assert!((p.nu * kmax.powi(8) * 10.0 * g.dt - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equilibrium_profile_is_the_sech_jet_outside_the_sponge() {
        let g = Grid::half_size();
        let p = QgParams::reference(&g);
        let prof = EquilibriumProfile::new(&g, &p);
        let j0 = g.ny / 2;
        assert_eq!(prof.y[j0], 0.0);
        assert!((prof.u_eq[j0] - 1.0).abs() < 1e-15);
        assert!(prof.u_eq.iter().all(|&u| u <= 1.0));
        let w = p.sponge_width_frac * g.ly;
        for j in 0..g.ny {
            let y = prof.y[j];
            if 0.5 * g.ly - y.abs() >= w {
                let s = 1.0 / (y / p.sigma_jet).cosh();
                assert!((prof.u_eq[j] - s * s).abs() < 1e-14);
                assert!((prof.psi_r[j] + p.sigma_jet * (y / p.sigma_jet).tanh()).abs() < 1e-12);
            }
        }
        // periodic: psi_R vanishes at the channel edge
        assert!(prof.psi_r[0].abs() < 1e-12);
        // -d psi_R / dy matches u_eq (centered differences, interior)
        let dy = g.dy();
        for j in 1..g.ny - 1 {
            let u = -(prof.psi_r[j + 1] - prof.psi_r[j - 1]) / (2.0 * dy);
            assert!((u - prof.u_eq[j]).abs() < 0.05, "j={j} fd={u} u={}", prof.u_eq[j]);
        }
    }

    #[test]
    fn zonal_equilibrium_has_zero_tendency() {
        let g = small_grid();
        let mut model = QgModel::new(g, QgParams::reference(&g)).unwrap();
        let eq = model.equilibrium_state();
        let t = model.tendency(&eq).unwrap();
        assert!(t.0.max_abs() < 1e-13, "{}", t.0.max_abs());
    }

    #[test]
    fn zero_state_relaxes_toward_the_jet() {
        let g = small_grid();
        let mut params = QgParams::reference(&g);
        params.sponge_rate = 0.0;
        let mut model = QgModel::new(g, params).unwrap();
        let zero = SolverState::from_psi(&LayeredField::zeros(g, Representation::Grid)).unwrap();
        let t = model.tendency(&zero).unwrap().0.to_grid().unwrap();
        let eq = model.equilibrium_state().psi.to_grid().unwrap();
        let psi_r = eq.layer_values(0).unwrap();
        // dq'_1/dt = -psi_R / tau_d and dq'_2/dt = +psi_R / tau_d
        for (k, sign) in [(0usize, -1.0), (1, 1.0)] {
            let tk = t.layer_values(k).unwrap();
            for (a, r) in tk.iter().zip(psi_r) {
                assert!((a - sign * r / params.tau_d).abs() < 1e-12);
            }
        }
    }

    fn smooth_pair(g: Grid) -> (LayeredField, LayeredField) {
        let (a, b) = (2.0 * PI / g.lx, 2.0 * PI / g.ly);
        let psi = LayeredField::from_fn(g, |k, x, y| {
            (a * x + 0.3).sin() * (b * y).cos() + 0.5 * (2.0 * b * y + k as f64).sin()
        });
        let q = LayeredField::from_fn(g, |k, x, y| {
            (2.0 * a * x).cos() + (a * x - b * y + 0.1 * k as f64).sin()
        });
        (psi, q)
    }

    #[test]
    fn jacobian_identities() {
        let g = small_grid();
        let mut model = QgModel::new(g, QgParams::reference(&g)).unwrap();
        let zonal_a = LayeredField::from_fn(g, |_, _, y| (2.0 * PI * y / g.ly).sin())
            .to_spectral()
            .unwrap();
        let zonal_b = LayeredField::from_fn(g, |_, _, y| (4.0 * PI * y / g.ly).cos())
            .to_spectral()
            .unwrap();
        let j = model.jacobian(&zonal_a, &PvAnomaly(zonal_b)).unwrap();
        assert!(j.max_abs() < 1e-12);

        let (psi, q) = smooth_pair(g);
        let (psi, q) = (psi.to_spectral().unwrap(), q.to_spectral().unwrap());
        let self_j = model.jacobian(&psi, &PvAnomaly(psi.clone())).unwrap();
        assert!(self_j.max_abs() < 1e-10);
        // domain integral of J is the (0, 0) coefficient
        let jq = model.jacobian(&psi, &PvAnomaly(q)).unwrap();
        for k in 0..LAYERS {
            assert!(jq.coeff(k, 0, 0).unwrap().norm() < 1e-10);
        }
    }

    fn fd_jacobian_error(n: usize) -> f64 {
        let g = Grid::new(n, n, 46.0, 68.0, 0.025).unwrap();
        let mut model = QgModel::new(g, QgParams::reference(&g)).unwrap();
        let (psi, q) = smooth_pair(g);
        let j = model
            .jacobian(&psi.to_spectral().unwrap(), &PvAnomaly(q.to_spectral().unwrap()))
            .unwrap()
            .to_grid()
            .unwrap();
        let (pv, qv, jv) = (psi.values().unwrap(), q.values().unwrap(), j.values().unwrap());
        let (dx, dy) = (g.dx(), g.dy());
        let at = |f: &[f64], k: usize, i: usize, j: usize| f[k * n * n + (j % n) * n + (i % n)];
        let mut err: f64 = 0.0;
        for k in 0..LAYERS {
            for jj in 0..n {
                for ii in 0..n {
                    let d = |f: &[f64]| {
                        (
                            (at(f, k, ii + 1, jj) - at(f, k, ii + n - 1, jj)) / (2.0 * dx),
                            (at(f, k, ii, jj + 1) - at(f, k, ii, jj + n - 1)) / (2.0 * dy),
                        )
                    };
                    let ((px, py), (qx, qy)) = (d(pv), d(qv));
                    let fd = px * qy - py * qx;
                    err = err.max((fd - at(jv, k, ii, jj)).abs());
                }
            }
        }
        err
    }

    #[test]
    fn jacobian_matches_second_order_finite_differences() {
        let (e32, e64) = (fd_jacobian_error(32), fd_jacobian_error(64));
        let order = (e32 / e64).log2();
        assert!(e64 < 2e-2, "{e64}");
        assert!((order - 2.0).abs() < 0.3, "observed order {order}");
    }

    fn perturbed_jet(g: Grid, params: QgParams, amp: f64, seed: u64) -> (QgModel, SolverState) {
        let mut model = QgModel::new(g, params).unwrap();
        let state = model.spinup(seed, 0).unwrap();
        if amp != SPINUP_NOISE {
            let eq = model.equilibrium_state().psi;
            let dev = state.psi.axpy(-1.0, &eq).unwrap().scaled(amp / SPINUP_NOISE);
            return (model, SolverState::from_psi(&eq.axpy(1.0, &dev).unwrap()).unwrap());
        }
        (model, state)
    }

    #[test]
    fn equilibrium_step_decays_only_by_hyperdiffusion() {
        let g = small_grid();
        let mut model = QgModel::new(g, QgParams::reference(&g)).unwrap();
        let mut s = model.equilibrium_state();
        let psi0 = s.psi.to_grid().unwrap();
        model.step(&mut s).unwrap();
        let moved = s.psi.to_grid().unwrap().axpy(-1.0, &psi0).unwrap().max_abs();
        let mut q = model.equilibrium_state().q_curr.0;
        for (z, e) in q.coeffs_mut().unwrap().iter_mut().zip(model.if_full.iter().cycle()) {
            *z *= e;
        }
        let bound = invert_pv(&PvAnomaly(q)).unwrap().to_grid().unwrap().axpy(-1.0, &psi0).unwrap().max_abs();
        assert!(moved <= bound * 1.01 + 1e-12, "moved {moved} bound {bound}");
    }

    #[test]
    fn inviscid_energy_is_conserved() {
        let g = small_grid();
        let (mut model, mut s) = perturbed_jet(g, QgParams::inviscid_unforced(&g), 0.05, 3);
        let e0 = energy(&s.psi).unwrap();
        model.propagate(&mut s, 1000).unwrap();
        let e1 = energy(&s.psi).unwrap();
        assert!(((e1 - e0) / e0).abs() <= 1e-3, "drift {}", (e1 - e0) / e0);
    }

    #[test]
    fn advection_conserves_layer_mean_pv() {
        let g = small_grid();
        let (mut model, mut s) = perturbed_jet(g, QgParams::inviscid_unforced(&g), 0.5, 4);
        model.propagate(&mut s, 200).unwrap();
        let before: Vec<_> = (0..LAYERS).map(|k| s.q_curr.0.coeff(k, 0, 0).unwrap()).collect();
        model.step(&mut s).unwrap();
        for k in 0..LAYERS {
            assert!((s.q_curr.0.coeff(k, 0, 0).unwrap() - before[k]).norm() < 1e-10);
        }
    }

    #[test]
    fn small_perturbation_grows_on_the_jet() {
        let g = Grid::half_size();
        let params = QgParams::reference(&g);
        let (mut model, mut s) = perturbed_jet(g, params, 1e-4, 5);
        let eq = model.equilibrium_state().psi;
        let n0 = s.psi.axpy(-1.0, &eq).unwrap().mean_square().sqrt();
        model.propagate(&mut s, 500).unwrap();
        let n1 = s.psi.axpy(-1.0, &eq).unwrap().mean_square().sqrt();
        assert!(n1 / n0 > 1.0, "ratio {}", n1 / n0);
    }

    #[test]
    fn sponge_leaves_the_interior_untouched() {
        let g = small_grid();
        let params = QgParams::reference(&g);
        let mut with = QgModel::new(g, params).unwrap();
        let mut without = QgModel::new(g, QgParams { sponge_rate: 0.0, ..params }).unwrap();
        let eq = with.equilibrium_state().q_curr.0.to_grid().unwrap();
        let w = params.sponge_width_frac * g.ly;
        let bump = LayeredField::from_fn(g, |k, x, y| {
            let d = 0.5 * g.ly - y.abs();
            if d > w + 1.0 {
                (1.0 + k as f64) * (2.0 * PI * x / g.lx).cos() * ((d - w - 1.0) / 4.0).tanh()
            } else {
                0.0
            }
        });
        let q = PvAnomaly(eq.axpy(1.0, &bump).unwrap().to_spectral().unwrap());
        let state = SolverState {
            psi: invert_pv(&q).unwrap(),
            q_prev: None,
            q_curr: q,
            step_index: 0,
        };
        let a = with.damping_only(&state).to_grid().unwrap();
        let b = without.damping_only(&state).to_grid().unwrap();
        let (av, bv) = (a.values().unwrap(), b.values().unwrap());
        for k in 0..LAYERS {
            for j in 0..g.ny {
                if 0.5 * g.ly - g.y(j).abs() >= w {
                    for i in 0..g.nx {
                        let idx = k * g.points() + j * g.nx + i;
                        assert!((av[idx] - bv[idx]).abs() <= 1e-12);
                    }
                }
            }
        }
        // away from equilibrium inside the band the sponge does act
        let zero = SolverState::from_psi(&LayeredField::zeros(g, Representation::Spectral)).unwrap();
        let (a, b) = (with.damping_only(&zero), without.damping_only(&zero));
        assert!(a.axpy(-1.0, &b).unwrap().max_abs() > 1e-3, "sponge inactive");
    }

    #[test]
    fn propagation_composes_and_is_deterministic() {
        let g = small_grid();
        let mut model = QgModel::new(g, QgParams::reference(&g)).unwrap();
        let s0 = model.spinup(9, 100).unwrap();
        let mut a = s0.clone();
        model.propagate(&mut a, 0).unwrap();
        assert_eq!(a, s0);
        model.propagate(&mut a, 70).unwrap();
        let mut b = s0.clone();
        model.propagate(&mut b, 30).unwrap();
        model.propagate(&mut b, 40).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.step_index, 170);
        assert_eq!(model.spinup(9, 100).unwrap(), s0);
    }

    #[test]
    fn different_seeds_decorrelate() {
        let g = small_grid();
        let mut model = QgModel::new(g, QgParams::reference(&g)).unwrap();
        let a = model.spinup(1, 4000).unwrap().psi;
        let b = model.spinup(2, 4000).unwrap().psi;
        let rel = (a.axpy(-1.0, &b).unwrap().mean_square() / a.mean_square()).sqrt();
        assert!(rel > 0.1, "relative difference {rel}");
    }

    #[test]
    fn blow_up_is_reported_with_the_step() {
        let g = small_grid();
        let mut model = QgModel::new(g, QgParams::reference(&g)).unwrap();
        let mut s = model.equilibrium_state();
        s.q_curr.0.coeffs_mut().unwrap()[1] = Complex64::new(f64::NAN, 0.0);
        match model.step(&mut s) {
            Err(Error::NonFinite { step }) => assert_eq!(step, 1),
            other => panic!("{other:?}"),
        }
    }
}
