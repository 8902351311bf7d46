//! Per-layer skill scores: relative error, anomaly correlation against a
//! climatology, and the prediction horizon of an ACC series.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, TrajectoryManifest};
use crate::spectral::{LayeredField, LAYERS};

/// Solver steps per day.
pub const STEPS_PER_DAY: u64 = 200;

pub fn steps_to_days(steps: u64) -> f64 {
    steps as f64 / STEPS_PER_DAY as f64
}

fn layer_pair<'a>(a: &'a LayeredField, b: &'a LayeredField, k: usize) -> Result<(&'a [f64], &'a [f64])> {
    a.grid().check_same(b.grid())?;
    if k >= LAYERS {
        return Err(Error::InvalidArgument(format!("layer {k} out of range")));
    }
    Ok((a.layer_values(k)?, b.layer_values(k)?))
}

/// `||pred_k - truth_k||_2 / max(truth_k)`, the norm summed over grid points.
pub fn relative_error(pred: &LayeredField, truth: &LayeredField, k: usize) -> Result<f64> {
    let (p, t) = layer_pair(pred, truth, k)?;
    let max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "relative error needs a positive maximum of the true field, got {max}"
        )));
    }
    let ss: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(ss.sqrt() / max)
}

/// Time-mean field of a truth run independent of the evaluated runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    pub mean: LayeredField,
    pub count: usize,
    pub source: String,
}

#[derive(Serialize, Deserialize)]
struct ClimatologyMeta {
    count: usize,
    source: String,
    grid: crate::spectral::Grid,
}

impl Climatology {
    /// Writes `path` (QGF1 mean) and a JSON sidecar with the same stem.
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_field(path, &self.mean)?;
        io::write_json(
            &path.with_extension("json"),
            &ClimatologyMeta {
                count: self.count,
                source: self.source.clone(),
                grid: *self.mean.grid(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: ClimatologyMeta = io::read_json(&path.with_extension("json"))?;
        let mean = io::read_field(path, meta.grid.dt)?;
        meta.grid.check_same(mean.grid())?;
        Ok(Climatology {
            mean,
            count: meta.count,
            source: meta.source,
        })
    }
}

/// Streaming per-point mean.
#[derive(Debug, Clone)]
pub struct MeanAccumulator {
    grid: crate::spectral::Grid,
    mean: Vec<f64>,
    count: usize,
}

impl MeanAccumulator {
    pub fn new(grid: crate::spectral::Grid) -> Self {
        MeanAccumulator {
            grid,
            mean: vec![0.0; grid.state_dim()],
            count: 0,
        }
    }

    pub fn add(&mut self, field: &LayeredField) -> Result<()> {
        self.grid.check_same(field.grid())?;
        let g = field.gridded()?;
        self.count += 1;
        let w = 1.0 / self.count as f64;
        for (m, v) in self.mean.iter_mut().zip(g.values()?) {
            *m += (v - *m) * w;
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self, source: impl Into<String>) -> Result<Climatology> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("climatology from zero snapshots".into()));
        }
        Ok(Climatology {
            mean: LayeredField::from_values(self.grid, self.mean)?,
            count: self.count,
            source: source.into(),
        })
    }
}

pub fn compute_climatology(manifest: &TrajectoryManifest) -> Result<Climatology> {
    let mut acc = MeanAccumulator::new(manifest.grid);
    for i in 0..manifest.len() {
        acc.add(&manifest.load_snapshot(i)?)?;
    }
    acc.finish(format!("{} (seed {})", manifest.dir.display(), manifest.seed))
}

/// Centered cosine of `pred - clim` and `truth - clim` on layer `k`.
pub fn acc(pred: &LayeredField, truth: &LayeredField, clim: &Climatology, k: usize) -> Result<f64> {
    let (p, t) = layer_pair(pred, truth, k)?;
    let (_, c) = layer_pair(pred, &clim.mean, k)?;
    let (mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0);
    for ((a, b), m) in p.iter().zip(t).zip(c) {
        let (x, y) = (a - m, b - m);
        pt += x * y;
        pp += x * x;
        tt += y * y;
    }
    if pp == 0.0 || tt == 0.0 {
        return Err(Error::InvalidArgument("anomaly correlation of a zero anomaly".into()));
    }
    Ok((pt / (pp * tt).sqrt()).clamp(-1.0, 1.0))
}

/// Skill of a forecast against the truth at saved times.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkillSeries {
    pub steps: Vec<u64>,
    pub error: [Vec<f64>; LAYERS],
    pub acc: [Vec<f64>; LAYERS],
}

impl SkillSeries {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn days(&self) -> Vec<f64> {
        self.steps.iter().map(|&s| steps_to_days(s)).collect()
    }

    /// Scores `pred` against `truth` at `step` and appends the entry.
    pub fn record(&mut self, step: u64, pred: &LayeredField, truth: &LayeredField, clim: &Climatology) -> Result<()> {
        if self.steps.last().is_some_and(|&last| step <= last) {
            return Err(Error::InvalidArgument("skill series steps must increase".into()));
        }
        let mut e = [0.0; LAYERS];
        let mut a = [0.0; LAYERS];
        for k in 0..LAYERS {
            e[k] = relative_error(pred, truth, k)?;
            a[k] = acc(pred, truth, clim, k)?;
        }
        self.steps.push(step);
        for k in 0..LAYERS {
            self.error[k].push(e[k]);
            self.acc[k].push(a[k]);
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,day,E1,E2,ACC1,ACC2\n");
        for i in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{:.10e},{:.10e},{:.10e},{:.10e}",
                self.steps[i],
                steps_to_days(self.steps[i]),
                self.error[0][i],
                self.error[1][i],
                self.acc[0][i],
                self.acc[1][i]
            );
        }
        out
    }
}

/// Day at which `acc[k]` first drops below `threshold`, linearly
/// interpolated between saved times; the series end when it never does.
pub fn prediction_horizon(series: &SkillSeries, threshold: f64, k: usize) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("prediction horizon of an empty series".into()));
    }
    if k >= LAYERS {
        return Err(Error::InvalidArgument(format!("layer {k} out of range")));
    }
    let days = series.days();
    let acc = &series.acc[k];
    if acc[0] < threshold {
        return Ok(days[0]);
    }
    for i in 1..acc.len() {
        if acc[i] < threshold {
            let f = (acc[i - 1] - threshold) / (acc[i - 1] - acc[i]);
            return Ok(days[i - 1] + f * (days[i] - days[i - 1]));
        }
    }
    Ok(*days.last().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Grid {
        Grid::new(8, 8, 1.0, 1.0, 0.1).unwrap()
    }

    fn random(g: Grid, rng: &mut ChaCha8Rng) -> LayeredField {
        LayeredField::from_values(g, (0..g.state_dim()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn relative_error_hand_values() {
        let g = grid();
        let mut t = vec![0.0; g.state_dim()];
        t[0] = 3.0;
        t[1] = 4.0;
        let truth = LayeredField::from_values(g, t).unwrap();
        let zero = LayeredField::zeros(g, crate::spectral::Representation::Grid);
        assert!((relative_error(&zero, &truth, 0).unwrap() - 1.25).abs() < 1e-15);
        assert_eq!(relative_error(&truth, &truth, 0).unwrap(), 0.0);
        assert!(relative_error(&zero, &truth, 1).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random(g, &mut rng);
        let t = random(g, &mut rng);
        let e = relative_error(&p, &t, 0).unwrap();
        assert!((relative_error(&p.scaled(3.5), &t.scaled(3.5), 0).unwrap() - e).abs() < 1e-12 * e);
    }

    #[test]
    fn acc_identities() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clim = Climatology {
            mean: random(g, &mut rng),
            count: 1,
            source: "test".into(),
        };
        let t = random(g, &mut rng);
        let p = random(g, &mut rng);
        for k in 0..2 {
            assert!((acc(&t, &t, &clim, k).unwrap() - 1.0).abs() < 1e-12);
            let neg = clim.mean.axpy(-1.0, &t.axpy(-1.0, &clim.mean).unwrap()).unwrap();
            assert!((acc(&neg, &t, &clim, k).unwrap() + 1.0).abs() < 1e-12);
            let a = acc(&p, &t, &clim, k).unwrap();
            let stretched = clim.mean.axpy(2.7, &p.axpy(-1.0, &clim.mean).unwrap()).unwrap();
            assert!((acc(&stretched, &t, &clim, k).unwrap() - a).abs() < 1e-12);
        }
        assert!(acc(&clim.mean, &t, &clim, 0).is_err());
    }

    #[test]
    fn horizon_interpolates_and_saturates() {
        let mut s = SkillSeries::default();
        s.steps = vec![0, 200];
        s.acc = [vec![1.0, 0.2], vec![1.0, 1.0]];
        s.error = [vec![0.0; 2], vec![0.0; 2]];
        assert!((prediction_horizon(&s, 0.6, 0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(prediction_horizon(&s, 0.6, 1).unwrap(), 1.0);
        assert!(prediction_horizon(&SkillSeries::default(), 0.6, 0).is_err());
    }

    #[test]
    fn streaming_mean_matches_two_pass() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fields: Vec<LayeredField> = (0..100).map(|_| random(g, &mut rng).scaled(10.0)).collect();
        let mut acc = MeanAccumulator::new(g);
        for f in &fields {
            acc.add(f).unwrap();
        }
        let clim = acc.finish("x").unwrap();
        for i in 0..g.state_dim() {
            let two_pass = fields.iter().map(|f| f.values().unwrap()[i]).sum::<f64>() / 100.0;
            assert!((clim.mean.values().unwrap()[i] - two_pass).abs() < 1e-12);
        }
        let c = LayeredField::from_fn(g, |k, x, _| k as f64 + x);
        let mut acc = MeanAccumulator::new(g);
        for _ in 0..5 {
            acc.add(&c).unwrap();
        }
        let m = acc.finish("c").unwrap().mean;
        for (a, b) in m.values().unwrap().iter().zip(c.values().unwrap()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(MeanAccumulator::new(g).finish("none").is_err());
    }

    #[test]
    fn climatology_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clim = Climatology {
            mean: random(g, &mut rng),
            count: 7,
            source: "unit".into(),
        };
        let p = dir.path().join("clim.qgf1");
        clim.save(&p).unwrap();
        assert_eq!(Climatology::load(&p).unwrap(), clim);
    }

    #[test]
    fn skill_series_csv_columns() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clim = Climatology {
            mean: random(g, &mut rng),
            count: 1,
            source: "t".into(),
        };
        let t = random(g, &mut rng).axpy(1.0, &LayeredField::from_fn(g, |_, _, _| 2.0)).unwrap();
        let mut s = SkillSeries::default();
        s.record(0, &t, &t, &clim).unwrap();
        s.record(100, &random(g, &mut rng), &t, &clim).unwrap();
        assert!(s.record(100, &t, &t, &clim).is_err());
        let csv = s.to_csv();
        assert!(csv.starts_with("step,day,E1,E2,ACC1,ACC2\n0,0,"));
        assert_eq!(csv.lines().count(), 3);
        assert!(s.acc.iter().flatten().all(|a| (-1.0..=1.0).contains(a)));
    }
}
