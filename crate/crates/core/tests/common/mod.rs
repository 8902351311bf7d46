//! Oracles and fixtures shared by the integration targets.
#![allow(dead_code)]

use faer::Mat;
use henkf::assimilation::AnomalyFactor;
use henkf::{Grid, LayeredField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook `P (P + r I)^-1 d` with `P = A A^T / (n - 1)`, solved by
/// Gaussian elimination with partial pivoting.
pub fn dense_gain(a: &[Vec<f64>], r: f64, d: &[f64]) -> Vec<f64> {
    let s = d.len();
    let n = a[0].len();
    let p: Vec<Vec<f64>> = (0..s)
        .map(|i| (0..s).map(|j| (0..n).map(|k| a[i][k] * a[j][k]).sum::<f64>() / (n - 1) as f64).collect())
        .collect();
    let mut m = p.clone();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] += r;
    }
    let mut x = d.to_vec();
    for c in 0..s {
        let piv = (c..s).max_by(|&u, &v| m[u][c].abs().total_cmp(&m[v][c].abs())).unwrap();
        m.swap(c, piv);
        x.swap(c, piv);
        for row in c + 1..s {
            let f = m[row][c] / m[c][c];
            for k in c..s {
                m[row][k] -= f * m[c][k];
            }
            x[row] -= f * x[c];
        }
    }
    for c in (0..s).rev() {
        for k in c + 1..s {
            x[c] -= m[c][k] * x[k];
        }
        x[c] /= m[c][c];
    }
    (0..s).map(|i| (0..s).map(|j| p[i][j] * x[j]).sum()).collect()
}

/// Anomaly factor wrapping raw rows; gain algebra ignores the grid.
pub fn factor(a: &[Vec<f64>]) -> AnomalyFactor {
    let (s, n) = (a.len(), a[0].len());
    AnomalyFactor {
        a: Mat::from_fn(s, n, |i, j| a[i][j]),
        mean: vec![0.0; s],
        grid: Grid::new(8, 8, 1.0, 1.0, 0.1).unwrap(),
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(f64::MIN_POSITIVE)
}

/// Uniform noise in `[-1, 1)` at every grid value.
pub fn random_field(grid: Grid, seed: u64) -> LayeredField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LayeredField::from_values(grid, (0..grid.state_dim()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}
