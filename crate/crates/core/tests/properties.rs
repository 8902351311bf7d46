//! Property-based checks of the gain algebra, localization and skill metrics.

mod common;

use common::{dense_gain, factor, norm};
use henkf::assimilation::{
    analysis_update, anomalies, gaspari_cohn, Ensemble, EnsembleRole, GainSolver, LocalizationKernel,
};
use henkf::metrics::{acc, relative_error, Climatology};
use henkf::{Grid, LayeredField};
use proptest::prelude::*;

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, f64)> {
    (1usize..=12, 2usize..=8, -3.0f64..1.0).prop_flat_map(|(s, n, log_r)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, n), s),
            prop::collection::vec(-1.0f64..1.0, s),
            Just(10f64.powf(log_r)),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn ensemble_space_gain_matches_dense_solve((a, d, r) in instance()) {
        let f = factor(&a);
        let k = GainSolver::ensemble_space(r).prepare(&f).unwrap().apply(&d);
        let oracle = dense_gain(&a, r, &d);
        let diff: Vec<f64> = k.iter().zip(&oracle).map(|(x, y)| x - y).collect();
        prop_assert!(norm(&diff) <= 1e-8 * norm(&oracle).max(1e-300), "relative gap {}", norm(&diff) / norm(&oracle));
        let kd = GainSolver::dense(r).prepare(&f).unwrap().apply(&d);
        let diff: Vec<f64> = kd.iter().zip(&oracle).map(|(x, y)| x - y).collect();
        prop_assert!(norm(&diff) <= 1e-8 * norm(&oracle).max(1e-300));
    }

    #[test]
    fn gain_norm_does_not_grow_with_observation_error((a, d, _r) in instance()) {
        let f = factor(&a);
        let mut last = f64::INFINITY;
        for r in [1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0, 3.0, 10.0] {
            let k = norm(&GainSolver::ensemble_space(r).prepare(&f).unwrap().apply(&d));
            prop_assert!(k <= last * (1.0 + 1e-10) + 1e-14);
            last = k;
        }
    }

    #[test]
    fn scalar_analysis_lies_between_background_and_observation(
        b in prop::collection::vec(-5.0f64..5.0, 2..10),
        o in -5.0f64..5.0,
        r in 1e-3f64..10.0,
    ) {
        let n = b.len();
        let mean = b.iter().sum::<f64>() / n as f64;
        let a: Vec<Vec<f64>> = vec![b.iter().map(|x| x - mean).collect()];
        let f = factor(&a);
        let gain = GainSolver::ensemble_space(r).prepare(&f).unwrap();
        for &bj in &b {
            let upd = bj + gain.apply(&[o - bj])[0];
            let (lo, hi) = if bj < o { (bj, o) } else { (o, bj) };
            prop_assert!(upd >= lo - 1e-12 && upd <= hi + 1e-12);
        }
    }

    #[test]
    fn gaspari_cohn_is_bounded_and_non_increasing(c in 0.1f64..20.0, u in 0.0f64..1.0, v in 0.0f64..1.0) {
        let (lo, hi) = if u < v { (u, v) } else { (v, u) };
        let g_lo = gaspari_cohn(lo * 2.0 * c, c).unwrap();
        let g_hi = gaspari_cohn(hi * 2.0 * c, c).unwrap();
        prop_assert!(g_hi <= g_lo + 1e-14);
        prop_assert!((-1e-14..=1.0).contains(&g_lo));
        for z in [1.0, 2.0] {
            let l = gaspari_cohn(z * c * (1.0 - 1e-13), c).unwrap();
            let r = gaspari_cohn(z * c * (1.0 + 1e-13), c).unwrap();
            prop_assert!((l - r).abs() <= 1e-12);
        }
    }

    #[test]
    fn analysis_mean_is_linear(seed in 0u64..1000, n in 2usize..8, r in 1e-2f64..5.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::new(8, 8, 8.0, 8.0, 0.1).unwrap();
        let mut draw = |scale: f64| {
            let members = (0..n)
                .map(|_| LayeredField::from_values(g, (0..g.state_dim()).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap())
                .collect();
            Ensemble::new(members, vec![0; n], EnsembleRole::Numerical).unwrap()
        };
        let (b, o) = (draw(1.0), draw(0.3));
        let f = anomalies(&b);
        let gain = GainSolver::ensemble_space(r).prepare(&f).unwrap();
        let post = analysis_update(&b, &o, &gain).unwrap().mean();
        let (bm, om) = (b.mean(), o.mean());
        let d: Vec<f64> = om.values().unwrap().iter().zip(bm.values().unwrap()).map(|(x, y)| x - y).collect();
        let k = gain.apply(&d);
        for ((p, bv), kv) in post.values().unwrap().iter().zip(bm.values().unwrap()).zip(&k) {
            prop_assert!((p - (bv + kv)).abs() <= 1e-12);
        }
    }

    #[test]
    fn localization_weights_are_symmetric(radius in 0.5f64..6.0, i in 0usize..128, j in 0usize..128) {
        let g = Grid::new(8, 8, 8.0, 8.0, 0.1).unwrap();
        let k = LocalizationKernel::new(&g, radius).unwrap();
        prop_assert_eq!(k.weight(i, j), k.weight(j, i));
        prop_assert_eq!(k.weight(i, i), 1.0);
    }

    #[test]
    fn skill_metrics_are_scale_invariant(seed in 0u64..1000, c in 0.1f64..10.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::new(8, 8, 8.0, 8.0, 0.1).unwrap();
        let mut field = |shift: f64| LayeredField::from_values(g, (0..g.state_dim()).map(|_| shift + rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (p, t) = (field(0.0), field(2.0));
        let clim = Climatology { mean: field(1.0), count: 1, source: "prop".into() };
        for k in 0..2 {
            let e = relative_error(&p, &t, k).unwrap();
            prop_assert!((relative_error(&p.scaled(c), &t.scaled(c), k).unwrap() - e).abs() <= 1e-12 * e.max(1.0));
            let a = acc(&p, &t, &clim, k).unwrap();
            prop_assert!((-1.0..=1.0).contains(&a));
            let stretched = clim.mean.axpy(c, &p.axpy(-1.0, &clim.mean).unwrap()).unwrap();
            prop_assert!((acc(&stretched, &t, &clim, k).unwrap() - a).abs() <= 1e-12);
        }
    }
}
