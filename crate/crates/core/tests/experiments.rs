//! Small twin experiments through the public harness.

use std::fs;

use henkf::assimilation::{DaConfig, ObsErrorScale};
use henkf::harness::{
    cycles_csv, run_da_experiment, run_filter, run_free_forecast, run_seed, synthesize_twin, Algorithm,
    ClimatologyConfig, ExperimentConfig, SurrogateSpec, TruthConfig,
};
use henkf::metrics::{prediction_horizon, Climatology};
use henkf::{Grid, QgModel};

fn tiny(algorithm: Algorithm, da: DaConfig, grid: Grid) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::reference(algorithm, da);
    cfg.grid = grid;
    cfg.n_cycles = 3;
    cfg.n_seeds = 2;
    cfg.truth = TruthConfig {
        spinup_steps: 400,
        save_every: 20,
        extra_steps: 200,
    };
    cfg.climatology = ClimatologyConfig {
        seed: 77,
        spinup_steps: 400,
        snapshots: 20,
        every: 20,
    };
    cfg.da.alpha = 40;
    cfg
}

fn small_grid() -> Grid {
    Grid::new(16, 24, 46.0, 68.0, 0.025).unwrap()
}

fn climatology(cfg: &ExperimentConfig) -> Climatology {
    henkf::harness::build_climatology(cfg.grid, cfg.params(), &cfg.climatology).unwrap()
}

#[test]
fn oversized_ensemble_improves_on_the_background() {
    // 200 members for a 128-dimensional state: the sample covariance is full rank
    let grid = Grid::new(8, 8, 46.0, 68.0, 0.025).unwrap();
    let mut cfg = tiny(Algorithm::Enkf, DaConfig::enkf(200, 0.1, 5), grid);
    cfg.n_seeds = 6;
    cfg.da.alpha = 20;
    cfg.da.gamma = 20;
    // gain and perturbed observations agree on the error variance
    cfg.da.obs_error_scale = ObsErrorScale::SigmaSquared;
    let clim = climatology(&cfg);
    let mut gain = vec![0.0; cfg.n_cycles];
    for i in 0..cfg.n_seeds {
        let twin = synthesize_twin(&cfg, i).unwrap();
        let run = run_seed(&cfg, i, &twin, &clim).unwrap();
        // the initial state is the noisy observation, so sigma_b = sigma_obs
        // makes the first background spread match its actual error
        let first = &run.reports[0];
        assert!(first.error_analysis[0] < first.error_background[0], "seed {i}");
        for (g, r) in gain.iter_mut().zip(&run.reports) {
            *g += r.error_background[0] - r.error_analysis[0];
        }
    }
    // later cycles improve in expectation, checked on the seed mean
    assert!(gain.iter().all(|&g| g > 0.0), "{gain:?}");
}

#[test]
fn reruns_write_identical_tables() {
    let mut cfg = tiny(Algorithm::Henkf, DaConfig::henkf(4, 30, 0.1, 9), small_grid());
    cfg.covariance_probe = Some([3.38, 1.21]);
    let clim = climatology(&cfg);
    let twins: Vec<_> = (0..cfg.n_seeds).map(|i| synthesize_twin(&cfg, i).unwrap()).collect();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_da_experiment(&cfg, &twins, &clim, Some(a.path())).unwrap();
    run_da_experiment(&cfg, &twins, &clim, Some(b.path())).unwrap();
    for name in ["cycles.csv", "covariance_map.csv", "summary.json", "config.resolved.json", "seed_001/cycles.csv"] {
        let (x, y) = (fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        assert!(x == y, "{name} differs between reruns");
    }
    let resolved = fs::read_to_string(a.path().join("config.resolved.json")).unwrap();
    assert!(resolved.contains(&cfg.hash()));
}

#[test]
fn hybrid_with_the_exact_propagator_reduces_to_enkf_for_one_cycle() {
    let grid = small_grid();
    let mut enkf = tiny(Algorithm::Enkf, DaConfig::enkf(6, 0.2, 3), grid);
    enkf.n_cycles = 1;
    let mut hybrid = tiny(Algorithm::Henkf, DaConfig::henkf(6, 6, 0.2, 3), grid);
    hybrid.n_cycles = 1;
    hybrid.surrogate = Some(SurrogateSpec::Exact);
    hybrid.share_initial_streams = true;
    let twin = synthesize_twin(&enkf, 0).unwrap();
    let a = run_filter(&enkf, 0, &twin.observations).unwrap();
    let b = run_filter(&hybrid, 0, &twin.observations).unwrap();
    let (ma, mb) = (&a.cycles[0].analysis_mean, &b.cycles[0].analysis_mean);
    let gap = ma.axpy(-1.0, mb).unwrap().max_abs() / ma.max_abs();
    assert!(gap < 1e-10, "relative gap {gap}");
}

#[test]
fn filter_outputs_depend_only_on_observations() {
    let cfg = tiny(Algorithm::Enkf, DaConfig::enkf(5, 0.5, 4), small_grid());
    let clim = climatology(&cfg);
    let twin = synthesize_twin(&cfg, 1).unwrap();
    let trace = run_filter(&cfg, 1, &twin.observations).unwrap();
    let scored = run_seed(&cfg, 1, &twin, &clim).unwrap();
    for (c, m) in trace.cycles.iter().zip(&scored.analysis_means) {
        assert_eq!(&c.analysis_mean, m);
    }
    let (x, y) = (cycles_csv(&scored.reports), cycles_csv(&run_seed(&cfg, 1, &twin, &clim).unwrap().reports));
    assert_eq!(x, y);
    assert_eq!(x.lines().count(), cfg.n_cycles + 1);
}

#[test]
fn free_forecast_samples_include_the_start() {
    let cfg = tiny(Algorithm::Enkf, DaConfig::enkf(5, 0.5, 4), small_grid());
    let clim = climatology(&cfg);
    let twin = synthesize_twin(&cfg, 0).unwrap();
    let mut model = QgModel::new(cfg.grid, cfg.params()).unwrap();
    // 1 day = 200 steps, scored every 40 steps, truth extends past the forecast
    let series = run_free_forecast(&mut model, &twin.truth[0], 0, &twin, &clim, 1.0, 40).unwrap();
    assert_eq!(series.len(), 200 / 40 + 1);
    assert_eq!(series.error[0][0], 0.0);
    assert_eq!(prediction_horizon(&series, 0.6, 0).unwrap(), 1.0);
    assert!(run_free_forecast(&mut model, &twin.truth[0], 0, &twin, &clim, 1.0, 30).is_err());
}
