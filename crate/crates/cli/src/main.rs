use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use henkf::harness::{
    self, cached_climatology, export_covariance_map, run_da_experiment, run_free_forecast, run_scaling_study,
    synthesize_twin, ExperimentConfig, SurrogateSpec, TwinData,
};
use henkf::io::{self, TrajectoryManifest};
use henkf::metrics::{self, Climatology, SkillSeries};
use henkf::surrogate::{build_training_set, train_linear_surrogate};
use henkf::{QgModel, QgParams};

#[derive(Parser)]
#[command(name = "henkf", version, about = "Two-layer QG twin experiments with EnKF and hybrid EnKF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the truth and synthesize observations for each seed of an experiment.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only this seed index (default: all seeds).
        #[arg(long)]
        seed_index: Option<usize>,
    },
    /// Fit a per-mode linear surrogate to a saved trajectory.
    TrainSurrogate {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long, default_value_t = 40)]
        gamma: u64,
        #[arg(long, default_value_t = 1e-6)]
        lambda: f64,
        /// Steps between consecutive pair starts (default: gamma).
        #[arg(long)]
        stride: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cycle the configured filter over all seeds.
    Assimilate {
        #[arg(long)]
        config: PathBuf,
        /// Directory written by `simulate`; truth is synthesized when absent.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        clim: ClimArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Free forecast from a QGF1 initial condition, scored against a truth run.
    Forecast {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        initial: PathBuf,
        /// Seed directory written by `simulate` (contains `truth/`).
        #[arg(long)]
        truth: PathBuf,
        /// Truth step (after spinup) of the initial condition.
        #[arg(long)]
        start_step: u64,
        #[arg(long, default_value_t = 10.0)]
        days: f64,
        #[arg(long)]
        stride: Option<u64>,
        #[arg(long, default_value_t = 0.6)]
        threshold: f64,
        #[command(flatten)]
        clim: ClimArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cycle-averaged normalized covariance map at an upper-layer point.
    DiagnoseCovariance {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3.38)]
        x: f64,
        #[arg(long, default_value_t = 1.21)]
        y: f64,
        /// Map a single ensemble snapshot directory instead of running the filter.
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[command(flatten)]
        clim: ClimArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error against measured cost over a lattice of ensemble sizes.
    ScalingStudy {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated `n_numerical:n_data_driven` points.
        #[arg(long, default_value = "20:0,10:100,10:1000")]
        lattice: String,
        #[arg(long, default_value_t = 10)]
        repetitions: usize,
        #[command(flatten)]
        clim: ClimArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Skill of one snapshot trajectory against another.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        climatology: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct ClimArgs {
    /// Existing climatology (QGF1 with JSON sidecar); built and cached when absent.
    #[arg(long)]
    climatology: Option<PathBuf>,
    #[arg(long, default_value = ".henkf-cache")]
    cache_dir: PathBuf,
}

impl ClimArgs {
    fn load(&self, cfg: &ExperimentConfig) -> Result<Climatology> {
        match &self.climatology {
            Some(p) => Climatology::load(p).with_context(|| format!("loading climatology {}", p.display())),
            None => Ok(cached_climatology(cfg.grid, cfg.params(), &cfg.climatology, &self.cache_dir)?),
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = io::read_json(path).with_context(|| format!("reading config {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn seed_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("seed_{i:03}"))
}

fn load_twins(cfg: &ExperimentConfig, truth: Option<&Path>) -> Result<Vec<TwinData>> {
    (0..cfg.n_seeds)
        .map(|i| match truth {
            Some(root) => TwinData::load(&seed_dir(root, i)).with_context(|| format!("loading twin seed {i}")),
            None => Ok(synthesize_twin(cfg, i)?),
        })
        .collect()
}

fn parse_lattice(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|p| {
            let (a, b) = p.trim().split_once(':').with_context(|| format!("lattice point {p:?} is not n_N:n_D"))?;
            Ok((a.parse()?, b.parse()?))
        })
        .collect()
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { config, out, seed_index } => {
            let cfg = load_config(&config)?;
            let seeds: Vec<usize> = match seed_index {
                Some(i) if i < cfg.n_seeds => vec![i],
                Some(i) => bail!("seed index {i} out of range for {} seeds", cfg.n_seeds),
                None => (0..cfg.n_seeds).collect(),
            };
            for i in seeds {
                let m = harness::run_truth(&cfg, i, &seed_dir(&out, i))?;
                println!("seed {i}: {} truth snapshots in {}", m.len(), m.dir.display());
            }
        }
        Command::TrainSurrogate {
            traj,
            gamma,
            lambda,
            stride,
            out,
        } => {
            let manifest = TrajectoryManifest::load(&traj)?;
            let set = build_training_set(&manifest, gamma, stride.unwrap_or(gamma))?;
            let model = train_linear_surrogate(&set, lambda)?;
            model.save(&out)?;
            println!("trained on {} pairs; wrote {}", set.len(), out.display());
        }
        Command::Assimilate {
            config,
            truth,
            clim,
            out,
        } => {
            let cfg = load_config(&config)?;
            let climatology = clim.load(&cfg)?;
            let twins = load_twins(&cfg, truth.as_deref())?;
            let report = run_da_experiment(&cfg, &twins, &climatology, Some(&out))?;
            let s = &report.summary;
            println!(
                "{}: mean analysis E1 {:.4} +/- {:.4}, final ACC1 {:.4} +/- {:.4} over {} seeds",
                s.algorithm.name(),
                s.mean_e1_analysis.mean,
                s.mean_e1_analysis.std,
                s.final_acc1_analysis.mean,
                s.final_acc1_analysis.std,
                s.n_seeds
            );
        }
        Command::Forecast {
            config,
            initial,
            truth,
            start_step,
            days,
            stride,
            threshold,
            clim,
            out,
        } => {
            let cfg = load_config(&config)?;
            let climatology = clim.load(&cfg)?;
            let twin = TwinData::load(&truth)?;
            let ic = io::read_field(&initial, cfg.grid.dt)?;
            let mut model = QgModel::new(cfg.grid, cfg.params())?;
            let series = run_free_forecast(
                &mut model,
                &ic,
                start_step,
                &twin,
                &climatology,
                days,
                stride.unwrap_or(twin.save_every),
            )?;
            io::create_dir(&out)?;
            io::write_text(&out.join("skill.csv"), &series.to_csv())?;
            let horizon = metrics::prediction_horizon(&series, threshold, 0)?;
            io::write_json(&out.join("horizon.json"), &serde_json::json!({ "threshold": threshold, "horizon_days": horizon }))?;
            println!("ACC1 horizon {horizon:.3} days");
        }
        Command::DiagnoseCovariance {
            config,
            x,
            y,
            ensemble,
            clim,
            out,
        } => match ensemble {
            Some(dir) => {
                let m = TrajectoryManifest::load(&dir)?;
                let members = (0..m.len()).map(|i| m.load_snapshot(i)).collect::<henkf::Result<Vec<_>>>()?;
                let n = members.len();
                let ens = henkf::assimilation::Ensemble::new(members, vec![0; n], henkf::assimilation::EnsembleRole::Numerical)?;
                export_covariance_map(&ens, x, y, Some(&out), "covariance_map")?;
                println!("wrote {}", out.join("covariance_map.csv").display());
            }
            None => {
                let mut cfg = load_config(&config)?;
                cfg.covariance_probe = Some([x, y]);
                let climatology = clim.load(&cfg)?;
                let twins = load_twins(&cfg, None)?;
                let report = run_da_experiment(&cfg, &twins, &climatology, Some(&out))?;
                let map = report.covariance_map().expect("probe configured");
                let probe = harness::probe_index(&cfg.grid, x, y);
                let far = harness::far_field_mean_abs(&cfg.grid, &map, probe, 15.0);
                println!("mean |correlation| beyond 15 cells: {far:.4}");
            }
        },
        Command::ScalingStudy {
            config,
            lattice,
            repetitions,
            clim,
            out,
        } => {
            let cfg = load_config(&config)?;
            let lattice = parse_lattice(&lattice)?;
            let climatology = clim.load(&cfg)?;
            let twins = load_twins(&cfg, None)?;
            let params: QgParams = cfg.params();
            let mut model = QgModel::new(cfg.grid, params)?;
            let spec = cfg.surrogate.clone().unwrap_or_else(SurrogateSpec::default);
            let mut surrogate = spec.build(cfg.grid, params, cfg.da.gamma)?;
            let cost = harness::measure_cost_unit(&mut model, surrogate.as_mut(), &twins[0].truth[0], repetitions)?;
            println!("surrogate:numerical cost ratio per day {:.4}", cost.ratio());
            let rows = run_scaling_study(&cfg, &lattice, &twins, &climatology, &cost, Some(&out))?;
            for r in rows {
                println!(
                    "n_N {:5} n_D {:5}  <E1> {:.4}  cost/cycle {:.1} units",
                    r.n_numerical, r.n_data_driven, r.mean_e1.mean, r.cost_units_per_cycle
                );
            }
        }
        Command::Metrics {
            pred,
            truth,
            climatology,
            out,
        } => {
            let p = TrajectoryManifest::load(&pred)?;
            let t = TrajectoryManifest::load(&truth)?;
            let clim = Climatology::load(&climatology)?;
            let mut series = SkillSeries::default();
            for (i, entry) in p.snapshots.iter().enumerate() {
                let j = t
                    .snapshots
                    .iter()
                    .position(|s| s.step == entry.step)
                    .with_context(|| format!("truth has no snapshot at step {}", entry.step))?;
                series.record(entry.step, &p.load_snapshot(i)?, &t.load_snapshot(j)?, &clim)?;
            }
            let csv = series.to_csv();
            match out {
                Some(path) => io::write_text(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}
