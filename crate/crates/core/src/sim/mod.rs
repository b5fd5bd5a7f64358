//! The planar four-sensor experiment: ground truth, training data, filter
//! runs, Monte Carlo sweeps and CSV output.

mod config;
pub mod linear;
mod output;
mod run;

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::models::{true_dynamics, true_measurement, TimeFeatures};
use crate::neural::{load_params, mlp_train_with_history, save_params, Dataset, MlpParams, TrainReport};
use crate::rng::{self, Gaussian};

pub use config::{ExperimentConfig, NetConfig, TestStart, TopologyConfig, Variant};
pub use output::{
    summary_rows, write_innovations, write_run_csvs, write_stability, write_summary, write_trajectory, SummaryRow,
};
pub use run::{
    mc_thread_count, monte_carlo, rmse, run_experiment, FilterBank, InversionCounts, McSummary, ModelSet, RunMetrics,
    RunResult, TrajectoryRow, VariantSummary,
};

/// Lower factor `L` with `L Lᵀ = m` for a positive semidefinite `m`; zero pivots
/// give zero columns, so a zero covariance yields noise-free sampling.
pub fn psd_factor(m: &Matrix) -> Result<Matrix> {
    let n = m.rows();
    if !m.is_square() || !m.is_finite() {
        return Err(Error::NotSpd("noise covariance must be square and finite".into()));
    }
    let tol = 1e-14 * m.max_abs().max(1e-300);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return Err(Error::NotSpd(format!("noise covariance has negative pivot {d:e}")));
        }
        if d <= tol {
            continue;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Correlated Gaussian vectors with covariance `L Lᵀ`.
pub struct NoiseSource<R> {
    gauss: Gaussian<R>,
    factor: Matrix,
}

impl<R: Rng> NoiseSource<R> {
    pub fn new(rng: R, cov: &Matrix) -> Result<Self> {
        Ok(NoiseSource {
            gauss: Gaussian::new(rng),
            factor: psd_factor(cov)?,
        })
    }

    pub fn draw(&mut self) -> Vector {
        let z = Vector::new((0..self.factor.cols()).map(|_| self.gauss.standard()).collect());
        &self.factor * &z
    }
}

/// Ground truth from `x0` at time `k0`: returns `steps + 1` states, the first being `x0`.
pub fn simulate_truth_from(x0: &Vector, k0: i64, steps: usize, q: &Matrix, seed: u64) -> Result<Vec<Vector>> {
    let mut noise = NoiseSource::new(rng::stream(seed, "truth", 0), q)?;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.clone());
    for j in 0..steps {
        let w = noise.draw();
        let next = true_dynamics(&states[j], k0 + j as i64, &w);
        states.push(next);
    }
    Ok(states)
}

/// `steps + 1` states starting from the origin at `k = 0`.
pub fn simulate_truth(steps: usize, q: &Matrix, seed: u64) -> Result<Vec<Vector>> {
    if steps == 0 {
        return Err(Error::config("horizon", "needs at least one step"));
    }
    simulate_truth_from(&Vector::zeros(2), 0, steps, q, seed)
}

/// Noisy readings of every sensor at every state: `result[node][k]`.
///
/// Each sensor draws from its own stream, so its noise does not depend on how
/// many other sensors exist.
pub fn sample_measurements(traj: &[Vector], n_nodes: usize, r_variance: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if traj.is_empty() {
        return Err(Error::LengthMismatch("cannot measure an empty trajectory".into()));
    }
    if !(r_variance >= 0.0) {
        return Err(Error::config("r_scalar", "must be >= 0"));
    }
    let std_dev = r_variance.sqrt();
    (0..n_nodes)
        .map(|i| {
            let mut g = Gaussian::new(rng::stream(seed, "measurement", i as u64));
            traj.iter()
                .map(|x| true_measurement(i + 1, x, g.sample(0.0, std_dev)))
                .collect()
        })
        .collect()
}

/// Residual dynamics pairs and per-sensor state-to-reading pairs.
///
/// `traj[j]` is the state at time `k0 + j`. Dynamics inputs are
/// `[x; sin(k/10); cos(k/10)]` with target `x_{k+1} - x_k`.
pub fn build_training_sets(traj: &[Vector], k0: i64, measurements: &[Vec<f64>]) -> Result<(Dataset, Vec<Dataset>)> {
    if let Some(bad) = measurements.iter().find(|m| m.len() != traj.len()) {
        return Err(Error::LengthMismatch(format!(
            "{} measurements for a {}-state trajectory",
            bad.len(),
            traj.len()
        )));
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (j, pair) in traj.windows(2).enumerate() {
        inputs.push(pair[0].concat(&TimeFeatures::at(k0 + j as i64).as_array()));
        targets.push(&pair[1] - &pair[0]);
    }
    let dynamics = Dataset::new(inputs, targets)?;
    let per_node = measurements
        .iter()
        .map(|m| Dataset::new(traj.to_vec(), m.iter().map(|&y| Vector::from([y])).collect()))
        .collect::<Result<_>>()?;
    Ok((dynamics, per_node))
}

/// The training trajectory and its readings, as fixed by `cfg.seed`.
pub fn training_data(cfg: &ExperimentConfig) -> Result<(Vec<Vector>, Vec<Vec<f64>>)> {
    let q = cfg.truth_q()?;
    let traj = simulate_truth(cfg.horizon_train - 1, &q, rng::derive_seed(cfg.seed, "train-truth", 0))?;
    let ys = sample_measurements(
        &traj,
        cfg.n_nodes,
        cfg.truth_r_variance(),
        rng::derive_seed(cfg.seed, "train-measurements", 0),
    )?;
    Ok((traj, ys))
}

/// The dynamics network and one measurement network per sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModels {
    pub dynamics: MlpParams,
    pub measurements: Vec<MlpParams>,
}

#[derive(Debug, Clone)]
pub struct NamedReport {
    pub name: String,
    pub report: TrainReport,
    pub samples: usize,
}

const DYNAMICS_FILE: &str = "dynamics.mlp";

fn measurement_file(node: usize) -> String {
    format!("meas_{node}.mlp")
}

impl TrainedModels {
    /// Trains all networks on the seeded training trajectory. Networks are
    /// independent, so they train concurrently; each is deterministic on its own.
    pub fn train(cfg: &ExperimentConfig) -> Result<(Self, Vec<NamedReport>)> {
        cfg.validate()?;
        let (traj, ys) = training_data(cfg)?;
        let (dyn_data, meas_data) = build_training_sets(&traj, 0, &ys)?;

        let jobs: Vec<(String, &Dataset, crate::neural::MlpSpec, crate::neural::TrainConfig)> =
            std::iter::once((
                "dynamics".to_string(),
                &dyn_data,
                cfg.nn_dynamics.spec(4, 2),
                cfg.nn_dynamics.train_config(rng::derive_seed(cfg.seed, "nn-dynamics", 0)),
            ))
            .chain(meas_data.iter().enumerate().map(|(i, d)| {
                (
                    format!("measurement node {}", i + 1),
                    d,
                    cfg.nn_measurement.spec(2, 1),
                    cfg.nn_measurement.train_config(rng::derive_seed(cfg.seed, "nn-measurement", i as u64)),
                )
            }))
            .collect();

        let trained = jobs
            .into_par_iter()
            .map(|(name, data, spec, tc)| {
                let (params, report) = mlp_train_with_history(&spec, data, &tc)
                    .map_err(|e| Error::config(format!("nn ({name})"), e.to_string()))?;
                Ok((
                    params,
                    NamedReport {
                        name,
                        report,
                        samples: data.len(),
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;

        let (mut nets, reports): (Vec<MlpParams>, Vec<NamedReport>) = trained.into_iter().unzip();
        let dynamics = nets.remove(0);
        Ok((
            TrainedModels {
                dynamics,
                measurements: nets,
            },
            reports,
        ))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_params(&self.dynamics, &dir.join(DYNAMICS_FILE))?;
        for (i, net) in self.measurements.iter().enumerate() {
            save_params(net, &dir.join(measurement_file(i + 1)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, n_nodes: usize) -> Result<Self> {
        Ok(TrainedModels {
            dynamics: load_params(&dir.join(DYNAMICS_FILE))?,
            measurements: (1..=n_nodes)
                .map(|i| load_params(&dir.join(measurement_file(i))))
                .collect::<Result<_>>()?,
        })
    }

    /// The config fields that determine the trained networks, as TOML. Two
    /// configs with equal keys train identical networks.
    pub fn training_key(cfg: &ExperimentConfig) -> String {
        let defaults = ExperimentConfig::default();
        let key = ExperimentConfig {
            horizon_test: defaults.horizon_test,
            mc_runs: defaults.mc_runs,
            init_mean: defaults.init_mean,
            init_cov: defaults.init_cov,
            fusion_scale: defaults.fusion_scale,
            rounds_per_step: defaults.rounds_per_step,
            score_node: defaults.score_node,
            test_start: defaults.test_start,
            jacobian: defaults.jacobian,
            misspecification: defaults.misspecification,
            topology: defaults.topology,
            ..cfg.clone()
        };
        key.to_toml_string()
    }

    /// True when every parameter file `load` would read is present.
    pub fn exists(dir: &Path, n_nodes: usize) -> bool {
        dir.join(DYNAMICS_FILE).is_file() && (1..=n_nodes).all(|i| dir.join(measurement_file(i)).is_file())
    }
}
