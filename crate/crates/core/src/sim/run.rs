use std::sync::Arc;

use rayon::prelude::*;

use super::config::{ExperimentConfig, TestStart, Variant};
use super::{sample_measurements, simulate_truth_from, training_data, TrainedModels};
use crate::error::{Error, Result, StepContext};
use crate::filter::{predict_linearized, update, Belief, InnovationRecord, NoiseModel};
use crate::fusion::{consensus_round, FusionScale, Topology};
use crate::linalg::{inversion_count, Vector};
use crate::models::{
    ekf_baseline_models, AnalyticMeasurement, LearnedDynamics, LearnedMeasurement, MeasurementForm, Model,
    NominalDrift, SharedModel,
};
use crate::neural::{forward_pass_count, JacobianMethod};
use crate::rng;
use crate::stability::{contraction_report, ContractionReport};

/// The dynamics model and per-sensor measurement models one variant filters with.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub dynamics: SharedModel,
    pub measurements: Vec<SharedModel>,
}

impl ModelSet {
    pub fn learned(trained: &TrainedModels, method: JacobianMethod) -> Result<Self> {
        Ok(ModelSet {
            dynamics: Arc::new(LearnedDynamics::new(trained.dynamics.clone(), method)?),
            measurements: trained
                .measurements
                .iter()
                .map(|net| Ok(Arc::new(LearnedMeasurement::new(net.clone(), method)?) as SharedModel))
                .collect::<Result<_>>()?,
        })
    }

    pub fn ekf_baseline(cfg: &ExperimentConfig) -> Self {
        let (dynamics, mut measurements) = ekf_baseline_models(cfg.misspecification);
        measurements.truncate(cfg.n_nodes);
        ModelSet { dynamics, measurements }
    }

    /// Nominal drift with the true sensor formulas.
    pub fn exact(n_nodes: usize) -> Self {
        ModelSet {
            dynamics: Arc::new(NominalDrift),
            measurements: (1..=n_nodes)
                .map(|i| Arc::new(AnalyticMeasurement::new(i, MeasurementForm::Exact).expect("node in range")) as SharedModel)
                .collect(),
        }
    }
}

/// Matrix inversions split by where they happen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InversionCounts {
    /// Innovation covariance inverses in the local update.
    pub innovation: u64,
    /// Precision of every outgoing message plus the inverse of every fused precision.
    pub fusion: u64,
}

impl InversionCounts {
    pub fn total(&self) -> u64 {
        self.innovation + self.fusion
    }
}

/// Everything a time step produces besides the new beliefs.
#[derive(Debug, Clone, Default)]
pub struct StepLog {
    pub records: Vec<InnovationRecord>,
    pub reports: Vec<ContractionReport>,
    pub inversions: InversionCounts,
    pub messages: u64,
}

/// One network of filtering nodes sharing a dynamics model.
pub struct FilterBank<'a> {
    pub dynamics: &'a dyn Model,
    pub measurements: &'a [SharedModel],
    pub noise: &'a NoiseModel,
    pub topology: &'a Topology,
    pub scale: FusionScale,
    /// Zero disables fusion entirely.
    pub rounds: usize,
}

impl FilterBank<'_> {
    /// Predict, update with `ys[i]` (a reading of the state at the next time
    /// index) and fuse. `context` names the run for error messages.
    pub fn step(&self, beliefs: &[Belief], ys: &[Vector], context: (&str, usize)) -> Result<(Vec<Belief>, StepLog)> {
        let n = beliefs.len();
        if ys.len() != n || self.measurements.len() < n || self.noise.r.len() < n {
            return Err(Error::LengthMismatch(format!(
                "{n} beliefs, {} readings, {} measurement models, {} noise entries",
                ys.len(),
                self.measurements.len(),
                self.noise.r.len()
            )));
        }
        let at = |k: i64, node: Option<usize>, phase: &'static str| StepContext {
            variant: context.0.to_string(),
            run: context.1,
            k,
            node,
            phase,
        };
        let mut log = StepLog::default();
        let mut updated = Vec::with_capacity(n);
        for (i, belief) in beliefs.iter().enumerate() {
            let (prior, f) = predict_linearized(belief, self.dynamics, &self.noise.q)
                .map_err(|e| e.at_step(at(belief.time + 1, Some(i), "predict")))?;
            let before = inversion_count();
            let (post, record) = update(&prior, &ys[i], self.measurements[i].as_ref(), &self.noise.r[i], i)
                .map_err(|e| e.at_step(at(prior.time, Some(i), "update")))?;
            log.inversions.innovation += inversion_count() - before;
            log.reports
                .push(contraction_report(&f, &record.gain, &record.meas_jacobian, prior.time, i));
            log.records.push(record);
            updated.push(post);
        }
        let k = updated.first().map_or(0, |b| b.time);
        for _ in 0..self.rounds {
            let before = inversion_count();
            updated = consensus_round(&updated, self.topology, self.scale)
                .map_err(|e| e.at_step(at(k, None, "fusion")))?;
            log.inversions.fusion += inversion_count() - before;
            log.messages += self.topology.messages_per_round() as u64;
        }
        Ok((updated, log))
    }
}

#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub variant: Variant,
    pub run: usize,
    pub rmse_px: f64,
    pub rmse_py: f64,
    /// `innovations[node]` in time order.
    pub innovations: Vec<Vec<InnovationRecord>>,
    pub contraction: Vec<ContractionReport>,
    pub msg_count: u64,
    pub matrix_inversions: u64,
    pub inversions: InversionCounts,
    pub nn_forward_passes: u64,
    pub steps: usize,
    pub n_nodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub k: i64,
    pub truth: Vector,
    /// Fused mean of every node.
    pub fused: Vec<Vector>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: RunMetrics,
    pub trajectory: Vec<TrajectoryRow>,
}

/// Per-component root mean squared error of `estimates` against `truth`.
pub fn rmse(estimates: &[Vector], truth: &[Vector]) -> Result<(f64, f64)> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{} estimates against {} true states",
            estimates.len(),
            truth.len()
        )));
    }
    let n = estimates.len() as f64;
    let mut sq = [0.0; 2];
    for (e, t) in estimates.iter().zip(truth) {
        for c in 0..2 {
            sq[c] += (e[c] - t[c]).powi(2);
        }
    }
    Ok(((sq[0] / n).sqrt(), (sq[1] / n).sqrt()))
}

/// One seeded test run. The truth and readings of run `run` are the same for
/// every variant, so variants are compared on identical data.
pub fn run_experiment(cfg: &ExperimentConfig, variant: Variant, models: &ModelSet, run: usize) -> Result<RunResult> {
    cfg.validate()?;
    let n = cfg.n_nodes;
    let (x0, k0) = match cfg.test_start {
        TestStart::Continue => {
            let (traj, _) = training_data(cfg)?;
            (traj.last().expect("nonempty trajectory").clone(), (traj.len() - 1) as i64)
        }
        TestStart::Fresh => (Vector::zeros(2), 0),
    };
    let states = simulate_truth_from(
        &x0,
        k0,
        cfg.horizon_test,
        &cfg.truth_q()?,
        rng::derive_seed(cfg.seed, "test-truth", run as u64),
    )?;
    let readings = sample_measurements(
        &states,
        n,
        cfg.truth_r_variance(),
        rng::derive_seed(cfg.seed, "test-measurements", run as u64),
    )?;

    let noise = cfg.noise_model()?;
    let topology = cfg.topology()?;
    let bank = FilterBank {
        dynamics: models.dynamics.as_ref(),
        measurements: &models.measurements,
        noise: &noise,
        topology: &topology,
        scale: cfg.fusion_scale,
        rounds: cfg.rounds_per_step,
    };

    let passes_before = forward_pass_count();
    let inversions_before = inversion_count();
    let mut beliefs = vec![cfg.initial_belief_at(k0)?; n];
    let mut innovations = vec![Vec::with_capacity(cfg.horizon_test); n];
    let mut contraction = Vec::with_capacity(cfg.horizon_test * n);
    let mut trajectory = Vec::with_capacity(cfg.horizon_test);
    let mut inversions = InversionCounts::default();
    let mut msg_count = 0;
    let label = variant.name();

    for j in 1..=cfg.horizon_test {
        let ys: Vec<Vector> = readings.iter().map(|r| Vector::from([r[j]])).collect();
        let (next, log) = bank.step(&beliefs, &ys, (label, run))?;
        beliefs = next;
        for record in log.records {
            innovations[record.node].push(record);
        }
        contraction.extend(log.reports);
        inversions.innovation += log.inversions.innovation;
        inversions.fusion += log.inversions.fusion;
        msg_count += log.messages;
        trajectory.push(TrajectoryRow {
            k: k0 + j as i64,
            truth: states[j].clone(),
            fused: beliefs.iter().map(|b| b.mean.clone()).collect(),
        });
    }

    let scored: Vec<Vector> = trajectory.iter().map(|r| r.fused[cfg.score_node - 1].clone()).collect();
    let (rmse_px, rmse_py) = rmse(&scored, &states[1..])?;
    Ok(RunResult {
        metrics: RunMetrics {
            variant,
            run,
            rmse_px,
            rmse_py,
            innovations,
            contraction,
            msg_count,
            matrix_inversions: inversion_count() - inversions_before,
            inversions,
            nn_forward_passes: forward_pass_count() - passes_before,
            steps: cfg.horizon_test,
            n_nodes: n,
        },
        trajectory,
    })
}

/// Monte Carlo threads: `NDKF_THREADS` if set to a positive integer, else the
/// machine's parallelism.
pub fn mc_thread_count() -> usize {
    std::env::var("NDKF_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub mean_rmse_px: f64,
    pub mean_rmse_py: f64,
    /// Messages delivered in one run.
    pub msg_count: u64,
    pub per_run: Vec<RunMetrics>,
}

#[derive(Debug, Clone)]
pub struct McSummary {
    pub variants: Vec<VariantSummary>,
}

impl McSummary {
    pub fn get(&self, variant: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == variant)
    }
}

/// Runs `0..runs` of every listed variant in parallel. Results do not depend
/// on the thread count.
pub fn monte_carlo(cfg: &ExperimentConfig, runs: usize, variants: &[(Variant, &ModelSet)]) -> Result<McSummary> {
    if runs == 0 {
        return Err(Error::config("mc_runs", "must be >= 1"));
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(mc_thread_count())
        .build()
        .map_err(|e| Error::config("NDKF_THREADS", e.to_string()))?;
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..runs).map(move |r| (v, r)))
        .collect();
    let results: Vec<RunMetrics> = pool.install(|| {
        jobs.par_iter()
            .map(|&(v, r)| {
                let (variant, models) = variants[v];
                run_experiment(cfg, variant, models, r).map(|res| res.metrics)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut summaries = Vec::new();
    for (v, chunk) in results.chunks(runs).enumerate() {
        let mean = |f: fn(&RunMetrics) -> f64| chunk.iter().map(f).sum::<f64>() / runs as f64;
        summaries.push(VariantSummary {
            variant: variants[v].0,
            runs,
            mean_rmse_px: mean(|m| m.rmse_px),
            mean_rmse_py: mean(|m| m.rmse_py),
            msg_count: chunk[0].msg_count,
            per_run: chunk.to_vec(),
        });
    }
    Ok(McSummary { variants: summaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::filter::Stage;

    fn quick_cfg() -> ExperimentConfig {
        ExperimentConfig {
            horizon_test: 30,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn constant_offset_rmse() {
        let truth: Vec<Vector> = (0..50).map(|k| Vector::from([k as f64 * 0.1, -(k as f64)])).collect();
        let d = [0.25, -0.7];
        let est: Vec<Vector> = truth.iter().map(|t| Vector::from([t[0] + d[0], t[1] + d[1]])).collect();
        let (px, py) = rmse(&est, &truth).unwrap();
        assert!((px - 0.25).abs() < 1e-12);
        assert!((py - 0.7).abs() < 1e-12);
        assert!(rmse(&est[..3], &truth).is_err());
    }

    #[test]
    fn ekf_with_exact_models_and_no_noise_tracks() {
        // Starts at the origin so the initial belief is exact; see the next test.
        let cfg = ExperimentConfig {
            test_start: TestStart::Fresh,
            truth_process_noise_scale: 0.0,
            truth_measurement_noise_scale: 0.0,
            ..ExperimentConfig::default()
        };
        let res = run_experiment(&cfg, Variant::Ekf, &ModelSet::exact(4), 0).unwrap();
        let m = &res.metrics;
        assert!(m.rmse_px < 0.02 && m.rmse_py < 0.02, "rmse {} {}", m.rmse_px, m.rmse_py);
    }

    #[test]
    fn exact_models_cannot_recover_py_from_a_distant_prior() {
        // Continuing from k = 399 leaves the truth about 0.9 from the prior at
        // the origin, where the sensors barely see p_y; the filter locks on.
        let cfg = ExperimentConfig {
            truth_process_noise_scale: 0.0,
            truth_measurement_noise_scale: 0.0,
            ..ExperimentConfig::default()
        };
        let m = run_experiment(&cfg, Variant::Ekf, &ModelSet::exact(4), 0).unwrap().metrics;
        assert!(m.rmse_py > 1.0, "rmse_py {}", m.rmse_py);
    }

    #[test]
    fn counters_follow_the_step_structure() {
        let cfg = quick_cfg();
        let res = run_experiment(&cfg, Variant::Ekf, &ModelSet::ekf_baseline(&cfg), 0).unwrap();
        let m = &res.metrics;
        let steps = cfg.horizon_test as u64;
        assert_eq!(m.msg_count, steps * 16);
        assert_eq!(m.inversions.innovation, steps * 4);
        assert_eq!(m.inversions.fusion, steps * 8);
        assert_eq!(m.matrix_inversions, m.inversions.total());
        assert_eq!(m.nn_forward_passes, 0);
        assert_eq!(m.contraction.len(), cfg.horizon_test * 4);
        assert!(m.innovations.iter().all(|s| s.len() == cfg.horizon_test));
        assert_eq!(res.trajectory.len(), cfg.horizon_test);
        assert_eq!(res.trajectory[0].k, 400);
        assert_eq!(res.trajectory.last().unwrap().k, 429);

        let ring = ExperimentConfig {
            topology: super::super::TopologyConfig {
                kind: crate::fusion::TopologyKind::Ring,
                adjacency: None,
            },
            rounds_per_step: 2,
            ..quick_cfg()
        };
        let m = run_experiment(&ring, Variant::Ekf, &ModelSet::ekf_baseline(&ring), 0).unwrap().metrics;
        assert_eq!(m.msg_count, steps * 2 * 12);
    }

    #[test]
    fn runs_are_deterministic_and_distinct() {
        let cfg = quick_cfg();
        let models = ModelSet::ekf_baseline(&cfg);
        let a = run_experiment(&cfg, Variant::Ekf, &models, 3).unwrap();
        let b = run_experiment(&cfg, Variant::Ekf, &models, 3).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.metrics.rmse_px.to_bits(), b.metrics.rmse_px.to_bits());
        let c = run_experiment(&cfg, Variant::Ekf, &models, 4).unwrap();
        assert_ne!(a.trajectory, c.trajectory);
    }

    #[test]
    fn monte_carlo_is_prefix_stable_and_thread_independent() {
        let cfg = quick_cfg();
        let models = ModelSet::ekf_baseline(&cfg);
        let two = monte_carlo(&cfg, 2, &[(Variant::Ekf, &models)]).unwrap();
        let four = monte_carlo(&cfg, 4, &[(Variant::Ekf, &models)]).unwrap();
        let (a, b) = (&two.variants[0].per_run, &four.variants[0].per_run);
        for r in 0..2 {
            assert_eq!(a[r].rmse_px.to_bits(), b[r].rmse_px.to_bits());
            assert_eq!(a[r].rmse_py.to_bits(), b[r].rmse_py.to_bits());
        }
        let one = monte_carlo(&cfg, 1, &[(Variant::Ekf, &models)]).unwrap();
        let single = run_experiment(&cfg, Variant::Ekf, &models, 0).unwrap().metrics;
        assert_eq!(one.variants[0].mean_rmse_px, single.rmse_px);
        assert_eq!(one.variants[0].mean_rmse_py, single.rmse_py);
    }

    #[test]
    fn errors_carry_step_context() {
        // A measurement model that blows up mid-run.
        #[derive(Debug)]
        struct Exploding;
        impl Model for Exploding {
            fn state_dim(&self) -> usize {
                2
            }
            fn output_dim(&self) -> usize {
                1
            }
            fn eval(&self, _x: &Vector, k: i64) -> Result<Vector> {
                Ok(Vector::from([if k >= 405 { f64::NAN } else { 0.0 }]))
            }
            fn jacobian(&self, _x: &Vector, _k: i64) -> Result<crate::linalg::Matrix> {
                Ok(crate::linalg::Matrix::row(&[1.0, 0.0]))
            }
        }
        let cfg = ExperimentConfig {
            n_nodes: 2,
            score_node: 1,
            ..quick_cfg()
        };
        let models = ModelSet {
            dynamics: Arc::new(NominalDrift),
            measurements: vec![Arc::new(Exploding), Arc::new(Exploding)],
        };
        let err = run_experiment(&cfg, Variant::Ndkf, &models, 2).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("ndkf run 2 step k=405 update at node 1"), "{text}");
        assert!(matches!(err.root(), Error::NonFiniteState(_)));
    }

    #[test]
    fn filter_bank_without_fusion_leaves_updated_beliefs() {
        let cfg = ExperimentConfig::default();
        let models = ModelSet::exact(1);
        let noise = NoiseModel {
            q: cfg.q_matrix().unwrap(),
            r: vec![crate::linalg::Matrix::diag(&[0.01])],
        };
        let topo = Topology::isolated(1);
        let bank = FilterBank {
            dynamics: models.dynamics.as_ref(),
            measurements: &models.measurements,
            noise: &noise,
            topology: &topo,
            scale: FusionScale::Sum,
            rounds: 0,
        };
        let b0 = cfg.initial_belief_at(0).unwrap();
        let (out, log) = bank.step(&[b0], &[Vector::from([0.1])], ("t", 0)).unwrap();
        assert_eq!(out[0].stage, Stage::Updated);
        assert_eq!(out[0].time, 1);
        assert_eq!(log.messages, 0);
        assert_eq!(log.inversions, InversionCounts { innovation: 1, fusion: 0 });
    }
}
