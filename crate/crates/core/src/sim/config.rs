use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{Belief, NoiseModel};
use crate::fusion::{FusionScale, Topology, TopologyKind};
use crate::linalg::{Matrix, Vector};
use crate::models::{Misspecification, SENSOR_COUNT};
use crate::neural::{JacobianMethod, MlpSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ndkf,
    Ekf,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ndkf => "ndkf",
            Variant::Ekf => "ekf",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the test segment of each run begins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestStart {
    /// From the last training state and its time index.
    #[default]
    Continue,
    /// From the origin at `k = 0`.
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    #[serde(default)]
    pub kind: TopologyKind,
    /// One-based neighbour lists, used when `kind = "custom"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<Vec<Vec<usize>>>,
}

/// Network shape and optimizer settings for one family of networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden_layers: Vec<usize>,
    pub batch_norm: bool,
    pub dropout: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Zero means full batch.
    pub batch_size: usize,
}

impl NetConfig {
    pub fn spec(&self, input_dim: usize, output_dim: usize) -> MlpSpec {
        let mut spec = MlpSpec::new(input_dim, self.hidden_layers.clone(), output_dim);
        spec.use_batch_norm = self.batch_norm;
        spec.dropout_rate = self.dropout;
        spec
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            batch_size: self.batch_size,
            seed,
        }
    }

    fn validate(&self, section: &str) -> Result<()> {
        let field = |f: &str| format!("{section}.{f}");
        if self.hidden_layers.contains(&0) {
            return Err(Error::config(field("hidden_layers"), "widths must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(field("dropout"), "must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::config(field("epochs"), "must be >= 1"));
        }
        self.train_config(0)
            .validate()
            .map_err(|e| match e {
                Error::Config { field: f, message } => Error::config(field(&f), message),
                other => other,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// States in the training trajectory.
    pub horizon_train: usize,
    /// Filter steps scored per run.
    pub horizon_test: usize,
    pub n_nodes: usize,
    pub mc_runs: usize,
    /// Process noise covariance, as rows.
    pub q: Vec<Vec<f64>>,
    /// Measurement noise variance, shared by all sensors.
    pub r_scalar: f64,
    pub init_mean: Vec<f64>,
    pub init_cov: Vec<Vec<f64>>,
    pub fusion_scale: FusionScale,
    pub rounds_per_step: usize,
    /// One-based node whose fused estimate is scored.
    pub score_node: usize,
    pub test_start: TestStart,
    pub jacobian: JacobianMethod,
    pub misspecification: Misspecification,
    /// Multiplies the process noise standard deviation of the simulated truth.
    pub truth_process_noise_scale: f64,
    /// Multiplies the measurement noise standard deviation of the simulated readings.
    pub truth_measurement_noise_scale: f64,
    pub topology: TopologyConfig,
    pub nn_dynamics: NetConfig,
    pub nn_measurement: NetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2024,
            horizon_train: 400,
            horizon_test: 100,
            n_nodes: SENSOR_COUNT,
            mc_runs: 40,
            q: vec![vec![0.001, 0.0], vec![0.0, 0.001]],
            r_scalar: 0.01,
            init_mean: vec![0.0, 0.0],
            init_cov: vec![vec![0.5, 0.0], vec![0.0, 0.5]],
            fusion_scale: FusionScale::Sum,
            rounds_per_step: 1,
            score_node: 1,
            test_start: TestStart::Continue,
            jacobian: JacobianMethod::Analytic,
            misspecification: Misspecification::DropLinearTerms,
            truth_process_noise_scale: 1.0,
            truth_measurement_noise_scale: 1.0,
            topology: TopologyConfig::default(),
            nn_dynamics: NetConfig {
                hidden_layers: vec![128, 128, 128],
                batch_norm: true,
                dropout: 0.2,
                epochs: 3000,
                learning_rate: 0.001,
                lr_decay_factor: 0.5,
                lr_decay_every: 1000,
                batch_size: 0,
            },
            nn_measurement: NetConfig {
                hidden_layers: vec![32, 32],
                batch_norm: false,
                dropout: 0.0,
                epochs: 1000,
                learning_rate: 0.001,
                lr_decay_factor: 0.5,
                lr_decay_every: 1000,
                batch_size: 0,
            },
        }
    }
}

fn matrix_field(rows: &[Vec<f64>], field: &str) -> Result<Matrix> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::config(field, "must be a square matrix given as rows"));
    }
    Matrix::from_row_major(n, n, rows.concat()).map_err(|e| Error::config(field, e.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            // toml reports the line and the offending key in its message.
            Error::config("config", e.to_string().trim_end().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { field, message } => Error::config(field, format!("{}: {message}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("horizon_train", self.horizon_train),
            ("horizon_test", self.horizon_test),
            ("mc_runs", self.mc_runs),
            ("rounds_per_step", self.rounds_per_step),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if self.horizon_train < 2 {
            return Err(Error::config("horizon_train", "needs at least two states for one dynamics pair"));
        }
        if !(1..=SENSOR_COUNT).contains(&self.n_nodes) {
            return Err(Error::config("n_nodes", format!("must lie in 1..={SENSOR_COUNT}")));
        }
        if !(1..=self.n_nodes).contains(&self.score_node) {
            return Err(Error::config("score_node", format!("must lie in 1..={}", self.n_nodes)));
        }
        if !(self.r_scalar > 0.0) || !self.r_scalar.is_finite() {
            return Err(Error::config("r_scalar", "must be a finite value > 0"));
        }
        for (name, v) in [
            ("truth_process_noise_scale", self.truth_process_noise_scale),
            ("truth_measurement_noise_scale", self.truth_measurement_noise_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(name, "must be a finite value >= 0"));
            }
        }
        let q = self.q_matrix()?;
        if q.rows() != 2 {
            return Err(Error::config("q", "must be 2x2"));
        }
        crate::sim::psd_factor(&q).map_err(|_| Error::config("q", "must be positive semidefinite"))?;
        self.initial_belief()?;
        self.topology()?;
        self.nn_dynamics.validate("nn_dynamics")?;
        self.nn_measurement.validate("nn_measurement")?;
        Ok(())
    }

    pub fn q_matrix(&self) -> Result<Matrix> {
        let q = matrix_field(&self.q, "q")?;
        if !q.is_symmetric(1e-12) {
            return Err(Error::config("q", "must be symmetric"));
        }
        Ok(q)
    }

    /// Process noise covariance of the simulated truth.
    pub fn truth_q(&self) -> Result<Matrix> {
        let s = self.truth_process_noise_scale;
        Ok(self.q_matrix()?.scale(s * s))
    }

    pub fn truth_r_variance(&self) -> f64 {
        let s = self.truth_measurement_noise_scale;
        self.r_scalar * s * s
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        let model = NoiseModel {
            q: self.q_matrix()?,
            r: vec![Matrix::diag(&[self.r_scalar]); self.n_nodes],
        };
        model.validate().map_err(|e| Error::config("q", e.to_string()))?;
        Ok(model)
    }

    /// Initial belief of every node, placed at time `k`.
    pub fn initial_belief_at(&self, k: i64) -> Result<Belief> {
        if self.init_mean.len() != 2 {
            return Err(Error::config("init_mean", "must have two entries"));
        }
        let cov = matrix_field(&self.init_cov, "init_cov")?;
        Belief::initial(Vector::new(self.init_mean.clone()), cov, k)
            .map_err(|e| Error::config("init_cov", e.to_string()))
    }

    fn initial_belief(&self) -> Result<Belief> {
        self.initial_belief_at(0)
    }

    pub fn topology(&self) -> Result<Topology> {
        let zero_based = match &self.topology.adjacency {
            Some(lists) => {
                let mut out = Vec::with_capacity(lists.len());
                for (i, list) in lists.iter().enumerate() {
                    let mut l = Vec::with_capacity(list.len());
                    for &j in list {
                        if j == 0 || j > self.n_nodes {
                            return Err(Error::config(
                                "topology.adjacency",
                                format!("node {} lists neighbour {j}, expected 1..={}", i + 1, self.n_nodes),
                            ));
                        }
                        l.push(j - 1);
                    }
                    out.push(l);
                }
                Some(out)
            }
            None => None,
        };
        Topology::build(self.topology.kind, self.n_nodes, zero_based.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.topology().unwrap().messages_per_round(), 16);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 5\nmc_runs = 3\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.mc_runs, 3);
        assert_eq!(cfg.horizon_test, 100);
    }

    #[test]
    fn errors_name_the_field() {
        let msg = |text: &str| ExperimentConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(msg("r_scalar = -1.0").contains("r_scalar"));
        assert!(msg("horizon_test = 0").contains("horizon_test"));
        assert!(msg("q = [[1.0, 0.0], [0.0, -1.0]]").contains("`q`"));
        assert!(msg("init_cov = [[0.0, 0.0], [0.0, 0.0]]").contains("init_cov"));
        assert!(msg("score_node = 7").contains("score_node"));
        let unknown = msg("horizon_tset = 4");
        assert!(unknown.contains("horizon_tset") && unknown.contains("line 1"), "{unknown}");
        assert!(msg("[topology]\nkind = \"custom\"\nadjacency = [[5], [], [], []]").contains("topology.adjacency"));
        let nn = msg(
            "[nn_measurement]\nhidden_layers = [4]\nbatch_norm = false\ndropout = 1.5\nepochs = 1\n\
             learning_rate = 0.1\nlr_decay_factor = 0.5\nlr_decay_every = 10\nbatch_size = 0\n",
        );
        assert!(nn.contains("nn_measurement.dropout"), "{nn}");
    }

    #[test]
    fn custom_topology_is_one_based() {
        let cfg = ExperimentConfig::from_toml_str(
            "n_nodes = 3\n[topology]\nkind = \"custom\"\nadjacency = [[2], [1, 3], [2]]\n",
        )
        .unwrap();
        let t = cfg.topology().unwrap();
        assert_eq!(t.neighbors(0), &[0, 1]);
        assert_eq!(t.neighbors(1), &[0, 1, 2]);
    }
}
