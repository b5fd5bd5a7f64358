//! Feedforward networks: definition, inference, exact Jacobians and training.
//!
//! Layout of a network with hidden widths `[h1, .., hL]`:
//!
//! ```text
//! input -> [dense -> (batch norm) -> tanh -> (dropout)] x L -> dense -> output
//! ```
//!
//! Batch norm and dropout only differ between modes during training. The
//! inference path used by the filter always uses running statistics and no
//! dropout, which makes it a pure, smooth function of its input.

mod io;
mod train;

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

pub use io::{load_params, read_params, save_params, write_params};
pub use train::{mlp_train, mlp_train_with_history, Adam, TrainReport};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Central-difference step used by [`JacobianMethod::FiniteDiff`].
pub const FD_STEP: f64 = 1e-5;

thread_local! {
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Network passes (forward evaluations, plus one per analytic Jacobian) on this thread.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.with(Cell::get)
}

fn count_pass() {
    FORWARD_PASSES.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub use_batch_norm: bool,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_layers,
            output_dim,
            activation: Activation::Tanh,
            use_batch_norm: false,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_layers.contains(&0) {
            return Err(Error::config("mlp", "all layer widths must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_layers);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_out x fan_in`.
    pub weight: Matrix,
    pub bias: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub running_mean: Vector,
    pub running_var: Vector,
    pub scale: Vector,
    pub shift: Vector,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            running_mean: Vector::zeros(width),
            running_var: Vector::new(vec![1.0; width]),
            scale: Vector::new(vec![1.0; width]),
            shift: Vector::zeros(width),
        }
    }

    /// Inference-time affine map `u = a * z + b` per unit.
    fn affine(&self, j: usize) -> (f64, f64) {
        let a = self.scale[j] / (self.running_var[j] + BN_EPS).sqrt();
        (a, self.shift[j] - a * self.running_mean[j])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub spec: MlpSpec,
    /// Hidden layers in order, then the output layer.
    pub layers: Vec<Dense>,
    /// One per hidden layer when the spec enables batch norm, otherwise empty.
    pub norms: Vec<BatchNorm>,
    pub mode: Mode,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases, identity batch norm.
    pub fn init<R: Rng>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Dense {
                    weight: Matrix::from_row_major(fan_out, fan_in, w).expect("shape"),
                    bias: Vector::zeros(fan_out),
                }
            })
            .collect();
        Ok(MlpParams {
            spec: spec.clone(),
            layers,
            norms: Self::fresh_norms(spec),
            mode: Mode::Eval,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| Dense {
                weight: Matrix::zeros(fan_out, fan_in),
                bias: Vector::zeros(fan_out),
            })
            .collect();
        Ok(MlpParams {
            spec: spec.clone(),
            layers,
            norms: Self::fresh_norms(spec),
            mode: Mode::Eval,
        })
    }

    fn fresh_norms(spec: &MlpSpec) -> Vec<BatchNorm> {
        if spec.use_batch_norm {
            spec.hidden_layers.iter().map(|&w| BatchNorm::new(w)).collect()
        } else {
            Vec::new()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    /// Checks the structural invariants: layer shapes chain from input to
    /// output, norms match hidden widths, running variances are positive.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let shapes = self.spec.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::DimensionMismatch(format!(
                "spec has {} dense layers, params have {}",
                shapes.len(),
                self.layers.len()
            )));
        }
        for (i, ((fan_in, fan_out), layer)) in shapes.iter().zip(&self.layers).enumerate() {
            if layer.weight.shape() != (*fan_out, *fan_in) || layer.bias.dim() != *fan_out {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i}: expected {fan_out}x{fan_in} weight"
                )));
            }
        }
        let want_norms = if self.spec.use_batch_norm {
            self.spec.hidden_layers.len()
        } else {
            0
        };
        if self.norms.len() != want_norms {
            return Err(Error::DimensionMismatch(format!(
                "expected {want_norms} batch-norm blocks, found {}",
                self.norms.len()
            )));
        }
        for (i, (bn, &w)) in self.norms.iter().zip(&self.spec.hidden_layers).enumerate() {
            let dims = [
                bn.running_mean.dim(),
                bn.running_var.dim(),
                bn.scale.dim(),
                bn.shift.dim(),
            ];
            if dims.iter().any(|&d| d != w) {
                return Err(Error::DimensionMismatch(format!("bn {i}: width != {w}")));
            }
            if bn.running_var.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::DimensionMismatch(format!(
                    "bn {i}: running variances must be positive"
                )));
            }
        }
        Ok(())
    }

    fn require_eval(&self, what: &str) -> Result<()> {
        match self.mode {
            Mode::Eval => Ok(()),
            Mode::Train => Err(Error::StageOrder {
                operation: "network inference",
                found: format!("train-mode network ({what})"),
            }),
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "network expects input of dim {}, got {}",
                self.spec.input_dim,
                input.len()
            )));
        }
        Ok(())
    }

    /// Inference pass. Returns the output and, for each hidden layer, the
    /// per-unit derivative `du/dz * (1 - tanh²)` needed by the Jacobian.
    fn infer(&self, input: &[f64], keep_slopes: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut act = input.to_vec();
        let mut slopes = Vec::new();
        for (l, layer) in self.layers[..self.hidden_count()].iter().enumerate() {
            let mut next = dense_apply(layer, &act);
            let mut slope = Vec::with_capacity(if keep_slopes { next.len() } else { 0 });
            for (j, z) in next.iter_mut().enumerate() {
                let (a, b) = match self.norms.get(l) {
                    Some(bn) => bn.affine(j),
                    None => (1.0, 0.0),
                };
                let t = (a * *z + b).tanh();
                if keep_slopes {
                    slope.push(a * (1.0 - t * t));
                }
                *z = t;
            }
            if keep_slopes {
                slopes.push(slope);
            }
            act = next;
        }
        let out = dense_apply(self.layers.last().expect("output layer"), &act);
        (out, slopes)
    }
}

fn dense_apply(layer: &Dense, x: &[f64]) -> Vec<f64> {
    let w = &layer.weight;
    (0..w.rows())
        .map(|j| layer.bias[j] + dot(w.row_slice(j), x))
        .collect()
}

/// Dot product with four independent accumulators; fixed summation order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Evaluates the network on one input.
pub fn mlp_forward(params: &MlpParams, input: &Vector) -> Result<Vector> {
    params.require_eval("forward")?;
    params.check_input(input.as_slice())?;
    count_pass();
    let (out, _) = params.infer(input.as_slice(), false);
    let out = Vector::new(out);
    if !out.is_finite() {
        return Err(Error::NonFiniteState(format!("network output {out:?}")));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMethod {
    #[default]
    Analytic,
    FiniteDiff,
}

/// `output_dim x input_dim` Jacobian of the network at `input`.
pub fn mlp_jacobian(params: &MlpParams, input: &Vector, method: JacobianMethod) -> Result<Matrix> {
    params.require_eval("jacobian")?;
    params.check_input(input.as_slice())?;
    match method {
        JacobianMethod::Analytic => Ok(analytic_jacobian(params, input.as_slice())),
        JacobianMethod::FiniteDiff => finite_diff_jacobian(params, input),
    }
}

fn analytic_jacobian(params: &MlpParams, input: &[f64]) -> Matrix {
    count_pass();
    let (_, slopes) = params.infer(input, true);
    let n_in = input.len();
    // Propagate d(activation)/d(input) forward through the layer chain.
    let mut jac = Matrix::identity(n_in);
    for (layer, slope) in params.layers.iter().zip(&slopes) {
        let mut next = layer.weight.matmul(&jac).expect("chained shapes");
        for (j, s) in slope.iter().enumerate() {
            for v in next.row_slice_mut(j) {
                *v *= s;
            }
        }
        jac = next;
    }
    params
        .layers
        .last()
        .expect("output layer")
        .weight
        .matmul(&jac)
        .expect("chained shapes")
}

fn finite_diff_jacobian(params: &MlpParams, input: &Vector) -> Result<Matrix> {
    let n_in = input.dim();
    let n_out = params.output_dim();
    let mut jac = Matrix::zeros(n_out, n_in);
    for c in 0..n_in {
        let mut plus = input.clone();
        plus[c] += FD_STEP;
        let mut minus = input.clone();
        minus[c] -= FD_STEP;
        let fp = mlp_forward(params, &plus)?;
        let fm = mlp_forward(params, &minus)?;
        for r in 0..n_out {
            jac[(r, c)] = (fp[r] - fm[r]) / (2.0 * FD_STEP);
        }
    }
    Ok(jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Zero means full batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("lr_decay_factor", "must lie in (0, 1]"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::config("lr_decay_every", "must be >= 1"));
        }
        Ok(())
    }

    /// Step-decayed learning rate for a zero-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vector>,
    pub targets: Vec<Vector>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vector>, targets: Vec<Vector>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::LengthMismatch(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Mean over samples of the squared output error norm, in inference mode.
pub fn mean_squared_error(params: &MlpParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        let (out, _) = {
            params.check_input(x.as_slice())?;
            params.infer(x.as_slice(), false)
        };
        if out.len() != y.dim() {
            return Err(Error::DimensionMismatch(format!(
                "target dim {} != network output dim {}",
                y.dim(),
                out.len()
            )));
        }
        total += out.iter().zip(y.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / data.len() as f64)
}
