//! Transition and measurement models with state Jacobians.
//!
//! The filter only sees the [`Model`] trait. Implementations wrap trained
//! networks, the analytic ground-truth system, the deliberately mis-specified
//! baseline measurement functions, and plain linear maps.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::neural::{mlp_forward, mlp_jacobian, JacobianMethod, MlpParams};

/// Drift amplitude of the planar test system.
pub const DRIFT_GAIN: f64 = 0.05;
/// Time scale of the drift rotation, `k / 10`.
pub const DRIFT_PERIOD_SCALE: f64 = 10.0;
pub const SENSOR_COUNT: usize = 4;

pub trait Model: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &Vector, k: i64) -> Result<Vector>;
    /// `output_dim x state_dim` Jacobian with respect to the state.
    fn jacobian(&self, x: &Vector, k: i64) -> Result<Matrix>;
}

pub type SharedModel = Arc<dyn Model>;

/// Bounded periodic encoding of the time index fed to the dynamics network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeFeatures {
    pub sin: f64,
    pub cos: f64,
}

impl TimeFeatures {
    pub fn at(k: i64) -> Self {
        let phase = k as f64 / DRIFT_PERIOD_SCALE;
        TimeFeatures {
            sin: phase.sin(),
            cos: phase.cos(),
        }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.sin, self.cos]
    }
}

/// Deterministic part of the planar transition, `[0.05 cos(k/10), 0.05 sin(k/10)]`.
pub fn drift(k: i64) -> [f64; 2] {
    let t = TimeFeatures::at(k);
    [DRIFT_GAIN * t.cos, DRIFT_GAIN * t.sin]
}

pub fn true_dynamics(state: &Vector, k: i64, noise: &Vector) -> Vector {
    let d = drift(k);
    Vector::from([state[0] + d[0] + noise[0], state[1] + d[1] + noise[1]])
}

/// Ground-truth scalar reading of sensor `node` (1-based).
pub fn true_measurement(node: usize, state: &Vector, noise: f64) -> Result<f64> {
    let (px, py) = (state[0], state[1]);
    let clean = match node {
        1 => (2.0 * px).sin() + 0.5 * py,
        2 => (2.0 * py).cos() - 0.4 * px,
        3 => (2.0 * px).sin() + (2.0 * py).cos(),
        4 => (2.0 * px).sin() - (2.0 * py).cos(),
        other => return Err(Error::UnknownNode(other)),
    };
    Ok(clean + noise)
}

fn check_dim(x: &Vector, want: usize, what: &str) -> Result<()> {
    if x.dim() != want {
        return Err(Error::DimensionMismatch(format!(
            "{what} expects a state of dim {want}, got {}",
            x.dim()
        )));
    }
    Ok(())
}

/// Residual network dynamics: `x + net([x; sin(k/10); cos(k/10)])`.
#[derive(Debug, Clone)]
pub struct LearnedDynamics {
    net: MlpParams,
    method: JacobianMethod,
}

pub fn learned_dynamics_model(net: MlpParams) -> Result<LearnedDynamics> {
    LearnedDynamics::new(net, JacobianMethod::Analytic)
}

impl LearnedDynamics {
    pub fn new(net: MlpParams, method: JacobianMethod) -> Result<Self> {
        if net.input_dim() != 4 || net.output_dim() != 2 {
            return Err(Error::DimensionMismatch(format!(
                "dynamics network must map 4 -> 2, got {} -> {}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(LearnedDynamics { net, method })
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    fn net_input(x: &Vector, k: i64) -> Vector {
        x.concat(&TimeFeatures::at(k).as_array())
    }
}

impl Model for LearnedDynamics {
    fn state_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        2
    }

    fn eval(&self, x: &Vector, k: i64) -> Result<Vector> {
        check_dim(x, 2, "learned dynamics")?;
        let residual = mlp_forward(&self.net, &Self::net_input(x, k))?;
        Ok(x + &residual)
    }

    fn jacobian(&self, x: &Vector, k: i64) -> Result<Matrix> {
        check_dim(x, 2, "learned dynamics")?;
        let full = mlp_jacobian(&self.net, &Self::net_input(x, k), self.method)?;
        Ok(&Matrix::identity(2) + &full.columns(&[0, 1]))
    }
}

/// Network measurement head for one sensor: `y = net(x)`.
#[derive(Debug, Clone)]
pub struct LearnedMeasurement {
    net: MlpParams,
    method: JacobianMethod,
}

pub fn learned_measurement_model(net: MlpParams) -> Result<LearnedMeasurement> {
    LearnedMeasurement::new(net, JacobianMethod::Analytic)
}

impl LearnedMeasurement {
    pub fn new(net: MlpParams, method: JacobianMethod) -> Result<Self> {
        if net.input_dim() != 2 || net.output_dim() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "measurement network must map 2 -> 1, got {} -> {}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(LearnedMeasurement { net, method })
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }
}

impl Model for LearnedMeasurement {
    fn state_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &Vector, _k: i64) -> Result<Vector> {
        check_dim(x, 2, "learned measurement")?;
        mlp_forward(&self.net, x)
    }

    fn jacobian(&self, x: &Vector, _k: i64) -> Result<Matrix> {
        check_dim(x, 2, "learned measurement")?;
        mlp_jacobian(&self.net, x, self.method)
    }
}

/// Noise-free planar transition `x + drift(k)`; its Jacobian is the identity.
#[derive(Debug, Clone, Copy, Default)]
pub struct NominalDrift;

impl Model for NominalDrift {
    fn state_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        2
    }

    fn eval(&self, x: &Vector, k: i64) -> Result<Vector> {
        check_dim(x, 2, "nominal drift")?;
        Ok(true_dynamics(x, k, &Vector::zeros(2)))
    }

    fn jacobian(&self, x: &Vector, _k: i64) -> Result<Matrix> {
        check_dim(x, 2, "nominal drift")?;
        Ok(Matrix::identity(2))
    }
}

/// How the baseline corrupts the sensor 1 and 2 formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Misspecification {
    /// `sin(2px)` for sensor 1 and `cos(2py)` for sensor 2.
    #[default]
    DropLinearTerms,
    /// Linear coefficients forced to one: `sin(2px) + py` and `cos(2py) - px`.
    UnitCoefficients,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementForm {
    Exact,
    Misspecified(Misspecification),
}

/// Closed-form sensor model with a closed-form Jacobian.
#[derive(Debug, Clone, Copy)]
pub struct AnalyticMeasurement {
    node: usize,
    form: MeasurementForm,
}

impl AnalyticMeasurement {
    pub fn new(node: usize, form: MeasurementForm) -> Result<Self> {
        if !(1..=SENSOR_COUNT).contains(&node) {
            return Err(Error::UnknownNode(node));
        }
        Ok(AnalyticMeasurement { node, form })
    }

    /// `(sin-term weight, cos-term weight, px coefficient, py coefficient)` of
    /// `a sin(2px) + b cos(2py) + c px + d py`.
    fn coefficients(&self) -> (f64, f64, f64, f64) {
        use Misspecification::*;
        let exact = match self.node {
            1 => (1.0, 0.0, 0.0, 0.5),
            2 => (0.0, 1.0, -0.4, 0.0),
            3 => (1.0, 1.0, 0.0, 0.0),
            _ => (1.0, -1.0, 0.0, 0.0),
        };
        match (self.form, self.node) {
            (MeasurementForm::Exact, _) | (_, 3) | (_, 4) => exact,
            (MeasurementForm::Misspecified(DropLinearTerms), 1) => (1.0, 0.0, 0.0, 0.0),
            (MeasurementForm::Misspecified(DropLinearTerms), _) => (0.0, 1.0, 0.0, 0.0),
            (MeasurementForm::Misspecified(UnitCoefficients), 1) => (1.0, 0.0, 0.0, 1.0),
            (MeasurementForm::Misspecified(UnitCoefficients), _) => (0.0, 1.0, -1.0, 0.0),
        }
    }
}

impl Model for AnalyticMeasurement {
    fn state_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &Vector, _k: i64) -> Result<Vector> {
        check_dim(x, 2, "analytic measurement")?;
        let (a, b, c, d) = self.coefficients();
        let (px, py) = (x[0], x[1]);
        Ok(Vector::from([
            a * (2.0 * px).sin() + b * (2.0 * py).cos() + c * px + d * py,
        ]))
    }

    fn jacobian(&self, x: &Vector, _k: i64) -> Result<Matrix> {
        check_dim(x, 2, "analytic measurement")?;
        let (a, b, c, d) = self.coefficients();
        let (px, py) = (x[0], x[1]);
        Ok(Matrix::row(&[
            2.0 * a * (2.0 * px).cos() + c,
            -2.0 * b * (2.0 * py).sin() + d,
        ]))
    }
}

/// `x -> A x` for a fixed matrix; used for the linear sanity system.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub matrix: Matrix,
}

impl LinearModel {
    pub fn new(matrix: Matrix) -> Self {
        LinearModel { matrix }
    }
}

impl Model for LinearModel {
    fn state_dim(&self) -> usize {
        self.matrix.cols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.rows()
    }

    fn eval(&self, x: &Vector, _k: i64) -> Result<Vector> {
        self.matrix.mul_vec(x)
    }

    fn jacobian(&self, x: &Vector, _k: i64) -> Result<Matrix> {
        check_dim(x, self.matrix.cols(), "linear model")?;
        Ok(self.matrix.clone())
    }
}

/// The baseline filter's models: exact nominal drift, sensors 1 and 2
/// mis-specified, sensors 3 and 4 exact.
pub fn ekf_baseline_models(kind: Misspecification) -> (SharedModel, Vec<SharedModel>) {
    let measurements = (1..=SENSOR_COUNT)
        .map(|node| {
            let form = if node <= 2 {
                MeasurementForm::Misspecified(kind)
            } else {
                MeasurementForm::Exact
            };
            Arc::new(AnalyticMeasurement::new(node, form).expect("node in range")) as SharedModel
        })
        .collect();
    (Arc::new(NominalDrift), measurements)
}

/// Central finite-difference Jacobian of any model with respect to the state.
pub fn finite_diff_jacobian(model: &dyn Model, x: &Vector, k: i64, step: f64) -> Result<Matrix> {
    let mut jac = Matrix::zeros(model.output_dim(), model.state_dim());
    for c in 0..model.state_dim() {
        let mut plus = x.clone();
        plus[c] += step;
        let mut minus = x.clone();
        minus[c] -= step;
        let fp = model.eval(&plus, k)?;
        let fm = model.eval(&minus, k)?;
        for r in 0..model.output_dim() {
            jac[(r, c)] = (fp[r] - fm[r]) / (2.0 * step);
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::MlpSpec;
    use crate::rng;
    use rand::Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn true_dynamics_examples() {
        let zero = Vector::zeros(2);
        assert_eq!(true_dynamics(&zero, 0, &zero), Vector::from([0.05, 0.0]));
        assert_eq!(
            true_dynamics(&Vector::from([1.0, 2.0]), 0, &zero),
            Vector::from([1.05, 2.0])
        );
        let x = true_dynamics(&zero, 0, &Vector::from([0.01, -0.02]));
        assert_close(x[0], 0.06, 1e-15);
        assert_close(x[1], -0.02, 1e-15);
    }

    #[test]
    fn true_measurement_examples() {
        let origin = Vector::zeros(2);
        assert_eq!(true_measurement(1, &origin, 0.0).unwrap(), 0.0);
        assert_eq!(true_measurement(2, &origin, 0.0).unwrap(), 1.0);
        assert_eq!(true_measurement(3, &origin, 0.0).unwrap(), 1.0);
        assert_eq!(true_measurement(4, &origin, 0.0).unwrap(), -1.0);
        assert!(matches!(true_measurement(5, &origin, 0.0), Err(Error::UnknownNode(5))));
        assert!(matches!(true_measurement(0, &origin, 0.0), Err(Error::UnknownNode(0))));
    }

    #[test]
    fn zero_residual_network_is_identity() {
        let net = MlpParams::zeros(&MlpSpec::new(4, vec![8, 8], 2)).unwrap();
        let model = learned_dynamics_model(net).unwrap();
        let x = Vector::from([0.3, -1.7]);
        assert_eq!(model.eval(&x, 17).unwrap(), x);
        assert_eq!(model.jacobian(&x, 17).unwrap(), Matrix::identity(2));
    }

    #[test]
    fn constant_measurement_network() {
        let mut net = MlpParams::zeros(&MlpSpec::new(2, vec![32, 32], 1)).unwrap();
        net.layers[2].bias = Vector::from([0.3]);
        let model = learned_measurement_model(net).unwrap();
        let x = Vector::from([1.0, 2.0]);
        assert_eq!(model.eval(&x, 0).unwrap(), Vector::from([0.3]));
        assert_eq!(model.jacobian(&x, 0).unwrap(), Matrix::row(&[0.0, 0.0]));
    }

    #[test]
    fn wrong_network_shapes_rejected() {
        let net = MlpParams::zeros(&MlpSpec::new(2, vec![4], 2)).unwrap();
        assert!(learned_dynamics_model(net.clone()).is_err());
        assert!(learned_measurement_model(net).is_err());
    }

    #[test]
    fn baseline_examples() {
        let (dynamics, meas) = ekf_baseline_models(Misspecification::DropLinearTerms);
        let y1 = meas[0].eval(&Vector::from([0.0, 10.0]), 0).unwrap()[0];
        assert_eq!(y1, 0.0);
        assert_eq!(true_measurement(1, &Vector::from([0.0, 10.0]), 0.0).unwrap(), 5.0);
        assert_eq!(meas[2].eval(&Vector::zeros(2), 0).unwrap()[0], 1.0);
        assert_eq!(dynamics.jacobian(&Vector::from([4.0, -3.0]), 12).unwrap(), Matrix::identity(2));
        assert_eq!(dynamics.eval(&Vector::zeros(2), 0).unwrap(), Vector::from([0.05, 0.0]));

        let x = Vector::from([0.4, -0.7]);
        let h3 = meas[2].jacobian(&x, 0).unwrap();
        assert_close(h3[(0, 0)], 2.0 * (0.8f64).cos(), 1e-15);
        assert_close(h3[(0, 1)], -2.0 * (-1.4f64).sin(), 1e-15);

        let (_, alt) = ekf_baseline_models(Misspecification::UnitCoefficients);
        assert_close(alt[1].eval(&x, 0).unwrap()[0], (-1.4f64).cos() - 0.4, 1e-15);
    }

    #[test]
    fn exact_analytic_models_match_truth() {
        let mut r = rng::stream(8, "truth", 0);
        for node in 1..=4 {
            let m = AnalyticMeasurement::new(node, MeasurementForm::Exact).unwrap();
            for _ in 0..20 {
                let x = Vector::from([r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]);
                assert_close(m.eval(&x, 0).unwrap()[0], true_measurement(node, &x, 0.0).unwrap(), 1e-15);
            }
        }
    }

    #[test]
    fn every_model_jacobian_matches_finite_differences() {
        let mut r = rng::stream(21, "fd", 0);
        let mut dyn_spec = MlpSpec::new(4, vec![16, 16], 2);
        dyn_spec.use_batch_norm = true;
        let mut models: Vec<SharedModel> = vec![
            Arc::new(NominalDrift),
            Arc::new(learned_dynamics_model(MlpParams::init(&dyn_spec, &mut r).unwrap()).unwrap()),
            Arc::new(
                learned_measurement_model(MlpParams::init(&MlpSpec::new(2, vec![8, 8], 1), &mut r).unwrap())
                    .unwrap(),
            ),
            Arc::new(LinearModel::new(Matrix::from_rows(&[&[0.9, 0.1], &[0.0, 0.8]]))),
        ];
        for kind in [Misspecification::DropLinearTerms, Misspecification::UnitCoefficients] {
            models.extend(ekf_baseline_models(kind).1);
        }
        for node in 1..=4 {
            models.push(Arc::new(AnalyticMeasurement::new(node, MeasurementForm::Exact).unwrap()));
        }
        for model in &models {
            for k in [0, 7, 400] {
                let x = Vector::from([r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]);
                let analytic = model.jacobian(&x, k).unwrap();
                let fd = finite_diff_jacobian(model.as_ref(), &x, k, 1e-5).unwrap();
                assert!(analytic.max_abs_diff(&fd) < 1e-4, "{model:?}: {analytic:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn time_features_bounded() {
        for k in -50..500 {
            let t = TimeFeatures::at(k);
            assert!(t.sin.abs() <= 1.0 && t.cos.abs() <= 1.0);
        }
        assert_eq!(TimeFeatures::at(0).as_array(), [0.0, 1.0]);
    }
}
