//! Per-node predict and measurement update over arbitrary [`Model`]s.

use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::{invert_spd, spectral_norm, Matrix, Vector, SYMMETRY_TOL};
use crate::models::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Predicted,
    Updated,
    Fused,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Predicted => "predicted",
            Stage::Updated => "updated",
            Stage::Fused => "fused",
        };
        write!(f, "{s} belief")
    }
}

/// Gaussian state estimate of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub mean: Vector,
    pub cov: Matrix,
    pub stage: Stage,
    pub time: i64,
}

impl Belief {
    /// Checks the covariance is symmetric positive definite and the mean finite.
    pub fn new(mean: Vector, cov: Matrix, stage: Stage, time: i64) -> Result<Self> {
        if cov.shape() != (mean.dim(), mean.dim()) {
            return Err(Error::DimensionMismatch(format!(
                "covariance {:?} does not match mean of dim {}",
                cov.shape(),
                mean.dim()
            )));
        }
        if !mean.is_finite() {
            return Err(Error::NonFiniteState(format!("mean {mean:?}")));
        }
        if !cov.is_symmetric(SYMMETRY_TOL) {
            return Err(Error::NotSpd(format!("covariance is not symmetric: {cov:?}")));
        }
        cov.cholesky()?;
        Ok(Belief {
            mean,
            cov,
            stage,
            time,
        })
    }

    /// Posterior at `time` used to start filtering.
    pub fn initial(mean: Vector, cov: Matrix, time: i64) -> Result<Self> {
        Self::new(mean, cov, Stage::Updated, time)
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub q: Matrix,
    /// One measurement covariance per node.
    pub r: Vec<Matrix>,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !self.q.is_symmetric(SYMMETRY_TOL) || !self.q.is_finite() {
            return Err(Error::config("q", "process noise must be finite and symmetric"));
        }
        // Q may be singular, so check PSD via Q + εI.
        let eps = 1e-12 * self.q.max_abs().max(1.0);
        (&self.q + &Matrix::identity(self.q.rows()).scale(eps))
            .cholesky()
            .map_err(|_| Error::config("q", "process noise must be positive semidefinite"))?;
        for (i, r) in self.r.iter().enumerate() {
            if !r.is_symmetric(SYMMETRY_TOL) || r.cholesky().is_err() {
                return Err(Error::config(
                    format!("r[{}]", i + 1),
                    "measurement noise must be positive definite",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnovationRecord {
    /// Zero-based node index.
    pub node: usize,
    pub time: i64,
    pub innovation: Vector,
    pub innovation_cov: Matrix,
    pub gain_norm: f64,
    /// Kalman gain `K`.
    pub gain: Matrix,
    /// Measurement Jacobian `H` at the predicted mean.
    pub meas_jacobian: Matrix,
}

/// Propagates an updated or fused belief at time `k` to a predicted belief at `k + 1`.
pub fn predict(belief: &Belief, dynamics: &dyn Model, q: &Matrix) -> Result<Belief> {
    predict_linearized(belief, dynamics, q).map(|(b, _)| b)
}

/// [`predict`] that also returns the dynamics Jacobian `F` it used.
pub fn predict_linearized(belief: &Belief, dynamics: &dyn Model, q: &Matrix) -> Result<(Belief, Matrix)> {
    if belief.stage == Stage::Predicted {
        return Err(Error::StageOrder {
            operation: "predict",
            found: belief.stage.to_string(),
        });
    }
    let k = belief.time;
    let mean = dynamics.eval(&belief.mean, k)?;
    if !mean.is_finite() {
        return Err(Error::NonFiniteState(format!("predicted mean {mean:?} at k={k}")));
    }
    let f = dynamics.jacobian(&belief.mean, k)?;
    let cov = f.congruence(&belief.cov)?.try_add(q)?.symmetrize();
    if !cov.is_finite() {
        return Err(Error::NonFiniteState(format!("predicted covariance at k={k}")));
    }
    Ok((
        Belief {
            mean,
            cov,
            stage: Stage::Predicted,
            time: k + 1,
        },
        f,
    ))
}

/// Local measurement update of a predicted belief with reading `y` from `node`.
pub fn update(
    belief: &Belief,
    y: &Vector,
    meas: &dyn Model,
    r: &Matrix,
    node: usize,
) -> Result<(Belief, InnovationRecord)> {
    if belief.stage != Stage::Predicted {
        return Err(Error::StageOrder {
            operation: "update",
            found: belief.stage.to_string(),
        });
    }
    if y.dim() != meas.output_dim() || r.shape() != (y.dim(), y.dim()) {
        return Err(Error::DimensionMismatch(format!(
            "measurement of dim {} with model output {} and R {:?}",
            y.dim(),
            meas.output_dim(),
            r.shape()
        )));
    }
    let k = belief.time;
    let predicted = meas.eval(&belief.mean, k)?;
    let h = meas.jacobian(&belief.mean, k)?;
    let p = &belief.cov;

    let p_ht = p.matmul(&h.transpose())?;
    let s = h.matmul(&p_ht)?.try_add(r)?.symmetrize();
    let s_inv = invert_spd(&s).map_err(|e| Error::SingularInnovation(format!("k={k}: {e}")))?;
    let gain = p_ht.matmul(&s_inv)?;

    let innovation = y - &predicted;
    let mean = &belief.mean + &gain.mul_vec(&innovation)?;
    let i_kh = Matrix::identity(belief.dim()).try_sub(&gain.matmul(&h)?)?;
    let cov = i_kh.matmul(p)?.symmetrize();
    if !mean.is_finite() || !cov.is_finite() {
        return Err(Error::NonFiniteState(format!("updated belief at k={k}")));
    }

    let gain_norm = spectral_norm(&gain).unwrap_or_else(|e| match e {
        Error::NoConvergence { estimate, .. } => estimate,
        _ => f64::NAN,
    });
    let record = InnovationRecord {
        node,
        time: k,
        innovation,
        innovation_cov: s,
        gain_norm,
        gain,
        meas_jacobian: h,
    };
    Ok((
        Belief {
            mean,
            cov,
            stage: Stage::Updated,
            time: k,
        },
        record,
    ))
}
