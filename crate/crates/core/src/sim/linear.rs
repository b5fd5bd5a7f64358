//! A linear-Gaussian system on which the filter must agree with a plain
//! textbook Kalman filter, and on which the contraction bound can be checked
//! against the realized noise.

use std::sync::Arc;

use super::NoiseSource;
use crate::error::{Error, Result};
use crate::filter::{Belief, NoiseModel};
use crate::fusion::{FusionScale, Topology};
use crate::linalg::{spectral_norm, Matrix, Vector};
use crate::models::{LinearModel, SharedModel};
use crate::rng;
use crate::stability::{error_bound, ContractionReport};

use super::run::FilterBank;

#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: Matrix,
    pub h: Matrix,
    pub q: Matrix,
    pub r: Matrix,
    /// True initial state.
    pub x0: Vector,
    pub init_mean: Vector,
    pub init_cov: Matrix,
    pub steps: usize,
}

impl LinearSystem {
    /// `x' = 0.9 x + w`, observed through a full-rank 2x2 `H`, so that both
    /// `‖F‖` and `‖I - KH‖` stay below one.
    pub fn sanity() -> Self {
        LinearSystem {
            a: Matrix::identity(2).scale(0.9),
            h: Matrix::from_rows(&[&[1.0, 0.2], &[-0.1, 0.8]]),
            q: Matrix::identity(2).scale(0.001),
            r: Matrix::identity(2).scale(0.01),
            x0: Vector::from([1.0, -1.0]),
            init_mean: Vector::zeros(2),
            init_cov: Matrix::identity(2).scale(0.5),
            steps: 100,
        }
    }
}

/// States `x_0..=x_N`, process noise `w_0..w_{N-1}` and readings `y_1..=y_N`
/// (index 0 of `v` and `ys` is unused and zero).
#[derive(Debug, Clone)]
pub struct LinearData {
    pub states: Vec<Vector>,
    pub w: Vec<Vector>,
    pub v: Vec<Vector>,
    pub ys: Vec<Vector>,
}

impl LinearSystem {
    pub fn simulate(&self, seed: u64) -> Result<LinearData> {
        let mut wsrc = NoiseSource::new(rng::stream(seed, "linear-process", 0), &self.q)?;
        let mut vsrc = NoiseSource::new(rng::stream(seed, "linear-measurement", 0), &self.r)?;
        let m = self.h.rows();
        let mut states = vec![self.x0.clone()];
        let mut w = Vec::with_capacity(self.steps);
        let mut v = vec![Vector::zeros(m)];
        let mut ys = vec![Vector::zeros(m)];
        for k in 0..self.steps {
            let wk = wsrc.draw();
            let next = &(&self.a * &states[k]) + &wk;
            let vk = vsrc.draw();
            ys.push(&(&self.h * &next) + &vk);
            states.push(next);
            w.push(wk);
            v.push(vk);
        }
        Ok(LinearData { states, w, v, ys })
    }

    /// Runs the network filter with one node and no fusion.
    pub fn run_filter(&self, data: &LinearData) -> Result<LinearRun> {
        let dynamics = LinearModel::new(self.a.clone());
        let meas: Vec<SharedModel> = vec![Arc::new(LinearModel::new(self.h.clone()))];
        let noise = NoiseModel {
            q: self.q.clone(),
            r: vec![self.r.clone()],
        };
        let topo = Topology::isolated(1);
        let bank = FilterBank {
            dynamics: &dynamics,
            measurements: &meas,
            noise: &noise,
            topology: &topo,
            scale: FusionScale::Sum,
            rounds: 0,
        };
        let mut belief = Belief::initial(self.init_mean.clone(), self.init_cov.clone(), 0)?;
        let mut out = LinearRun::default();
        for k in 1..=self.steps {
            let (next, log) = bank.step(&[belief], std::slice::from_ref(&data.ys[k]), ("linear", 0))?;
            belief = next.into_iter().next().expect("one node");
            out.gains.push(log.records[0].gain.clone());
            out.reports.extend(log.reports);
            out.means.push(belief.mean.clone());
            out.covs.push(belief.cov.clone());
        }
        Ok(out)
    }
}

/// Posterior means and covariances for `k = 1..=N`.
#[derive(Debug, Clone, Default)]
pub struct LinearRun {
    pub means: Vec<Vector>,
    pub covs: Vec<Matrix>,
    pub gains: Vec<Matrix>,
    pub reports: Vec<ContractionReport>,
}

type Dense = Vec<Vec<f64>>;

fn dense(m: &Matrix) -> Dense {
    (0..m.rows()).map(|i| m.row_slice(i).to_vec()).collect()
}

fn mm(a: &Dense, b: &Dense) -> Dense {
    let (n, p, m) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for k in 0..p {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

fn tr(a: &Dense) -> Dense {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

fn add(a: &Dense, b: &Dense, sign: f64) -> Dense {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + sign * q).collect())
        .collect()
}

fn mv(a: &Dense, x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

/// Gauss-Jordan elimination with partial pivoting.
fn gauss_jordan_inverse(a: &Dense) -> Result<Dense> {
    let n = a.len();
    let mut aug: Dense = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for c in 0..n {
        let pivot = (c..n)
            .max_by(|&i, &j| aug[i][c].abs().total_cmp(&aug[j][c].abs()))
            .expect("nonempty");
        if aug[pivot][c] == 0.0 {
            return Err(Error::SingularInnovation("reference filter hit a singular matrix".into()));
        }
        aug.swap(c, pivot);
        let p = aug[c][c];
        for x in aug[c].iter_mut() {
            *x /= p;
        }
        for i in 0..n {
            if i != c {
                let f = aug[i][c];
                if f != 0.0 {
                    for j in 0..2 * n {
                        aug[i][j] -= f * aug[c][j];
                    }
                }
            }
        }
    }
    Ok(aug.into_iter().map(|r| r[n..].to_vec()).collect())
}

/// Textbook linear Kalman filter on plain nested vectors, sharing no code with
/// the library's filter. Returns posterior means and covariances for `y_1..`.
pub fn reference_kalman(sys: &LinearSystem, ys: &[Vector]) -> Result<(Vec<Vector>, Vec<Matrix>)> {
    let (a, h, q, r) = (dense(&sys.a), dense(&sys.h), dense(&sys.q), dense(&sys.r));
    let n = a.len();
    let eye: Dense = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let mut x = sys.init_mean.as_slice().to_vec();
    let mut p = dense(&sys.init_cov);
    let mut means = Vec::new();
    let mut covs = Vec::new();
    for y in ys {
        x = mv(&a, &x);
        p = add(&mm(&mm(&a, &p), &tr(&a)), &q, 1.0);
        let s = add(&mm(&mm(&h, &p), &tr(&h)), &r, 1.0);
        let k = mm(&mm(&p, &tr(&h)), &gauss_jordan_inverse(&s)?);
        let resid: Vec<f64> = y.iter().zip(mv(&h, &x)).map(|(a, b)| a - b).collect();
        x = x.iter().zip(mv(&k, &resid)).map(|(a, b)| a + b).collect();
        p = mm(&add(&eye, &mm(&k, &h), -1.0), &p);
        means.push(Vector::new(x.clone()));
        covs.push(Matrix::from_row_major(n, n, p.concat())?);
    }
    Ok((means, covs))
}

#[derive(Debug, Clone)]
pub struct BoundCheck {
    pub gamma: f64,
    pub beta: f64,
    /// Observed `‖e_k‖` for `k = 1..=N`.
    pub errors: Vec<f64>,
    pub bounds: Vec<f64>,
    pub all_conditions_met: bool,
}

impl BoundCheck {
    pub fn within(&self) -> usize {
        self.errors.iter().zip(&self.bounds).filter(|(e, b)| e <= b).count()
    }
}

/// Compares the observed error with `γᴺe₀ + Σ γ^{N-1-j} ν_j`, where γ and β are
/// the largest per-step values seen and `ν_j = β‖w_j‖ + ‖K_{j+1}‖‖v_{j+1}‖`
/// uses the realized noise.
pub fn check_error_bound(sys: &LinearSystem, seed: u64) -> Result<BoundCheck> {
    let data = sys.simulate(seed)?;
    let run = sys.run_filter(&data)?;
    let gamma = run.reports.iter().map(|r| r.gamma_k).fold(0.0, f64::max);
    let beta = run.reports.iter().map(|r| r.beta_k).fold(0.0, f64::max);
    let nu = (0..sys.steps)
        .map(|j| Ok(beta * data.w[j].norm() + spectral_norm(&run.gains[j])? * data.v[j + 1].norm()))
        .collect::<Result<Vec<f64>>>()?;
    let e0 = (&sys.init_mean - &sys.x0).norm();
    let errors = run
        .means
        .iter()
        .zip(&data.states[1..])
        .map(|(m, x)| (m - x).norm())
        .collect();
    let bounds = (1..=sys.steps)
        .map(|n| error_bound(gamma, e0, &nu, n))
        .collect::<Result<_>>()?;
    Ok(BoundCheck {
        gamma,
        beta,
        errors,
        bounds,
        all_conditions_met: run.reports.iter().all(|r| r.conditions_met),
    })
}

/// Largest deviation of the filter from the reference, over means and covariances.
pub fn oracle_deviation(sys: &LinearSystem, seed: u64) -> Result<f64> {
    let data = sys.simulate(seed)?;
    let run = sys.run_filter(&data)?;
    let (means, covs) = reference_kalman(sys, &data.ys[1..])?;
    let mut worst: f64 = 0.0;
    for k in 0..sys.steps {
        worst = worst
            .max(run.means[k].max_abs_diff(&means[k]))
            .max(run.covs[k].max_abs_diff(&covs[k]));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn filter_matches_reference() {
        let sys = LinearSystem::sanity();
        for seed in 0..5 {
            let dev = oracle_deviation(&sys, seed).unwrap();
            assert!(dev < 1e-9, "seed {seed}: {dev}");
        }
    }

    #[test]
    fn reference_matches_nalgebra_filter() {
        let sys = LinearSystem::sanity();
        let data = sys.simulate(11).unwrap();
        let (means, _) = reference_kalman(&sys, &data.ys[1..]).unwrap();
        let to_na = |m: &Matrix| DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
        let (a, h, q, r) = (to_na(&sys.a), to_na(&sys.h), to_na(&sys.q), to_na(&sys.r));
        let mut x = DVector::from_column_slice(sys.init_mean.as_slice());
        let mut p = to_na(&sys.init_cov);
        for (k, y) in data.ys[1..].iter().enumerate() {
            x = &a * x;
            p = &a * &p * a.transpose() + &q;
            let s = &h * &p * h.transpose() + &r;
            let gain = &p * h.transpose() * s.try_inverse().unwrap();
            x = &x + &gain * (DVector::from_column_slice(y.as_slice()) - &h * &x);
            p = (DMatrix::identity(2, 2) - &gain * &h) * &p;
            assert!((x[0] - means[k][0]).abs() < 1e-10 && (x[1] - means[k][1]).abs() < 1e-10);
        }
    }

    #[test]
    fn gauss_jordan_pivots() {
        let a = vec![vec![0.0, 2.0], vec![3.0, 1.0]];
        let inv = gauss_jordan_inverse(&a).unwrap();
        let prod = mm(&a, &inv);
        assert!((prod[0][0] - 1.0).abs() < 1e-15 && prod[0][1].abs() < 1e-15);
        assert!(gauss_jordan_inverse(&vec![vec![1.0, 2.0], vec![2.0, 4.0]]).is_err());
    }

    #[test]
    fn contraction_holds_and_bound_covers_the_error() {
        let sys = LinearSystem::sanity();
        let check = check_error_bound(&sys, 3).unwrap();
        assert!(check.all_conditions_met);
        assert!(check.gamma < 1.0);
        assert_eq!(check.errors.len(), 100);
        assert!(check.within() >= 95, "{} of 100", check.within());
    }
}
