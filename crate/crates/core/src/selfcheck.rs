//! Fast invariant checks that need no trained networks.

use rand::Rng;

use crate::error::Result;
use crate::filter::{Belief, Stage};
use crate::fusion::{fuse, info_contribution, FusionScale, InfoMessage};
use crate::linalg::{Matrix, Vector};
use crate::models::{ekf_baseline_models, finite_diff_jacobian, AnalyticMeasurement, MeasurementForm, Model};
use crate::neural::{mlp_jacobian, JacobianMethod, MlpParams, MlpSpec};
use crate::rng;
use crate::sim::linear::{check_error_bound, oracle_deviation, LinearSystem};

pub const JACOBIAN_TOL: f64 = 1e-4;
pub const FUSION_TOL: f64 = 1e-10;
pub const ORACLE_TOL: f64 = 1e-9;
pub const BOUND_FRACTION: f64 = 0.95;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// The dynamics and measurement network shapes of the experiment.
pub fn experiment_shapes() -> [MlpSpec; 2] {
    let mut dynamics = MlpSpec::new(4, vec![128, 128, 128], 2);
    dynamics.use_batch_norm = true;
    dynamics.dropout_rate = 0.2;
    [dynamics, MlpSpec::new(2, vec![32, 32], 1)]
}

/// A freshly initialized network whose batch-norm statistics are randomized,
/// so the check exercises the inference-time normalization.
pub fn probe_network(spec: &MlpSpec, seed: u64) -> Result<MlpParams> {
    let mut r = rng::stream(seed, "probe-net", 0);
    let mut net = MlpParams::init(spec, &mut r)?;
    for bn in &mut net.norms {
        for j in 0..bn.scale.dim() {
            bn.running_mean[j] = r.random_range(-0.5..0.5);
            bn.running_var[j] = r.random_range(0.2..2.0);
            bn.scale[j] = r.random_range(0.5..1.5);
            bn.shift[j] = r.random_range(-0.2..0.2);
        }
    }
    Ok(net)
}

/// Largest analytic-vs-central-difference gap over `count` seeded inputs in `[-2, 2]ⁿ`.
pub fn jacobian_gap(net: &MlpParams, count: usize, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "jacobian-inputs", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let x = Vector::new((0..net.input_dim()).map(|_| r.random_range(-2.0..2.0)).collect());
        let a = mlp_jacobian(net, &x, JacobianMethod::Analytic)?;
        let f = mlp_jacobian(net, &x, JacobianMethod::FiniteDiff)?;
        worst = worst.max(a.max_abs_diff(&f));
    }
    Ok(worst)
}

fn model_jacobian_gap(seed: u64) -> Result<f64> {
    let (dynamics, baseline) = ekf_baseline_models(Default::default());
    let mut models: Vec<std::sync::Arc<dyn Model>> = vec![dynamics];
    models.extend(baseline);
    for node in 1..=4 {
        models.push(std::sync::Arc::new(AnalyticMeasurement::new(node, MeasurementForm::Exact)?));
    }
    let mut r = rng::stream(seed, "model-inputs", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = Vector::from([r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]);
        let k = r.random_range(0..500);
        for m in &models {
            let fd = finite_diff_jacobian(m.as_ref(), &x, k, 1e-5)?;
            worst = worst.max(m.jacobian(&x, k)?.max_abs_diff(&fd));
        }
    }
    Ok(worst)
}

/// Worst violation of the fusion identities over seeded random beliefs.
pub fn fusion_identity_gap(seed: u64, trials: usize) -> Result<f64> {
    let mut r = rng::stream(seed, "fusion-identities", 0);
    let random_cov = |r: &mut rand_chacha::ChaCha8Rng| {
        let a: f64 = r.random_range(0.05..2.0);
        let d: f64 = r.random_range(0.05..2.0);
        let b = r.random_range(-0.8..0.8) * (a * d).sqrt();
        Matrix::from_rows(&[&[a, b], &[b, d]])
    };
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let cov = random_cov(&mut r);
        let mean = Vector::from([r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)]);
        let belief = Belief::new(mean.clone(), cov.clone(), Stage::Updated, 0)?;
        let m = info_contribution(&belief)?;

        let single = fuse(&[&m], FusionScale::Sum, 0)?;
        worst = worst.max(single.mean.max_abs_diff(&mean)).max(single.cov.max_abs_diff(&cov));

        let double = fuse(&[&m, &m], FusionScale::Sum, 0)?;
        // Halving is exact relative to the single-message result.
        worst = worst
            .max(double.cov.max_abs_diff(&single.cov.scale(0.5)))
            .max(double.mean.max_abs_diff(&mean));

        let n = r.random_range(2..6);
        let shared = random_cov(&mut r);
        let means: Vec<Vector> = (0..n)
            .map(|_| Vector::from([r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)]))
            .collect();
        let msgs = means
            .iter()
            .map(|mu| info_contribution(&Belief::new(mu.clone(), shared.clone(), Stage::Updated, 0)?))
            .collect::<Result<Vec<InfoMessage>>>()?;
        let refs: Vec<&InfoMessage> = msgs.iter().collect();
        let fused = fuse(&refs, FusionScale::Sum, 0)?;
        let avg = means.iter().fold(Vector::zeros(2), |a, m| &a + m).scale(1.0 / n as f64);
        worst = worst.max(fused.mean.max_abs_diff(&avg));

        let mixed = (0..n)
            .map(|i| info_contribution(&Belief::new(means[i].clone(), random_cov(&mut r), Stage::Updated, 0)?))
            .collect::<Result<Vec<InfoMessage>>>()?;
        let refs: Vec<&InfoMessage> = mixed.iter().collect();
        let fused = fuse(&refs, FusionScale::Sum, 0)?;
        let total = mixed.iter().fold(Matrix::zeros(2, 2), |a, m| &a + &m.precision);
        let back = info_contribution(&fused)?;
        worst = worst.max(back.precision.max_abs_diff(&total) / total.max_abs().max(1.0));
    }
    Ok(worst)
}

/// Fraction of steps where the observed error is within the bound, and
/// whether every contraction condition held, over `seeds` runs.
pub fn stability_summary(seeds: u64) -> Result<(f64, bool)> {
    let sys = LinearSystem::sanity();
    let mut within = 0;
    let mut total = 0;
    let mut all_met = true;
    for seed in 0..seeds {
        let c = check_error_bound(&sys, seed)?;
        within += c.within();
        total += c.errors.len();
        all_met &= c.all_conditions_met;
    }
    Ok((within as f64 / total as f64, all_met))
}

pub fn run_self_checks() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, result: Result<(bool, String)>| {
        let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
        out.push(CheckOutcome { name, passed, detail });
    };

    for (name, spec, seed) in [
        ("dynamics network Jacobian", &experiment_shapes()[0], 1),
        ("measurement network Jacobian", &experiment_shapes()[1], 2),
    ] {
        push(
            name,
            probe_network(spec, seed)
                .and_then(|net| jacobian_gap(&net, 100, seed))
                .map(|gap| (gap < JACOBIAN_TOL, format!("max |analytic - fd| = {gap:.3e} (tol {JACOBIAN_TOL:e})"))),
        );
    }
    push(
        "analytic model Jacobians",
        model_jacobian_gap(3).map(|gap| (gap < JACOBIAN_TOL, format!("max gap {gap:.3e}"))),
    );
    push(
        "fusion identities",
        fusion_identity_gap(4, 200).map(|gap| (gap < FUSION_TOL, format!("max deviation {gap:.3e} (tol {FUSION_TOL:e})"))),
    );
    push(
        "linear Kalman oracle",
        (0..5)
            .map(|seed| oracle_deviation(&LinearSystem::sanity(), seed))
            .collect::<Result<Vec<f64>>>()
            .map(|d| {
                let worst = d.into_iter().fold(0.0, f64::max);
                (worst < ORACLE_TOL, format!("max deviation {worst:.3e} over 5 seeds (tol {ORACLE_TOL:e})"))
            }),
    );
    push(
        "contraction bound",
        stability_summary(20).map(|(frac, met)| {
            (
                met && frac >= BOUND_FRACTION,
                format!("{:.1}% of steps within bound, conditions met everywhere: {met}", frac * 100.0),
            )
        }),
    );
    out
}
