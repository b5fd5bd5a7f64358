use rand::seq::SliceRandom;
use rand::Rng;

use super::{dot, mean_squared_error, Dataset, MlpParams, MlpSpec, Mode, TrainConfig, BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::rng;

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Moments sized to match `shapes`, one entry per parameter tensor.
    pub fn new(shapes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "adam: tensor count changed");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Trainable tensors in a fixed order: per dense layer weight then bias,
/// then per batch-norm block scale then shift.
fn tensors_mut(p: &mut MlpParams) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for layer in &mut p.layers {
        out.push(layer.weight.as_mut_slice());
        out.push(layer.bias.as_mut_slice());
    }
    for bn in &mut p.norms {
        out.push(bn.scale.as_mut_slice());
        out.push(bn.shift.as_mut_slice());
    }
    out
}

fn tensor_sizes(p: &MlpParams) -> Vec<usize> {
    let mut out = Vec::new();
    for layer in &p.layers {
        out.push(layer.weight.as_slice().len());
        out.push(layer.bias.dim());
    }
    for bn in &p.norms {
        out.push(bn.scale.dim());
        out.push(bn.shift.dim());
    }
    out
}

struct HiddenCache {
    input: Vec<f64>,
    /// Normalized pre-activations (batch norm only).
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    tanh: Vec<f64>,
    /// Inverted-dropout multipliers (empty when dropout is off).
    mask: Vec<f64>,
}

struct ForwardTrace {
    hidden: Vec<HiddenCache>,
    last_input: Vec<f64>,
    output: Vec<f64>,
}

/// `n x fan_out` rows of `x Wᵀ + b`.
fn affine_rows(x: &[f64], n: usize, layer: &super::Dense) -> Vec<f64> {
    let fan_in = layer.weight.cols();
    let fan_out = layer.weight.rows();
    let mut out = vec![0.0; n * fan_out];
    for i in 0..n {
        let xi = &x[i * fan_in..(i + 1) * fan_in];
        for j in 0..fan_out {
            out[i * fan_out + j] = layer.bias[j] + dot(layer.weight.row_slice(j), xi);
        }
    }
    out
}

fn forward_train<R: Rng>(p: &mut MlpParams, x: &[f64], n: usize, rng: &mut R) -> ForwardTrace {
    let keep = 1.0 - p.spec.dropout_rate;
    let hidden_count = p.layers.len() - 1;
    let mut hidden = Vec::with_capacity(hidden_count);
    let mut act = x.to_vec();
    for l in 0..hidden_count {
        let w = p.layers[l].weight.rows();
        let mut z = affine_rows(&act, n, &p.layers[l]);
        let mut xhat = Vec::new();
        let mut inv_std = Vec::new();
        if let Some(bn) = p.norms.get_mut(l) {
            let mut mean = vec![0.0; w];
            for i in 0..n {
                for j in 0..w {
                    mean[j] += z[i * w + j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; w];
            for i in 0..n {
                for j in 0..w {
                    var[j] += (z[i * w + j] - mean[j]).powi(2);
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            xhat = vec![0.0; n * w];
            for i in 0..n {
                for j in 0..w {
                    let h = (z[i * w + j] - mean[j]) * inv_std[j];
                    xhat[i * w + j] = h;
                    z[i * w + j] = bn.scale[j] * h + bn.shift[j];
                }
            }
            let unbiased = n as f64 / (n as f64 - 1.0);
            for j in 0..w {
                bn.running_mean[j] = (1.0 - BN_MOMENTUM) * bn.running_mean[j] + BN_MOMENTUM * mean[j];
                bn.running_var[j] =
                    (1.0 - BN_MOMENTUM) * bn.running_var[j] + BN_MOMENTUM * var[j] * unbiased;
            }
        }
        let tanh: Vec<f64> = z.iter().map(|u| u.tanh()).collect();
        let mut mask = Vec::new();
        let mut next = tanh.clone();
        if p.spec.dropout_rate > 0.0 {
            mask = (0..n * w)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            next.iter_mut().zip(&mask).for_each(|(a, m)| *a *= m);
        }
        hidden.push(HiddenCache {
            input: std::mem::replace(&mut act, next),
            xhat,
            inv_std,
            tanh,
            mask,
        });
    }
    let output = affine_rows(&act, n, p.layers.last().expect("output layer"));
    ForwardTrace {
        hidden,
        last_input: act,
        output,
    }
}

/// Gradients of the dense layer `y = x Wᵀ + b` given `d = dL/dy`; returns
/// `(dW, db, dL/dx)`.
fn dense_backward(
    layer: &super::Dense,
    x: &[f64],
    d: &[f64],
    n: usize,
    want_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let fan_in = layer.weight.cols();
    let fan_out = layer.weight.rows();
    let mut dw = vec![0.0; fan_out * fan_in];
    let mut db = vec![0.0; fan_out];
    let mut dx = if want_dx { vec![0.0; n * fan_in] } else { Vec::new() };
    for i in 0..n {
        let xi = &x[i * fan_in..(i + 1) * fan_in];
        for j in 0..fan_out {
            let g = d[i * fan_out + j];
            if g == 0.0 {
                continue;
            }
            db[j] += g;
            for (w, xv) in dw[j * fan_in..(j + 1) * fan_in].iter_mut().zip(xi) {
                *w += g * xv;
            }
            if want_dx {
                for (o, wv) in dx[i * fan_in..(i + 1) * fan_in]
                    .iter_mut()
                    .zip(layer.weight.row_slice(j))
                {
                    *o += g * wv;
                }
            }
        }
    }
    (dw, db, dx)
}

/// Returns the batch loss and gradients ordered like [`tensors_mut`].
fn backward(p: &MlpParams, trace: &ForwardTrace, targets: &[f64], n: usize) -> (f64, Vec<Vec<f64>>) {
    let out_dim = p.output_dim();
    let mut loss = 0.0;
    let mut d: Vec<f64> = trace
        .output
        .iter()
        .zip(targets)
        .map(|(y, t)| {
            let e = y - t;
            loss += e * e;
            2.0 * e / n as f64
        })
        .collect();
    loss /= n as f64;
    debug_assert_eq!(d.len(), n * out_dim);

    let hidden_count = p.layers.len() - 1;
    let mut layer_grads = vec![(Vec::new(), Vec::new()); p.layers.len()];
    let mut norm_grads = vec![(Vec::new(), Vec::new()); p.norms.len()];

    let (dw, db, dx) = dense_backward(&p.layers[hidden_count], &trace.last_input, &d, n, hidden_count > 0);
    layer_grads[hidden_count] = (dw, db);
    d = dx;

    for l in (0..hidden_count).rev() {
        let cache = &trace.hidden[l];
        let w = p.layers[l].weight.rows();
        if !cache.mask.is_empty() {
            d.iter_mut().zip(&cache.mask).for_each(|(g, m)| *g *= m);
        }
        // through tanh
        d.iter_mut().zip(&cache.tanh).for_each(|(g, t)| *g *= 1.0 - t * t);
        if let Some(bn) = p.norms.get(l) {
            let mut dscale = vec![0.0; w];
            let mut dshift = vec![0.0; w];
            for i in 0..n {
                for j in 0..w {
                    dscale[j] += d[i * w + j] * cache.xhat[i * w + j];
                    dshift[j] += d[i * w + j];
                }
            }
            // dxhat = d * scale; dz = inv_std/n * (n dxhat - Σdxhat - xhat Σ(dxhat xhat))
            for j in 0..w {
                let sum_dxhat = dshift[j] * bn.scale[j];
                let sum_dxhat_xhat = dscale[j] * bn.scale[j];
                for i in 0..n {
                    let dxhat = d[i * w + j] * bn.scale[j];
                    d[i * w + j] = cache.inv_std[j] / n as f64
                        * (n as f64 * dxhat - sum_dxhat - cache.xhat[i * w + j] * sum_dxhat_xhat);
                }
            }
            norm_grads[l] = (dscale, dshift);
        }
        let (dw, db, dx) = dense_backward(&p.layers[l], &cache.input, &d, n, l > 0);
        layer_grads[l] = (dw, db);
        d = dx;
    }

    let mut grads = Vec::with_capacity(2 * (layer_grads.len() + norm_grads.len()));
    for (dw, db) in layer_grads {
        grads.push(dw);
        grads.push(db);
    }
    for (ds, dsh) in norm_grads {
        grads.push(ds);
        grads.push(dsh);
    }
    (loss, grads)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Inference-mode MSE of the initial network.
    pub initial_loss: f64,
    /// Inference-mode MSE of the returned network.
    pub final_loss: f64,
    /// Mean training-mode loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Fits a fresh network to `data`; the result is in eval mode.
pub fn mlp_train(spec: &MlpSpec, data: &Dataset, cfg: &TrainConfig) -> Result<MlpParams> {
    mlp_train_with_history(spec, data, cfg).map(|(p, _)| p)
}

pub fn mlp_train_with_history(
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(MlpParams, TrainReport)> {
    spec.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        if x.dim() != spec.input_dim || y.dim() != spec.output_dim {
            return Err(Error::DimensionMismatch(format!(
                "sample ({}, {}) does not fit network {}->{}",
                x.dim(),
                y.dim(),
                spec.input_dim,
                spec.output_dim
            )));
        }
    }

    let mut init_rng = rng::stream(cfg.seed, "mlp-init", 0);
    let mut shuffle_rng = rng::stream(cfg.seed, "mlp-shuffle", 0);
    let mut dropout_rng = rng::stream(cfg.seed, "mlp-dropout", 0);

    let mut params = MlpParams::init(spec, &mut init_rng)?;
    let initial_loss = mean_squared_error(&params, data)?;
    params.set_mode(Mode::Train);

    let n = data.len();
    let batch = if cfg.batch_size == 0 || cfg.batch_size >= n {
        n
    } else {
        cfg.batch_size
    };
    let mut adam = Adam::new(&tensor_sizes(&params));
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut xs = Vec::with_capacity(batch * spec.input_dim);
    let mut ys = Vec::with_capacity(batch * spec.output_dim);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        if batch < n {
            order.shuffle(&mut shuffle_rng);
        }
        let mut weighted = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(batch) {
            // Batch statistics of a single row are degenerate.
            if spec.use_batch_norm && chunk.len() < 2 {
                continue;
            }
            xs.clear();
            ys.clear();
            for &i in chunk {
                xs.extend_from_slice(data.inputs[i].as_slice());
                ys.extend_from_slice(data.targets[i].as_slice());
            }
            let m = chunk.len();
            let trace = forward_train(&mut params, &xs, m, &mut dropout_rng);
            let (loss, grads) = backward(&params, &trace, &ys, m);
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::DivergedLoss { epoch });
            }
            adam.step(&mut tensors_mut(&mut params), &grads, lr);
            weighted += loss * m as f64;
            seen += m;
        }
        epoch_losses.push(weighted / seen.max(1) as f64);
    }

    params.set_mode(Mode::Eval);
    let final_loss = mean_squared_error(&params, data)?;
    if !final_loss.is_finite() {
        return Err(Error::DivergedLoss { epoch: cfg.epochs });
    }
    Ok((
        params,
        TrainReport {
            initial_loss,
            final_loss,
            epoch_losses,
        },
    ))
}
