//! ReLU multilayer perceptron with per-layer additive input noise and
//! optional batch normalization on hidden layers.
//!
//! Layer `l` (0-based) reads its input `h_l` at *noise site* `l`:
//!
//! ```text
//! h_0 = x + σ_0·e_0
//! z_l = h_l·W_l + b_l
//! u_l = γ_l·BN(z_l) + β_l      (hidden layers with batch norm; otherwise u_l = z_l)
//! h_{l+1} = relu(u_l) + σ_{l+1}·e_{l+1}
//! logits = z_{M-1}
//! ```
//!
//! Besides the usual forward and reverse passes, two forward-over-reverse
//! passes differentiate the parameter gradient:
//!
//! * [`tangent_grad_wrt_sigma`] pushes the tangent `ḣ_s = e_s` of one noise
//!   level through the recorded computation and returns `∂(∇θ C)/∂σ_s`.
//! * [`noise_sensitivities_along`] pushes a parameter-space direction `v`
//!   and returns `vᵀ·∂(∇θ C)/∂σ_s` for every site at once (by symmetry of the
//!   mixed partials this is `∂/∂σ_s (∇θ C · v)`), at the cost of one tangent
//!   pass for all sites.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{self, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`
    pub w: Tensor,
    pub b: Tensor,
    pub bn: Option<BatchNormParams>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.w.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols()
    }
}

/// Elementary parameters. Gradients and tangents use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// `N(0, 2/fan_in)`
    He,
    /// `N(0, 1/fan_in)`
    LeCun,
}

/// Draws fresh parameters for `layer_sizes = [input, hidden.., classes]`.
pub fn init_params(
    layer_sizes: &[usize],
    scheme: InitScheme,
    batch_norm: bool,
    rng: &mut RngStream,
) -> Result<ModelParams> {
    if layer_sizes.len() < 3 {
        return Err(Error::Config(format!(
            "need input, at least one hidden layer and output sizes, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config(format!(
            "zero-width layer in {layer_sizes:?}"
        )));
    }
    let last = layer_sizes.len() - 2;
    let layers = layer_sizes
        .windows(2)
        .enumerate()
        .map(|(l, pair)| {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let gain = match scheme {
                InitScheme::He => 2.0,
                InitScheme::LeCun => 1.0,
            };
            let mut w = rng.gaussian(&[fan_in, fan_out]);
            w.scale(libm::sqrt(gain / fan_in as f64));
            Layer {
                w,
                b: Tensor::zeros(&[fan_out]),
                bn: (batch_norm && l < last).then(|| BatchNormParams {
                    gamma: Tensor::filled(&[fan_out], 1.0),
                    beta: Tensor::zeros(&[fan_out]),
                }),
            }
        })
        .collect();
    Ok(ModelParams { layers })
}

impl ModelParams {
    /// Number of weight matrices, which is also the number of noise sites.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.layers.iter().map(Layer::fan_in).collect();
        if let Some(last) = self.layers.last() {
            sizes.push(last.fan_out());
        }
        sizes
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.bn.is_some())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: Tensor::zeros_like(&l.w),
                    b: Tensor::zeros_like(&l.b),
                    bn: l.bn.as_ref().map(|bn| BatchNormParams {
                        gamma: Tensor::zeros_like(&bn.gamma),
                        beta: Tensor::zeros_like(&bn.beta),
                    }),
                })
                .collect(),
        }
    }

    /// All tensors in a fixed order: per layer `w, b, [gamma, beta]`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.w);
            out.push(&l.b);
            if let Some(bn) = &l.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_structure(&self, other: &ModelParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    pub fn dot(&self, other: &ModelParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.scale(factor);
        }
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.w.check_finite(&format!("{context}: layer {l} weights"))?;
            layer.b.check_finite(&format!("{context}: layer {l} biases"))?;
            if let Some(bn) = &layer.bn {
                bn.gamma.check_finite(&format!("{context}: layer {l} gamma"))?;
                bn.beta.check_finite(&format!("{context}: layer {l} beta"))?;
            }
        }
        Ok(())
    }

    /// Checks that consecutive layers chain.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Shape {
                    op: "layer chain",
                    lhs: pair[0].w.shape().to_vec(),
                    rhs: pair[1].w.shape().to_vec(),
                });
            }
        }
        for layer in &self.layers {
            if layer.b.len() != layer.fan_out() {
                return Err(Error::Shape {
                    op: "bias",
                    lhs: layer.w.shape().to_vec(),
                    rhs: layer.b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    /// One entry per layer; `None` where the layer has no batch norm.
    pub layers: Vec<Option<RunningStats>>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| {
                    l.bn.as_ref().map(|_| RunningStats {
                        mean: Tensor::zeros(&[l.fan_out()]),
                        var: Tensor::filled(&[l.fan_out()], 1.0),
                    })
                })
                .collect(),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Noise injected at every site; batch norm on batch statistics, running
    /// statistics updated.
    TrainNoisy,
    /// No noise; batch norm on running statistics.
    EvalClean,
    /// No noise; batch norm on the statistics of this batch, running
    /// statistics left untouched.
    EvalBatchStats,
}

#[derive(Debug, Clone)]
pub struct BnTrace {
    pub mean: Tensor,
    pub var: Tensor,
    pub inv_std: Tensor,
    /// Normalized pre-activation before scale and shift.
    pub normalized: Tensor,
    pub batch_stats: bool,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// `a_l`: the clean input before noise. Only kept when noise was injected.
    pub clean_input: Option<Tensor>,
    /// `e_l`, recorded even when `σ_l = 0`.
    pub noise: Option<Tensor>,
    /// `h_l`
    pub input: Tensor,
    /// `z_l`
    pub z: Tensor,
    pub bn: Option<BnTrace>,
    /// `u_l` (ReLU argument); `None` for the output layer or when equal to `z`.
    pub pre_relu: Option<Tensor>,
}

impl LayerTrace {
    pub fn pre_noise(&self) -> &Tensor {
        self.clean_input.as_ref().unwrap_or(&self.input)
    }

    fn relu_arg(&self) -> &Tensor {
        self.pre_relu.as_ref().unwrap_or(&self.z)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub noise_std: Vec<f64>,
    pub layers: Vec<LayerTrace>,
    pub logits: Tensor,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }

    /// Sign pattern of every ReLU argument. The loss gradient is smooth in
    /// any input or parameter only while this pattern stays fixed.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let hidden = self.layers.len().saturating_sub(1);
        self.layers[..hidden]
            .iter()
            .flat_map(|t| t.relu_arg().data().iter().map(|&v| v > 0.0))
            .collect()
    }
}

fn bn_forward(
    z: &Tensor,
    bn: &BatchNormParams,
    stats: &mut RunningStats,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> (Tensor, BnTrace) {
    let (rows, cols) = (z.rows(), z.cols());
    let batch_stats = mode != Mode::EvalClean;
    let (mean, var) = if batch_stats {
        let mean = tensor::column_means(z);
        let mut var = vec![0.0; cols];
        for row in z.data().chunks_exact(cols) {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(mean.data()) {
                let d = x - m;
                *v += d * d;
            }
        }
        let inv_n = 1.0 / rows as f64;
        var.iter_mut().for_each(|v| *v *= inv_n);
        (mean, Tensor::vector(var))
    } else {
        (stats.mean.clone(), stats.var.clone())
    };
    if mode == Mode::TrainNoisy {
        let unbias = if rows > 1 {
            rows as f64 / (rows - 1) as f64
        } else {
            1.0
        };
        for j in 0..cols {
            let rm = &mut stats.mean.data_mut()[j];
            *rm = (1.0 - momentum) * *rm + momentum * mean.data()[j];
            let rv = &mut stats.var.data_mut()[j];
            *rv = (1.0 - momentum) * *rv + momentum * var.data()[j] * unbias;
        }
    }
    let inv_std = Tensor::vector(
        var.data()
            .iter()
            .map(|&v| 1.0 / libm::sqrt(v + eps))
            .collect(),
    );
    let mut normalized = z.clone();
    let mut out = z.clone();
    for (nrow, orow) in normalized
        .data_mut()
        .chunks_exact_mut(cols)
        .zip(out.data_mut().chunks_exact_mut(cols))
    {
        for j in 0..cols {
            let n = (nrow[j] - mean.data()[j]) * inv_std.data()[j];
            nrow[j] = n;
            orow[j] = bn.gamma.data()[j] * n + bn.beta.data()[j];
        }
    }
    (
        out,
        BnTrace {
            mean,
            var,
            inv_std,
            normalized,
            batch_stats,
        },
    )
}

/// Runs the network on a batch.
///
/// `noise_std` holds one standard deviation per noise site (`params.depth()`
/// entries). In [`Mode::TrainNoisy`] a standard normal draw is taken from
/// `rng` for every site, in site order, whatever the level.
pub fn forward(
    params: &ModelParams,
    x: &Tensor,
    noise_std: &[f64],
    mode: Mode,
    rng: Option<&mut RngStream>,
    bn_state: &mut BatchNormState,
) -> Result<(Tensor, ForwardTrace)> {
    let depth = params.depth();
    if x.shape().len() != 2 || x.cols() != params.layers[0].fan_in() {
        return Err(Error::Shape {
            op: "forward input",
            lhs: x.shape().to_vec(),
            rhs: params.layers[0].w.shape().to_vec(),
        });
    }
    if noise_std.len() != depth {
        return Err(Error::Contract(format!(
            "{} noise levels for {depth} noise sites",
            noise_std.len()
        )));
    }
    if bn_state.layers.len() != depth {
        return Err(Error::Contract("batch-norm state does not match model".into()));
    }
    let mut rng = match (mode, rng) {
        (Mode::TrainNoisy, Some(r)) => Some(r),
        (Mode::TrainNoisy, None) => {
            return Err(Error::Contract("noisy forward needs a noise stream".into()))
        }
        _ => None,
    };
    let (momentum, eps) = (bn_state.momentum, bn_state.epsilon);
    let mut layers = Vec::with_capacity(depth);
    let mut current = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let (clean_input, noise, input) = match rng.as_deref_mut() {
            Some(r) => {
                let e = r.gaussian(current.shape());
                let mut h = current.clone();
                h.axpy(noise_std[l], &e);
                (Some(current), Some(e), h)
            }
            None => (None, None, current),
        };
        let mut z = tensor::matmul(&input, &layer.w)?;
        tensor::add_row_vector(&mut z, &layer.b)?;
        z.check_finite(&format!("layer {l} pre-activation"))?;
        let is_output = l + 1 == depth;
        let (bn_trace, pre_relu) = match (&layer.bn, &mut bn_state.layers[l]) {
            (Some(bn), Some(stats)) if !is_output => {
                let (u, t) = bn_forward(&z, bn, stats, mode, momentum, eps);
                u.check_finite(&format!("layer {l} batch norm"))?;
                (Some(t), Some(u))
            }
            (None, None) => (None, None),
            _ => {
                return Err(Error::Contract(format!(
                    "layer {l}: batch-norm parameters and state disagree"
                )))
            }
        };
        current = if is_output {
            Tensor::zeros(&[0])
        } else {
            tensor::relu(pre_relu.as_ref().unwrap_or(&z))
        };
        layers.push(LayerTrace {
            clean_input,
            noise,
            input,
            z,
            bn: bn_trace,
            pre_relu,
        });
    }
    let logits = layers.last().expect("non-empty").z.clone();
    Ok((
        logits.clone(),
        ForwardTrace {
            mode,
            noise_std: noise_std.to_vec(),
            layers,
            logits,
        },
    ))
}

/// Loss applied to the logits. Its gradient seeds the reverse pass and its
/// gradient's tangent seeds the reverse tangent pass.
#[derive(Debug, Clone, Copy)]
pub enum LossHead<'a> {
    /// Mean softmax cross-entropy against class indices.
    SoftmaxXent(&'a [usize]),
    /// Mean over the batch of `½‖z − t‖²`.
    SquaredError(&'a Tensor),
}

impl LossHead<'_> {
    pub fn loss_and_grad(&self, logits: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            LossHead::SoftmaxXent(labels) => tensor::softmax_xent(logits, labels),
            LossHead::SquaredError(targets) => {
                if targets.shape() != logits.shape() {
                    return Err(Error::Shape {
                        op: "squared error",
                        lhs: logits.shape().to_vec(),
                        rhs: targets.shape().to_vec(),
                    });
                }
                let inv_b = 1.0 / logits.rows() as f64;
                let mut grad = logits.clone();
                grad.axpy(-1.0, targets);
                let loss = 0.5 * grad.norm_sq() * inv_b;
                grad.scale(inv_b);
                Ok((loss, grad))
            }
        }
    }

    /// Directional derivative of the logit gradient along `logits_dot`.
    pub fn grad_tangent(&self, logits: &Tensor, logits_dot: &Tensor) -> Tensor {
        let inv_b = 1.0 / logits.rows() as f64;
        match self {
            LossHead::SoftmaxXent(_) => {
                let p = tensor::softmax(logits);
                let c = logits.cols();
                let mut out = Tensor::zeros_like(logits);
                for ((o, pr), zr) in out
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(p.data().chunks_exact(c))
                    .zip(logits_dot.data().chunks_exact(c))
                {
                    let mean: f64 = pr.iter().zip(zr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        o[j] = pr[j] * (zr[j] - mean) * inv_b;
                    }
                }
                out
            }
            LossHead::SquaredError(_) => {
                let mut out = logits_dot.clone();
                out.scale(inv_b);
                out
            }
        }
    }
}

/// Reverse-pass results kept for the tangent passes.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub grads: ModelParams,
    /// `∂C/∂z_l` per layer.
    pub deltas: Vec<Tensor>,
    /// `∂C/∂h_l` per noise site; site 0 is left empty.
    pub input_grads: Vec<Tensor>,
}

fn check_trace(trace: &ForwardTrace, params: &ModelParams) -> Result<()> {
    if trace.layers.len() != params.depth()
        || trace
            .layers
            .iter()
            .zip(&params.layers)
            .any(|(t, p)| t.z.cols() != p.fan_out() || t.bn.is_some() != p.bn.is_some())
    {
        return Err(Error::Contract("trace does not match parameters".into()));
    }
    Ok(())
}

/// Gradient of `C` w.r.t. `z` from the gradient w.r.t. `u` through batch norm.
/// Also accumulates the scale and shift gradients.
fn bn_backward(
    du: &Tensor,
    t: &BnTrace,
    gamma: &Tensor,
    dgamma: &mut Tensor,
    dbeta: &mut Tensor,
) -> Tensor {
    let (rows, cols) = (du.rows(), du.cols());
    let mut dz = Tensor::zeros_like(du);
    let mut m1 = vec![0.0; cols];
    let mut m2 = vec![0.0; cols];
    for (r, (dur, nr)) in du
        .data()
        .chunks_exact(cols)
        .zip(t.normalized.data().chunks_exact(cols))
        .enumerate()
    {
        let dzr = &mut dz.data_mut()[r * cols..(r + 1) * cols];
        for j in 0..cols {
            dgamma.data_mut()[j] += dur[j] * nr[j];
            dbeta.data_mut()[j] += dur[j];
            let dn = dur[j] * gamma.data()[j];
            dzr[j] = dn;
            m1[j] += dn;
            m2[j] += dn * nr[j];
        }
    }
    if !t.batch_stats {
        for row in dz.data_mut().chunks_exact_mut(cols) {
            for (v, s) in row.iter_mut().zip(t.inv_std.data()) {
                *v *= s;
            }
        }
        return dz;
    }
    let inv_n = 1.0 / rows as f64;
    m1.iter_mut().for_each(|v| *v *= inv_n);
    m2.iter_mut().for_each(|v| *v *= inv_n);
    for (row, nr) in dz
        .data_mut()
        .chunks_exact_mut(cols)
        .zip(t.normalized.data().chunks_exact(cols))
    {
        for j in 0..cols {
            row[j] = t.inv_std.data()[j] * (row[j] - m1[j] - nr[j] * m2[j]);
        }
    }
    dz
}

/// Exact reverse-mode gradient of the loss (data term only).
pub fn backward(
    trace: &ForwardTrace,
    params: &ModelParams,
    grad_logits: &Tensor,
) -> Result<Backprop> {
    check_trace(trace, params)?;
    if grad_logits.shape() != trace.logits.shape() {
        return Err(Error::Shape {
            op: "backward",
            lhs: trace.logits.shape().to_vec(),
            rhs: grad_logits.shape().to_vec(),
        });
    }
    let depth = params.depth();
    let mut grads = params.zeros_like();
    let mut deltas = vec![Tensor::zeros(&[0]); depth];
    let mut input_grads = vec![Tensor::zeros(&[0]); depth];
    let mut delta = grad_logits.clone();
    for l in (0..depth).rev() {
        let t = &trace.layers[l];
        grads.layers[l].w = tensor::matmul_tn(&t.input, &delta)?;
        grads.layers[l].b = tensor::column_sums(&delta);
        if l > 0 {
            let dh = tensor::matmul_nt(&delta, &params.layers[l].w)?;
            let below = &trace.layers[l - 1];
            let du = tensor::relu_backward(below.relu_arg(), &dh)?;
            let next = match (&below.bn, &params.layers[l - 1].bn) {
                (Some(bt), Some(bp)) => {
                    let g = &mut grads.layers[l - 1];
                    let gbn = g.bn.as_mut().expect("same structure");
                    bn_backward(&du, bt, &bp.gamma, &mut gbn.gamma, &mut gbn.beta)
                }
                _ => du,
            };
            input_grads[l] = dh;
            deltas[l] = core::mem::replace(&mut delta, next);
        } else {
            deltas[l] = core::mem::replace(&mut delta, Tensor::zeros(&[0]));
        }
    }
    grads.check_finite("parameter gradient")?;
    Ok(Backprop {
        grads,
        deltas,
        input_grads,
    })
}

/// `∂C/∂h_0`, which the plain backward pass skips.
pub fn input_gradient(params: &ModelParams, backprop: &Backprop) -> Result<Tensor> {
    tensor::matmul_nt(&backprop.deltas[0], &params.layers[0].w)
}

/// First derivative of the loss w.r.t. each noise level:
/// `∂C/∂σ_l = Σ (∂C/∂h_l) ⊙ e_l`.
pub fn noise_gradients(
    trace: &ForwardTrace,
    params: &ModelParams,
    backprop: &Backprop,
) -> Result<Vec<f64>> {
    let noisy = |l: usize| {
        trace.layers[l]
            .noise
            .as_ref()
            .ok_or_else(|| Error::Contract("trace has no noise record".into()))
    };
    let mut out = Vec::with_capacity(params.depth());
    for l in 0..params.depth() {
        let dh = if l == 0 {
            input_gradient(params, backprop)?
        } else {
            backprop.input_grads[l].clone()
        };
        out.push(dh.dot(noisy(l)?));
    }
    Ok(out)
}

/// Forward tangent of one batch-norm layer in batch-statistics mode.
/// Returns `(normalized_dot, inv_std_dot)`.
fn bn_forward_tangent(z_dot: &Tensor, t: &BnTrace) -> (Tensor, Vec<f64>) {
    let (rows, cols) = (z_dot.rows(), z_dot.cols());
    let inv_n = 1.0 / rows as f64;
    let mean_dot = tensor::column_means(z_dot);
    // var_dot = 2·mean((z − μ)·ż) with z − μ = normalized / inv_std
    let mut cov = vec![0.0; cols];
    for (zr, nr) in z_dot
        .data()
        .chunks_exact(cols)
        .zip(t.normalized.data().chunks_exact(cols))
    {
        for j in 0..cols {
            cov[j] += nr[j] * zr[j];
        }
    }
    let inv_std_dot: Vec<f64> = (0..cols)
        .map(|j| {
            let s = t.inv_std.data()[j];
            let var_dot = 2.0 * cov[j] * inv_n / s;
            -0.5 * s * s * s * var_dot
        })
        .collect();
    let mut n_dot = z_dot.clone();
    for (row, nr) in n_dot
        .data_mut()
        .chunks_exact_mut(cols)
        .zip(t.normalized.data().chunks_exact(cols))
    {
        for j in 0..cols {
            let s = t.inv_std.data()[j];
            row[j] = (row[j] - mean_dot.data()[j]) * s + nr[j] * inv_std_dot[j] / s;
        }
    }
    (n_dot, inv_std_dot)
}

/// Tangent of [`bn_backward`]'s output.
///
/// `du`/`du_dot` are the gradient w.r.t. the BN output and its tangent,
/// `gamma_dot` the tangent of the scale. Accumulates the tangents of the scale
/// and shift gradients into `dgamma_dot`/`dbeta_dot` when given.
#[allow(clippy::too_many_arguments)]
fn bn_backward_tangent(
    du: &Tensor,
    du_dot: &Tensor,
    t: &BnTrace,
    n_dot: Option<&Tensor>,
    inv_std_dot: Option<&[f64]>,
    gamma: &Tensor,
    gamma_dot: Option<&Tensor>,
    mut param_dots: Option<(&mut Tensor, &mut Tensor)>,
) -> Tensor {
    let (rows, cols) = (du.rows(), du.cols());
    let inv_n = 1.0 / rows as f64;
    let g = gamma.data();
    let mut dn = vec![0.0; rows * cols];
    let mut dn_dot = vec![0.0; rows * cols];
    let (mut m1, mut m2, mut m1_dot, mut m2_dot) =
        (vec![0.0; cols], vec![0.0; cols], vec![0.0; cols], vec![0.0; cols]);
    for r in 0..rows {
        let span = r * cols..(r + 1) * cols;
        let dur = &du.data()[span.clone()];
        let dudr = &du_dot.data()[span.clone()];
        let nr = &t.normalized.data()[span.clone()];
        for j in 0..cols {
            let i = r * cols + j;
            let nd = n_dot.map_or(0.0, |v| v.data()[i]);
            let d = dur[j] * g[j];
            let dd = dudr[j] * g[j] + gamma_dot.map_or(0.0, |gd| dur[j] * gd.data()[j]);
            dn[i] = d;
            dn_dot[i] = dd;
            m1[j] += d;
            m2[j] += d * nr[j];
            m1_dot[j] += dd;
            m2_dot[j] += dd * nr[j] + d * nd;
            if let Some((dg, db)) = param_dots.as_mut() {
                dg.data_mut()[j] += dudr[j] * nr[j] + dur[j] * nd;
                db.data_mut()[j] += dudr[j];
            }
        }
    }
    for v in m1
        .iter_mut()
        .chain(m2.iter_mut())
        .chain(m1_dot.iter_mut())
        .chain(m2_dot.iter_mut())
    {
        *v *= inv_n;
    }
    let mut out = Tensor::zeros_like(du);
    for r in 0..rows {
        for j in 0..cols {
            let i = r * cols + j;
            let s = t.inv_std.data()[j];
            let sd = inv_std_dot.map_or(0.0, |v| v[j]);
            let nr = t.normalized.data()[i];
            let nd = n_dot.map_or(0.0, |v| v.data()[i]);
            let core = dn[i] - m1[j] - nr * m2[j];
            let core_dot = dn_dot[i] - m1_dot[j] - nd * m2[j] - nr * m2_dot[j];
            out.data_mut()[i] = sd * core + s * core_dot;
        }
    }
    out
}

fn mask_like(arg: &Tensor, v: &mut Tensor) {
    for (o, &a) in v.data_mut().iter_mut().zip(arg.data()) {
        if a <= 0.0 {
            *o = 0.0;
        }
    }
}

/// `∂(∇θ C)/∂σ_site` for the noise draw recorded in `trace`.
///
/// Forward-over-reverse: the tangent `ḣ_site = e_site` is pushed through the
/// layers above the site (including batch statistics), then through the
/// recorded reverse pass. The returned tangent has the shape of the
/// parameters. The L2 penalty does not depend on σ, so this is also the
/// tangent of the full regularized gradient.
pub fn tangent_grad_wrt_sigma(
    trace: &ForwardTrace,
    params: &ModelParams,
    backprop: &Backprop,
    head: &LossHead,
    site: usize,
) -> Result<ModelParams> {
    check_trace(trace, params)?;
    let depth = params.depth();
    if site >= depth {
        return Err(Error::Input(format!(
            "noise site {site} out of range for {depth} sites"
        )));
    }
    if trace.mode != Mode::TrainNoisy {
        return Err(Error::Contract(
            "sigma tangent needs a noisy training trace".into(),
        ));
    }
    let seed = trace.layers[site]
        .noise
        .clone()
        .ok_or_else(|| Error::Contract("trace has no noise record".into()))?;

    // forward tangents for layers at and above the site
    let mut h_dots: Vec<Option<Tensor>> = vec![None; depth];
    let mut bn_dots: Vec<Option<(Tensor, Vec<f64>)>> = vec![None; depth];
    h_dots[site] = Some(seed);
    let mut logits_dot = None;
    for l in site..depth {
        let t = &trace.layers[l];
        let z_dot = tensor::matmul(h_dots[l].as_ref().expect("set"), &params.layers[l].w)?;
        if l + 1 == depth {
            logits_dot = Some(z_dot);
            break;
        }
        let mut u_dot = match (&t.bn, &params.layers[l].bn) {
            (Some(bt), Some(bp)) => {
                let (n_dot, s_dot) = bn_forward_tangent(&z_dot, bt);
                let mut u = n_dot.clone();
                let c = u.cols();
                for row in u.data_mut().chunks_exact_mut(c) {
                    for (v, g) in row.iter_mut().zip(bp.gamma.data()) {
                        *v *= g;
                    }
                }
                bn_dots[l] = Some((n_dot, s_dot));
                u
            }
            _ => z_dot,
        };
        mask_like(t.relu_arg(), &mut u_dot);
        h_dots[l + 1] = Some(u_dot);
    }
    let logits_dot = logits_dot.expect("output layer reached");
    let mut delta_dot = head.grad_tangent(&trace.logits, &logits_dot);

    let mut out = params.zeros_like();
    for l in (0..depth).rev() {
        let t = &trace.layers[l];
        let mut gw = tensor::matmul_tn(&t.input, &delta_dot)?;
        if let Some(hd) = &h_dots[l] {
            gw.add_assign(&tensor::matmul_tn(hd, &backprop.deltas[l])?);
        }
        out.layers[l].w = gw;
        out.layers[l].b = tensor::column_sums(&delta_dot);
        if l == 0 {
            break;
        }
        let dh_dot = tensor::matmul_nt(&delta_dot, &params.layers[l].w)?;
        let below = &trace.layers[l - 1];
        let mut du_dot = dh_dot;
        mask_like(below.relu_arg(), &mut du_dot);
        delta_dot = match (&below.bn, &params.layers[l - 1].bn) {
            (Some(bt), Some(bp)) => {
                let mut du = backprop.input_grads[l].clone();
                mask_like(below.relu_arg(), &mut du);
                let (n_dot, s_dot) = match &bn_dots[l - 1] {
                    Some((n, s)) => (Some(n), Some(s.as_slice())),
                    None => (None, None),
                };
                let obn = out.layers[l - 1].bn.as_mut().expect("same structure");
                bn_backward_tangent(
                    &du,
                    &du_dot,
                    bt,
                    n_dot,
                    s_dot,
                    &bp.gamma,
                    None,
                    Some((&mut obn.gamma, &mut obn.beta)),
                )
            }
            _ => du_dot,
        };
    }
    out.check_finite("sigma tangent")?;
    Ok(out)
}

/// `vᵀ·∂(∇θ C)/∂σ_l` for every noise site `l ≥ lowest_site`, in one
/// forward-over-reverse pass along the parameter direction `v`.
///
/// Uses `vᵀ·∂_σ ∇θ C = ∂_θ(∂C/∂σ)·v` with `∂C/∂σ_l = (∂C/∂h_l)·e_l`: the
/// tangent of `∂C/∂h_l` along `v` is contracted with the recorded noise.
/// Sites below `lowest_site` are reported as zero and their share of the
/// reverse pass is skipped.
pub fn noise_sensitivities_along(
    trace: &ForwardTrace,
    params: &ModelParams,
    backprop: &Backprop,
    head: &LossHead,
    direction: &ModelParams,
    lowest_site: usize,
) -> Result<Vec<f64>> {
    check_trace(trace, params)?;
    if !direction.same_structure(params) {
        return Err(Error::Contract("direction does not match parameters".into()));
    }
    if trace.mode != Mode::TrainNoisy {
        return Err(Error::Contract(
            "noise sensitivities need a noisy training trace".into(),
        ));
    }
    let depth = params.depth();
    let mut bn_dots: Vec<Option<(Tensor, Vec<f64>)>> = vec![None; depth];
    let mut h_dot: Option<Tensor> = None;
    let mut logits_dot = None;
    #[allow(clippy::needless_range_loop)]
    for l in 0..depth {
        let t = &trace.layers[l];
        let v = &direction.layers[l];
        let mut z_dot = tensor::matmul(&t.input, &v.w)?;
        if let Some(hd) = &h_dot {
            z_dot.add_assign(&tensor::matmul(hd, &params.layers[l].w)?);
        }
        tensor::add_row_vector(&mut z_dot, &v.b)?;
        if l + 1 == depth {
            logits_dot = Some(z_dot);
            break;
        }
        let mut u_dot = match (&t.bn, &params.layers[l].bn, &v.bn) {
            (Some(bt), Some(bp), Some(vbn)) => {
                let (n_dot, s_dot) = bn_forward_tangent(&z_dot, bt);
                let mut u = n_dot.clone();
                let c = u.cols();
                for (row, nr) in u
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(bt.normalized.data().chunks_exact(c))
                {
                    for j in 0..c {
                        row[j] = bp.gamma.data()[j] * row[j]
                            + vbn.gamma.data()[j] * nr[j]
                            + vbn.beta.data()[j];
                    }
                }
                bn_dots[l] = Some((n_dot, s_dot));
                u
            }
            _ => z_dot,
        };
        mask_like(t.relu_arg(), &mut u_dot);
        h_dot = Some(u_dot);
    }
    let logits_dot = logits_dot.expect("output layer reached");
    let mut delta_dot = head.grad_tangent(&trace.logits, &logits_dot);

    let mut out = vec![0.0; depth];
    for l in (lowest_site..depth).rev() {
        let t = &trace.layers[l];
        let mut dh_dot = tensor::matmul_nt(&delta_dot, &params.layers[l].w)?;
        dh_dot.add_assign(&tensor::matmul_nt(&backprop.deltas[l], &direction.layers[l].w)?);
        let e = t
            .noise
            .as_ref()
            .ok_or_else(|| Error::Contract("trace has no noise record".into()))?;
        out[l] = dh_dot.dot(e);
        if l == lowest_site || l == 0 {
            break;
        }
        let below = &trace.layers[l - 1];
        let mut du_dot = dh_dot;
        mask_like(below.relu_arg(), &mut du_dot);
        delta_dot = match (&below.bn, &params.layers[l - 1].bn, &direction.layers[l - 1].bn) {
            (Some(bt), Some(bp), Some(vbn)) => {
                let mut du = backprop.input_grads[l].clone();
                mask_like(below.relu_arg(), &mut du);
                let (n_dot, s_dot) = match &bn_dots[l - 1] {
                    Some((n, s)) => (Some(n), Some(s.as_slice())),
                    None => (None, None),
                };
                bn_backward_tangent(
                    &du,
                    &du_dot,
                    bt,
                    n_dot,
                    s_dot,
                    &bp.gamma,
                    Some(&vbn.gamma),
                    None,
                )
            }
            _ => du_dot,
        };
    }
    if let Some(bad) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("noise sensitivity at site {bad}")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_scalar(w: f64) -> ModelParams {
        ModelParams {
            layers: vec![Layer {
                w: Tensor::new(&[1, 1], vec![w]).unwrap(),
                b: Tensor::zeros(&[1]),
                bn: None,
            }],
        }
    }

    #[test]
    fn init_shapes_and_determinism() {
        let p = init_params(&[4, 3, 2], InitScheme::He, false, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(p.layers[0].w.shape(), &[4, 3]);
        assert_eq!(p.layers[1].w.shape(), &[3, 2]);
        assert_eq!(p.layers[0].b.shape(), &[3]);
        assert_eq!(p.layers[1].b.shape(), &[2]);
        let q = init_params(&[4, 3, 2], InitScheme::He, false, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(p, q);
        assert!(init_params(&[], InitScheme::He, false, &mut RngStream::new(1, 1)).is_err());
        assert!(init_params(&[4, 2], InitScheme::He, false, &mut RngStream::new(1, 1)).is_err());
    }

    #[test]
    fn he_init_scale() {
        let p = init_params(&[200, 100, 2], InitScheme::He, true, &mut RngStream::new(3, 1))
            .unwrap();
        let w = p.layers[0].w.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = libm::sqrt(w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n);
        let target = libm::sqrt(2.0 / 200.0);
        assert!((std / target - 1.0).abs() < 0.05, "{std} vs {target}");
        let bn = p.layers[0].bn.as_ref().unwrap();
        assert!(bn.gamma.data().iter().all(|&g| g == 1.0));
        assert!(p.layers[1].bn.is_none());
    }

    #[test]
    fn scalar_noise_forward() {
        // h = 1 + 2·e; drawing e from a stream, then checking h = x + σe
        let p = linear_scalar(1.0);
        let mut bn = BatchNormState::new(&p);
        let x = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let mut rng = RngStream::new(4, 2);
        let (logits, trace) =
            forward(&p, &x, &[2.0], Mode::TrainNoisy, Some(&mut rng), &mut bn).unwrap();
        let e = trace.layers[0].noise.as_ref().unwrap().data()[0];
        assert_eq!(logits.data()[0], 1.0 + 2.0 * e);
        assert_eq!(trace.layers[0].pre_noise().data()[0], 1.0);
    }

    #[test]
    fn batch_norm_two_point_normalization() {
        let p = ModelParams {
            layers: vec![
                Layer {
                    w: Tensor::new(&[1, 1], vec![1.0]).unwrap(),
                    b: Tensor::zeros(&[1]),
                    bn: Some(BatchNormParams {
                        gamma: Tensor::filled(&[1], 1.0),
                        beta: Tensor::zeros(&[1]),
                    }),
                },
                Layer {
                    w: Tensor::new(&[1, 1], vec![1.0]).unwrap(),
                    b: Tensor::zeros(&[1]),
                    bn: None,
                },
            ],
        };
        let mut bn = BatchNormState::new(&p);
        let x = Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap();
        let (_, trace) = forward(
            &p,
            &x,
            &[0.0, 0.0],
            Mode::EvalBatchStats,
            None,
            &mut bn,
        )
        .unwrap();
        let n = trace.layers[0].bn.as_ref().unwrap().normalized.data();
        let expected = 1.0 / libm::sqrt(1.0 + BN_EPSILON);
        assert!((n[0] + expected).abs() < 1e-15);
        assert!((n[1] - expected).abs() < 1e-15);
        // EvalBatchStats does not touch running statistics
        assert_eq!(bn, BatchNormState::new(&p));
    }

    #[test]
    fn scalar_sigma_tangent_matches_closed_form() {
        // C = ½(w(x+σe) − t)², w=1, x=1, t=0, e=0.5, σ=0 → ∂(∂C/∂w)/∂σ = 1.0
        let p = linear_scalar(1.0);
        let x = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let target = Tensor::new(&[1, 1], vec![0.0]).unwrap();
        let e = Tensor::new(&[1, 1], vec![0.5]).unwrap();
        let trace = ForwardTrace {
            mode: Mode::TrainNoisy,
            noise_std: vec![0.0],
            layers: vec![LayerTrace {
                clean_input: Some(x.clone()),
                noise: Some(e),
                input: x.clone(),
                z: x.clone(),
                bn: None,
                pre_relu: None,
            }],
            logits: x.clone(),
        };
        let head = LossHead::SquaredError(&target);
        let (_, g) = head.loss_and_grad(&trace.logits).unwrap();
        let bp = backward(&trace, &p, &g).unwrap();
        assert_eq!(bp.grads.layers[0].w.data()[0], 1.0);
        let tan = tangent_grad_wrt_sigma(&trace, &p, &bp, &head, 0).unwrap();
        assert_eq!(tan.layers[0].w.data()[0], 1.0);
        assert!(tangent_grad_wrt_sigma(&trace, &p, &bp, &head, 1).is_err());
    }
}
