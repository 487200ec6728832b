//! One-step hypergradients `G_i = (∇θ C2)ᵀ ∂(∇θ C̃1)/∂λ_i` and a central
//! finite-difference oracle for them.
//!
//! Elementary updates descend, `θ ← θ − η1·∇θ C̃1`, so
//! `∂C2(θ_next)/∂λ_i = −η1·G_i` and the hyperparameter update ascends along
//! `G`: `λ ← project(λ + η2·G)`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::network::{self, Backprop, BatchNormState, ForwardTrace, LossHead, Mode, ModelParams};
use crate::regularization::{self, Families, HyperIndex, HyperParams};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// How noise hypergradients are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseRoute {
    /// One tangent pass along `∇θ C2` serving every noise site.
    Joint,
    /// One `σ`-tangent of the full parameter gradient per site, dotted with
    /// `∇θ C2`. Also yields the tangent norms for the orthogonality
    /// diagnostic.
    PerSite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperGradient {
    pub step: u64,
    /// Per-layer `G`; entries of untuned families are zero.
    pub per_layer: HyperParams,
    /// `G` in the layout of the hyperparameters it updates.
    pub values: HyperParams,
    /// `‖∇θ C2‖`
    pub g2_norm: f64,
    /// `‖∂∇θC̃1/∂λ_i‖` in `per_layer.indices()` order, where computed.
    pub direction_norms: Vec<Option<f64>>,
}

impl HyperGradient {
    /// Cosine between `∇θ C2` and `∂∇θC̃1/∂λ_i`; zero exactly when the two
    /// are orthogonal, which is where the hyper-update stalls.
    pub fn cosines(&self) -> Vec<Option<f64>> {
        self.per_layer
            .indices()
            .into_iter()
            .zip(&self.direction_norms)
            .map(|(ix, n)| {
                n.map(|n| {
                    let denom = n * self.g2_norm;
                    if denom > 0.0 {
                        self.per_layer.get(ix) / denom
                    } else {
                        0.0
                    }
                })
            })
            .collect()
    }
}

/// `Σ_{j ∈ W_layer} g2_j·θ_j`: the mixed derivative of the L2 term w.r.t.
/// `λ_layer` is the weight itself, so no extra pass is needed.
pub fn hypergrad_l2(g2: &ModelParams, params: &ModelParams, layer: usize) -> Result<f64> {
    if !g2.same_structure(params) {
        return Err(Error::Contract("validation gradient does not match parameters".into()));
    }
    let p = params
        .layers
        .get(layer)
        .ok_or_else(|| Error::Input(format!("layer {layer} out of range")))?;
    Ok(g2.layers[layer].w.dot(&p.w))
}

/// `g2 · ∂(∇θ C̃1)/∂σ_site` for the training batch and noise draw in `trace`.
pub fn hypergrad_noise(
    g2: &ModelParams,
    trace: &ForwardTrace,
    params: &ModelParams,
    backprop: &Backprop,
    head: &LossHead,
    site: usize,
) -> Result<f64> {
    Ok(hypergrad_noise_with_norm(g2, trace, params, backprop, head, site)?.0)
}

fn hypergrad_noise_with_norm(
    g2: &ModelParams,
    trace: &ForwardTrace,
    params: &ModelParams,
    backprop: &Backprop,
    head: &LossHead,
    site: usize,
) -> Result<(f64, f64)> {
    if !g2.same_structure(params) {
        return Err(Error::Contract("validation gradient does not match parameters".into()));
    }
    let tangent = network::tangent_grad_wrt_sigma(trace, params, backprop, head, site)?;
    Ok((g2.dot(&tangent), tangent.norm()))
}

/// Every requested noise hypergradient from a single tangent pass along `g2`.
pub fn hypergrad_noise_joint(
    g2: &ModelParams,
    trace: &ForwardTrace,
    params: &ModelParams,
    backprop: &Backprop,
    head: &LossHead,
    lowest_site: usize,
) -> Result<Vec<f64>> {
    network::noise_sensitivities_along(trace, params, backprop, head, g2, lowest_site)
}

/// Full hypergradient for the tuned families.
#[allow(clippy::too_many_arguments)]
pub fn compute(
    step: u64,
    g2: &ModelParams,
    params: &ModelParams,
    hypers: &HyperParams,
    families: Families,
    trace: &ForwardTrace,
    backprop: &Backprop,
    head: &LossHead,
    route: NoiseRoute,
) -> Result<HyperGradient> {
    let depth = params.depth();
    hypers.check_depth(depth)?;
    let mut per_layer = hypers.per_layer_view(depth)?.zeros_like();
    let mut norms: Vec<Option<f64>> = alloc::vec![None; 2 * depth];

    if families.l2 {
        for l in 0..depth {
            per_layer.l2[l] = hypergrad_l2(g2, params, l)?;
            norms[depth + l] = Some(libm::sqrt(params.layers[l].w.norm_sq()));
        }
    }
    if families.any_noise() {
        let sites: Vec<usize> = (0..depth).filter(|&s| families.noise_site(s)).collect();
        match route {
            NoiseRoute::Joint => {
                let lowest = sites[0];
                let all = hypergrad_noise_joint(g2, trace, params, backprop, head, lowest)?;
                for &s in &sites {
                    per_layer.noise_std[s] = all[s];
                }
            }
            NoiseRoute::PerSite => {
                for &s in &sites {
                    let (g, n) = hypergrad_noise_with_norm(g2, trace, params, backprop, head, s)?;
                    per_layer.noise_std[s] = g;
                    norms[s] = Some(n);
                }
            }
        }
    }
    if !per_layer.is_finite() {
        return Err(Error::NonFinite(format!("hypergradient at step {step}")));
    }
    let values = regularization::to_layout(&per_layer, hypers.layout)?;
    Ok(HyperGradient {
        step,
        per_layer,
        values,
        g2_norm: g2.norm(),
        direction_norms: norms,
    })
}

/// Central difference `[f(λ_i + ε) − f(λ_i − ε)] / 2ε`.
pub fn fd_oracle<F>(mut f: F, hypers: &HyperParams, index: HyperIndex, eps: f64) -> Result<f64>
where
    F: FnMut(&HyperParams) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Input(format!("finite-difference step {eps} must be positive")));
    }
    let base = hypers.get(index);
    let mut plus = hypers.clone();
    plus.set(index, base + eps);
    let mut minus = hypers.clone();
    minus.set(index, base - eps);
    Ok((f(&plus)? - f(&minus)?) / (2.0 * eps))
}

/// A training batch together with the random state needed to replay its
/// noisy forward pass exactly.
#[derive(Debug, Clone)]
pub struct ReplayBatch<'a> {
    pub x: &'a Tensor,
    pub labels: &'a [usize],
    /// Noise stream positioned just before the batch's draws.
    pub noise: RngStream,
    /// Batch-norm state before the batch.
    pub bn_state: BatchNormState,
}

/// Noisy forward and backward on a replayed batch. Returns the trace, the
/// reverse pass and the regularized gradient `∇θ C̃1(θ | λ)`. Negative
/// entries of `λ` are evaluated as written.
pub fn replay_gradient(
    params: &ModelParams,
    hypers: &HyperParams,
    batch: &ReplayBatch,
) -> Result<(ForwardTrace, Backprop, ModelParams)> {
    let view = hypers.per_layer_view(params.depth())?;
    let mut rng = batch.noise.clone();
    let mut bn = batch.bn_state.clone();
    let (logits, trace) = network::forward(
        params,
        batch.x,
        &view.noise_std,
        Mode::TrainNoisy,
        Some(&mut rng),
        &mut bn,
    )?;
    let (_, grad_logits) = LossHead::SoftmaxXent(batch.labels).loss_and_grad(&logits)?;
    let bp = network::backward(&trace, params, &grad_logits)?;
    let mut grad = bp.grads.clone();
    // no feasibility check: a central stencil around λ = 0 steps below zero
    for ((g, layer), &lambda) in grad.layers.iter_mut().zip(&params.layers).zip(&view.l2) {
        g.w.axpy(lambda, &layer.w);
    }
    Ok((trace, bp, grad))
}

/// `g2ᵀ ∇θ C̃1(θ | λ)` with all randomness replayed: the function whose
/// `λ`-derivative is the hypergradient.
pub fn gradient_alignment(
    params: &ModelParams,
    hypers: &HyperParams,
    batch: &ReplayBatch,
    g2: &ModelParams,
) -> Result<f64> {
    let (_, _, grad) = replay_gradient(params, hypers, batch)?;
    Ok(g2.dot(&grad))
}

/// Layout-aware analytic hypergradient on a replayed batch, for oracle
/// comparisons.
pub fn analytic_on_replay(
    params: &ModelParams,
    hypers: &HyperParams,
    families: Families,
    batch: &ReplayBatch,
    g2: &ModelParams,
    route: NoiseRoute,
) -> Result<HyperGradient> {
    let (trace, bp, _) = replay_gradient(params, hypers, batch)?;
    compute(
        0,
        g2,
        params,
        hypers,
        families,
        &trace,
        &bp,
        &LossHead::SoftmaxXent(batch.labels),
        route,
    )
}

/// Validation gradient `∇θ C2` of the unregularized clean model.
pub fn validation_gradient(
    params: &ModelParams,
    x: &Tensor,
    labels: &[usize],
    bn_state: &BatchNormState,
    mode: Mode,
) -> Result<(f64, ModelParams)> {
    if mode == Mode::TrainNoisy {
        return Err(Error::Contract("validation gradient uses a clean pass".into()));
    }
    let depth = params.depth();
    let mut bn = bn_state.clone();
    let (logits, trace) =
        network::forward(params, x, &alloc::vec![0.0; depth], mode, None, &mut bn)?;
    let (loss, grad_logits) = LossHead::SoftmaxXent(labels).loss_and_grad(&logits)?;
    Ok((loss, network::backward(&trace, params, &grad_logits)?.grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, InitScheme, Layer};
    use crate::rng::streams;

    #[test]
    fn l2_closed_form() {
        let w = Tensor::new(&[2, 1], alloc::vec![2.0, -1.0]).unwrap();
        let p = ModelParams {
            layers: alloc::vec![Layer { w: w.clone(), b: Tensor::zeros(&[1]), bn: None }],
        };
        let mut g2 = p.zeros_like();
        g2.layers[0].w = Tensor::new(&[2, 1], alloc::vec![0.5, 0.5]).unwrap();
        assert_eq!(hypergrad_l2(&g2, &p, 0).unwrap(), 0.5);
        let zero = p.zeros_like();
        assert_eq!(hypergrad_l2(&g2, &zero, 0).unwrap(), 0.0);
        assert!(hypergrad_l2(&g2, &p, 1).is_err());
    }

    #[test]
    fn oracle_on_simple_functions() {
        let h = HyperParams::per_layer(alloc::vec![3.0], alloc::vec![0.0]);
        let sq = fd_oracle(|h| Ok(h.noise_std[0] * h.noise_std[0]), &h, HyperIndex::Noise(0), 1e-3)
            .unwrap();
        assert!((sq - 6.0).abs() < 1e-9);
        let c = fd_oracle(|_| Ok(4.2), &h, HyperIndex::Noise(0), 1e-3).unwrap();
        assert_eq!(c, 0.0);
        assert!(fd_oracle(|_| Ok(0.0), &h, HyperIndex::Noise(0), 0.0).is_err());
    }

    fn setup(bn: bool, seed: u64) -> (ModelParams, Tensor, alloc::vec::Vec<usize>, ModelParams, BatchNormState) {
        let mut rng = RngStream::new(seed, streams::HARNESS);
        let p = init_params(&[6, 5, 4, 3], InitScheme::He, bn, &mut rng).unwrap();
        let x = rng.gaussian(&[8, 6]);
        let labels: alloc::vec::Vec<usize> = (0..8).map(|i| i % 3).collect();
        let mut g2 = p.clone();
        for t in g2.tensors_mut() {
            *t = rng.gaussian(t.shape());
        }
        let bn_state = BatchNormState::new(&p);
        (p, x, labels, g2, bn_state)
    }

    #[test]
    fn zero_validation_gradient_gives_zero() {
        let (p, x, labels, _, bn_state) = setup(false, 1);
        let batch = ReplayBatch { x: &x, labels: &labels, noise: RngStream::new(1, 2), bn_state };
        let h = HyperParams::per_layer(alloc::vec![0.1; 3], alloc::vec![0.0; 3]);
        let fam = Families { input_noise: true, hidden_noise: true, l2: true };
        let zero = p.zeros_like();
        let g = analytic_on_replay(&p, &h, fam, &batch, &zero, NoiseRoute::PerSite).unwrap();
        assert!(g.per_layer.noise_std.iter().chain(&g.per_layer.l2).all(|&v| v == 0.0));
    }

    #[test]
    fn joint_and_per_site_routes_agree() {
        for bn in [false, true] {
            let (p, x, labels, g2, bn_state) = setup(bn, 7);
            let batch = ReplayBatch { x: &x, labels: &labels, noise: RngStream::new(3, 2), bn_state };
            let h = HyperParams::per_layer(alloc::vec![0.2, 0.0, 0.3], alloc::vec![0.0; 3]);
            let fam = Families { input_noise: true, hidden_noise: true, l2: false };
            let a = analytic_on_replay(&p, &h, fam, &batch, &g2, NoiseRoute::PerSite).unwrap();
            let b = analytic_on_replay(&p, &h, fam, &batch, &g2, NoiseRoute::Joint).unwrap();
            for (x, y) in a.per_layer.noise_std.iter().zip(&b.per_layer.noise_std) {
                assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0), "bn={bn}: {x} vs {y}");
            }
        }
    }
}
