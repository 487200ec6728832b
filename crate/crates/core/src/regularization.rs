//! Regularization hyperparameters: per-site noise levels and per-matrix L2
//! strengths, in tied or per-layer layout.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::network::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// One input-noise level, one level shared by all hidden sites and one
    /// L2 strength shared by all weight matrices.
    Tied,
    /// One value per noise site and per weight matrix.
    PerLayer,
}

/// Hyperparameter values, or anything with the same layout (hypergradients).
///
/// Tied: `noise_std = [input, hidden]`, `l2 = [shared]`.
/// Per-layer: `noise_std` has one entry per noise site (`depth`), `l2` one
/// per weight matrix (`depth`).
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub layout: Layout,
    pub noise_std: Vec<f64>,
    pub l2: Vec<f64>,
}

/// Addresses one entry of a [`HyperParams`] in its own layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperIndex {
    Noise(usize),
    L2(usize),
}

/// Which families of hyperparameters are tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Families {
    pub input_noise: bool,
    pub hidden_noise: bool,
    pub l2: bool,
}

impl Families {
    pub const NONE: Families = Families {
        input_noise: false,
        hidden_noise: false,
        l2: false,
    };

    pub fn any_noise(&self) -> bool {
        self.input_noise || self.hidden_noise
    }

    pub fn any(&self) -> bool {
        self.any_noise() || self.l2
    }

    /// Whether noise at `site` is tuned.
    pub fn noise_site(&self, site: usize) -> bool {
        if site == 0 {
            self.input_noise
        } else {
            self.hidden_noise
        }
    }
}

impl HyperParams {
    pub fn tied(input_noise: f64, hidden_noise: f64, l2: f64) -> Self {
        Self {
            layout: Layout::Tied,
            noise_std: vec![input_noise, hidden_noise],
            l2: vec![l2],
        }
    }

    pub fn per_layer(noise_std: Vec<f64>, l2: Vec<f64>) -> Self {
        Self {
            layout: Layout::PerLayer,
            noise_std,
            l2,
        }
    }

    /// Same layout and lengths, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            layout: self.layout,
            noise_std: vec![0.0; self.noise_std.len()],
            l2: vec![0.0; self.l2.len()],
        }
    }

    pub fn check_depth(&self, depth: usize) -> Result<()> {
        let (n, l) = match self.layout {
            Layout::Tied => (2, 1),
            Layout::PerLayer => (depth, depth),
        };
        if self.noise_std.len() != n || self.l2.len() != l {
            return Err(Error::Contract(format!(
                "{:?} hyperparameters with {} noise / {} L2 entries do not fit a {depth}-layer model",
                self.layout,
                self.noise_std.len(),
                self.l2.len()
            )));
        }
        Ok(())
    }

    pub fn get(&self, index: HyperIndex) -> f64 {
        match index {
            HyperIndex::Noise(i) => self.noise_std[i],
            HyperIndex::L2(i) => self.l2[i],
        }
    }

    pub fn set(&mut self, index: HyperIndex, value: f64) {
        match index {
            HyperIndex::Noise(i) => self.noise_std[i] = value,
            HyperIndex::L2(i) => self.l2[i] = value,
        }
    }

    pub fn indices(&self) -> Vec<HyperIndex> {
        (0..self.noise_std.len())
            .map(HyperIndex::Noise)
            .chain((0..self.l2.len()).map(HyperIndex::L2))
            .collect()
    }

    /// Entries that belong to tuned families, in [`Self::indices`] order.
    pub fn tuned_indices(&self, families: Families) -> Vec<HyperIndex> {
        self.indices()
            .into_iter()
            .filter(|&ix| match ix {
                HyperIndex::Noise(i) => families.noise_site(i),
                HyperIndex::L2(_) => families.l2,
            })
            .collect()
    }

    /// Names in this layout: `noise_0, noise_hidden, l2` when tied,
    /// `noise_0..noise_{d-1}, l2_1..l2_d` per layer.
    pub fn name(&self, index: HyperIndex) -> String {
        match (self.layout, index) {
            (Layout::Tied, HyperIndex::Noise(0)) => "noise_0".into(),
            (Layout::Tied, HyperIndex::Noise(_)) => "noise_hidden".into(),
            (Layout::Tied, HyperIndex::L2(_)) => "l2".into(),
            (Layout::PerLayer, HyperIndex::Noise(i)) => format!("noise_{i}"),
            (Layout::PerLayer, HyperIndex::L2(i)) => format!("l2_{}", i + 1),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.noise_std.iter().chain(&self.l2).all(|v| v.is_finite())
    }

    /// Per-layer values for a model with `depth` weight matrices. Works for
    /// either layout.
    pub fn per_layer_view(&self, depth: usize) -> Result<HyperParams> {
        self.check_depth(depth)?;
        Ok(match self.layout {
            Layout::PerLayer => self.clone(),
            Layout::Tied => {
                let mut noise = vec![self.noise_std[1]; depth];
                noise[0] = self.noise_std[0];
                HyperParams::per_layer(noise, vec![self.l2[0]; depth])
            }
        })
    }
}

/// Broadcasts tied values to every layer.
pub fn expand_tied(hypers: &HyperParams, depth: usize) -> Result<HyperParams> {
    if hypers.layout != Layout::Tied {
        return Err(Error::Contract("expand_tied on per-layer hyperparameters".into()));
    }
    hypers.per_layer_view(depth)
}

/// Collapses a per-layer hypergradient onto tied slots: a shared value's
/// derivative is the sum over the layers that use it.
pub fn reduce_tied(per_layer: &HyperParams) -> Result<HyperParams> {
    if per_layer.layout != Layout::PerLayer {
        return Err(Error::Contract("reduce_tied expects a per-layer gradient".into()));
    }
    let (first, hidden) = per_layer
        .noise_std
        .split_first()
        .ok_or_else(|| Error::Contract("empty noise gradient".into()))?;
    Ok(HyperParams::tied(
        *first,
        hidden.iter().sum(),
        per_layer.l2.iter().sum(),
    ))
}

/// Brings a per-layer gradient into the layout of `like`.
pub fn to_layout(per_layer: &HyperParams, like: Layout) -> Result<HyperParams> {
    match like {
        Layout::PerLayer => Ok(per_layer.clone()),
        Layout::Tied => reduce_tied(per_layer),
    }
}

/// Clamps every entry at zero. Idempotent; feasible inputs come back
/// bit-equal.
pub fn project(hypers: &HyperParams) -> HyperParams {
    let clamp = |v: &f64| if *v < 0.0 { 0.0 } else { *v };
    HyperParams {
        layout: hypers.layout,
        noise_std: hypers.noise_std.iter().map(clamp).collect(),
        l2: hypers.l2.iter().map(clamp).collect(),
    }
}

/// `Σ_l (λ_l/2)·‖W_l‖²` and its gradient `λ_l·W_l`. Biases and batch-norm
/// parameters are not penalized, so their gradient entries are zero.
pub fn l2_penalty_and_grad(params: &ModelParams, hypers: &HyperParams) -> Result<(f64, ModelParams)> {
    let view = hypers.per_layer_view(params.depth())?;
    if let Some(bad) = view.l2.iter().find(|&&v| v < 0.0 || v.is_nan()) {
        return Err(Error::Contract(format!(
            "negative L2 strength {bad}; hyperparameters must be projected"
        )));
    }
    let mut grad = params.zeros_like();
    let mut penalty = 0.0;
    for ((g, layer), &lambda) in grad.layers.iter_mut().zip(&params.layers).zip(&view.l2) {
        penalty += 0.5 * lambda * layer.w.norm_sq();
        g.w.axpy(lambda, &layer.w);
    }
    Ok((penalty, grad))
}

/// Adds `λ_l·W_l` to a data-fit gradient in place.
pub fn add_l2_grad(grad: &mut ModelParams, params: &ModelParams, hypers: &HyperParams) -> Result<()> {
    let view = hypers.per_layer_view(params.depth())?;
    if let Some(bad) = view.l2.iter().find(|&&v| v < 0.0 || v.is_nan()) {
        return Err(Error::Contract(format!(
            "negative L2 strength {bad}; hyperparameters must be projected"
        )));
    }
    for ((g, layer), &lambda) in grad.layers.iter_mut().zip(&params.layers).zip(&view.l2) {
        if lambda != 0.0 {
            g.w.axpy(lambda, &layer.w);
        }
    }
    Ok(())
}
